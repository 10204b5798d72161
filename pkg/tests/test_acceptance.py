"""Acceptance criteria 1 to 11, each at its stated tolerance.

Every test prints one ``[criterion N] PASS|FAIL ...`` line straight to the
terminal (bypassing capture) before asserting, so ``pytest -v`` output
doubles as the acceptance report. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from safer.attacks import PRESETS, AttackConfig, pgd, robust_accuracy
from safer.autodiff import PRIMITIVES, Tensor, counters, cross_entropy, grad, grad_check, no_grad, numeric_grad
from safer.cli import main
from safer.data import Dataset, decode_records, encode_records, synth_dataset, train_val_split
from safer.errors import FormatError
from safer.models import AdapterConfig, ViTConfig, build_model, set_trainable, wrap_adapters
from safer.sharpness import (
    SharpnessConfig,
    layer_sharpness_estimator,
    layer_sharpness_oracle,
    ranking_stability,
    spearman,
)
from safer.trainer import SGD, LoopConfig, OptimizerConfig, SaferSchedule, at_step, safer_step, train
from safer.trainer.steps import sam_perturbation

from conftest import SMALL, TOY_ATTACK

# Standard PGD-20 attack: eps 0.03, step 0.007, random start.
STANDARD_ATTACK = AttackConfig()


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"

    return report


# -- 1. gradient correctness ------------------------------------------------------

def _weighted(fn, shape_out_rng):
    """Scalar probe ``sum(W * fn(x))`` with a fixed random weight so no gradient is trivially zero."""
    cache = {}

    def f(*args):
        y = fn(*args)
        if "w" not in cache:
            cache["w"] = shape_out_rng.standard_normal(y.shape)
        return (y * Tensor(cache["w"])).sum()

    return f


def _primitive_cases(rng):
    """(name, function of one tensor, point sampler) for every primitive and every differentiable input."""
    m = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    other, table_idx = m(3, 4), np.array([[0, 2], [4, 2]])
    labels = np.array([1, 0, 3])
    gam, bet = m(4), m(4)
    ln_x, den = m(3, 4), pos(3, 4)
    return [
        ("matmul[a]", lambda t: PRIMITIVES["matmul"](t, Tensor(other)), lambda: m(2, 3)),
        ("matmul[b]", lambda t: PRIMITIVES["matmul"](Tensor(other), t), lambda: m(4, 2)),
        ("add", lambda t: PRIMITIVES["add"](t, Tensor(other)), lambda: m(3, 4)),
        ("add[bias]", lambda t: PRIMITIVES["add"](Tensor(other), t), lambda: m(4)),
        ("sub", lambda t: PRIMITIVES["sub"](Tensor(other), t), lambda: m(3, 4)),
        ("mul", lambda t: PRIMITIVES["mul"](t, Tensor(other)), lambda: m(3, 4)),
        ("div[num]", lambda t: PRIMITIVES["div"](t, Tensor(den)), lambda: m(3, 4)),
        ("div[den]", lambda t: PRIMITIVES["div"](Tensor(other), t), lambda: pos(3, 4)),
        ("neg", PRIMITIVES["neg"], lambda: m(3, 4)),
        ("exp", PRIMITIVES["exp"], lambda: m(3, 4)),
        ("log", PRIMITIVES["log"], lambda: pos(3, 4)),
        ("sqrt", PRIMITIVES["sqrt"], lambda: pos(3, 4)),
        ("gelu", PRIMITIVES["gelu"], lambda: m(3, 4)),
        ("sign", PRIMITIVES["sign"], lambda: m(3, 4)),
        ("clamp", lambda t: PRIMITIVES["clamp"](t, lo=-0.5, hi=0.5), lambda: m(3, 4)),
        ("softmax", lambda t: PRIMITIVES["softmax"](t, axis=-1), lambda: m(3, 4)),
        ("layernorm[x]", lambda t: PRIMITIVES["layernorm"](t, Tensor(gam), Tensor(bet)), lambda: m(3, 4)),
        ("layernorm[gamma]", lambda t: PRIMITIVES["layernorm"](Tensor(ln_x), t, Tensor(bet)), lambda: m(4)),
        ("layernorm[beta]", lambda t: PRIMITIVES["layernorm"](Tensor(ln_x), Tensor(gam), t), lambda: m(4)),
        ("reshape", lambda t: PRIMITIVES["reshape"](t, (4, 3)), lambda: m(3, 4)),
        ("transpose", lambda t: PRIMITIVES["transpose"](t, (1, 0)), lambda: m(3, 4)),
        ("slice", lambda t: PRIMITIVES["slice"](t, (slice(1, 3), slice(None, None, 2))), lambda: m(3, 4)),
        ("concat", lambda t: PRIMITIVES["concat"](t, Tensor(other), axis=0), lambda: m(2, 4)),
        ("mean", lambda t: PRIMITIVES["mean"](t, axis=1), lambda: m(3, 4)),
        ("sum", lambda t: PRIMITIVES["sum"](t, axis=0), lambda: m(3, 4)),
        ("embedding", lambda t: PRIMITIVES["embedding"](t, table_idx), lambda: m(5, 3)),
        ("cross_entropy", lambda t: PRIMITIVES["cross_entropy"](t, labels), lambda: m(3, 4)),
    ]


def test_criterion_01_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    worst = {}
    for name, fn, sample in _primitive_cases(rng):
        f = _weighted(fn, rng)
        worst[name] = max(grad_check(f, sample(), h=1e-5) for _ in range(10))
    missing = set(PRIMITIVES) - {n.split("[")[0] for n in worst}

    # full toy ViT: adversarial loss at a fixed PGD batch, every registry handle, 10 random coordinates each
    model = build_model(ViTConfig(seed=5))
    data = synth_dataset(10, seed=5)
    adv = pgd(model, data.images, data.labels, AttackConfig(steps=3), trace=False).adversarial
    vit_err = 0.0
    for h in model.registry:
        p = model.params[h.param_names[0]]
        base = p.data
        (analytic,) = grad(cross_entropy(model(adv), data.labels), [p])
        coords = rng.choice(base.size, size=min(10, base.size), replace=False)

        def f(t, p=p):
            p.data = t.data
            return cross_entropy(model(adv), data.labels)

        numeric = numeric_grad(f, base, 1e-5, coords)
        p.data = base
        a = analytic.reshape(-1)[coords]
        vit_err = max(vit_err, float(np.max(np.abs(a - numeric) / (np.abs(numeric) + 1e-8))))
    # and with respect to the input image
    x_err = grad_check(lambda t: cross_entropy(model(t), data.labels), adv, h=1e-5,
                       coords=rng.choice(adv.size, size=10, replace=False))
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and vit_err < 1e-4 and x_err < 1e-4 and not missing
    verdict(1, ok, f"primitives max rel err {worst[top]:.2e} ({top}); ViT params {vit_err:.2e}; "
                   f"ViT input {x_err:.2e}; unchecked primitives {sorted(missing) or 'none'}")


# -- 2. estimator / oracle agreement ---------------------------------------------

def test_criterion_02_estimator_oracle_agreement(trained_toy, verdict):
    model, ds, _ = trained_toy
    idx = np.random.default_rng(21).choice(len(ds), size=50, replace=False)
    x, y = ds.images[idx], ds.labels[idx]
    adv = pgd(model, x, y, AttackConfig(seed=21), trace=False).adversarial
    cfg = SharpnessConfig(rho=1e-3, top_k=2)
    est = layer_sharpness_estimator(model, x, y, cfg, adv_images=adv)
    t0 = time.perf_counter()
    orc = layer_sharpness_oracle(model, x, y, cfg, adv_images=adv)
    elapsed = time.perf_counter() - t0
    rho_s = spearman(est.gammas(), orc.gammas())
    same = {h.name for h in est.selected} == {h.name for h in orc.selected}
    verdict(2, rho_s >= 0.8 and same and not orc.failed,
            f"spearman {rho_s:.3f} over {len(est.per_layer)} layers; top-2 estimator "
            f"{[h.name for h in est.selected]} oracle {[h.name for h in orc.selected]}; oracle {elapsed:.0f}s")


# -- 3. SAM geometry ---------------------------------------------------------------

def test_criterion_03_sam_geometry(verdict):
    model = build_model(ViTConfig(seed=3))
    data = synth_dataset(32, seed=3)
    adv = pgd(model, data.images, data.labels, TOY_ATTACK, trace=False).adversarial
    sel = list(model.registry.rankable())
    rho = 0.05
    eps, _, _ = sam_perturbation(model, sel, adv, data.labels, rho)
    dev = max(abs(np.sqrt(sum(float((e**2).sum()) for e in grp)) - rho) for grp in eps)

    a, b = build_model(ViTConfig(seed=3)), build_model(ViTConfig(seed=3))
    at_step(a, SGD(0.9), data.images, data.labels, TOY_ATTACK, np.random.default_rng(9), 0.05)
    safer_step(b, SGD(0.9), data.images, data.labels, list(b.registry), TOY_ATTACK,
               np.random.default_rng(9), 0.0, 0.05)
    bitwise = all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    verdict(3, dev <= 1e-12 and bitwise,
            f"max | ||eps_i|| - rho | = {dev:.1e} over {len(sel)} layers; rho=0 update bitwise equal to AT: {bitwise}")


# -- 4. freezing ---------------------------------------------------------------------

def test_criterion_04_freezing(trained_toy, verdict):
    base, ds, _ = trained_toy
    model = base.copy()
    before = {h.name: model.digest(h) for h in model.registry}
    res = train(model, ds, SaferSchedule(0, 0, 4, reselect_interval=2, top_k=2), TOY_ATTACK,
                OptimizerConfig(lr=0.01), SharpnessConfig(batch_size=50),
                LoopConfig(batch_size=32, eval_robust_every=0, eval_size=32, eval_attack=TOY_ATTACK, seed=4))
    ever = {h.name for _, rep in res.reports for h in rep.selected}
    frozen_same = all(model.digest(h) == before[h.name] for h in model.registry if h.name not in ever)
    chosen_moved = all(model.digest(n) != before[n] for n in ever)
    verdict(4, frozen_same and chosen_moved and len(res.reports) == 2,
            f"selected over the phase {sorted(ever)}; {len(model.registry) - len(ever)} other layers "
            f"bit-identical: {frozen_same}; selected layers changed: {chosen_moved}")


# -- 5. attack feasibility and convergence ----------------------------------------

def test_criterion_05_attack_feasibility_and_convergence(trained_toy, verdict):
    model, _, _ = trained_toy
    val = synth_dataset(256, seed=999, split="test")
    bad = 0
    for name in ("pgd20", "pgd20-l2", "pgd20-eps0.07", "fgsm"):
        cfg = PRESETS[name]
        out = pgd(model, val.images, val.labels, cfg, trace=False)
        d = (out.adversarial - out.clean).reshape(len(val), -1)
        size = np.abs(d).max(axis=1) if cfg.norm == "linf" else np.linalg.norm(d, axis=1)
        bad += int(np.sum((size > cfg.epsilon + 1e-9) | (out.adversarial.min(axis=(1, 2, 3)) < 0)
                          | (out.adversarial.max(axis=(1, 2, 3)) > 1)))
    accs = {s: robust_accuracy(model, val.images, val.labels, replace(PRESETS["pgd20"], steps=s))
            for s in (20, 50, 100)}
    span = 100 * (max(accs.values()) - min(accs.values()))
    verdict(5, bad == 0 and span <= 1.0,
            f"{bad} budget/range violations; robust acc PGD-20/50/100 = "
            f"{'/'.join(f'{100 * a:.2f}' for a in accs.values())}% on {len(val)} samples, span {span:.2f}pp")


# -- 6. ranking stability and sharpness cost --------------------------------------

def _epoch_times(model, ds, n_epoch_samples=None):
    """Wall time of one epoch of plain PGD-AT and of SAFER fine-tuning, interleaved batch by batch."""
    at_model, sf_model = model.copy(), model.copy()
    sel = [sf_model.registry[n] for n in ("patch_embed", "head")]
    set_trainable(sf_model, sel)
    at_opt, sf_opt = SGD(0.9), SGD(0.9)
    t_at = t_sf = 0.0
    n = len(ds) if n_epoch_samples is None else n_epoch_samples
    for b, s in enumerate(range(0, n, 64)):
        x, y = ds.images[s:s + 64], ds.labels[s:s + 64]
        t0 = time.perf_counter()
        at_step(at_model, at_opt, x, y, STANDARD_ATTACK, np.random.default_rng(b), 0.01)
        t1 = time.perf_counter()
        safer_step(sf_model, sf_opt, x, y, sel, STANDARD_ATTACK, np.random.default_rng(b), 0.05, 0.01)
        t2 = time.perf_counter()
        t_at += t1 - t0
        t_sf += t2 - t1
    return t_at, t_sf


@pytest.fixture(scope="module")
def epoch_timing(trained_toy):
    """Both epochs run over a training split of the default synthetic task (2048 samples, 10% held out)."""
    model, _, _ = trained_toy
    train_split, _ = train_val_split(synth_dataset(2048, seed=0), 0.1, 0)
    return _epoch_times(model, train_split), len(train_split)


def test_criterion_06_ranking_stability(trained_toy, epoch_timing, verdict):
    model, ds, _ = trained_toy
    (res,) = ranking_stability(model, ds, SharpnessConfig(top_k=2), draws=5, batch_sizes=(50,),
                               attack=STANDARD_ATTACK, seed=6)
    (_, t_safer), n = epoch_timing
    cost = float(np.median(res.wall_times))
    ratio = cost / t_safer
    verdict(6, res.modal_count >= 4 and ratio <= 0.05,
            f"top-2 sets {res.top_sets}: modal set in {res.modal_count}/5 draws; sharpness {cost:.2f}s "
            f"= {100 * ratio:.1f}% of a {t_safer:.1f}s SAFER epoch on {n} samples")


# -- 7. efficacy ----------------------------------------------------------------------

EFFICACY_SEEDS = (0, 1, 2)
EFFICACY_EPOCHS, EFFICACY_FINETUNE, EFFICACY_CLEAN = 120, 40, 5
# Tolerances on the least-squares change of the seed-mean validation clean
# accuracy across the final third (128 validation samples, so 1 sample = 0.8pp).
NON_DECREASING_TOL = -0.005
PLATEAU_TOL = 0.01


def _efficacy_arm(seed, finetune, n=640, epochs=EFFICACY_EPOCHS, clean=EFFICACY_CLEAN, test_n=512):
    """Train one arm with a matched epoch budget; return (PGD-20 test robust acc, val clean curve)."""
    schedule = SaferSchedule(clean, epochs - clean - finetune, finetune, reselect_interval=10, top_k=2)
    model = build_model(ViTConfig(seed=seed))
    result = train(model, synth_dataset(n, seed=seed), schedule, TOY_ATTACK, OptimizerConfig(lr=0.05),
                   SharpnessConfig(batch_size=50),
                   LoopConfig(batch_size=32, val_fraction=0.2, eval_robust_every=0, eval_size=128, seed=seed))
    test = synth_dataset(test_n, seed=999)
    return robust_accuracy(model, test.images, test.labels, STANDARD_ATTACK), result.log.column("clean_acc")


def _final_third_change(curves):
    tail = np.mean(curves, axis=0)[-(len(curves[0]) // 3):]
    slope = np.polyfit(np.arange(len(tail)), tail, 1)[0]
    return float(slope * (len(tail) - 1))


@pytest.mark.slow
def test_criterion_07_safer_efficacy(verdict):
    t0 = time.perf_counter()
    base = [_efficacy_arm(s, 0) for s in EFFICACY_SEEDS]
    safer = [_efficacy_arm(s, EFFICACY_FINETUNE) for s in EFFICACY_SEEDS]
    elapsed = time.perf_counter() - t0
    rob_base, rob_safer = (float(np.mean([r for r, _ in arm])) for arm in (base, safer))
    d_base, d_safer = (_final_third_change([c for _, c in arm]) for arm in (base, safer))
    ok = (rob_safer >= rob_base and d_safer >= NON_DECREASING_TOL and d_base <= PLATEAU_TOL
          and elapsed < 3600)
    verdict(7, ok, f"mean PGD-20 robust acc SAFER {rob_safer:.4f} vs PGD-AT(SAM) {rob_base:.4f} "
                   f"(per seed {[round(r, 4) for r, _ in safer]} vs {[round(r, 4) for r, _ in base]}); "
                   f"final-third val clean change SAFER {100 * d_safer:+.2f}pp (need >= "
                   f"{100 * NON_DECREASING_TOL:+.1f}), PGD-AT {100 * d_base:+.2f}pp (need <= "
                   f"{100 * PLATEAU_TOL:+.1f}); {elapsed:.0f}s")


# -- 8. cost accounting ------------------------------------------------------------

def test_criterion_08_cost_accounting(trained_toy, epoch_timing, verdict):
    model, ds, _ = trained_toy
    x, y = ds.images[:32], ds.labels[:32]
    m = model.copy()
    counters.reset()
    at_step(m, SGD(), x, y, TOY_ATTACK, np.random.default_rng(0), 0.01)
    n_at = counters.backward
    set_trainable(m, ["head", "patch_embed"])
    counters.reset()
    safer_step(m, SGD(), x, y, [m.registry["head"], m.registry["patch_embed"]], TOY_ATTACK,
               np.random.default_rng(0), 0.05, 0.01)
    n_sf = counters.backward
    (t_at, t_sf), n = epoch_timing
    verdict(8, (n_at, n_sf) == (1, 2) and t_sf <= 1.10 * t_at,
            f"backward passes per step AT {n_at}, SAFER {n_sf}; epoch wall time on {n} samples "
            f"AT {t_at:.1f}s, SAFER {t_sf:.1f}s (ratio {t_sf / t_at:.3f})")


# -- 9. PEFT identity and freezing --------------------------------------------------

@pytest.mark.parametrize("kind", ["lora", "dora"])
def test_criterion_09_peft(kind, verdict):
    base = build_model(SMALL)
    wrapped = wrap_adapters(base, AdapterConfig(kind, rank=2, seed=1))
    data = synth_dataset(48, classes=4, image_size=8, seed=9)
    with no_grad():
        identical = base(data.images).data.tobytes() == wrapped(data.images).data.tobytes()
    bases = [h.adapter_of for h in wrapped.registry if h.is_adapter]
    before = {b: wrapped.digest(b) for b in bases}
    adapters_before = {h.name: wrapped.digest(h) for h in wrapped.registry if h.is_adapter}
    train(wrapped, data, SaferSchedule(0, 1, 2, top_k=2), TOY_ATTACK, OptimizerConfig(lr=0.05),
          SharpnessConfig(batch_size=16, rank_on="adapter"),
          LoopConfig(batch_size=16, eval_robust_every=0, eval_size=8, eval_attack=TOY_ATTACK))
    kept = all(wrapped.digest(b) == before[b] for b in bases)
    moved = sum(wrapped.digest(n) != d for n, d in adapters_before.items())
    verdict(9, identical and kept and moved > 0,
            f"{kind}: init output bit-identical {identical}; {len(bases)} wrapped base layers bit-identical "
            f"after training {kept}; {moved} adapters updated")


# -- 10. data ingestion ---------------------------------------------------------------

def test_criterion_10_data_ingestion(verdict):
    rng = np.random.default_rng(10)
    raw = b"".join(bytes([k % 10]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes() for k in range(25))
    ds = Dataset(*decode_records(raw), source="cifar10-binary")
    round_trip = encode_records(ds) == raw and list(ds.labels) == [k % 10 for k in range(25)]
    errors = []
    for bad, needle in ((raw[:-1], "3073"), (bytes([10]) + raw[1:], "label")):
        try:
            decode_records(bad)
            errors.append(False)
        except FormatError as exc:
            errors.append(needle in str(exc))
    verdict(10, round_trip and all(errors),
            f"25-record fixture round-trips bit-exactly: {round_trip}; truncated and label-10 fixtures "
            f"raise FormatError naming the problem: {errors}")


# -- 11. determinism ---------------------------------------------------------------------

DET_CONFIG = """
[run]
batch_size = 16
eval_robust_every = 1
eval_size = 16
checkpoint_every = 1

[model]
image_size = 8
patch_size = 4
embed_dim = 8
depth = 2
heads = 2
num_classes = 4

[data]
n = 64
test_n = 16
classes = 4

[attack]
steps = 2
alpha = 0.02

[eval_attack]
steps = 2
alpha = 0.02

[schedule]
pretrain_clean_epochs = 1
pretrain_adv_epochs = 1
finetune_epochs = 2
reselect_interval = 1
top_k = 2

[sharpness]
batch_size = 16
"""


def test_criterion_11_determinism(tmp_path, verdict):
    cfg = tmp_path / "det.ini"
    cfg.write_text(DET_CONFIG)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--output-dir", str(out)]) == 0
        ckpt = str(out / "checkpoints" / "final.ckpt")
        assert main(["landscape", "--config", str(cfg), "--output-dir", str(out / "land"), "--layer", "head",
                     "--checkpoint", ckpt, "--resolution", "5", "--batch-size", "8"]) == 0
        assert main(["sweep", "--config", str(cfg), "--output-dir", str(out / "sweep"), "--axis", "layer_count",
                     "--grid", "0,1"]) == 0
        runs.append(out)
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*")
                   if p.suffix in (".csv", ".ckpt") and p.is_file())
    differ = [str(f) for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    verdict(11, bool(files) and not differ,
            f"{len(files)} CSV and checkpoint files compared across two identical runs; differing: {differ or 'none'}")
