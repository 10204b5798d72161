import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safer.autodiff import Tensor, cross_entropy, grad
from safer.data import synth_dataset
from safer.errors import ConfigError, ContractError
from safer.models import LayerHandle, ViTConfig, build_model
from safer.sharpness import (
    SharpnessConfig,
    SharpnessReport,
    ascent_gap,
    low_confidence,
    layer_grad_norms,
    layer_sharpness_estimator,
    layer_sharpness_oracle,
    num_selected,
    rank_layers,
    ranking_stability,
    select_top_k,
    spearman,
)

from conftest import SMALL, LinearChain


def closed_form_norms(w1, w2, x, labels):
    """Per-sample gradient norms of the cross-entropy of ``x W1 W2`` derived by hand."""
    out = np.zeros(2)
    for xi, yi in zip(x, labels):
        z = xi @ w1 @ w2
        p = np.exp(z - z.max())
        p /= p.sum()
        r = p - np.eye(2)[yi]
        out[0] += np.linalg.norm(np.outer(xi, r @ w2.T))
        out[1] += np.linalg.norm(np.outer(xi @ w1, r))
    return out


W1 = np.array([[1.0, 0.5], [-0.3, 0.8]])
W2 = np.array([[0.7, -0.2], [0.1, 0.9]])
X = np.array([[0.2, 0.9], [0.6, 0.1], [0.4, 0.4]])
Y = np.array([1, 0, 1])


def test_estimator_matches_hand_derived_chain_gradients():
    rep = layer_sharpness_estimator(LinearChain(W1, W2), X, Y, SharpnessConfig(), attack=None)
    np.testing.assert_allclose(rep.gammas(), closed_form_norms(W1, W2, X, Y), rtol=1e-12)
    # frozen from the closed form above
    np.testing.assert_allclose(rep.gammas(), [1.0045300565895727, 1.1987145404756334], rtol=1e-12)


def test_oracle_gap_is_first_order_in_rho():
    model = LinearChain(W1, W2)
    est = layer_sharpness_estimator(model, X, Y, SharpnessConfig(), attack=None).gammas()
    errs = []
    for rho in (1e-2, 1e-3):
        orc = layer_sharpness_oracle(model, X, Y, SharpnessConfig(rho=rho, oracle_steps=20), attack=None).gammas()
        errs.append(np.max(np.abs(orc / rho - est)))
    # the remainder shrinks linearly with rho
    assert errs[1] < errs[0] / 5 and errs[1] < 1e-3


@pytest.mark.parametrize("w, rho", [([3.0, 4.0], 0.1), ([1.0, -2.0, 0.5], 0.05), ([0.2, 0.0], 1e-3)])
def test_quadratic_gap_matches_closed_form(w, rho):
    # for L = 1/2 ||w||^2 the ascent follows w itself, so the best gap is rho ||w|| + rho^2 / 2
    p = Tensor(np.array(w), requires_grad=True)
    gap = ascent_gap([p], lambda: (p * p).sum() * 0.5, rho, steps=10, step=rho / 10)
    norm = float(np.linalg.norm(w))
    assert gap == pytest.approx(rho * norm + 0.5 * rho**2, rel=1e-12)
    assert p.data.tolist() == list(w)


def test_quadratic_gap_frozen_value():
    p = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    assert ascent_gap([p], lambda: (p * p).sum() * 0.5, 0.1, 10, 0.01) == pytest.approx(0.505, abs=1e-14)


def test_oracle_gap_vanishes_as_rho_shrinks():
    model = LinearChain(W1, W2)
    gammas = [layer_sharpness_oracle(model, X, Y, SharpnessConfig(rho=r), attack=None).gammas().max()
              for r in (1e-2, 1e-4, 1e-6)]
    assert gammas[0] > gammas[1] > gammas[2] and gammas[2] < 1e-5


def test_per_sample_path_matches_sample_loop(rng):
    model = build_model(SMALL)
    x = rng.random((5, 3, 8, 8))
    labels = np.array([0, 1, 2, 3, 1])
    handles = model.registry.rankable()
    fast = layer_grad_norms(model, x, labels, handles)
    slow = np.zeros(len(handles))
    for i in range(5):
        for j, h in enumerate(handles):
            gs = grad(cross_entropy(model(x[i:i + 1]), labels[i:i + 1], reduction="sum"),
                      [model.params[n] for n in h.param_names])
            slow[j] += math.sqrt(sum(float((g**2).sum()) for g in gs))
    np.testing.assert_allclose(fast, slow, rtol=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 10.0), st.sampled_from([1, 2, 5]))
def test_loss_scale_scales_gammas(scale, microbatch):
    model = LinearChain(W1, W2)
    handles = list(model.registry)
    base = layer_grad_norms(model, X, Y, handles, microbatch)
    np.testing.assert_allclose(layer_grad_norms(model, X, Y, handles, microbatch, scale), scale * base, rtol=1e-12)


def test_microbatch_of_whole_batch_is_batch_gradient_norm():
    model = LinearChain(W1, W2)
    gs = grad(cross_entropy(model(X), Y, reduction="sum"), [model.params["fc1.weight"], model.params["head.weight"]])
    got = layer_grad_norms(model, X, Y, list(model.registry), microbatch=3)
    np.testing.assert_allclose(got, [np.linalg.norm(g) for g in gs], rtol=1e-12)


def test_zero_gradient_gives_zero_gamma_and_flag():
    model = LinearChain(np.zeros((2, 2)), np.zeros((2, 2)))
    rep = layer_sharpness_estimator(model, X, Y, SharpnessConfig(), attack=None)
    assert np.all(rep.gammas() == 0.0) and "all-zero-gradients" in rep.flags
    assert [h.index for h in rep.ranking] == [0, 1]
    orc = layer_sharpness_oracle(model, X, Y, SharpnessConfig(), attack=None)
    assert np.all(orc.gammas() == 0.0)


def test_oracle_restores_weights_and_is_non_negative(small_model, small_data):
    before = small_model.digest()
    rep = layer_sharpness_oracle(small_model, small_data.images[:6], small_data.labels[:6],
                                 SharpnessConfig(rho=0.01, oracle_steps=3), attack=None)
    assert small_model.digest() == before
    assert np.all(rep.gammas() >= 0) and not rep.failed


def test_estimator_leaves_model_untouched(small_model, small_data):
    before = small_model.digest()
    layer_sharpness_estimator(small_model, small_data.images, small_data.labels, SharpnessConfig(),
                              attack=None)
    assert small_model.digest() == before


def test_report_records_batch_and_serialises(small_model, small_data):
    rep = layer_sharpness_estimator(small_model, small_data.images, small_data.labels,
                                    SharpnessConfig(top_k=2), attack=None)
    d = rep.to_dict()
    assert d["batch_size"] == 24 and len(d["selected"]) == 2
    assert d["selected"] == d["ranking"][:2] and len(d["batch_digest"]) == 64
    assert "gamma" in rep.to_table()


def _report(gammas):
    per_layer = [(LayerHandle(i, f"l{i}", "mlp-fc1", 1), g) for i, g in enumerate(gammas)]
    ranking = rank_layers(per_layer)
    return SharpnessReport(per_layer, ranking, ranking[:1], "0" * 64, "estimator")


def test_select_single_sharpest():
    assert [h.index for h in select_top_k(_report([0.5, 2.0, 1.0]), fraction=0.05)] == [1]


def test_ties_break_to_lower_index():
    assert [h.index for h in select_top_k(_report([1.0, 3.0, 3.0, 0.2]), k=2)] == [1, 2]
    assert [h.index for h in rank_layers(_report([2.0, 2.0, 2.0]).per_layer)] == [0, 1, 2]


def test_failed_layers_rank_last():
    assert [h.index for h in rank_layers(_report([float("nan"), 0.1, 0.3]).per_layer)] == [2, 1, 0]


@pytest.mark.parametrize("fraction, n, k", [(0.05, 36, 2), (0.05, 50, 3), (0.05, 18, 1), (0.05, 10, 1),
                                            (1.0, 36, 36), (0.5, 5, 3), (0.25, 6, 2)])
def test_selection_count(fraction, n, k):
    assert num_selected(fraction, n) == k
    assert len(select_top_k(_report(np.arange(n, dtype=float)), fraction=fraction)) == k


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_selection_is_the_top_of_the_ranking(gammas, fraction):
    rep = _report(gammas)
    sel = select_top_k(rep, fraction=fraction)
    assert len(sel) == num_selected(fraction, len(gammas))
    chosen = {h.index for h in sel}
    worst_in = min(gammas[i] for i in chosen)
    assert all(gammas[i] <= worst_in for i in range(len(gammas)) if i not in chosen)


def test_selection_errors():
    with pytest.raises(ConfigError):
        select_top_k(_report([1.0]), fraction=0.0)
    with pytest.raises(ContractError):
        select_top_k(SharpnessReport([], [], [], "", "estimator"), fraction=0.5)


@pytest.mark.parametrize("kw", [dict(fraction=0), dict(rho=0), dict(batch_size=0), dict(rank_on="head")])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        SharpnessConfig(**kw).validate()


def test_ranking_stability_errors(small_model, small_data):
    with pytest.raises(ConfigError):
        ranking_stability(small_model, small_data, SharpnessConfig(), draws=1)
    with pytest.raises(ConfigError):
        ranking_stability(small_model, small_data, SharpnessConfig(), batch_sizes=(50,))


def test_ranking_stability_on_identical_batches(small_model):
    data = synth_dataset(20, classes=4, image_size=8, seed=1)
    idx = [np.arange(10)] * 3
    (res,) = ranking_stability(small_model, data, SharpnessConfig(top_k=2), draws=3, batch_sizes=(10,),
                               attack=None, indices=idx)
    assert res.pair_agreement == 1.0 and res.modal_count == 3
    assert sum(res.selection_frequency.values()) == pytest.approx(2.0)


def test_low_confidence_rule():
    assert low_confidence([[1.0, 1.02, 0.98], [1.01, 0.99, 1.0]], 1.0)  # near-uniform gammas
    assert low_confidence([[5.0, 1.0, 0.2]] * 2, 0.3)  # draws disagree
    assert not low_confidence([[5.0, 1.0, 0.2]] * 2, 1.0)


def test_untrained_model_reports_agreement():
    model = build_model(ViTConfig(seed=0))
    data = synth_dataset(100, seed=0)
    (res,) = ranking_stability(model, data, SharpnessConfig(top_k=2), draws=3, batch_sizes=(20,), attack=None)
    assert 0.0 <= res.pair_agreement <= 1.0 and len(res.top_sets) == 3
    assert isinstance(res.low_confidence, bool)


@pytest.mark.slow
def test_small_and_large_batches_pick_the_same_layers(trained_toy):
    model, ds, _ = trained_toy
    small, large = ranking_stability(model, ds, SharpnessConfig(top_k=2), draws=5, batch_sizes=(50, 500), seed=3)
    agree = sum(a == b for a, b in zip(small.top_sets, large.top_sets))
    assert agree >= 4


def test_spearman_extremes():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
