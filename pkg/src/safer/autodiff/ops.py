"""Differentiable primitives.

Broadcasting is limited to trailing-axis bias style: the second operand of
an elementwise binary op may have a shape equal to a suffix of the first
operand's shape (a 0-d scalar is the empty suffix). Anything else raises
:class:`DimensionError`.

Each backward closure honours ``per_sample``: for a leaf operand that was
broadcast over leading axes, the gradient keeps axis 0 instead of summing
it away.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from safer.autodiff.tensor import Tensor, as_tensor, record
from safer.errors import ContractError, DimensionError, DomainError

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _need_ps(flag: bool, op: str) -> None:
    if flag:
        raise ContractError(f"{op} cannot produce per-sample gradients for this operand")


def _suffix_ok(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple, per_sample: bool, op: str) -> np.ndarray:
    """Sum ``g`` over the leading axes that ``shape`` was broadcast across."""
    lead = g.ndim - len(shape)
    if per_sample:
        if lead < 1:
            _need_ps(True, op)
        if lead == 1:
            return g
        return g.sum(axis=tuple(range(1, lead)))
    if lead == 0:
        return g
    return g.sum(axis=tuple(range(lead)))


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> bool:
    """Validate operand shapes. Returns True when ``a`` is the broadcast one."""
    if a.shape == b.shape or _suffix_ok(a.shape, b.shape):
        return False
    if _suffix_ok(b.shape, a.shape):
        return True
    raise DimensionError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs, ps):
        return (
            _reduce_to(g, sa, ps[0], "add") if needs[0] else None,
            _reduce_to(g, sb, ps[1], "add") if needs[1] else None,
        )

    return record("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs, ps):
        return (
            _reduce_to(g, sa, ps[0], "sub") if needs[0] else None,
            _reduce_to(-g, sb, ps[1], "sub") if needs[1] else None,
        )

    return record("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g, needs, ps):
        return (
            _reduce_to(g * bd, ad.shape, ps[0], "mul") if needs[0] else None,
            _reduce_to(g * ad, bd.shape, ps[1], "mul") if needs[1] else None,
        )

    return record("mul", (a, b), ad * bd, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")

    def bw(g, needs, ps):
        return (
            _reduce_to(g / bd, ad.shape, ps[0], "div") if needs[0] else None,
            _reduce_to(-g * ad / (bd * bd), bd.shape, ps[1], "div") if needs[1] else None,
        )

    return record("div", (a, b), ad / bd, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g, needs, ps):
        _need_ps(ps[0], "neg")
        return (-g,)

    return record("neg", (a,), -a.data, bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def bw(g, needs, ps):
        _need_ps(ps[0], "exp")
        return (g * y,)

    return record("exp", (a,), y, bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    ad = a.data

    def bw(g, needs, ps):
        _need_ps(ps[0], "log")
        return (g / ad,)

    return record("log", (a,), np.log(ad), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    y = np.sqrt(a.data)

    def bw(g, needs, ps):
        _need_ps(ps[0], "sqrt")
        return (g * 0.5 / y,)

    return record("sqrt", (a,), y, bw)


def sign(a) -> Tensor:
    a = as_tensor(a)

    def bw(g, needs, ps):
        _need_ps(ps[0], "sign")
        return (np.zeros_like(g),)

    return record("sign", (a,), np.sign(a.data), bw)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    if lo_ > hi_:
        raise DomainError(f"clamp: lower bound {lo} exceeds upper bound {hi}")
    mask = (a.data >= lo_) & (a.data <= hi_)

    def bw(g, needs, ps):
        _need_ps(ps[0], "clamp")
        return (g * mask,)

    return record("clamp", (a,), np.clip(a.data, lo_, hi_), bw)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * GELU_COEF
    t += 1.0
    t *= x
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5

    def bw(g, needs, ps):
        _need_ps(ps[0], "gelu")
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        d = x2 * (3.0 * GELU_COEF)
        d += 1.0
        d *= x
        d *= 0.5 * _SQRT_2_OVER_PI
        d *= 1.0 - t * t
        d += 0.5
        d += 0.5 * t
        d *= g
        return (d,)

    return record("gelu", (a,), y, bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g, needs, ps):
        _need_ps(ps[0], "softmax")
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return record("softmax", (a,), y, bw)


def layernorm(x, gamma=None, beta=None, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize along ``axis``; ``gamma``/``beta`` have shape ``[x.shape[axis]]``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    inputs = [x]
    for p, label in ((gamma, "gamma"), (beta, "beta")):
        if p is not None:
            p = as_tensor(p)
            if p.shape != (n,):
                raise DimensionError(f"layernorm: {label} shape {list(p.shape)} does not match axis extent {n}")
            inputs.append(p)
    gamma_t = inputs[1] if gamma is not None else None
    beta_t = inputs[-1] if beta is not None else None

    xm = np.moveaxis(x.data, ax, -1)
    xhat = xm - xm.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    var /= n
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    y = xhat
    if gamma_t is not None:
        y = y * gamma_t.data
    if beta_t is not None:
        y = y + beta_t.data if gamma_t is None else y.__iadd__(beta_t.data)
    out = np.moveaxis(y, -1, ax)

    def bw(g, needs, ps):
        gm = np.moveaxis(g, ax, -1)
        res = []
        dxhat = gm * gamma_t.data if gamma_t is not None else gm
        if needs[0]:
            _need_ps(ps[0], "layernorm")
            proj = np.einsum("...i,...i->...", dxhat, xhat)[..., None]
            proj /= n
            dx = dxhat - dxhat.mean(axis=-1, keepdims=True)
            dx -= xhat * proj
            dx *= inv
            res.append(np.moveaxis(dx, -1, ax))
        else:
            res.append(None)
        k = 1
        for p, term in ((gamma_t, gm * xhat), (beta_t, gm)):
            if p is None:
                continue
            if needs[k]:
                if ps[k]:
                    if term.ndim < 2:
                        _need_ps(True, "layernorm")
                    res.append(term.reshape(term.shape[0], -1, n).sum(axis=1))
                else:
                    res.append(term.reshape(-1, n).sum(axis=0))
            else:
                res.append(None)
            k += 1
        return tuple(res)

    return record("layernorm", tuple(inputs), out, bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {list(a.shape)} to {list(shape)}") from exc
    src = a.shape

    def bw(g, needs, ps):
        _need_ps(ps[0], "reshape")
        return (g.reshape(src),)

    return record("reshape", (a,), y, bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % max(a.ndim, 1) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {list(axes)} invalid for shape {list(a.shape)}")
    inverse = tuple(np.argsort(axes))

    def bw(g, needs, ps):
        _need_ps(ps[0], "transpose")
        return (g.transpose(inverse),)

    return record("transpose", (a,), a.data.transpose(axes), bw)


def slice_(a, key) -> Tensor:
    """Basic (non-advanced) indexing: ints, slices, Ellipsis."""
    a = as_tensor(a)
    parts = key if isinstance(key, tuple) else (key,)
    for k in parts:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise ContractError(f"slice: unsupported index {k!r}")
    try:
        y = a.data[key]
    except IndexError as exc:
        raise DimensionError(f"slice: index {key!r} out of range for shape {list(a.shape)}") from exc
    shape = a.shape

    def bw(g, needs, ps):
        _need_ps(ps[0], "slice")
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return record("slice", (a,), np.array(y, dtype=np.float64), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {[list(t.shape) for t in ts]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g, needs, ps):
        for flag in ps:
            _need_ps(flag, "concat")
        return tuple(np.split(g, bounds, axis=ax))

    return record("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=ax), bw)


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, needs, ps):
        _need_ps(ps[0], "sum")
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), np.asarray(y), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    y = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g, needs, ps):
        _need_ps(ps[0], "mean")
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", (a,), np.asarray(y), bw)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Accepted forms: ``[..., n, k] @ [k, m]`` (shared weight), equal-batch
    ``[..., n, k] @ [..., k, m]``, ``[k] @ [k, m]`` and ``[n, k] @ [k]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    bad = DimensionError(f"matmul: incompatible shapes {list(sa)} and {list(sb)}")
    if a.ndim == 0 or b.ndim == 0:
        raise bad
    if b.ndim == 1:
        if a.ndim != 2 or sa[1] != sb[0]:
            raise bad
    elif a.ndim == 1:
        if b.ndim != 2 or sa[0] != sb[0]:
            raise bad
    elif b.ndim == 2:
        if sa[-1] != sb[0]:
            raise bad
    elif a.ndim != b.ndim or sa[:-2] != sb[:-2] or sa[-1] != sb[-2]:
        raise bad
    ad, bd = a.data, b.data
    y = ad @ bd

    def bw(g, needs, ps):
        ga = gb = None
        if b.ndim == 1:
            _need_ps(ps[0] or ps[1], "matmul")
            if needs[0]:
                ga = np.outer(g, bd)
            if needs[1]:
                gb = ad.T @ g
            return ga, gb
        if a.ndim == 1:
            _need_ps(ps[0] or ps[1], "matmul")
            if needs[0]:
                ga = bd @ g
            if needs[1]:
                gb = np.outer(ad, g)
            return ga, gb
        if needs[0]:
            _need_ps(ps[0], "matmul")
            ga = g @ np.swapaxes(bd, -1, -2)
        if needs[1]:
            if b.ndim == 2:
                k, m = sb
                if ps[1]:
                    if a.ndim < 2:
                        _need_ps(True, "matmul")
                    bsz = ad.shape[0]
                    a3 = ad.reshape(bsz, -1, k)
                    g3 = g.reshape(bsz, -1, m)
                    gb = np.swapaxes(a3, 1, 2) @ g3
                else:
                    gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                _need_ps(ps[1], "matmul")
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record("matmul", (a, b), y, bw)


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; ``indices`` is an integer array."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding: indices must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {list(table.shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"embedding: index out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def bw(g, needs, ps):
        if ps[0]:
            if idx.ndim < 1:
                _need_ps(True, "embedding")
            bsz = idx.shape[0]
            out = np.zeros((bsz,) + shape)
            flat = idx.reshape(bsz, -1)
            gf = g.reshape(bsz, -1, shape[1])
            rows = np.repeat(np.arange(bsz), flat.shape[1])
            np.add.at(out, (rows, flat.reshape(-1)), gf.reshape(-1, shape[1]))
            return (out,)
        out = np.zeros(shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return record("embedding", (table,), table.data[idx], bw)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy on raw logits ``[B, C]`` (or ``[C]`` with a scalar label)."""
    logits = as_tensor(logits)
    lab = np.asarray(labels)
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    lab = lab.reshape(-1)
    if z.ndim != 2 or lab.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: logits {list(logits.shape)} vs labels {list(np.shape(labels))}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ContractError("cross_entropy: labels must be integers")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise DomainError("cross_entropy: label out of range")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"cross_entropy: unknown reduction {reduction!r}")
    n = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(n)
    per = lse - zs[rows, lab]
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = per.sum() * scale

    def bw(g, needs, ps):
        _need_ps(ps[0], "cross_entropy")
        p = np.exp(zs - lse[:, None])
        p[rows, lab] -= 1.0
        d = p * (scale * g)
        return (d.reshape(logits.shape),)

    return record("cross_entropy", (logits,), np.asarray(loss), bw)


def per_sample_cross_entropy(logits: Tensor, labels) -> np.ndarray:
    """Per-row loss values (no graph)."""
    z = logits.data
    lab = np.asarray(labels).reshape(-1)
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    return lse - zs[np.arange(z.shape[0]), lab]
