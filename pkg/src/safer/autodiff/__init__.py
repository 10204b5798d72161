"""Reverse-mode automatic differentiation over dense float64 tensors."""

from safer.autodiff import ops
from safer.autodiff.gradcheck import grad_check, numeric_grad
from safer.autodiff.ops import (
    add,
    clamp,
    concat,
    cross_entropy,
    div,
    embedding,
    exp,
    gelu,
    layernorm,
    log,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    sign,
    slice_,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
)
from safer.autodiff.tensor import (
    Graph,
    Node,
    Tensor,
    as_tensor,
    backward,
    counters,
    debug_mode,
    grad,
    no_grad,
    zero_grads,
)
from safer.errors import ContractError

PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "div": div,
    "sub": sub,
    "neg": neg,
    "exp": exp,
    "log": log,
    "gelu": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "mean": mean,
    "sum": sum_,
    "sqrt": sqrt,
    "sign": sign,
    "clamp": clamp,
    "embedding": embedding,
    "cross_entropy": cross_entropy,
}


def forward_primitive(kind: str, inputs, **attrs) -> Tensor:
    """Apply the primitive named ``kind`` to ``inputs`` (op attributes as keywords)."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


__all__ = [
    "Graph", "Node", "PRIMITIVES", "Tensor", "as_tensor", "backward", "counters", "debug_mode",
    "forward_primitive", "grad", "grad_check", "no_grad", "numeric_grad", "ops", "zero_grads",
    "add", "clamp", "concat", "cross_entropy", "div", "embedding", "exp", "gelu", "layernorm",
    "log", "matmul", "mean", "mul", "neg", "reshape", "sign", "slice_", "softmax", "sqrt",
    "sub", "sum_", "transpose",
]
