"""Reverse-mode autodiff over float64 numpy arrays."""
from . import kernels
from .checkpoint import load_tensors, save_tensors
from .optim import SGD, Adam, Parameter, cosine_lr, sgd_step
from .tensor import (
    Gradients, Node, Tape, Tensor, active_tape, add, broadcast_to, concat,
    cosine_similarity, cross_entropy, exp, gelu, getitem, kl_divergence,
    l2_normalize, layer_norm, log, log_softmax, matmul, mean, mul, relu,
    reshape, softmax, sub, sum_, take_rows, tanh, transpose,
)

KERNELS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "slice": getitem,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "mean": mean,
    "sum": sum_,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "l2_normalize": l2_normalize,
    "cosine_similarity": cosine_similarity,
    "cross_entropy": cross_entropy,
    "kl_divergence": kl_divergence,
}


def forward(kind, *inputs, **kwargs):
    """Apply the kernel named ``kind``; records on the active tape if any."""
    try:
        fn = KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape, loss, params):
    """Run ``tape`` backward from ``loss``; return ``{param.name: grad}`` for trainable params."""
    grads = tape.backward(loss)
    return grads.for_params([p for p in params if p.trainable])
