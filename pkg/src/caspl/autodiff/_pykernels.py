"""Row-wise numeric kernels, numpy implementation.

Every function takes C-contiguous float64 arrays and returns fresh arrays.
``_ckernels`` (Cython) exposes the identical surface; ``kernels`` picks one.
"""
import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def softmax_rows(x, inv_tau):
    z = x * inv_tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g, inv_tau):
    s = (g * y).sum(axis=1, keepdims=True)
    return inv_tau * y * (g - s)


def log_softmax_rows(x, inv_tau):
    z = x * inv_tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_rows_backward(y, g, inv_tau):
    return inv_tau * (g - np.exp(y) * g.sum(axis=1, keepdims=True))


def layer_norm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd.ravel()


def layer_norm_rows_backward(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    n = xhat.shape[1]
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu(x):
    """Return ``(y, t)``; ``t`` is the tanh term reused by the backward pass."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, g):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
