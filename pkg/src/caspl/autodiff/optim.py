"""Parameters and first-order optimizers."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor. Only trainable parameters take part in gradients."""

    __slots__ = ("name", "_trainable")

    def __init__(self, name, value, trainable=True):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=trainable)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.requires_grad = self._trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.shape)}, trainable={self.trainable})"


def _aligned(params, grads):
    names = {p.name for p in params}
    if len(names) != len(params):
        raise ContractError("duplicate parameter ids in optimizer list")
    extra = set(grads) - names
    missing = {p.name for p in params if p.trainable} - set(grads)
    if extra or missing:
        raise ContractError(
            f"gradient ids do not match parameters: missing={sorted(missing)} extra={sorted(extra)}")
    for p in params:
        if p.name in grads and np.shape(grads[p.name]) != p.shape:
            raise ContractError(f"gradient for {p.name} has shape {np.shape(grads[p.name])}, "
                                f"expected {p.shape}")


def sgd_step(params, grads, learning_rate):
    """One plain SGD update ``value -= lr * grad`` on trainable params, in place."""
    if not learning_rate > 0:
        raise ConfigError(f"learning_rate must be > 0, got {learning_rate}")
    _aligned(params, grads)
    for p in params:
        if p.trainable:
            p.data = p.data - learning_rate * grads[p.name]
    return params


def cosine_lr(base_lr, epoch, epochs):
    """Cosine-annealed rate for 0-based ``epoch`` out of ``epochs``."""
    if epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / epochs))


class SGD:
    """SGD with optional heavy-ball momentum (``v = mu*v + g; p -= lr*v``).

    With ``momentum=0`` every step is exactly :func:`sgd_step`. Frozen
    parameters are refused at construction so they can never be touched.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        if not lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        params = list(params)
        frozen = [p.name for p in params if not p.trainable]
        if frozen:
            raise ContractError(f"frozen parameters passed to optimizer: {frozen}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, grads):
        _aligned(self.params, grads)
        for p in self.params:
            g = grads[p.name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(p.name)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[p.name] = v
                g = v
            p.data = p.data - self.lr * g


class Adam:
    """Adam; used only to pretrain the backbones from scratch."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        params = list(params)
        frozen = [p.name for p in params if not p.trainable]
        if frozen:
            raise ContractError(f"frozen parameters passed to optimizer: {frozen}")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in params}
        self._v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, grads):
        _aligned(self.params, grads)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m = self._m[p.name] = self.b1 * self._m[p.name] + (1.0 - self.b1) * g
            v = self._v[p.name] = self.b2 * self._v[p.name] + (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                upd = upd + self.weight_decay * p.data
            p.data = p.data - self.lr * upd
