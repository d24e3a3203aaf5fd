"""Parameter update rules: SGD with momentum and Adam.

State buffers are allocated lazily per parameter and always share the
parameter's shape and dtype. ``step`` applies the update in place and then
zeroes the gradients.
"""

import numpy as np

from .errors import GradientError


class Optimizer:
    def __init__(self, params, learning_rate):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = learning_rate

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradientError(
                    f"parameter {i} has no gradient; run backward before step"
                )
        self._update()
        for p in self.params:
            p.grad = None

    def _update(self):
        raise NotImplementedError


class SGDMomentum(Optimizer):
    def __init__(self, params, learning_rate=0.01, momentum=0.9):
        super().__init__(params, learning_rate)
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self):
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += p.grad
            p.data -= (p.data.dtype.type(self.learning_rate) * v).astype(
                p.data.dtype, copy=False
            )


class Adam(Optimizer):
    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def _update(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / bias1
            vhat = v / bias2
            p.data -= (self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype, copy=False
            )


def make_optimizer(kind, params, learning_rate, momentum=0.9):
    """Build an optimizer from its config name: 'adam' or 'sgd-momentum'."""
    if kind == "adam":
        return Adam(params, learning_rate=learning_rate)
    if kind == "sgd-momentum":
        return SGDMomentum(params, learning_rate=learning_rate, momentum=momentum)
    raise ValueError(f"unknown optimizer kind: {kind!r}")
