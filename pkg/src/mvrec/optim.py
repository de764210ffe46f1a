"""First-order optimizers operating in place on Tensor parameters."""
import numpy as np


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    kind = "sgd"

    def __init__(self, params, lr=0.05, momentum=0.9):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        grads = _grads(self.params, grads)
        if self.lr == 0.0:
            return
        for p, v, g in zip(self.params, self._v, grads):
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    kind = "adam"

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError("betas must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._s = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        grads = _grads(self.params, grads)
        if self.lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, s, g in zip(self.params, self._m, self._s, grads):
            m *= self.b1
            m += (1.0 - self.b1) * g
            s *= self.b2
            s += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _grads(params, grads):
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    return grads


def make_optimizer(kind, params, lr, momentum=0.9, betas=(0.9, 0.999)):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr=lr, betas=betas)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(opt, params=None, grads=None):
    if params is not None and [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("parameters are not the ones the optimizer was built with")
    opt.step(grads)
