"""Parameter storage, seeded initialization, AdamW, gradient clipping."""

import numpy as np

from .autograd import Tensor, default_dtype


class MissingGradError(RuntimeError):
    """An optimizer step found a parameter without a gradient."""


class ParamStore:
    """Named map from dot-separated path to parameter Tensor.

    Iteration is lexicographic by path so that initialization, updates
    and checkpoints all see parameters in the same deterministic order.
    """

    def __init__(self):
        self._params = {}

    def add(self, path, tensor):
        if path in self._params:
            raise ValueError(f"duplicate parameter path {path!r}")
        tensor.requires_grad = True
        self._params[path] = tensor
        return tensor

    def __getitem__(self, path):
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def paths(self):
        return sorted(self._params)

    def items(self):
        return [(p, self._params[p]) for p in self.paths()]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def n_values(self):
        return sum(p.data.size for p in self._params.values())

    def clone_data(self):
        return {path: t.data.copy() for path, t in self._params.items()}


def uniform_init(rng, shape, fan_in):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) in the default dtype."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(default_dtype()))


def zeros_init(shape):
    return Tensor(np.zeros(shape, dtype=default_dtype()))


def ones_init(shape):
    return Tensor(np.ones(shape, dtype=default_dtype()))


def clip_global_norm(store, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm is not None and norm > max_norm > 0:
        factor = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad *= p.dtype.type(factor)
    return norm


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Update per parameter w with gradient g:
        m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
        w <- w - lr * (mhat / (sqrt(vhat) + eps) + wd * w)
    Gradients are cleared after the step.
    """

    def __init__(self, store, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {path: np.zeros_like(p.data) for path, p in store.items()}
        self.v = {path: np.zeros_like(p.data) for path, p in store.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for path, p in self.store.items():
            if p.grad is None:
                raise MissingGradError(f"parameter {path!r} has no gradient")
            g = p.grad
            m = self.m[path]
            v = self.v[path]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data -= (self.lr * upd).astype(p.dtype, copy=False)
            p.grad = None
