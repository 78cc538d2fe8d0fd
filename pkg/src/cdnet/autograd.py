"""Reverse-mode automatic differentiation over flat numpy arrays.

A Tensor wraps an ndarray plus an optional gradient; ops build a
computation graph of closures which ``Tensor.backward`` replays in
reverse topological order. Only the operators the dialogue model needs
exist here; the structured ones (masked softmax, segment pooling, the
GRU recurrence) delegate their numeric cores to ``cdnet.kernels`` so
the numba and numpy backends stay interchangeable.

Training runs in float32; the verification suites switch to float64 via
``precision("float64")`` because finite-difference checks are not
trustworthy in single precision.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

PROB_EPS = 1e-7  # clamp for probabilities inside log()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def no_grad():
    """Disable graph recording (forward-only inference)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        self.accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a, c):
    """Multiply by a python constant (stays in the tensor's dtype)."""
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _make(data, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def matmul(a, b, transpose_b=False):
    """Matrix product with leading-batch broadcast; optionally b^T.

    a: [..., m, k]; b: [..., k, n] (or [..., n, k] when transpose_b).
    Either operand may carry fewer leading dims; its gradient is summed
    over the broadcast batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    bd = b.data.swapaxes(-1, -2) if transpose_b else b.data
    if a.data.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}"
                         f"{' (transposed)' if transpose_b else ''}")
    data = np.matmul(a.data, bd)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data) if transpose_b else np.matmul(g, b.data.swapaxes(-1, -2))
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if transpose_b:
                gb = np.matmul(g.swapaxes(-1, -2), a.data)
            else:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def concat_last(parts):
    """Concatenate along the last axis; backward splits the gradient."""
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ValueError(f"concat_last leading dims disagree: {lead} vs {p.shape[:-1]}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[..., off:off + w])
            off += w

    return _make(data, tuple(parts), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(old))

    return _make(data, (a,), backward)


def permute(a, axes):
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def embedding(weight, ids):
    """Row lookup into an embedding table; backward scatter-adds."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
            weight.accumulate(gw)

    return _make(data, (weight,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last dim, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        d = x.shape[-1]
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gy - m1 - xhat * m2))

    return _make(data, (x, gain, bias), backward)


def masked_softmax(logits, allowed):
    """Softmax restricted to allowed entries along the last axis.

    Disallowed entries get weight exactly 0; a row with no allowed entry
    comes out all-zero (padding convention). ``allowed`` is a plain bool
    ndarray, broadcastable to the logits' shape.
    """
    logits = _as_tensor(logits)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), logits.shape)
    L = logits.shape[-1]
    flat = np.ascontiguousarray(logits.data.reshape(-1, L))
    aflat = np.ascontiguousarray(allowed.reshape(-1, L))
    probs = kernels.masked_softmax_fwd(flat, aflat)
    data = probs.reshape(logits.shape)

    def backward(g):
        if logits.requires_grad:
            gl = kernels.masked_softmax_bwd(probs, np.ascontiguousarray(g.reshape(-1, L)))
            logits.accumulate(gl.reshape(logits.shape))

    return _make(data, (logits,), backward)


def segment_pool(x, seg, valid, n_seg, mode="max"):
    """Pool rows that share a segment id, over valid positions only.

    x: [N, L, D] (or [L, D]); seg: int [.., L]; valid: bool [.., L].
    mode "max" routes gradient to the winning position (lowest index on
    ties); mode "mean" spreads it uniformly. Empty segments give zeros.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    seg = np.asarray(seg, dtype=np.int64).reshape(xd.shape[0], xd.shape[1])
    valid = np.asarray(valid, dtype=bool).reshape(xd.shape[0], xd.shape[1])
    if seg[valid].size and (seg[valid].min() < 0 or seg[valid].max() >= n_seg):
        raise ValueError("segment id out of range")
    xd = np.ascontiguousarray(xd)
    if mode == "max":
        out, aux = kernels.segment_max_fwd(xd, seg, valid, n_seg)
    elif mode == "mean":
        out, aux = kernels.segment_mean_fwd(xd, seg, valid, n_seg)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    data = out[0] if squeeze else out

    def backward(g):
        if not x.requires_grad:
            return
        g3 = np.ascontiguousarray((g[None] if squeeze else g))
        if mode == "max":
            gx = kernels.segment_max_bwd(g3, aux, xd.shape[1])
        else:
            gx = kernels.segment_mean_bwd(g3, seg, valid, aux)
        x.accumulate(gx[0] if squeeze else gx)

    return _make(data, (x,), backward)


def gru_sequence(x, lengths, wz, wr, wh, uz, ur, uh, bz, br, bh, reverse=False):
    """One GRU direction over a padded batch; returns all step states.

    x: [N, T, DX]; lengths: int [N]. Steps at or beyond a row's length
    carry the state unchanged, so [:, T-1] (forward) and [:, 0]
    (reverse) hold the state after consuming the whole valid prefix.
    """
    x = _as_tensor(x)
    weights = [_as_tensor(w) for w in (wz, wr, wh, uz, ur, uh, bz, br, bh)]
    lengths = np.asarray(lengths, dtype=np.int64)
    xd = np.ascontiguousarray(x.data)
    wd = [np.ascontiguousarray(w.data) for w in weights]
    hseq, hprev, zs, rs, cs = kernels.gru_fwd(xd, lengths, *wd, reverse)

    def backward(g):
        grads = kernels.gru_bwd(np.ascontiguousarray(g), xd, lengths,
                                hprev, zs, rs, cs,
                                wd[0], wd[1], wd[2], wd[3], wd[4], wd[5],
                                reverse)
        gx = grads[0]
        if x.requires_grad:
            x.accumulate(gx)
        order = (1, 2, 3, 4, 5, 6, 7, 8, 9)  # wz wr wh uz ur uh bz br bh
        for w, gi in zip(weights, order):
            if w.requires_grad:
                w.accumulate(grads[gi])

    return _make(hseq, (x, *weights), backward)


def select_position(x, pos):
    """Take x[:, pos, :] as a differentiable slice."""
    x = _as_tensor(x)
    T = x.shape[1]
    pos = pos % T
    data = x.data[:, pos]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, pos] = g
            x.accumulate(gx)

    return _make(data, (x,), backward)


def index_rows(x, idx):
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate(gx)

    return _make(data, (x,), backward)


def sum_all(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True))

    return _make(data, (a,), backward)


def binary_cross_entropy(p, y):
    """Elementwise -[y log p + (1-y) log(1-p)] with p clamped away from {0,1}."""
    p = _as_tensor(p)
    y = np.asarray(y, dtype=p.dtype)
    eps = p.dtype.type(PROB_EPS)
    pc = np.clip(p.data, eps, 1 - eps)
    data = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))

    def backward(g):
        if p.requires_grad:
            inside = (p.data > eps) & (p.data < 1 - eps)
            p.accumulate(g * inside * (pc - y) / (pc * (1 - pc)))

    return _make(data, (p,), backward)


def softmax_cross_entropy(logits, gold):
    """Per-row -log softmax(logits)[gold]; softmax applied internally."""
    logits = _as_tensor(logits)
    gold = np.asarray(gold, dtype=np.int64)
    M, C = logits.shape
    if gold.min() < 0 or gold.max() >= C:
        raise ValueError("gold index out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    data = -np.log(np.maximum(probs[np.arange(M), gold], logits.dtype.type(PROB_EPS)))

    def backward(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(M), gold] -= 1
            logits.accumulate(gl * g[:, None])

    return _make(data, (logits,), backward)


def dropout(x, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    x = _as_tensor(x)
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return mul(x, Tensor(keep))
