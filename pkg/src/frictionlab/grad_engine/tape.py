"""A small reverse-mode autodiff tape over numpy arrays.

Every op takes ``Tensor``s or plain arrays. When no input is a tracked
``Tensor`` the op is plain numpy and nothing is recorded, so the same model
code serves both training (on a tape) and inference.
"""

from __future__ import annotations

import numpy as np


class Tape:
    """Ordered record of ops; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, callable]] = []

    def watch(self, arrays: dict[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {k: Tensor(v, self, name=k) for k, v in arrays.items()}

    def record(self, out: "Tensor", backward_fn) -> "Tensor":
        self.nodes.append((out, backward_fn))
        return out

    def backward(self, loss: "Tensor") -> None:
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        if not self.nodes:
            raise RuntimeError("backward called before any forward op was recorded")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


class Tensor:
    __slots__ = ("data", "grad", "tape", "name")

    def __init__(self, data, tape: Tape | None = None, name: str = ""):
        self.data = np.asarray(data)
        self.grad = None
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        # never mutate an incoming gradient in place: backward fns may hand
        # over views of shared buffers, so repeated uses rebind instead
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g if g.shape == self.data.shape else np.broadcast_to(g, self.data.shape)
        else:
            self.grad = self.grad + g

    # operator sugar for readability in model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def data(x):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, np.floating):
        return float(x)
    # python scalars stay weakly typed so float32 graphs are not promoted
    return x if isinstance(x, (int, float)) else np.asarray(x)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _push(x, g):
    if isinstance(x, Tensor) and x.tape is not None:
        x.accumulate(g)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------------- elementwise


def add(a, b):
    out = data(a) + data(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(data(a)), np.shape(data(b))

    def back(g):
        _push(a, _unbroadcast(g, sa))
        _push(b, _unbroadcast(g, sb))

    return tape.record(Tensor(out, tape), back)


def neg(a):
    out = -data(a)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, -g))


def mul(a, b):
    ad, bd = data(a), data(b)
    out = ad * bd
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        _push(a, _unbroadcast(g * bd, np.shape(ad)))
        _push(b, _unbroadcast(g * ad, np.shape(bd)))

    return tape.record(Tensor(out, tape), back)


def exp(a):
    out = np.exp(data(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, g * out))


def log(a):
    ad = data(a)
    out = np.log(ad)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, g / ad))


def relu(a):
    ad = data(a)
    mask = ad > 0
    out = ad * mask
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, g * mask))


def total(a):
    """Sum of all entries (a scalar)."""
    ad = data(a)
    out = np.asarray(ad.sum(), dtype=ad.dtype)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, np.broadcast_to(g, ad.shape)))


# ----------------------------------------------------------------- shape / linear


def cast(a, dtype):
    ad = data(a)
    out = np.asarray(ad, dtype=dtype)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, g.astype(ad.dtype)))


def reshape(a, shape):
    ad = data(a)
    out = ad.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(Tensor(out, tape), lambda g: _push(a, g.reshape(ad.shape)))


def transpose(a, axes):
    out = np.transpose(data(a), axes)
    tape = _tape_of(a)
    if tape is None:
        return out
    inv = np.argsort(axes)
    return tape.record(Tensor(out, tape), lambda g: _push(a, np.transpose(g, inv)))


def matmul(a, b):
    """Batched ``a @ b`` with numpy broadcasting over leading axes."""
    ad, bd = data(a), data(b)
    out = ad @ bd
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        if isinstance(a, Tensor):
            _push(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
        if isinstance(b, Tensor):
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            _push(b, gb)

    return tape.record(Tensor(out, tape), back)


def slice_time(a, start: int):
    """``a[:, start:]`` (drop the leading positions of a sequence axis)."""
    ad = data(a)
    out = ad[:, start:]
    tape = _tape_of(a)
    if tape is None:
        return out

    def back(g):
        ga = np.zeros_like(ad)
        ga[:, start:] = g
        _push(a, ga)

    return tape.record(Tensor(out, tape), back)


def embedding(table, ids):
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    td = data(table)
    out = td[ids]
    tape = _tape_of(table)
    if tape is None:
        return out

    def back(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        _push(table, gt)

    return tape.record(Tensor(out, tape), back)


def take_last(a, idx):
    """``a[..., idx]`` elementwise along the last axis (``idx`` has ``a.shape[:-1]``)."""
    ad = data(a)
    out = np.take_along_axis(ad, idx[..., None], axis=-1)[..., 0]
    tape = _tape_of(a)
    if tape is None:
        return out

    def back(g):
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        _push(a, ga)

    return tape.record(Tensor(out, tape), back)


# ----------------------------------------------------------------- fused kernels


def log_softmax(a):
    ad = data(a)
    shifted = ad - ad.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    tape = _tape_of(a)
    if tape is None:
        return out

    def back(g):
        p = np.exp(out)
        _push(a, g - p * g.sum(axis=-1, keepdims=True))

    return tape.record(Tensor(out, tape), back)


def softmax(a):
    ad = data(a)
    e = np.exp(ad - ad.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out

    def back(g):
        _push(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return tape.record(Tensor(out, tape), back)


def layer_norm(a, gain, eps: float = 1e-5):
    """LayerNorm over the last axis with a learned gain and no bias."""
    ad, gd = data(a), data(gain)
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd
    tape = _tape_of(a, gain)
    if tape is None:
        return out

    def back(g):
        if isinstance(gain, Tensor):
            _push(gain, _unbroadcast(g * xhat, gd.shape))
        if isinstance(a, Tensor):
            gx = g * gd
            n = ad.shape[-1]
            ga = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            _push(a, ga)

    return tape.record(Tensor(out, tape), back)
