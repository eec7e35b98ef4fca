"""Dense tensors with tape-based reverse-mode differentiation (NumPy backend).

Every differentiable primitive records a node on the active thread's tape.
``backward`` replays that tape in reverse and then discards it.  Gradients
accumulate into ``Tensor.grad``; callers zero them between optimizer steps.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "TapeError",
    "DimensionError",
    "GradCheckReport",
    "precision",
    "get_dtype",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "matmul",
    "linear",
    "layer_norm",
    "softmax",
    "softmax_cross_entropy",
    "relu",
    "embedding",
    "conv1d",
    "dropout",
    "backward",
    "grad_check",
]

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.tape: Tape | None = None


_state = _State()


def get_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. ``np.float64``)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: "Tensor", inputs: tuple, vjp: Callable) -> None:
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of the primitives executed since the last backward."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.closed = False

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Tape:
    tape = _state.tape
    if tape is None or tape.closed:
        tape = _state.tape = Tape()
    return tape


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype if dtype is not None else _state.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


@dataclass
class Parameter:
    """A named tensor that freeze plans act on."""

    path: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    """Wrap ``out_data`` and, if any input needs a gradient, put a node on the tape."""
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs
    out._tape = None
    if needs:
        tape = _current_tape()
        tape.nodes.append(_Node(out, inputs, vjp))
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (
            _unbroadcast(g * bd, sa) if a.requires_grad else None,
            _unbroadcast(g * ad, sb) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN, so corrupt inputs surface as a non-finite loss
    return _record(np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with NumPy broadcasting."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(np.matmul(ad, bd), (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalization, softmax, losses


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm: last dim {D} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return _record(out.astype(xd.dtype, copy=False), (x, gain, bias), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is (N, V) and ``targets`` holds N class indices.  Positions equal
    to ``ignore_index`` contribute neither to the loss nor to the mean.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (N, V) logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    N, V = logits.shape
    if tgt.shape[0] != N:
        raise DimensionError(f"{N} logit rows but {tgt.shape[0]} targets")
    keep = np.ones(N, dtype=bool) if ignore_index is None else tgt != ignore_index
    bad = keep & ((tgt < 0) | (tgt >= V))
    if bad.any():
        raise IndexError(f"target index {int(tgt[bad][0])} out of range for {V} classes")
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("softmax_cross_entropy: every target is ignored")
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.nonzero(keep)[0]
    nll = lse[rows] - shifted[rows, tgt[rows]]
    loss = np.asarray(nll.sum() / n_keep, dtype=ld.dtype)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, tgt[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / n_keep),)

    return _record(loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# sequence primitives


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range for embedding of {V} rows")
    shape, dtype = weight.shape, weight.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _record(weight.data[ids], (weight,), vjp)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time.  x: (B, T, Cin); weight: (K, Cin, Cout)."""
    B, T, Cin = x.shape
    K, wCin, Cout = weight.shape
    if wCin != Cin:
        raise DimensionError(f"conv1d: input channels {Cin} vs weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    Tp = xp.shape[1]
    if Tp < K:
        raise DimensionError(f"conv1d: padded length {Tp} shorter than kernel {K}")
    T_out = (Tp - K) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)[:, ::stride]  # (B, T_out, Cin, K)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * T_out, K * Cin)
    W2 = weight.data.reshape(K * Cin, Cout)
    out = (cols @ W2).reshape(B, T_out, Cout)
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(B * T_out, Cout)
        gw = (cols.T @ g2).reshape(K, Cin, Cout) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ W2.T).reshape(B, T_out, K, Cin)
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, k : k + stride * (T_out - 1) + 1 : stride] += dcols[:, :, k]
            gx = dxp[:, padding : padding + T] if padding else dxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or tape.closed:
        raise TapeError("backward called on a tensor with no recorded tape")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            t.grad = gi if t.grad is None else t.grad + gi
    tape.closed = True
    tape.nodes.clear()
    if _state.tape is tape:
        _state.tape = None


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    worst: float = 0.0
    worst_path: str | None = None
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward gradients of ``f()`` with central differences.

    Every element is checked unless the parameter set holds more than
    ``max_coords`` elements; then a seeded subsample is drawn with at least
    one coordinate per parameter and the rest allotted by size.  The error for
    a coordinate is ``|a - n| / max(|a|, |n|, floor)``.  Frozen parameters are
    checked like any other.
    """
    if _state.dtype != np.float64 or any(p.data.dtype != np.float64 for p in params):
        raise TypeError("grad_check requires 64-bit mode and 64-bit parameters")
    for p in params:
        p.tensor.grad = None
        p.tensor.requires_grad = True
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    backward(loss)
    analytic = {p.path: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    total = sum(p.size for p in params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p in params:
        flat = p.data.reshape(-1)
        if max_coords is None or total <= max_coords:
            coords = np.arange(flat.size)
        else:
            k = min(flat.size, max(1, (max_coords * flat.size) // total))
            coords = np.sort(rng.choice(flat.size, size=k, replace=False))
        worst = 0.0
        ga = analytic[p.path].reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {p.path}")
            num = (fp - fm) / (2 * step)
            worst = max(worst, _rel_err(float(ga[i]), num, floor))
        report.per_param[p.path] = worst
        report.n_checked += len(coords)
        if worst >= report.worst:
            report.worst, report.worst_path = worst, p.path
    return report
