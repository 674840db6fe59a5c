"""Minimal dense-tensor core with tape-based reverse-mode differentiation.

Tensors wrap a read-only numpy array (float64 by default, float32 opt-in).
A :class:`GradTape` records every op that touches a taped tensor; calling
``backward`` on a scalar walks the records in reverse and accumulates one
adjoint per registered parameter.  There is a single gradient engine: every
model variant and ablation differentiates through the same tape, and each
op's hand-written adjoint is validated by :func:`grad_check` (central
differences).

Only the broadcasting the downstream modules actually use is supported;
anything else raises :class:`~gapscan.errors.DimensionError`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    EmptyReductionError,
    NumericError,
    TapeError,
)

_ids = itertools.count()

_FLOAT_DTYPES = (np.float32, np.float64)


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


class Tensor:
    """Immutable dense array, optionally attached to a gradient tape."""

    __slots__ = ("data", "tape", "_id")

    def __init__(self, data, tape: "GradTape | None" = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = _readonly(arr)
        self.tape = tape
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        taped = "taped" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {taped})"


class GradTape:
    """Record of differentiable ops, replayed in reverse by ``backward``.

    Parameters are registered by name; after ``backward`` every registered
    parameter has an adjoint of identical shape (zeros when the parameter
    did not reach the loss).  Running ``backward`` twice without recording
    a new forward op raises :class:`TapeError`.
    """

    def __init__(self):
        self._nodes: list[tuple[int, Callable[[np.ndarray], list]]] = []
        self._params: dict[str, Tensor] = {}
        self._spent = False
        self.grads: dict[str, np.ndarray] | None = None

    def parameter(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(array, tape=self)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], list]) -> None:
        """Append one op record.  ``backward(g)`` must return a list of
        ``(input_tensor, adjoint_contribution)`` pairs."""
        self._nodes.append((out._id, backward))
        self._spent = False

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if self._spent:
            raise TapeError("backward called twice without a new forward")
        if loss.tape is not self:
            raise TapeError("loss does not belong to this tape")
        if loss.shape != ():
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss._id: np.ones((), dtype=loss.dtype)}
        for out_id, fn in reversed(self._nodes):
            g = adj.pop(out_id, None)
            if g is None:
                continue
            for tensor, contrib in fn(g):
                if tensor.tape is not self:
                    continue
                prev = adj.get(tensor._id)
                adj[tensor._id] = contrib if prev is None else prev + contrib
        grads: dict[str, np.ndarray] = {}
        for name, p in self._params.items():
            g = adj.get(p._id)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"adjoint shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
                )
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        self._spent = True
        self.grads = grads
        return grads


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands belong to different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        sa, sb = a.shape, b.shape
        tape.record(out, lambda g: [(a, _unbroadcast(g, sa)), (b, _unbroadcast(g, sb))])
    return out


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def neg(a) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(-a.data, tape)
    if tape is not None:
        tape.record(out, lambda g: [(a, -g)])
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
        tape.record(
            out,
            lambda g: [(a, _unbroadcast(g * bd, sa)), (b, _unbroadcast(g * ad, sb))],
        )
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    y = np.exp(a.data)
    out = Tensor(y, tape)
    if tape is not None:
        tape.record(out, lambda g: [(a, g * y)])
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    # 1/(1+e^-x) computed via tanh for symmetric overflow safety
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(y, tape)
    if tape is not None:
        tape.record(out, lambda g: [(a, g * y * (1.0 - y))])
    return out


_SOFTPLUS_CUTOFF = 30.0  # exp(30) ~ 1e13: softplus(x) == x to double precision


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > _SOFTPLUS_CUTOFF, x, np.log1p(np.exp(np.minimum(x, _SOFTPLUS_CUTOFF))))


def softplus(a) -> Tensor:
    """log(1 + e^x); returns x itself beyond the overflow cutoff."""
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(_softplus(a.data), tape)
    if tape is not None:
        ad = a.data
        tape.record(out, lambda g: [(a, g * 0.5 * (1.0 + np.tanh(0.5 * ad)))])
    return out


def logsigmoid(a) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), stable at both tails."""
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(-_softplus(-a.data), tape)
    if tape is not None:
        ad = a.data
        # d/dx log sigmoid(x) = sigmoid(-x)
        tape.record(out, lambda g: [(a, g * 0.5 * (1.0 + np.tanh(-0.5 * ad)))])
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(a.data * s, tape)
    if tape is not None:
        ad = a.data
        tape.record(out, lambda g: [(a, g * (s + ad * s * (1.0 - s)))])
    return out


def softmax(a) -> Tensor:
    """Softmax over a 1-D vector with max subtraction."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise DimensionError(f"softmax expects a 1-D vector, got shape {a.shape}")
    tape = _tape_of(a)
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = Tensor(y, tape)
    if tape is not None:
        tape.record(out, lambda g: [(a, y * (g - float(g @ y)))])
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.data @ b.data, tape)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, lambda g: [(a, g @ bd.T), (b, ad.T @ g)])
    return out


def affine(x, w, b) -> Tensor:
    """``x @ w.T + b`` contracting the last axis of ``x``.

    x: (..., din), w: (dout, din), b: (dout,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
        raise DimensionError(f"affine weights {w.shape} / bias {b.shape} mismatch")
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"affine input {x.shape} does not match weights {w.shape}")
    tape = _tape_of(x, w, b)
    out = Tensor(x.data @ w.data.T + b.data, tape)
    if tape is not None:
        xd, wd = x.data, w.data

        def bwd(g):
            gx = g @ wd
            flat_g = g.reshape(-1, g.shape[-1])
            flat_x = xd.reshape(-1, xd.shape[-1])
            return [(x, gx), (w, flat_g.T @ flat_x), (b, flat_g.sum(axis=0))]

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.reshape(shape), tape)
    if tape is not None:
        orig = a.shape
        tape.record(out, lambda g: [(a, g.reshape(orig))])
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.transpose(axes), tape)
    if tape is not None:
        inverse = np.argsort(axes)
        tape.record(out, lambda g: [(a, g.transpose(inverse))])
    return out


def slice_last(a, lo: int, hi: int) -> Tensor:
    """Slice [lo:hi] along the last axis."""
    a = as_tensor(a)
    if not (0 <= lo <= hi <= a.shape[-1]):
        raise DimensionError(f"slice [{lo}:{hi}] out of range for shape {a.shape}")
    tape = _tape_of(a)
    out = Tensor(a.data[..., lo:hi], tape)
    if tape is not None:
        shape = a.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[..., lo:hi] = g
            return [(a, full)]

        tape.record(out, bwd)
    return out


def scatter_add_rows(x, index: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``x`` into ``n_rows`` buckets given by ``index``.

    x: (n, ...), index: (n,) ints in [0, n_rows).  Rows sharing an index
    are added; untouched buckets stay zero.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"index shape {index.shape} does not match rows {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise DimensionError("scatter index out of range")
    tape = _tape_of(x)
    out_data = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out_data, index, x.data)
    out = Tensor(out_data, tape)
    if tape is not None:
        tape.record(out, lambda g: [(x, g[index])])
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.asarray(a.data.sum()), tape)
    if tape is not None:
        shape, dt = a.shape, a.dtype
        tape.record(out, lambda g: [(a, np.broadcast_to(g, shape).astype(dt, copy=True))])
    return out


def sum_axes(a, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims), tape)
    if tape is not None:
        shape = a.shape

        def bwd(g):
            gk = g if keepdims else np.expand_dims(g, axes)
            return [(a, np.broadcast_to(gk, shape).copy())]

        tape.record(out, bwd)
    return out


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.cumsum(a.data, axis=axis), tape)
    if tape is not None:
        def bwd(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            return [(a, rev)]

        tape.record(out, bwd)
    return out


def masked_mean(x, mask: np.ndarray, axis: int) -> Tensor:
    """Mean over ``axis`` restricted to positions where ``mask`` is true.

    ``mask`` has shape ``(x.shape[0], x.shape[axis])`` (leading batch form)
    or ``(x.shape[axis],)``.  A row whose mask is entirely false raises
    :class:`EmptyReductionError`.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    axis = axis % x.ndim
    if mask.ndim == 1:
        if mask.shape[0] != x.shape[axis]:
            raise DimensionError(f"mask {mask.shape} does not match axis {axis} of {x.shape}")
        if not mask.any():
            raise EmptyReductionError("masked_mean over an all-false mask")
        mshape = [1] * x.ndim
        mshape[axis] = mask.shape[0]
        m = mask.reshape(mshape)
        counts = np.asarray(mask.sum(), dtype=x.dtype)
        cshape = ()
    elif mask.ndim == 2:
        if axis == 0:
            raise DimensionError("batched mask cannot reduce axis 0")
        if mask.shape != (x.shape[0], x.shape[axis]):
            raise DimensionError(f"mask {mask.shape} does not match {x.shape} on axis {axis}")
        if not mask.any(axis=1).all():
            raise EmptyReductionError("masked_mean row with an all-false mask")
        mshape = [1] * x.ndim
        mshape[0] = mask.shape[0]
        mshape[axis] = mask.shape[1]
        m = mask.reshape(mshape)
        counts = mask.sum(axis=1).astype(x.dtype)
        cshape = [1] * (x.ndim - 1)
        cshape[0] = mask.shape[0]
        counts = counts.reshape(cshape)
    else:
        raise DimensionError(f"mask must be 1-D or 2-D, got shape {mask.shape}")
    tape = _tape_of(x)
    out_data = (x.data * m).sum(axis=axis) / counts
    out = Tensor(out_data, tape)
    if tape is not None:
        def bwd(g):
            gx = np.expand_dims(g / counts, axis) * m
            return [(x, np.broadcast_to(gx, x.shape).copy())]

        tape.record(out, bwd)
    return out


def weighted_sum(tensors: Sequence[Tensor], weights) -> Tensor:
    """sum_i weights[i] * tensors[i] over same-shaped tensors."""
    tensors = [as_tensor(t) for t in tensors]
    weights = as_tensor(weights)
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise DimensionError(f"need one weight per tensor, got {weights.shape} for {len(tensors)}")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise DimensionError("weighted_sum operands must share a shape")
    tape = _tape_of(*tensors, weights)
    out_data = np.zeros(base, dtype=tensors[0].dtype)
    for w, t in zip(weights.data, tensors):
        out_data += w * t.data
    out = Tensor(out_data, tape)
    if tape is not None:
        datas = [t.data for t in tensors]
        wd = weights.data

        def bwd(g):
            contribs = [(t, wd[i] * g) for i, t in enumerate(tensors)]
            gw = np.array([float((g * d).sum()) for d in datas], dtype=wd.dtype)
            contribs.append((weights, gw))
            return contribs

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# depthwise 3-D convolution (zero same-padding, one filter per channel)
# ---------------------------------------------------------------------------

def conv3d_depthwise(x, w) -> Tensor:
    """Depthwise 3-D convolution with zero same-padding.

    x: (B, C, T, H, W) or (C, T, H, W); w: (C, kt, kh, kw) with odd extents.
    Channel c of the output depends only on channel c of the input.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 4
    if w.ndim != 4:
        raise DimensionError(f"filters must be (C, kt, kh, kw), got {w.shape}")
    if x.ndim not in (4, 5):
        raise DimensionError(f"input must be (B, C, T, H, W) or (C, T, H, W), got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    C = w.shape[0]
    if xd.shape[1] != C:
        raise DimensionError(f"input has {xd.shape[1]} channels, filters have {C}")
    kt, kh, kw = w.shape[1:]
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel extents must be odd, got {(kt, kh, kw)}")
    B, _, T, H, W = xd.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    pad = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=xd.dtype)
    pad[:, :, pt:pt + T, ph:ph + H, pw:pw + W] = xd
    out_data = np.zeros((B, C, T, H, W), dtype=xd.dtype)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                out_data += w.data[:, a, b, c][None, :, None, None, None] * \
                    pad[:, :, a:a + T, b:b + H, c:c + W]
    tape = _tape_of(x, w)
    out = Tensor(out_data[0] if squeeze else out_data, tape)
    if tape is not None:
        wd = w.data

        def bwd(g):
            gb = g[None] if squeeze else g
            gpad = np.zeros_like(pad)
            gw = np.zeros_like(wd)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gpad[:, :, a:a + T, b:b + H, c:c + W] += \
                            wd[:, a, b, c][None, :, None, None, None] * gb
                        gw[:, a, b, c] = (pad[:, :, a:a + T, b:b + H, c:c + W] * gb) \
                            .sum(axis=(0, 2, 3, 4))
            gx = gpad[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
            return [(x, gx[0] if squeeze else gx), (w, gw)]

        tape.record(out, bwd)
    return out


def repeat_channels(w, n: int) -> Tensor:
    """Repeat each filter n times along axis 0 (weight sharing across the
    repeated copies; adjoints sum back)."""
    w = as_tensor(w)
    tape = _tape_of(w)
    out = Tensor(np.repeat(w.data, n, axis=0), tape)
    if tape is not None:
        C = w.shape[0]
        rest = w.shape[1:]
        tape.record(out, lambda g: [(w, g.reshape((C, n) + rest).sum(axis=1))])
    return out


# ---------------------------------------------------------------------------
# per-position RMS normalization over the channel axis
# ---------------------------------------------------------------------------

_RMS_EPS = 1e-8


def rmsnorm(x, gain, axis: int = 1) -> Tensor:
    """x / sqrt(mean_c x^2 + eps) * gain, normalizing over ``axis``.

    An exactly-zero position stays exactly zero, which keeps padded visits
    inert through the block stack.
    """
    x, gain = as_tensor(x), as_tensor(gain)
    axis = axis % x.ndim
    d = x.shape[axis]
    if gain.shape != (d,):
        raise DimensionError(f"gain shape {gain.shape} does not match axis {axis} of {x.shape}")
    gshape = [1] * x.ndim
    gshape[axis] = d
    gb = gain.data.reshape(gshape)
    ms = (x.data ** 2).mean(axis=axis, keepdims=True)
    r = np.sqrt(ms + _RMS_EPS)
    out = Tensor(x.data / r * gb, tape := _tape_of(x, gain))
    if tape is not None:
        xd = x.data

        def bwd(g):
            ggain = (g * xd / r).sum(axis=tuple(i for i in range(x.ndim) if i != axis))
            s = (g * gb * xd).sum(axis=axis, keepdims=True)
            gx = g * gb / r - xd * s / (d * r ** 3)
            return [(x, gx), (gain, ggain)]

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[dict[str, Tensor]], Tensor],
               params: dict[str, np.ndarray],
               step: float = 1e-5) -> dict[str, float]:
    """Compare tape adjoints of ``fn`` against central differences.

    ``fn`` maps a dict of tensors to a scalar Tensor and is re-evaluated
    with perturbed constants for the numeric side.  Returns, per parameter,
    ``max |analytic - numeric| / max(1, |numeric|)`` over its entries.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tape = GradTape()
    taped = {k: tape.parameter(k, v) for k, v in arrays.items()}
    out = fn(taped)
    if out.shape != ():
        raise DimensionError(f"grad_check needs a scalar objective, got shape {out.shape}")
    analytic = tape.backward(out)

    def evaluate(current: dict[str, np.ndarray]) -> float:
        return float(fn({k: Tensor(v) for k, v in current.items()}).data)

    errs: dict[str, float] = {}
    for name, base in arrays.items():
        numeric = np.zeros_like(base)
        work = {k: v.copy() for k, v in arrays.items()}
        for idx in np.ndindex(base.shape):
            work[name][idx] = base[idx] + step
            hi = evaluate(work)
            work[name][idx] = base[idx] - step
            lo = evaluate(work)
            work[name][idx] = base[idx]
            numeric[idx] = (hi - lo) / (2.0 * step)
        diff = np.abs(analytic[name] - numeric)
        denom = np.maximum(1.0, np.abs(numeric))
        errs[name] = float((diff / denom).max()) if base.size else 0.0
    return errs
