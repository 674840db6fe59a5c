"""Selective scan over visit-major token sequences with interval-aware steps.

Each token carries the calendar gap (months) separating its visit from the
previous one; the gap rescales the per-token step size before an exact
zero-order-hold discretization of the underlying diagonal linear ODE.  The
recurrence runs one independent N-dimensional state per channel:

    step      dta = delta * (1 + gamma * gap / tau_min)
    hold      A = exp(lambda * dta),  Bbar = (exp(lambda * dta) - 1) / lambda
    state     x_i = A * x_{i-1} + Bbar * b_i * u_i
    readout   y_i = sum_k c_{i,k} * x_{i,k}

Invalid (padded) tokens leave the state untouched and emit zeros, so a
left-padded sequence produces bit-identical states at its valid positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, DataError, DimensionError, SingularityError
from .tensor import GradTape, Tensor, as_tensor

TAU_MIN_MONTHS = 12.0

# below this |lambda * dta| the closed-form (e^z - 1)/z cancels; switch to series
_SERIES_CUTOFF = 1e-6


def softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ConfigurationError(f"softplus inverse needs y > 0, got {y}")
    return float(np.log(np.expm1(y)))


@dataclass
class ScanParams:
    """Learnable state of one scan layer.

    w_proj/b_proj produce per-token ``[step logit, input gate, output gate]``
    of width d + 2N; ``a_log`` parameterizes the always-negative channel
    poles ``lambda = -exp(a_log)``; ``skip`` is the per-channel passthrough
    applied by the enclosing block; ``gamma_logit`` parameterizes the gap
    sensitivity ``gamma = sigmoid(gamma_logit)`` in (0, 1).
    """

    w_proj: Any  # (d + 2N, d)
    b_proj: Any  # (d + 2N,)
    a_log: Any   # (d, N)
    skip: Any    # (d,)
    gamma_logit: Any  # ()
    tau_min: float = TAU_MIN_MONTHS

    @property
    def d(self) -> int:
        return _shape(self.a_log)[0]

    @property
    def n(self) -> int:
        return _shape(self.a_log)[1]


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, (np.ndarray, Tensor)) else np.asarray(x).shape


def init_scan_params(d: int, n: int, rng: np.random.Generator,
                     delta_init: float = 0.05,
                     gamma_init: float = 0.5) -> ScanParams:
    """Fresh parameter arrays for one scan layer.

    Poles start at lambda = -(1..n) per channel; the step-logit bias puts the
    initial step near ``delta_init``; gate rows are scaled by 1/sqrt(d).
    """
    if d < 1 or n < 1:
        raise ConfigurationError(f"need d >= 1 and n >= 1, got d={d}, n={n}")
    if not 0.0 < gamma_init < 1.0:
        raise ConfigurationError(f"gamma_init must lie in (0, 1), got {gamma_init}")
    w = np.zeros((d + 2 * n, d))
    w[:d] = 0.01 * rng.standard_normal((d, d))
    w[d:] = rng.standard_normal((2 * n, d)) / np.sqrt(d)
    b = np.zeros(d + 2 * n)
    b[:d] = softplus_inverse(delta_init)
    a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1))
    gamma_logit = np.log(gamma_init / (1.0 - gamma_init))
    return ScanParams(
        w_proj=w,
        b_proj=b,
        a_log=a_log,
        skip=np.zeros(d),
        gamma_logit=np.asarray(gamma_logit),
    )


@dataclass
class TokenSequence:
    """One flattened scan input: tokens, per-token gaps, validity.

    ``gaps[i]`` is the calendar interval (months) injected at token i; it is
    zero everywhere except where a token opens a new visit.  The first valid
    token always carries gap 0, and padded positions carry gap 0.
    """

    tokens: np.ndarray          # (L, d)
    gaps: np.ndarray            # (L,)
    valid: np.ndarray = field(default=None)  # (L,) bool

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.gaps = np.asarray(self.gaps, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise DimensionError(f"tokens must be (L, d), got {self.tokens.shape}")
        L = self.tokens.shape[0]
        if self.valid is None:
            self.valid = np.ones(L, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.gaps.shape != (L,) or self.valid.shape != (L,):
            raise DimensionError(
                f"gaps {self.gaps.shape} / valid {self.valid.shape} must be ({L},)")
        if (self.gaps < 0).any():
            raise DataError("negative inter-visit gap")
        if (self.gaps[~self.valid] != 0).any():
            raise DataError("padded tokens must carry gap 0")
        idx = np.flatnonzero(self.valid)
        if idx.size and self.gaps[idx[0]] != 0:
            raise DataError("the first valid token must carry gap 0")


def project_params(u, params: ScanParams):
    """Per-token adaptive quantities ``(step logit, input gate, output gate)``.

    u: (..., d) tokens.  Returns tensors of widths (d, n, n) split from a
    single affine projection.
    """
    d, n = params.d, params.n
    p = tc.affine(u, params.w_proj, params.b_proj)
    return (
        tc.slice_last(p, 0, d),
        tc.slice_last(p, d, d + n),
        tc.slice_last(p, d + n, d + 2 * n),
    )


def time_aware_step(delta, gaps: np.ndarray, params: ScanParams):
    """Rescale steps by true elapsed time: ``delta * (1 + gamma*gap/tau)``.

    ``gaps`` broadcasts over the trailing channel axis of ``delta``; a
    negative gap raises :class:`DataError`.  The result is non-decreasing in
    the gap, with equality only at gap 0.
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    if (gaps < 0).any():
        raise DataError("negative inter-visit gap")
    if gaps.shape != _shape(delta)[:-1]:
        raise DimensionError(
            f"gaps {gaps.shape} do not match steps {_shape(delta)}")
    gamma = tc.sigmoid(as_tensor(params.gamma_logit))
    scale = tc.add(1.0, tc.mul(gamma, gaps[..., None] / params.tau_min))
    return tc.mul(delta, scale)


def _hold(lam: np.ndarray, dta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order hold of dx/dt = lam*x + b*u over one step.

    Returns (A, Bbar) with A = e^(lam*dta) and Bbar = (e^(lam*dta) - 1)/lam,
    using the series (e^z - 1)/z ~ 1 + z/2 below the cancellation cutoff.
    """
    z = lam * dta
    e = np.exp(z)
    small = np.abs(z) < _SERIES_CUTOFF
    zsafe = np.where(small, 1.0, z)
    phi = np.where(small, 1.0 + 0.5 * z, (e - 1.0) / zsafe)
    return e, dta * phi


def discretize(lam, dta) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise ZOH factors for pole array ``lam`` (< 0) and steps ``dta``.

    Raises :class:`SingularityError` when any pole is exactly zero.
    """
    lam = np.asarray(lam, dtype=np.float64)
    dta = np.asarray(dta, dtype=np.float64)
    if (lam == 0).any():
        raise SingularityError("zero-order hold undefined at lambda == 0")
    return _hold(lam, np.broadcast_to(dta, np.broadcast_shapes(lam.shape, dta.shape)))


def scan_core(dta, b_in, u, lam, valid: np.ndarray) -> Tensor:
    """Run the gated recurrence; returns all post-update states.

    dta: (B, L, d), b_in: (B, L, n), u: (B, L, d), lam: (d, n),
    valid: (B, L) bool.  Output: (B, L, d, n).  Invalid tokens carry the
    previous state forward unchanged.
    """
    dta, b_in, u, lam = map(as_tensor, (dta, b_in, u, lam))
    valid = np.asarray(valid, dtype=bool)
    Bn, L, d = u.shape
    if lam.ndim != 2 or lam.shape[0] != d:
        raise DimensionError(f"poles {lam.shape} do not match channels {d}")
    n = lam.shape[1]
    if dta.shape != (Bn, L, d) or b_in.shape != (Bn, L, n) or valid.shape != (Bn, L):
        raise DimensionError(
            f"scan operand shapes disagree: dta {dta.shape}, b_in {b_in.shape}, "
            f"u {u.shape}, valid {valid.shape}")
    if (lam.data >= 0).any():
        raise ConfigurationError("scan poles must be strictly negative")

    lam_d = lam.data
    states = np.zeros((Bn, L, d, n), dtype=np.float64)
    x = np.zeros((Bn, d, n), dtype=np.float64)
    for i in range(L):
        m = valid[:, i]
        if m.any():
            e, bbar = _hold(lam_d[None], dta.data[:, i, :, None])
            x_new = e * x + bbar * b_in.data[:, i, None, :] * u.data[:, i, :, None]
            x = np.where(m[:, None, None], x_new, x)
        states[:, i] = x

    tape = tc._tape_of(dta, b_in, u, lam)
    out = Tensor(states, tape)
    if tape is None:
        return out

    dta_d, b_d, u_d = dta.data, b_in.data, u.data

    def bwd(gstates: np.ndarray):
        gdta = np.zeros_like(dta_d)
        gb = np.zeros_like(b_d)
        gu = np.zeros_like(u_d)
        glam = np.zeros_like(lam_d)
        gx = np.zeros((Bn, d, n), dtype=np.float64)
        for i in range(L - 1, -1, -1):
            gx = gx + gstates[:, i]
            m = valid[:, i]
            if not m.any():
                continue
            x_prev = states[:, i - 1] if i > 0 else np.zeros((Bn, d, n))
            dt_i = dta_d[:, i, :, None]
            e, bbar = _hold(lam_d[None], dt_i)
            inj = b_d[:, i, None, :] * u_d[:, i, :, None]
            gE = gx * x_prev
            gBbar = gx * inj
            mk = m[:, None, None].astype(np.float64)
            gb[:, i] = ((gx * bbar * u_d[:, i, :, None]).sum(axis=1)) * m[:, None]
            gu[:, i] = ((gx * bbar * b_d[:, i, None, :]).sum(axis=2)) * m[:, None]
            # dE/d(dta) = lam*E and dBbar/d(dta) = E exactly
            gdta[:, i] = ((gE * lam_d[None] * e + gBbar * e) * mk).sum(axis=2)
            # dE/dlam = dta*E; dBbar/dlam = (dta*E - Bbar)/lam, series near 0
            z = lam_d[None] * dt_i
            small = np.abs(z) < 1e-4
            direct = (dt_i * e - bbar) / np.where(lam_d[None] == 0, 1.0, lam_d[None])
            series = dt_i ** 2 * (0.5 + z / 3.0 + z ** 2 / 8.0)
            dbbar_dlam = np.where(small, series, direct)
            glam += ((gE * dt_i * e + gBbar * dbbar_dlam) * mk).sum(axis=0)
            gx = np.where(m[:, None, None], gx * e, gx)
        return [(dta, gdta), (b_in, gb), (u, gu), (lam, glam)]

    tape.record(out, bwd)
    return out


def scan_readout(states, c_out, valid: np.ndarray) -> Tensor:
    """Contract states with the per-token output gate; zeros at padding.

    states: (B, L, d, n), c_out: (B, L, n) -> (B, L, d).
    """
    states, c_out = as_tensor(states), as_tensor(c_out)
    valid = np.asarray(valid, dtype=bool)
    Bn, L, d, n = states.shape
    if c_out.shape != (Bn, L, n) or valid.shape != (Bn, L):
        raise DimensionError(
            f"readout shapes disagree: states {states.shape}, gate {c_out.shape}")
    v = valid[:, :, None].astype(np.float64)
    y = np.einsum("bldn,bln->bld", states.data, c_out.data) * v
    tape = tc._tape_of(states, c_out)
    out = Tensor(y, tape)
    if tape is not None:
        sd, cd = states.data, c_out.data

        def bwd(g):
            gm = g * v
            return [
                (states, gm[:, :, :, None] * cd[:, :, None, :]),
                (c_out, np.einsum("bld,bldn->bln", gm, sd)),
            ]

        tape.record(out, bwd)
    return out


def poles(params: ScanParams) -> Tensor:
    """lambda = -exp(a_log), strictly negative by construction."""
    return tc.neg(tc.exp(as_tensor(params.a_log)))


def selective_scan(seq: TokenSequence, params: ScanParams, *,
                   time_aware: bool = True,
                   want_states: bool = False):
    """Full scan over one sequence: project, rescale, hold, recur, read out.

    Returns the post-readout tokens (L, d); with ``want_states`` also the
    raw states (L, d, n) as an ndarray.  ``time_aware=False`` drops the gap
    modulation entirely (the step is exactly ``softplus(step logit)``).
    """
    u = as_tensor(seq.tokens)
    if u.shape[1] != params.d:
        raise DimensionError(f"tokens {u.shape} do not match d={params.d}")
    u3 = tc.reshape(u, (1,) + u.shape)
    delta_hat, b_in, c_out = project_params(u3, params)
    delta = tc.softplus(delta_hat)
    if time_aware:
        dta = time_aware_step(delta, seq.gaps[None, :], params)
    else:
        dta = delta
    states = scan_core(dta, b_in, u3, poles(params), seq.valid[None, :])
    y = scan_readout(states, c_out, seq.valid[None, :])
    y2 = tc.reshape(y, u.shape)
    if want_states:
        return y2, np.asarray(states.data[0])
    return y2
