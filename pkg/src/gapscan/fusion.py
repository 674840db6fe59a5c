"""Multi-scale depthwise 3-D neighborhood fusion over the visit grid.

The scanned feature volume (d, T, H, W) is convolved by a small set of
depthwise kernels of different temporal extents and the branches are blended
by softmax weights:

    h = sum_s beta_s * DWConv3D_s(x),   beta = softmax(alpha)

Filters start as one-hot center taps plus small noise, so an untrained layer
is near identity; with the noise removed it is exactly identity.  Depthwise
grouping keeps channels isolated, and zero same-padding keeps the output on
the input grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor, as_tensor

DEFAULT_FILTER_NOISE = 1e-2


def clamp_kernels(t: int) -> tuple[tuple[int, int, int], ...]:
    """Default kernel set for a grid with ``t`` visit slots.

    The long-range branch wants temporal extent 3 but never more than ``t``,
    and even extents round down to the next odd so zero same-padding stays
    centered: t=1 or 2 -> (1,3,3), t>=3 -> (3,3,3).
    """
    if t <= 0:
        raise DataError(f"visit capacity must be positive, got {t}")
    kt = min(3, t)
    if kt % 2 == 0:
        kt -= 1
    return ((1, 3, 3), (kt, 3, 3))


def validate_kernels(kernels: Sequence[tuple[int, int, int]], t: int) -> None:
    """Reject kernel sets that cannot act on a grid with ``t`` visit slots."""
    if not kernels:
        raise ConfigurationError("fusion needs at least one kernel")
    for k in kernels:
        if len(k) != 3:
            raise ConfigurationError(f"kernel {k} must have three extents")
        if any(e < 1 for e in k):
            raise ConfigurationError(f"kernel {k} has a non-positive extent")
        if any(e % 2 == 0 for e in k):
            raise ConfigurationError(f"kernel {k} has an even extent")
        if k[0] > t:
            raise ConfigurationError(
                f"kernel temporal extent {k[0]} exceeds visit capacity {t}")


@dataclass
class FusionParams:
    """One depthwise filter bank per branch plus the blend logits."""

    filters: list[Any]          # each (d, kt, kh, kw)
    alpha: Any                  # (len(filters),)

    @property
    def kernels(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(tuple(int(e) for e in _shape(f)[1:]) for f in self.filters)


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, (np.ndarray, Tensor)) else np.asarray(x).shape


def init_fusion_params(d: int, kernels: Sequence[tuple[int, int, int]],
                       rng: np.random.Generator,
                       noise: float = DEFAULT_FILTER_NOISE) -> FusionParams:
    """One-hot center-tap filters with N(0, noise) jitter; alpha = 0."""
    filters = []
    for kt, kh, kw in kernels:
        f = noise * rng.standard_normal((d, kt, kh, kw))
        f[:, kt // 2, kh // 2, kw // 2] += 1.0
        filters.append(f)
    return FusionParams(filters=filters, alpha=np.zeros(len(filters)))


def fuse(x, params: FusionParams) -> Tensor:
    """Blend the depthwise branch responses of ``x`` (…, d, T, H, W).

    Accepts (d, T, H, W) or batched (B, d, T, H, W); the temporal extent of
    the input may be shorter than a kernel (zero padding covers the margin),
    so a model built for long records accepts short padded ones unchanged.
    """
    x = as_tensor(x)
    if x.ndim not in (4, 5):
        raise DimensionError(f"fusion input must be 4-D or 5-D, got {x.shape}")
    d = x.shape[0] if x.ndim == 4 else x.shape[1]
    for f in params.filters:
        if _shape(f)[0] != d:
            raise DimensionError(
                f"filter bank {_shape(f)} does not match {d} channels")
    branches = [tc.conv3d_depthwise(x, f) for f in params.filters]
    beta = tc.softmax(as_tensor(params.alpha))
    return tc.weighted_sum(branches, beta)


def fuse_states(states, params: FusionParams, n: int) -> Tensor:
    """Variant acting in state space: states (B, d*n, T, H, W) share each
    channel's filter across its ``n`` state coordinates."""
    reps = [tc.repeat_channels(as_tensor(f), n) for f in params.filters]
    branches = [tc.conv3d_depthwise(states, f) for f in reps]
    beta = tc.softmax(as_tensor(params.alpha))
    return tc.weighted_sum(branches, beta)
