"""Residual scan blocks over a (d, T, H, W) visit-grid feature volume.

Each block normalizes per voxel, flattens the volume into a token sequence,
runs the interval-aware selective scan, reshapes back, fuses neighborhoods,
adds the per-channel passthrough, and re-enters through a residual.  Two
token orders exist:

* ``visit_major`` (default): all positions of a visit are scanned before the
  next visit; the calendar gap is injected once, at each visit's first token.
* ``position_major``: for every grid position the visits are scanned in a
  run, so nearly every hop crosses a visit boundary and carries its gap.
  This is the deliberately harmful inter-slice ablation order.

Invalid (padded) visit slots are forced to zero on entry and exit, so block
outputs at valid slots do not depend on how much left padding was applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import fusion as fu
from . import scan as sc
from . import tensor as tc
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor

SCAN_ORDERS = ("visit_major", "position_major")


@dataclass
class BlockConfig:
    d: int
    n: int
    max_visits: int
    kernels: tuple[tuple[int, int, int], ...] | None = None
    gamma_init: float = 0.5
    delta_init: float = 0.05
    gate: bool = False
    fuse_in_state_space: bool = False
    scan_order: str = "visit_major"

    def __post_init__(self):
        if self.scan_order not in SCAN_ORDERS:
            raise ConfigurationError(f"unknown scan order {self.scan_order!r}")
        if self.kernels is None:
            self.kernels = fu.clamp_kernels(self.max_visits)
        else:
            self.kernels = tuple(tuple(int(e) for e in k) for k in self.kernels)
        fu.validate_kernels(self.kernels, self.max_visits)


@dataclass
class BlockParams:
    norm_gain: Any              # (d,)
    scan: sc.ScanParams
    fusion: fu.FusionParams
    gate_w: Any = None          # (d, d) when gating is enabled
    gate_b: Any = None          # (d,)


def init_block_params(cfg: BlockConfig, rng: np.random.Generator) -> BlockParams:
    gate_w = gate_b = None
    if cfg.gate:
        gate_w = rng.standard_normal((cfg.d, cfg.d)) / np.sqrt(cfg.d)
        gate_b = np.zeros(cfg.d)
    return BlockParams(
        norm_gain=np.ones(cfg.d),
        scan=sc.init_scan_params(cfg.d, cfg.n, rng,
                                 delta_init=cfg.delta_init,
                                 gamma_init=cfg.gamma_init),
        fusion=fu.init_fusion_params(cfg.d, cfg.kernels, rng),
        gate_w=gate_w,
        gate_b=gate_b,
    )


def token_layout(gaps: np.ndarray, mask: np.ndarray, h: int, w: int,
                 order: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-token gap and validity arrays for one scan order.

    gaps/mask: (B, T) per-visit arrays.  Returns (B, T*h*w) arrays laid out
    to match :func:`flatten_volume`.  Visit-major injects each gap only at
    the visit's first token; position-major repeats it at every token, since
    there every hop lands on a new visit.
    """
    B, T = gaps.shape
    hw = h * w
    if order == "visit_major":
        dt = np.zeros((B, T * hw))
        dt[:, ::hw] = gaps
        valid = np.repeat(mask, hw, axis=1)
    elif order == "position_major":
        dt = np.tile(gaps, (1, hw))
        valid = np.tile(mask, (1, hw))
    else:
        raise ConfigurationError(f"unknown scan order {order!r}")
    return dt, valid


def flatten_volume(v: Tensor, order: str) -> Tensor:
    """(B, d, T, H, W) -> (B, T*H*W, d) in the requested raster order."""
    B, d, T, H, W = v.shape
    if order == "visit_major":
        moved = tc.transpose(v, (0, 2, 3, 4, 1))        # (B,T,H,W,d)
    elif order == "position_major":
        moved = tc.transpose(v, (0, 3, 4, 2, 1))        # (B,H,W,T,d)
    else:
        raise ConfigurationError(f"unknown scan order {order!r}")
    return tc.reshape(moved, (B, T * H * W, d))


def unflatten_tokens(y: Tensor, grid: tuple[int, int, int], order: str) -> Tensor:
    """(B, L, c) -> (B, c, T, H, W), inverse of :func:`flatten_volume`."""
    T, H, W = grid
    B = y.shape[0]
    c = y.shape[-1]
    if order == "visit_major":
        vol = tc.reshape(y, (B, T, H, W, c))
        return tc.transpose(vol, (0, 4, 1, 2, 3))
    if order == "position_major":
        vol = tc.reshape(y, (B, H, W, T, c))
        return tc.transpose(vol, (0, 4, 3, 1, 2))
    raise ConfigurationError(f"unknown scan order {order!r}")


def block_forward(v, gaps: np.ndarray, mask: np.ndarray,
                  params: BlockParams, cfg: BlockConfig, *,
                  time_aware: bool = True,
                  identity_fusion: bool = False,
                  scan_order: str | None = None) -> Tensor:
    """One residual block pass over a feature volume.

    v: (B, d, T, H, W); gaps/mask: (B, T) months and visit validity.
    The three ablation hooks are runtime flags: ``time_aware=False`` makes
    the scan gap-blind, ``identity_fusion=True`` bypasses neighborhood
    fusion, and ``scan_order`` overrides the configured token order.
    """
    v = as_tensor(v)
    if v.ndim != 5:
        raise DimensionError(f"block input must be (B, d, T, H, W), got {v.shape}")
    B, d, T, H, W = v.shape
    if d != cfg.d:
        raise DimensionError(f"volume has {d} channels, block expects {cfg.d}")
    gaps = np.asarray(gaps, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if gaps.shape != (B, T) or mask.shape != (B, T):
        raise DimensionError(
            f"gaps {gaps.shape} / mask {mask.shape} must be ({B}, {T})")
    order = scan_order or cfg.scan_order

    vis = mask[:, None, :, None, None].astype(np.float64)
    v = tc.mul(v, vis)                        # padded slots enter as zeros
    vn = tc.rmsnorm(v, as_tensor(params.norm_gain), axis=1)

    u = flatten_volume(vn, order)
    dt_tok, valid_tok = token_layout(gaps, mask, H, W, order)

    delta_hat, b_in, c_out = sc.project_params(u, params.scan)
    delta = tc.softplus(delta_hat)
    if time_aware:
        dta = sc.time_aware_step(delta, dt_tok, params.scan)
    else:
        dta = delta
    states = sc.scan_core(dta, b_in, u, sc.poles(params.scan), valid_tok)

    if cfg.fuse_in_state_space and not identity_fusion:
        n = cfg.n
        svol = unflatten_tokens(tc.reshape(states, (B, T * H * W, d * n)),
                                (T, H, W), order)
        fused = fu.fuse_states(svol, params.fusion, n)
        states = tc.reshape(
            flatten_volume(fused, order), (B, T * H * W, d, n))
        y = sc.scan_readout(states, c_out, valid_tok)
        h_vol = unflatten_tokens(y, (T, H, W), order)
    else:
        y = sc.scan_readout(states, c_out, valid_tok)
        h_vol = unflatten_tokens(y, (T, H, W), order)
        if not identity_fusion:
            h_vol = fu.fuse(h_vol, params.fusion)

    skip = tc.reshape(as_tensor(params.scan.skip), (1, d, 1, 1, 1))
    out = tc.add(h_vol, tc.mul(vn, skip))

    if cfg.gate:
        if params.gate_w is None or params.gate_b is None:
            raise ConfigurationError("gate enabled but gate parameters missing")
        g_tok = tc.affine(u, as_tensor(params.gate_w), as_tensor(params.gate_b))
        g_vol = unflatten_tokens(tc.silu(g_tok), (T, H, W), order)
        out = tc.mul(out, g_vol)

    out = tc.mul(out, vis)                    # padded slots leave as zeros
    return tc.add(v, out)
