"""Analytic cost model and scaling micro-benchmark for the scan stack.

Parameter counts are exact closed forms per component, cross-checkable
against the live parameter registry of a built model.  The FLOP model
counts multiply-accumulates per token for the scan path (projection, state
update, readout, fusion), which is linear in sequence length with a zero
constant term.  The benchmark times forward passes over growing sequence
lengths and fits the log-log slope, which should sit near 1 for a
linear-time implementation.
"""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from . import scan as sc
from .errors import MeasurementError
from .model import ModelConfig, PatientModel

_now = time.perf_counter
# medians below this multiple of the clock's stated resolution are noise
_MIN_RESOLUTION_TICKS = 100.0


def scan_layer_param_counts(d: int, n: int,
                            kernels: Sequence[tuple[int, int, int]],
                            gate: bool = False) -> dict[str, int]:
    """Exact parameter count of one block, split by component."""
    counts = {
        "scan_projection": d * (d + 2 * n) + (d + 2 * n),
        "scan_poles": d * n,
        "scan_skip": d,
        "scan_gap_gain": 1,
        "fusion": sum(d * kt * kh * kw for kt, kh, kw in kernels) + len(kernels),
        "norm": d,
    }
    counts["gate"] = d * d + d if gate else 0
    return counts


def parameter_census(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form counts for a whole model, by component and total."""
    d = cfg.channels
    kernels = cfg.block_config().kernels
    per_layer = scan_layer_param_counts(d, cfg.state_size, kernels, cfg.gate)
    census = {k: cfg.layers * v for k, v in per_layer.items()}
    census["encoder"] = cfg.views * (d * cfg.patch ** 2 + d)
    k_h = len(cfg.horizons)
    census["head"] = (d + 1) + k_h * (d + 1)
    census["total"] = sum(census.values())
    return census


_CENSUS_PREFIXES = {
    "encoder": ("enc.",),
    "scan_projection": (".scan.w_proj", ".scan.b_proj"),
    "scan_poles": (".scan.a_log",),
    "scan_skip": (".scan.skip",),
    "scan_gap_gain": (".scan.gamma_logit",),
    "fusion": (".fusion.",),
    "norm": (".norm_gain",),
    "gate": (".gate.",),
    "head": ("head.",),
}


def registry_census(model: PatientModel) -> dict[str, int]:
    """The same component split measured from the live parameter dict."""
    census = {k: 0 for k in _CENSUS_PREFIXES}
    for name, arr in model.params.items():
        for bucket, needles in _CENSUS_PREFIXES.items():
            if any(needle in name for needle in needles):
                census[bucket] += int(np.size(arr))
                break
        else:
            raise MeasurementError(f"parameter {name} fits no census bucket")
    census["total"] = sum(census.values())
    return census


def flops_per_token(d: int, n: int, kernels: Sequence[tuple[int, int, int]],
                    gate: bool = False) -> int:
    """Multiply-accumulates per token of one block's scan path.

    projection d(d+2n), state update 2dn (decay and injection), readout dn,
    depthwise fusion sum_s d*kt*kh*kw; the optional gate adds d*d.
    """
    total = d * (d + 2 * n) + 2 * d * n + d * n
    total += sum(d * kt * kh * kw for kt, kh, kw in kernels)
    if gate:
        total += d * d
    return total


def sequence_flops(d: int, n: int, kernels: Sequence[tuple[int, int, int]],
                   length: int, gate: bool = False) -> int:
    """Per-layer cost of a length-L token sequence: exactly L tokens' worth."""
    return length * flops_per_token(d, n, kernels, gate)


def bench_throughput(lengths: Sequence[int] = (256, 512, 1024, 2048, 4096), *,
                     d: int = 32, n: int = 16, repeats: int = 5,
                     seed: int = 0) -> dict:
    """Forward-only scan timing over sequence lengths.

    Returns per-length median seconds, throughput, and the fitted log-log
    slope of time vs length.  Raises :class:`MeasurementError` when the
    clock is too coarse to trust the medians.
    """
    if len(lengths) < 2 or any(l < 1 for l in lengths):
        raise MeasurementError(f"need two positive lengths, got {lengths}")
    rng = np.random.default_rng(seed)
    params = sc.init_scan_params(d, n, rng)
    resolution = time.get_clock_info("perf_counter").resolution
    medians = []
    for length in lengths:
        seq = sc.TokenSequence(
            tokens=rng.standard_normal((length, d)),
            gaps=np.concatenate([[0.0], rng.choice([12.0, 24.0, 36.0],
                                                   size=length - 1)]),
            valid=np.ones(length, dtype=bool))
        sc.selective_scan(seq, params)          # warm-up
        times = []
        for _ in range(repeats):
            t0 = _now()
            sc.selective_scan(seq, params)
            times.append(_now() - t0)
        medians.append(float(np.median(times)))
    medians_arr = np.asarray(medians)
    if (medians_arr <= 0).any() or \
            medians_arr.min() < _MIN_RESOLUTION_TICKS * resolution:
        raise MeasurementError(
            f"medians {medians} too close to timer resolution {resolution}")
    slope = float(np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)),
                             np.log(medians_arr), 1)[0])
    return {
        "lengths": [int(l) for l in lengths],
        "seconds": medians,
        "tokens_per_second": [int(l / t) for l, t in zip(lengths, medians)],
        "slope": slope,
    }
