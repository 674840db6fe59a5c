"""Cost model vs the live registry, FLOP linearity, benchmark behavior."""

from __future__ import annotations

import numpy as np
import pytest

import gapscan.model as md
import gapscan.profiler as pf
from gapscan.errors import MeasurementError

K_DEFAULT = ((1, 3, 3), (3, 3, 3))


@pytest.mark.parametrize("kw", [
    dict(),
    dict(layers=3),
    dict(gate=True),
    dict(channels=4, state_size=3, views=2, layers=2),
    dict(kernels=((1, 3, 3), (3, 5, 5), (1, 1, 1))),
])
def test_census_matches_live_registry_exactly(kw):
    base = dict(channels=2, state_size=2, layers=1, patch=2, image_size=4,
                views=1, max_visits=3)
    base.update(kw)
    cfg = md.ModelConfig(**base)
    model = md.PatientModel(cfg, seed=0)
    analytic = pf.parameter_census(cfg)
    measured = pf.registry_census(model)
    for bucket, count in measured.items():
        assert analytic.get(bucket, 0) == count, bucket
    assert analytic["total"] == sum(v.size for v in model.params.values())


def test_single_layer_closed_form_at_reference_width():
    # frozen expected counts at d=768, n=16, default kernel pair
    counts = pf.scan_layer_param_counts(768, 16, K_DEFAULT)
    assert counts["scan_projection"] == 768 * 800 + 800
    assert counts["scan_poles"] == 12288
    assert counts["fusion"] == 768 * 36 + 2
    assert sum(counts.values()) == 656675


def test_flops_per_token_closed_form():
    # d=768, n=16: 768*800 + 2*768*16 + 768*16 + 768*36 = 678912
    assert pf.flops_per_token(768, 16, K_DEFAULT) == 678912
    assert pf.flops_per_token(768, 16, K_DEFAULT, gate=True) == \
        678912 + 768 * 768


def test_sequence_flops_linear_with_zero_constant():
    for l1, l2 in ((128, 384), (1, 7), (1000, 24)):
        f1 = pf.sequence_flops(32, 16, K_DEFAULT, l1)
        f2 = pf.sequence_flops(32, 16, K_DEFAULT, l2)
        both = pf.sequence_flops(32, 16, K_DEFAULT, l1 + l2)
        assert both == f1 + f2
    assert pf.sequence_flops(32, 16, K_DEFAULT, 0) == 0


def test_bench_reports_near_linear_scaling():
    out = pf.bench_throughput(lengths=(128, 256, 512), d=8, n=4, repeats=3)
    assert len(out["seconds"]) == 3
    assert all(t > 0 for t in out["seconds"])
    # loose envelope here; the acceptance gate checks the tight one
    assert 0.5 < out["slope"] < 1.5, out


def test_bench_rejects_degenerate_length_grid():
    with pytest.raises(MeasurementError):
        pf.bench_throughput(lengths=(128,))


def test_bench_detects_coarse_timer(monkeypatch):
    fake_t = [0.0]

    def coarse_now():
        fake_t[0] += 5e-9            # all medians collapse to ~5ns
        return fake_t[0]

    monkeypatch.setattr(pf, "_now", coarse_now)
    with pytest.raises(MeasurementError):
        pf.bench_throughput(lengths=(64, 128), d=4, n=2, repeats=2)
