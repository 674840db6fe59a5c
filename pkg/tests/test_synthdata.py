"""Cohort generator and bundle format: determinism, labels, roundtrips."""

from __future__ import annotations

import numpy as np
import pytest

import gapscan.arrayio as aio
import gapscan.synthdata as sd
from gapscan.errors import ConfigurationError, DataError


def small_spec(**kw):
    base = dict(seed=42, n_patients=24, image_size=8, views=2, max_visits=5)
    base.update(kw)
    return sd.CohortSpec(**base)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_generation_is_deterministic():
    a = sd.generate_cohort(small_spec())
    b = sd.generate_cohort(small_spec())
    for ra, rb in zip(a, b):
        assert ra.patient_id == rb.patient_id
        assert np.array_equal(ra.times, rb.times)
        assert np.array_equal(ra.images, rb.images)
        assert np.array_equal(ra.views_present, rb.views_present)
        assert (ra.outcome.event, ra.outcome.months) == \
               (rb.outcome.event, rb.outcome.months)
        assert ra.fold == rb.fold


def test_seed_changes_cohort():
    a = sd.generate_cohort(small_spec())
    b = sd.generate_cohort(small_spec(seed=43))
    assert any(not np.array_equal(ra.images, rb.images) for ra, rb in zip(a, b))


def test_case_fraction_extremes():
    none = sd.generate_cohort(small_spec(case_fraction=0.0))
    assert not any(r.outcome.event for r in none)
    full = sd.generate_cohort(small_spec(case_fraction=1.0))
    assert all(r.outcome.event for r in full)


def test_case_count_matches_fraction():
    recs = sd.generate_cohort(small_spec(n_patients=40, case_fraction=0.25))
    assert sum(r.outcome.event for r in recs) == 10


def test_visit_times_use_declared_gaps():
    spec = small_spec()
    for rec in sd.generate_cohort(spec):
        assert rec.times[0] == 0.0
        v = rec.times.size
        assert spec.min_visits <= v <= spec.max_visits
        for g in np.diff(rec.times):
            assert g in spec.gap_choices


def test_full_gap_persistence_repeats_first_interval():
    spec = small_spec(gap_persistence=1.0, min_visits=3)
    seen_cadences = set()
    for rec in sd.generate_cohort(spec):
        gaps = np.diff(rec.times)
        assert (gaps == gaps[0]).all(), gaps
        assert gaps[0] in spec.gap_choices
        seen_cadences.add(float(gaps[0]))
    assert len(seen_cadences) > 1


def test_partial_gap_persistence_still_draws_from_choices():
    spec = small_spec(gap_persistence=0.5, min_visits=4, n_patients=60)
    repeats = fresh = 0
    for rec in sd.generate_cohort(spec):
        gaps = np.diff(rec.times)
        for a, b in zip(gaps, gaps[1:]):
            assert b in spec.gap_choices
            if a == b:
                repeats += 1
            else:
                fresh += 1
    assert repeats > 0 and fresh > 0


def test_event_months_cover_every_horizon_bin():
    recs = sd.generate_cohort(small_spec(n_patients=400, case_fraction=1.0))
    months = np.array([r.outcome.months for r in recs])
    assert (months > 0).all()
    edges = [0.0, 12.0, 24.0, 36.0, 48.0, 60.0]
    counts = np.histogram(months, bins=edges)[0]
    assert (counts > 0).all(), counts


def test_blob_amplitude_recoverable_without_noise():
    # pin severity so the latent at the last visit is known to land in
    # [2.7, 2.79]; the max pixel can undershoot it by at most the
    # half-pixel center offset, a factor exp(-0.5/(2 sigma^2)) ~ 0.895
    spec = small_spec(image_noise=0.0, latent_noise=0.0, view_dropout=0.0,
                      case_fraction=1.0, blob_sigma=1.5,
                      severity_range=(0.9, 0.93))
    for rec in sd.generate_cohort(spec)[:6]:
        for v in range(spec.views):
            peak = rec.images[-1, v].max()
            assert 0.85 * 2.7 <= peak <= 2.79
            assert rec.images[-1, v].min() >= 0.0


def test_amplitude_grows_for_cases():
    spec = small_spec(image_noise=0.0, latent_noise=0.0, view_dropout=0.0,
                      case_fraction=1.0, n_patients=60)
    near_event = 0
    for rec in sd.generate_cohort(spec):
        peaks = [rec.images[i, 0].max() for i in range(rec.times.size)]
        assert (np.diff(peaks) >= 0).all()     # growth never reverses
        # severity anchoring keeps every case on screen at its last visit
        assert peaks[-1] > 0.5
        if rec.outcome.months < 12.0:
            near_event += 1
    assert near_event > 0


def _blob_positions(rec) -> set[int]:
    """argmax voxel per visit, counting only visits with a visible blob."""
    return {int(np.argmax(rec.images[i, 0])) for i in range(rec.times.size)
            if rec.images[i, 0].max() > 0.1}


def test_visit_jitter_moves_the_blob_between_visits():
    kw = dict(image_noise=0.0, latent_noise=0.0, view_dropout=0.0,
              case_fraction=1.0, min_visits=4, n_patients=12,
              severity_range=(0.8, 0.95), growth_range=(0.01, 0.02))
    fixed = 0
    for rec in sd.generate_cohort(small_spec(**kw)):
        tops = _blob_positions(rec)
        if tops:
            assert len(tops) == 1    # fixed placement by default
            fixed += 1
    assert fixed >= 10

    moved = 0
    for rec in sd.generate_cohort(small_spec(**kw, visit_jitter=3.0)):
        moved += len(_blob_positions(rec)) > 1
    assert moved >= 10              # placement varies image to image


def test_exposure_noise_shifts_whole_frames():
    kw = dict(image_noise=0.0, latent_noise=0.0, view_dropout=0.0,
              case_fraction=0.0, n_patients=20, min_visits=3)
    flat = sd.generate_cohort(small_spec(**kw, base_amplitude=0.0))
    assert all(np.ptp(r.images) == 0.0 for r in flat)

    offsets = []
    for rec in sd.generate_cohort(small_spec(**kw, base_amplitude=0.0,
                                             exposure_noise=0.5)):
        for i in range(rec.times.size):
            for v in range(rec.images.shape[1]):
                img = rec.images[i, v]
                assert np.ptp(img) == 0.0   # constant over the frame
                offsets.append(float(img[0, 0]))
    offsets = np.asarray(offsets)
    assert np.ptp(offsets) > 0.5            # but varying image to image
    assert abs(offsets.mean()) < 0.2
    assert 0.3 < offsets.std() < 0.7


def test_view_dropout_bounds():
    all_present = sd.generate_cohort(small_spec(view_dropout=0.0))
    assert all(r.views_present.all() for r in all_present)
    heavy = sd.generate_cohort(small_spec(view_dropout=0.9, n_patients=30))
    frac = np.mean([r.views_present.mean() for r in heavy])
    assert frac < 0.35


def test_folds_stable_and_in_range():
    spec = small_spec(n_patients=60)
    recs = sd.generate_cohort(spec)
    for rec in recs:
        assert 0 <= rec.fold < spec.n_folds
        assert rec.fold == sd.patient_fold(rec.patient_id, spec.n_folds)
    assert len({r.fold for r in recs}) == spec.n_folds


def test_audit_pair_same_pixels_different_event_times():
    a, b = sd.audit_pair(small_spec())
    assert np.array_equal(a.images, b.images)
    assert a.outcome.event and b.outcome.event
    assert a.outcome.months != b.outcome.months
    assert abs(b.outcome.months - 3.0 * a.outcome.months) < 1e-9
    assert np.array_equal(np.diff(a.times), [12.0, 12.0])
    assert np.array_equal(np.diff(b.times), [36.0, 36.0])


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        small_spec(case_fraction=1.5)
    with pytest.raises(ConfigurationError):
        small_spec(min_visits=0)
    with pytest.raises(ConfigurationError):
        small_spec(min_visits=6, max_visits=5)
    with pytest.raises(ConfigurationError):
        small_spec(gap_choices=())
    with pytest.raises(ConfigurationError):
        small_spec(n_folds=0)
    with pytest.raises(ConfigurationError):
        small_spec(gap_persistence=1.5)
    with pytest.raises(ConfigurationError):
        small_spec(severity_range=(0.5, 1.0))
    with pytest.raises(ConfigurationError):
        small_spec(visit_jitter=-0.1)
    with pytest.raises(ConfigurationError):
        small_spec(exposure_noise=-0.1)


# ---------------------------------------------------------------------------
# bundle format
# ---------------------------------------------------------------------------

def test_cohort_roundtrip_is_exact(tmp_path):
    spec = small_spec(n_patients=6)
    recs = sd.generate_cohort(spec)
    sd.save_cohort(tmp_path / "c", recs, spec)
    loaded, meta = sd.load_cohort(tmp_path / "c")
    assert meta["spec"]["seed"] == spec.seed
    assert len(loaded) == len(recs)
    for ra, rb in zip(recs, loaded):
        assert ra.patient_id == rb.patient_id
        assert np.array_equal(ra.times, rb.times)
        # images persist as float32 by design
        assert np.array_equal(np.asarray(ra.images, np.float32),
                              np.asarray(rb.images, np.float32))
        assert np.array_equal(ra.views_present, rb.views_present)
        assert ra.outcome == rb.outcome
        assert ra.fold == rb.fold


def test_two_saves_are_byte_identical(tmp_path):
    spec = small_spec(n_patients=4)
    recs = sd.generate_cohort(spec)
    sd.save_cohort(tmp_path / "a", recs, spec)
    sd.save_cohort(tmp_path / "b", recs, spec)
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes(), name


def test_truncated_payload_raises(tmp_path):
    sd.save_cohort(tmp_path / "c", sd.generate_cohort(small_spec(n_patients=2)))
    victim = next((tmp_path / "c").glob("*.images.bin"))
    victim.write_bytes(victim.read_bytes()[:-8])
    with pytest.raises(DataError, match="bytes"):
        sd.load_cohort(tmp_path / "c")


def test_corrupted_payload_raises(tmp_path):
    sd.save_cohort(tmp_path / "c", sd.generate_cohort(small_spec(n_patients=2)))
    victim = next((tmp_path / "c").glob("*.times.bin"))
    raw = bytearray(victim.read_bytes())
    raw[0] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="checksum"):
        sd.load_cohort(tmp_path / "c")


def test_wrong_format_version_raises(tmp_path):
    sd.save_cohort(tmp_path / "c", sd.generate_cohort(small_spec(n_patients=2)))
    mpath = tmp_path / "c" / aio.MANIFEST_NAME
    mpath.write_text(mpath.read_text().replace(
        '"format_version": 1', '"format_version": 9'))
    with pytest.raises(DataError, match="format_version"):
        sd.load_cohort(tmp_path / "c")


def test_bundle_rejects_unsafe_array_names(tmp_path):
    with pytest.raises(ConfigurationError):
        aio.save_bundle(tmp_path / "x", {"../evil": np.zeros(3)}, kind="t")


def test_bundle_preserves_dtypes_and_scalar_shapes(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
              "b": np.linspace(0, 1, 4),
              "c": np.array([1, 0, 1], dtype=np.int64),
              "d": np.array(0.5)}                  # 0-d must stay 0-d
    aio.save_bundle(tmp_path / "d", arrays, kind="t", meta={"n": 3})
    loaded, meta, kind = aio.load_bundle(tmp_path / "d")
    assert kind == "t" and meta == {"n": 3}
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].shape == arrays[k].shape
        assert np.array_equal(loaded[k], arrays[k])


def test_bundle_kind_mismatch_raises(tmp_path):
    aio.save_bundle(tmp_path / "d", {"a": np.zeros(2)}, kind="checkpoint")
    with pytest.raises(DataError, match="kind"):
        aio.load_bundle(tmp_path / "d", expect_kind="cohort")
