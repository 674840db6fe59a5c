"""Synthetic longitudinal imaging cohorts with interval-dependent outcomes.

Each patient carries a latent lesion amplitude sampled at irregular visit
times.  Cases grow linearly at a hidden per-month rate and the event fires
when the latent crosses a threshold, so the months-to-event after the last
visit is a function of both the amplitudes *and* the elapsed time between
them: two patients with identical images but different visit spacing have
different true risk.  Controls stay flat and are censored at a random
follow-up.  Images render the latent as a Gaussian blob per view over pixel
noise; the blob center is fixed per patient.  Two optional per-image
nuisances model acquisition variability: a positioning offset of the center
(``visit_jitter``) and a constant exposure offset over the whole frame
(``exposure_noise``).

Cohorts serialize through :mod:`gapscan.arrayio`, so a dataset written
twice from the same spec is byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import arrayio
from .errors import ConfigurationError, DataError
from .hazard import Outcome
from .model import PatientRecord

DATASET_KIND = "cohort"


@dataclass(frozen=True)
class CohortSpec:
    seed: int = 0
    n_patients: int = 200
    image_size: int = 16
    views: int = 4
    min_visits: int = 2
    max_visits: int = 8
    gap_choices: tuple[float, ...] = (12.0, 18.0, 24.0, 30.0, 36.0)
    gap_persistence: float = 0.0
    case_fraction: float = 0.5
    threshold: float = 3.0
    base_amplitude: float = 0.6
    growth_range: tuple[float, float] = (0.05, 0.25)
    severity_range: tuple[float, float] = (0.2, 0.95)
    lead_range: tuple[float, float] = (0.0, 12.0)
    latent_noise: float = 0.05
    image_noise: float = 0.1
    blob_sigma: float = 2.0
    visit_jitter: float = 0.0
    exposure_noise: float = 0.0
    view_dropout: float = 0.05
    followup_range: tuple[float, float] = (6.0, 60.0)
    n_folds: int = 5

    def __post_init__(self):
        if self.n_patients < 1 or self.views < 1 or self.n_folds < 1:
            raise ConfigurationError("n_patients, views, n_folds must be >= 1")
        if not 1 <= self.min_visits <= self.max_visits:
            raise ConfigurationError(
                f"bad visit range [{self.min_visits}, {self.max_visits}]")
        if not 0.0 <= self.case_fraction <= 1.0:
            raise ConfigurationError(
                f"case_fraction must be in [0, 1], got {self.case_fraction}")
        if not self.gap_choices or any(g <= 0 for g in self.gap_choices):
            raise ConfigurationError(f"bad gap choices {self.gap_choices}")
        if not 0.0 <= self.gap_persistence <= 1.0:
            raise ConfigurationError(
                f"gap_persistence must be in [0, 1], got {self.gap_persistence}")
        if self.image_size < 2 or self.blob_sigma <= 0:
            raise ConfigurationError("image_size >= 2 and blob_sigma > 0 required")
        if self.visit_jitter < 0:
            raise ConfigurationError(
                f"visit_jitter must be >= 0, got {self.visit_jitter}")
        if self.exposure_noise < 0:
            raise ConfigurationError(
                f"exposure_noise must be >= 0, got {self.exposure_noise}")
        lo, hi = self.severity_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigurationError(
                f"severity_range must lie inside (0, 1), got {self.severity_range}")
        if 2.0 * self.blob_sigma >= self.image_size - 1:
            raise ConfigurationError(
                f"blob_sigma {self.blob_sigma} leaves no interior for "
                f"centers in a {self.image_size}px image")


def patient_fold(patient_id: str, n_folds: int) -> int:
    """Stable pseudo-random fold from the patient id alone."""
    digest = hashlib.sha1(patient_id.encode("utf-8")).hexdigest()
    return int(digest, 16) % n_folds


def render_view(size: int, center: tuple[float, float], sigma: float,
                amplitude: float, noise: np.ndarray | None = None) -> np.ndarray:
    """Gaussian blob of height ``amplitude`` on optional additive noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = amplitude * np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
                              / (2.0 * sigma ** 2))
    return blob if noise is None else blob + noise


def _latent_track(spec: CohortSpec, rng: np.random.Generator, times: np.ndarray,
                  is_case: bool) -> tuple[np.ndarray, Outcome]:
    """Latent amplitude per visit plus the ground-truth outcome.

    Cases are anchored at the last visit to a visible severity s in (0, 1):
    g_i = s*theta - r*(t_last - t_i), so the lesion is on screen where it
    matters and the remaining time to threshold is (theta - g_last)/r, a
    quantity that genuinely needs the growth *per month*.  The implied event
    time is read back off the noisy last sample, so the label stays
    consistent with what the images actually show.
    """
    v = times.size
    walk = np.concatenate([[0.0], np.cumsum(
        spec.latent_noise * rng.standard_normal(v - 1))])
    if is_case:
        r = rng.uniform(*spec.growth_range)
        sev = rng.uniform(*spec.severity_range)
        lead = rng.uniform(*spec.lead_range)
        g = sev * spec.threshold - r * (times[-1] - times) + walk
        months = max((spec.threshold - g[-1]) / r, 1.0) + lead
        return g, Outcome(event=True, months=float(months))
    g0 = spec.threshold * spec.base_amplitude * rng.uniform()
    g = g0 + walk
    months = rng.uniform(*spec.followup_range)
    return g, Outcome(event=False, months=float(months))


def generate_patient(spec: CohortSpec, index: int,
                     seed_seq: np.random.SeedSequence) -> PatientRecord:
    rng = np.random.default_rng(seed_seq)
    pid = f"pt{index:05d}"
    n_cases = round(spec.case_fraction * spec.n_patients)
    is_case = index < n_cases

    v = int(rng.integers(spec.min_visits, spec.max_visits + 1))
    gaps = rng.choice(np.asarray(spec.gap_choices), size=v - 1)
    if spec.gap_persistence > 0.0 and v > 2:
        # surveillance cadence: each interval repeats the previous one with
        # probability gap_persistence, so spacing is patient-correlated and
        # cannot be guessed from the cohort-wide average
        keep = rng.random(v - 2) < spec.gap_persistence
        for i in range(1, v - 1):
            if keep[i - 1]:
                gaps[i] = gaps[i - 1]
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    latent, outcome = _latent_track(spec, rng, times, is_case)

    s = spec.image_size
    margin = spec.blob_sigma
    centers = rng.uniform(margin, s - 1 - margin, size=(spec.views, 2))
    present = rng.random((v, spec.views)) >= spec.view_dropout
    images = np.zeros((v, spec.views, s, s), dtype=np.float64)
    for i in range(v):
        amp = max(float(latent[i]), 0.0)
        for view in range(spec.views):
            noise = spec.image_noise * rng.standard_normal((s, s))
            if spec.exposure_noise > 0.0:
                # exposure varies image to image: a constant offset over the
                # whole frame, separable from the blob only through spatial
                # structure within the visit
                noise = noise + spec.exposure_noise * rng.standard_normal()
            c = centers[view]
            if spec.visit_jitter > 0.0:
                # positioning varies image to image: the lesion is fixed in
                # the patient but not in the frame
                c = np.clip(c + spec.visit_jitter * rng.standard_normal(2),
                            margin, s - 1 - margin)
            images[i, view] = render_view(s, tuple(c), spec.blob_sigma,
                                          amp, noise)
    return PatientRecord(
        patient_id=pid, times=times, images=images, views_present=present,
        outcome=outcome, fold=patient_fold(pid, spec.n_folds))


def generate_cohort(spec: CohortSpec) -> list[PatientRecord]:
    """All patients for a spec; per-patient seed streams keep the result
    independent of generation order."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    return [generate_patient(spec, i, children[i])
            for i in range(spec.n_patients)]


def audit_pair(spec: CohortSpec) -> tuple[PatientRecord, PatientRecord]:
    """Two noise-free cases with byte-identical images but different visit
    spacing, hence different true event times.

    Patient A's amplitudes follow its own growth rate over 12-month gaps;
    patient B shows the *same* amplitudes stretched over 36-month gaps, so
    the implied growth is three times slower and the event lands three
    times later.  Any model that ignores the intervals must score them
    identically and get at least one wrong.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(
        spec.n_patients + 1)[-1])
    lo, hi = spec.growth_range
    r = lo + 0.25 * (hi - lo)
    sev = 0.5 * sum(spec.severity_range)
    times_a = np.array([0.0, 12.0, 24.0])
    times_b = np.array([0.0, 36.0, 72.0])
    latent = sev * spec.threshold - r * (times_a[-1] - times_a)
    months_a = max((spec.threshold - latent[-1]) / r, 1.0)
    months_b = max((spec.threshold - latent[-1]) / (r / 3.0), 1.0)

    s = spec.image_size
    centers = rng.uniform(spec.blob_sigma, s - 1 - spec.blob_sigma,
                          size=(spec.views, 2))
    images = np.zeros((3, spec.views, s, s), dtype=np.float64)
    for i in range(3):
        for view in range(spec.views):
            images[i, view] = render_view(
                s, tuple(centers[view]), spec.blob_sigma,
                max(float(latent[i]), 0.0))
    present = np.ones((3, spec.views), dtype=bool)
    rec_a = PatientRecord("audit-fast", times_a, images.copy(), present.copy(),
                          Outcome(True, float(months_a)),
                          fold=patient_fold("audit-fast", spec.n_folds))
    rec_b = PatientRecord("audit-slow", times_b, images.copy(), present.copy(),
                          Outcome(True, float(months_b)),
                          fold=patient_fold("audit-slow", spec.n_folds))
    if not np.array_equal(rec_a.images, rec_b.images):
        raise DataError("audit pair images must be identical")
    if rec_a.outcome.months == rec_b.outcome.months:
        raise DataError("audit pair event times must differ")
    return rec_a, rec_b


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def save_cohort(path: str | Path, records: Sequence[PatientRecord],
                spec: CohortSpec | None = None,
                extra_meta: dict[str, Any] | None = None) -> None:
    """Write records as an arrayio bundle (images stored float32)."""
    arrays: dict[str, np.ndarray] = {}
    roster = []
    for rec in records:
        arrays[f"{rec.patient_id}.times"] = np.asarray(rec.times, np.float64)
        arrays[f"{rec.patient_id}.images"] = np.asarray(rec.images, np.float32)
        arrays[f"{rec.patient_id}.views"] = np.asarray(rec.views_present,
                                                       np.int64)
        roster.append({
            "id": rec.patient_id,
            "event": bool(rec.outcome.event),
            "months": float(rec.outcome.months),
            "fold": int(rec.fold),
        })
    meta: dict[str, Any] = {"patients": roster}
    if spec is not None:
        meta["spec"] = asdict(spec)
    if extra_meta:
        meta.update(extra_meta)
    arrayio.save_bundle(path, arrays, kind=DATASET_KIND, meta=meta)


def load_cohort(path: str | Path) -> tuple[list[PatientRecord], dict[str, Any]]:
    arrays, meta, _ = arrayio.load_bundle(path, expect_kind=DATASET_KIND)
    records = []
    for row in meta.get("patients", []):
        pid = row["id"]
        try:
            times = arrays[f"{pid}.times"]
            images = arrays[f"{pid}.images"]
            views = arrays[f"{pid}.views"]
        except KeyError as exc:
            raise DataError(f"patient {pid}: missing array {exc}") from exc
        records.append(PatientRecord(
            patient_id=pid, times=times,
            images=images.astype(np.float64),
            views_present=views.astype(bool),
            outcome=Outcome(event=bool(row["event"]),
                            months=float(row["months"])),
            fold=int(row["fold"])))
    return records, meta
