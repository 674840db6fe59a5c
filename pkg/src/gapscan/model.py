"""Patient-level risk model.

Each visit contributes up to ``views`` single-channel images.  Every image
is cut into non-overlapping patches, linearly embedded with a per-view
encoder, and the per-view feature maps of a visit are summed over whichever
views are present.  Visits are assembled left-padded into a (d, T, H, W)
feature volume per patient, run through a stack of interval-aware scan
blocks, pooled (spatial mean, then mean over valid visits) into one
embedding, and mapped to cumulative-risk logits by the additive hazard head.

Parameters live in a flat name -> ndarray dict so the training loop, the
checkpoint format, and the gradient tape all share one canonical ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import block as bk
from . import fusion as fu
from . import hazard as hz
from . import scan as sc
from . import tensor as tc
from .errors import ConfigurationError, DataError, DimensionError
from .hazard import Outcome
from .tensor import GradTape, Tensor, as_tensor

ABLATIONS = (None, "dt", "fusion", "interslice")


@dataclass
class ModelConfig:
    channels: int = 32
    state_size: int = 16
    layers: int = 2
    patch: int = 8
    image_size: int = 64
    views: int = 4
    max_visits: int = 8
    horizons: tuple[float, ...] = tuple(hz.DEFAULT_HORIZONS)
    kernels: tuple[tuple[int, int, int], ...] | None = None
    gamma_init: float = 0.5
    delta_init: float = 0.05
    gate: bool = False
    fuse_in_state_space: bool = False
    scan_order: str = "visit_major"

    def __post_init__(self):
        sizes = (self.channels, self.state_size, self.layers, self.patch,
                 self.image_size, self.views, self.max_visits)
        if any(int(s) < 1 for s in sizes):
            raise ConfigurationError(f"all size fields must be >= 1, got {sizes}")
        if self.image_size % self.patch:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch {self.patch}")
        self.horizons = tuple(float(h) for h in self.horizons)
        if not self.horizons or any(h <= 0 for h in self.horizons):
            raise ConfigurationError(f"horizons must be positive: {self.horizons}")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ConfigurationError(
                f"horizons must be strictly increasing: {self.horizons}")
        self.block_config()      # resolves kernels; raises early on bad config

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_dict(self) -> dict:
        return {
            "channels": self.channels, "state_size": self.state_size,
            "layers": self.layers, "patch": self.patch,
            "image_size": self.image_size, "views": self.views,
            "max_visits": self.max_visits, "horizons": list(self.horizons),
            "kernels": None if self.kernels is None else
                       [list(k) for k in self.kernels],
            "gamma_init": self.gamma_init, "delta_init": self.delta_init,
            "gate": self.gate,
            "fuse_in_state_space": self.fuse_in_state_space,
            "scan_order": self.scan_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        if d.get("horizons") is not None:
            d["horizons"] = tuple(float(h) for h in d["horizons"])
        if d.get("kernels") is not None:
            d["kernels"] = tuple(tuple(int(e) for e in k) for k in d["kernels"])
        return cls(**d)

    def block_config(self) -> bk.BlockConfig:
        return bk.BlockConfig(
            d=self.channels, n=self.state_size, max_visits=self.max_visits,
            kernels=self.kernels, gamma_init=self.gamma_init,
            delta_init=self.delta_init, gate=self.gate,
            fuse_in_state_space=self.fuse_in_state_space,
            scan_order=self.scan_order)


@dataclass
class PatientRecord:
    """One patient's longitudinal imaging and outcome.

    times are visit offsets in months from the first visit (nondecreasing);
    images is (visits, views, S, S); views_present flags which view images
    actually exist (absent ones are ignored regardless of pixel content).
    """

    patient_id: str
    times: np.ndarray
    images: np.ndarray
    views_present: np.ndarray
    outcome: Outcome
    fold: int = 0


@dataclass
class RiskOutput:
    logits: Tensor              # (B, K) cumulative-risk logits
    probabilities: np.ndarray   # (B, K) sigmoid of logits


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """(S, S) -> (G*G, patch*patch), row g = h*G + w in raster order."""
    s = img.shape[0]
    g = s // patch
    return (img.reshape(g, patch, g, patch)
               .transpose(0, 2, 1, 3)
               .reshape(g * g, patch * patch))


def validate_record(rec: PatientRecord, cfg: ModelConfig) -> None:
    times = np.asarray(rec.times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise DataError(f"{rec.patient_id}: need at least one visit time")
    if not np.isfinite(times).all():
        raise DataError(f"{rec.patient_id}: non-finite visit time")
    if np.any(np.diff(times) < 0):
        raise DataError(f"{rec.patient_id}: visit times must be nondecreasing")
    v = times.size
    s = cfg.image_size
    if rec.images.shape != (v, cfg.views, s, s):
        raise DimensionError(
            f"{rec.patient_id}: images {rec.images.shape} != {(v, cfg.views, s, s)}")
    if rec.views_present.shape != (v, cfg.views):
        raise DimensionError(
            f"{rec.patient_id}: views_present {rec.views_present.shape} != {(v, cfg.views)}")
    if not np.isfinite(rec.images[rec.views_present.astype(bool)]).all():
        raise DataError(f"{rec.patient_id}: non-finite pixels in a present view")


class PatientModel:
    """Owns the parameter dict and the batched forward pipeline."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        d = config.channels
        p2 = config.patch * config.patch
        for view in range(config.views):
            self.params[f"enc.{view}.w"] = rng.standard_normal((d, p2)) / np.sqrt(p2)
            self.params[f"enc.{view}.b"] = np.zeros(d)
        bcfg = config.block_config()
        for i in range(config.layers):
            bp = bk.init_block_params(bcfg, rng)
            pre = f"blocks.{i}"
            self.params[f"{pre}.norm_gain"] = bp.norm_gain
            self.params[f"{pre}.scan.w_proj"] = bp.scan.w_proj
            self.params[f"{pre}.scan.b_proj"] = bp.scan.b_proj
            self.params[f"{pre}.scan.a_log"] = bp.scan.a_log
            self.params[f"{pre}.scan.skip"] = bp.scan.skip
            self.params[f"{pre}.scan.gamma_logit"] = bp.scan.gamma_logit
            for s_i, f in enumerate(bp.fusion.filters):
                self.params[f"{pre}.fusion.f{s_i}"] = f
            self.params[f"{pre}.fusion.alpha"] = bp.fusion.alpha
            if config.gate:
                self.params[f"{pre}.gate.w"] = bp.gate_w
                self.params[f"{pre}.gate.b"] = bp.gate_b
        k = len(config.horizons)
        self.params["head.base.w"] = rng.standard_normal((1, d)) / np.sqrt(d)
        self.params["head.base.b"] = np.zeros(1)
        self.params["head.rate.w"] = rng.standard_normal((k, d)) / np.sqrt(d)
        self.params["head.rate.b"] = np.zeros(k)

    # -- parameter plumbing -------------------------------------------------

    def tensors(self, tape: GradTape | None = None) -> dict[str, Tensor]:
        """Wrap every parameter, registering on ``tape`` when given."""
        if tape is None:
            return {k: as_tensor(self.params[k]) for k in sorted(self.params)}
        return {k: tape.parameter(k, self.params[k]) for k in sorted(self.params)}

    def _block_params(self, pt: dict[str, Tensor], i: int) -> bk.BlockParams:
        pre = f"blocks.{i}"
        n_branch = len(self.config.block_config().kernels)
        scan_p = sc.ScanParams(
            w_proj=pt[f"{pre}.scan.w_proj"], b_proj=pt[f"{pre}.scan.b_proj"],
            a_log=pt[f"{pre}.scan.a_log"], skip=pt[f"{pre}.scan.skip"],
            gamma_logit=pt[f"{pre}.scan.gamma_logit"])
        fus_p = fu.FusionParams(
            filters=[pt[f"{pre}.fusion.f{s}"] for s in range(n_branch)],
            alpha=pt[f"{pre}.fusion.alpha"])
        return bk.BlockParams(
            norm_gain=pt[f"{pre}.norm_gain"], scan=scan_p, fusion=fus_p,
            gate_w=pt.get(f"{pre}.gate.w"), gate_b=pt.get(f"{pre}.gate.b"))

    # -- encoding -----------------------------------------------------------

    def encode_view(self, img: np.ndarray, view: int,
                    pt: dict[str, Tensor] | None = None) -> Tensor:
        """One image (S, S) -> feature map (d, G, G) for its view encoder."""
        pt = pt or self.tensors()
        g = self.config.grid
        rows = patchify(np.asarray(img, dtype=np.float64), self.config.patch)
        feats = tc.affine(rows, pt[f"enc.{view}.w"], pt[f"enc.{view}.b"])
        return tc.transpose(tc.reshape(feats, (g, g, self.config.channels)),
                            (2, 0, 1))

    def _assemble(self, records: Sequence[PatientRecord],
                  pt: dict[str, Tensor], pad_to: int | None
                  ) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Batch records into a feature volume plus gap/validity arrays.

        Records are left-padded to a common visit count; records longer
        than the capacity keep their most recent visits.  Returns
        (volume (B, d, T, G, G), gaps (B, T) months, mask (B, T)).
        """
        cfg = self.config
        if not records:
            raise DataError("empty batch")
        for rec in records:
            validate_record(rec, cfg)
        t_max = pad_to if pad_to is not None else min(
            cfg.max_visits, max(len(np.asarray(r.times).ravel()) for r in records))
        if pad_to is not None and pad_to < 1:
            raise DataError(f"pad_to must be >= 1, got {pad_to}")
        b = len(records)
        g = cfg.grid
        g2 = g * g
        n_rows = b * t_max * g2

        rows_by_view: list[list[np.ndarray]] = [[] for _ in range(cfg.views)]
        idx_by_view: list[list[np.ndarray]] = [[] for _ in range(cfg.views)]
        gaps = np.zeros((b, t_max))
        mask = np.zeros((b, t_max), dtype=bool)
        for b_i, rec in enumerate(records):
            times = np.asarray(rec.times, dtype=np.float64)
            v_eff = min(times.size, t_max)
            kept = times[times.size - v_eff:]
            first = t_max - v_eff
            mask[b_i, first:] = True
            gaps[b_i, first + 1:] = np.diff(kept)
            present = np.asarray(rec.views_present, dtype=bool)
            for j in range(v_eff):
                visit = times.size - v_eff + j
                slot = first + j
                base = (b_i * t_max + slot) * g2
                for view in range(cfg.views):
                    if not present[visit, view]:
                        continue
                    rows_by_view[view].append(
                        patchify(np.asarray(rec.images[visit, view],
                                            dtype=np.float64), cfg.patch))
                    idx_by_view[view].append(np.arange(base, base + g2))

        feats: Tensor | None = None
        for view in range(cfg.views):
            if not rows_by_view[view]:
                continue
            x = np.concatenate(rows_by_view[view], axis=0)
            idx = np.concatenate(idx_by_view[view])
            enc = tc.affine(x, pt[f"enc.{view}.w"], pt[f"enc.{view}.b"])
            scat = tc.scatter_add_rows(enc, idx, n_rows)
            feats = scat if feats is None else tc.add(feats, scat)
        if feats is None:
            feats = as_tensor(np.zeros((n_rows, cfg.channels)))
        vol = tc.transpose(tc.reshape(feats, (b, t_max, g, g, cfg.channels)),
                           (0, 4, 1, 2, 3))
        return vol, gaps, mask

    # -- forward ------------------------------------------------------------

    def embed(self, records: Sequence[PatientRecord],
              pt: dict[str, Tensor] | None = None, *,
              ablate: str | None = None,
              pad_to: int | None = None) -> Tensor:
        """Pooled patient embeddings (B, d)."""
        if ablate not in ABLATIONS:
            raise ConfigurationError(
                f"unknown ablation {ablate!r}, expected one of {ABLATIONS}")
        pt = pt or self.tensors()
        cfg = self.config
        vol, gaps, mask = self._assemble(records, pt, pad_to)
        bcfg = cfg.block_config()
        order = "position_major" if ablate == "interslice" else None
        x = vol
        for i in range(cfg.layers):
            x = bk.block_forward(
                x, gaps, mask, self._block_params(pt, i), bcfg,
                time_aware=(ablate != "dt"),
                identity_fusion=(ablate == "fusion"),
                scan_order=order)
        g2 = cfg.grid * cfg.grid
        pooled = tc.mul(tc.sum_axes(x, (3, 4)), 1.0 / g2)     # (B, d, T)
        return tc.masked_mean(pooled, mask, axis=2)

    def forward(self, records: Sequence[PatientRecord],
                pt: dict[str, Tensor] | None = None, *,
                ablate: str | None = None,
                pad_to: int | None = None) -> RiskOutput:
        pt = pt or self.tensors()
        z = self.embed(records, pt, ablate=ablate, pad_to=pad_to)
        logits = hz.risk_logits(z, pt["head.base.w"], pt["head.base.b"],
                                pt["head.rate.w"], pt["head.rate.b"])
        return RiskOutput(logits=logits,
                          probabilities=hz.event_probabilities(logits.data))

    def loss(self, records: Sequence[PatientRecord],
             pt: dict[str, Tensor] | None = None, *,
             class_weights: np.ndarray | None = None,
             ablate: str | None = None) -> tuple[Tensor, dict[str, int]]:
        """Batch loss plus usage diagnostics ({"n_used", "n_skipped"})."""
        pt = pt or self.tensors()
        out = self.forward(records, pt, ablate=ablate)
        loss, used, skipped = hz.bce_loss(
            out.logits, [r.outcome for r in records], self.config.horizons,
            class_weights)
        return loss, {"n_used": used, "n_skipped": skipped}
