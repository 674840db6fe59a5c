"""Training loop, evaluation, checkpointing, and the variant experiment.

Everything is deterministic end to end: batches are shuffled by a generator
seeded from (seed, epoch), Adam walks the parameter dict in sorted-name
order, and checkpoints persist the full optimizer state, so a resumed run
continues exactly where the straight-through run would have been.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import arrayio
from . import hazard as hz
from . import metrics as mx
from .errors import ConfigurationError, DataError, UndefinedMetricError
from .model import ModelConfig, PatientModel, PatientRecord
from .tensor import GradTape

CHECKPOINT_KIND = "checkpoint"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rates: tuple[float, ...] = (5e-5, 1e-5)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    class_weighting: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        self.learning_rates = tuple(float(r) for r in self.learning_rates)
        if not self.learning_rates or any(r <= 0 for r in self.learning_rates):
            raise ConfigurationError(
                f"learning rates must be positive: {self.learning_rates}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learning_rates"] = list(self.learning_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        if d.get("learning_rates") is not None:
            d["learning_rates"] = tuple(d["learning_rates"])
        return cls(**d)


class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def update(self, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr: float,
               cfg: TrainConfig) -> None:
        """One Adam step, in place, in sorted parameter order."""
        self.step += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bias1 = 1.0 - b1 ** self.step
        bias2 = 1.0 - b2 ** self.step
        for name in sorted(params):
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            params[name] = np.asarray(
                params[name] - lr * mhat / (np.sqrt(vhat) + cfg.eps))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch)))


def train_epoch(model: PatientModel, records: Sequence[PatientRecord],
                tcfg: TrainConfig, epoch: int, lr: float, state: AdamState,
                class_weights: np.ndarray | None,
                ablate: str | None = None) -> dict[str, float]:
    """One shuffled pass; returns the epoch's sample-weighted mean loss."""
    order = _epoch_rng(tcfg.seed, epoch).permutation(len(records))
    total = 0.0
    used = 0
    skipped_batches = 0
    for lo in range(0, len(order), tcfg.batch_size):
        batch = [records[i] for i in order[lo:lo + tcfg.batch_size]]
        tape = GradTape()
        pt = model.tensors(tape)
        try:
            loss, diag = model.loss(batch, pt, class_weights=class_weights,
                                    ablate=ablate)
        except DataError:
            skipped_batches += 1       # nothing answerable in this batch
            continue
        grads = tape.backward(loss)
        state.update(model.params, grads, lr, tcfg)
        total += loss.item() * diag["n_used"]
        used += diag["n_used"]
    if used == 0:
        raise DataError("no usable record in any batch this epoch")
    return {"loss": total / used, "n_used": used,
            "skipped_batches": skipped_batches}


def evaluate(model: PatientModel, records: Sequence[PatientRecord], *,
             ablate: str | None = None, eval_batch: int = 64
             ) -> dict[str, Any]:
    """Concordance and per-horizon AUC on a record set.

    The concordance score is the risk mass summed over horizons: the last
    horizon alone can lack censored supervision entirely (every censoring
    time short of it leaves that label indeterminable), letting its
    probability float freely, whereas the sum is anchored at every horizon
    some sample answers.  Metrics that are undefined on this set (no
    comparable pairs, an empty class at some horizon) are reported as None
    rather than raised.
    """
    probs = np.concatenate([
        model.forward(list(records[lo:lo + eval_batch]), ablate=ablate)
             .probabilities
        for lo in range(0, len(records), eval_batch)], axis=0)
    times = np.array([r.outcome.months for r in records])
    events = np.array([r.outcome.event for r in records])
    out: dict[str, Any] = {"n": len(records)}
    try:
        out["c_index"] = mx.concordance_index(times, events,
                                              probs.sum(axis=1))
    except UndefinedMetricError:
        out["c_index"] = None
    out["auc"] = {}
    for k, h in enumerate(model.config.horizons):
        try:
            out["auc"][int(h)] = mx.auc_at_horizon(times, events,
                                                   probs[:, k], h)
        except UndefinedMetricError:
            out["auc"][int(h)] = None
    return out


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: PatientModel, state: AdamState,
                    tcfg: TrainConfig, epoch_next: int,
                    history: list[dict]) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in model.params.items():
        arrays[f"param.{k}"] = v
        arrays[f"adam.m.{k}"] = state.m[k]
        arrays[f"adam.v.{k}"] = state.v[k]
    meta = {
        "epoch_next": epoch_next,
        "adam_step": state.step,
        "history": history,
        "model_config": model.config.to_dict(),
        "train_config": tcfg.to_dict(),
    }
    arrayio.save_bundle(path, arrays, kind=CHECKPOINT_KIND, meta=meta)


def load_checkpoint(path: str | Path
                    ) -> tuple[PatientModel, AdamState, TrainConfig, int,
                               list[dict]]:
    arrays, meta, _ = arrayio.load_bundle(path, expect_kind=CHECKPOINT_KIND)
    mcfg = ModelConfig.from_dict(meta["model_config"])
    tcfg = TrainConfig.from_dict(meta["train_config"])
    model = PatientModel(mcfg, seed=0)
    for k in model.params:
        if f"param.{k}" not in arrays:
            raise DataError(f"checkpoint missing parameter {k}")
        model.params[k] = arrays[f"param.{k}"]
    state = AdamState(model.params)
    for k in model.params:
        state.m[k] = arrays[f"adam.m.{k}"]
        state.v[k] = arrays[f"adam.v.{k}"]
    state.step = int(meta["adam_step"])
    return model, state, tcfg, int(meta["epoch_next"]), list(meta["history"])


# ---------------------------------------------------------------------------
# fit and model selection
# ---------------------------------------------------------------------------

def fit(model: PatientModel, train_records: Sequence[PatientRecord],
        tcfg: TrainConfig, lr: float, *,
        val_records: Sequence[PatientRecord] | None = None,
        ablate: str | None = None,
        checkpoint_dir: str | Path | None = None,
        resume: bool = False,
        state: AdamState | None = None,
        start_epoch: int = 0,
        history: list[dict] | None = None,
        log: Callable[[str], None] | None = None) -> list[dict]:
    """Train for the configured epochs; returns per-epoch history rows.

    With ``checkpoint_dir`` the latest epoch is persisted after each pass;
    ``resume=True`` reloads optimizer state and continues (the caller should
    obtain model/state/start_epoch/history from :func:`load_checkpoint`).
    """
    if not train_records:
        raise DataError("no training records")
    state = state or AdamState(model.params)
    history = list(history or [])
    weights = hz.positive_class_weights(
        [r.outcome for r in train_records], model.config.horizons) \
        if tcfg.class_weighting else None
    for epoch in range(start_epoch, tcfg.epochs):
        stats = train_epoch(model, train_records, tcfg, epoch, lr, state,
                            weights, ablate)
        row: dict[str, Any] = {"epoch": epoch, "lr": lr, **stats}
        if val_records:
            row["val_c_index"] = evaluate(model, val_records,
                                          ablate=ablate)["c_index"]
        history.append(row)
        if log:
            val = row.get("val_c_index")
            log(f"epoch {epoch}: loss {row['loss']:.4f}"
                + (f", val c-index {val:.4f}" if val is not None else ""))
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, model, state, tcfg, epoch + 1,
                            history)
    return history


def lr_search(mcfg: ModelConfig, train_records: Sequence[PatientRecord],
              val_records: Sequence[PatientRecord], tcfg: TrainConfig, *,
              model_seed: int = 0, ablate: str | None = None,
              log: Callable[[str], None] | None = None
              ) -> tuple[PatientModel, float, list[dict], AdamState]:
    """Train one model per configured learning rate from the same init and
    keep the rate with the best final validation concordance."""
    best: tuple[float, PatientModel, float, list[dict], AdamState] | None = None
    for lr in tcfg.learning_rates:
        model = PatientModel(mcfg, seed=model_seed)
        state = AdamState(model.params)
        history = fit(model, train_records, tcfg, lr, state=state,
                      val_records=val_records, ablate=ablate, log=log)
        score = history[-1].get("val_c_index")
        score = -np.inf if score is None else score
        if log:
            log(f"lr {lr:g}: final val c-index {score:.4f}")
        if best is None or score > best[0]:
            best = (score, model, lr, history, state)
    assert best is not None
    return best[1], best[2], best[3], best[4]


def contrast_experiment(records: Sequence[PatientRecord], mcfg: ModelConfig,
                        tcfg: TrainConfig, lr: float, *,
                        variants: Sequence[str | None] = (None, "dt",
                                                          "interslice"),
                        n_folds: int = 5,
                        model_seed: int = 0,
                        log: Callable[[str], None] | None = None
                        ) -> dict[str, Any]:
    """K-fold comparison of ablation variants from identical initializations.

    For each fold k, every variant trains on the other folds and is scored
    on fold k.  Identical model seed and batch schedule across variants make
    the contrast paired: differences come only from the ablation itself.
    """
    folds = sorted({r.fold for r in records})
    if len(folds) < 2:
        raise DataError("need at least two folds for the experiment")
    folds = folds[:n_folds]
    results: dict[str, Any] = {"folds": folds, "variants": {}}
    for variant in variants:
        name = variant or "full"
        per_fold = []
        for k in folds:
            train_recs = [r for r in records if r.fold != k]
            test_recs = [r for r in records if r.fold == k]
            model = PatientModel(mcfg, seed=model_seed)
            fit(model, train_recs, tcfg, lr, ablate=variant, log=None)
            score = evaluate(model, test_recs, ablate=variant)
            per_fold.append(score)
            if log:
                log(f"variant {name}, fold {k}: "
                    f"c-index {score['c_index']:.4f} (n={score['n']})")
        cs = [s["c_index"] for s in per_fold if s["c_index"] is not None]
        mean, std = mx.fold_summary(cs)
        results["variants"][name] = {
            "per_fold": per_fold,
            "c_index_mean": mean,
            "c_index_std": std,
        }
    return results
