"""Report writers: canonical JSON, delimited tables, rendered figures.

Every writer is deterministic: JSON uses sorted keys, CSV fields follow a
stable order, and figures are rendered through the Agg backend with the
software metadata chunk stripped, so re-running a report produces
byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .arrayio import canonical_json
from .errors import DataError

_PNG_META = {"Software": None}    # drop the version chunk for byte stability


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload))
    return path


def write_csv(path: str | Path, rows: Sequence[Mapping[str, Any]],
              fieldnames: Sequence[str] | None = None) -> Path:
    """Rows to CSV with a stable column order (first-seen, then alphabetical
    for stragglers) and empty cells for missing values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        seen: list[str] = []
        for row in rows:
            for key in row:
                if key not in seen:
                    seen.append(key)
        fieldnames = seen
    if not fieldnames:
        raise DataError("cannot write a CSV with no columns")
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames),
                                restval="", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(dict(row))
    return path


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curve_png(path: str | Path, history: Sequence[Mapping[str, Any]],
                   title: str = "training loss") -> Path:
    if not history:
        raise DataError("empty history; nothing to plot")
    epochs = [row["epoch"] for row in history]
    losses = [row["loss"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    vals = [(row["epoch"], row["val_c_index"]) for row in history
            if row.get("val_c_index") is not None]
    if vals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*vals), marker="s", color="tab:orange",
                 label="val c-index")
        ax2.set_ylabel("validation c-index")
    fig.tight_layout()
    return _save(fig, path)


def auc_bars_png(path: str | Path,
                 auc_by_variant: Mapping[str, Mapping[int, float | None]],
                 title: str = "AUC by horizon") -> Path:
    if not auc_by_variant:
        raise DataError("no AUC values; nothing to plot")
    horizons = sorted({h for aucs in auc_by_variant.values() for h in aucs})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(auc_by_variant), 1)
    base = range(len(horizons))
    for i, (name, aucs) in enumerate(sorted(auc_by_variant.items())):
        xs = [b + i * width for b in base]
        ys = [aucs.get(h) if aucs.get(h) is not None else 0.0
              for h in horizons]
        ax.bar(xs, ys, width=width, label=name)
    ax.set_xticks([b + 0.4 - width / 2 for b in base])
    ax.set_xticklabels([f"{h} mo" for h in horizons])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("AUC")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def scaling_png(path: str | Path, bench: Mapping[str, Any],
                title: str = "forward time vs sequence length") -> Path:
    lengths = bench.get("lengths")
    seconds = bench.get("seconds")
    if not lengths or not seconds:
        raise DataError("benchmark result missing lengths/seconds")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(lengths, seconds, marker="o", color="tab:blue",
              label=f"measured (slope {bench.get('slope', 0.0):.2f})")
    ref = [seconds[0] * l / lengths[0] for l in lengths]
    ax.loglog(lengths, ref, linestyle="--", color="tab:gray",
              label="ideal linear")
    ax.set_xlabel("tokens")
    ax.set_ylabel("seconds")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
