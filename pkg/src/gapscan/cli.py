"""Command-line interface.

Subcommands: ``generate`` (synthetic cohort to disk), ``train`` (fit with a
learning-rate grid, checkpoint, and write a report), ``eval`` (score a
checkpoint on a held-out fold), ``profile`` (parameter census, FLOP model,
scaling benchmark), and ``gradcheck`` (tape vs finite differences).

Exit codes: 0 success, 2 usage or configuration problems, 1 runtime
failures.  ``--threads`` is honored by setting the BLAS/OpenMP environment
variables before numpy is first imported, which is why all heavy imports
live inside the handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, GapscanError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _set_threads(n: int) -> None:
    if n < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {n}")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapscan",
        description="interval-aware longitudinal imaging risk models")
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread count (set before "
                             "numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic cohort bundle")
    gen.add_argument("--out", required=True, help="output bundle directory")
    gen.add_argument("--patients", type=int, default=200)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--case-fraction", type=float, default=0.5)
    gen.add_argument("--image-size", type=int, default=16)
    gen.add_argument("--views", type=int, default=4)
    gen.add_argument("--min-visits", type=int, default=2)
    gen.add_argument("--max-visits", type=int, default=8)
    gen.add_argument("--folds", type=int, default=5)
    gen.add_argument("--blob-sigma", type=float, default=2.0)
    gen.add_argument("--visit-jitter", type=float, default=0.0,
                     help="std-dev in pixels of the per-image lesion "
                          "positioning offset")
    gen.add_argument("--exposure-noise", type=float, default=0.0,
                     help="std-dev of the per-image constant exposure offset")
    gen.add_argument("--gap-persistence", type=float, default=0.0,
                     help="probability each inter-visit gap repeats the "
                          "previous one (patient-correlated cadence)")

    tra = sub.add_parser("train", help="fit a model and write a report")
    tra.add_argument("--data", required=True, help="cohort bundle directory")
    tra.add_argument("--out", required=True, help="report/checkpoint directory")
    tra.add_argument("--config", default=None,
                     help="JSON file with {'model': {...}, 'train': {...}}")
    tra.add_argument("--ablate", choices=("dt", "fusion", "interslice"),
                     default=None)
    tra.add_argument("--val-fold", type=int, default=None,
                     help="fold held out for validation (default: highest)")
    tra.add_argument("--epochs", type=int, default=None)
    tra.add_argument("--batch-size", type=int, default=None)
    tra.add_argument("--lr", type=float, action="append", default=None,
                     help="learning rate (repeat for a grid)")
    tra.add_argument("--seed", type=int, default=None)
    tra.add_argument("--resume", action="store_true",
                     help="continue from the checkpoint in --out")

    eva = sub.add_parser("eval", help="score a checkpoint on a fold")
    eva.add_argument("--data", required=True)
    eva.add_argument("--checkpoint", required=True)
    eva.add_argument("--out", required=True)
    eva.add_argument("--fold", type=int, default=None,
                     help="fold to score (default: highest fold in the data)")
    eva.add_argument("--all-folds", action="store_true",
                     help="score every record regardless of fold")
    eva.add_argument("--ablate", choices=("dt", "fusion", "interslice"),
                     default=None)

    pro = sub.add_parser("profile", help="cost model and scaling benchmark")
    pro.add_argument("--out", default=None,
                     help="directory for profile.json/csv and scaling.png")
    pro.add_argument("--config", default=None)
    pro.add_argument("--lengths", default="256,512,1024,2048,4096",
                     help="comma-separated token counts")
    pro.add_argument("--repeats", type=int, default=5)
    pro.add_argument("--bench-channels", type=int, default=32)
    pro.add_argument("--bench-state", type=int, default=16)
    pro.add_argument("--skip-bench", action="store_true",
                     help="census and FLOP model only")

    grd = sub.add_parser("gradcheck",
                         help="verify tape gradients against finite "
                              "differences on a small model")
    grd.add_argument("--seed", type=int, default=0)
    grd.add_argument("--tolerance", type=float, default=1e-6)
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {p} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config {p} must hold a JSON object")
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ConfigurationError(
            f"config {p}: unknown top-level keys {sorted(unknown)}")
    return cfg


def _cmd_generate(args) -> int:
    from . import synthdata as sd

    spec = sd.CohortSpec(
        seed=args.seed, n_patients=args.patients,
        image_size=args.image_size, views=args.views,
        min_visits=args.min_visits, max_visits=args.max_visits,
        case_fraction=args.case_fraction, n_folds=args.folds,
        blob_sigma=args.blob_sigma, visit_jitter=args.visit_jitter,
        exposure_noise=args.exposure_noise,
        gap_persistence=args.gap_persistence)
    records = sd.generate_cohort(spec)
    pair = sd.audit_pair(spec)
    audit = {
        "identical_images": True,
        "months": [pair[0].outcome.months, pair[1].outcome.months],
    }
    sd.save_cohort(args.out, records, spec, extra_meta={"interval_audit": audit})
    cases = sum(r.outcome.event for r in records)
    print(f"wrote {len(records)} patients ({cases} cases) to {args.out}")
    print(f"interval audit: same pixels, event months "
          f"{audit['months'][0]:.1f} vs {audit['months'][1]:.1f}")
    return 0


def _model_config_for_data(meta: dict, file_cfg: dict):
    """Model config from the config file, with data-derived geometry
    filling anything the file leaves unset."""
    from .model import ModelConfig

    derived = {}
    spec = meta.get("spec", {})
    if "image_size" in spec:
        derived["image_size"] = int(spec["image_size"])
    if "views" in spec:
        derived["views"] = int(spec["views"])
    if "max_visits" in spec:
        derived["max_visits"] = int(spec["max_visits"])
    merged = {**derived, **file_cfg.get("model", {})}
    return ModelConfig.from_dict(merged)


def _train_config(args, file_cfg: dict):
    from .train import TrainConfig

    merged = dict(file_cfg.get("train", {}))
    if args.epochs is not None:
        merged["epochs"] = args.epochs
    if args.batch_size is not None:
        merged["batch_size"] = args.batch_size
    if args.lr:
        merged["learning_rates"] = tuple(args.lr)
    if args.seed is not None:
        merged["seed"] = args.seed
    return TrainConfig.from_dict(merged)


def _cmd_train(args) -> int:
    from . import report, synthdata as sd, train as tr

    records, meta = sd.load_cohort(args.data)
    folds = sorted({r.fold for r in records})
    val_fold = args.val_fold if args.val_fold is not None else folds[-1]
    if val_fold not in folds:
        raise ConfigurationError(
            f"--val-fold {val_fold} not present (folds: {folds})")
    train_recs = [r for r in records if r.fold != val_fold]
    val_recs = [r for r in records if r.fold == val_fold]

    out = Path(args.out)
    ck_dir = out / "checkpoint"
    if args.resume:
        if args.config or args.epochs or args.lr or args.seed is not None:
            raise ConfigurationError(
                "--resume uses the checkpoint's configs; drop the overrides")
        model, state, tcfg, start, history = tr.load_checkpoint(ck_dir)
        lr = history[-1]["lr"] if history else tcfg.learning_rates[0]
        history = tr.fit(model, train_recs, tcfg, lr, state=state,
                         start_epoch=start, history=history,
                         val_records=val_recs, ablate=args.ablate,
                         checkpoint_dir=ck_dir, log=print)
        chosen_lr = lr
    else:
        file_cfg = _load_config_file(args.config)
        mcfg = _model_config_for_data(meta, file_cfg)
        tcfg = _train_config(args, file_cfg)
        if len(tcfg.learning_rates) > 1:
            model, chosen_lr, history, state = tr.lr_search(
                mcfg, train_recs, val_recs, tcfg, ablate=args.ablate,
                log=print)
            tr.save_checkpoint(ck_dir, model, state, tcfg, tcfg.epochs,
                               history)
        else:
            chosen_lr = tcfg.learning_rates[0]
            model = tr.PatientModel(mcfg, seed=0)
            history = tr.fit(model, train_recs, tcfg, chosen_lr,
                             val_records=val_recs, ablate=args.ablate,
                             checkpoint_dir=ck_dir, log=print)

    final = tr.evaluate(model, val_recs, ablate=args.ablate) if val_recs \
        else {"n": 0, "c_index": None, "auc": {}}
    payload = {
        "data": str(args.data),
        "ablation": args.ablate,
        "val_fold": val_fold,
        "learning_rate": chosen_lr,
        "history": history,
        "validation": final,
        "model_config": model.config.to_dict(),
    }
    report.write_json(out / "metrics.json", payload)
    report.write_csv(out / "history.csv", history)
    report.loss_curve_png(out / "loss_curve.png", history)
    if any(v is not None for v in final["auc"].values()):
        name = args.ablate or "full"
        report.auc_bars_png(out / "auc_bars.png", {name: final["auc"]})
    c = final["c_index"]
    print(f"done: val c-index {c:.4f}" if c is not None
          else "done: val c-index undefined on this fold")
    print(f"report written to {out}")
    return 0


def _cmd_eval(args) -> int:
    from . import report, synthdata as sd, train as tr

    records, _ = sd.load_cohort(args.data)
    model, _, _, _, _ = tr.load_checkpoint(args.checkpoint)
    if args.all_folds:
        chosen = list(records)
        fold_label = "all"
    else:
        folds = sorted({r.fold for r in records})
        fold = args.fold if args.fold is not None else folds[-1]
        if fold not in folds:
            raise ConfigurationError(
                f"--fold {fold} not present (folds: {folds})")
        chosen = [r for r in records if r.fold == fold]
        fold_label = str(fold)
    result = tr.evaluate(model, chosen, ablate=args.ablate)
    out = Path(args.out)
    payload = {
        "data": str(args.data),
        "checkpoint": str(args.checkpoint),
        "fold": fold_label,
        "ablation": args.ablate,
        "metrics": result,
    }
    report.write_json(out / "metrics.json", payload)
    rows = [{"metric": "c_index", "value": result["c_index"], "n": result["n"]}]
    rows += [{"metric": f"auc_{h}mo", "value": auc, "n": result["n"]}
             for h, auc in sorted(result["auc"].items())]
    report.write_csv(out / "metrics.csv", rows)
    if any(v is not None for v in result["auc"].values()):
        report.auc_bars_png(out / "auc_bars.png",
                            {args.ablate or "full": result["auc"]})
    c = result["c_index"]
    print(f"fold {fold_label}: n={result['n']}, c-index "
          + (f"{c:.4f}" if c is not None else "undefined"))
    return 0


def _cmd_profile(args) -> int:
    from . import profiler as pf, report
    from .model import ModelConfig

    file_cfg = _load_config_file(args.config)
    mcfg = ModelConfig.from_dict(file_cfg.get("model", {}))
    census = pf.parameter_census(mcfg)
    kernels = mcfg.block_config().kernels
    per_token = pf.flops_per_token(mcfg.channels, mcfg.state_size, kernels,
                                   mcfg.gate)
    print("parameter census:")
    for bucket, count in sorted(census.items()):
        print(f"  {bucket:16s} {count:>12,d}")
    print(f"flops per token per layer: {per_token:,d}")

    payload: dict = {"census": census, "flops_per_token": per_token,
                     "model_config": mcfg.to_dict()}
    bench = None
    if not args.skip_bench:
        try:
            lengths = tuple(int(tok) for tok in args.lengths.split(","))
        except ValueError:
            raise ConfigurationError(f"bad --lengths {args.lengths!r}")
        bench = pf.bench_throughput(lengths, d=args.bench_channels,
                                    n=args.bench_state, repeats=args.repeats)
        payload["benchmark"] = bench
        print(f"scaling slope: {bench['slope']:.3f} over lengths "
              f"{bench['lengths']}")
    if args.out:
        out = Path(args.out)
        report.write_json(out / "profile.json", payload)
        rows = [{"bucket": k, "parameters": v}
                for k, v in sorted(census.items())]
        report.write_csv(out / "profile.csv", rows)
        if bench is not None:
            report.scaling_png(out / "scaling.png", bench)
        print(f"profile written to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    import numpy as np

    from . import hazard as hz, tensor as tc
    from .model import ModelConfig, PatientModel
    from .synthdata import CohortSpec, generate_cohort

    spec = CohortSpec(seed=args.seed, n_patients=4, image_size=4, views=2,
                      min_visits=2, max_visits=3, blob_sigma=1.0)
    records = generate_cohort(spec)
    mcfg = ModelConfig(channels=2, state_size=2, layers=1, patch=2,
                       image_size=4, views=2, max_visits=3)
    model = PatientModel(mcfg, seed=args.seed)
    outcomes = [r.outcome for r in records]
    weights = hz.positive_class_weights(outcomes, mcfg.horizons)

    def fn(pd):
        out = model.forward(records, pd)
        loss, _, _ = hz.bce_loss(out.logits, outcomes, mcfg.horizons, weights)
        return loss

    errs = tc.grad_check(fn, model.params)
    worst = max(errs.items(), key=lambda kv: kv[1])
    for name in sorted(errs):
        print(f"  {name:32s} {errs[name]:.3e}")
    print(f"worst: {worst[0]} at {worst[1]:.3e} (tolerance {args.tolerance:g})")
    if worst[1] >= args.tolerance or not np.isfinite(worst[1]):
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "profile": _cmd_profile,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            _set_threads(args.threads)      # before any numpy import
        return _HANDLERS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except GapscanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
