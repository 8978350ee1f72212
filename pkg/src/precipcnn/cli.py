"""Command-line entry point: ``precipcnn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/shape error, 3 training or
numerical-check failure. When ``--out`` is omitted, outputs go under
``$PRECIPCNN_OUT`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import channelizer, dataio, gradcheck, metrics, network, trainer
from .experiment import prepare, resolve_split
from .layers import ShapeError

log = logging.getLogger("precipcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_out(name: str) -> Path:
    return Path(os.environ.get("PRECIPCNN_OUT", "runs")) / name


def _grid(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    return h, w


def _ints(text: str):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands ---------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    spec = dataio.SyntheticSpec(
        days=args.days, grid=args.grid, levels=channelizer.resolve_levels(args.levels), variables=args.vars,
        seed=args.seed, noise_std=args.noise_std, start_date=dt.date.fromisoformat(args.start_date),
        precision=args.precision,
    )
    ds = dataio.generate_synthetic(spec)
    out = Path(args.out or _default_out("data"))
    dataio.save_dataset(ds, out)
    _write_json(out / "generation.json", {"generator": "synthetic", **spec.to_dict()})
    print(f"wrote {ds.days}-day dataset ({ds.stack.shape}) to {out}")
    return EXIT_OK


def _network_config(args, variant) -> network.NetworkConfig:
    return network.NetworkConfig(
        variant=variant, conv_channels=args.conv_channels, fc_hidden=args.fc_hidden, activation=args.activation,
        padding=args.padding, precision=args.precision,
    )


def _case_label(args) -> str:
    return args.case or f"{args.timesteps}-{args.levels}-{args.variant}"


def cmd_train(args) -> int:
    try:
        tconf = trainer.TrainConfig(
            batch_size=args.batch_size, learning_rate=args.lr, patience_epochs=args.patience,
            max_epochs=args.max_epochs, restarts=args.restarts, base_seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = dataio.load_dataset(args.data)
    spec, split_mode = resolve_split(ds, args.split)
    variant = network.Variant(args.variant)
    prep = prepare(ds, variant, args.timesteps, args.levels, spec)
    nconf = _network_config(args, variant)
    shapes = network.infer_shapes(nconf, prep.input_shape)
    train_xy = prep.xy("train", nconf.precision)
    val_xy = prep.xy("validation", nconf.precision)
    log.info("case %s: NC=%d input %s, %d/%d/%d samples", _case_label(args), prep.n_channels, prep.input_shape,
             len(prep.batches["train"]), len(prep.batches["validation"]), len(prep.batches["test"]))

    best, results = trainer.multi_restart_fit(network.Builder(nconf, prep.input_shape), train_xy, val_xy, tconf,
                                              jobs=args.jobs)
    out = Path(args.out or _default_out(_case_label(args)))
    out.mkdir(parents=True, exist_ok=True)
    net = network.build(nconf, prep.input_shape, np.random.default_rng(0), seed=best.seed)
    net.load_state(best.snapshot)
    meta = {
        "case": _case_label(args),
        "variant": variant.value,
        "timesteps": prep.selector.value,
        "levels": list(prep.levels),
        "n_channels": prep.n_channels,
        "split": spec.to_dict(),
        "split_mode": split_mode,
        "seed": best.seed,
        "best_val_loss": best.best_val_loss,
        "best_epoch": best.best_epoch,
        "data": str(Path(args.data).resolve()),
    }
    ckpt = network.save_checkpoint(net, out / "checkpoint", extra=prep.stats.to_arrays(), meta=meta)

    roster = []
    for r in results:
        run_dir = out / "runs" / f"seed_{r.seed:06d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tl, vl) in enumerate(zip(r.train_curve, r.val_curve)):
                w.writerow([e, repr(tl), repr(vl)])
        entry = {**r.summary(), "selected": r is best,
                 "checkpoint": str(ckpt.relative_to(out)) if r is best else None}
        _write_json(run_dir / "manifest.json", entry)
        roster.append(entry)
    _write_json(out / "run_manifest.json", {
        "case": meta["case"],
        "network_config": nconf.to_dict(),
        "train_config": tconf.to_dict(),
        "input_shape": list(prep.input_shape),
        "layer_shapes": [[name, list(s)] for name, s in shapes],
        "parameter_count": network.parameter_count(nconf, prep.input_shape),
        "notes": net.notes,
        "meta": meta,
        "selected_seed": best.seed,
        "runs": roster,
        "flags": {k: v for k, v in vars(args).items() if k != "func"},
    })
    print(f"{meta['case']}: selected seed {best.seed} (val loss {best.best_val_loss:.6g} at epoch "
          f"{best.best_epoch}); wrote {out}")
    return EXIT_OK


def _checkpoint_dir(args) -> Path:
    path = Path(args.run)
    return path / "checkpoint" if (path / "checkpoint" / "checkpoint.json").exists() else path


def _dataset_for(args, ckpt: Path) -> dataio.AtmosDataset:
    if args.data:
        return dataio.load_dataset(args.data)
    header = json.loads((ckpt / "checkpoint.json").read_text())
    return dataio.load_dataset(header["meta"]["data"])


def cmd_evaluate(args) -> int:
    ckpt = _checkpoint_dir(args)
    ds = _dataset_for(args, ckpt)
    report = metrics.evaluate(ckpt, ds, case=args.case, clamp=args.clamp)
    out = Path(args.out or _default_out(f"eval_{report.case}"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.md").write_text(metrics.render_comparison([(report.case, report)], "markdown"))
    (out / "report.csv").write_text(metrics.render_comparison([(report.case, report)], "csv"))
    print(metrics.render_comparison([(report.case, report)], "markdown"), end="")
    return EXIT_OK


def _find_report(path: Path) -> Path:
    for cand in (path, path / "report.json", path / "eval" / "report.json"):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"no report.json found at {path}")


def cmd_compare(args) -> int:
    reports = []
    for p in args.reports:
        rep = metrics.EvalReport.from_dict(json.loads(_find_report(Path(p)).read_text()))
        reports.append((rep.case, rep))
    out = Path(args.out or _default_out("comparison"))
    out.mkdir(parents=True, exist_ok=True)
    formats = ("markdown", "csv") if args.format == "both" else (args.format,)
    for fmt in formats:
        text = metrics.render_comparison(reports, fmt)
        (out / ("comparison.md" if fmt == "markdown" else "comparison.csv")).write_text(text)
    print(metrics.render_comparison(reports, "markdown"), end="")
    return EXIT_OK


def cmd_export_predictions(args) -> int:
    ckpt = _checkpoint_dir(args)
    ds = _dataset_for(args, ckpt)
    _, preds = metrics.predict_periods(ckpt, ds)
    periods = [args.period] if args.period != "all" else list(preds)
    rows = []
    for period in periods:
        d = preds[period]
        pred = np.maximum(d["pred"], 0.0) if args.clamp else d["pred"]
        rows += [(int(day), float(o), float(p)) for day, o, p in zip(d["days"], d["obs"], pred)]
    rows.sort()
    out = Path(args.out or _default_out("predictions"))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "obs_mm", "pred_mm"])
        for day, o, p in rows:
            w.writerow([ds.date(day).isoformat(), repr(o), repr(p)])
    print(f"wrote {len(rows)} rows to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(instances=args.instances, seed=args.seed, networks=not args.layers_only)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        extra = f" ({r.resampled} resampled at kinks)" if r.resampled else ""
        print(f"{status}  {r.name:<18} max rel err {r.max_error:.3e} over {r.instances} instances{extra}")
    print(f"tolerance {gradcheck.TOLERANCE:g}, step {gradcheck.STEP:g}")
    return EXIT_OK if ok else EXIT_TRAIN


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="precipcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    g.add_argument("--days", type=int, default=730)
    g.add_argument("--grid", type=_grid, default=(8, 8))
    g.add_argument("--levels", default="v1", help="preset v1/v2/v3 or comma-separated hPa list")
    g.add_argument("--vars", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--start-date", default="1980-01-01")
    g.add_argument("--precision", choices=["f32", "f64"], default="f64")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="multi-restart training for one case")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=[v.value for v in network.Variant], required=True)
    t.add_argument("--timesteps", choices=[s.value for s in channelizer.TimeSelector], default="ts6")
    t.add_argument("--levels", default="v1")
    t.add_argument("--split", choices=["auto", "calendar", "scaled"], default="auto",
                   help="calendar: 1980-2005/2006-2010/2011-2015; scaled: 26:5:5 of the record")
    t.add_argument("--restarts", type=int, default=200)
    t.add_argument("--max-epochs", type=int, default=1000)
    t.add_argument("--patience", type=int, default=40)
    t.add_argument("--batch-size", type=int, default=512)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0, help="base seed; restart i uses seed + i")
    t.add_argument("--conv-channels", type=_ints, default=(32, 64))
    t.add_argument("--fc-hidden", type=int, default=64)
    t.add_argument("--activation", choices=["relu", "none"], default="relu")
    t.add_argument("--padding", type=int, default=1)
    t.add_argument("--precision", choices=["f32", "f64"], default="f64")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--case", help="row label for reports, e.g. T3-3D")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="RMSE/NSE/RMSE99 per period for a trained run")
    e.add_argument("--run", required=True, help="run directory or checkpoint directory")
    e.add_argument("--data", help="dataset directory (default: the one recorded at training)")
    e.add_argument("--case")
    e.add_argument("--clamp", action="store_true", help="clamp negative predictions to 0 mm")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="tabulate several reports")
    c.add_argument("reports", nargs="+", help="report.json files or directories containing one")
    c.add_argument("--format", choices=["markdown", "csv", "both"], default="both")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-predictions", help="write date,obs_mm,pred_mm CSV")
    x.add_argument("--run", required=True)
    x.add_argument("--data")
    x.add_argument("--period", choices=["all", "train", "validation", "test"], default="all")
    x.add_argument("--clamp", action="store_true")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_predictions)

    k = sub.add_parser("gradcheck", help="finite-difference check of every layer and network variant")
    k.add_argument("--instances", type=int, default=3)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--layers-only", action="store_true")
    k.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"precipcnn {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.FormatError, ShapeError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"precipcnn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.TrainingError, FloatingPointError) as exc:
        print(f"precipcnn {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
