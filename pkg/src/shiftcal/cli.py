"""``shiftcal`` command line.

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation error.
Progress goes to stdout; results go only to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as dio
from .backbone import BackboneConfig, load_model, save_model
from .infer import ensemble_predict, mcd_predict, read_predictions, write_predictions
from .metrics import compare_methods, emd_1d, evaluate, mae, summary_score, surrogate_emd_table
from .pipeline import (
    CONFIG_SCHEMA, DEMO_CONFIG, ConfigError, StageError, run_pipeline, write_manifest,
)
from .recalib import apply_recalibration, fit_recalibration, from_json, to_json
from .train import TrainConfig, train_ensemble, train_seeds, write_log


class UsageError(Exception):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"missing file: {path}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from None


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"missing file: {p}")


def _options(args):
    """Parsed options as a JSON-safe dict for the run manifest."""
    return {k: v for k, v in vars(args).items() if k != "fn"}


def _now():
    return datetime.now(timezone.utc).isoformat()


def cmd_gen_synth(args):
    started = _now()
    try:
        spec = dio.SyntheticShiftSpec.from_dict(_read_json(args.spec))
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid synthetic spec: {err}") from None
    segments = dio.generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dio.save_dataset(segments, out)
    mean, sd, n = dio.label_stats(segments)
    print(f"wrote {n} segments to {out} (target mean {mean:.4f}, sd {sd:.4f})")
    write_manifest(out.parent, "gen-synth", spec.to_dict(), [args.spec], [spec.seed], started)


def cmd_split(args):
    started = _now()
    _require(args.data)
    segments = dio.load_dataset(args.data)
    try:
        splits = dio.split_by_subject(segments, tuple(args.fractions), args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dio.save_splits(splits, args.data, out)
    print(" ".join(f"{name}={len(idx)}" for name, idx in splits.items()))
    write_manifest(out.parent, "split", {"fractions": args.fractions}, [args.data],
                   [args.seed], started)


def cmd_train(args):
    """Config JSON: {"backbone": {...}, "train": {...}, "seeds": [...]} or
    {"backbone": ..., "train": ..., "ensemble": K}."""
    started = _now()
    _require(args.data, args.splits, args.config)
    cfg = _read_json(args.config)
    try:
        bcfg = BackboneConfig.from_dict(cfg.get("backbone", {}))
        tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid training config: {err}") from None
    segments = dio.load_dataset(args.data)
    splits = dio.load_splits(args.splits)
    tr, va = splits.select(segments, "train"), splits.select(segments, "val")
    if "ensemble" in cfg:
        ckpts = train_ensemble(tr, va, bcfg, tcfg, int(cfg["ensemble"]))
        tags = [f"member_{k}" for k in range(len(ckpts))]
    else:
        ckpts = train_seeds(tr, va, bcfg, tcfg, cfg.get("seeds", [tcfg.seed]))
        tags = [f"seed_{c.seed}" for c in ckpts]
    out = Path(args.out)
    for tag, c in zip(tags, ckpts):
        d = out / tag if len(ckpts) > 1 or "ensemble" in cfg else out
        save_model(c.model, d)
        write_log(c, d / "log.csv")
        (d / "checkpoint.json").write_text(json.dumps(
            {"epoch": c.epoch, "val_mae": c.val_mae, "seed": c.seed}))
        print(f"{tag}: best epoch {c.epoch}, val MAE {c.val_mae:.4f}")
    write_manifest(out, "train", cfg, [args.data, args.splits, args.config],
                   [c.seed for c in ckpts], started)


def _model_dirs(path):
    path = Path(path)
    if (path / "config.json").exists():
        return [path]
    dirs = sorted(p for p in path.iterdir() if (p / "config.json").exists())
    if not dirs:
        raise UsageError(f"no checkpoints under {path}")
    return dirs


def cmd_predict(args):
    started = _now()
    _require(args.ckpt, args.data)
    segments = dio.load_dataset(args.data)
    ids = np.arange(len(segments))
    if args.splits:
        _require(args.splits)
        ids = np.asarray(getattr(dio.load_splits(args.splits), args.split))
        segments = [segments[i] for i in ids]
    x, y = dio.stack(segments)
    dirs = _model_dirs(args.ckpt)
    if args.mode == "mcd":
        if len(dirs) != 1:
            raise UsageError("mcd mode needs exactly one checkpoint directory")
        try:
            preds = mcd_predict(load_model(dirs[0]), x, args.T, seed=args.seed, y_true=y,
                                ids=ids.astype(str))
        except ValueError as err:
            raise UsageError(str(err)) from None
    else:
        preds = ensemble_predict([load_model(d) for d in dirs], x, y_true=y, ids=ids.astype(str))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, out)
    print(f"wrote {len(preds)} predictions to {out}")
    write_manifest(out.parent, "predict", _options(args), [args.data], [args.seed], started)


def cmd_recalibrate(args):
    started = _now()
    _require(args.calib)
    fitted = fit_recalibration(args.method, read_predictions(args.calib))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(to_json(fitted))
    print(f"fitted {args.method} on {args.calib}")
    write_manifest(out.parent, "recalibrate", _options(args), [args.calib], [], started)


def cmd_apply(args):
    started = _now()
    _require(args.recal, args.preds)
    fitted = from_json(Path(args.recal).read_text())
    preds = apply_recalibration(fitted.method, fitted, read_predictions(args.preds))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, out)
    print(f"wrote recalibrated predictions to {out}")
    write_manifest(out.parent, "apply", _options(args), [args.recal, args.preds], [], started)


def cmd_evaluate(args):
    started = _now()
    _require(args.preds)
    rep = evaluate(read_predictions(args.preds), args.method or Path(args.preds).stem,
                   args.B, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=2))
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "value", "ci_lo", "ci_hi"])
        for k in ("mae", "winkler1", "winkler2", "summary"):
            w.writerow([rep.method_id, k, repr(getattr(rep, k))] + [repr(v) for v in rep.ci95[k]])
    print(f"MAE {rep.mae:.4f}  Winkler1 {rep.winkler1:.4f}  Winkler2 {rep.winkler2:.4f}  "
          f"summary {rep.summary:.4f}")
    write_manifest(out.parent, "evaluate", _options(args), [args.preds], [args.seed], started)


def _targets(path):
    path = Path(path)
    if path.suffix == ".jsonl":
        return [s.target for s in dio.load_dataset(path)]
    return np.loadtxt(path, delimiter=",", ndmin=1)


def cmd_emd(args):
    started = _now()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.surrogate:
        rows = [[d, t, repr(e), repr(a), repr(r)]
                for d, t, e, a, r in surrogate_emd_table(args.n, args.seed)]
        header = ["dataset", "target", "emd", "analytic", "reported"]
        inputs = []
    else:
        if not (args.a and args.b):
            raise UsageError("emd needs --a and --b, or --surrogate")
        _require(args.a, args.b)
        rows = [[args.a, args.b, repr(emd_1d(_targets(args.a), _targets(args.b)))]]
        header = ["a", "b", "emd"]
        inputs = [args.a, args.b]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    for r in rows:
        print("  ".join(str(v) for v in r))
    write_manifest(out.parent, "emd", _options(args), inputs, [args.seed], started)


def cmd_compare(args):
    started = _now()
    preds = {}
    for item in args.preds:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--preds expects name=path, got {item!r}")
        _require(path)
        preds[name] = read_predictions(path)
    metric = {"mae": mae, "summary": summary_score}[args.metric]
    table = compare_methods(preds, metric, args.B, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tier", "value", "delta_vs_best", "delta_lo", "delta_hi"])
        for m in sorted(preds, key=lambda m: (table.metric[m], m)):
            tier = "best" if m == table.best else "tier1" if m in table.tier1 else "tier2"
            w.writerow([m, tier, repr(table.metric[m])] + [repr(v) for v in table.delta[m]])
    print(f"best {table.best}; tier1 {table.tier1}; tier2 (top 3) {table.tier2}")
    write_manifest(out.parent, "compare", _options(args), [p.partition("=")[2] for p in args.preds],
                   [args.seed], started)


def cmd_report(args):
    run = Path(args.run_dir)
    _require(run / "metrics.csv", run / "tiers.csv")
    lines = []
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    lines.append(f"{'method':28s} {'slice':10s} {'MAE':>18s} {'Winkler1':>10s} "
                 f"{'Winkler2':>10s} {'summary':>10s}")
    for r in rows:
        lines.append(f"{r['method']:28s} {r['slice']:10s} "
                     f"{float(r['mae']):7.3f} [{float(r['mae_lo']):.3f},{float(r['mae_hi']):.3f}] "
                     f"{float(r['winkler1']):10.3f} {float(r['winkler2']):10.3f} "
                     f"{float(r['summary']):10.3f}")
    with open(run / "tiers.csv") as fh:
        tiers = list(csv.DictReader(fh))
    groups = {}
    for r in tiers:
        groups.setdefault((r["slice"], r["metric"]), []).append(r)
    lines.append("")
    for (sname, metric), rs in groups.items():
        best = [r["method"] for r in rs if r["tier"] == "best"]
        t1 = [r["method"] for r in rs if r["tier"] == "tier1"]
        t2 = [r["method"] for r in rs if r["tier2_reported"] == "1"]
        lines.append(f"{sname:10s} {metric:8s} best={best[0]}  tier1={t1}  tier2={t2}")
    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else run / "report.txt"
    out.write_text(text)
    print(text, end="")


def cmd_pipeline(args):
    if args.demo:
        cfg = json.loads(json.dumps(DEMO_CONFIG))
    elif args.config:
        cfg = _read_json(args.config)
    else:
        raise UsageError("pipeline needs --config or --demo")
    run_pipeline(cfg, args.out)
    print(f"artifacts in {args.out}")


def cmd_schema(args):
    print(json.dumps(CONFIG_SCHEMA, indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="shiftcal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", help="generate a synthetic shifted corpus")
    s.add_argument("--spec", required=True, help="synthetic spec JSON")
    s.add_argument("--out", required=True, help="output JSONL")
    s.set_defaults(fn=cmd_gen_synth)

    s = sub.add_parser("split", help="subject-disjoint train/val/calib/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--fractions", type=float, nargs=4, default=[0.7, 0.1, 0.1, 0.1])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("train", help="train seeds or an ensemble")
    s.add_argument("--data", required=True)
    s.add_argument("--splits", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="MC-dropout or ensemble predictions")
    s.add_argument("--ckpt", required=True, help="model dir (mcd) or dir of members (ensemble)")
    s.add_argument("--mode", choices=["mcd", "ensemble"], required=True)
    s.add_argument("--T", type=int, default=20)
    s.add_argument("--data", required=True)
    s.add_argument("--splits")
    s.add_argument("--split", choices=list(dio.SPLIT_NAMES), default="test")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("recalibrate", help="fit CP/TS/IR on calibration predictions")
    s.add_argument("--method", choices=["cp", "ts", "ir"], required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_recalibrate)

    s = sub.add_parser("apply", help="apply a fitted recalibrator")
    s.add_argument("--recal", required=True)
    s.add_argument("--preds", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_apply)

    s = sub.add_parser("evaluate", help="MAE, Winkler scores and bootstrap CIs")
    s.add_argument("--preds", required=True)
    s.add_argument("--method")
    s.add_argument("--B", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("emd", help="1-D EMD between label samples")
    s.add_argument("--a", help="JSONL corpus or CSV of numbers")
    s.add_argument("--b")
    s.add_argument("--surrogate", action="store_true",
                   help="Gaussian surrogates from published label statistics")
    s.add_argument("--n", type=int, default=1_000_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_emd)

    s = sub.add_parser("compare", help="paired-bootstrap tiering of methods")
    s.add_argument("--preds", nargs="+", required=True, metavar="NAME=PATH")
    s.add_argument("--metric", choices=["mae", "summary"], default="summary")
    s.add_argument("--B", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("report", help="tabulate a pipeline run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("pipeline", help="run the full pipeline from a config")
    s.add_argument("--config")
    s.add_argument("--demo", action="store_true", help="use the built-in desk demo config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("schema", help="print the pipeline config JSON Schema")
    s.set_defaults(fn=cmd_schema)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (UsageError, ConfigError, dio.DatasetFormatError) as err:
        print(f"shiftcal {args.command}: error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"shiftcal {args.command}: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - top-level exit code mapping
        print(f"shiftcal {args.command}: runtime error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
