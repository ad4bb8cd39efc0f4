"""End-to-end run: data -> train -> predict -> recalibrate -> evaluate -> compare.

A run is described by one JSON config (see ``DEMO_CONFIG`` and
``CONFIG_SCHEMA``) and writes every artifact plus ``run_manifest.json``
into one output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from copy import deepcopy
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dio
from .backbone import BackboneConfig, save_model
from .infer import ensemble_predict, mcd_predict, write_predictions
from .metrics import (
    aggregate_seeds, calib_summary, compare_methods, emd_1d, evaluate, mae, summary_score,
)
from .recalib import apply_recalibration, fit_recalibration, to_json
from .train import TrainConfig, train_ensemble, train_seeds, write_log

log = logging.getLogger(__name__)

RECAL_METHODS = ("cp", "ts", "ir")

DEMO_CONFIG = {
    "seed": 0,
    "corpus": {
        "id": {"n_subjects": 100, "segments_per_subject": 20, "signal_len": 64,
               "target_mean_shift": 0.0, "target_scale": 1.0,
               "noise_profile": "heteroscedastic", "seed": 11},
        "ood": {
            "shifted": {"n_subjects": 15, "segments_per_subject": 20, "signal_len": 64,
                        "target_mean_shift": 0.5, "target_scale": 1.0,
                        "noise_profile": "heteroscedastic", "seed": 12},
        },
    },
    "split": {"fractions": [0.6, 0.1, 0.15, 0.15], "seed": 0},
    "backbone": {"block_counts": [1, 1, 1, 1], "scale": "desk"},
    "train": {"epochs": 8, "effective_batch": 64, "micro_batch": 32, "lr": 1e-3,
              "weight_decay": 1e-2},
    "methods": [
        {"id": "GNLL+MCD40", "loss": "gnll", "uq": "mcd", "dropout": 0.4, "seeds": [0, 1]},
        {"id": "MSE+MCD40", "loss": "mse", "uq": "mcd", "dropout": 0.4, "seeds": [0, 1]},
        {"id": "GNLL+DE", "loss": "gnll", "uq": "de", "dropout": 0.0, "K": 3, "seed": 0},
        {"id": "MSE+DE", "loss": "mse", "uq": "de", "dropout": 0.0, "K": 3, "seed": 0},
    ],
    "T": 20,
    "recalibration": ["cp", "ts", "ir"],
    "bootstrap": {"B": 1000, "seed": 0},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "shiftcal pipeline config",
    "type": "object",
    "required": ["corpus", "methods"],
    "properties": {
        "seed": {"type": "integer"},
        "corpus": {
            "type": "object",
            "properties": {
                "id": {"type": "object", "description": "synthetic spec for the ID corpus"},
                "data": {"type": "string", "description": "JSONL path of the ID corpus"},
                "ood": {"type": "object", "additionalProperties": {"type": "object"}},
                "ood_data": {"type": "object", "additionalProperties": {"type": "string"}},
            },
        },
        "splits": {"type": "string", "description": "optional precomputed splits manifest"},
        "split": {"type": "object", "properties": {
            "fractions": {"type": "array", "items": {"type": "number"}, "minItems": 4,
                          "maxItems": 4},
            "seed": {"type": "integer"}}},
        "backbone": {"type": "object"},
        "train": {"type": "object"},
        "methods": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["id", "loss", "uq"],
            "properties": {
                "id": {"type": "string"},
                "loss": {"enum": ["gnll", "mse"]},
                "uq": {"enum": ["mcd", "de"]},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "seed": {"type": "integer"},
                "K": {"type": "integer", "minimum": 1}}}},
        "T": {"type": "integer", "minimum": 2},
        "recalibration": {"type": "array", "items": {"enum": list(RECAL_METHODS)}},
        "bootstrap": {"type": "object", "properties": {
            "B": {"type": "integer", "minimum": 100}, "seed": {"type": "integer"}}},
    },
}


class ConfigError(ValueError):
    """Invalid or unreadable configuration (exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 1)."""

    def __init__(self, stage, err):
        self.stage = stage
        super().__init__(f"[{stage}] {err}")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, command, config, inputs, seeds, started):
    manifest = {
        "command": command,
        "config_sha256": config_hash(config) if config is not None else None,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "seeds": seeds,
        "tool_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    Path(out_dir, "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def validate_config(cfg):
    """Normalise ``cfg`` and check referenced files; raises ConfigError."""
    try:
        import jsonschema
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except ImportError:  # pragma: no cover - jsonschema ships with the env
        pass
    except Exception as err:
        raise ConfigError(f"config does not match schema: {getattr(err, 'message', err)}") from None
    cfg = deepcopy(cfg)
    corpus = cfg["corpus"]
    if ("id" in corpus) == ("data" in corpus):
        raise ConfigError("corpus needs exactly one of 'id' (synthetic spec) or 'data' (path)")
    paths = []
    if "data" in corpus:
        paths.append(corpus["data"])
    paths += list(corpus.get("ood_data", {}).values())
    if "splits" in cfg:
        paths.append(cfg["splits"])
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"missing input file: {p}")
    try:
        if "id" in corpus:
            dio.SyntheticShiftSpec.from_dict(corpus["id"])
        for spec in corpus.get("ood", {}).values():
            dio.SyntheticShiftSpec.from_dict(spec)
        BackboneConfig.from_dict(cfg.get("backbone", {}))
        TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    ids = [m["id"] for m in cfg["methods"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("method ids must be unique")
    for m in cfg["methods"]:
        if m["uq"] == "mcd" and m["loss"] == "mse" and m.get("dropout", 0.0) == 0.0:
            raise ConfigError(f"{m['id']}: MSE with MC dropout at rate 0 has no uncertainty source")
    cfg.setdefault("seed", 0)
    cfg.setdefault("split", {"fractions": [0.7, 0.1, 0.1, 0.1], "seed": cfg["seed"]})
    cfg.setdefault("T", 20)
    cfg.setdefault("recalibration", list(RECAL_METHODS))
    cfg.setdefault("bootstrap", {"B": 1000, "seed": cfg["seed"]})
    return cfg, [Path(p) for p in paths]


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class _Stage:
    def __init__(self, name, progress):
        self.name = name
        self.progress = progress

    def __enter__(self):
        self.t0 = time.perf_counter()
        self.progress(f"[{self.name}] ...")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.progress(f"[{self.name}] done in {time.perf_counter() - self.t0:.1f}s")
            return False
        if isinstance(exc, (StageError, ConfigError)):
            return False
        raise StageError(self.name, exc) from exc


def _variants(base_id, recal):
    return [base_id] + [f"{base_id}+{m.upper()}" for m in recal]


def run_pipeline(cfg, out_dir, progress=print):
    """Execute a validated config; returns a dict summary."""
    started = datetime.now(timezone.utc).isoformat()
    cfg, inputs = validate_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = cfg["corpus"]
    recal = list(cfg["recalibration"])
    boot_b, boot_seed = int(cfg["bootstrap"]["B"]), int(cfg["bootstrap"].get("seed", 0))

    with _Stage("data", progress):
        if "id" in corpus:
            segments = dio.generate_synthetic(dio.SyntheticShiftSpec.from_dict(corpus["id"]))
            id_path = out / "corpus_id.jsonl"
            dio.save_dataset(segments, id_path)
        else:
            id_path = Path(corpus["data"])
            segments = dio.load_dataset(id_path)
        if "splits" in cfg:
            splits = dio.load_splits(cfg["splits"])
        else:
            splits = dio.split_by_subject(segments, tuple(cfg["split"]["fractions"]),
                                          int(cfg["split"].get("seed", cfg["seed"])))
        dio.save_splits(splits, id_path, out / "splits.json")
        train_set = splits.select(segments, "train")
        val_set = splits.select(segments, "val")
        slices = {"calib": splits.select(segments, "calib"), "ID": splits.select(segments, "test")}
        for name, spec in corpus.get("ood", {}).items():
            ood = dio.generate_synthetic(dio.SyntheticShiftSpec.from_dict(spec))
            dio.save_dataset(ood, out / f"corpus_{name}.jsonl")
            slices[name] = ood
        for name, path in corpus.get("ood_data", {}).items():
            slices[name] = dio.load_dataset(path)
        eval_slices = [s for s in slices if s != "calib"]

    with _Stage("emd", progress):
        id_targets = [s.target for s in segments]
        rows = [[name, _fmt(emd_1d(id_targets, [s.target for s in slices[name]]))]
                for name in eval_slices if name != "ID"]
        _write_csv(out / "emd.csv", ["slice", "emd"], rows)

    base_backbone = cfg.get("backbone", {})
    base_train = cfg.get("train", {})
    trained = {}
    with _Stage("train", progress):
        for m in cfg["methods"]:
            bcfg = BackboneConfig.from_dict({
                **base_backbone, "dropout_rate": float(m.get("dropout", 0.0)),
                "head": "gaussian" if m["loss"] == "gnll" else "point"})
            tcfg = TrainConfig.from_dict({**base_train, "loss": m["loss"],
                                          "seed": int(m.get("seed", cfg["seed"]))})
            if m["uq"] == "mcd":
                ckpts = train_seeds(train_set, val_set, bcfg, tcfg, m.get("seeds", [tcfg.seed]))
                tags = [f"seed_{c.seed}" for c in ckpts]
            else:
                ckpts = train_ensemble(train_set, val_set, bcfg, tcfg, int(m.get("K", 5)))
                tags = [f"member_{k}" for k in range(len(ckpts))]
            for tag, c in zip(tags, ckpts):
                d = out / "models" / m["id"] / tag
                save_model(c.model, d)
                write_log(c, d / "log.csv")
                (d / "checkpoint.json").write_text(json.dumps(
                    {"epoch": c.epoch, "val_mae": c.val_mae, "seed": c.seed}))
            trained[m["id"]] = (m, ckpts)
            progress(f"  trained {m['id']}: {len(ckpts)} model(s), "
                     f"val MAE {[round(c.val_mae, 4) for c in ckpts]}")

    # predictions[method_id] = list over instances of {slice: Predictions}
    predictions = {}
    with _Stage("predict", progress):
        for mid, (m, ckpts) in trained.items():
            instances = []
            groups = [[c] for c in ckpts] if m["uq"] == "mcd" else [ckpts]
            for group in groups:
                by_slice = {}
                for sname, segs in slices.items():
                    x, y = dio.stack(segs)
                    ids = np.arange(len(segs)).astype(str)
                    if m["uq"] == "mcd":
                        by_slice[sname] = mcd_predict(group[0].model, x, int(cfg["T"]),
                                                      seed=group[0].seed, y_true=y, ids=ids)
                    else:
                        by_slice[sname] = ensemble_predict([c.model for c in group], x,
                                                           y_true=y, ids=ids)
                instances.append(by_slice)
            predictions[mid] = instances

    with _Stage("recalibrate", progress):
        for mid, instances in predictions.items():
            for i, by_slice in enumerate(instances):
                fitted_all = {meth: fit_recalibration(meth, by_slice["calib"]) for meth in recal}
                for meth, fitted in fitted_all.items():
                    if i == 0:
                        d = out / "recal"
                        d.mkdir(exist_ok=True)
                        (d / f"{mid}+{meth.upper()}.json").write_text(to_json(fitted))
                    for sname in eval_slices:
                        by_slice[f"{sname}+{meth.upper()}"] = apply_recalibration(
                            meth, fitted, by_slice[sname])

    def variant_preds(by_slice, sname, variant_suffix):
        return by_slice[sname if not variant_suffix else f"{sname}+{variant_suffix}"]

    metric_rows, seed_rows, reports = [], [], {}
    with _Stage("evaluate", progress):
        pdir = out / "preds"
        pdir.mkdir(exist_ok=True)
        for mid, instances in predictions.items():
            for suffix in [""] + [m.upper() for m in recal]:
                variant = mid if not suffix else f"{mid}+{suffix}"
                for sname in eval_slices:
                    primary = variant_preds(instances[0], sname, suffix)
                    write_predictions(primary, pdir / f"{variant}__{sname}.csv")
                    rep = evaluate(primary, variant, boot_b, boot_seed)
                    reports[(variant, sname)] = rep
                    metric_rows.append([variant, sname, rep.n_segments] + [
                        _fmt(v) for k in ("mae", "winkler1", "winkler2", "summary")
                        for v in (getattr(rep, k),) + tuple(rep.ci95[k])])
                    per_instance = [variant_preds(inst, sname, suffix) for inst in instances]
                    maes = [mae(p) for p in per_instance]
                    summaries = [calib_summary(p)[2] for p in per_instance]
                    seed_rows.append([variant, sname, len(per_instance)]
                                     + [_fmt(v) for v in aggregate_seeds(maes)]
                                     + [_fmt(v) for v in aggregate_seeds(summaries)])
        header = ["method", "slice", "n"] + [f"{k}{s}" for k in
                                             ("mae", "winkler1", "winkler2", "summary")
                                             for s in ("", "_lo", "_hi")]
        _write_csv(out / "metrics.csv", header, metric_rows)
        _write_csv(out / "seeds.csv", ["method", "slice", "n_instances", "mae_median",
                                       "mae_iqr", "summary_median", "summary_iqr"], seed_rows)

    tier_rows, tiers = [], {}
    with _Stage("compare", progress):
        for sname in eval_slices:
            for metric_name, metric in (("mae", mae), ("summary", summary_score)):
                suffixes = [""] if metric_name == "mae" else [""] + [m.upper() for m in recal]
                cand = {}
                for mid, instances in predictions.items():
                    for suffix in suffixes:
                        variant = mid if not suffix else f"{mid}+{suffix}"
                        cand[variant] = variant_preds(instances[0], sname, suffix)
                if len(cand) < 2:
                    continue
                table = compare_methods(cand, metric, boot_b, boot_seed)
                tiers[(sname, metric_name)] = table
                for variant in sorted(cand, key=lambda v: (table.metric[v], v)):
                    tier = ("best" if variant == table.best else
                            "tier1" if variant in table.tier1 else "tier2")
                    d, lo, hi = table.delta[variant]
                    tier_rows.append([sname, metric_name, variant, tier,
                                      int(variant in table.tier2), _fmt(table.metric[variant]),
                                      _fmt(d), _fmt(lo), _fmt(hi)])
        _write_csv(out / "tiers.csv", ["slice", "metric", "method", "tier", "tier2_reported",
                                       "value", "delta_vs_best", "delta_lo", "delta_hi"],
                   tier_rows)

    summary = {
        "slices": eval_slices,
        "reports": [r.to_dict() | {"slice": s} for (v, s), r in reports.items()],
        "tiers": [{"slice": s, "metric": k, **t.to_dict()} for (s, k), t in tiers.items()],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=1, default=list))
    seeds = {m["id"]: m.get("seeds", [m.get("seed", cfg["seed"])]) for m in cfg["methods"]}
    write_manifest(out, "pipeline", cfg, inputs, seeds, started)
    return summary
