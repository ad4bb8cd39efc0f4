"""Predictive distributions from MC dropout and deep ensembles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from .autodiff import RowStreams
from .backbone import predict_numpy

# 2 * (1 - Phi(z)) for z = 1, 2, rounded to six decimals
ALPHA_BY_Z = {1: 0.317311, 2: 0.045500}
DEFAULT_T = 20
CSV_COLUMNS = ["segment_id", "y_true", "mu", "var_ale", "var_epi", "var_total"]


class PredictiveDistribution(NamedTuple):
    mu: float
    var_ale: float
    var_epi: float
    var_total: float


class IntervalLevel(NamedTuple):
    z: float
    alpha: float

    @classmethod
    def from_z(cls, z):
        z = float(z)
        alpha = ALPHA_BY_Z.get(z, 2.0 * norm.sf(z))
        return cls(z, alpha)


@dataclass
class Predictions:
    """Per-segment predictive distributions for one method on one dataset.

    ``intervals`` maps z -> (lower, upper) arrays for interval-native outputs
    (conformal); otherwise intervals are Gaussian from ``var_total``.
    """

    segment_id: np.ndarray
    y_true: np.ndarray
    mu: np.ndarray
    var_ale: np.ndarray
    var_epi: np.ndarray
    var_total: np.ndarray = None
    intervals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.segment_id = np.asarray(self.segment_id).astype(str)
        for name in ("y_true", "mu", "var_ale", "var_epi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.var_total is None:
            self.var_total = self.var_ale + self.var_epi
        self.var_total = np.asarray(self.var_total, dtype=np.float64)

    def __len__(self):
        return len(self.mu)

    def __getitem__(self, i):
        return PredictiveDistribution(self.mu[i], self.var_ale[i], self.var_epi[i],
                                      self.var_total[i])

    @property
    def interval_native(self):
        return bool(self.intervals)

    def take(self, idx):
        return Predictions(self.segment_id[idx], self.y_true[idx], self.mu[idx],
                           self.var_ale[idx], self.var_epi[idx], self.var_total[idx],
                           {z: (lo[idx], hi[idx]) for z, (lo, hi) in self.intervals.items()})

    def bounds(self, z):
        """(L, U) at level z: stored intervals if present, else Gaussian."""
        if self.intervals:
            if z not in self.intervals:
                raise KeyError(f"no interval stored for z={z}")
            return self.intervals[z]
        return interval(self, IntervalLevel.from_z(z))

    def with_variances(self, var_ale, var_epi, var_total):
        return replace(self, var_ale=var_ale, var_epi=var_epi, var_total=var_total,
                       intervals={})


def combine(means, variances=None):
    """Moment combination over the leading axis of (T or K, N) arrays.

    mu is the mean of the per-pass means, the epistemic part their population
    variance, the aleatoric part the mean of per-pass variances (zero when
    none), and total = aleatoric + epistemic.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 1:
        means = means[:, None]
    mu = means.mean(axis=0)
    var_epi = np.mean((means - mu) ** 2, axis=0)
    if variances is None:
        var_ale = np.zeros_like(mu)
    else:
        var_ale = np.asarray(variances, dtype=np.float64).reshape(means.shape).mean(axis=0)
    return mu, var_ale, var_epi, var_ale + var_epi


def _batches(n, size):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


def mcd_predict(model, signals, T=DEFAULT_T, seed=0, y_true=None, ids=None,
                index_offset=0, batch=256):
    """MC-dropout predictions for (N, L) ``signals``.

    Dropout is active and batch norm uses running statistics. The dropout
    masks of segment i on pass t come from a generator seeded with
    (seed, index_offset + i, t), independent of batching.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 1:
        signals = signals[None, :]
    n = len(signals)
    cfg = model.config
    stochastic = cfg.dropout_rate > 0
    if not stochastic and cfg.head == "point":
        raise ValueError("no uncertainty source: point head without dropout")
    if stochastic and T < 2:
        raise ValueError("MC dropout needs T >= 2 passes")
    passes = T if stochastic else 1
    means = np.empty((passes, n))
    variances = np.empty((passes, n)) if cfg.head == "gaussian" else None
    for lo, hi in _batches(n, batch):
        for t in range(passes):
            rng = None
            if stochastic:
                rng = RowStreams(np.random.default_rng([seed, index_offset + i, t])
                                 for i in range(lo, hi))
            mu, var = predict_numpy(model, signals[lo:hi], "mc", rng)
            means[t, lo:hi] = mu
            if variances is not None:
                variances[t, lo:hi] = var
    return _package(combine(means, variances), y_true, ids, n)


def ensemble_predict(members, signals, y_true=None, ids=None, batch=256):
    """Deep-ensemble predictions; members run deterministically in eval mode."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 1:
        signals = signals[None, :]
    n = len(signals)
    gaussian = all(m.config.head == "gaussian" for m in members)
    means = np.empty((len(members), n))
    variances = np.empty((len(members), n)) if gaussian else None
    for k, model in enumerate(members):
        for lo, hi in _batches(n, batch):
            mu, var = predict_numpy(model, signals[lo:hi], "eval")
            means[k, lo:hi] = mu
            if gaussian:
                variances[k, lo:hi] = var
    return _package(combine(means, variances), y_true, ids, n)


def _package(moments, y_true, ids, n):
    mu, ale, epi, total = moments
    if ids is None:
        ids = np.arange(n).astype(str)
    if y_true is None:
        y_true = np.full(n, np.nan)
    return Predictions(ids, y_true, mu, ale, epi, total)


def interval(pd, level):
    """Gaussian interval mu -/+ z * sqrt(var_total); works on a single
    PredictiveDistribution or on Predictions."""
    z = level.z if isinstance(level, IntervalLevel) else float(level)
    half = z * np.sqrt(pd.var_total)
    return pd.mu - half, pd.mu + half


# ---------------------------------------------------------------------------- io


def _interval_columns(z):
    tag = f"{z:g}"
    return f"lo_z{tag}", f"hi_z{tag}"


def write_predictions(preds, path):
    zs = sorted(preds.intervals)
    header = CSV_COLUMNS + [c for z in zs for c in _interval_columns(z)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(preds)):
            row = [preds.segment_id[i]] + [
                repr(float(getattr(preds, c)[i])) for c in CSV_COLUMNS[1:]]
            for z in zs:
                lo, hi = preds.intervals[z]
                row += [repr(float(lo[i])), repr(float(hi[i]))]
            w.writerow(row)


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return Predictions([], [], [], [], [], [])
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    cols = {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS[1:]}
    intervals = {}
    for key in rows[0]:
        if key.startswith("lo_z"):
            tag = key[len("lo_z"):]
            z = float(tag)
            z = int(z) if z.is_integer() else z
            intervals[z] = (np.array([float(r[key]) for r in rows]),
                            np.array([float(r[f"hi_z{tag}"]) for r in rows]))
    return Predictions([r["segment_id"] for r in rows], cols["y_true"], cols["mu"],
                       cols["var_ale"], cols["var_epi"], cols["var_total"], intervals)
