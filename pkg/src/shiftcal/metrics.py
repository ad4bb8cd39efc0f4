"""Accuracy, interval scores, label-shift EMD, bootstrap CIs and tiering."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .infer import ALPHA_BY_Z

LEVELS = (1, 2)


def mae(preds):
    if len(preds) == 0:
        raise ValueError("mae of empty predictions")
    return float(np.mean(np.abs(preds.mu - preds.y_true)))


mae.per_segment = lambda preds: np.abs(preds.mu - preds.y_true)


def winkler(lower, upper, y, alpha):
    """Interval score of central (1 - alpha) intervals; elementwise."""
    lower, upper, y = (np.asarray(a, dtype=np.float64) for a in (lower, upper, y))
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if np.any(lower > upper):
        raise ValueError("interval lower bound exceeds upper bound")
    score = upper - lower
    score = score + np.where(y < lower, (2.0 / alpha) * (lower - y), 0.0)
    score = score + np.where(y > upper, (2.0 / alpha) * (y - upper), 0.0)
    return score if score.ndim else float(score)


def calib_summary(preds):
    """(winkler at 1 sigma, winkler at 2 sigma, their mean)."""
    w = []
    for z in LEVELS:
        lo, hi = preds.bounds(z)
        w.append(float(np.mean(winkler(lo, hi, preds.y_true, ALPHA_BY_Z[z]))))
    return w[0], w[1], (w[0] + w[1]) / 2.0


def winkler_per_segment(preds, z):
    lo, hi = preds.bounds(z)
    return winkler(lo, hi, preds.y_true, ALPHA_BY_Z[z])


def summary_score(preds):
    return calib_summary(preds)[2]


summary_score.per_segment = lambda preds: 0.5 * (winkler_per_segment(preds, 1)
                                                 + winkler_per_segment(preds, 2))


def expected_gaussian_winkler(sigma, z, alpha):
    """E[W] for the interval mu -/+ z*sigma when y ~ N(mu, sigma^2)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    tail = sigma * (norm.pdf(z) - z * norm.sf(z))  # E[(|e| - z sigma)+] / 2
    return 2 * z * sigma + (2.0 / alpha) * 2.0 * tail


def emd_1d(a, b):
    """Exact Wasserstein-1 distance between two empirical distributions:
    the integral of |F_a - F_b| over the merged sorted sample grid."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("emd_1d needs nonempty samples")
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    deltas = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * deltas))


def gaussian_emd(mean_a, sd_a, mean_b, sd_b):
    """W1 between two normals: E|d + s Z| with d the mean gap, s the SD gap."""
    d = abs(mean_b - mean_a)
    s = abs(sd_b - sd_a)
    if s == 0:
        return float(d)
    return float(d * (2 * norm.cdf(d / s) - 1) + 2 * s * norm.pdf(d / s))


# --------------------------------------------------------------------- bootstrap


def resample_indices(n, b, seed):
    """Replicate r draws n indices from its own stream seeded (seed, r)."""
    return np.stack([np.random.default_rng([seed, r]).integers(0, n, size=n)
                     for r in range(b)])


def _percentile_ci(values):
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


def bootstrap_ci(preds, metric, b=1000, seed=0):
    """(point, lo, hi): percentile 95% CI over segment-level resamples."""
    if len(preds) == 0:
        raise ValueError("bootstrap of empty predictions")
    if b < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    idx = resample_indices(len(preds), b, seed)
    return (float(metric(preds)),) + _percentile_ci(_replicates(preds, metric, idx))


def _replicates(preds, metric, idx):
    """Metric on each resample; metrics that are segment means are vectorised."""
    per_segment = getattr(metric, "per_segment", None)
    if per_segment is not None:
        return per_segment(preds)[idx].mean(axis=1)
    return np.array([metric(preds.take(i)) for i in idx])


def _check_paired(a, b):
    if len(a) != len(b) or not np.array_equal(a.segment_id, b.segment_id):
        raise ValueError("paired comparison needs identical segment ids in the same order")


def paired_diff(preds_a, preds_b, metric, b=1000, seed=0):
    """metric(a) - metric(b) with a percentile CI over shared resamples."""
    _check_paired(preds_a, preds_b)
    idx = resample_indices(len(preds_a), b, seed)
    diffs = _replicates(preds_a, metric, idx) - _replicates(preds_b, metric, idx)
    return (float(metric(preds_a) - metric(preds_b)),) + _percentile_ci(diffs)


@dataclass
class EvalReport:
    method_id: str
    mae: float
    winkler1: float
    winkler2: float
    summary: float
    n_segments: int
    ci95: dict = field(default_factory=dict)  # metric -> (lo, hi)

    def to_dict(self):
        return asdict(self)


def evaluate(preds, method_id="", b=1000, seed=0):
    """EvalReport with bootstrap CIs for every metric from one set of resamples."""
    w1, w2, summary = calib_summary(preds)
    idx = resample_indices(len(preds), b, seed)
    s1, s2 = winkler_per_segment(preds, 1), winkler_per_segment(preds, 2)
    reps = {"mae": mae.per_segment(preds)[idx].mean(axis=1),
            "winkler1": s1[idx].mean(axis=1), "winkler2": s2[idx].mean(axis=1)}
    reps["summary"] = (reps["winkler1"] + reps["winkler2"]) / 2.0
    ci = {n: _percentile_ci(v) for n, v in reps.items()}
    return EvalReport(method_id, mae(preds), w1, w2, summary, len(preds), ci)


# ------------------------------------------------------------------------- tiers


@dataclass
class TierTable:
    best: str
    tier1: list
    tier2: list
    metric: dict  # method -> point value
    delta: dict  # method -> (delta vs best, lo, hi)

    def to_dict(self):
        return asdict(self)


def tier_methods(metrics, diffs):
    """Tier assignment from point metrics (lower is better) and paired
    differences ``method - best`` with their 95% CIs.

    The best method is the smallest metric, ties broken by method id. Tier 1
    holds the best and every method whose CI contains zero; tier 2 lists the
    three best-scoring methods whose CI excludes zero.
    """
    if len(metrics) < 2:
        raise ValueError("tiering needs at least two methods")
    best = min(metrics, key=lambda m: (metrics[m], m))
    tier1, rest = [best], []
    for m in sorted(metrics, key=lambda m: (metrics[m], m)):
        if m == best:
            continue
        _, lo, hi = diffs[m]
        if lo <= 0.0 <= hi:
            tier1.append(m)
        else:
            rest.append(m)
    delta = {m: tuple(diffs[m]) for m in metrics if m != best}
    delta[best] = (0.0, 0.0, 0.0)
    return TierTable(best, tier1, rest[:3], dict(metrics), delta)


def compare_methods(preds_by_method, metric, b=1000, seed=0):
    """Point metrics, paired bootstrap vs the best method, and tiers."""
    values = {m: float(metric(p)) for m, p in preds_by_method.items()}
    best = min(values, key=lambda m: (values[m], m))
    diffs = {m: paired_diff(p, preds_by_method[best], metric, b, seed)
             for m, p in preds_by_method.items() if m != best}
    return tier_methods(values, diffs)


def aggregate_seeds(values):
    """(median, IQR) with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate_seeds needs at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return float(med), float(q3 - q1)


# ------------------------------------------------------------ label-shift table

# Blood-pressure label statistics (mean, SD) in mmHg per dataset.
ID_LABEL_STATS = {"SBP": (115.47, 18.91), "DBP": (62.93, 12.06)}
OOD_LABEL_STATS = {
    "Sensors": {"SBP": (134.36, 21.78), "DBP": (65.37, 10.51)},
    "UCI": {"SBP": (131.57, 11.16), "DBP": (66.79, 10.48)},
    "PPGBP": {"SBP": (128.02, 20.50), "DBP": (71.91, 11.20)},
    "BCG": {"SBP": (120.99, 15.29), "DBP": (67.23, 9.30)},
}
# Published EMD point estimates (mmHg) between the ID and each OOD corpus.
REPORTED_EMD = {
    "Sensors": {"SBP": 18.82, "DBP": 2.43},
    "UCI": {"SBP": 16.04, "DBP": 3.84},
    "PPGBP": {"SBP": 12.54, "DBP": 9.00},
    "BCG": {"SBP": 5.95, "DBP": 4.49},
}


def surrogate_emd_table(n=1_000_000, seed=0):
    """EMD between Gaussian surrogate label samples of the ID corpus and each
    OOD corpus. Returns rows (dataset, target, emd, analytic, reported)."""
    rows = []
    for k, (name, stats) in enumerate(OOD_LABEL_STATS.items()):
        for j, target in enumerate(("SBP", "DBP")):
            rng = np.random.default_rng([seed, k, j])
            m0, s0 = ID_LABEL_STATS[target]
            m1, s1 = stats[target]
            a = rng.normal(m0, s0, size=n)
            b = rng.normal(m1, s1, size=n)
            rows.append((name, target, emd_1d(a, b), gaussian_emd(m0, s0, m1, s1),
                         REPORTED_EMD[name][target]))
    return rows
