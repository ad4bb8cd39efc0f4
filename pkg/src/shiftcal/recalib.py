"""Post-hoc recalibration fitted on a calibration split.

All three methods leave the point predictions untouched:

* temperature scaling multiplies the total variance by a single ``tau``;
* isotonic regression maps predicted variance to a monotone fit of squared
  residuals (pool adjacent violators);
* split conformal turns normalised residual quantiles into intervals
  ``mu -/+ q_alpha * sqrt(var_total)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .infer import ALPHA_BY_Z

IR_FLOOR = 1e-6
MIN_CALIB = 10
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _calib_arrays(calib):
    """Accept Predictions or an iterable of (mu, var_total, y) triples."""
    if hasattr(calib, "var_total"):
        return (np.asarray(calib.mu, float), np.asarray(calib.var_total, float),
                np.asarray(calib.y_true, float))
    arr = np.asarray(list(calib), dtype=np.float64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


@dataclass(frozen=True)
class TemperatureScaler:
    tau: float
    method = "ts"

    def to_dict(self):
        return {"method": "ts", "tau": self.tau}


@dataclass(frozen=True)
class IsotonicMap:
    breakpoints: tuple
    levels: tuple
    floor: float = IR_FLOOR
    method = "ir"

    def __call__(self, var):
        return np.interp(np.asarray(var, dtype=np.float64), self.breakpoints, self.levels)

    def to_dict(self):
        return {"method": "ir", "breakpoints": list(self.breakpoints),
                "levels": list(self.levels), "floor": self.floor}


@dataclass(frozen=True)
class ConformalOffset:
    q_alpha: dict  # alpha -> quantile of normalised scores
    n_calib: int
    method = "cp"

    def q_for_z(self, z):
        alpha = ALPHA_BY_Z.get(z)
        if alpha not in self.q_alpha:
            raise KeyError(f"no conformal quantile fitted for z={z}")
        return self.q_alpha[alpha]

    def to_dict(self):
        return {"method": "cp", "n_calib": self.n_calib,
                "q_alpha": [[a, q] for a, q in sorted(self.q_alpha.items())]}


# ------------------------------------------------------------------- temperature


def golden_section(f, lo, hi, tol=1e-6):
    """Minimise a unimodal ``f`` on [lo, hi] to bracket width ``tol``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit_ts(calib):
    """tau minimising the mean Gaussian NLL of y under N(mu, tau * var_total);
    golden-section search over log tau in [-10, 10]."""
    mu, var, y = _calib_arrays(calib)
    if len(y) < MIN_CALIB:
        raise ValueError(f"temperature scaling needs >= {MIN_CALIB} calibration points")
    if np.any(var <= 0):
        raise ValueError("temperature scaling needs strictly positive var_total")
    ratio = (y - mu) ** 2 / var
    mean_log_var = np.mean(np.log(var))

    def nll(log_tau):
        return 0.5 * (log_tau + mean_log_var + np.mean(ratio) * math.exp(-log_tau))

    return TemperatureScaler(math.exp(golden_section(nll, -10.0, 10.0, 1e-6)))


# ---------------------------------------------------------------------- isotonic


def pav(y, w=None):
    """Weighted pool-adjacent-violators: nondecreasing least-squares fit of y."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2, s2 = vals.pop(), wts.pop(), sizes.pop()
            v1, w1, s1 = vals.pop(), wts.pop(), sizes.pop()
            wt = w1 + w2
            vals.append((v1 * w1 + v2 * w2) / wt)
            wts.append(wt)
            sizes.append(s1 + s2)
    return np.repeat(vals, sizes)


def fit_ir(calib):
    """Isotonic map from var_total to squared residuals."""
    mu, var, y = _calib_arrays(calib)
    if len(y) < MIN_CALIB:
        raise ValueError(f"isotonic regression needs >= {MIN_CALIB} calibration points")
    r2 = (y - mu) ** 2
    xs, inverse, counts = np.unique(var, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=r2, minlength=len(xs))
    fitted = pav(sums / counts, counts)
    levels = np.maximum(fitted, IR_FLOOR)
    return IsotonicMap(tuple(xs.tolist()), tuple(levels.tolist()))


# --------------------------------------------------------------------- conformal


def conformal_rank(n, alpha):
    """1-based rank ceil((n + 1)(1 - alpha)) of the conformal quantile."""
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


def fit_cp(calib, alphas=tuple(ALPHA_BY_Z.values())):
    """Split-conformal quantiles of |y - mu| / sqrt(var_total)."""
    mu, var, y = _calib_arrays(calib)
    if np.any(var <= 0):
        raise ValueError("conformal calibration needs strictly positive var_total")
    scores = np.sort(np.abs(y - mu) / np.sqrt(var))
    n = len(scores)
    q = {}
    for alpha in alphas:
        if not 0 < alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {alpha}")
        k = conformal_rank(n, alpha)
        if k > n:
            raise ValueError(f"{n} calibration points are too few for alpha={alpha} "
                             f"(need >= {math.ceil(1 / alpha) - 1})")
        q[float(alpha)] = float(scores[max(k, 1) - 1])
    return ConformalOffset(q, n)


# ---------------------------------------------------------------------- applying


def apply_ts(scaler, preds):
    t = scaler.tau
    return preds.with_variances(preds.var_ale * t, preds.var_epi * t, preds.var_total * t)


def apply_ir(imap, preds):
    """Replace var_total by the isotonic map and split it in the old
    aleatoric/epistemic proportions (all epistemic when the old total is 0).

    The larger share is scaled and the smaller one is the exact remainder
    (Sterbenz), so ale + epi reproduces the mapped total bit for bit.
    """
    new_total = imap(preds.var_total)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac_ale = np.where(preds.var_total > 0, preds.var_ale / preds.var_total, 0.0)
    ale_big = frac_ale >= 0.5
    big = new_total * np.where(ale_big, frac_ale, 1.0 - frac_ale)
    small = new_total - big
    ale = np.where(ale_big, big, small)
    epi = np.where(ale_big, small, big)
    return preds.with_variances(ale, epi, ale + epi)


def apply_cp(offset, preds, zs=(1, 2)):
    half = np.sqrt(preds.var_total)
    intervals = {}
    for z in zs:
        q = offset.q_for_z(z)
        intervals[z] = (preds.mu - q * half, preds.mu + q * half)
    out = preds.take(np.arange(len(preds)))
    out.intervals = intervals
    return out


_APPLY = {"ts": (TemperatureScaler, apply_ts), "ir": (IsotonicMap, apply_ir),
          "cp": (ConformalOffset, apply_cp)}
_FIT = {"ts": fit_ts, "ir": fit_ir, "cp": fit_cp}


def fit_recalibration(method, calib):
    if method not in _FIT:
        raise ValueError(f"unknown recalibration method {method!r}")
    return _FIT[method](calib)


def apply_recalibration(method, fitted, preds):
    if method not in _APPLY:
        raise ValueError(f"unknown recalibration method {method!r}")
    cls, fn = _APPLY[method]
    if not isinstance(fitted, cls):
        raise TypeError(f"{method} expects {cls.__name__}, got {type(fitted).__name__}")
    return fn(fitted, preds)


def to_json(fitted):
    return json.dumps(fitted.to_dict(), indent=2)


def from_json(text):
    d = json.loads(text)
    method = d.get("method")
    if method == "ts":
        return TemperatureScaler(float(d["tau"]))
    if method == "ir":
        return IsotonicMap(tuple(d["breakpoints"]), tuple(d["levels"]), float(d["floor"]))
    if method == "cp":
        return ConformalOffset({float(a): float(q) for a, q in d["q_alpha"]}, int(d["n_calib"]))
    raise ValueError(f"unknown recalibration method {method!r}")
