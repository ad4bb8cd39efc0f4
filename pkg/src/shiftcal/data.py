"""Segments, subject-disjoint splits, synthetic shifted corpora and JSONL I/O.

Synthetic generator
-------------------
Each segment's signal is ``m + A * z`` where ``z`` is a band-limited random
process (sum of eight sinusoids with frequencies in 1..8 cycles per
segment, random phases and amplitudes) standardised to zero mean and unit
population SD. Hence the signal mean is exactly ``m`` and its SD exactly
``A``:

* ``m = subject_offset + segment_offset``, with subject offset ~ N(0, 0.5)
  and segment offset ~ N(0, 0.75), so ``m ~ N(0, 1)`` marginally;
* ``A ~ Uniform(0.5, 1.5)``.

With ``rms = sqrt(m**2 + A**2)`` the response is ``g = m + rms``, affine in
(mean, RMS). It is standardised with population constants computed by
quadrature (``h = (g - G_MEAN) / G_SD``) and the target is

    target = shift + scale * (rho * h + noise_sd_unit(m) * eps),  eps ~ N(0, 1)

* heteroscedastic: ``noise_sd_unit(m) = 0.2 + 0.6 * Phi(m)`` (0.2 .. 0.8,
  increasing in the signal mean ``m``); since ``Phi(m)`` is uniform,
  ``rho = sqrt(1 - E[noise_sd_unit**2]) = sqrt(0.72)``;
* homoscedastic(s): noise SD ``s`` in target units, ``rho = sqrt(1 - (s/scale)**2)``.

Both choices make the marginal target SD equal ``target_scale`` and the
marginal mean equal ``target_mean_shift``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .backbone import MIN_SIGNAL_LEN

SPLIT_NAMES = ("train", "val", "calib", "test")

A_LO, A_HI = 0.5, 1.5
SUBJECT_SD, SEGMENT_SD = 0.5, math.sqrt(0.75)
N_TONES = 8


@dataclass
class Segment:
    subject_id: str
    signal: np.ndarray
    target: float

    def __post_init__(self):
        self.subject_id = str(self.subject_id)
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.target = float(self.target)
        if self.signal.ndim != 1:
            raise ValueError("signal must be one-dimensional")
        if self.signal.size < MIN_SIGNAL_LEN:
            raise ValueError(f"signal length {self.signal.size} < {MIN_SIGNAL_LEN}")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError("signal contains non-finite samples")
        if not math.isfinite(self.target):
            raise ValueError("target is not finite")


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno, reason):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


def load_dataset(path):
    """Read a JSONL corpus; one ``{"subject_id", "target", "signal"}`` per line."""
    segments = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seg = Segment(rec["subject_id"], rec["signal"], rec["target"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DatasetFormatError(path, lineno, err) from None
            segments.append(seg)
    return segments


def save_dataset(segments, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in segments:
            rec = {"subject_id": s.subject_id, "target": s.target,
                   "signal": s.signal.tolist()}
            fh.write(json.dumps(rec) + "\n")


# ----------------------------------------------------------------------- splits

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood), 64-bit state."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n):
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n


def shuffle_subjects(subject_ids, seed):
    """Fisher-Yates over the lexicographically sorted ids, driven by SplitMix64:
    for i = n-1 .. 1, swap i with j = below(i + 1)."""
    ids = sorted(set(subject_ids))
    rng = SplitMix64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = rng.below(i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return ids


@dataclass
class DatasetSplits:
    """Index lists into a segment sequence, one per split."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    calib: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def items(self):
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]

    def select(self, segments, name):
        return [segments[i] for i in getattr(self, name)]

    def to_manifest(self, file):
        return {name: [[str(file), i] for i in idx] for name, idx in self.items()}

    @classmethod
    def from_manifest(cls, manifest):
        return cls(**{name: [int(ref[1]) for ref in manifest.get(name, [])]
                      for name in SPLIT_NAMES})


def split_by_subject(segments, fractions=(0.7, 0.1, 0.1, 0.1), seed=0):
    """Subject-disjoint four-way split.

    Subjects are shuffled by :func:`shuffle_subjects`; val, calib and test take
    ``floor(fraction * n_subjects)`` subjects each (at least one) in that
    order from the front of the shuffled list, and the remainder goes to
    train.
    """
    if len(fractions) != 4 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be four positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    subjects = shuffle_subjects([s.subject_id for s in segments], seed)
    n = len(subjects)
    if n < 4:
        raise ValueError(f"need at least 4 distinct subjects, got {n}")
    counts = [max(1, math.floor(f * n + 1e-9)) for f in fractions[1:]]
    if sum(counts) >= n:
        raise ValueError("fractions leave no subjects for training")
    assignment, pos = {}, 0
    for name, c in zip(("val", "calib", "test"), counts):
        for sid in subjects[pos:pos + c]:
            assignment[sid] = name
        pos += c
    for sid in subjects[pos:]:
        assignment[sid] = "train"
    splits = DatasetSplits()
    for i, s in enumerate(segments):
        getattr(splits, assignment[s.subject_id]).append(i)
    return splits


# -------------------------------------------------------------------- synthetic


@dataclass
class SyntheticShiftSpec:
    n_subjects: int = 40
    segments_per_subject: int = 25
    signal_len: int = 64
    target_mean_shift: float = 0.0
    target_scale: float = 1.0
    noise_profile: str = "heteroscedastic"  # or "homoscedastic(s)"
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.segments_per_subject < 1:
            raise ValueError("counts must be >= 1")
        if self.signal_len < MIN_SIGNAL_LEN:
            raise ValueError(f"signal_len must be >= {MIN_SIGNAL_LEN}")
        if not self.target_scale > 0:
            raise ValueError("target_scale must be > 0")
        s = self.homoscedastic_sd
        if s is not None and not 0 <= s < self.target_scale:
            raise ValueError("homoscedastic noise SD must lie in [0, target_scale)")

    @property
    def homoscedastic_sd(self):
        p = self.noise_profile.strip()
        if p == "heteroscedastic":
            return None
        if p.startswith("homoscedastic(") and p.endswith(")"):
            return float(p[len("homoscedastic("):-1])
        raise ValueError(f"unknown noise profile {self.noise_profile!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return dict(self.__dict__)


def _response_moments():
    """E[g] and SD[g] for g = m + sqrt(m^2 + A^2), m ~ N(0,1), A ~ U(0.5,1.5)."""
    xh, wh = special.roots_hermitenorm(80)
    wh = wh / wh.sum()
    xl, wl = special.roots_legendre(80)
    a = A_LO + (A_HI - A_LO) * (xl + 1) / 2
    wl = wl / wl.sum()
    g = xh[:, None] + np.sqrt(xh[:, None] ** 2 + a[None, :] ** 2)
    w = wh[:, None] * wl[None, :]
    mean = float((w * g).sum())
    return mean, float(np.sqrt((w * (g - mean) ** 2).sum()))


G_MEAN, G_SD = _response_moments()
_HET_RHO = math.sqrt(1.0 - (0.04 + 0.6 * 0.2 + 0.36 / 3.0))


def signal_stats(signal):
    """(mean, population SD, RMS) of a signal or of each row of a 2-D array."""
    x = np.asarray(signal, dtype=np.float64)
    mean = x.mean(axis=-1)
    sd = x.std(axis=-1)
    return mean, sd, np.sqrt(np.mean(x * x, axis=-1))


def noise_sd_unit(signal_mean):
    """Heteroscedastic noise SD in standardised target units; increasing."""
    return 0.2 + 0.6 * special.ndtr(np.asarray(signal_mean, dtype=np.float64))


def true_mean(signal, spec):
    """Noise-free target for ``signal`` under ``spec``."""
    mean, _, rms = signal_stats(signal)
    h = (mean + rms - G_MEAN) / G_SD
    s = spec.homoscedastic_sd
    rho = _HET_RHO if s is None else math.sqrt(1.0 - (s / spec.target_scale) ** 2)
    return spec.target_mean_shift + spec.target_scale * rho * h


def true_noise_sd(signal, spec):
    """Standard deviation of the target noise for ``signal`` under ``spec``."""
    mean, _, _ = signal_stats(signal)
    s = spec.homoscedastic_sd
    if s is None:
        return spec.target_scale * noise_sd_unit(mean)
    return np.full(np.shape(mean), s)


def _band_limited(rng, n, length):
    t = np.arange(length) / length
    freqs = rng.uniform(1.0, 8.0, size=(n, N_TONES))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n, N_TONES))
    amps = rng.uniform(0.2, 1.0, size=(n, N_TONES))
    z = np.einsum("nk,nkt->nt", amps,
                  np.sin(2 * np.pi * freqs[:, :, None] * t[None, None, :] + phases[:, :, None]))
    z -= z.mean(axis=1, keepdims=True)
    z /= z.std(axis=1, keepdims=True)
    return z


def generate_synthetic(spec):
    """Deterministic synthetic corpus for ``spec`` (see module docstring)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_subjects * spec.segments_per_subject
    subj_offset = np.repeat(rng.normal(0.0, SUBJECT_SD, size=spec.n_subjects),
                            spec.segments_per_subject)
    m = subj_offset + rng.normal(0.0, SEGMENT_SD, size=n)
    amp = rng.uniform(A_LO, A_HI, size=n)
    z = _band_limited(rng, n, spec.signal_len)
    signals = m[:, None] + amp[:, None] * z
    eps = rng.standard_normal(n)
    targets = true_mean(signals, spec) + true_noise_sd(signals, spec) * eps
    width = len(str(spec.n_subjects - 1))
    return [Segment(f"s{i // spec.segments_per_subject:0{width}d}", signals[i], targets[i])
            for i in range(n)]


def label_stats(segments):
    """(mean, population SD, count) of the targets."""
    if not segments:
        raise ValueError("label_stats needs at least one segment")
    y = np.array([s.target for s in segments])
    return float(y.mean()), float(y.std()), len(y)


def stack(segments):
    """Signals as an (N, L) array and targets as (N,); lengths must agree."""
    lengths = {s.signal.size for s in segments}
    if len(lengths) > 1:
        raise ValueError(f"mixed signal lengths {sorted(lengths)}")
    return (np.stack([s.signal for s in segments]),
            np.array([s.target for s in segments]))


def save_splits(splits, corpus_path, path):
    Path(path).write_text(json.dumps(splits.to_manifest(corpus_path)))


def load_splits(path):
    return DatasetSplits.from_manifest(json.loads(Path(path).read_text()))
