"""Losses, AdamW with gradient accumulation, and training drivers."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, build_model, forward, predict_numpy
from .data import stack

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    effective_batch: int = 512
    micro_batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss: str = "gnll"
    seed: int = 0
    standardize_targets: bool = True

    def __post_init__(self):
        if self.effective_batch % self.micro_batch:
            raise ValueError("effective_batch must be divisible by micro_batch")
        if self.loss not in ("gnll", "mse"):
            raise ValueError("loss must be 'gnll' or 'mse'")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Checkpoint:
    model: object  # ModelParams
    epoch: int
    val_mae: float
    log: list = field(default_factory=list)  # [(epoch, train_loss, val_mae)]
    seed: int = 0


def gnll_loss(mu, log_var, y):
    """Batch mean of ``0.5*log_var + (y - mu)^2 / (2*exp(log_var))``."""
    r2 = ad.square(ad.sub(y, mu))
    per = ad.add(ad.scale_shift(log_var, 0.5, 0.0),
                 ad.scale_shift(ad.mul(r2, ad.exp(ad.scale_shift(log_var, -1.0, 0.0))), 0.5, 0.0))
    return ad.mean(per)


def mse_loss(mu, y):
    return ad.mean(ad.square(ad.sub(y, mu)))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
    """In-place decoupled-weight-decay Adam update of ``params`` (name -> Tensor)."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def batch_loss(model, x, y, loss, mode, rng):
    out = forward(model, x, mode, rng)
    yt = ad.Tensor(y)
    if model.config.head == "gaussian":
        mu, log_var = out
        if loss == "gnll":
            return gnll_loss(mu, log_var, yt)
        return mse_loss(mu, yt)
    if loss == "gnll":
        raise ValueError("gnll loss needs a gaussian head")
    return mse_loss(out, yt)


def accumulate_gradients(model, x, y, loss, micro_batch, mode="train", rng=None):
    """Gradient of the mean loss over (x, y), accumulated over micro-batches.

    Returns (grads by parameter name, mean loss). Micro-batches are weighted by
    their size so the result equals the full-batch gradient whenever the
    forward pass does not depend on batch composition.
    """
    n = len(y)
    bounds = list(range(0, n, micro_batch)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]  # a trailing batch of one cannot use batch statistics
    name_of = {id(t): k for k, t in model.params.items()}
    total = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    total_loss = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        w = (hi - lo) / n
        with ad.Tape() as tape:
            value = batch_loss(model, x[lo:hi], y[lo:hi], loss, mode, rng)
        for t, g in ad.backward(tape, value).items():
            total[name_of[id(t)]] += w * g
        total_loss += w * float(value.data)
    return total, total_loss


def mae_of(model, x, y, batch=256):
    preds = np.concatenate([predict_numpy(model, x[i:i + batch])[0]
                            for i in range(0, len(y), batch)])
    return float(np.mean(np.abs(preds - y)))


def train_model(train_segments, val_segments, backbone_config, train_config):
    """Train one model and return the lowest-validation-MAE checkpoint."""
    if not train_segments or not val_segments:
        raise ValueError("train and val splits must be nonempty")
    cfg = train_config
    x_tr, y_tr = stack(train_segments)
    x_va, y_va = stack(val_segments)
    model = build_model(backbone_config, cfg.seed)
    if cfg.standardize_targets:
        model.target_shift = float(y_tr.mean())
        model.target_scale = float(y_tr.std()) or 1.0
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamWState()
    best = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y_tr))
        losses = []
        for start in range(0, len(order), cfg.effective_batch):
            idx = order[start:start + cfg.effective_batch]
            if len(idx) < 2:
                continue
            try:
                grads, value = accumulate_gradients(model, x_tr[idx], y_tr[idx], cfg.loss,
                                                    cfg.micro_batch, "train", rng)
            except ad.NonFiniteError as err:
                raise RuntimeError(f"training diverged at epoch {epoch}, batch "
                                   f"{start // cfg.effective_batch}: {err}") from err
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            adamw_step(model.params, grads, state, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
            losses.append(value)
        val_mae = mae_of(model, x_va, y_va)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append((epoch, train_loss, val_mae))
        log.debug("seed %s epoch %d loss %.4f val_mae %.4f", cfg.seed, epoch, train_loss, val_mae)
        if best is None or val_mae < best.val_mae:
            best = Checkpoint(model.copy(), epoch, val_mae, seed=cfg.seed)
    best.log = history
    return best


def member_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1, np.uint64)[0])


def train_seeds(train_segments, val_segments, backbone_config, train_config, seeds):
    if not seeds:
        raise ValueError("need at least one seed")
    out = []
    for s in seeds:
        cfg = TrainConfig.from_dict({**train_config.to_dict(), "seed": int(s)})
        try:
            out.append(train_model(train_segments, val_segments, backbone_config, cfg))
        except Exception as err:
            raise RuntimeError(f"seed {s}: {err}") from err
    return out


def train_ensemble(train_segments, val_segments, backbone_config, train_config, k=5):
    """K members, each with its own init/shuffle seed derived from the base seed."""
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    seeds = [member_seed(train_config.seed, i) for i in range(k)]
    return train_seeds(train_segments, val_segments, backbone_config, train_config, seeds)


def write_log(checkpoint, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mae"])
        for epoch, loss, mae in checkpoint.log:
            w.writerow([epoch, repr(loss), repr(mae)])


__all__ = [
    "AdamWState", "BackboneConfig", "Checkpoint", "TrainConfig", "accumulate_gradients",
    "adamw_step", "gnll_loss", "mse_loss", "train_ensemble", "train_model", "train_seeds",
]
