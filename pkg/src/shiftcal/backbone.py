"""XResNet1D-style regression backbone with block-level dropout.

Layout (channel widths for ``scale="paper"``; ``"desk"`` shrinks them):

    stem    conv k5/s2 -> BN -> ReLU -> conv k3 -> BN -> ReLU -> conv k3 -> BN -> ReLU
            -> max pool k3/s2
    stages  4 stages of bottleneck blocks, widths base_width * (1, 2, 4, 8),
            output channels width * expansion, stride 2 on the first block of
            stages 2-4
    block   y = ReLU(Dropout(F(x)) + shortcut(x)),
            F = 1x1 conv/BN/ReLU -> 3x3 conv/BN/ReLU -> 1x1 conv/BN(gamma=0)
            shortcut = identity, or 1x1 strided conv + BN when shapes change
    head    global average pool -> dense -> mu  (point)
                                          -> mu, log sigma^2  (gaussian)

Outputs are mapped to target units by an affine ``target_shift`` /
``target_scale`` stored with the parameters; ``log sigma^2`` is clamped to
[-10, 10] after that mapping.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

MIN_SIGNAL_LEN = 16
LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0

SCALES = {
    "paper": {"base_width": 64, "stem_channels": [32, 32, 64]},
    "desk": {"base_width": 8, "stem_channels": [4, 4, 8]},
}


@dataclass
class BackboneConfig:
    block_counts: list = field(default_factory=lambda: [3, 4, 6, 3])
    expansion: int = 4
    stem_channels: list = None
    base_width: int = None
    dropout_rate: float = 0.0
    head: str = "gaussian"
    scale: str = "desk"
    in_channels: int = 1

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {sorted(SCALES)}, got {self.scale!r}")
        if self.stem_channels is None:
            self.stem_channels = list(SCALES[self.scale]["stem_channels"])
        if self.base_width is None:
            self.base_width = SCALES[self.scale]["base_width"]
        self.block_counts = [int(b) for b in self.block_counts]
        self.stem_channels = [int(c) for c in self.stem_channels]
        if len(self.block_counts) != 4 or any(b < 1 for b in self.block_counts):
            raise ValueError("block_counts must be 4 positive integers")
        if len(self.stem_channels) != 3:
            raise ValueError("stem_channels must have 3 entries")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.head not in ("point", "gaussian"):
            raise ValueError("head must be 'point' or 'gaussian'")

    @property
    def n_outputs(self):
        return 2 if self.head == "gaussian" else 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    config: BackboneConfig
    params: dict  # name -> Tensor (trainable)
    buffers: dict  # name -> ndarray (batch-norm running statistics)
    target_shift: float = 0.0
    target_scale: float = 1.0

    def copy(self):
        return ModelParams(
            config=BackboneConfig.from_dict(self.config.to_dict()),
            params={k: ad.Tensor(v.data.copy(), requires_grad=True, name=k)
                    for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            target_shift=self.target_shift,
            target_scale=self.target_scale,
        )

    def n_parameters(self):
        return int(sum(v.data.size for v in self.params.values()))


def _stage_widths(config):
    return [config.base_width * m for m in (1, 2, 4, 8)]


def block_layout(config):
    """List of (name, c_in, width, c_out, stride) for every residual block."""
    layout = []
    c_in = config.stem_channels[-1]
    for s, (count, width) in enumerate(zip(config.block_counts, _stage_widths(config))):
        c_out = width * config.expansion
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            layout.append((f"stages.{s}.{b}", c_in, width, c_out, stride))
            c_in = c_out
    return layout


def build_model(config, seed):
    """Kaiming-normal convolutions, unit/zero batch norms except the last norm of
    every residual branch, whose gamma starts at exactly zero."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    def conv(name, c_in, c_out, k):
        std = np.sqrt(2.0 / (c_in * k))
        params[f"{name}.weight"] = rng.normal(0.0, std, size=(c_out, c_in, k))

    def norm(name, c, zero=False):
        params[f"{name}.gamma"] = np.zeros(c) if zero else np.ones(c)
        params[f"{name}.beta"] = np.zeros(c)
        buffers[f"{name}.running_mean"] = np.zeros(c)
        buffers[f"{name}.running_var"] = np.ones(c)

    c_prev = config.in_channels
    for i, (c, k) in enumerate(zip(config.stem_channels, (5, 3, 3))):
        conv(f"stem.{i}.conv", c_prev, c, k)
        norm(f"stem.{i}.bn", c)
        c_prev = c

    for name, c_in, width, c_out, stride in block_layout(config):
        conv(f"{name}.conv1", c_in, width, 1)
        norm(f"{name}.bn1", width)
        conv(f"{name}.conv2", width, width, 3)
        norm(f"{name}.bn2", width)
        conv(f"{name}.conv3", width, c_out, 1)
        norm(f"{name}.bn3", c_out, zero=True)
        if c_in != c_out or stride != 1:
            conv(f"{name}.proj", c_in, c_out, 1)
            norm(f"{name}.proj_bn", c_out)

    n_feat = _stage_widths(config)[-1] * config.expansion
    bound = 1.0 / np.sqrt(n_feat)
    params["head.weight"] = rng.uniform(-bound, bound, size=(config.n_outputs, n_feat))
    params["head.bias"] = np.zeros(config.n_outputs)

    return ModelParams(
        config=config,
        params={k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()},
        buffers=buffers,
    )


def dropout_sites(config):
    """Names of the stochastic sites: one per residual block."""
    return [f"{name}.dropout" for name, *_ in block_layout(config)]


class _Net:
    """Forward evaluation bound to one parameter set and mode."""

    def __init__(self, model, mode, rng):
        if mode not in ("train", "eval", "mc"):
            raise ValueError(f"mode must be train, eval or mc, got {mode!r}")
        self.p = model.params
        self.b = model.buffers
        self.mode = mode
        self.rng = rng

    def conv_bn(self, x, name, bn, stride=1, relu=True):
        w = self.p[f"{name}.weight"]
        x = ad.conv1d(x, w, stride=stride, padding=w.shape[2] // 2)
        x = ad.batchnorm1d(x, self.p[f"{bn}.gamma"], self.p[f"{bn}.beta"],
                           self.b[f"{bn}.running_mean"], self.b[f"{bn}.running_var"],
                           self.mode)
        return ad.relu(x) if relu else x


def residual_block(x, branch, shortcut, dropout_rate, mode, rng):
    """``ReLU(Dropout(branch(x)) + shortcut(x))`` with a single dropout site."""
    fx = branch(x)
    sx = shortcut(x)
    if fx.shape != sx.shape:
        raise ValueError(f"residual shape mismatch: branch {fx.shape} vs shortcut {sx.shape}")
    return ad.relu(ad.add(ad.dropout(fx, dropout_rate, mode, rng), sx))


def forward(model, signal, mode="eval", rng=None):
    """Run the backbone on ``signal`` of shape (L,), (N, L) or (N, C, L).

    Returns ``mu`` for a point head and ``(mu, log_var)`` for a gaussian head,
    each a Tensor of shape (N,).
    """
    x = np.asarray(signal.data if isinstance(signal, ad.Tensor) else signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, None, :]
    elif x.ndim == 2:
        x = x[:, None, :]
    if x.shape[-1] < MIN_SIGNAL_LEN:
        raise ValueError(f"signal length {x.shape[-1]} < {MIN_SIGNAL_LEN}")
    cfg = model.config
    if rng is None and mode in ("train", "mc") and cfg.dropout_rate > 0:
        raise ValueError("a random generator is required for stochastic modes")
    net = _Net(model, mode, rng)
    where = "input"
    try:
        h = ad.Tensor(x)
        for i in range(3):
            where = f"stem.{i}"
            h = net.conv_bn(h, f"stem.{i}.conv", f"stem.{i}.bn", stride=2 if i == 0 else 1)
        where = "stem.pool"
        h = ad.max_pool1d(h, 3, 2, 1)
        for name, c_in, width, c_out, stride in block_layout(cfg):
            where = name

            def branch(t, name=name, stride=stride):
                t = net.conv_bn(t, f"{name}.conv1", f"{name}.bn1")
                t = net.conv_bn(t, f"{name}.conv2", f"{name}.bn2", stride=stride)
                return net.conv_bn(t, f"{name}.conv3", f"{name}.bn3", relu=False)

            if f"{name}.proj.weight" in model.params:
                def shortcut(t, name=name, stride=stride):
                    return net.conv_bn(t, f"{name}.proj", f"{name}.proj_bn",
                                       stride=stride, relu=False)
            else:
                def shortcut(t):
                    return t
            h = residual_block(h, branch, shortcut, cfg.dropout_rate, mode, rng)
        where = "head"
        feats = ad.global_avg_pool(h)
        out = ad.dense(feats, model.params["head.weight"], model.params["head.bias"])
        mu = ad.scale_shift(ad.column(out, 0), model.target_scale, model.target_shift)
        if cfg.head == "point":
            return mu
        log_var = ad.scale_shift(ad.column(out, 1), 1.0, 2.0 * np.log(model.target_scale))
        return mu, ad.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    except ad.NonFiniteError as err:
        raise ad.NonFiniteError(err.op, where) from None


def predict_numpy(model, signals, mode="eval", rng=None):
    """Forward without recording; returns (mu, var) arrays (var is None for
    point heads)."""
    out = forward(model, signals, mode, rng)
    if model.config.head == "point":
        return out.data, None
    mu, log_var = out
    return mu.data, np.exp(log_var.data)


# ------------------------------------------------------------------ checkpoint


def save_model(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ad.save_params({**{k: v.data for k, v in model.params.items()},
                    **{f"buffer:{k}": v for k, v in model.buffers.items()}},
                   directory / "params.bin")
    meta = {"config": model.config.to_dict(), "target_shift": model.target_shift,
            "target_scale": model.target_scale}
    (directory / "config.json").write_text(json.dumps(meta, indent=2))


def load_model(directory):
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text())
    flat = ad.load_params(directory / "params.bin")
    params = {k: ad.Tensor(v, requires_grad=True, name=k)
              for k, v in flat.items() if not k.startswith("buffer:")}
    buffers = {k[len("buffer:"):]: v for k, v in flat.items() if k.startswith("buffer:")}
    return ModelParams(BackboneConfig.from_dict(meta["config"]), params, buffers,
                       meta["target_shift"], meta["target_scale"])
