"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the operations the 1-D residual backbone and its losses need are
provided. Arrays are float64 throughout; reductions accumulate in float64.

Usage::

    with Tape() as tape:
        loss = mean(square(sub(dense(x, w, b), y)))
    grads = backward(tape, loss)      # {param tensor: gradient array}

Operations evaluated outside an active tape are not recorded, which is the
inference path.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_ACTIVE: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or inf."""

    def __init__(self, op, where=""):
        self.op = op
        self.where = where
        msg = f"non-finite value produced by {op}"
        if where:
            msg += f" at {where}"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes = []

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, data, inputs, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad and _ACTIVE:
        _ACTIVE[-1].record(out, inputs, backward_fn)
    return out


def backward(tape, loss):
    """Reverse sweep over ``tape``; returns gradients for every leaf tensor
    with ``requires_grad`` that the loss depends on."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for out, inputs, fn in reversed(tape.nodes):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = fn(g)
        for t, gi in zip(inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves[key] = t
    if id(loss) in grads and id(loss) not in produced:
        leaves[id(loss)] = loss
    return {leaves[k]: g for k, g in grads.items() if k in leaves and k not in produced}


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def square(a):
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def relu(a):
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def scale_shift(a, scale, shift):
    """``a * scale + shift`` for python scalars."""
    return _emit("scale_shift", a.data * scale + shift, (a,), lambda g: (g * scale,))


def column(a, j):
    """Select column ``j`` of a (N, F) tensor."""
    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, j] = g
        return (full,)
    return _emit("column", a.data[:, j].copy(), (a,), bwd)


def sum(a):  # noqa: A001 - mirrors numpy naming
    return _emit("sum", np.sum(a.data, dtype=np.float64).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    return _emit("mean", np.mean(a.data, dtype=np.float64).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


# ------------------------------------------------------------- network layers


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x (N, C_in, L) with weight (C_out, C_in, K)."""
    xd, w = x.data, weight.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ValueError("conv1d expects input (N, C, L) and weight (C_out, C_in, K)")
    n, c_in, length = xd.shape
    c_out, c_w, k = w.shape
    if c_w != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {c_in}, weight expects {c_w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    padded = length + 2 * padding
    if k > padded:
        raise ValueError(f"kernel {k} does not fit padded length {padded}")
    l_out = (padded - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # N, C_in, L_out, K
    out = np.tensordot(cols, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    inputs = (x, weight)
    if bias is not None:
        out = out + bias.data[None, :, None]
        inputs = (x, weight, bias)

    def bwd(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, w, axes=([1], [0]))  # N, L_out, C_in, K
            gxp = np.zeros_like(xp)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + length] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, _csum(g)

    return _emit("conv1d", np.ascontiguousarray(out), inputs, bwd)


def _csum(a):
    """Per-channel sum over every axis but 1."""
    return np.einsum("ncl->c", a) if a.ndim == 3 else a.sum(axis=0)


def _cdot(a, b):
    return np.einsum("ncl,ncl->c", a, b) if a.ndim == 3 else np.einsum("nc,nc->c", a, b)


def batchnorm1d(x, gamma, beta, running_mean, running_var, mode,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch norm over (N, C) or (N, C, L) inputs.

    In ``train`` mode the batch statistics normalise the input and the running
    buffers (numpy arrays) are updated in place with an exponential moving
    average; the running variance uses the unbiased estimate. Any other mode
    uses the running buffers only.
    """
    xd = x.data
    bshape = (1, -1) if xd.ndim == 2 else (1, -1, 1)
    if mode == "train":
        if xd.shape[0] < 2:
            raise ValueError("batchnorm1d in train mode needs a batch of at least 2")
        m = xd.size // xd.shape[1]
        mu = _csum(xd) / m
        xc = xd - mu.reshape(bshape)
        var = _cdot(xc, xc) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(bshape)

        def bwd(g):
            gg = _cdot(g, xhat)
            gb = _csum(g)
            gam = gamma.data * inv / m
            gx = gam.reshape(bshape) * (m * g - gb.reshape(bshape) - xhat * gg.reshape(bshape))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv.reshape(bshape)

        def bwd(g):
            return (g * (gamma.data * inv).reshape(bshape), _cdot(g, xhat), _csum(g))

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _emit("batchnorm1d", out, (x, gamma, beta), bwd)


def dropout(x, rate, mode, rng):
    """Inverted dropout; active in ``train`` and ``mc`` modes, identity otherwise.

    ``rng`` needs a ``random(shape)`` method (numpy Generator or
    :class:`RowStreams`).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or mode not in ("train", "mc"):
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _emit("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def max_pool1d(x, kernel=3, stride=2, padding=1):
    xd = x.data
    n, c, length = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    l_out = out.shape[2]

    def bwd(g):
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for j in range(kernel):
            gxp[:, :, j:j + span:stride] += g * (arg == j)
        return (gxp[:, :, padding:padding + length],)

    return _emit("max_pool1d", out, (x,), bwd)


def global_avg_pool(x):
    """Mean over the length axis: (N, C, L) -> (N, C)."""
    length = x.shape[2]
    return _emit("global_avg_pool", x.data.mean(axis=2), (x,),
                 lambda g: (np.repeat(g[:, :, None] / length, length, axis=2),))


def dense(x, weight, bias=None):
    """x (N, F_in) @ weight.T (F_out, F_in) + bias."""
    out = x.data @ weight.data.T
    inputs = (x, weight)
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)

    def bwd(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _emit("dense", out, inputs, bwd)


class RowStreams:
    """Per-row random streams: row ``i`` of every draw comes from its own
    generator, so dropout masks do not depend on batch composition."""

    def __init__(self, generators):
        self.generators = list(generators)

    def random(self, shape):
        if shape[0] != len(self.generators):
            raise ValueError("leading dimension must match the number of streams")
        return np.stack([g.random(shape[1:]) for g in self.generators])


# ----------------------------------------------------------------- checkpoint


def save_params(params, path):
    """Write ``params`` (mapping name -> array or Tensor) as a flat binary of
    little-endian float64 plus a JSON manifest ``<path>.json``."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value,
                                   dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    path.write_bytes(b"".join(chunks))
    manifest = {"dtype": "<f8", "count": offset, "tensors": entries}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1))


def load_params(path):
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype=manifest["dtype"])
    if flat.size != manifest["count"]:
        raise ValueError(f"{path}: expected {manifest['count']} values, found {flat.size}")
    out = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return out
