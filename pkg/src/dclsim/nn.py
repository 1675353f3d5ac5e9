"""Dense/conv numerical engine: layers, cross-entropy, SGD, Fisher diagonals."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DivergenceError(FloatingPointError):
    pass


class UnknownTaskError(KeyError):
    pass


# --------------------------------------------------------------------------
# flat parameter vectors


@dataclass
class ParamVector:
    """Flat parameter array plus a name -> (offset, shape) layout."""

    data: np.ndarray
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        total = sum(int(np.prod(shape)) for _, shape in self.layout.values())
        if total != self.data.size:
            raise ValueError(f"layout covers {total} entries, vector has {self.data.size}")

    @classmethod
    def from_arrays(cls, arrays: dict, dtype=np.float32) -> "ParamVector":
        layout = {}
        offset = 0
        for name, arr in arrays.items():
            layout[name] = (offset, tuple(arr.shape))
            offset += arr.size
        data = np.empty(offset, dtype=dtype)
        for name, arr in arrays.items():
            off, shape = layout[name]
            data[off:off + arr.size] = np.asarray(arr).ravel()
        return cls(data, layout)

    def __len__(self):
        return self.data.size

    def names(self):
        return list(self.layout)

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.data[off:off + int(np.prod(shape))].reshape(shape)

    def arrays(self) -> dict:
        return {name: self.view(name) for name in self.layout}

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), dict(self.layout))

    def like(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(data, dtype=self.data.dtype), dict(self.layout))

    def to_bytes(self) -> bytes:
        payload = self.data.astype("<f4").tobytes()
        return struct.pack("<Q", self.data.size) + payload

    @classmethod
    def from_bytes(cls, buf: bytes, layout: dict | None = None) -> "ParamVector":
        (n,) = struct.unpack_from("<Q", buf, 0)
        if len(buf) != 8 + 4 * n:
            raise ValueError(f"expected {n} floats, buffer holds {(len(buf) - 8) // 4}")
        data = np.frombuffer(buf, dtype="<f4", offset=8, count=n).astype(np.float32)
        if layout is None:
            layout = {"flat": (0, (n,))}
        return cls(data, layout)


def gather(params: dict, names) -> ParamVector:
    return ParamVector.from_arrays({n: params[n] for n in names}, dtype=np.float64)


def scatter(params: dict, vec: ParamVector):
    """Copy vector contents back into the named arrays (in place)."""
    for name in vec.layout:
        params[name][...] = vec.view(name)


# --------------------------------------------------------------------------
# layers


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(dy, x, W):
    dW = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ W.T
    return dx, dW, db


def conv_output_shape(in_shape, c_out: int, k: int):
    _, h, w = in_shape
    ho, wo = h - k + 1, w - k + 1
    if ho < 2 or wo < 2:
        raise ValueError(f"input {in_shape} too small for a {k}x{k} conv + 2x2 pool")
    return (c_out, ho // 2, wo // 2)


def conv_lite_forward(x, W, b):
    """Valid convolution, ReLU, 2x2 max-pool. x: (N, C, H, W); W: (O, C, k, k)."""
    k = W.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N C Ho Wo k k
    z = np.einsum("nchwij,ocij->nohw", win, W, optimize=True) + b[None, :, None, None]
    a = np.maximum(z, 0)
    n, o, ho, wo = a.shape
    hp, wp = ho // 2, wo // 2
    blocks = a[:, :, :2 * hp, :2 * wp].reshape(n, o, hp, 2, wp, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, o, hp, wp, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x, z, arg)


def conv_lite_backward(dy, cache, W):
    x, z, arg = cache
    k = W.shape[-1]
    n, o, hp, wp = dy.shape
    dblocks = np.zeros((n, o, hp, wp, 4), dtype=dy.dtype)
    np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
    dblocks = dblocks.reshape(n, o, hp, wp, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, o, 2 * hp, 2 * wp)
    dz = np.zeros_like(z)
    dz[:, :, :2 * hp, :2 * wp] = dblocks
    dz *= z > 0
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    dW = np.einsum("nohw,nchwij->ocij", dz, win, optimize=True)
    db = dz.sum(axis=(0, 2, 3))
    dpad = np.pad(dz, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    dwin = sliding_window_view(dpad, (k, k), axis=(2, 3))
    dx = np.einsum("nohwij,ocij->nchw", dwin, W[:, :, ::-1, ::-1], optimize=True)
    return dx, dW, db


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(logits, y):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    logp = log_softmax(logits)
    n = len(y)
    loss = -logp[np.arange(n), y].sum() / n
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return float(loss), (d / n).astype(logits.dtype)


def per_sample_ce(logits, y):
    logp = log_softmax(logits)
    return -logp[np.arange(len(y)), y]


# --------------------------------------------------------------------------
# monolithic network


@dataclass
class LayerSpec:
    kind: str  # "dense" | "conv"
    in_shape: tuple
    out_shape: tuple
    k: int = 0

    @property
    def weight_shape(self):
        if self.kind == "dense":
            return (self.in_shape[0], self.out_shape[0])
        return (self.out_shape[0], self.in_shape[0], self.k, self.k)

    @property
    def n_params(self):
        if self.kind == "dense":
            return self.in_shape[0] * self.out_shape[0] + self.out_shape[0]
        return self.in_shape[0] * self.out_shape[0] * self.k ** 2 + self.out_shape[0]

    def fans(self):
        if self.kind == "dense":
            return self.in_shape[0], self.out_shape[0]
        rf = self.k * self.k
        return self.in_shape[0] * rf, self.out_shape[0] * rf


def layer_forward(spec: LayerSpec, x, W, b):
    if spec.kind == "dense":
        z = dense_forward(x, W, b)
        return np.maximum(z, 0), z
    return conv_lite_forward(x, W, b)


def layer_backward(spec: LayerSpec, dy, x, cache, W):
    if spec.kind == "dense":
        dz = dy * (cache > 0)
        return dense_backward(dz, x, W)
    return conv_lite_backward(dy, cache, W)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_layer(spec: LayerSpec, rng, dtype, scheme: str = "xavier"):
    """Xavier- or He-uniform weights, zero bias."""
    fi, fo = spec.fans()
    if scheme == "he":
        W = he_uniform(rng, spec.weight_shape, fi, dtype)
    else:
        W = xavier_uniform(rng, spec.weight_shape, fi, fo, dtype)
    b = np.zeros(spec.out_shape[0], dtype=dtype)
    return W, b


class MonolithicNet:
    """Feed-forward trunk (dense or conv-lite layers, ReLU) with one linear head per task.

    ``features`` are the flattened outputs of the last trunk layer (the input
    itself when the trunk is empty).
    """

    def __init__(self, in_shape, width: int, depth: int, rng=None, kind: str = "dense",
                 kernel: int = 3, dtype=np.float32):
        self.in_shape = tuple(in_shape) if np.ndim(in_shape) else (int(in_shape),)
        self.width = width
        self.depth = depth
        self.kind = kind
        self.dtype = np.dtype(dtype)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: list[LayerSpec] = []
        shape = self.in_shape
        for _ in range(depth):
            if kind == "dense":
                spec = LayerSpec("dense", shape, (width,))
            else:
                spec = LayerSpec("conv", shape, conv_output_shape(shape, width, kernel), kernel)
            self.layers.append(spec)
            shape = spec.out_shape
        self.feature_dim = int(np.prod(shape))
        self.params: dict[str, np.ndarray] = {}
        for i, spec in enumerate(self.layers):
            W, b = init_layer(spec, self.rng, self.dtype)
            self.params[f"trunk.{i}.W"] = W
            self.params[f"trunk.{i}.b"] = b
        self.head_sizes: dict = {}

    # -- structure
    def trunk_names(self):
        return [f"trunk.{i}.{p}" for i in range(len(self.layers)) for p in ("W", "b")]

    def head_names(self, task):
        return [f"head.{task}.W", f"head.{task}.b"]

    def shared_names(self):
        """Parameters exchanged by federated aggregation (heads excluded)."""
        return self.trunk_names()

    def add_head(self, task, n_classes: int, rng=None):
        rng = rng if rng is not None else self.rng
        self.head_sizes[task] = n_classes
        self.params[f"head.{task}.W"] = xavier_uniform(
            rng, (self.feature_dim, n_classes), self.feature_dim, n_classes, self.dtype)
        self.params[f"head.{task}.b"] = np.zeros(n_classes, dtype=self.dtype)

    def has_task(self, task):
        return task in self.head_sizes

    def n_params(self, names=None):
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    # -- compute
    def _check(self, x, task):
        if task not in self.head_sizes:
            raise UnknownTaskError(task)
        if tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match net input {self.in_shape}")

    def _forward(self, x, task):
        self._check(x, task)
        x = np.asarray(x, dtype=self.dtype)
        acts, caches = [x], []
        h = x
        for i, spec in enumerate(self.layers):
            h, cache = layer_forward(spec, h, self.params[f"trunk.{i}.W"], self.params[f"trunk.{i}.b"])
            acts.append(h)
            caches.append(cache)
        feats = h.reshape(len(h), -1)
        logits = dense_forward(feats, self.params[f"head.{task}.W"], self.params[f"head.{task}.b"])
        return logits, feats, (acts, caches)

    def forward(self, x, task):
        logits, feats, _ = self._forward(x, task)
        return logits, feats

    def features(self, x, task=None):
        h = np.asarray(x, dtype=self.dtype)
        for i, spec in enumerate(self.layers):
            h, _ = layer_forward(spec, h, self.params[f"trunk.{i}.W"], self.params[f"trunk.{i}.b"])
        return h.reshape(len(h), -1)

    def loss_and_grads(self, x, y, task, names=None):
        logits, feats, (acts, caches) = self._forward(x, task)
        loss, dlogits = cross_entropy(logits, y)
        grads = self._backward(dlogits, task, feats, acts, caches)
        if names is not None:
            grads = {n: grads[n] for n in names}
        return loss, grads

    def _backward(self, dlogits, task, feats, acts, caches):
        grads = {}
        Wh = self.params[f"head.{task}.W"]
        dfeat, grads[f"head.{task}.W"], grads[f"head.{task}.b"] = dense_backward(dlogits, feats, Wh)
        dh = dfeat.reshape(acts[-1].shape)
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            W = self.params[f"trunk.{i}.W"]
            dh, grads[f"trunk.{i}.W"], grads[f"trunk.{i}.b"] = layer_backward(spec, dh, acts[i], caches[i], W)
        return grads

    def trainable_names(self, task, phase="train"):
        return self.trunk_names() + self.head_names(task)


def forward(net, x, task):
    """(logits, penultimate features) for a batch on ``task``."""
    return net.forward(x, task)


# --------------------------------------------------------------------------
# penalties and SGD


class PenaltyTerm:
    """Extra loss on a subset of parameters: ``fn(flat) -> (value, grad)`` over ``names``."""

    def __init__(self, names, fn: Callable):
        self.names = list(names)
        self.fn = fn

    def __call__(self, params: dict):
        vec = gather(params, self.names)
        value, grad = self.fn(vec.data)
        return float(value), vec.like(grad)


def apply_penalty(params, grads, penalty: PenaltyTerm | None):
    if penalty is None:
        return 0.0
    value, gvec = penalty(params)
    for name in gvec.layout:
        g = gvec.view(name)
        if name in grads:
            grads[name] = grads[name] + g.astype(grads[name].dtype)
        else:
            grads[name] = g.astype(params[name].dtype)
    return value


def backward_sgd_step(net, x, y, task, lr: float, extra_loss: PenaltyTerm | None = None,
                      names=None, **fwd_kw) -> float:
    """One SGD step on cross-entropy (+ optional penalty). Returns the pre-step loss."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    names = net.trainable_names(task) if names is None else names
    loss, grads = net.loss_and_grads(x, y, task, **fwd_kw)
    loss += apply_penalty(net.params, grads, extra_loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} on task {task}")
    if lr == 0:
        return loss
    for n in names:
        g = grads.get(n)
        if g is not None:
            p = net.params[n]
            p -= (lr * g).astype(p.dtype)
    return loss


# --------------------------------------------------------------------------
# Fisher diagonals


@dataclass
class FisherDiag:
    values: ParamVector  # float64 entries aligned with the named parameter subset
    normalized: bool = False
    temperatures: dict = field(default_factory=dict)
    layer_max: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    @property
    def data(self):
        return self.values.data


def estimate_fisher_diag(net, x, y, task, names=None, **fwd_kw) -> FisherDiag:
    """Empirical Fisher diagonal: mean over samples of squared per-sample log-likelihood gradients."""
    if len(x) == 0:
        raise ValueError("Fisher estimation needs at least one sample")
    names = net.shared_names() if names is None else list(names)
    acc = {n: np.zeros(net.params[n].shape, dtype=np.float64) for n in names}
    for i in range(len(x)):
        _, grads = net.loss_and_grads(x[i:i + 1], y[i:i + 1], task, **fwd_kw)
        for n in names:
            g = grads.get(n)
            if g is not None:
                acc[n] += np.square(g.astype(np.float64))
    for n in names:
        acc[n] /= len(x)
    return FisherDiag(ParamVector.from_arrays(acc, dtype=np.float64))


def normalize_fisher(fd: FisherDiag, temperature: float | None = None) -> FisherDiag:
    """Per-layer softmax with temperature (default: the layer mean, floored at 1e-8),
    rescaled by the layer max so entries lie in [0, 1] with the max at exactly 1."""
    out = {}
    temps, maxes = {}, {}
    for name in fd.values.layout:
        v = fd.values.view(name).astype(np.float64)
        t = float(v.mean()) if temperature is None else float(temperature)
        t = max(t, 1e-8)
        vmax = float(v.max()) if v.size else 0.0
        # softmax(v/t) / max(softmax(v/t)) == exp((v - vmax)/t)
        out[name] = np.exp((v - vmax) / t)
        temps[name] = t
        maxes[name] = vmax
    return FisherDiag(ParamVector.from_arrays(out, dtype=np.float64), True, temps, maxes)
