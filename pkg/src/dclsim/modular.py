"""Compositional modular networks with soft module selection and component dropout."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import (
    UnknownTaskError,
    backward_sgd_step,
    conv_output_shape,
    cross_entropy,
    dense_backward,
    dense_forward,
    init_layer,
    layer_backward,
    layer_forward,
    LayerSpec,
    xavier_uniform,
)

NEW_MODULE_LOGIT = -10.0
N_BASIS = 4
# averaging several random ReLU modules per depth shrinks activations; He scaling offsets it
INIT = "he"


class ModuleId(NamedTuple):
    origin: int
    birth_task: int
    serial: int


@dataclass
class Module:
    id: ModuleId
    kind: str
    W: np.ndarray
    b: np.ndarray
    via_dropout: bool = False
    parent: ModuleId | None = None

    @property
    def n_params(self):
        return int(self.W.size + self.b.size)

    def copy(self):
        return Module(self.id, self.kind, self.W.copy(), self.b.copy(), self.via_dropout, self.parent)


@dataclass
class Payload:
    """A unit of exchanged knowledge with its float cost."""

    kind: str  # "instances" | "params" | "module"
    body: object
    floats: int
    meta: dict = field(default_factory=dict)


_HEADER = struct.Struct("<HHIBBB")  # origin, birth task, serial, kind, via_dropout, ndim


def serialize_module(m: Module) -> Payload:
    kind_code = 0 if m.kind == "dense" else 1
    head = _HEADER.pack(m.id.origin, m.id.birth_task, m.id.serial, kind_code, int(m.via_dropout), m.W.ndim)
    dims = struct.pack(f"<{m.W.ndim}I", *m.W.shape)
    block = np.concatenate([m.W.ravel(), m.b.ravel()]).astype("<f4").tobytes()
    return Payload("module", head + dims + block, m.n_params)


def deserialize_module(p: Payload, expect_shape=None) -> Module:
    if p.kind != "module":
        raise ValueError(f"payload kind {p.kind!r} is not a module")
    buf = p.body
    origin, birth, serial, kind_code, via, ndim = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    if expect_shape is not None and tuple(expect_shape) != tuple(shape):
        raise ValueError(f"module shape {shape} incompatible with depth family {tuple(expect_shape)}")
    n_w = int(np.prod(shape))
    n_b = shape[0] if kind_code == 1 else shape[1]
    data = np.frombuffer(buf, dtype="<f4", offset=off)
    if data.size != n_w + n_b:
        raise ValueError("truncated module payload")
    W = data[:n_w].reshape(shape).astype(np.float32)
    b = data[n_w:].astype(np.float32)
    return Module(ModuleId(origin, birth, serial), "dense" if kind_code == 0 else "conv", W, b, bool(via))


class ModularNet:
    """Frozen input encoder, a library of modules mixed at every depth by per-task
    structure weights (softmax over modules), and one linear head per task.

    The encoder and the basis modules are drawn from ``basis_rng`` so agents built
    from the same collective seed start from identical basis modules.
    """

    def __init__(self, in_shape, width: int, depth: int = 4, n_basis: int = N_BASIS, owner: int = 0,
                 rng=None, basis_rng=None, kind: str = "dense", kernel: int = 3, dtype=np.float32):
        self.in_shape = tuple(in_shape) if np.ndim(in_shape) else (int(in_shape),)
        self.width = width
        self.depth = depth
        self.kind = kind
        self.owner = owner
        self.dtype = np.dtype(dtype)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        basis_rng = basis_rng if basis_rng is not None else self.rng
        if kind == "dense":
            self.enc_spec = LayerSpec("dense", self.in_shape, (width,))
            self.mod_specs = [LayerSpec("dense", (width,), (width,)) for _ in range(depth)]
        else:
            self.enc_spec = LayerSpec("conv", self.in_shape, conv_output_shape(self.in_shape, width, kernel), kernel)
            self.mod_specs = []
            shape = self.enc_spec.out_shape
            for _ in range(depth):
                spec = LayerSpec("conv", shape, conv_output_shape(shape, width, kernel), kernel)
                self.mod_specs.append(spec)
                shape = spec.out_shape
        last = self.mod_specs[-1].out_shape if depth else self.enc_spec.out_shape
        self.feature_dim = int(np.prod(last))
        self.enc_W, self.enc_b = init_layer(self.enc_spec, basis_rng, self.dtype, INIT)
        self.library: list[Module] = []
        self._serial = 0
        for _ in range(n_basis):
            W, b = init_layer(self.mod_specs[0], basis_rng, self.dtype, INIT)
            self.library.append(Module(self.next_id(0), kind, W, b))
        self.n_basis = n_basis
        self.structure: dict = {}
        self.heads: dict = {}
        self.added_by_task: dict = {}
        self._candidate: Module | None = None

    # -- bookkeeping
    def next_id(self, birth_task: int) -> ModuleId:
        mid = ModuleId(self.owner, birth_task, self._serial)
        self._serial += 1
        return mid

    @property
    def module_shape(self):
        return self.mod_specs[0].weight_shape

    def fresh_module(self, birth_task: int, rng=None) -> Module:
        rng = rng if rng is not None else self.rng
        W, b = init_layer(self.mod_specs[0], rng, self.dtype, INIT)
        return Module(self.next_id(birth_task), self.kind, W, b)

    def has_task(self, task):
        return task in self.heads

    def new_head(self, n_classes, rng=None):
        rng = rng if rng is not None else self.rng
        W = xavier_uniform(rng, (self.feature_dim, n_classes), self.feature_dim, n_classes, self.dtype)
        return {"W": W, "b": np.zeros(n_classes, dtype=self.dtype)}

    def add_task(self, task, n_classes, rng=None):
        self.heads[task] = self.new_head(n_classes, rng)
        self.structure[task] = np.zeros((self.depth, len(self.library)), dtype=self.dtype)

    def add_module(self, m: Module, task=None):
        """Append to the library; existing tasks get a near-zero-mass structure column."""
        self.library.append(m)
        for t, s in self.structure.items():
            if t == task:
                continue
            pad = np.full((self.depth, len(self.library) - s.shape[1]), NEW_MODULE_LOGIT, dtype=self.dtype)
            self.structure[t] = np.concatenate([s, pad], axis=1)
        if task is not None:
            self.added_by_task[task] = m

    # -- parameter naming
    @property
    def params(self) -> dict:
        p = {"enc.W": self.enc_W, "enc.b": self.enc_b}
        for i, m in enumerate(self.library):
            p[f"mod.{i}.W"] = m.W
            p[f"mod.{i}.b"] = m.b
        for t, s in self.structure.items():
            p[f"struct.{t}"] = s
        for t, h in self.heads.items():
            p[f"head.{t}.W"] = h["W"]
            p[f"head.{t}.b"] = h["b"]
        return p

    def module_names(self, idx):
        return [f"mod.{i}.{p}" for i in idx for p in ("W", "b")]

    def shared_names(self):
        """Federated aggregation covers only the basis modules."""
        return self.module_names(range(self.n_basis))

    def trainable_names(self, task, phase="adapt"):
        names = [f"struct.{task}", f"head.{task}.W", f"head.{task}.b"]
        if phase == "adapt":
            names = self.module_names(range(len(self.library))) + names
        return names

    def n_params(self, names=None):
        p = self.params
        names = p if names is None else names
        return int(sum(p[n].size for n in names))

    # -- compute
    def _forward(self, x, task, drop_last=False):
        if task not in self.structure or task not in self.heads:
            raise UnknownTaskError(task)
        if tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match net input {self.in_shape}")
        x = np.asarray(x, dtype=self.dtype)
        s_full = self.structure[task]
        n = min(s_full.shape[1], len(self.library)) - (1 if drop_last else 0)
        s = s_full[:, :n].astype(np.float64)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        h, enc_cache = layer_forward(self.enc_spec, x, self.enc_W, self.enc_b)
        mods = self.library[:n]
        cache = []
        for d in range(self.depth):
            wd = w[d].astype(self.dtype)
            if self.kind == "dense":
                Ws = np.stack([m.W for m in mods])
                bs = np.stack([m.b for m in mods])
                z = np.matmul(h[None], Ws) + bs[:, None, :]
                out = np.maximum(z, 0)
                h_new = np.tensordot(wd, out, axes=1)
                cache.append((h, z, out, Ws))
            else:
                outs, zs = [], []
                for m in mods:
                    o, c = layer_forward(self.mod_specs[d], h, m.W, m.b)
                    outs.append(o)
                    zs.append(c)
                out = np.stack(outs)
                h_new = np.tensordot(wd, out, axes=1)
                cache.append((h, zs, out, None))
            h = h_new
        feats = h.reshape(len(h), -1)
        head = self.heads[task]
        logits = dense_forward(feats, head["W"], head["b"])
        return logits, feats, (w, n, cache)

    def forward(self, x, task, drop_last=False):
        logits, feats, _ = self._forward(x, task, drop_last)
        return logits, feats

    def features(self, x, task):
        return self._forward(x, task)[1]

    def loss_and_grads(self, x, y, task, drop_last=False, names=None):
        logits, feats, (w, n, cache) = self._forward(x, task, drop_last)
        loss, dlogits = cross_entropy(logits, y)
        head = self.heads[task]
        grads = {}
        dfeat, grads[f"head.{task}.W"], grads[f"head.{task}.b"] = dense_backward(dlogits, feats, head["W"])
        dh = dfeat.reshape(cache[-1][2].shape[1:]) if self.depth else dfeat
        mods = self.library[:n]
        dW = [np.zeros_like(m.W) for m in mods]
        db = [np.zeros_like(m.b) for m in mods]
        ds = np.zeros((self.depth, n), dtype=np.float64)
        for d in range(self.depth - 1, -1, -1):
            h_in, z, out, Ws = cache[d]
            axes = tuple(range(1, out.ndim))
            dwm = (out * dh[None]).sum(axis=axes).astype(np.float64)
            ds[d] = w[d] * (dwm - np.dot(w[d], dwm))
            dout = w[d].astype(self.dtype)[:, None] * dh[None].reshape(1, -1)
            dout = dout.reshape(out.shape)
            if self.kind == "dense":
                dz = dout * (z > 0)
                gW = np.matmul(h_in.T[None], dz)
                for i in range(n):
                    dW[i] += gW[i]
                    db[i] += dz[i].sum(axis=0)
                dh = np.matmul(dz, Ws.transpose(0, 2, 1)).sum(axis=0)
            else:
                dh_acc = None
                for i, m in enumerate(mods):
                    dxi, gWi, gbi = layer_backward(self.mod_specs[d], dout[i], h_in, z[i], m.W)
                    dW[i] += gWi
                    db[i] += gbi
                    dh_acc = dxi if dh_acc is None else dh_acc + dxi
                dh = dh_acc
        for i in range(n):
            grads[f"mod.{i}.W"] = dW[i]
            grads[f"mod.{i}.b"] = db[i]
        s_grad = np.zeros_like(self.structure[task])
        s_grad[:, :n] = ds
        grads[f"struct.{task}"] = s_grad
        if names is not None:
            grads = {k: grads[k] for k in names if k in grads}
        return loss, grads

    def accuracy(self, x, y, task, drop_last=False):
        if len(x) == 0:
            return 0.0
        logits, _ = self.forward(x, task, drop_last)
        return float(np.mean(logits.argmax(axis=1) == y))


def modular_forward(net: ModularNet, x, task):
    return net.forward(x, task)


# --------------------------------------------------------------------------
# component dropout


@dataclass
class _CandidateState:
    module: Module
    structure: np.ndarray
    head: dict


class ComponentDropout:
    """Round-robin training of candidate new modules for one task.

    Each minibatch goes to one candidate: a pass with the candidate active
    (candidate, structure and head train) followed by a pass with its path
    zeroed (structure and head train). Library modules stay frozen.
    """

    def __init__(self, net: ModularNet, task, n_classes: int, candidates: list[Module], lr: float,
                 rng=None, keep_threshold: float = 0.5, candidate_logit: float = 0.0):
        if not candidates:
            raise ValueError("component dropout needs at least one candidate")
        self.net = net
        self.task = task
        self.n_classes = n_classes
        self.lr = lr
        self.keep_threshold = keep_threshold
        rng = rng if rng is not None else net.rng
        head = net.new_head(n_classes, rng)
        L = len(net.library)
        s0 = np.zeros((net.depth, L + 1), dtype=net.dtype)
        s0[:, -1] = candidate_logit
        self.states = [
            _CandidateState(m.copy(), s0.copy(), {"W": head["W"].copy(), "b": head["b"].copy()})
            for m in candidates
        ]
        self._turn = 0

    def _install(self, st: _CandidateState):
        self._saved = (self.net.structure.get(self.task), self.net.heads.get(self.task))
        self.net.library.append(st.module)
        self.net.structure[self.task] = st.structure
        self.net.heads[self.task] = st.head

    def _uninstall(self):
        self.net.library.pop()
        s, h = self._saved
        for store, old in ((self.net.structure, s), (self.net.heads, h)):
            if old is None:
                store.pop(self.task, None)
            else:
                store[self.task] = old

    def step(self, x, y) -> float:
        st = self.states[self._turn]
        self._turn = (self._turn + 1) % len(self.states)
        L = len(self.net.library)
        self._install(st)
        try:
            names = self.net.module_names([L]) + self.net.trainable_names(self.task, phase="assimilate")
            loss = backward_sgd_step(self.net, x, y, self.task, self.lr, names=names)
            names = self.net.trainable_names(self.task, phase="assimilate")
            backward_sgd_step(self.net, x, y, self.task, self.lr, names=names, drop_last=True)
        finally:
            self._uninstall()
        return loss

    def scores(self, x_val, y_val):
        out = []
        for st in self.states:
            self._install(st)
            try:
                with_acc = self.net.accuracy(x_val, y_val, self.task)
                without_acc = self.net.accuracy(x_val, y_val, self.task, drop_last=True)
            finally:
                self._uninstall()
            out.append((with_acc, without_acc))
        return out

    def narrow(self, x_val, y_val):
        """End the probe: keep only the candidate with the best validation accuracy."""
        scores = self.scores(x_val, y_val)
        best = max(range(len(scores)), key=lambda i: (scores[i][0], -i))
        self.probe_winner = self.states[best].module.id
        self.states = [self.states[best]]
        self._turn = 0
        return self.probe_winner

    def finalize(self, x_val, y_val):
        """Install the outcome in the net. Returns (keep, chosen module id or None)."""
        scores = self.scores(x_val, y_val)
        best = max(range(len(scores)), key=lambda i: (scores[i][0], -i))
        with_acc, without_acc = scores[best]
        degenerate = self.n_classes < 2 or len(np.unique(y_val)) < 2
        keep = (not degenerate) and (with_acc - without_acc) * 100.0 >= self.keep_threshold
        st = self.states[best]
        self.net.heads[self.task] = st.head
        chosen = st.module.id
        if keep:
            m = st.module
            if m.id.origin != self.net.owner or m.id.birth_task != self.task:
                m = Module(self.net.next_id(self.task), m.kind, m.W, m.b, True, parent=m.id)
            m.via_dropout = True
            self.net.structure[self.task] = st.structure
            self.net.add_module(m, task=self.task)
        else:
            self.net.structure[self.task] = st.structure[:, :-1].copy()
        self.result = (keep, chosen if keep else None)
        self.val_scores = scores
        return self.result


def component_dropout_train(net: ModularNet, task, x, y, x_val, y_val, n_classes: int, candidates,
                            epochs: int, lr: float = 0.1, batch_size: int = 16, rng=None,
                            keep_threshold: float = 0.5, append_fresh: bool = True, probe_epochs: int | None = None):
    """Run component dropout for ``epochs`` passes over (x, y); returns (keep, chosen id).

    With ``probe_epochs`` the candidates share steps only for that long; training
    then continues on the best one.
    """
    rng = rng if rng is not None else net.rng
    candidates = list(candidates)
    if append_fresh:
        candidates.append(net.fresh_module(task, rng))
    cd = ComponentDropout(net, task, n_classes, candidates, lr, rng, keep_threshold)
    if n_classes >= 2:
        for e in range(epochs):
            if probe_epochs is not None and e == probe_epochs and len(cd.states) > 1:
                cd.narrow(x_val, y_val)
            order = rng.permutation(len(x))
            for i in range(0, len(x), batch_size):
                idx = order[i:i + batch_size]
                cd.step(x[idx], y[idx])
    return cd.finalize(x_val, y_val)
