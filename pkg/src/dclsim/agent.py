"""Per-agent learner state: net, replay, task progression and the local epoch loop."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .modular import ComponentDropout, ModularNet
from .nn import MonolithicNet, backward_sgd_step, estimate_fisher_diag, per_sample_ce, FisherDiag, ParamVector
from .tasks import ReplayBuffer, TaskSpec


@dataclass
class TrainConfig:
    epochs_per_task: int = 20
    lr: float = 0.1
    batch_size: int = 16
    replay_capacity: int = 64
    replay_batch: int = 32
    cd_epochs: int = 10
    probe_epochs: int = 2  # round-robin epochs before component dropout narrows to one candidate
    keep_threshold: float = 0.5
    candidate_logit: float = 3.0  # initial structure logit of the candidate path during component dropout


@dataclass
class NetConfig:
    kind: str = "modular"  # "modular" | "monolithic"
    width: int = 32
    depth: int = 2
    layer: str = "dense"  # "dense" | "conv"
    n_basis: int = 4


def agent_rng(seed: int, agent_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, agent_id, stream])


def build_net(net_cfg: NetConfig, in_shape, seed: int, agent_id: int):
    rng = agent_rng(seed, agent_id, 1)
    if net_cfg.kind == "monolithic":
        return MonolithicNet(in_shape, net_cfg.width, net_cfg.depth, rng=rng, kind=net_cfg.layer)
    if net_cfg.kind == "modular":
        basis_rng = np.random.default_rng([seed, 999_983])
        return ModularNet(in_shape, net_cfg.width, net_cfg.depth, net_cfg.n_basis, owner=agent_id,
                          rng=rng, basis_rng=basis_rng, kind=net_cfg.layer)
    raise ValueError(f"unknown net kind {net_cfg.kind!r}")


@dataclass
class AgentState:
    id: int
    net: object
    stream: list  # list[TaskSpec]
    train: TrainConfig
    seed: int
    t: int = -1
    replay: ReplayBuffer = None
    rng: np.random.Generator = None
    share_rng: np.random.Generator = None
    pool_x: np.ndarray = None
    pool_y: np.ndarray = None
    penalty: object = None
    fisher: FisherDiag | None = None
    fisher_norm: FisherDiag | None = None
    cd: ComponentDropout | None = None
    epoch_in_task: int = 0
    modules_kept: list = field(default_factory=list)
    received_instances: int = 0

    def __post_init__(self):
        if self.rng is None:
            self.rng = agent_rng(self.seed, self.id, 2)
        if self.share_rng is None:
            self.share_rng = agent_rng(self.seed, self.id, 3)
        if self.replay is None:
            self.replay = ReplayBuffer(self.train.replay_capacity, agent_rng(self.seed, self.id, 4))

    @property
    def modular(self):
        return isinstance(self.net, ModularNet)

    @property
    def task(self) -> TaskSpec:
        return self.stream[self.t]

    def seen(self):
        return self.stream[: self.t + 1]

    # -- task lifecycle
    def begin_task(self, t: int, candidates=None):
        """Start task ``t``; for modular nets ``candidates`` (received modules) join a fresh
        module in component dropout."""
        self.t = t
        task = self.task
        self.epoch_in_task = 0
        self.pool_x = task.x_train
        self.pool_y = task.y_train
        self.replay.insert(t, task.x_train, task.y_train, task.labels[task.y_train], "local")
        if self.modular:
            cands = list(candidates or []) + [self.net.fresh_module(t, self.rng)]
            self.cd = ComponentDropout(self.net, t, task.n_classes, cands, self.train.lr, self.rng,
                                       self.train.keep_threshold, self.train.candidate_logit)
            if self.train.cd_epochs <= 0:
                self._finish_cd()
        else:
            self.net.add_head(t, task.n_classes, self.rng)

    def _finish_cd(self):
        task = self.task
        keep, chosen = self.cd.finalize(task.x_val, task.y_val)
        self.modules_kept.append((self.t, keep, chosen))
        self.cd = None
        if keep:
            self._tune_past_structures()

    def _tune_past_structures(self):
        for tau in self.replay.tasks():
            if tau >= self.t:
                continue
            x, y, *_ = self.replay.arrays(tau)
            order = self.rng.permutation(len(x))
            for i in range(0, len(x), self.train.batch_size):
                idx = order[i:i + self.train.batch_size]
                backward_sgd_step(self.net, x[idx], y[idx], tau, self.train.lr, names=[f"struct.{tau}"])

    def end_task(self):
        if self.cd is not None:
            self._finish_cd()

    # -- training
    def _shared_names(self, tau):
        if self.modular:
            return self.net.trainable_names(tau, phase="adapt")
        return self.net.trainable_names(tau)

    def train_epoch(self):
        tr = self.train
        self.epoch_in_task += 1
        in_cd = self.cd is not None
        order = self.rng.permutation(len(self.pool_x))
        past = [tau for tau in self.replay.tasks() if tau < self.t]
        for i in range(0, len(order), tr.batch_size):
            idx = order[i:i + tr.batch_size]
            xb, yb = self.pool_x[idx], self.pool_y[idx]
            if in_cd:
                self.cd.step(xb, yb)
                continue
            backward_sgd_step(self.net, xb, yb, self.t, tr.lr, self.penalty, names=self._shared_names(self.t))
            if past:
                tau = past[int(self.rng.integers(len(past)))]
                rx, ry, *_ = self.replay.sample(tr.replay_batch, tau, self.rng)
                backward_sgd_step(self.net, rx, ry, tau, tr.lr, self.penalty, names=self._shared_names(tau))
        if in_cd and self.epoch_in_task >= tr.cd_epochs:
            self._finish_cd()
        elif in_cd and self.epoch_in_task == tr.probe_epochs and len(self.cd.states) > 1:
            self.cd.narrow(self.task.x_val, self.task.y_val)

    # -- inference helpers
    @contextmanager
    def _current_view(self):
        """During component dropout, expose the first candidate as the current-task model."""
        if self.cd is None:
            yield
            return
        st = self.cd.states[0]
        self.cd._install(st)
        try:
            yield
        finally:
            self.cd._uninstall()

    def logits(self, x, tau):
        with self._current_view():
            return self.net.forward(x, tau)[0]

    def features(self, x):
        """Penultimate features used for similarity search (latest completed task for modular nets)."""
        if not self.modular:
            return self.net.features(x)
        tau = max((t for t in self.net.structure), default=None)
        if tau is None:
            with self._current_view():
                return self.net.features(x, self.t)
        return self.net.features(x, tau)

    def test_accuracy(self, tau):
        task = self.stream[tau]
        logits = self.logits(task.x_test, tau)
        return float(np.mean(logits.argmax(axis=1) == task.y_test))

    def test_loss(self, tau):
        task = self.stream[tau]
        return float(per_sample_ce(self.logits(task.x_test, tau), task.y_test).mean())

    def evaluate_seen(self):
        return evaluate_seen_tasks([self.test_accuracy(tau) for tau in range(self.t + 1)])

    def validation_losses(self):
        """Per-instance CE over the validation sets of all seen tasks, in task order."""
        xs, ys, gs, taus, losses = [], [], [], [], []
        for tau, task in enumerate(self.seen()):
            if len(task.x_val) == 0:
                continue
            losses.append(per_sample_ce(self.logits(task.x_val, tau), task.y_val))
            xs.append(task.x_val); ys.append(task.y_val); gs.append(task.labels[task.y_val])
            taus.append(np.full(len(task.x_val), tau))
        if not xs:
            return None
        cat = np.concatenate
        return cat(xs), cat(ys), cat(gs), cat(taus), cat(losses)

    # -- knowledge intake
    def receive_instances(self, x, g, tau=None):
        """Route received (x, global label) pairs to a seen task whose label set contains them."""
        if len(x) == 0:
            return 0
        g = np.asarray(g)
        placed = 0
        targets = [tau] if tau is not None else list(range(self.t, -1, -1))
        remaining = np.ones(len(x), dtype=bool)
        for tt in targets:
            local = self.stream[tt].to_local(g)
            ok = remaining & (local >= 0)
            if not ok.any():
                continue
            xi, yi = x[ok], local[ok]
            self.replay.insert(tt, xi, yi, g[ok], "received")
            if tt == self.t:
                self.pool_x = np.concatenate([self.pool_x, xi.astype(self.pool_x.dtype)])
                self.pool_y = np.concatenate([self.pool_y, yi])
            remaining &= ~ok
            placed += int(ok.sum())
        self.received_instances += placed
        return placed

    def compute_fisher(self):
        """Fisher diagonal of the shared parameters over replay plus the current validation set."""
        names = self.net.shared_names()
        total, acc = 0, None
        for tau in range(self.t + 1):
            parts = []
            data = self.replay.arrays(tau)
            if data is not None:
                parts.append((data[0], data[1]))
            if tau == self.t and len(self.task.x_val):
                parts.append((self.task.x_val, self.task.y_val))
            for x, y in parts:
                fd = estimate_fisher_diag(self.net, x, y, tau, names)
                acc = fd.values.data * len(x) if acc is None else acc + fd.values.data * len(x)
                total += len(x)
                layout = fd.values.layout
        if acc is None:
            return None
        return FisherDiag(ParamVector(acc / total, layout))


def evaluate_seen_tasks(accuracies) -> float:
    """Mean accuracy over tasks 1..t."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no seen tasks")
    return float(acc.mean())
