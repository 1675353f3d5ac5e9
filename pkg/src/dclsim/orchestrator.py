"""Simulation loop: agents learn task streams in lockstep while sharing on fixed schedules."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentState, NetConfig, TrainConfig, build_net
from .budget import CostLedger
from .nn import normalize_fisher
from .sharing.data import data_round
from .sharing.fed import VARIANTS, FedRoundState, fed_round
from .sharing.mod import modmod_round
from .tasks import SyntheticConfig, gen_combined_stream, gen_synthetic_stream
from .topology import make_topology

log = logging.getLogger(__name__)

MODES = ("none", "data", *VARIANTS, "modmod", "hybrid")
EVAL_PERIOD = 10


@dataclass
class DataSharing:
    algo: str = "recv"  # "recv" | "simp"
    q: int = 20
    k: int = 5
    f: int = 16
    b: int | None = None  # Simp budget; defaults to q * k


@dataclass
class FedSharing:
    variant: str = "fedavg"
    f: int = 5
    mu: float = 0.01


@dataclass
class ModSharing:
    k: int = 1
    metric: str = "iou"
    selection: str = "auto"
    probe_size: int = 32


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: str = "synthetic"  # "synthetic" | "combined"
    n_agents: int = 8
    tasks_per_agent: int = 10
    classes_per_task: int = 3
    dim: int = 200
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    topology: dict = field(default_factory=lambda: {"kind": "complete"})
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "none"
    data: DataSharing = field(default_factory=DataSharing)
    fed: FedSharing = field(default_factory=FedSharing)
    modmod: ModSharing = field(default_factory=ModSharing)
    eval_period: int = EVAL_PERIOD
    seeds: list = field(default_factory=lambda: [0])
    enforce_budget: bool = False
    workers: int = 1

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sharing mode {self.mode!r}")
        if self.mode == "modmod" or self.mode == "hybrid":
            if self.net.kind != "modular":
                raise ValueError(f"mode {self.mode!r} needs a modular net")
        for label, v in (("data.f", self.data.f), ("fed.f", self.fed.f), ("eval_period", self.eval_period),
                         ("train.epochs_per_task", self.train.epochs_per_task), ("modmod.k", self.modmod.k)):
            if v < 1:
                raise ValueError(f"{label} must be positive")
        if self.data.q < 0 or self.data.k < 0:
            raise ValueError("data.q and data.k must be non-negative")
        if self.fed.mu < 0:
            raise ValueError("fed.mu must be non-negative")
        if self.mode in VARIANTS:
            self.fed.variant = self.mode
        if self.fed.variant not in VARIANTS:
            raise ValueError(f"unknown federated variant {self.fed.variant!r}")
        if self.dataset not in ("synthetic", "combined"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        return self

    @property
    def uses_data(self):
        return self.mode in ("data", "hybrid")

    @property
    def uses_fed(self):
        return self.mode in VARIANTS or self.mode == "hybrid"

    @property
    def uses_modmod(self):
        return self.mode in ("modmod", "hybrid")

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "").validate()


def _build(tp, d, path):
    if not isinstance(d, dict):
        raise ValueError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(tp)}
    kwargs = {}
    for key, val in d.items():
        if key not in fields:
            raise KeyError(f"unknown config key {path + key!r}")
        default = getattr(tp(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), val, f"{path}{key}.")
        elif key == "input_shape" and val is not None:
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    return tp(**kwargs)


# --------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    config: dict
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)  # seed -> summary dict
    ledgers: dict = field(default_factory=dict)  # seed -> {family: CostLedger}
    errors: dict = field(default_factory=dict)

    def seed_rows(self, seed):
        return [r for r in self.rows if r["seed"] == seed]

    def final_acc(self, seed=None):
        """Mean final accuracy over agents (and seeds when ``seed`` is None)."""
        vals = [v for s, summ in self.summary.items() if seed is None or s == seed
                for v in summ["final_acc"].values()]
        return float(np.mean(vals))

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.rows]
        lines.append(json.dumps({"summary": {str(k): v for k, v in self.summary.items()},
                                 "errors": {str(k): v for k, v in self.errors.items()},
                                 "config": self.config}, sort_keys=True, default=str))
        return "\n".join(lines) + "\n"

    def write(self, path, ledger_dir=None, run_id=None):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            f.write(self.to_jsonl())
        os.replace(tmp, path)
        if ledger_dir is not None:
            for seed, fams in self.ledgers.items():
                merged = CostLedger()
                for fam in sorted(fams):
                    merged.extend(fams[fam])
                out = os.path.join(ledger_dir, f"{run_id}-seed{seed}.csv")
                merged.to_csv(out + ".tmp")
                os.replace(out + ".tmp", out)

    @classmethod
    def read(cls, path) -> "RunRecord":
        rows, summary, errors, config = [], {}, {}, {}
        with open(path) as f:
            for line in f:
                obj = json.loads(line)
                if "summary" in obj:
                    summary = {int(k): v for k, v in obj["summary"].items()}
                    errors = {int(k): v for k, v in obj["errors"].items()}
                    config = obj["config"]
                else:
                    rows.append(obj)
        for s in summary.values():
            s["final_acc"] = {int(k): v for k, v in s["final_acc"].items()}
            s["auc"] = {int(k): v for k, v in s["auc"].items()}
        return cls(config, rows, summary, {}, errors)


def evaluate_seen_tasks(agent, t=None) -> float:
    accs = [agent.test_accuracy(tau) for tau in range(agent.t + 1 if t is None else t + 1)]
    return float(np.mean(accs))


def collective_objective(agents) -> float:
    """sum over tasks and agents of empirical task frequency in the agent's stream times test CE."""
    total = 0.0
    for a in agents:
        n = len(a.stream)
        for tau in range(a.t + 1):
            total += (1.0 / n) * a.test_loss(tau)
    return float(total)


def collective_objective_from(losses: dict, streams: dict) -> float:
    """Reference form: ``losses[agent][key]`` mean CE, ``streams[agent]`` list of task keys."""
    total = 0.0
    tasks = {k for keys in streams.values() for k in keys}
    for key in tasks:
        for agent, keys in streams.items():
            pr = keys.count(key) / len(keys)
            if pr > 0:
                total += pr * losses[agent][key]
    return float(total)


def relative_gain(record: RunRecord, baseline: RunRecord) -> float:
    """Mean over (agent, seed) of final accuracy minus the baseline's, in accuracy points."""
    diffs = []
    for seed, summ in record.summary.items():
        base = baseline.summary.get(seed)
        if base is None:
            continue
        for agent, acc in summ["final_acc"].items():
            if agent in base["final_acc"]:
                diffs.append(acc - base["final_acc"][agent])
    if not diffs:
        raise ValueError("records share no (seed, agent) pairs")
    return 100.0 * float(np.mean(diffs))


# --------------------------------------------------------------------------
# simulation


def build_stream(cfg: ExperimentConfig, seed: int):
    if cfg.dataset == "combined":
        return gen_combined_stream(cfg.n_agents, seed, cfg.tasks_per_agent, cfg.classes_per_task, cfg.dim,
                                   cfg=cfg.synthetic)
    return gen_synthetic_stream(cfg.n_agents, cfg.tasks_per_agent, cfg.classes_per_task, cfg.dim, seed,
                                cfg=cfg.synthetic)


def build_agents(cfg: ExperimentConfig, seed: int, stream):
    agents = []
    for i in range(cfg.n_agents):
        net = build_net(cfg.net, stream.tasks[i][0].input_shape, seed, i)
        agents.append(AgentState(i, net, stream.tasks[i], copy.deepcopy(cfg.train), seed))
    return agents


class Simulation:
    """One seed of one experiment; exposes the loop pieces for tests."""

    def __init__(self, cfg: ExperimentConfig, seed: int, workers: int | None = None):
        self.cfg = cfg
        self.seed = seed
        self.stream = build_stream(cfg, seed)
        self.topology = make_topology(cfg.topology, cfg.n_agents, seed)
        self.agents = build_agents(cfg, seed, self.stream)
        self.ledgers = {fam: CostLedger(self.topology, cfg.enforce_budget)
                        for fam, on in (("data", cfg.uses_data), ("fed", cfg.uses_fed), ("modmod", cfg.uses_modmod))
                        if on}
        self.fed_state = FedRoundState(mu=cfg.fed.mu)
        self.workers = cfg.workers if workers is None else workers
        self.rows = []
        self.epoch = 0
        self.clock = 0

    def _each_agent(self, fn):
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                list(ex.map(fn, self.agents))
        else:
            for a in self.agents:
                fn(a)

    def floats_in(self, i):
        return sum(led.received_by(i) for led in self.ledgers.values())

    def begin_task(self, t):
        self.clock += 1
        candidates = {}
        if self.cfg.uses_modmod:
            m = self.cfg.modmod
            candidates = modmod_round(self.agents, self.topology, t, m.k, m.metric, m.selection,
                                      self.ledgers["modmod"], self.clock, m.probe_size)
        for a in self.agents:
            a.begin_task(t, candidates.get(a.id))

    def end_task(self):
        for a in self.agents:
            a.end_task()
        if self.cfg.uses_fed and self.cfg.fed.variant in ("fedcurv", "fedfish"):
            for a in self.agents:
                a.fisher = a.compute_fisher()
                a.fisher_norm = normalize_fisher(a.fisher) if a.fisher is not None else None

    def step_epoch(self):
        cfg = self.cfg
        self.epoch += 1
        self._each_agent(lambda a: a.train_epoch())
        if cfg.uses_data and self.epoch % cfg.data.f == 0:
            d = cfg.data
            data_round(self.agents, self.topology, d.algo, self.ledgers["data"], self.clock, d.q, d.k, d.b)
        if cfg.uses_fed and self.epoch % cfg.fed.f == 0:
            fed_round(self.agents, self.topology, cfg.fed.variant, cfg.fed.mu, self.ledgers["fed"], self.clock,
                      self.fed_state)

    def checkpoint(self, t, epoch_in_task):
        for a in self.agents:
            accs = [a.test_accuracy(tau) for tau in range(t + 1)]
            self.rows.append({
                "seed": self.seed, "agent": a.id, "task": t, "epoch": self.epoch, "epoch_in_task": epoch_in_task,
                "acc": float(np.mean(accs)), "task_acc": accs, "B": self.floats_in(a.id),
            })

    def run(self):
        cfg = self.cfg
        for t in range(cfg.tasks_per_agent):
            self.begin_task(t)
            for e in range(1, cfg.train.epochs_per_task + 1):
                self.step_epoch()
                if e == cfg.train.epochs_per_task:
                    self.end_task()
                if e % cfg.eval_period == 0:
                    self.checkpoint(t, e)
        return self.rows

    def summary(self):
        final, auc = {}, {}
        for a in self.agents:
            rows = [r for r in self.rows if r["agent"] == a.id]
            final[a.id] = rows[-1]["acc"]
            auc[a.id] = float(np.mean([r["acc"] for r in rows]))
        n_edges = self.topology.n_edges()
        totals = {fam: led.total() for fam, led in self.ledgers.items()}
        B_total = sum(totals.values())
        return {
            "final_acc": final, "auc": auc,
            "mean_final_acc": float(np.mean(list(final.values()))),
            "mean_auc": float(np.mean(list(auc.values()))),
            "ledger_totals": totals, "B_total": B_total,
            "B_edge": B_total / n_edges if n_edges else 0.0,
            "n_edges": n_edges,
            "modules_kept": sum(1 for a in self.agents for _, keep, _ in a.modules_kept if keep),
            "collective_objective": collective_objective(self.agents),
        }


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> RunRecord:
    cfg.validate()
    record = RunRecord(cfg.to_dict())
    for seed in cfg.seeds:
        try:
            sim = Simulation(cfg, seed, workers)
            sim.run()
        except Exception as exc:  # noqa: BLE001 - a failed seed must not stop the others
            log.error("seed %s aborted: %s", seed, exc)
            record.errors[seed] = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
            continue
        record.rows.extend(sim.rows)
        record.summary[seed] = sim.summary()
        record.ledgers[seed] = sim.ledgers
    return record
