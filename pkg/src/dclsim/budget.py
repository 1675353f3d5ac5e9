"""Communication cost accounting. One unit = one 32-bit float."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LedgerRow:
    clock: int
    edge_from: int
    edge_to: int
    mode: str
    floats: int


class BudgetExceeded(RuntimeError):
    pass


class CostLedger:
    """Append-only record of charged floats per directed edge.

    In ``enforce`` mode a charge is clipped to the edge allowance
    ``budget * frequency * clock`` taken from the topology; in audit mode
    (default) everything is recorded as-is.
    """

    def __init__(self, topology=None, enforce: bool = False):
        self.rows: list[LedgerRow] = []
        self.topology = topology
        self.enforce = enforce
        self._edge_totals = defaultdict(int)
        self.meta_counts = defaultdict(int)  # uncharged metadata (labels, scores, headers)

    def allowance(self, src, dst, clock):
        if self.topology is None or (src, dst) not in self.topology.edges:
            return float("inf")
        m = self.topology.edges[(src, dst)]
        return m.budget * m.frequency * clock

    def remaining(self, src, dst, clock):
        if not self.enforce:
            return float("inf")
        return self.allowance(src, dst, clock) - self._edge_totals[(src, dst)]

    def charge(self, clock: int, src: int, dst: int, mode: str, floats: int) -> int:
        floats = int(floats)
        if floats < 0:
            raise ValueError("negative charge")
        if self.enforce:
            left = self.remaining(src, dst, clock)
            if floats > left:
                raise BudgetExceeded(f"edge {src}->{dst}: {floats} floats exceeds remaining {left}")
        if floats == 0:
            return 0
        self.rows.append(LedgerRow(clock, src, dst, mode, floats))
        self._edge_totals[(src, dst)] += floats
        return floats

    def note(self, key: str, count: int = 1):
        self.meta_counts[key] += count

    # -- queries
    def total(self, mode: str | None = None) -> int:
        return sum(r.floats for r in self.rows if mode is None or r.mode == mode)

    def edge_totals(self) -> dict:
        return dict(self._edge_totals)

    def sent_by(self, j) -> int:
        return sum(r.floats for r in self.rows if r.edge_from == j)

    def received_by(self, i) -> int:
        return sum(r.floats for r in self.rows if r.edge_to == i)

    def per_edge_mean(self, n_edges: int) -> float:
        return self.total() / n_edges if n_edges else 0.0

    def check_conservation(self) -> bool:
        totals = defaultdict(int)
        for r in self.rows:
            totals[(r.edge_from, r.edge_to)] += r.floats
        return dict(totals) == dict(self._edge_totals) and sum(totals.values()) == self.total()

    def extend(self, other: "CostLedger"):
        for r in other.rows:
            self.rows.append(r)
            self._edge_totals[(r.edge_from, r.edge_to)] += r.floats

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clock", "edge_from", "edge_to", "mode", "floats"])
        for r in self.rows:
            w.writerow([r.clock, r.edge_from, r.edge_to, r.mode, r.floats])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "CostLedger":
        led = cls()
        with open(path) as f:
            for row in csv.DictReader(f):
                led.charge(int(row["clock"]), int(row["edge_from"]), int(row["edge_to"]), row["mode"],
                           int(row["floats"]))
        return led


def cost_of_instances(H: int, W: int, C_ch: int, N: int) -> int:
    return int(H) * int(W) * int(C_ch) * int(N)


def instance_dims(input_shape):
    """(H, W, C) of one instance; flat vectors count as H = dim, W = C = 1."""
    s = tuple(input_shape)
    if len(s) == 1:
        return s[0], 1, 1
    if len(s) == 2:
        return s[0], s[1], 1
    c, h, w = s
    return h, w, c


def cost_of_dense(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def cost_of_conv(c_in: int, c_out: int, k: int) -> int:
    return c_in * c_out * k * k + c_out


def cost_of_model(net, names=None) -> int:
    """Parameter count of the aggregated parts (``net.shared_names()`` by default)."""
    names = net.shared_names() if names is None else names
    params = net.params
    return int(sum(params[n].size for n in names))


def cost_of_modules(k: int, M: int) -> int:
    return int(k) * int(M)


def total_budget(f_epochs: int, b_per_comm: float, n_rounds: int) -> float:
    """Cumulative floats on one edge after ``n_rounds`` rounds fired every ``f_epochs`` epochs."""
    if f_epochs < 1:
        raise ValueError("frequency must be >= 1 epoch")
    return float(b_per_comm) * int(n_rounds)


def rounds_fired(horizon_epochs: int, f_epochs: int) -> int:
    return horizon_epochs // f_epochs


def marginal_gain_fit(points) -> float:
    """OLS slope of relative gain (%) against log B."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("need at least two (log B, gain) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValueError("degenerate fit: all budgets equal")
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def value_of_budget(relative_gain: float, B: float) -> float:
    if B <= 0:
        raise ValueError("budget must be positive")
    return float(relative_gain) / float(B)
