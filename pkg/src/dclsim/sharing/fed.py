"""Decentralized full-model sharing: FedAvg, FedProx, FedCurv and FedFish over neighbour groups."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn import FisherDiag, PenaltyTerm, gather, normalize_fisher, scatter

VARIANTS = ("fedavg", "fedprox", "fedcurv", "fedfish")
MU_GRID = (0.001, 0.01, 0.1, 1.0)


def _check_lengths(vecs):
    n = len(vecs[0])
    for v in vecs[1:]:
        if len(v) != n:
            raise ValueError(f"parameter length mismatch: {len(v)} vs {n}")


def fedavg_aggregate(self_params, neighbor_params):
    """Elementwise mean over self and neighbours (accumulated in float64)."""
    self_params = np.asarray(self_params)
    vecs = [self_params] + [np.asarray(v) for v in neighbor_params]
    _check_lengths(vecs)
    if len(vecs) == 1:
        return self_params.copy()
    acc = np.zeros(self_params.shape, dtype=np.float64)
    for v in vecs:
        acc += v
    return (acc / len(vecs)).astype(self_params.dtype)


def fedfish_aggregate(self_params, d_norm, neighbor_params):
    """d * own + (1 - d) * group mean, with d the normalized own Fisher diagonal."""
    self_params = np.asarray(self_params)
    d = np.asarray(d_norm, dtype=np.float64)
    if d.shape != self_params.shape:
        raise ValueError("Fisher diagonal does not align with parameters")
    if np.any(d < 0) or np.any(d > 1) or not np.all(np.isfinite(d)):
        raise ValueError("normalized Fisher entries must lie in [0, 1]")
    vecs = [self_params] + [np.asarray(v) for v in neighbor_params]
    _check_lengths(vecs)
    mean = np.zeros(self_params.shape, dtype=np.float64)
    for v in vecs:
        mean += v
    mean /= len(vecs)
    return (d * self_params + (1.0 - d) * mean).astype(self_params.dtype)


def fedprox_penalty(names, anchor, mu: float) -> PenaltyTerm:
    """(mu/2) * ||theta - anchor||^2."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    anchor = np.asarray(anchor, dtype=np.float64)

    def fn(theta):
        diff = theta - anchor
        return 0.5 * mu * float(diff @ diff), mu * diff

    return PenaltyTerm(names, fn)


def fedcurv_penalty(names, snapshots, mu: float) -> PenaltyTerm:
    """mu * sum_j sum_p I_j[p] * (theta[p] - theta_j[p])^2 over neighbour snapshots."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    pairs = []
    for theta_j, fisher_j in snapshots:
        if fisher_j is None:
            raise ValueError("FedCurv snapshot is missing its Fisher diagonal")
        f = fisher_j.data if isinstance(fisher_j, FisherDiag) else np.asarray(fisher_j, dtype=np.float64)
        pairs.append((np.asarray(theta_j, dtype=np.float64), f))

    def fn(theta):
        value = 0.0
        grad = np.zeros_like(theta)
        for theta_j, f in pairs:
            diff = theta - theta_j
            value += float((f * diff * diff).sum())
            grad += 2.0 * f * diff
        return mu * value, mu * grad

    return PenaltyTerm(names, fn)


@dataclass
class FedRoundState:
    tau: int = 0
    mu: float = 0.01
    snapshots: dict = field(default_factory=dict)
    fishers: dict = field(default_factory=dict)


def fed_round(agents, topology, variant: str, mu: float, ledger, clock: int, state: FedRoundState | None = None,
              mode_tag: str = "fed"):
    """Exchange shared parameters with neighbours, then aggregate and/or install penalties.

    Agents without neighbours are left untouched.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown federated variant {variant!r}")
    state = state if state is not None else FedRoundState(mu=mu)
    state.tau += 1
    names = {a.id: a.net.shared_names() for a in agents}
    snaps = {a.id: gather(a.net.params, names[a.id]) for a in agents}
    state.snapshots = snaps
    fishers = {}
    if variant in ("fedcurv", "fedfish"):
        for a in agents:
            if a.fisher is not None:
                fishers[a.id] = a.fisher
    state.fishers = fishers
    updates = {}
    for a in agents:
        nbrs = topology.neighbors(a.id)
        if not nbrs:
            continue
        own = snaps[a.id]
        P = len(own)
        for j in nbrs:
            sent = 2 * P if variant == "fedcurv" else P
            room = ledger.remaining(j, a.id, clock)
            if sent <= room:
                ledger.charge(clock, j, a.id, mode_tag, sent)
        others = [snaps[j].data for j in nbrs]
        if variant == "fedfish":
            fd = a.fisher_norm
            if fd is None and a.fisher is not None:
                fd = a.fisher_norm = normalize_fisher(a.fisher)
            if fd is None:
                new = fedavg_aggregate(own.data, others)
            else:
                new = fedfish_aggregate(own.data, fd.data, others)
        else:
            new = fedavg_aggregate(own.data, others)
        updates[a.id] = own.like(new)
        if variant == "fedprox":
            a.penalty = fedprox_penalty(names[a.id], new, mu)
        elif variant == "fedcurv":
            snaps_j = []
            for j in nbrs:
                f = fishers.get(j)
                if f is None:
                    f = np.zeros(len(snaps[j]))
                snaps_j.append((snaps[j].data, f))
            a.penalty = fedcurv_penalty(names[a.id], snaps_j, mu)
    for a in agents:
        if a.id in updates:
            params = a.net.params
            scatter(params, updates[a.id])
    return state
