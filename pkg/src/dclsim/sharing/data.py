"""Instance-level sharing: receiver-initiated queries (Recv) and class-worth requests (Simp)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..budget import cost_of_instances, instance_dims


@dataclass
class Query:
    requester: int
    x: np.ndarray  # raw instance; the sender applies its own feature map
    task: int
    k: int
    rank: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ClassRequest:
    requester: int
    classes: list  # global class ids, ascending
    worths: dict  # class -> mean validation CE
    b: int

    def __post_init__(self):
        if not self.classes:
            raise ValueError("a class request needs at least one class")
        if any(w < 0 for w in self.worths.values()):
            raise ValueError("worths must be non-negative")


@dataclass
class Instances:
    x: np.ndarray
    g: np.ndarray  # global labels
    task: int | None = None  # receiver task the instances were requested for

    def __len__(self):
        return len(self.x)


def top_q(losses, q: int):
    """Indices of the q largest losses; ties go to the lower index."""
    losses = np.asarray(losses, dtype=np.float64)
    order = np.argsort(-losses, kind="stable")
    return order[:q]


def recv_select_queries(agent, q: int, k: int = 1):
    """The ``q`` validation instances (over all seen tasks) with the highest loss.

    Returns ``(queries, truncated)``; ``truncated`` is set when fewer than ``q``
    validation instances exist.
    """
    data = agent.validation_losses()
    if data is None:
        raise ValueError(f"agent {agent.id} has no validation data")
    x, _, _, taus, losses = data
    truncated = q > len(losses)
    if truncated:
        warnings.warn(f"agent {agent.id}: q={q} exceeds {len(losses)} validation instances", stacklevel=2)
    idx = top_q(losses, q)
    return [Query(agent.id, x[i], int(taus[i]), k, rank) for rank, i in enumerate(idx)], truncated


def cosine_distance(a, b):
    """Pairwise 1 - cos(a_i, b_j); zero vectors are at distance 1 from everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (a @ b.T) / (na * nb.T)
    cos = np.where((na > 0) & (nb.T > 0), cos, 0.0)
    return 1.0 - cos


def knn_indices(query_feats, db_feats, k: int):
    d = cosine_distance(query_feats, db_feats)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def recv_answer(sender, query: Query) -> Instances:
    return recv_answer_batch(sender, [query])[0]


def recv_answer_batch(sender, queries) -> list:
    """k nearest stored instances (cosine distance in the sender's feature space) per query."""
    db = sender.replay.arrays()
    if db is None or not queries:
        return [Instances(np.empty((0,)), np.empty(0, dtype=np.int64)) for _ in queries]
    dbx, _, dbg, _, _ = db
    fq = sender.features(np.stack([q.x for q in queries]))
    fd = sender.features(dbx)
    out = []
    for row, q in zip(knn_indices(fq, fd, max(q.k for q in queries)), queries):
        sel = row[: q.k]
        out.append(Instances(dbx[sel], dbg[sel], q.task))
    return out


def class_worths(agent) -> dict:
    """Mean validation CE per seen class (0 for classes without validation samples)."""
    data = agent.validation_losses()
    seen = sorted({int(c) for task in agent.seen() for c in task.labels})
    worths = {c: 0.0 for c in seen}
    if data is None:
        return worths
    _, _, g, _, losses = data
    for c in seen:
        mask = g == c
        if mask.any():
            worths[c] = float(losses[mask].mean())
    return worths


def simp_request(agent, b: int) -> ClassRequest:
    worths = class_worths(agent)
    return ClassRequest(agent.id, sorted(worths), worths, int(b))


def simp_allocation(worths: dict, requested, available, b: int) -> dict:
    """N_c = floor(W(c) / sum_{c' in requested & available} W(c') * b)."""
    if b < 0:
        raise ValueError("b must be >= 0")
    inter = sorted(set(requested) & set(available))
    total = sum(worths.get(c, 0.0) for c in inter)
    if not inter or total <= 0:
        return {c: 0 for c in inter}
    return {c: int(math.floor(worths.get(c, 0.0) / total * b)) for c in inter}


def simp_respond(sender, req: ClassRequest, rng=None) -> Instances:
    rng = rng if rng is not None else sender.share_rng
    db = sender.replay.arrays()
    if db is None:
        return Instances(np.empty((0,)), np.empty(0, dtype=np.int64))
    dbx, _, dbg, _, _ = db
    alloc = simp_allocation(req.worths, req.classes, np.unique(dbg).tolist(), req.b)
    picks = []
    for c in sorted(alloc):
        pool = np.flatnonzero(dbg == c)
        n = min(alloc[c], len(pool))
        if n > 0:
            picks.append(np.sort(rng.choice(pool, size=n, replace=False)))
    if not picks:
        return Instances(dbx[:0], dbg[:0])
    sel = np.concatenate(picks)
    return Instances(dbx[sel], dbg[sel])


def _truncate(inst: Instances, max_n):
    if max_n >= len(inst):
        return inst
    max_n = max(0, int(max_n))
    return Instances(inst.x[:max_n], inst.g[:max_n], inst.task)


def data_round(agents, topology, algo: str, ledger, clock: int, q: int = 20, k: int = 5, b: int | None = None,
               mode_tag: str = "data"):
    """One barrier-synchronized data-sharing round across all edges.

    Recv: every agent sends ``q`` queries to each neighbour, which answers with
    ``k`` instances per query (``b = q*k`` per edge). Simp: one class request per
    neighbour, answered with at most ``b`` instances.
    """
    b = q * k if b is None else int(b)
    if b <= 0:
        return 0
    inst_cost = None
    requests = {}
    for a in agents:
        if not topology.neighbors(a.id):
            continue
        if inst_cost is None:
            inst_cost = cost_of_instances(*instance_dims(a.task.input_shape), 1)
        if algo == "recv":
            requests[a.id] = recv_select_queries(a, q, k)[0]
        elif algo == "simp":
            requests[a.id] = simp_request(a, b)
        else:
            raise ValueError(f"unknown data-sharing algorithm {algo!r}")
    responses = []
    for a in agents:
        req = requests.get(a.id)
        if req is None:
            continue
        for j in topology.neighbors(a.id):
            sender = agents[j]
            if algo == "recv":
                sent = req
                room_q = ledger.remaining(a.id, j, clock)
                if room_q != float("inf"):
                    sent = req[: max(0, int(room_q // inst_cost))]
                ledger.charge(clock, a.id, j, f"{mode_tag}-query", inst_cost * len(sent))
                parts = recv_answer_batch(sender, sent)
                parts = [p for p in parts if len(p)]
                if parts:
                    inst = Instances(np.concatenate([p.x for p in parts]), np.concatenate([p.g for p in parts]))
                    tasks = np.concatenate([np.full(len(p), p.task) for p in parts])
                else:
                    inst, tasks = Instances(np.empty((0,)), np.empty(0, dtype=np.int64)), np.empty(0, dtype=int)
            else:
                inst = simp_respond(sender, req)
                tasks = None
            inst = _truncate(inst, b)
            room = ledger.remaining(j, a.id, clock)
            if room != float("inf"):
                inst = _truncate(inst, room // inst_cost)
            n = len(inst)
            if n:
                ledger.charge(clock, j, a.id, mode_tag, inst_cost * n)
                ledger.note("labels", n)
            responses.append((a.id, inst, None if tasks is None else tasks[:n]))
    moved = 0
    for dst, inst, tasks in responses:
        if not len(inst):
            continue
        if tasks is None:
            agents[dst].receive_instances(inst.x, inst.g)
        else:
            for tau in np.unique(tasks):
                m = tasks == tau
                agents[dst].receive_instances(inst.x[m], inst.g[m], int(tau))
        moved += len(inst)
    return moved
