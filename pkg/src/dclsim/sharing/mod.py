"""Module sharing: transferability scores, sender-side offers, receiver-side selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..budget import cost_of_instances, instance_dims
from ..modular import ModuleId, component_dropout_train, deserialize_module, serialize_module
from ..nn import softmax


@dataclass(frozen=True)
class TransferScore:
    sender: int
    module_id: ModuleId
    source_task: int
    value: float
    metric: str  # "leep" | "iou"


@dataclass
class ModuleOffer:
    sender: int
    receiver: int
    round_id: int
    items: list = field(default_factory=list)  # [(Payload, TransferScore)]

    @property
    def floats(self):
        return sum(p.floats for p, _ in self.items)

    def __len__(self):
        return len(self.items)


@dataclass
class ReceiverInfo:
    """What a receiver publishes about its upcoming task."""

    agent: int
    labels: frozenset
    x_probe: np.ndarray | None = None
    y_probe: np.ndarray | None = None  # global labels


def leep(source_probs, target_labels) -> float:
    """Log expected empirical prediction of source-label distributions for target labels."""
    P = np.asarray(source_probs, dtype=np.float64)
    y = np.asarray(target_labels)
    if len(y) == 0:
        raise ValueError("LEEP needs a non-empty target sample")
    n = len(y)
    classes, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((len(classes), P.shape[1]))
    np.add.at(joint, yi, P)
    joint /= n
    marg = joint.sum(axis=0)
    cond = np.divide(joint, marg, out=np.zeros_like(joint), where=marg > 0)
    eep = (P * cond[yi]).sum(axis=1)
    return float(np.mean(np.log(eep)))


def leep_score(source_model, task, x, target_labels) -> float:
    logits, _ = source_model.forward(x, task)
    return leep(softmax(logits), target_labels)


def iou_score(a, b) -> float:
    a, b = set(a), set(b)
    if not a or not b:
        raise ValueError("IoU needs non-empty label sets")
    return len(a & b) / len(a | b)


def eligible_tasks(sender):
    """Sender tasks whose training added a module through component dropout."""
    net = sender.net
    return [(tau, m) for tau, m in sorted(net.added_by_task.items()) if m.via_dropout]


def sender_rank_and_offer(sender, info: ReceiverInfo, k: int, metric: str = "iou", round_id: int = 0) -> ModuleOffer:
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = []
    for tau, m in eligible_tasks(sender):
        if metric == "iou":
            value = iou_score(sender.stream[tau].label_set(), info.labels)
        elif metric == "leep":
            value = leep_score(sender.net, tau, info.x_probe, info.y_probe)
        else:
            raise ValueError(f"unknown transferability metric {metric!r}")
        scored.append((value, tau, m))
    scored.sort(key=lambda s: (-s[0], s[2].id.serial))
    offer = ModuleOffer(sender.id, info.agent, round_id)
    for value, tau, m in scored[:k]:
        offer.items.append((serialize_module(m), TransferScore(sender.id, m.id, tau, float(value), metric)))
    return offer


def _flatten(offers):
    items = [it for o in offers for it in o.items]
    tags = {s.metric for _, s in items}
    if len(tags) > 1:
        raise ValueError(f"offers mix transferability metrics {sorted(tags)}")
    return items


def receiver_select_trustmetric(offers) -> ModuleId:
    """Global argmax of reported scores; ties go to (sender id, module serial) ascending."""
    items = _flatten(offers)
    if not items:
        raise ValueError("no offered modules")
    best = min(items, key=lambda it: (-it[1].value, it[1].sender, it[1].module_id.serial))
    return best[1].module_id


def ranked_modules(offers):
    items = _flatten(offers)
    items.sort(key=lambda it: (-it[1].value, it[1].sender, it[1].module_id.serial))
    return [deserialize_module(p) for p, _ in items]


def receiver_select_tryout(net, task, offered_modules, probe_epochs: int, x, y, x_val, y_val, n_classes: int,
                           lr: float = 0.05, rng=None, keep_threshold: float = 0.5):
    """Component dropout over offered modules plus a fresh one; id of the kept winner or None."""
    if probe_epochs < 1:
        raise ValueError("probe_epochs must be >= 1")
    keep, chosen = component_dropout_train(net, task, x, y, x_val, y_val, n_classes, offered_modules,
                                           probe_epochs, lr=lr, rng=rng, keep_threshold=keep_threshold)
    return chosen if keep else None


def select_strategy(selection: str, k: int, n_neighbors: int = 1) -> str:
    """"auto" tries out candidates once more than two could arrive, else trusts the scores."""
    if selection == "auto":
        return "tryout" if k * n_neighbors > 2 else "trustmetric"
    if selection not in ("trustmetric", "tryout"):
        raise ValueError(f"unknown selection strategy {selection!r}")
    return selection


def receiver_info(agent, t: int, metric: str, probe_size: int = 32) -> ReceiverInfo:
    task = agent.stream[t]
    info = ReceiverInfo(agent.id, frozenset(task.label_set()))
    if metric == "leep":
        n = min(probe_size, len(task.x_val))
        info.x_probe = task.x_val[:n]
        info.y_probe = task.labels[task.y_val[:n]]
    return info


def modmod_round(agents, topology, t: int, k: int, metric: str, selection: str, ledger, clock: int,
                 probe_size: int = 32, mode_tag: str = "modmod") -> dict:
    """Offers from every neighbour at the boundary into task ``t``.

    Returns receiver id -> list of candidate modules (ordered by reported score)
    to seed component dropout.
    """
    select_strategy(selection, k)
    infos = {a.id: receiver_info(a, t, metric, probe_size) for a in agents if topology.neighbors(a.id)}
    offers = {}
    for a in agents:
        info = infos.get(a.id)
        if info is None:
            continue
        got = []
        for j in topology.neighbors(a.id):
            if metric == "leep":
                probe_cost = cost_of_instances(*instance_dims(a.stream[t].input_shape), len(info.x_probe))
                ledger.charge(clock, a.id, j, f"{mode_tag}-probe", probe_cost)
            offer = sender_rank_and_offer(agents[j], info, k, metric, round_id=clock)
            if not len(offer):
                continue
            if offer.floats <= ledger.remaining(j, a.id, clock):
                ledger.charge(clock, j, a.id, mode_tag, offer.floats)
                ledger.note("scores", len(offer))
                got.append(offer)
        offers[a.id] = got
    out = {}
    for rid, got in offers.items():
        if not any(len(o) for o in got):
            continue
        strategy = select_strategy(selection, k, len(topology.neighbors(rid)))
        if strategy == "trustmetric":
            winner = receiver_select_trustmetric(got)
            mods = [m for m in ranked_modules(got) if m.id == winner][:1]
        else:
            mods = ranked_modules(got)
        out[rid] = mods
    return out
