"""Shared builders and oracles for the test suite."""
import numpy as np

from dclsim.nn import MonolithicNet, apply_penalty


def small_mono(seed=0, in_dim=4, width=5, depth=1, n_classes=3, dtype=np.float32):
    net = MonolithicNet(in_dim, width=width, depth=depth, rng=np.random.default_rng(seed), dtype=dtype)
    net.add_head(0, n_classes)
    return net


def total_loss(net, x, y, task, penalty=None, **kw):
    loss, grads = net.loss_and_grads(x, y, task, **kw)
    return loss + apply_penalty(net.params, grads, penalty), grads


def fd_check(net, x, y, task, names=None, penalty=None, h=1e-4, **kw):
    """Relative error ||g - g_fd|| / (||g|| + ||g_fd||) of analytic vs central-difference gradients."""
    _, grads = total_loss(net, x, y, task, penalty, **kw)
    names = list(grads) if names is None else names
    ana, num = [], []
    for n in names:
        p = net.params[n]
        g = grads.get(n, np.zeros_like(p))
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = total_loss(net, x, y, task, penalty, **kw)
            p[idx] = old - h
            lm, _ = total_loss(net, x, y, task, penalty, **kw)
            p[idx] = old
            ana.append(g[idx])
            num.append((lp - lm) / (2 * h))
    ana, num = np.asarray(ana), np.asarray(num)
    denom = np.linalg.norm(ana) + np.linalg.norm(num)
    return float(np.linalg.norm(ana - num) / denom) if denom > 0 else 0.0


def fd_penalty(penalty_fn, theta, h=1e-6):
    """Central differences of a flat ``fn(theta) -> (value, grad)``."""
    num = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        num[i] = (penalty_fn(tp)[0] - penalty_fn(tm)[0]) / (2 * h)
    return num


def tiny_config(mode="none", **over):
    """A few agents, few tasks, few epochs: fast enough for unit tests."""
    from dclsim.orchestrator import ExperimentConfig

    d = {"n_agents": 3, "tasks_per_agent": 3, "classes_per_task": 2, "dim": 6, "mode": mode,
         "net": {"width": 8, "depth": 1, "n_basis": 2},
         "train": {"epochs_per_task": 4, "cd_epochs": 2, "probe_epochs": 1, "lr": 0.1},
         "synthetic": {"n_pool": 5, "n_train_per_class": 10, "n_test_per_class": 10},
         "eval_period": 2, "data": {"f": 2, "q": 4, "k": 2}, "fed": {"f": 2}}
    for k, v in over.items():
        cur = d
        keys = k.split("__")
        for kk in keys[:-1]:
            cur = cur.setdefault(kk, {})
        cur[keys[-1]] = v
    return ExperimentConfig.from_dict(d)


def tiny_sim(mode="none", seed=0, run=True, **over):
    from dclsim.orchestrator import Simulation

    sim = Simulation(tiny_config(mode, **over), seed)
    if run:
        sim.run()
    return sim
