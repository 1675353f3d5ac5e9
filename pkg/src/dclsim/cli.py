"""Command line: run experiment configs, build report CSVs, validate configs.

    dclsim run CONFIG [--out DIR] [--seeds N]
    dclsim report DIR
    dclsim validate CONFIG

Worker threads per run come from DCLSIM_WORKERS (default 1).
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import logging
import os
import sys

import numpy as np
import yaml

from .budget import marginal_gain_fit
from .orchestrator import ExperimentConfig, RunRecord, run_experiment

log = logging.getLogger("dclsim")

GRID_KEY = "grid"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config files


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"grid key {dotted!r} goes through a non-mapping")
        cur = nxt
    cur[keys[-1]] = value


def expand_grid(doc: dict) -> list[dict]:
    """Cross product over ``grid: {dotted.key: [values]}``; keys expand in sorted order."""
    doc = dict(doc)
    grid = doc.pop(GRID_KEY, None) or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid must map dotted keys to value lists")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    runs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        d = copy.deepcopy(doc)
        for k, v in zip(keys, combo):
            _set_path(d, k, v)
        runs.append(d)
    return runs


def load_config(path) -> list[ExperimentConfig]:
    """Parse a YAML config into its expanded run list; any problem raises ConfigError."""
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    out = []
    for d in expand_grid(doc):
        try:
            out.append(ExperimentConfig.from_dict(d))
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return out


# --------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    cfgs = load_config(args.config)
    for cfg in cfgs:
        print(f"{cfg.config_hash()}  {cfg.name}  mode={cfg.mode}  seeds={list(cfg.seeds)}")
    print(f"ok: {len(cfgs)} run(s)")
    return 0


def cmd_run(args) -> int:
    cfgs = load_config(args.config)
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        for cfg in cfgs:
            cfg.seeds = list(range(args.seeds))
    workers = int(os.environ.get("DCLSIM_WORKERS", "1"))
    out = args.out
    os.makedirs(os.path.join(out, "records"), exist_ok=True)
    os.makedirs(os.path.join(out, "ledgers"), exist_ok=True)
    manifest = {"runs": []}
    failed = False
    for cfg in cfgs:
        h = cfg.config_hash()
        rec = run_experiment(cfg, workers)
        rec.write(os.path.join(out, "records", f"{h}.jsonl"), os.path.join(out, "ledgers"), h)
        manifest["runs"].append({"hash": h, "name": cfg.name, "mode": cfg.mode, "seeds": list(cfg.seeds),
                                 "record": f"records/{h}.jsonl", "errors": sorted(rec.errors)})
        for seed, err in sorted(rec.errors.items()):
            failed = True
            print(f"run {h} seed {seed} aborted: {err.splitlines()[0]}", file=sys.stderr)
    tmp = os.path.join(out, MANIFEST + ".tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(out, MANIFEST))
    print(f"{len(cfgs)} run(s) written to {out}")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# report


def _fmt(x):
    return f"{x:.10g}"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2 or np.ptp(v) == 0:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def _group_key(cfg: dict):
    """Records that differ only in mode, sharing knobs, topology and name share a baseline."""
    keep = {k: v for k, v in cfg.items() if k not in ("name", "mode", "data", "fed", "modmod", "topology", "seeds",
                                                      "enforce_budget", "workers")}
    return json.dumps(keep, sort_keys=True, default=str)


def _topology_label(cfg):
    t = cfg.get("topology", {})
    if isinstance(t, str):
        return t
    kind = t.get("kind", "complete")
    return f"{kind}(p={t['p']})" if "p" in t else kind


def _budget_label(cfg):
    m = cfg["mode"]
    if m == "data":
        return f"q={cfg['data']['q']},k={cfg['data']['k']},f={cfg['data']['f']}"
    if m in ("fedavg", "fedprox", "fedcurv", "fedfish"):
        return f"f={cfg['fed']['f']},mu={cfg['fed']['mu']}"
    if m == "modmod":
        return f"k={cfg['modmod']['k']}"
    return ""


def load_records(out_dir):
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest in {out_dir}")
    with open(path) as f:
        manifest = json.load(f)
    recs = []
    for run in manifest["runs"]:
        p = os.path.join(out_dir, run["record"])
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing record {p}")
        recs.append((run["hash"], RunRecord.read(p)))
    if not recs:
        raise FileNotFoundError(f"manifest in {out_dir} lists no runs")
    recs.sort(key=lambda hr: hr[0])
    return recs


def _paired_gain(rec, base):
    diffs = []
    for seed, summ in sorted(rec.summary.items()):
        b = base.summary.get(seed)
        if b is None:
            continue
        for agent, acc in sorted(summ["final_acc"].items()):
            if agent in b["final_acc"]:
                diffs.append(100.0 * (acc - b["final_acc"][agent]))
    return diffs


def build_report(out_dir) -> dict:
    """CSV texts keyed by file name; pure function of the records on disk."""
    recs = load_records(out_dir)
    curves, finals = [], []
    baselines = {}
    for h, rec in recs:
        if rec.config["mode"] == "none":
            baselines.setdefault(_group_key(rec.config), (h, rec))
    for h, rec in recs:
        cfg = rec.config
        by_ckpt = {}
        for r in rec.rows:
            by_ckpt.setdefault((r["task"], r["epoch_in_task"], r["epoch"]), []).append(r["acc"])
        for (task, eit, epoch), accs in sorted(by_ckpt.items(), key=lambda kv: kv[0][2]):
            m, se = mean_se(accs)
            curves.append([h, cfg["name"], cfg["mode"], task, eit, epoch, _fmt(m), _fmt(se), len(accs)])
        fin = [v for s in sorted(rec.summary) for _, v in sorted(rec.summary[s]["final_acc"].items())]
        auc = [v for s in sorted(rec.summary) for _, v in sorted(rec.summary[s]["auc"].items())]
        if not fin:
            continue
        base = baselines.get(_group_key(cfg))
        gains = _paired_gain(rec, base[1]) if base else []
        g, g_se = mean_se(gains) if gains else (float("nan"), float("nan"))
        B = float(np.mean([rec.summary[s]["B_edge"] for s in sorted(rec.summary)]))
        fm, fse = mean_se(fin)
        am, ase = mean_se(auc)
        finals.append(dict(hash=h, name=cfg["name"], mode=cfg["mode"], topology=_topology_label(cfg),
                           budget=_budget_label(cfg), final=fm, final_se=fse, auc=am, auc_se=ase,
                           gain=g, gain_se=g_se, B=B))

    files = {}
    files["learning_curves.csv"] = _csv(
        curves, ["hash", "name", "mode", "task", "epoch_in_task", "epoch", "acc_mean", "acc_se", "n"])
    files["final_auc.csv"] = _csv(
        [[f["hash"], f["name"], f["mode"], f["topology"], f["budget"], _fmt(f["final"]), _fmt(f["final_se"]),
          _fmt(f["auc"]), _fmt(f["auc_se"]), _fmt(f["gain"])] for f in finals],
        ["hash", "name", "mode", "topology", "budget", "final_acc", "final_se", "auc", "auc_se", "relative_gain"])

    # gain vs log B, one fitted slope per mode family over points with B > 0
    rows = []
    fam_of = lambda m: "fed" if m.startswith("fed") else m  # noqa: E731
    for fam in sorted({fam_of(f["mode"]) for f in finals if f["mode"] != "none"}):
        pts = [(np.log(f["B"]), f["gain"]) for f in finals
               if fam_of(f["mode"]) == fam and f["B"] > 0 and np.isfinite(f["gain"])]
        try:
            slope = marginal_gain_fit(pts)
        except ValueError:
            slope = float("nan")
        for f in finals:
            if fam_of(f["mode"]) == fam and f["B"] > 0 and np.isfinite(f["gain"]):
                rows.append([fam, f["mode"], f["budget"], f["hash"], _fmt(f["B"]), _fmt(np.log(f["B"])),
                             _fmt(f["gain"]), _fmt(f["gain"] / f["B"]), _fmt(slope)])
    files["gain_vs_logB.csv"] = _csv(
        rows, ["family", "mode", "budget", "hash", "B", "logB", "relative_gain", "value_of_budget", "slope"])

    files["topology_gain.csv"] = _csv(
        [[f["mode"], f["topology"], f["hash"], _fmt(f["gain"]), _fmt(f["gain_se"])]
         for f in sorted(finals, key=lambda f: (f["mode"], f["topology"], f["hash"]))],
        ["mode", "topology", "hash", "relative_gain", "gain_se"])
    return files


def cmd_report(args) -> int:
    files = build_report(args.dir)
    rep = os.path.join(args.dir, "report")
    os.makedirs(rep, exist_ok=True)
    for name in sorted(files):
        tmp = os.path.join(rep, name + ".tmp")
        with open(tmp, "w", newline="") as f:
            f.write(files[name])
        os.replace(tmp, os.path.join(rep, name))
    print(f"wrote {len(files)} file(s) to {rep}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dclsim", description="Distributed continual learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run every config in a (grid) file")
    r.add_argument("config")
    r.add_argument("--out", default="runs")
    r.add_argument("--seeds", type=int, default=None, help="override seeds with 0..N-1")
    r.set_defaults(fn=cmd_run)
    rp = sub.add_parser("report", help="summary CSVs from a run directory")
    rp.add_argument("dir")
    rp.set_defaults(fn=cmd_report)
    v = sub.add_parser("validate", help="parse and expand a config without running it")
    v.add_argument("config")
    v.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("aborted", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
