"""Task streams: synthetic Gaussian-mixture families, IDX ingestion, replay buffers."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FAMILIES = ("synthetic-A", "synthetic-B", "synthetic-C")


@dataclass(frozen=True, eq=False)
class TaskSpec:
    index: int  # position in the owning agent's stream
    family: str
    labels: np.ndarray  # local class index -> global class id
    x_train: np.ndarray
    y_train: np.ndarray  # local indices
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self):
        return len(self.labels)

    @property
    def key(self):
        """Identity of the underlying task distribution (shared across agents)."""
        return (self.family, tuple(sorted(int(c) for c in self.labels)))

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    def label_set(self):
        return set(int(c) for c in self.labels)

    def to_local(self, global_labels):
        lookup = {int(c): i for i, c in enumerate(self.labels)}
        return np.array([lookup.get(int(g), -1) for g in global_labels], dtype=np.int64)


@dataclass
class TaskStream:
    tasks: list  # per agent: list[TaskSpec]
    groups: list | None = None  # combined setting: family per agent (after the mixed prefix)

    @property
    def n_agents(self):
        return len(self.tasks)

    def task_set(self):
        return {t.key for agent in self.tasks for t in agent}


# --------------------------------------------------------------------------
# synthetic families


@dataclass
class ClassPool:
    """Global class prototypes for one family: ``centers[c]`` has one row per mode."""

    family: str
    centers: np.ndarray  # (n_classes, modes, *input_shape)
    label_offset: int
    noise: float

    def sample(self, rng, cls: int, n: int):
        modes = self.centers[cls]
        pick = rng.integers(0, len(modes), size=n)
        base = modes[pick]
        return (base + self.noise * rng.standard_normal(base.shape)).astype(np.float32)


def make_pool(family: str, n_classes: int, input_shape, separation: float, noise: float,
              modes_per_class: int, seed: int, label_offset: int = 0) -> ClassPool:
    fam_idx = FAMILIES.index(family) if family in FAMILIES else abs(hash(family)) % 997
    rng = np.random.default_rng([seed, 7919, fam_idx])
    input_shape = tuple(input_shape)
    d = int(np.prod(input_shape))
    raw = rng.standard_normal((n_classes, modes_per_class, *input_shape))
    if len(input_shape) == 3:
        raw = gaussian_filter(raw, sigma=(0, 0, 0, 1.0, 1.0))
        raw /= raw.reshape(n_classes, modes_per_class, -1).std(axis=-1)[..., None, None, None]
    # expected distance between two centers ~= separation * noise
    centers = raw * (separation * noise / np.sqrt(2 * d))
    return ClassPool(family, centers.astype(np.float32), label_offset, noise)


def _make_task(rng, pool: ClassPool, classes, index, n_train, n_test, val_fraction):
    xs_tr, ys_tr, xs_va, ys_va, xs_te, ys_te = [], [], [], [], [], []
    n_val = max(1, int(round(n_train * val_fraction)))
    n_fit = n_train - n_val
    for local, c in enumerate(classes):
        x = pool.sample(rng, int(c), n_train + n_test)
        xs_tr.append(x[:n_fit]); ys_tr.append(np.full(n_fit, local))
        xs_va.append(x[n_fit:n_train]); ys_va.append(np.full(n_val, local))
        xs_te.append(x[n_train:]); ys_te.append(np.full(n_test, local))
    cat = np.concatenate
    return TaskSpec(index, pool.family, np.asarray(classes, dtype=np.int64) + pool.label_offset,
                    cat(xs_tr), cat(ys_tr).astype(np.int64), cat(xs_va), cat(ys_va).astype(np.int64),
                    cat(xs_te), cat(ys_te).astype(np.int64))


@dataclass
class SyntheticConfig:
    n_pool: int = 10
    separation: float = 8.0
    noise: float = 1.0
    modes_per_class: int = 1
    n_train_per_class: int = 20
    n_test_per_class: int = 50
    val_fraction: float = 0.2
    input_shape: tuple | None = None


def gen_synthetic_stream(n_agents: int, tasks_per_agent: int, classes_per_task: int, dim: int, seed: int,
                         family: str = "synthetic-A", cfg: SyntheticConfig | None = None) -> TaskStream:
    """Each task draws ``classes_per_task`` classes from a pool shared by all agents."""
    cfg = cfg or SyntheticConfig()
    if classes_per_task < 2:
        raise ValueError("classes_per_task must be >= 2")
    if dim < classes_per_task:
        raise ValueError(f"dim={dim} < classes_per_task={classes_per_task}: prototypes cannot be separated")
    if cfg.n_pool < classes_per_task:
        raise ValueError("class pool smaller than classes_per_task")
    shape = cfg.input_shape or (dim,)
    pool = make_pool(family, cfg.n_pool, shape, cfg.separation, cfg.noise, cfg.modes_per_class, seed)
    tasks = []
    for a in range(n_agents):
        rng = np.random.default_rng([seed, 104729, a])
        tasks.append([
            _make_task(rng, pool, np.sort(rng.choice(cfg.n_pool, classes_per_task, replace=False)), t,
                       cfg.n_train_per_class, cfg.n_test_per_class, cfg.val_fraction)
            for t in range(tasks_per_agent)
        ])
    return TaskStream(tasks)


def group_sizes(n_agents: int, n_groups: int = 3):
    return [len(g) for g in np.array_split(np.arange(n_agents), n_groups)]


def gen_combined_stream(n_agents: int = 20, seed: int = 0, tasks_per_agent: int = 10, classes_per_task: int = 3,
                        dim: int = 16, n_mixed: int = 4, cfg: SyntheticConfig | None = None) -> TaskStream:
    """Three families; the first ``n_mixed`` tasks of every agent mix families, then
    agents split into three near-equal groups that each draw from one family."""
    cfg = cfg or SyntheticConfig()
    if n_agents < 3:
        raise ValueError("combined stream needs at least 3 agents")
    shape = cfg.input_shape or (dim,)
    pools = [make_pool(f, cfg.n_pool, shape, cfg.separation, cfg.noise, cfg.modes_per_class, seed,
                       label_offset=i * cfg.n_pool) for i, f in enumerate(FAMILIES)]
    groups = []
    for g, size in enumerate(group_sizes(n_agents)):
        groups += [FAMILIES[g]] * size
    tasks = []
    for a in range(n_agents):
        rng = np.random.default_rng([seed, 104729, a])
        prefix = list(rng.permutation(3)) + list(rng.integers(0, 3, size=max(0, n_mixed - 3)))
        fams = prefix[:n_mixed] + [FAMILIES.index(groups[a])] * (tasks_per_agent - n_mixed)
        agent_tasks = []
        for t, f in enumerate(fams[:tasks_per_agent]):
            classes = np.sort(rng.choice(cfg.n_pool, classes_per_task, replace=False))
            agent_tasks.append(_make_task(rng, pools[f], classes, t, cfg.n_train_per_class,
                                          cfg.n_test_per_class, cfg.val_fraction))
        tasks.append(agent_tasks)
    return TaskStream(tasks, groups)


# --------------------------------------------------------------------------
# IDX format


class IDXError(ValueError):
    pass


def _read_idx(path, expect_magic):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise IDXError(f"{path}: truncated header")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expect_magic:
        raise IDXError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    off = 4 + 4 * ndim
    n = int(np.prod(dims))
    if len(buf) - off < n:
        raise IDXError(f"{path}: truncated data ({len(buf) - off} of {n} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(dims)


def load_idx(path_images, path_labels):
    """Returns (images scaled to [0, 1] as float32, labels as int64)."""
    images = _read_idx(path_images, IDX_IMAGES_MAGIC)
    labels = _read_idx(path_labels, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


# --------------------------------------------------------------------------
# replay


@dataclass
class _Slot:
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)  # local label within the slot's task
    g: list = field(default_factory=list)  # global class id
    prov: list = field(default_factory=list)
    seen: int = 0


class ReplayBuffer:
    """Per-task reservoir of (x, y) pairs with provenance ("local" | "received")."""

    def __init__(self, capacity: int = 64, rng=None):
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.slots: dict = {}

    def tasks(self):
        return sorted(self.slots)

    def __len__(self):
        return sum(len(s.x) for s in self.slots.values())

    def size(self, task):
        return len(self.slots[task].x) if task in self.slots else 0

    def insert(self, task, x, y, g=None, provenance="local"):
        slot = self.slots.setdefault(task, _Slot())
        g = y if g is None else g
        for xi, yi, gi in zip(x, y, g):
            slot.seen += 1
            item = (np.array(xi, copy=True), int(yi), int(gi), provenance)
            if len(slot.x) < self.capacity:
                j = len(slot.x)
                slot.x.append(None); slot.y.append(None); slot.g.append(None); slot.prov.append(None)
            else:
                j = int(self.rng.integers(0, slot.seen))
                if j >= self.capacity:
                    continue
            slot.x[j], slot.y[j], slot.g[j], slot.prov[j] = item

    def arrays(self, task=None):
        """All stored items as (x, y_local, g, task, provenance) arrays, in stable order."""
        keys = self.tasks() if task is None else [task]
        xs, ys, gs, ts, ps = [], [], [], [], []
        for t in keys:
            s = self.slots.get(t)
            if s is None:
                continue
            xs += s.x; ys += s.y; gs += s.g; ts += [t] * len(s.x); ps += s.prov
        if not xs:
            return None
        return (np.stack(xs), np.array(ys, dtype=np.int64), np.array(gs, dtype=np.int64),
                np.array(ts), np.array(ps))

    def sample(self, n: int, task=None, rng=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        data = self.arrays(task)
        if data is None:
            raise ValueError("cannot sample from an empty replay buffer")
        rng = rng if rng is not None else self.rng
        idx = rng.choice(len(data[0]), size=min(n, len(data[0])), replace=False)
        return tuple(a[idx] for a in data)


def replay_insert(buffer: ReplayBuffer, task, x, y, g=None, provenance="local"):
    buffer.insert(task, x, y, g, provenance)


def replay_sample(buffer: ReplayBuffer, n: int, task=None, rng=None):
    return buffer.sample(n, task, rng)
