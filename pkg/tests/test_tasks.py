import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dclsim.tasks import (
    FAMILIES,
    IDXError,
    ReplayBuffer,
    SyntheticConfig,
    gen_combined_stream,
    gen_synthetic_stream,
    group_sizes,
    load_idx,
    make_pool,
    replay_insert,
    replay_sample,
    write_idx,
)


def test_stream_lengths_and_splits():
    s = gen_synthetic_stream(8, 10, 3, 16, seed=0)
    assert s.n_agents == 8
    assert all(len(t) == 10 for t in s.tasks)
    t = s.tasks[0][0]
    assert t.n_classes == 3
    assert set(np.unique(t.y_train)) == {0, 1, 2}
    # disjoint splits: no training row reappears in validation or test
    rows = {r.tobytes() for r in t.x_train}
    assert not rows & {r.tobytes() for r in t.x_val}
    assert not rows & {r.tobytes() for r in t.x_test}


def test_stream_errors():
    with pytest.raises(ValueError):
        gen_synthetic_stream(2, 2, 1, 16, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic_stream(2, 2, 5, 4, seed=0)


def test_shared_prototypes_across_agents():
    cfg = SyntheticConfig(noise=0.0)
    s = gen_synthetic_stream(2, 6, 3, 8, seed=4, cfg=cfg)
    by_class = {}
    for agent in s.tasks:
        for t in agent:
            for local, c in enumerate(t.labels):
                proto = t.x_train[t.y_train == local][0]
                by_class.setdefault(int(c), []).append(proto)
    shared = [v for v in by_class.values() if len(v) > 1]
    assert shared
    for protos in shared:
        for p in protos[1:]:
            np.testing.assert_array_equal(p, protos[0])


def test_determinism():
    a = gen_synthetic_stream(3, 4, 3, 8, seed=11)
    b = gen_synthetic_stream(3, 4, 3, 8, seed=11)
    for ta, tb in zip(sum(a.tasks, []), sum(b.tasks, [])):
        assert ta.x_train.tobytes() == tb.x_train.tobytes()
        assert ta.labels.tolist() == tb.labels.tolist()


def test_coverage_union_of_agent_tasks():
    s = gen_synthetic_stream(4, 5, 3, 8, seed=2)
    union = set()
    for agent in s.tasks:
        union |= {t.key for t in agent}
    assert union == s.task_set()


def test_well_separated_linear_classifier():
    cfg = SyntheticConfig(separation=10.0, n_train_per_class=100, n_test_per_class=200)
    s = gen_synthetic_stream(1, 1, 3, 16, seed=0, cfg=cfg)
    t = s.tasks[0][0]
    # least-squares one-vs-rest linear classifier
    X = np.c_[t.x_train, np.ones(len(t.x_train))]
    Y = np.eye(3)[t.y_train]
    W = np.linalg.lstsq(X, Y, rcond=None)[0]
    pred = (np.c_[t.x_test, np.ones(len(t.x_test))] @ W).argmax(axis=1)
    assert (pred == t.y_test).mean() >= 0.99


def test_pool_center_distance_tracks_separation():
    pool = make_pool("synthetic-A", 30, (64,), separation=10.0, noise=1.0, modes_per_class=1, seed=0)
    c = pool.centers[:, 0]
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)[np.triu_indices(30, 1)]
    assert 8.5 < d.mean() < 11.5


def test_image_pool_shapes():
    cfg = SyntheticConfig(input_shape=(1, 12, 12))
    s = gen_synthetic_stream(2, 2, 3, 144, seed=0, cfg=cfg)
    assert s.tasks[0][0].input_shape == (1, 12, 12)


def test_combined_groups_and_prefix():
    s = gen_combined_stream(20, seed=0)
    assert sorted(group_sizes(20), reverse=True) == [7, 7, 6]
    counts = {f: s.groups.count(f) for f in FAMILIES}
    assert sorted(counts.values()) == [6, 7, 7]
    for a, agent in enumerate(s.tasks):
        assert len({t.family for t in agent[:4]}) >= 2
        assert all(t.family == s.groups[a] for t in agent[4:])


def test_combined_needs_three_agents():
    with pytest.raises(ValueError):
        gen_combined_stream(2, seed=0)


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    pi, pl = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(pi, imgs)
    write_idx(pl, labels)
    assert pi.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert pl.read_bytes()[:4] == b"\x00\x00\x08\x01"
    x, y = load_idx(pi, pl)
    assert x.shape == (2, 28, 28)
    np.testing.assert_allclose(x, imgs / 255.0, atol=1e-6)
    assert y.tolist() == [3, 7]
    assert x.min() >= 0 and x.max() <= 1


def test_idx_errors(tmp_path):
    pi, pl = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(pi, np.zeros((3, 4, 4), dtype=np.uint8))
    write_idx(pl, np.zeros(2, dtype=np.uint8))
    with pytest.raises(IDXError, match="count mismatch"):
        load_idx(pi, pl)
    with pytest.raises(IDXError, match="magic"):
        load_idx(pl, pl)
    pi.write_bytes(pi.read_bytes()[:-5])
    write_idx(pl, np.zeros(3, dtype=np.uint8))
    with pytest.raises(IDXError, match="truncated"):
        load_idx(pi, pl)
    pl.write_bytes(b"\x00\x00")
    with pytest.raises(IDXError, match="truncated"):
        load_idx(pi, pl)


def test_reservoir_small_insert_keeps_all():
    buf = ReplayBuffer(10, np.random.default_rng(0))
    replay_insert(buf, 0, np.arange(3)[:, None], np.zeros(3, dtype=int))
    assert buf.size(0) == 3


def test_reservoir_monte_carlo_uniform():
    # each of 100 items retained with probability 10/100
    rng = np.random.default_rng(0)
    trials = 5000
    hits = np.zeros(100)
    items = np.arange(100)[:, None]
    y = np.zeros(100, dtype=int)
    for _ in range(trials):
        buf = ReplayBuffer(10, rng)
        buf.insert(0, items, y)
        assert buf.size(0) == 10
        hits[buf.arrays(0)[0][:, 0]] += 1
    freq = hits / trials
    assert np.all(np.abs(freq - 0.1) <= 0.02)


def test_replay_provenance_and_sampling():
    buf = ReplayBuffer(8, np.random.default_rng(1))
    buf.insert(0, np.zeros((4, 2)), np.zeros(4, dtype=int))
    buf.insert(1, np.ones((3, 2)), np.ones(3, dtype=int), provenance="received")
    x, y, g, t, prov = buf.arrays(1)
    assert set(prov) == {"received"}
    x, y, g, t, prov = replay_sample(buf, 3, task=1)
    assert len(x) == 3 and set(t) == {1}
    assert len(replay_sample(buf, 100)[0]) == 7
    with pytest.raises(ValueError):
        replay_sample(ReplayBuffer(4), 1)
    with pytest.raises(ValueError):
        replay_sample(buf, 0)


@settings(max_examples=40, deadline=None)
@given(cap=st.integers(1, 12), n=st.integers(0, 40), seed=st.integers(0, 99))
def test_reservoir_capacity_invariant(cap, n, seed):
    buf = ReplayBuffer(cap, np.random.default_rng(seed))
    buf.insert(0, np.arange(n)[:, None], np.zeros(n, dtype=int))
    assert buf.size(0) == min(cap, n)
    if n:
        stored = buf.arrays(0)[0][:, 0]
        assert len(set(stored.tolist())) == len(stored)
