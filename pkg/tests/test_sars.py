from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contcal.errors import EmptyBufferError, InsufficientSamplesError, InvalidInputError
from contcal.geometry import Pose, Quaternion, hybrid_pose_distance
from contcal.sars import (
    Outcome,
    ReplayBuffer,
    ReplaySample,
    SarsConfig,
    dispersion_stats,
    min_distance_to_buffer,
    reservoir_insert,
    sample_replay_batch,
    select_dense_sample,
    try_insert,
)


def sample_at(sid, x, y=0.0, z=0.0, q=None, scene=0) -> ReplaySample:
    return ReplaySample(sid, scene, Pose(np.array([x, y, z]), q or Quaternion.identity()), sid)


def random_sample(rng, sid, scene=0) -> ReplaySample:
    q = Quaternion.from_array(rng.normal(size=4))
    return ReplaySample(sid, scene, Pose(rng.uniform(0, 1, 3), q), sid)


def make_buffer(capacity=10, radius=0.5, lam=1.0, scope="global", scenes=(0,)) -> ReplayBuffer:
    b = ReplayBuffer(SarsConfig(capacity, radius, lam, scope))
    for s in scenes:
        b.register_scene(s)
    return b


def fill(buf: ReplayBuffer, samples) -> ReplayBuffer:
    for s in samples:
        buf._append(s)
    return buf


def brute_pairwise(buf: ReplayBuffer) -> np.ndarray:
    n = len(buf)
    D = np.full((n, n), np.inf)
    for i, a in enumerate(buf.samples):
        for j, b in enumerate(buf.samples):
            if i != j and (buf.config.radius_scope == "global" or a.scene_id == b.scene_id):
                D[i, j] = hybrid_pose_distance(a.pose, b.pose, buf.config.lam)
    return D


def brute_dense(buf: ReplayBuffer):
    D = brute_pairwise(buf)
    keys = []
    for i in range(len(buf)):
        row = sorted(D[i])
        nn2 = row[1] if len(row) > 2 else np.inf
        keys.append((row[0], nn2, buf.insertion_index[i]))
    return buf.samples[min(range(len(buf)), key=keys.__getitem__)].sample_id


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(capacity=0), dict(radius=-1.0), dict(lam=-0.1), dict(radius_scope="x")])
def test_config_validation(kw):
    with pytest.raises(InvalidInputError):
        SarsConfig(**kw)


def test_unregistered_scene_rejected():
    buf = make_buffer()
    with pytest.raises(InvalidInputError):
        try_insert(buf, sample_at(0, 0.0, scene=5))


# -- min distance ------------------------------------------------------------------------


def test_min_distance_examples():
    s = sample_at(0, 0.2)
    assert min_distance_to_buffer(fill(make_buffer(), [s]), s) == 0.0
    buf = fill(make_buffer(), [sample_at(0, 0.0), sample_at(1, 1.0)])
    assert min_distance_to_buffer(buf, sample_at(2, 0.3)) == pytest.approx(0.3, abs=1e-15)


def test_min_distance_empty():
    with pytest.raises(EmptyBufferError):
        min_distance_to_buffer(make_buffer(), sample_at(0, 0.0))


def test_min_distance_matches_scan():
    rng = np.random.default_rng(0)
    buf = fill(make_buffer(200), [random_sample(rng, i) for i in range(100)])
    q = random_sample(rng, "q")
    expect = min(hybrid_pose_distance(q.pose, s.pose, 1.0) for s in buf)
    assert min_distance_to_buffer(buf, q) == pytest.approx(expect, abs=1e-12)


def test_scene_scope_ignores_other_scenes():
    buf = make_buffer(scope="scene", scenes=(0, 1))
    try_insert(buf, sample_at(0, 0.0, scene=0))
    assert try_insert(buf, sample_at(1, 0.0, scene=1)).kind is Outcome.ACCEPTED_NEW
    assert try_insert(buf, sample_at(2, 0.0, scene=1)).kind is Outcome.REJECTED_REDUNDANT


# -- try_insert ------------------------------------------------------------------------------


def test_try_insert_outcomes():
    buf = make_buffer(capacity=2, radius=0.3)
    out = try_insert(buf, sample_at("a", 0.0))
    assert out.kind is Outcome.ACCEPTED_NEW and len(buf) == 1
    assert try_insert(buf, sample_at("dup", 0.0)).kind is Outcome.REJECTED_REDUNDANT
    assert buf.ids() == ["a"]
    assert try_insert(buf, sample_at("b", 1.0)).kind is Outcome.ACCEPTED_NEW
    out = try_insert(buf, sample_at("c", 0.5))
    assert out.kind is Outcome.ACCEPTED_WITH_EVICTION
    assert out.evicted_id == "a"  # two samples: earliest inserted goes
    assert len(buf) == 2 and set(buf.ids()) == {"b", "c"}


def test_rejection_leaves_buffer_untouched():
    rng = np.random.default_rng(1)
    buf = make_buffer(20, 0.4)
    for i in range(200):
        before = (buf.ids(), list(buf.insertion_index), buf._pos.copy())
        out = try_insert(buf, random_sample(rng, i))
        if out.kind is Outcome.REJECTED_REDUNDANT:
            assert buf.ids() == before[0]
            assert buf.insertion_index == before[1]
            np.testing.assert_array_equal(buf._pos, before[2])


@pytest.mark.parametrize("seed", range(10))
def test_fuzz_capacity_and_spacing(seed):
    rng = np.random.default_rng(seed)
    cap = int(rng.integers(5, 40))
    r = float(rng.uniform(0.05, 0.6))
    buf = make_buffer(cap, r, lam=float(rng.uniform(0, 2)))
    for i in range(1000):
        try_insert(buf, random_sample(rng, i))
        assert len(buf) <= cap
    D = brute_pairwise(buf)
    assert D.min() >= r


def test_single_slot_buffer_replaces_its_sample():
    buf = make_buffer(1, 0.1)
    try_insert(buf, sample_at(0, 0.0))
    out = try_insert(buf, sample_at(1, 0.5))
    assert out.kind is Outcome.ACCEPTED_WITH_EVICTION and out.evicted_id == 0
    assert [s.sample_id for s in buf.samples] == [1]
    assert try_insert(buf, sample_at(2, 0.55)).kind is Outcome.REJECTED_REDUNDANT


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=60),
    st.integers(1, 12),
    st.floats(0, 0.5),
)
def test_property_spacing_invariant(points, cap, r):
    buf = make_buffer(cap, r)
    for i, p in enumerate(points):
        try_insert(buf, sample_at(i, *p))
    assert len(buf) <= cap
    if len(buf) >= 2:
        assert brute_pairwise(buf).min() >= r


# -- dense selection --------------------------------------------------------------------------


def test_select_dense_example():
    buf = fill(make_buffer(), [sample_at("p0", 0.0), sample_at("p4", 0.4), sample_at("p5", 0.5)])
    assert select_dense_sample(buf) == "p4"


def test_select_dense_two_samples_picks_earliest():
    buf = fill(make_buffer(), [sample_at("x", 0.7), sample_at("y", 0.1)])
    assert select_dense_sample(buf) == "x"


def test_select_dense_needs_two():
    with pytest.raises(InsufficientSamplesError):
        select_dense_sample(fill(make_buffer(), [sample_at(0, 0.0)]))


def test_select_dense_matches_oracle_on_grids_with_ties():
    # Lattice positions create many exact ties on both distance keys.
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        pts = rng.integers(0, 5, (n, 3)) / 4.0
        order = rng.permutation(n)
        buf = fill(make_buffer(), [sample_at(int(i), *pts[i]) for i in order])
        assert select_dense_sample(buf) == brute_dense(buf)


# -- replay batch --------------------------------------------------------------------------------


def test_replay_batch_examples():
    buf = fill(make_buffer(), [sample_at(i, i / 10) for i in range(5)])
    assert sorted(s.sample_id for s in sample_replay_batch(buf, 10, 0)) == list(range(5))
    assert sample_replay_batch(buf, 1, 42) == sample_replay_batch(buf, 1, 42)
    perm = sample_replay_batch(buf, 5, 3)
    assert sorted(s.sample_id for s in perm) == list(range(5))


def test_replay_batch_without_replacement():
    buf = fill(make_buffer(100), [sample_at(i, i / 100) for i in range(50)])
    ids = [s.sample_id for s in sample_replay_batch(buf, 20, 7)]
    assert len(set(ids)) == 20


def test_replay_batch_empty():
    with pytest.raises(EmptyBufferError):
        sample_replay_batch(make_buffer(), 3, 0)


# -- dispersion ----------------------------------------------------------------------------------


def test_dispersion_two_samples():
    buf = fill(make_buffer(), [sample_at(0, 0.0), sample_at(1, 0.0, 0.25)])
    assert dispersion_stats(buf) == pytest.approx((0.25, 0.25), abs=1e-15)


def test_dispersion_matches_oracle():
    rng = np.random.default_rng(3)
    buf = fill(make_buffer(100), [random_sample(rng, i) for i in range(40)])
    D = brute_pairwise(buf)
    mn, mean = dispersion_stats(buf)
    assert mn == pytest.approx(D.min(), abs=1e-12)
    assert mean == pytest.approx(D.min(axis=1).mean(), abs=1e-12)


def test_dispersion_needs_two():
    with pytest.raises(InsufficientSamplesError):
        dispersion_stats(make_buffer())


# -- reservoir ------------------------------------------------------------------------------------


def test_reservoir_fill_phase_and_duplicates():
    buf = make_buffer(3)
    for i in range(3):
        assert reservoir_insert(buf, sample_at(i, 0.0), i, 0).kind is Outcome.ACCEPTED_NEW
    assert len(buf) == 3


def test_reservoir_acceptance_frequency():
    trials = 10_000
    i = 9
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(trials):
        buf = fill(make_buffer(1), [sample_at("old", 0.0)])
        hits += reservoir_insert(buf, sample_at("new", 1.0), i, rng).accepted
    p = 1 / (i + 1)
    sigma = np.sqrt(trials * p * (1 - p))
    assert abs(hits - trials * p) <= 3 * sigma


def test_reservoir_is_uniform_over_stream():
    cap, n, trials = 5, 40, 4000
    rng = np.random.default_rng(5)
    counts = np.zeros(n)
    for _ in range(trials):
        buf = make_buffer(cap)
        for i in range(n):
            reservoir_insert(buf, sample_at(i, 0.0), i, rng)
        counts[buf.ids()] += 1
    p = cap / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 4 * sigma)


# -- growth and serialisation -------------------------------------------------------------------------


def test_grow_raises_capacity_only():
    buf = make_buffer(3)
    buf.grow(2)
    assert buf.capacity == 5
    with pytest.raises(InvalidInputError):
        buf.grow(-1)


def test_dump_load_round_trip():
    rng = np.random.default_rng(6)
    buf = make_buffer(15, 0.3, scenes=(0, 1))
    for i in range(60):
        try_insert(buf, ReplaySample((i % 2, i), i % 2, random_sample(rng, i).pose, (i % 2, i)))
    fh = io.StringIO()
    buf.dump(fh)
    back = ReplayBuffer.load(fh.getvalue().splitlines())
    assert back.ids() == buf.ids()
    assert back.insertion_index == buf.insertion_index
    assert back.scenes == buf.scenes
    np.testing.assert_allclose(back._pos, buf._pos, atol=0)
    s = random_sample(rng, "next")
    a, b = try_insert(buf, s), try_insert(back, s)
    assert a == b
