import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from ltcl.errors import ParameterError, StateError
from ltcl.memory import (Exemplar, ExemplarBuffer, balanced_replay_set, head_pool_for,
                         herding_select, raw_replay_set, update_buffer)
from ltcl.model import build_bundle
from ltcl.synthetic import make_ref, render


# --- herding_select -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_herding_matches_oracle(seed):
    X = np.random.default_rng(seed).normal(size=(8, 4))
    assert herding_select(X, 4) == oracles.oracle_herding(X.tolist(), 4)


def test_budget_above_n_returns_all():
    X = np.random.default_rng(0).normal(size=(5, 3))
    order = herding_select(X, 9)
    assert sorted(order) == list(range(5))
    assert order == oracles.oracle_herding(X.tolist(), 9)


def test_budget_one_is_nearest_to_mean():
    X = np.random.default_rng(1).normal(size=(6, 3))
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    mu = U.mean(axis=0)
    assert herding_select(X, 1) == [int(np.argmin(np.linalg.norm(U - mu, axis=1)))]


def test_herding_budget_error():
    with pytest.raises(ParameterError):
        herding_select(np.ones((3, 2)), 0)


def test_duplicates_tie_break_low():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert herding_select(X, 1) == [0]
    assert herding_select(X, 3) == [0, 2, 1]
    dup = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert herding_select(dup, 2) == [0, 1]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 12), M=st.integers(1, 12))
def test_herding_permutation_covariant(seed, n, M):
    # two unit vectors always tie at the first step, so n starts at 3
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    base = herding_select(X, M)
    permuted = herding_select(X[perm], M)
    assert [int(perm[i]) for i in permuted] == base
    assert herding_select(X, M) == base


# --- buffer -------------------------------------------------------------------

def img(seed):
    return torch.from_numpy(render(make_ref(seed, "train", seed % 4, seed)))


def exemplars(label, n, synthetic=False, offset=0):
    return [Exemplar(f"r{label}_{offset + i}", label, img(100 * label + offset + i), synthetic)
            for i in range(n)]


def test_buffer_rejects_synthetics():
    buf = ExemplarBuffer(5)
    with pytest.raises(StateError):
        buf.set_class(0, exemplars(0, 1, synthetic=True))


def test_buffer_rejects_overflow():
    buf = ExemplarBuffer(2)
    with pytest.raises(StateError):
        buf.set_class(0, exemplars(0, 3))


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    b = build_bundle(widths=(8, 16))
    b.expand(6)
    return b


def task_data(spec, seed=0):
    refs, imgs, labels = [], [], []
    for label, n in spec.items():
        for i in range(n):
            ref = make_ref(seed, "train", label, i)
            refs.append(ref)
            imgs.append(torch.from_numpy(render(ref)))
            labels.append(label)
    return refs, torch.stack(imgs), torch.tensor(labels)


def test_update_small_class_keeps_all(bundle):
    buf = ExemplarBuffer(20)
    update_buffer(buf, *task_data({0: 3}), bundle)
    assert buf.counts() == {0: 3}


def test_update_large_class_caps_at_budget(bundle):
    buf = ExemplarBuffer(20)
    update_buffer(buf, *task_data({1: 50}), bundle)
    assert buf.counts() == {1: 20}


def test_update_idempotent(bundle):
    data = task_data({0: 7, 1: 12})
    buf = ExemplarBuffer(5)
    update_buffer(buf, *data, bundle)
    fp = buf.fingerprint()
    update_buffer(buf, *data, bundle)
    assert buf.fingerprint() == fp


def test_update_leaves_old_classes(bundle):
    buf = ExemplarBuffer(5)
    update_buffer(buf, *task_data({0: 8}), bundle)
    before = [e.image_ref for e in buf.exemplars(0)]
    update_buffer(buf, *task_data({2: 8}, seed=1), bundle)
    assert [e.image_ref for e in buf.exemplars(0)] == before
    assert buf.counts() == {0: 5, 2: 5}


def test_random_selector(bundle):
    buf = ExemplarBuffer(4)
    update_buffer(buf, *task_data({0: 9}), bundle, selector="random",
                  rng=np.random.default_rng(0))
    assert buf.counts() == {0: 4}


def test_records_roundtrip():
    buf = ExemplarBuffer(3)
    buf.set_class(0, exemplars(0, 2))
    buf.set_class(1, exemplars(1, 3))
    images = {e.image_ref: e.image for c in buf.classes for e in buf.exemplars(c)}
    back = ExemplarBuffer.from_records(3, buf.to_records(), images.__getitem__)
    assert back.fingerprint() == buf.fingerprint()


# --- replay sets --------------------------------------------------------------

def mixed_buffer(M):
    buf = ExemplarBuffer(M)
    for label, n in enumerate(sorted({1, max(1, M // 2), M - 1, M})):
        buf.set_class(label, exemplars(label, n))
    return buf


@pytest.mark.parametrize("M", [5, 20])
def test_balanced_replay_is_flat(bundle, M):
    buf = mixed_buffer(M)
    fp = buf.fingerprint()
    counts = buf.counts()
    replay = balanced_replay_set(buf, bundle, seed=3)
    assert set(replay.per_class_counts().values()) == {M}
    assert len(replay) == M * len(counts)
    assert int(replay.synthetic.sum()) == sum(M - n for n in counts.values())
    sums = replay.targets[replay.synthetic].sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-12)
    assert ((replay.targets[replay.synthetic] > 0).sum(dim=1) <= 2).all()
    assert buf.fingerprint() == fp and buf.counts() == counts
    assert all(not e.synthetic for c in buf.classes for e in buf.exemplars(c))


def test_full_buffer_gets_no_synthetics(bundle):
    buf = ExemplarBuffer(3)
    for c in range(3):
        buf.set_class(c, exemplars(c, 3))
    replay = balanced_replay_set(buf, bundle)
    assert not replay.synthetic.any()
    raw = raw_replay_set(buf, bundle.num_seen)
    assert torch.equal(replay.images, raw.images) and torch.equal(replay.targets, raw.targets)


def test_two_short_gets_two(bundle):
    buf = ExemplarBuffer(4)
    buf.set_class(0, exemplars(0, 4))
    buf.set_class(1, exemplars(1, 2))
    replay = balanced_replay_set(buf, bundle)
    assert int(replay.synthetic.sum()) == 2
    assert all(s.parents == (1, 0) for s in replay.samples)


def test_replay_deterministic(bundle):
    buf = mixed_buffer(5)
    a = balanced_replay_set(buf, bundle, seed=11)
    b = balanced_replay_set(buf, bundle, seed=11)
    assert torch.equal(a.images, b.images) and torch.equal(a.targets, b.targets)


def test_lone_class_warns_instead_of_failing(bundle):
    buf = ExemplarBuffer(4)
    buf.set_class(0, exemplars(0, 2))
    replay = balanced_replay_set(buf, bundle)
    assert len(replay) == 2 and replay.warnings


def test_head_pool_falls_back_to_largest():
    buf = ExemplarBuffer(5)
    buf.set_class(0, exemplars(0, 3))
    buf.set_class(1, exemplars(1, 2))
    buf.set_class(2, exemplars(2, 3))
    assert sorted({c for _, c in head_pool_for(buf, 1)}) == [0, 2]
    assert {c for _, c in head_pool_for(buf, 0)} == {2}


def test_empty_buffer_replay_is_state_error(bundle):
    with pytest.raises(StateError):
        balanced_replay_set(ExemplarBuffer(3), bundle)
