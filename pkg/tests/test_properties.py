import itertools
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flis.clustering import (
    AdjacencyMatrix,
    InferenceMatrix,
    adjacency,
    clustering_error,
    hard_threshold,
    hierarchical_clusters,
    joint_clusters,
)
from flis.data import LabelSkew, PartitionSpec, generate_synthetic, partition
from flis.federation import aggregate, sample_clients
from flis.metrics import rounds_to_target
from flis.nn import ModelParams, forward, init_model, loss_and_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
settings.register_profile("flis", deadline=None, max_examples=60)
settings.load_profile("flis")


@given(arrays(np.float64, 3 * 4 + 4, elements=finite), arrays(np.float64, (5, 3), elements=finite))
def test_forward_rows_are_distributions(w, x):
    p = forward(ModelParams(w, ((3, 4),)), x)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)
    assert np.all(p >= 0)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_gradient_matches_central_differences(seed, hidden):
    rng = np.random.default_rng(seed)
    m = init_model(3, 3, hidden=(hidden,), seed=seed)
    m = m.with_weights(rng.normal(scale=0.7, size=m.size))
    x, y = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    _, g = loss_and_grad(m, x, y)
    h = 1e-5
    for i in range(m.size):
        up, dn = m.weights.copy(), m.weights.copy()
        up[i] += h
        dn[i] -= h
        num = (loss_and_grad(m.with_weights(up), x, y)[0] - loss_and_grad(m.with_weights(dn), x, y)[0]) / (2 * h)
        assert abs(g[i] - num) <= 1e-4 * max(abs(g[i]) + abs(num), 1e-6)


mats_strategy = st.integers(2, 6).flatmap(
    lambda n: st.lists(arrays(np.float64, (6, 3), elements=st.floats(0.01, 1.0)), min_size=n, max_size=n)
)


@given(mats_strategy, st.randoms(use_true_random=False))
def test_adjacency_symmetric_and_equivariant(mats, rnd):
    inf = [InferenceMatrix(m, k) for k, m in enumerate(mats)]
    a = adjacency(inf)
    assert np.max(np.abs(a.values - a.values.T)) <= 1e-12
    assert np.all(a.values >= 0)
    perm = list(range(len(inf)))
    rnd.shuffle(perm)
    np.testing.assert_array_equal(adjacency([inf[i] for i in perm]).values, a.values[np.ix_(perm, perm)])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
def test_one_hot_adjacency_counts_agreements(rows):
    a = np.zeros((len(rows), 4))
    b = np.zeros((len(rows), 4))
    for r, (i, j) in enumerate(rows):
        a[r, i] = 1
        b[r, j] = 1
    agree = sum(i == j for i, j in rows)
    val = adjacency([InferenceMatrix(a, 0), InferenceMatrix(b, 1)]).values[0, 1]
    assert math.isclose(val, math.sqrt(agree) / len(rows), abs_tol=1e-12)


def sym(n):
    return arrays(np.float64, (n, n), elements=st.floats(0, 1)).map(lambda m: (m + m.T) / 2)


@given(st.integers(2, 7).flatmap(sym), st.floats(0, 1))
def test_joint_clusters_shape(a, beta):
    cs = joint_clusters(hard_threshold(a, beta))
    assert len(cs) == a.shape[0]
    assert all(i in c for i, c in enumerate(cs.clusters))
    off = a[~np.eye(a.shape[0], dtype=bool)]
    if beta >= off.max():
        assert all(c == (i,) for i, c in enumerate(cs.clusters))


@given(st.integers(2, 7).flatmap(sym))
def test_beta_zero_gives_full_clusters(a):
    a = a + 0.01  # strictly positive similarities
    cs = joint_clusters(hard_threshold(a, 0.0))
    assert all(c == tuple(range(a.shape[0])) for c in cs.clusters)


@given(st.integers(1, 8).flatmap(sym), st.floats(1e-6, 2.0))
def test_hierarchical_output_is_partition(a, t):
    cs = hierarchical_clusters(AdjacencyMatrix(a, tuple(range(a.shape[0]))), t)
    assert sorted(k for c in cs.clusters for k in c) == list(range(a.shape[0]))


@given(st.lists(st.integers(0, 2), min_size=2, max_size=9), st.integers(0, 2**31))
def test_clustering_error_pair_counts(labels, seed):
    n = len(labels)
    signed = np.where(np.random.default_rng(seed).uniform(size=(n, n)) < 0.4, 1, -1)
    found = joint_clusters(signed)
    truth = dict(enumerate(labels))
    fp = fn = 0
    for i, j in itertools.combinations(range(n), 2):
        together = any(i in c and j in c for c in found.clusters)
        fp += together and labels[i] != labels[j]
        fn += (not together) and labels[i] == labels[j]
    assert clustering_error(found, truth) == (fp, fn)


@given(arrays(np.float64, 5, elements=finite), st.lists(st.integers(1, 100), min_size=1, max_size=6))
def test_aggregate_identical_members_unchanged(w, sizes):
    m = ModelParams(np.concatenate([w, [0.0]]), ((5, 1),))
    out = aggregate(range(len(sizes)), {k: (m, s) for k, s in enumerate(sizes)})
    np.testing.assert_array_equal(out.weights, m.weights)


@given(st.lists(st.tuples(arrays(np.float64, 2, elements=finite), st.integers(1, 50)), min_size=1, max_size=6))
def test_aggregate_is_convex(items):
    upd = {k: (ModelParams(w, ((1, 1),)), s) for k, (w, s) in enumerate(items)}
    out = aggregate(range(len(items)), upd).weights
    stack = np.array([w for w, _ in items])
    assert np.all(out >= stack.min(axis=0) - 1e-9) and np.all(out <= stack.max(axis=0) + 1e-9)


@given(st.integers(1, 200), st.floats(1e-4, 1.0), st.integers(0, 50), st.integers(0, 1000))
def test_sample_size_invariant(n, rate, t, seed):
    s = sample_clients(n, rate, t, seed)
    assert len(s) == max(math.ceil(rate * n - 1e-9), 1) == len(set(s))
    assert s == sample_clients(n, rate, t, seed)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_rounds_to_target_monotone(series, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = rounds_to_target(series, lo), rounds_to_target(series, hi)
    assert b is None or (a is not None and a <= b)


@settings(max_examples=25)
@given(st.integers(2, 10), st.floats(0.1, 1.0), st.integers(0, 100))
def test_label_skew_label_count(num_classes, fraction, seed):
    k = math.ceil(fraction * num_classes - 1e-9)
    groups = math.ceil(num_classes / k)
    corpus = generate_synthetic(num_classes, 2, 12, 0.5, seed)
    clients = partition(corpus, PartitionSpec(LabelSkew(fraction), groups * 2, 0.25, seed))
    for c in clients:
        assert len(c.train.label_set() | c.test.label_set()) == k
    rows = [set(c.train.index.tolist()) | set(c.test.index.tolist()) for c in clients]
    assert sum(map(len, rows)) == len(corpus) == len(set().union(*rows))
