import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import loop_precision_coverage
from subspace_triplet.embedding import l2_normalize_rows, pairwise_squared_distances, squared_distance
from subspace_triplet.evaluation import best_threshold_accuracy
from subspace_triplet.mining import AnchorPositiveBatch, MiningConfig, batch_ohnm_select
from subspace_triplet.retrieval import index_from_embeddings, precision_coverage, query_batch, retrieve_hierarchical
from subspace_triplet.subspace import allocate_batches, random_partition

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite))
def test_pairwise_agrees_with_scalar(A):
    D = pairwise_squared_distances(A, A)
    for i in range(len(A)):
        for j in range(len(A)):
            assert D[i, j] == squared_distance(A[i], A[j])
    assert np.all(np.diag(D) == 0)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=8), st.integers(0, 200))
def test_allocation_sums_and_is_near_proportional(sizes, total):
    alloc = allocate_batches(sizes, total)
    assert alloc.sum() == total
    quota = total * np.array(sizes) / sum(sizes)
    assert np.all(np.abs(alloc - quota) < 1)


@given(st.integers(1, 60), st.data())
def test_random_partition_balanced(C, data):
    M = data.draw(st.integers(1, C))
    part = random_partition(C, M, seed=data.draw(st.integers(0, 99)))
    assert part.sizes.sum() == C and part.sizes.max() - part.sizes.min() <= 1


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(0, 2**31), st.data())
def test_mined_negatives_are_foreign_and_sorted(B, seed, data):
    k = data.draw(st.integers(1, 2 * B - 2))
    rng = np.random.default_rng(seed)
    E = l2_normalize_rows(rng.normal(size=(2 * B, 3)))
    batch = AnchorPositiveBatch(np.arange(B), np.arange(B, 2 * B), np.arange(B))
    tri = batch_ohnm_select(batch, E, MiningConfig(0.4, k, B), apply_hinge=False)
    assert len(tri) == B * k
    labels = batch.labels
    assert np.all(labels[tri.negative] != labels[tri.anchor])
    d = tri.d_an.reshape(B, k)
    assert np.all(np.diff(d, axis=1) >= 0)


@settings(max_examples=50)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_curve_matches_loop_oracle(n, seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(4, size=n)
    truth = rng.integers(-1, 4, size=n)
    conf = np.round(rng.random(n), 1)
    t = np.linspace(0, 1, 11)
    curve = precision_coverage(pred, truth, conf, t)
    ref = loop_precision_coverage(pred, truth, conf, t)
    assert [r[3:] for r in curve.rows()] == [r[3:] for r in ref]
    assert curve.coverage_non_increasing()
    assert np.all((curve.precision >= 0) & (curve.precision <= 1))


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_batch_queries_agree_with_single(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    ids = rng.integers(5, size=n)
    E = l2_normalize_rows(rng.normal(size=(n, 3)))
    # duplicated rows create exact ties
    E[n // 2] = E[0]
    index = index_from_embeddings(E, ids, rng.permutation(100)[:n])
    Q = np.concatenate([l2_normalize_rows(rng.normal(size=(5, 3))), E[:2]])
    b = query_batch(index, Q)
    for i, q in enumerate(Q):
        assert b.result(i) == retrieve_hierarchical(index, q)


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(0, 2**31))
def test_best_threshold_beats_any_grid_point(n, seed):
    rng = np.random.default_rng(seed)
    d = np.round(rng.random(n), 1)
    same = rng.random(n) < 0.5
    acc, thr = best_threshold_accuracy(d, same)
    assert acc == np.mean((d <= thr) == same)
    for t in np.linspace(-0.1, 1.1, 25):
        assert acc >= np.mean((d <= t) == same)
