import numpy as np
import pytest

from oracles import naive_mean
from subspace_triplet.embedding import (
    LabeledDataset,
    centroids_from_embeddings,
    fuse_embeddings,
    identity_centroid,
    l2_normalize,
    l2_normalize_rows,
    nearest_index,
    pairwise_squared_distances,
    squared_distance,
)
from subspace_triplet.errors import DimensionError, EmptyIdentityError, NormalizationError


def test_l2_normalize_examples():
    assert np.array_equal(l2_normalize([1, 0, 0, 0]), [1, 0, 0, 0])
    assert np.allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    with pytest.raises(NormalizationError):
        l2_normalize([0, 0])


def test_normalized_rows_are_unit(rng):
    E = l2_normalize_rows(rng.normal(size=(500, 16)) * rng.uniform(1e-3, 1e3, size=(500, 1)))
    assert np.all(np.abs(np.linalg.norm(E, axis=1) - 1) <= 1e-6)
    with pytest.raises(NormalizationError):
        l2_normalize_rows(np.zeros((2, 3)))


def test_squared_distance_examples():
    a = np.array([0.3, -0.2])
    assert squared_distance(a, a) == 0.0
    assert squared_distance([1, 0], [-1, 0]) == 4.0
    assert squared_distance([1, 0], [0, 1]) == 2.0
    with pytest.raises(DimensionError):
        squared_distance([1, 0], [1, 0, 0])


def test_unit_distance_identity(rng):
    A = l2_normalize_rows(rng.normal(size=(1000, 16)))
    B = l2_normalize_rows(rng.normal(size=(1000, 16)))
    for a, b in zip(A, B):
        d = squared_distance(a, b)
        assert abs(d - (2 - 2 * np.dot(a, b))) <= 1e-9
        assert d == squared_distance(b, a)


def test_pairwise_matches_scalar(rng):
    A, B = rng.normal(size=(7, 5)), rng.normal(size=(4, 5))
    D = pairwise_squared_distances(A, B)
    for i in range(7):
        for j in range(4):
            assert D[i, j] == squared_distance(A[i], B[j])


def test_identity_centroid_examples(rng):
    c = identity_centroid([[1.0, 0.0]])
    assert np.array_equal(c.centroid, [1, 0]) and c.member_count == 1
    c = identity_centroid([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(c.centroid, [0.5, 0.5]) and c.member_count == 2
    E = l2_normalize_rows(rng.normal(size=(5, 8)))
    assert np.allclose(identity_centroid(E).centroid, naive_mean(E), atol=1e-15)
    with pytest.raises(EmptyIdentityError):
        identity_centroid(np.zeros((0, 3)))


def test_centroid_of_copies_is_exact(rng):
    e = l2_normalize(rng.normal(size=16))
    assert np.allclose(identity_centroid(np.tile(e, (37, 1))).centroid, e, atol=1e-12, rtol=0)


def test_centroid_not_renormalized():
    c = identity_centroid([[1.0, 0.0], [0.0, 1.0]]).centroid
    assert np.linalg.norm(c) < 1


def test_fuse_examples():
    assert np.array_equal(fuse_embeddings([1, 0], [1, 0]), [1, 0])
    assert np.array_equal(fuse_embeddings([1, 0], [0, 1]), [0.5, 0.5])
    assert np.array_equal(fuse_embeddings([1, 0], [-1, 0]), [0, 0])
    with pytest.raises(DimensionError):
        fuse_embeddings([1, 0], [1])


def test_nearest_index_ties_and_permutation(rng):
    C = rng.normal(size=(6, 4))
    C[4] = C[1]
    q = C[1] + 1e-3
    labels = np.array([10, 3, 7, 8, 2, 5])
    # rows 1 and 4 tie; label 2 (row 4) is lower
    assert nearest_index(q, C, labels) == 4
    perm = rng.permutation(6)
    assert labels[perm][nearest_index(q, C[perm], labels[perm])] == 2


def test_dataset_validation_and_groups():
    X = np.arange(12, dtype=float).reshape(6, 2)
    ds = LabeledDataset([5, 4, 3, 2, 1, 0], [1, 0, 1, 2, 0, 1], X, 3)
    groups = ds.members_by_identity()
    assert [list(groups[c]) for c in range(3)] == [[1, 4], [0, 2, 5], [3]]
    assert [s.sample_id for s in ds.samples] == [5, 4, 3, 2, 1, 0]
    sub = ds.subset(ds.identities == 1)
    assert list(sub.sample_ids) == [5, 3, 0]
    with pytest.raises(DimensionError):
        LabeledDataset([0], [3], [[0.0]], 3)
    with pytest.raises(ValueError):
        LabeledDataset([0, 0], [0, 1], [[0.0], [1.0]], 2)


def test_centroids_from_embeddings_matches_loop(rng):
    E = rng.normal(size=(40, 3))
    y = rng.integers(0, 6, size=40)
    y[y == 4] = 5  # identity 4 absent
    present, cent, counts = centroids_from_embeddings(E, y, 6)
    assert list(present) == sorted(set(y.tolist()))
    for c, v, n in zip(present, cent, counts):
        assert n == np.sum(y == c)
        assert np.allclose(v, naive_mean(E[y == c]), atol=1e-14)
