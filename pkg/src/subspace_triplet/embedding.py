"""Embeddings, distances, identity centroids and representation fusion.

Everything downstream (mining, clustering, retrieval) speaks in unit-norm
embedding vectors and the plain squared Euclidean distance between them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, EmptyIdentityError, NormalizationError

UNIT_NORM_TOL = 1e-6


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm.

    Raises:
        NormalizationError: if ``v`` has zero (or non-finite) norm.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.dot(v.ravel(), v.ravel()))
    if not np.isfinite(norm) or norm == 0.0:
        raise NormalizationError(f"cannot normalize vector with norm {norm}")
    return v / norm


def l2_normalize_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NormalizationError("cannot normalize a zero or non-finite row")
    return X / norms[:, None]


def squared_distance(a, b) -> float:
    """Squared Euclidean distance, summed in double precision."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float((diff * diff).sum())


def pairwise_squared_distances(A, B) -> np.ndarray:
    """All squared distances between rows of ``A`` and rows of ``B``.

    Computed from explicit differences rather than the dot-product expansion
    so that results agree bit-for-bit with :func:`squared_distance`.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    diff = A[:, None, :] - B[None, :, :]
    return (diff * diff).sum(axis=-1)


@dataclass(frozen=True)
class Sample:
    sample_id: int
    identity: int
    features: np.ndarray


@dataclass(frozen=True)
class IdentityCentroid:
    identity: int
    centroid: np.ndarray
    member_count: int


def identity_centroid(embeddings, identity: int = -1) -> IdentityCentroid:
    """Arithmetic mean of an identity's member embeddings (not renormalized)."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim == 1:
        E = E[None, :]
    if E.shape[0] == 0:
        raise EmptyIdentityError("an identity centroid needs at least one embedding")
    return IdentityCentroid(identity, E.sum(axis=0) / E.shape[0], int(E.shape[0]))


def fuse_embeddings(a, b) -> np.ndarray:
    """Elementwise average of two models' representations of the same item."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return (a + b) / 2.0


def nearest_index(query, candidates, labels: Sequence[int] | None = None) -> int:
    """Position of the nearest candidate; ties go to the lowest label.

    ``labels`` defaults to the candidate positions, so without it the lowest
    position wins a tie.
    """
    d = pairwise_squared_distances(np.atleast_2d(query), np.atleast_2d(candidates))[0]
    if labels is None:
        return int(np.argmin(d))
    labels = np.asarray(labels)
    order = np.lexsort((labels, d))
    return int(order[0])


@dataclass(eq=False)
class LabeledDataset:
    """Column-oriented container for samples of ``num_identities`` identities.

    Features live in one ``(N, d_in)`` float64 matrix; ``samples`` offers a
    row view when one is needed.
    """

    sample_ids: np.ndarray
    identities: np.ndarray
    features: np.ndarray
    num_identities: int
    _groups: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = len(self.sample_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.identities) != n:
            raise DimensionError("sample_ids, identities and features disagree in length")
        if n and (self.identities.min() < 0 or self.identities.max() >= self.num_identities):
            raise DimensionError("identity label outside [0, num_identities)")
        if len(np.unique(self.sample_ids)) != n:
            raise ValueError("sample_id values must be unique")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> Iterator[Sample]:
        for sid, ident, x in zip(self.sample_ids, self.identities, self.features):
            yield Sample(int(sid), int(ident), x)

    def members_by_identity(self) -> dict[int, np.ndarray]:
        """Row positions of each identity's samples, in dataset order."""
        if self._groups is None:
            order = np.argsort(self.identities, kind="stable")
            idents, starts = np.unique(self.identities[order], return_index=True)
            bounds = list(starts[1:]) + [len(order)]
            self._groups = {
                int(c): order[s:e] for c, s, e in zip(idents, starts, bounds)
            }
        return self._groups

    def subset(self, mask_or_rows) -> "LabeledDataset":
        rows = np.asarray(mask_or_rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return LabeledDataset(
            self.sample_ids[rows], self.identities[rows], self.features[rows], self.num_identities
        )

    def relabeled(self, identities) -> "LabeledDataset":
        return LabeledDataset(self.sample_ids, identities, self.features, self.num_identities)


def centroids_from_embeddings(E, identities, num_identities: int, renormalize: bool = False):
    """Per-identity mean embeddings for every identity that has members.

    Returns ``(present_identities, centroid_matrix, counts)`` with identities
    ascending. Sums are accumulated in float64 by ``np.add.at``.
    """
    E = np.asarray(E, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    sums = np.zeros((num_identities, E.shape[1]))
    np.add.at(sums, identities, E)
    counts = np.bincount(identities, minlength=num_identities)
    present = np.flatnonzero(counts)
    cent = sums[present] / counts[present, None]
    if renormalize:
        cent = l2_normalize_rows(cent)
    return present, cent, counts[present]
