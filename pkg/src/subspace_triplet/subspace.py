"""Partitioning identities into subspaces of mutually similar identities.

Identities are represented by their centroid embeddings under the
pre-trained classifier; Lloyd's k-means groups them into ``M`` subspaces and
the triplet stage then draws each batch from a single subspace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .embedding import IdentityCentroid, centroids_from_embeddings, pairwise_squared_distances
from .errors import ConfigError
from .model import ModelParams, embed


@dataclass(frozen=True, eq=False)
class SubspacePartition:
    """Assignment of identities to subspaces.

    ``assignment`` is indexed by identity label; identities that were not
    clustered (no samples) hold ``-1``.
    """

    assignment: np.ndarray
    M: int
    cluster_centers: np.ndarray | None = None
    seed: int | None = None
    objective_trace: list = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        a = self.assignment[self.assignment >= 0]
        return np.bincount(a, minlength=self.M)

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == m)

    def neighbors(self, m: int) -> list[int]:
        """Other subspaces ordered by center distance to subspace ``m`` (index order without centers)."""
        others = [j for j in range(self.M) if j != m]
        if self.cluster_centers is None:
            return others
        d = pairwise_squared_distances(self.cluster_centers[m : m + 1], self.cluster_centers[others])[0]
        return [others[i] for i in np.lexsort((others, d))]

    def objective(self, centroids_by_identity: np.ndarray) -> float:
        """Within-subspace sum of squares of the given identity vectors under this assignment."""
        X = np.asarray(centroids_by_identity, dtype=np.float64)
        total = 0.0
        for m in range(self.M):
            pts = X[self.members(m)]
            if len(pts):
                total += float(((pts - pts.mean(axis=0)) ** 2).sum())
        return total

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "seed": self.seed,
            "assignment": [int(a) for a in self.assignment],
            "sizes": [int(s) for s in self.sizes],
            "objective_trace": [float(o) for o in self.objective_trace],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SubspacePartition":
        return cls(
            np.asarray(d["assignment"], dtype=np.int64),
            int(d["M"]),
            None,
            d.get("seed"),
            list(d.get("objective_trace", [])),
        )


@dataclass
class KMeansTrace:
    objective: list
    iterations: int
    seed: int | None


def kmeans_plus_plus(X: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding; returns row indices of the chosen centers."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = pairwise_squared_distances(X, X[chosen[0] : chosen[0] + 1])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a center; pick any unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        d2 = np.minimum(d2, pairwise_squared_distances(X, X[nxt : nxt + 1])[:, 0])
    return np.array(chosen)


def _assign(X, centers):
    return np.argmin(pairwise_squared_distances(X, centers), axis=1)


def _repair_empty(X, labels, centers, M):
    counts = np.bincount(labels, minlength=M)
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        rows = np.flatnonzero(labels == big)
        d = pairwise_squared_distances(X[rows], centers[big : big + 1])[:, 0]
        far = rows[int(np.argmax(d))]
        labels[far] = j
        centers[j] = X[far]
        counts[big] -= 1
        counts[j] = 1
    return labels


def _update(X, labels, M):
    sums = np.zeros((M, X.shape[1]))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=M)
    return sums / counts[:, None]


def _objective(X, labels, centers) -> float:
    diff = X - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans(centroids, M: int, max_iter: int = 100, seed=0, identities=None, num_identities=None):
    """Lloyd's algorithm with k-means++ seeding over identity centroids.

    ``centroids`` is a ``(C, d)`` matrix or a list of :class:`IdentityCentroid`.
    ``identities`` gives the label of each row (defaults to ``0..C-1``).
    Returns ``(SubspacePartition, KMeansTrace)``.
    """
    if len(centroids) and isinstance(centroids[0], IdentityCentroid):
        identities = np.array([c.identity for c in centroids])
        X = np.stack([c.centroid for c in centroids])
    else:
        X = np.asarray(centroids, dtype=np.float64)
    C = X.shape[0]
    if identities is None:
        identities = np.arange(C)
    identities = np.asarray(identities, dtype=np.int64)
    if M < 1 or M > C:
        raise ConfigError(f"need 1 <= M <= C, got M={M}, C={C}")
    rng = np.random.default_rng(seed)

    centers = X[kmeans_plus_plus(X, M, rng)].copy()
    labels = None
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        new = _assign(X, centers)
        if labels is not None and np.array_equal(new, labels):
            it -= 1
            break
        labels = _repair_empty(X, new, centers, M)
        centers = _update(X, labels, M)
        trace.append(_objective(X, labels, centers))

    if num_identities is None:
        num_identities = int(identities.max()) + 1
    assignment = np.full(num_identities, -1, dtype=np.int64)
    assignment[identities] = labels
    part = SubspacePartition(assignment, M, centers, seed if isinstance(seed, int) else None, trace)
    return part, KMeansTrace(trace, it, seed if isinstance(seed, int) else None)


def random_partition(C: int, M: int, seed=0, identities=None, centroids=None, num_identities=None):
    """Shuffle identities and deal them round-robin into ``M`` near-equal groups."""
    if identities is None:
        identities = np.arange(C)
    identities = np.asarray(identities, dtype=np.int64)
    if M < 1 or M > len(identities):
        raise ConfigError(f"need 1 <= M <= C, got M={M}, C={len(identities)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(identities))
    groups = np.empty(len(identities), dtype=np.int64)
    groups[perm] = np.arange(len(identities)) % M
    if num_identities is None:
        num_identities = int(identities.max()) + 1
    assignment = np.full(num_identities, -1, dtype=np.int64)
    assignment[identities] = groups
    centers = None
    if centroids is not None:
        centers = _update(np.asarray(centroids, dtype=np.float64), groups, M)
    return SubspacePartition(assignment, M, centers, seed if isinstance(seed, int) else None, [])


def allocate_batches(sizes, total: int) -> np.ndarray:
    """Split ``total`` batches across subspaces proportionally to ``sizes`` (largest remainder)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    quota = total * sizes / sizes.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - base.sum()
    order = np.lexsort((np.arange(len(sizes)), -(quota - base)))
    base[order[:rest]] += 1
    return base


def subspace_schedule(partition: SubspacePartition, epochs: int = 1, batches_per_epoch: int | None = None) -> Iterator[int]:
    """Yield subspace indices round-robin, with batch counts proportional to subspace size.

    One epoch issues ``batches_per_epoch`` batches (default ``M``).
    """
    if batches_per_epoch is None:
        batches_per_epoch = partition.M
    counts = allocate_batches(partition.sizes, batches_per_epoch)
    for _ in range(epochs):
        left = counts.copy()
        while left.any():
            for m in range(partition.M):
                if left[m]:
                    left[m] -= 1
                    yield m


def identity_centroid_matrix(dataset, params: ModelParams, renormalize: bool = False):
    """``(identities, centroids)`` of every identity present in ``dataset`` under ``params``."""
    E = embed(params, dataset.features)
    present, cent, _ = centroids_from_embeddings(E, dataset.identities, dataset.num_identities, renormalize)
    return present, cent


def build_identity_centroids(dataset, params: ModelParams, renormalize: bool = False) -> list[IdentityCentroid]:
    E = embed(params, dataset.features)
    present, cent, counts = centroids_from_embeddings(E, dataset.identities, dataset.num_identities, renormalize)
    return [IdentityCentroid(int(c), v, int(n)) for c, v, n in zip(present, cent, counts)]


def refresh_partition(dataset, params: ModelParams, M: int, seed=0, max_iter: int = 100, renormalize: bool = False):
    """Re-cluster identities with the current model's centroids."""
    identities, cent = identity_centroid_matrix(dataset, params, renormalize)
    part, _ = kmeans(cent, M, max_iter, seed, identities, dataset.num_identities)
    return part
