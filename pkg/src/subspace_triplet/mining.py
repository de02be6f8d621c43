"""Triplet generation: OHNM over pre-sampled triplets, batch OHNM, subspace batch OHNM.

A batch holds ``|B|`` distinct identities with one anchor and one positive
each. Batch rows are laid out anchors first, then positives, so row ``i``
and row ``i + |B|`` always form the pair of identity ``i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding import LabeledDataset, pairwise_squared_distances
from .errors import ConfigError, ScopeTooSmallError


@dataclass(frozen=True)
class MiningConfig:
    margin: float = 0.4
    top_k: int = 3
    batch_size: int = 32
    semi_hard: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("a batch needs at least two identities")
        if self.top_k > 2 * self.batch_size - 2:
            raise ConfigError(
                f"top_k={self.top_k} exceeds the negative pool of {2 * self.batch_size - 2}"
            )


@dataclass(frozen=True)
class AnchorPositiveBatch:
    anchor_rows: np.ndarray
    positive_rows: np.ndarray
    identities: np.ndarray
    scope: str = "global"

    def __len__(self) -> int:
        return len(self.anchor_rows)

    @property
    def rows(self) -> np.ndarray:
        """Dataset row positions of all ``2|B|`` batch samples."""
        return np.concatenate([self.anchor_rows, self.positive_rows])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.identities, self.identities])


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    d_ap: float
    d_an: float
    loss: float


@dataclass(frozen=True)
class TripletBatch:
    """Triplets as parallel arrays of batch-local row indices."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    d_ap: np.ndarray
    d_an: np.ndarray
    loss: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def take(self, idx) -> "TripletBatch":
        return TripletBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def as_array(self) -> np.ndarray:
        return np.stack([self.anchor, self.positive, self.negative], axis=1)

    def to_list(self) -> list[Triplet]:
        return [
            Triplet(int(a), int(p), int(n), float(x), float(y), float(l))
            for a, p, n, x, y, l in zip(
                self.anchor, self.positive, self.negative, self.d_ap, self.d_an, self.loss
            )
        ]


def _eligible(dataset: LabeledDataset, identities=None) -> np.ndarray:
    groups = dataset.members_by_identity()
    pool = groups.keys() if identities is None else identities
    return np.array(sorted(int(c) for c in pool if c in groups and len(groups[c]) >= 2), dtype=np.int64)


def _draw_pairs(dataset: LabeledDataset, chosen: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    groups = dataset.members_by_identity()
    anchors = np.empty(len(chosen), dtype=np.int64)
    positives = np.empty(len(chosen), dtype=np.int64)
    for i, c in enumerate(chosen):
        members = groups[int(c)]
        a, p = rng.choice(len(members), size=2, replace=False)
        anchors[i], positives[i] = members[a], members[p]
    return anchors, positives


def sample_batch(dataset: LabeledDataset, batch_size: int, rng, identities=None, scope="global"):
    """Draw ``batch_size`` distinct identities, each with a distinct anchor and positive.

    Only identities with at least two samples are eligible. ``identities``
    restricts the scope (e.g. to one subspace).
    """
    eligible = _eligible(dataset, identities)
    if len(eligible) < batch_size:
        raise ScopeTooSmallError(
            f"scope {scope!r} has {len(eligible)} eligible identities, batch needs {batch_size}",
            eligible=len(eligible),
            required=batch_size,
        )
    chosen = rng.choice(eligible, size=batch_size, replace=False)
    a, p = _draw_pairs(dataset, chosen, rng)
    return AnchorPositiveBatch(a, p, chosen, scope)


def sample_random_triplets(dataset: LabeledDataset, batch_size: int, rng):
    """Anchor-positive batch plus one uniformly drawn foreign negative per pair.

    This is the classic OHNM input: the negative is fixed before the model
    sees the batch. Returns ``(batch, negative_rows)``.
    """
    batch = sample_batch(dataset, batch_size, rng)
    n = len(dataset)
    negatives = np.empty(batch_size, dtype=np.int64)
    for i, c in enumerate(batch.identities):
        while True:
            r = int(rng.integers(n))
            if dataset.identities[r] != c:
                negatives[i] = r
                break
    return batch, negatives


def make_triplets(E, anchor, positive, negative, alpha: float) -> TripletBatch:
    anchor, positive, negative = (np.asarray(v, dtype=np.int64) for v in (anchor, positive, negative))
    A, P, N = E[anchor], E[positive], E[negative]
    d_ap = ((A - P) * (A - P)).sum(axis=-1)
    d_an = ((A - N) * (A - N)).sum(axis=-1)
    return TripletBatch(anchor, positive, negative, d_ap, d_an, np.maximum(0.0, d_ap - d_an + alpha))


def ohnm_filter(triplets, alpha: float):
    """Keep exactly the margin-violating triplets, preserving order."""
    if isinstance(triplets, TripletBatch):
        return triplets.take(np.flatnonzero(triplets.d_ap - triplets.d_an + alpha > 0))
    return [t for t in triplets if t.d_ap - t.d_an + alpha > 0]


def batch_ohnm_select(
    batch: AnchorPositiveBatch,
    embeddings,
    config: MiningConfig,
    sample_ids=None,
    apply_hinge: bool = True,
) -> TripletBatch:
    """In-batch negative search: each anchor takes its ``top_k`` nearest foreign samples.

    ``embeddings`` are the ``2|B|`` batch embeddings in :attr:`AnchorPositiveBatch.rows`
    order; ``sample_ids`` (same order) break distance ties, lowest first.
    Indices in the result are batch-local rows.
    """
    B = len(batch)
    pool = 2 * B - 2
    if config.top_k > pool:
        raise ConfigError(f"top_k={config.top_k} exceeds the negative pool of {pool}")
    E = np.asarray(embeddings, dtype=np.float64)
    labels = batch.labels
    if sample_ids is None:
        sample_ids = np.arange(2 * B)
    sample_ids = np.asarray(sample_ids)

    D = pairwise_squared_distances(E[:B], E)
    same = labels[:B, None] == labels[None, :]
    # same-identity columns (self and own positive) sort behind every candidate
    order = np.lexsort((np.broadcast_to(sample_ids, D.shape), np.where(same, np.inf, D)), axis=-1)
    negatives = order[:, : config.top_k]
    anchors = np.repeat(np.arange(B), config.top_k)
    positives = anchors + B
    triplets = make_triplets(E, anchors, positives, negatives.ravel(), config.margin)
    if config.semi_hard:
        triplets = triplets.take(np.flatnonzero(triplets.d_an > triplets.d_ap))
    if apply_hinge:
        triplets = ohnm_filter(triplets, config.margin)
    return triplets


def _embed_rows(embeddings, rows) -> np.ndarray:
    if callable(embeddings):
        return embeddings(rows)
    return np.asarray(embeddings)[rows]


def sample_subspace_batch(partition, subspace_index: int, dataset: LabeledDataset, batch_size: int, rng):
    """Batch drawn from one subspace, topped up from the nearest subspaces if it is too small.

    Returns ``(batch, fallback_used)``.
    """
    members = partition.members(subspace_index)
    scope = f"subspace-{subspace_index}"
    try:
        return sample_batch(dataset, batch_size, rng, members, scope), False
    except ScopeTooSmallError:
        pass
    chosen = list(_eligible(dataset, members))
    for other in partition.neighbors(subspace_index):
        if len(chosen) >= batch_size:
            break
        extra = _eligible(dataset, partition.members(other))
        take = min(batch_size - len(chosen), len(extra))
        chosen.extend(rng.choice(extra, size=take, replace=False).tolist())
    if len(chosen) < batch_size:
        raise ScopeTooSmallError(
            f"dataset has only {len(chosen)} eligible identities for a batch of {batch_size}",
            eligible=len(chosen),
            required=batch_size,
        )
    chosen = np.array(chosen, dtype=np.int64)
    a, p = _draw_pairs(dataset, chosen, rng)
    return AnchorPositiveBatch(a, p, chosen, scope + "+fallback"), True


def subspace_batch_ohnm(
    partition,
    subspace_index: int,
    dataset: LabeledDataset,
    embeddings: np.ndarray | Callable,
    config: MiningConfig,
    rng,
    apply_hinge: bool = True,
):
    """Batch OHNM with the batch confined to one subspace.

    ``embeddings`` is either an ``(N, d)`` matrix aligned with dataset rows
    or a callable mapping row positions to embeddings. Returns
    ``(batch, triplets, fallback_used)``.
    """
    batch, fallback = sample_subspace_batch(partition, subspace_index, dataset, config.batch_size, rng)
    E = _embed_rows(embeddings, batch.rows)
    triplets = batch_ohnm_select(batch, E, config, dataset.sample_ids[batch.rows], apply_hinge)
    return batch, triplets, fallback


def global_batch_ohnm(dataset, embeddings, config: MiningConfig, rng, apply_hinge: bool = True):
    """Batch OHNM over the whole dataset. Returns ``(batch, triplets)``."""
    batch = sample_batch(dataset, config.batch_size, rng)
    E = _embed_rows(embeddings, batch.rows)
    return batch, batch_ohnm_select(batch, E, config, dataset.sample_ids[batch.rows], apply_hinge)


def count_active(triplets) -> tuple[int, float]:
    """``(number of triplets with positive loss, mean loss over all triplets)``."""
    if isinstance(triplets, TripletBatch):
        losses = triplets.loss
    else:
        losses = np.array([t.loss for t in triplets], dtype=np.float64)
    if len(losses) == 0:
        return 0, 0.0
    return int(np.count_nonzero(losses > 0)), float(losses.mean())


def diagnostic_line(step: int, scope: str, triplets, batch_size: int, top_k: int) -> str:
    active, mean_loss = count_active(triplets)
    return json.dumps(
        {
            "step": step,
            "scope": scope,
            "active_triplets": active,
            "mean_loss": mean_loss,
            "batch_size": batch_size,
            "top_k": top_k,
        },
        sort_keys=True,
    )

