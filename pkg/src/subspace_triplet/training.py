"""Training loops: softmax classification and triplet fine-tuning.

Both loops use NAG with a step-wise learning-rate schedule that starts at
the stage's rate and drops by a factor of ten down to ``lr_floor``, holding
each rate for a fixed number of epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import LabeledDataset
from .errors import ConfigError
from .mining import (
    MiningConfig,
    batch_ohnm_select,
    make_triplets,
    sample_batch,
    sample_random_triplets,
    sample_subspace_batch,
)
from .model import (
    LossReport,
    ModelParams,
    SoftmaxHead,
    forward_batch,
    init_head,
    init_params,
    joint_objective,
    lookahead,
    nag_init,
    nag_step,
)
from .subspace import SubspacePartition, subspace_schedule

MINING_REGIMES = ("ohnm", "batch", "subspace")


@dataclass
class TrainConfig:
    hidden_dims: tuple = (64,)
    embedding_dim: int = 16
    momentum: float = 0.9
    lr_floor: float = 1e-4
    cls_batch_size: int = 64
    cls_lr: float = 0.1
    cls_epochs_per_rate: int = 3
    triplet_batch_size: int = 32
    triplet_lr: float = 0.01
    triplet_epochs_per_rate: int = 2
    margin: float = 0.4
    top_k: int = 3
    semi_hard: bool = False
    logit_scale: float = 16.0
    joint_lambda: float = 1.0
    reinit_head: bool = False

    def mining(self) -> MiningConfig:
        return MiningConfig(self.margin, self.top_k, self.triplet_batch_size, self.semi_hard)


def lr_schedule(start: float, floor: float, epochs_per_rate: int) -> list[float]:
    """Per-epoch learning rates: ``start, start/10, ...`` down to ``floor``."""
    if start <= 0 or floor <= 0 or epochs_per_rate < 0:
        raise ConfigError("learning rates must be positive and epochs non-negative")
    rates = []
    lr = start
    while lr >= floor * (1 - 1e-9):
        rates.extend([lr] * epochs_per_rate)
        lr /= 10.0
    return rates


@dataclass
class Classifier:
    params: ModelParams
    head: SoftmaxHead
    history: list = field(default_factory=list)


def _nag_update(params, head, grads_model, grads_head, state):
    arrays = params.arrays() + (head.arrays() if head is not None else [])
    grads = list(grads_model) + (list(grads_head) if head is not None else [])
    new, state = nag_step(arrays, grads, state)
    k = len(params.arrays())
    params = params.with_arrays(new[:k])
    if head is not None:
        head = head.with_arrays(new[k:])
    return params, head, state


def _split_lookahead(params, head, state):
    la = lookahead(params.arrays() + (head.arrays() if head is not None else []), state)
    k = len(params.arrays())
    return params.with_arrays(la[:k]), (head.with_arrays(la[k:]) if head is not None else None)


def train_classifier(
    dataset: LabeledDataset,
    config: TrainConfig,
    seed=0,
    init: Classifier | None = None,
) -> Classifier:
    """Train embedding network and softmax head with cross-entropy only."""
    if dataset.num_identities < 2:
        raise ConfigError("classification needs at least two identities")
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    if init is None:
        params = init_params(dataset.d_in, config.embedding_dim, config.hidden_dims, rng)
        head = init_head(dataset.num_identities, config.embedding_dim, rng, config.logit_scale)
    else:
        params, head = init.params, init.head
    state = nag_init(params.arrays() + head.arrays(), config.momentum, config.cls_lr)
    X, y = dataset.features, dataset.identities
    bs = config.cls_batch_size
    history = []
    for lr in lr_schedule(config.cls_lr, config.lr_floor, config.cls_epochs_per_rate):
        state.learning_rate = lr
        perm = rng.permutation(len(dataset))
        total = 0.0
        for s in range(0, len(perm), bs):
            rows = perm[s : s + bs]
            la_params, la_head = _split_lookahead(params, head, state)
            loss, gm, gh, _ = joint_objective(la_params, la_head, X[rows], None, y[rows], lam=1.0)
            params, head, state = _nag_update(params, head, gm, gh, state)
            total += loss * len(rows)
        history.append({"lr": lr, "softmax_loss": total / len(perm)})
    return Classifier(params, head, history)


def triplet_batches_per_epoch(dataset: LabeledDataset, batch_size: int) -> int:
    eligible = sum(1 for m in dataset.members_by_identity().values() if len(m) >= 2)
    return max(1, math.ceil(eligible / batch_size))


@dataclass
class TripletRun:
    params: ModelParams
    head: SoftmaxHead | None
    steps: list = field(default_factory=list)


def train_triplet(
    params: ModelParams,
    head: SoftmaxHead | None,
    dataset: LabeledDataset,
    config: TrainConfig,
    regime: str = "subspace",
    partition: SubspacePartition | None = None,
    seed=0,
    on_step=None,
) -> TripletRun:
    """Fine-tune with triplet loss (plus ``joint_lambda`` times softmax loss).

    ``regime`` is ``"ohnm"`` (pre-sampled random negatives, hinge-filtered),
    ``"batch"`` (in-batch top-k negatives over all identities) or
    ``"subspace"`` (in-batch negatives, batches confined to one subspace of
    ``partition``). Mining uses the same lookahead snapshot the gradient is
    taken at. The triplet term averages over every mined candidate, so
    inactive triplets dilute rather than drop out.
    """
    if regime not in MINING_REGIMES:
        raise ConfigError(f"unknown mining regime {regime!r}")
    if regime == "subspace" and partition is None:
        raise ConfigError("subspace mining needs a partition")
    mcfg = config.mining()
    rng = np.random.default_rng(seed)
    lam = config.joint_lambda
    use_head = head is not None and lam > 0
    if use_head and config.reinit_head:
        head = init_head(head.num_classes, params.d, rng, head.scale)
    if not use_head:
        head = None
    arrays = params.arrays() + (head.arrays() if head is not None else [])
    state = nag_init(arrays, config.momentum, config.triplet_lr)
    per_epoch = triplet_batches_per_epoch(dataset, mcfg.batch_size)
    X, sids = dataset.features, dataset.sample_ids
    steps = []
    step = 0
    for lr in lr_schedule(config.triplet_lr, config.lr_floor, config.triplet_epochs_per_rate):
        state.learning_rate = lr
        if regime == "subspace":
            scopes = list(subspace_schedule(partition, 1, per_epoch))
        else:
            scopes = [None] * per_epoch
        for m in scopes:
            la_params, la_head = _split_lookahead(params, head, state)
            fallback = False
            if regime == "ohnm":
                batch, neg_rows = sample_random_triplets(dataset, mcfg.batch_size, rng)
                rows = np.concatenate([batch.rows, neg_rows])
                B = len(batch)
                E, _ = forward_batch(la_params, X[rows])
                idx = np.arange(B)
                tri = make_triplets(E, idx, idx + B, idx + 2 * B, mcfg.margin)
                labels = np.concatenate([batch.labels, dataset.identities[neg_rows]])
            else:
                if regime == "subspace":
                    batch, fallback = sample_subspace_batch(partition, m, dataset, mcfg.batch_size, rng)
                else:
                    batch = sample_batch(dataset, mcfg.batch_size, rng)
                rows = batch.rows
                E, _ = forward_batch(la_params, X[rows])
                tri = batch_ohnm_select(batch, E, mcfg, sids[rows], apply_hinge=False)
                labels = batch.labels
            _, gm, gh, report = joint_objective(
                la_params, la_head, X[rows], tri.as_array(), labels if use_head else None, mcfg.margin, lam
            )
            params, head, state = _nag_update(params, head, gm, gh, state)
            report.fallback = fallback
            entry = {"step": step, "scope": batch.scope, "lr": lr, "top_k": mcfg.top_k, **report.as_dict()}
            steps.append(entry)
            if on_step is not None:
                on_step(entry)
            step += 1
    return TripletRun(params, head, steps)
