"""Hierarchically clustered synthetic identity data.

Supercluster means sit on the unit sphere in feature space; identity means
scatter around their supercluster mean, and samples scatter around their
identity mean. Identities that share a supercluster are the "similar
identities" that subspace clustering should discover.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .embedding import LabeledDataset
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int = 1000
    samples_per_identity: int | tuple = 20
    heldout_per_identity: int = 5
    d_in: int = 32
    num_superclusters: int = 10
    sigma_within: float = 0.05
    sigma_between: float = 0.06
    label_flip_rate: float = 0.0
    noisy_identity_fraction: float = 0.0
    unseen_identities: int = 0
    seed: int = 0

    def validate(self):
        if not 0 <= self.label_flip_rate < 1:
            raise ConfigError("label_flip_rate must lie in [0, 1)")
        if not 0 <= self.noisy_identity_fraction <= 1:
            raise ConfigError("noisy_identity_fraction must lie in [0, 1]")
        if self.num_superclusters < 1 or self.num_superclusters > self.num_identities:
            raise ConfigError("need 1 <= num_superclusters <= num_identities")
        if self.sigma_within <= 0 or self.sigma_between <= 0:
            raise ConfigError("spreads must be positive")
        if self.num_identities < 1 or self.d_in < 1 or self.heldout_per_identity < 0 or self.unseen_identities < 0:
            raise ConfigError("sizes must be positive")
        lo, hi = self._count_range()
        if lo < 1 or hi < lo:
            raise ConfigError("samples_per_identity must be >= 1")

    def _count_range(self):
        s = self.samples_per_identity
        if isinstance(s, (tuple, list)):
            return int(s[0]), int(s[1])
        return int(s), int(s)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["samples_per_identity"], tuple):
            d["samples_per_identity"] = list(d["samples_per_identity"])
        return d


@dataclass(eq=False)
class SyntheticData:
    train: LabeledDataset  # observed (possibly noisy) labels
    true_identities: np.ndarray  # generator identity of each train row
    noise_flags: np.ndarray  # True where the observed label was flipped
    heldout: LabeledDataset  # clean held-out samples of the training identities
    unseen: LabeledDataset  # samples of identities absent from training; labels >= C
    supercluster_of: np.ndarray  # per identity, covering unseen identities too
    identity_means: np.ndarray


def _flip_labels(true_ids, C, rate, noisy_fraction, rng):
    n = len(true_ids)
    labels = true_ids.copy()
    flags = np.zeros(n, dtype=bool)
    n_flip = int(round(rate * n))
    if n_flip == 0 or C < 2:
        return labels, flags
    rows = rng.choice(n, size=n_flip, replace=False)
    if noisy_fraction > 0:
        n_noisy = max(2, int(round(noisy_fraction * C)))
        targets = np.sort(rng.choice(C, size=n_noisy, replace=False))
    else:
        targets = np.arange(C)
    for r in np.sort(rows):
        pool = targets[targets != true_ids[r]]
        labels[r] = pool[rng.integers(len(pool))]
    flags[rows] = True
    return labels, flags


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, U, S, d = spec.num_identities, spec.unseen_identities, spec.num_superclusters, spec.d_in

    sc_means = rng.normal(size=(S, d))
    sc_means /= np.linalg.norm(sc_means, axis=1, keepdims=True)
    total = C + U
    # every supercluster receives identities; the rest are spread at random
    sc_of = rng.permutation(np.concatenate([np.arange(S), rng.integers(S, size=total - S)]))
    id_means = sc_means[sc_of] + spec.sigma_between * rng.normal(size=(total, d))

    lo, hi = spec._count_range()
    counts = rng.integers(lo, hi + 1, size=C)
    true_ids = np.repeat(np.arange(C), counts)
    X = id_means[true_ids] + spec.sigma_within * rng.normal(size=(len(true_ids), d))
    labels, flags = _flip_labels(true_ids, C, spec.label_flip_rate, spec.noisy_identity_fraction, rng)
    N = len(true_ids)
    train = LabeledDataset(np.arange(N), labels, X, C)

    h = spec.heldout_per_identity
    h_ids = np.repeat(np.arange(C), h)
    Xh = id_means[h_ids] + spec.sigma_within * rng.normal(size=(len(h_ids), d))
    heldout = LabeledDataset(np.arange(N, N + len(h_ids)), h_ids, Xh, C)

    u_ids = np.repeat(np.arange(C, C + U), h)
    Xu = id_means[u_ids] + spec.sigma_within * rng.normal(size=(len(u_ids), d)) if len(u_ids) else np.zeros((0, d))
    start = N + len(h_ids)
    unseen = LabeledDataset(np.arange(start, start + len(u_ids)), u_ids, Xu, C + U)

    return SyntheticData(train, true_ids, flags, heldout, unseen, sc_of, id_means)


def make_pairs(dataset: LabeledDataset, n_same: int, n_diff: int, rng):
    """Labeled verification pairs: ``(rows_a, rows_b, same)`` arrays."""
    rng = np.random.default_rng(rng)
    groups = {c: m for c, m in dataset.members_by_identity().items() if len(m) >= 2}
    if not groups and n_same:
        raise ConfigError("no identity has two samples to form a positive pair")
    ids = np.array(sorted(groups))
    a, b = [], []
    for _ in range(n_same):
        members = groups[int(ids[rng.integers(len(ids))])]
        i, j = rng.choice(len(members), size=2, replace=False)
        a.append(members[i])
        b.append(members[j])
    n = len(dataset)
    for _ in range(n_diff):
        while True:
            i, j = rng.integers(n, size=2)
            if dataset.identities[i] != dataset.identities[j]:
                break
        a.append(i)
        b.append(j)
    same = np.concatenate([np.ones(n_same, bool), np.zeros(n_diff, bool)])
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64), same
