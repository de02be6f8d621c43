"""Label-noise removal with a classifier trained on the noisy data itself.

The recipe: train a classifier on everything, keep only samples whose
predicted identity matches their label, retrain on the survivors. The
fixed-ratio baseline instead keeps the same fraction of every identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import LabeledDataset
from .errors import CleaningCollapseError, ConfigError
from .model import embed, predict_proba
from .training import Classifier, TrainConfig, train_classifier


@dataclass
class CleaningReport:
    kept: int
    removed: int
    removed_per_identity: dict = field(default_factory=dict)
    noise_precision: float | None = None
    noise_recall: float | None = None

    def to_dict(self) -> dict:
        d = {
            "kept": self.kept,
            "removed": self.removed,
            "removed_per_identity": {str(k): v for k, v in sorted(self.removed_per_identity.items())},
        }
        if self.noise_precision is not None:
            d["noise_precision"] = self.noise_precision
            d["noise_recall"] = self.noise_recall
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def cleaning_report(dataset: LabeledDataset, keep, noise_flags=None) -> CleaningReport:
    """Summarize a keep-mask; precision/recall treat "removed" as the noise prediction."""
    keep = np.asarray(keep, dtype=bool)
    removed = ~keep
    ids, counts = np.unique(dataset.identities[removed], return_counts=True)
    report = CleaningReport(int(keep.sum()), int(removed.sum()), {int(i): int(c) for i, c in zip(ids, counts)})
    if noise_flags is not None:
        noise = np.asarray(noise_flags, dtype=bool)
        hit = int(np.count_nonzero(removed & noise))
        report.noise_precision = hit / report.removed if report.removed else 1.0
        report.noise_recall = hit / int(noise.sum()) if noise.any() else 1.0
    return report


def _distinct_identities(dataset: LabeledDataset) -> int:
    return len(np.unique(dataset.identities))


def train_initial_classifier(dataset: LabeledDataset, config: TrainConfig, seed=0, subset_fraction: float = 1.0) -> Classifier:
    """Softmax classifier on all the data, or on a seeded per-sample subset of it."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if _distinct_identities(dataset) < 2 or dataset.num_identities < 2:
        raise ConfigError("classification over a single identity is degenerate")
    if not 0 < subset_fraction <= 1:
        raise ConfigError("subset_fraction must lie in (0, 1]")
    if subset_fraction < 1:
        rng = np.random.default_rng([seed, 1])
        n = max(1, int(round(subset_fraction * len(dataset))))
        dataset = dataset.subset(np.sort(rng.choice(len(dataset), size=n, replace=False)))
    return train_classifier(dataset, config, seed)


def class_probabilities(dataset: LabeledDataset, classifier: Classifier) -> np.ndarray:
    return predict_proba(classifier.head, embed(classifier.params, dataset.features))


def filter_by_agreement(dataset: LabeledDataset, classifier: Classifier, noise_flags=None):
    """Keep samples whose argmax class equals their label (ties go to the lowest class).

    Returns ``(clean_dataset, CleaningReport)``; survivors keep their order.
    """
    if classifier.head.num_classes < dataset.num_identities:
        raise ConfigError("classifier does not cover every identity")
    pred = np.argmax(class_probabilities(dataset, classifier), axis=1)
    keep = pred == dataset.identities
    return dataset.subset(keep), cleaning_report(dataset, keep, noise_flags)


def fixed_ratio_mask(dataset: LabeledDataset, classifier: Classifier, ratio: float) -> np.ndarray:
    if not 0 < ratio <= 1:
        raise ConfigError("ratio must lie in (0, 1]")
    proba = class_probabilities(dataset, classifier)
    conf = proba[np.arange(len(dataset)), dataset.identities]
    keep = np.zeros(len(dataset), dtype=bool)
    for rows in dataset.members_by_identity().values():
        n_keep = math.ceil(ratio * len(rows) - 1e-12)
        order = np.lexsort((dataset.sample_ids[rows], -conf[rows]))
        keep[rows[order[:n_keep]]] = True
    return keep


def fixed_ratio_baseline(dataset: LabeledDataset, classifier: Classifier, ratio: float) -> LabeledDataset:
    """Within each identity keep the ``ceil(ratio * N_c)`` most confident samples."""
    return dataset.subset(fixed_ratio_mask(dataset, classifier, ratio))


def retrain_clean(clean: LabeledDataset, config: TrainConfig, seed=0, init: Classifier | None = None) -> Classifier:
    """Fresh classifier on the cleaned data (or continued from ``init``)."""
    if _distinct_identities(clean) < 2:
        raise CleaningCollapseError(f"only {_distinct_identities(clean)} identities survived cleaning")
    return train_classifier(clean, config, seed, init)


def classification_accuracy(dataset: LabeledDataset, classifier: Classifier) -> float:
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    pred = np.argmax(class_probabilities(dataset, classifier), axis=1)
    return float(np.mean(pred == dataset.identities))
