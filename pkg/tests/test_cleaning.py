import json

import numpy as np
import pytest

from subspace_triplet.cleaning import (
    classification_accuracy,
    cleaning_report,
    filter_by_agreement,
    fixed_ratio_baseline,
    fixed_ratio_mask,
    retrain_clean,
    train_initial_classifier,
)
from subspace_triplet.embedding import LabeledDataset
from subspace_triplet.errors import CleaningCollapseError, ConfigError
from subspace_triplet.model import ModelParams, SoftmaxHead
from subspace_triplet.training import Classifier, TrainConfig

CFG = TrainConfig(hidden_dims=(8,), embedding_dim=4, cls_epochs_per_rate=3, cls_batch_size=16)


def _oracle_classifier(C):
    """Identity map into C dimensions with a head that reads off the largest coordinate."""
    params = ModelParams(((np.eye(C), np.zeros(C)),))
    return Classifier(params, SoftmaxHead(np.eye(C), np.zeros(C), 16.0))


def _separable(rng, C=3, per=10, flips=()):
    true = np.repeat(np.arange(C), per)
    X = np.eye(C)[true] + 0.05 * rng.normal(size=(len(true), C))
    labels = true.copy()
    for r in flips:
        labels[r] = (true[r] + 1) % C
    flags = labels != true
    return LabeledDataset(np.arange(len(true)), labels, X, C), flags


def test_perfect_predictor_removes_exactly_the_flips(rng):
    data, flags = _separable(rng, flips=(0, 11, 12, 25))
    clean, report = filter_by_agreement(data, _oracle_classifier(3), flags)
    assert np.array_equal(np.isin(data.sample_ids, clean.sample_ids), ~flags)
    assert report.kept == 26 and report.removed == 4
    assert report.removed_per_identity == {0: 1, 1: 1, 2: 2}
    assert report.noise_precision == 1.0 and report.noise_recall == 1.0


def test_second_pass_removes_nothing(rng):
    data, _ = _separable(rng, flips=(3, 17))
    clf = _oracle_classifier(3)
    once, _ = filter_by_agreement(data, clf)
    twice, report = filter_by_agreement(once, clf)
    assert report.removed == 0
    assert np.array_equal(once.sample_ids, twice.sample_ids)


def test_trained_classifier_on_separable_data(rng):
    data, flags = _separable(rng, per=20, flips=(1, 22, 45))
    clf = train_initial_classifier(data, CFG, seed=0)
    clean, report = filter_by_agreement(data, clf, flags)
    assert report.noise_recall == 1.0
    assert report.removed <= 6
    assert classification_accuracy(clean, retrain_clean(clean, CFG, seed=0)) == 1.0


def test_report_json(rng):
    data, flags = _separable(rng, flips=(0,))
    report = cleaning_report(data, ~flags, flags)
    d = json.loads(report.to_json())
    assert d == {"kept": 29, "removed": 1, "removed_per_identity": {"1": 1},
                 "noise_precision": 1.0, "noise_recall": 1.0}
    assert "noise_precision" not in cleaning_report(data, ~flags).to_dict()


def test_report_without_removals_or_noise(rng):
    data, flags = _separable(rng)
    report = cleaning_report(data, np.ones(len(data), bool), flags)
    assert report.noise_precision == 1.0 and report.noise_recall == 1.0


@pytest.mark.parametrize("ratio,expected", [(0.5, 5), (0.85, 9), (1.0, 10), (0.01, 1)])
def test_fixed_ratio_keeps_ceil_per_identity(rng, ratio, expected):
    data, _ = _separable(rng)
    kept = fixed_ratio_baseline(data, _oracle_classifier(3), ratio)
    assert np.all(np.bincount(kept.identities, minlength=3) == expected)


def test_fixed_ratio_prefers_confident_samples(rng):
    data, flags = _separable(rng, flips=(2, 14))
    mask = fixed_ratio_mask(data, _oracle_classifier(3), 0.9)
    assert not mask[flags].any()
    with pytest.raises(ConfigError):
        fixed_ratio_mask(data, _oracle_classifier(3), 0.0)


def test_subset_training_is_seeded(rng):
    data, _ = _separable(rng, per=12)
    a = train_initial_classifier(data, CFG, seed=3, subset_fraction=0.5)
    b = train_initial_classifier(data, CFG, seed=3, subset_fraction=0.5)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
    with pytest.raises(ConfigError):
        train_initial_classifier(data, CFG, subset_fraction=0.0)


def test_degenerate_inputs(rng):
    data, _ = _separable(rng)
    with pytest.raises(ConfigError):
        train_initial_classifier(data.subset(data.identities == 0), CFG)
    with pytest.raises(ConfigError):
        train_initial_classifier(data.subset(np.zeros(len(data), bool)), CFG)
    with pytest.raises(CleaningCollapseError):
        retrain_clean(data.subset(data.identities == 1), CFG)
    with pytest.raises(ConfigError):
        classification_accuracy(data.subset(np.zeros(len(data), bool)), _oracle_classifier(3))


def test_classifier_must_cover_identities(rng):
    data, _ = _separable(rng, C=4)
    with pytest.raises(ConfigError):
        filter_by_agreement(data, _oracle_classifier(3))
