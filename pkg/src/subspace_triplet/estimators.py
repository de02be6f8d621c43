"""scikit-learn style wrappers around the training, clustering, cleaning and retrieval code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cleaning import cleaning_report, fixed_ratio_mask, train_initial_classifier
from .embedding import LabeledDataset, pairwise_squared_distances
from .errors import ConfigError
from .model import embed, predict_proba
from .retrieval import index_from_embeddings, query_batch
from .subspace import identity_centroid_matrix, kmeans, random_partition
from .training import TrainConfig, train_classifier, train_triplet


def _encode(y):
    classes, codes = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ConfigError("need at least two identities")
    return classes, codes.astype(np.int64)


def _dataset(X, codes, n_classes, sample_ids=None):
    ids = np.arange(len(X)) if sample_ids is None else np.asarray(sample_ids)
    return LabeledDataset(ids, codes, X, n_classes)


class _TrainParams:
    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            hidden_dims=tuple(self.hidden_dims),
            embedding_dim=self.embedding_dim,
            cls_epochs_per_rate=self.cls_epochs_per_rate,
            triplet_epochs_per_rate=getattr(self, "triplet_epochs_per_rate", 2),
            triplet_batch_size=getattr(self, "batch_size", 32),
            margin=getattr(self, "margin", 0.4),
            top_k=getattr(self, "top_k", 3),
            joint_lambda=getattr(self, "joint_lambda", 1.0),
        )


class TripletEmbedder(_TrainParams, TransformerMixin, BaseEstimator):
    """Softmax pre-training followed by triplet fine-tuning.

    ``mining`` is ``"subspace"`` (batches confined to one of ``n_subspaces``
    identity clusters), ``"batch"``, ``"ohnm"`` or ``"none"`` (classifier
    only). ``transform`` returns unit-norm embeddings.
    """

    def __init__(self, embedding_dim=16, hidden_dims=(64,), mining="subspace", partition="kmeans",
                 n_subspaces=10, margin=0.4, top_k=3, batch_size=32, joint_lambda=1.0,
                 cls_epochs_per_rate=3, triplet_epochs_per_rate=2, random_state=0):
        self.embedding_dim = embedding_dim
        self.hidden_dims = hidden_dims
        self.mining = mining
        self.partition = partition
        self.n_subspaces = n_subspaces
        self.margin = margin
        self.top_k = top_k
        self.batch_size = batch_size
        self.joint_lambda = joint_lambda
        self.cls_epochs_per_rate = cls_epochs_per_rate
        self.triplet_epochs_per_rate = triplet_epochs_per_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = _encode(y)
        data = _dataset(X, codes, len(self.classes_))
        cfg = self._train_config()
        seed = self.random_state
        clf = train_classifier(data, cfg, seed)
        params, head = clf.params, clf.head
        self.partition_ = None
        if self.mining != "none":
            part = None
            if self.mining == "subspace":
                ids, cent = identity_centroid_matrix(data, params)
                if self.partition == "random":
                    part = random_partition(len(ids), self.n_subspaces, seed, ids, cent, len(self.classes_))
                else:
                    part, _ = kmeans(cent, self.n_subspaces, 100, seed, ids, len(self.classes_))
                self.partition_ = part
            run = train_triplet(params, head, data, cfg, self.mining, part, seed)
            params = run.params
            head = run.head if run.head is not None else head
            self.training_steps_ = run.steps
        self.params_, self.head_ = params, head
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return embed(self.params_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        return predict_proba(self.head_, self.transform(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class IdentityKMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-means with k-means++ seeding, recording the objective per iteration."""

    def __init__(self, n_clusters=10, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        part, trace = kmeans(X, self.n_clusters, self.max_iter, self.random_state)
        self.labels_ = part.assignment.copy()
        self.cluster_centers_ = part.cluster_centers
        self.objective_trace_ = list(trace.objective)
        self.inertia_ = self.objective_trace_[-1] if self.objective_trace_ else 0.0
        self.n_iter_ = trace.iterations
        self.partition_ = part
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.argmin(pairwise_squared_distances(X, self.cluster_centers_), axis=1)


class AgreementFilter(_TrainParams, BaseEstimator):
    """Label-noise filter: keep samples the classifier assigns to their own label.

    ``strategy="fixed_ratio"`` instead keeps the ``ratio`` most confident
    samples of every identity. ``fit_resample`` returns the kept rows.
    """

    def __init__(self, strategy="agreement", ratio=0.85, embedding_dim=16, hidden_dims=(64,),
                 cls_epochs_per_rate=3, random_state=0):
        self.strategy = strategy
        self.ratio = ratio
        self.embedding_dim = embedding_dim
        self.hidden_dims = hidden_dims
        self.cls_epochs_per_rate = cls_epochs_per_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = _encode(y)
        self.classifier_ = train_initial_classifier(_dataset(X, codes, len(self.classes_)), self._train_config(), self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def keep_mask(self, X, y):
        check_is_fitted(self, "classifier_")
        X, y = check_X_y(X, y, dtype=np.float64)
        known = np.isin(y, self.classes_)
        codes = np.where(known, np.searchsorted(self.classes_, y), 0)
        data = _dataset(X, codes, len(self.classes_))
        if self.strategy == "agreement":
            pred = np.argmax(predict_proba(self.classifier_.head, embed(self.classifier_.params, X)), axis=1)
            return (pred == codes) & known
        if self.strategy == "fixed_ratio":
            return fixed_ratio_mask(data, self.classifier_, self.ratio) & known
        raise ConfigError(f"unknown strategy {self.strategy!r}")

    def fit_resample(self, X, y):
        self.fit(X, y)
        keep = self.keep_mask(X, y)
        codes = np.searchsorted(self.classes_, np.asarray(y))
        self.report_ = cleaning_report(_dataset(np.asarray(X, dtype=np.float64), codes, len(self.classes_)), keep)
        return np.asarray(X)[keep], np.asarray(y)[keep]


class HierarchicalRetriever(ClassifierMixin, BaseEstimator):
    """Identity retrieval over stored embeddings: nearest centroid, then nearest member.

    ``mode="flat"`` scans every stored embedding instead.
    ``decision_function`` returns the confidence score.
    """

    def __init__(self, mode="hierarchical", confidence="identity"):
        self.mode = mode
        self.confidence = confidence

    def fit(self, X, y, sample_ids=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        sids = np.arange(len(X)) if sample_ids is None else np.asarray(sample_ids)
        self.index_ = index_from_embeddings(X, codes, sids)
        self.n_features_in_ = X.shape[1]
        return self

    def query(self, X):
        check_is_fitted(self, "index_")
        return query_batch(self.index_, check_array(X, dtype=np.float64), self.mode, self.confidence)

    def predict(self, X):
        ident = self.query(X).predicted_identity
        return self.classes_[ident]

    def decision_function(self, X):
        return self.query(X).confidence
