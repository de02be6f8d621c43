import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from subspace_triplet.errors import ConfigError
from subspace_triplet.estimators import AgreementFilter, HierarchicalRetriever, IdentityKMeans, TripletEmbedder
from subspace_triplet.retrieval import query_batch

SMALL = dict(embedding_dim=8, hidden_dims=(16,), cls_epochs_per_rate=3)


@pytest.fixture(scope="module")
def xy(small_data):
    names = np.array([f"id{c:03d}" for c in range(small_data.train.num_identities)])
    return small_data.train.features, names[small_data.train.identities], names


def test_params_and_clone():
    est = TripletEmbedder(n_subspaces=3, top_k=2)
    params = est.get_params()
    assert params["n_subspaces"] == 3 and params["top_k"] == 2
    other = clone(est).set_params(margin=0.2)
    assert other.margin == 0.2 and est.margin == 0.4
    assert IdentityKMeans(n_clusters=4).get_params()["n_clusters"] == 4
    assert AgreementFilter(strategy="fixed_ratio").get_params()["strategy"] == "fixed_ratio"
    assert HierarchicalRetriever(mode="flat").get_params() == {"mode": "flat", "confidence": "identity"}


def test_embedder_fit_transform(xy):
    X, y, names = xy
    est = TripletEmbedder(n_subspaces=3, batch_size=8, triplet_epochs_per_rate=1, random_state=0, **SMALL)
    est.set_params(cls_epochs_per_rate=3)
    E = est.fit(X, y).transform(X)
    assert E.shape == (len(X), 8)
    assert np.allclose(np.linalg.norm(E, axis=1), 1.0)
    assert est.partition_.M == 3 and est.training_steps_
    assert est.predict_proba(X[:4]).shape == (4, len(names))
    assert set(est.predict(X)) <= set(names)
    again = clone(est).fit(X, y)
    assert np.array_equal(again.transform(X), E)


def test_embedder_softmax_only(xy):
    X, y, _ = xy
    est = TripletEmbedder(mining="none", **SMALL).fit(X, y)
    assert est.partition_ is None and not hasattr(est, "training_steps_")


def test_embedder_validation(xy):
    X, y, _ = xy
    with pytest.raises(NotFittedError):
        TripletEmbedder().transform(X)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        TripletEmbedder(**SMALL).fit(bad, y)
    with pytest.raises(ValueError):
        TripletEmbedder(**SMALL).fit(X, y[:-1])
    with pytest.raises(ConfigError):
        TripletEmbedder(**SMALL).fit(X, np.zeros(len(X)))


def test_kmeans_estimator(rng):
    X = np.concatenate([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 8])
    km = IdentityKMeans(n_clusters=2, random_state=0).fit(X)
    assert len(set(km.labels_[:20])) == 1 and km.labels_[0] != km.labels_[-1]
    assert np.array_equal(km.predict(X), km.labels_)
    assert km.inertia_ == km.objective_trace_[-1] and km.n_iter_ >= 1
    assert np.array_equal(km.fit_predict(X), km.labels_)
    with pytest.raises(NotFittedError):
        IdentityKMeans().predict(X)


def test_agreement_filter(xy, small_data):
    X, y, _ = xy
    filt = AgreementFilter(**SMALL)
    Xc, yc = filt.fit_resample(X, y)
    assert len(Xc) == filt.report_.kept and filt.report_.kept + filt.report_.removed == len(X)
    mask = filt.keep_mask(X, y)
    assert mask.sum() == len(Xc)
    unknown = np.array(["nobody"] * 3)
    assert not filt.keep_mask(X[:3], unknown).any()
    ratio = AgreementFilter(strategy="fixed_ratio", ratio=0.5, **SMALL)
    Xr, yr = ratio.fit_resample(X, y)
    assert len(Xr) == 60 * 4
    with pytest.raises(ConfigError):
        AgreementFilter(strategy="vote", **SMALL).fit(X, y).keep_mask(X, y)


def test_retriever(rng):
    means = np.eye(4) * 3
    y = np.repeat(np.array(["a", "b", "c", "d"]), 5)
    X = means[np.repeat(np.arange(4), 5)] + 0.1 * rng.normal(size=(20, 4))
    ret = HierarchicalRetriever().fit(X, y, sample_ids=np.arange(100, 120))
    Q = means + 0.05 * rng.normal(size=(4, 4))
    assert ret.predict(Q).tolist() == ["a", "b", "c", "d"]
    assert ret.score(X, y) == 1.0
    assert np.array_equal(ret.decision_function(Q), query_batch(ret.index_, Q).confidence)
    flat = HierarchicalRetriever(mode="flat").fit(X, y)
    assert flat.predict(Q).tolist() == ["a", "b", "c", "d"]
    assert np.all(flat.query(Q).distance_ops == 20)
    with pytest.raises(NotFittedError):
        HierarchicalRetriever().predict(Q)
