"""Two-layer identity retrieval and precision/coverage evaluation.

Stage one finds the nearest identity centroid, stage two the nearest member
inside that identity, so a query costs ``C + N_c`` distance computations
instead of the ``N`` a flat scan needs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .embedding import LabeledDataset, centroids_from_embeddings, fuse_embeddings, l2_normalize_rows
from .errors import ConfigError, DimensionError, EmptyIndexError, IndexMismatchError
from .model import ModelParams, embed

CURVE_COLUMNS = ("threshold", "precision", "coverage", "M", "correct")


def _freeze(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    """Identity centroids plus member embeddings grouped by identity.

    Members are stored sorted by ``(identity, sample_id)``; identity ``c``
    owns rows ``offsets[j]:offsets[j+1]`` where ``identities[j] == c``.
    """

    identities: np.ndarray
    centroids: np.ndarray
    member_ids: np.ndarray
    member_identities: np.ndarray
    member_embeddings: np.ndarray
    model_tag: str = ""
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name, dt in (("identities", np.int64), ("member_ids", np.int64), ("member_identities", np.int64)):
            object.__setattr__(self, name, _freeze(getattr(self, name), dt))
        for name in ("centroids", "member_embeddings"):
            object.__setattr__(self, name, _freeze(getattr(self, name), np.float64))
        C, N = len(self.identities), len(self.member_ids)
        if C == 0 or N == 0:
            raise EmptyIndexError("an index needs at least one member")
        if self.centroids.shape[0] != C or self.member_embeddings.shape[0] != N:
            raise DimensionError("index arrays disagree in length")
        if np.any(np.diff(self.identities) <= 0):
            raise ValueError("index identities must be strictly ascending")
        order = np.lexsort((self.member_ids, self.member_identities))
        if not np.array_equal(order, np.arange(N)):
            raise ValueError("members must be sorted by (identity, sample_id)")
        starts = np.searchsorted(self.member_identities, self.identities, side="left")
        ends = np.searchsorted(self.member_identities, self.identities, side="right")
        if np.any(ends - starts == 0) or (ends - starts).sum() != N:
            raise ValueError("every member must belong to exactly one indexed identity")
        object.__setattr__(self, "offsets", _freeze(np.append(starts, N), np.int64))

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    def __len__(self) -> int:
        return len(self.member_ids)

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    @property
    def member_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def members(self, position: int):
        """``(sample_ids, embeddings)`` of the identity at centroid position ``position``."""
        s, e = self.offsets[position], self.offsets[position + 1]
        return self.member_ids[s:e], self.member_embeddings[s:e]


def index_from_embeddings(E, identities, sample_ids, model_tag: str = "", renormalize: bool = False) -> RetrievalIndex:
    E = np.asarray(E, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if len(E) == 0:
        raise EmptyIndexError("cannot index an empty dataset")
    present, cent, _ = centroids_from_embeddings(E, identities, int(identities.max()) + 1, renormalize)
    order = np.lexsort((sample_ids, identities))
    return RetrievalIndex(present, cent, sample_ids[order], identities[order], E[order], model_tag)


def build_index(dataset: LabeledDataset, params: ModelParams, model_tag: str = "", renormalize: bool = False) -> RetrievalIndex:
    """Embed every sample with ``params`` and group them by identity."""
    if len(dataset) == 0:
        raise EmptyIndexError("cannot index an empty dataset")
    return index_from_embeddings(embed(params, dataset.features), dataset.identities, dataset.sample_ids, model_tag, renormalize)


@dataclass(frozen=True)
class QueryResult:
    predicted_identity: int
    nearest_sample_id: int
    identity_distance: float
    sample_distance: float
    confidence: float
    distance_ops: int

    def to_dict(self) -> dict:
        return {
            "predicted_identity": self.predicted_identity,
            "nearest_sample_id": self.nearest_sample_id,
            "identity_distance": self.identity_distance,
            "sample_distance": self.sample_distance,
            "confidence": self.confidence,
            "distance_ops": self.distance_ops,
        }


def _row_distances(M, q) -> np.ndarray:
    diff = M - q
    return (diff * diff).sum(axis=-1)


def _argmin_by_key(d, keys) -> int:
    cand = np.flatnonzero(d == d.min())
    return int(cand[np.argmin(keys[cand])])


def confidence_score(identity_distance: float) -> float:
    return 1.0 - identity_distance / 4.0


def confidence(result: QueryResult, level: str = "identity") -> float:
    """Monotone map of a squared distance into ``(-inf, 1]``.

    ``level="identity"`` scores the query-to-centroid distance (default);
    ``level="sample"`` scores the nearest-sample distance instead.
    """
    if level == "identity":
        return confidence_score(result.identity_distance)
    if level == "sample":
        return confidence_score(result.sample_distance)
    raise ConfigError(f"unknown confidence level {level!r}")


def _check_query(index: RetrievalIndex, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.d,):
        raise DimensionError(f"query of shape {q.shape} for a {index.d}-dimensional index")
    return q


def retrieve_flat(index: RetrievalIndex, query, level: str = "identity") -> QueryResult:
    """Exhaustive nearest member; ties go to the lowest sample_id."""
    q = _check_query(index, query)
    d = _row_distances(index.member_embeddings, q)
    j = _argmin_by_key(d, index.member_ids)
    ident = int(index.member_identities[j])
    pos = int(np.searchsorted(index.identities, ident))
    id_dist = float(_row_distances(index.centroids[pos : pos + 1], q)[0])
    score = confidence_score(id_dist if level == "identity" else float(d[j]))
    return QueryResult(ident, int(index.member_ids[j]), id_dist, float(d[j]), score, len(index))


def retrieve_hierarchical(index: RetrievalIndex, query, level: str = "identity") -> QueryResult:
    """Nearest centroid (ties to the lowest identity), then nearest member within it."""
    q = _check_query(index, query)
    dc = _row_distances(index.centroids, q)
    pos = _argmin_by_key(dc, index.identities)
    ids, emb = index.members(pos)
    dm = _row_distances(emb, q)
    j = _argmin_by_key(dm, ids)
    score = confidence_score(float(dc[pos]) if level == "identity" else float(dm[j]))
    return QueryResult(int(index.identities[pos]), int(ids[j]), float(dc[pos]), float(dm[j]), score, index.num_identities + len(ids))


def _nearest_rows(Q, M, keys, chunk: int = 1024, slack: float = 1e-9):
    """Exact nearest row of ``M`` for every query row, ties to the lowest key.

    Candidates come from the fast dot-product expansion; every candidate
    within ``slack`` of the approximate minimum is re-scored with explicit
    differences, so results match the one-query path.
    """
    out = np.empty(len(Q), dtype=np.int64)
    dist = np.empty(len(Q))
    sq = np.einsum("ij,ij->i", M, M)
    for s in range(0, len(Q), chunk):
        block = Q[s : s + chunk]
        approx = sq[None, :] - 2.0 * block @ M.T + np.einsum("ij,ij->i", block, block)[:, None]
        lo = approx.min(axis=1, keepdims=True)
        for i, row in enumerate(approx):
            cand = np.flatnonzero(row <= lo[i, 0] + slack)
            d = _row_distances(M[cand], block[i])
            j = _argmin_by_key(d, keys[cand])
            out[s + i] = cand[j]
            dist[s + i] = d[j]
    return out, dist


@dataclass
class QueryBatch:
    """Vectorized counterpart of a list of :class:`QueryResult`."""

    predicted_identity: np.ndarray
    nearest_sample_id: np.ndarray
    identity_distance: np.ndarray
    sample_distance: np.ndarray
    confidence: np.ndarray
    distance_ops: np.ndarray

    def __len__(self) -> int:
        return len(self.predicted_identity)

    def result(self, i: int) -> QueryResult:
        return QueryResult(
            int(self.predicted_identity[i]),
            int(self.nearest_sample_id[i]),
            float(self.identity_distance[i]),
            float(self.sample_distance[i]),
            float(self.confidence[i]),
            int(self.distance_ops[i]),
        )

    def to_list(self) -> list[QueryResult]:
        return [self.result(i) for i in range(len(self))]


def query_batch(index: RetrievalIndex, Q, mode: str = "hierarchical", level: str = "identity") -> QueryBatch:
    """Answer many queries at once; each row agrees with the one-query functions."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if Q.shape[1] != index.d:
        raise DimensionError(f"queries of width {Q.shape[1]} for a {index.d}-dimensional index")
    n = len(Q)
    if mode == "flat":
        rows, sdist = _nearest_rows(Q, index.member_embeddings, index.member_ids)
        ident = index.member_identities[rows]
        pos = np.searchsorted(index.identities, ident)
        diff = Q - index.centroids[pos]
        idist = (diff * diff).sum(axis=-1)
        sids = index.member_ids[rows]
        ops = np.full(n, len(index), dtype=np.int64)
    elif mode == "hierarchical":
        pos, idist = _nearest_rows(Q, index.centroids, index.identities)
        ident = index.identities[pos]
        sids = np.empty(n, dtype=np.int64)
        sdist = np.empty(n)
        for p in np.unique(pos):
            qs = np.flatnonzero(pos == p)
            ids, emb = index.members(int(p))
            diff = Q[qs, None, :] - emb[None, :, :]
            d = (diff * diff).sum(axis=-1)
            for k, qi in enumerate(qs):
                j = _argmin_by_key(d[k], ids)
                sids[qi] = ids[j]
                sdist[qi] = d[k, j]
        ops = index.num_identities + index.member_counts[pos]
    else:
        raise ConfigError(f"unknown retrieval mode {mode!r}")
    if level not in ("identity", "sample"):
        raise ConfigError(f"unknown confidence level {level!r}")
    conf = 1.0 - (idist if level == "identity" else sdist) / 4.0
    return QueryBatch(ident.astype(np.int64), sids, idist, sdist, conf, ops.astype(np.int64))


@dataclass
class PrecisionCoverageCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    coverage: np.ndarray
    answered: np.ndarray
    correct: np.ndarray
    total: int
    undefined: np.ndarray  # True where nothing was answered and precision is reported as 1.0

    def rows(self):
        for t, p, c, m, k in zip(self.thresholds, self.precision, self.coverage, self.answered, self.correct):
            yield float(t), float(p), float(c), int(m), int(k)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for t, p, c, m, k in self.rows():
            w.writerow([repr(t), repr(p), repr(c), m, k])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "points": [dict(zip(CURVE_COLUMNS, r)) for r in self.rows()],
            "undefined": [bool(u) for u in self.undefined],
        }

    def coverage_non_increasing(self) -> bool:
        return bool(np.all(np.diff(self.coverage) <= 0))


def precision_coverage(predicted, truth, confidences, thresholds) -> PrecisionCoverageCurve:
    """Answer a query when its confidence is at least the threshold.

    ``truth`` entries that are not indexed identities (for instance -1 or
    labels beyond the index) can never be answered correctly.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    conf = np.asarray(confidences, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    n = len(predicted)
    if n == 0:
        raise ConfigError("evaluation set is empty")
    if len(truth) != n or len(conf) != n:
        raise DimensionError("predictions, truth and confidences disagree in length")
    if np.any(np.diff(t) < 0):
        raise ConfigError("thresholds must be sorted ascending")
    order = np.argsort(conf, kind="stable")
    cs = conf[order]
    hit = np.cumsum((predicted == truth)[order][::-1])[::-1]  # correct among order[i:]
    first = np.searchsorted(cs, t, side="left")  # first sorted position with conf >= t
    answered = n - first
    correct = np.where(first < n, hit[np.minimum(first, n - 1)], 0)
    undefined = answered == 0
    precision = np.where(undefined, 1.0, correct / np.maximum(answered, 1))
    return PrecisionCoverageCurve(t, precision, answered / n, answered, correct, n, undefined)


def curve_from_results(results, truth, thresholds, level: str = "identity") -> PrecisionCoverageCurve:
    if isinstance(results, QueryBatch):
        pred, conf = results.predicted_identity, results.confidence
    else:
        pred = [r.predicted_identity for r in results]
        conf = [confidence(r, level) for r in results]
    return precision_coverage(pred, truth, conf, thresholds)


def coverage_at_precision(curve: PrecisionCoverageCurve, p: float) -> float:
    """Largest coverage among curve points whose precision is at least ``p``.

    Points where nothing was answered carry precision 1.0 by convention and
    coverage 0, so they never raise the result above 0.
    """
    if not 0 < p <= 1:
        raise ConfigError("precision target must lie in (0, 1]")
    ok = curve.precision >= p
    return float(curve.coverage[ok].max()) if ok.any() else 0.0


def default_thresholds(count: int = 101, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return np.linspace(low, high, count)


def fused_index(a: RetrievalIndex, b: RetrievalIndex) -> RetrievalIndex:
    """Average two indices built over the same samples."""
    if not (
        np.array_equal(a.member_ids, b.member_ids)
        and np.array_equal(a.member_identities, b.member_identities)
        and np.array_equal(a.identities, b.identities)
    ):
        raise IndexMismatchError("indices cover different samples")
    if a.d != b.d:
        raise IndexMismatchError("indices have different embedding widths")
    tag = a.model_tag if a.model_tag == b.model_tag else f"fused({a.model_tag},{b.model_tag})"
    return RetrievalIndex(
        a.identities,
        fuse_embeddings(a.centroids, b.centroids),
        a.member_ids,
        a.member_identities,
        fuse_embeddings(a.member_embeddings, b.member_embeddings),
        tag,
    )


def renormalized(index: RetrievalIndex) -> RetrievalIndex:
    """Same index with unit-norm centroids."""
    return RetrievalIndex(
        index.identities, l2_normalize_rows(index.centroids), index.member_ids,
        index.member_identities, index.member_embeddings, index.model_tag,
    )
