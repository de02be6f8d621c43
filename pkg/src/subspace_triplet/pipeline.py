"""End-to-end experiments on synthetic identity data.

The pipeline: initial classifier, agreement cleaning, classifier retrained
on the clean set, identity centroids, subspace partition, triplet
fine-tuning, retrieval index, evaluation. Stages up to the retrained
classifier are shared by every cell of an ablation.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cleaning import (
    CleaningReport,
    classification_accuracy,
    cleaning_report,
    filter_by_agreement,
    retrain_clean,
    train_initial_classifier,
)
from .config import PipelineConfig
from .embedding import LabeledDataset
from .errors import ConfigError, TripletError
from .evaluation import best_threshold_accuracy
from .formats import dumps, write_dataset, write_json, write_model, write_index, write_partition
from .model import ModelParams, embed
from .retrieval import (
    CURVE_COLUMNS,
    PrecisionCoverageCurve,
    build_index,
    coverage_at_precision,
    default_thresholds,
    precision_coverage,
    query_batch,
)
from .subspace import SubspacePartition, identity_centroid_matrix, kmeans, random_partition
from .synthetic import SyntheticData, generate_synthetic, make_pairs
from .training import Classifier, train_triplet

PRECISION_TARGETS = (0.95, 0.99)


class PipelineError(TripletError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _Stages:
    def __init__(self, timings: dict):
        self.timings = timings

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


@dataclass
class ExperimentRecord:
    """Everything a run produced. ``timings`` is wall-clock and kept out of :meth:`to_dict`."""

    config: dict
    stages: dict
    pair_accuracy: float
    pair_threshold: float
    curves: dict
    coverage: dict
    active_series: list
    timings: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "config": self.config,
            "versions": self.versions,
            "stages": self.stages,
            "pair_accuracy": self.pair_accuracy,
            "pair_threshold": self.pair_threshold,
            "coverage_at_precision": self.coverage,
            "curves": {k: c.to_dict() for k, c in sorted(self.curves.items())},
            "active_series": self.active_series,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    def to_json(self) -> str:
        return dumps(self.to_dict())


@dataclass
class PreparedData:
    """Shared state after the classifier stages."""

    data: SyntheticData
    clean: LabeledDataset
    classifier: Classifier
    stages: dict
    timings: dict


def _versions() -> dict:
    return {"package": __version__, "numpy": np.__version__}


def pair_verification(params: ModelParams, dataset: LabeledDataset, pairs) -> tuple[float, float]:
    """Best-threshold accuracy of squared embedding distance on ``(rows_a, rows_b, same)`` pairs."""
    a, b, same = pairs
    if len(a) == 0:
        raise ConfigError("pair list is empty")
    E = embed(params, dataset.features)
    diff = E[np.asarray(a)] - E[np.asarray(b)]
    return best_threshold_accuracy(np.einsum("ij,ij->i", diff, diff), same)


def evaluation_queries(data: SyntheticData, seed: int):
    """Held-out samples of indexed identities plus out-of-index samples making up 25% of the set.

    Returns ``(features, truth)`` where out-of-index rows carry truth ``-1``.
    """
    held = data.heldout
    n_out = int(round(len(held) / 3))
    if n_out > len(data.unseen):
        raise ConfigError("not enough unseen identities for a 25% out-of-index share")
    rows = np.sort(np.random.default_rng([seed, 5]).permutation(len(data.unseen))[:n_out])
    X = np.concatenate([held.features, data.unseen.features[rows]])
    truth = np.concatenate([held.identities, np.full(n_out, -1, dtype=np.int64)])
    return X, truth


def prepare(config: PipelineConfig, data: SyntheticData | None = None, out_dir=None) -> PreparedData:
    """Data, initial classifier, cleaning and the retrained classifier."""
    config.validate()
    timings: dict = {}
    st = _Stages(timings)
    tcfg = config.train_config()
    if data is None:
        data = st.run("data", generate_synthetic, config.synthetic_spec())
    stages = {"data": {"train": len(data.train), "heldout": len(data.heldout), "unseen": len(data.unseen),
                       "label_noise": int(data.noise_flags.sum())}}

    initial = st.run("initial_classifier", train_initial_classifier, data.train, tcfg, config.seed + 1,
                     config.init_subset_fraction)
    stages["initial_classifier"] = {
        "history": initial.history,
        "train_accuracy": st.run("initial_classifier", classification_accuracy, data.train, initial),
    }

    if config.cleaning:
        clean, report = st.run("cleaning", filter_by_agreement, data.train, initial, data.noise_flags)
        init = initial if config.retrain_from_init else None
        same_data = report.removed == 0 and config.init_subset_fraction == 1 and init is None
        # a retrain on unchanged data with the same seed reproduces the initial model
        classifier = initial if same_data else st.run("retrain", retrain_clean, clean, tcfg, config.seed + 1, init)
    else:
        clean = data.train
        report = cleaning_report(data.train, np.ones(len(data.train), bool), data.noise_flags)
        classifier = initial
    stages["cleaning"] = report.to_dict()
    stages["classifier"] = {
        "history": classifier.history,
        "heldout_accuracy": st.run("retrain", classification_accuracy, data.heldout, classifier),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(out / "clean.tfds", clean)
        write_json(out / "cleaning_report.json", report.to_dict())
        write_model(out / "classifier.tfmd", classifier.params, classifier.head, {"stage": "classifier"})
    return PreparedData(data, clean, classifier, stages, timings)


def build_partition(config: PipelineConfig, prepared: PreparedData, M: int | None = None) -> SubspacePartition:
    M = config.num_subspaces if M is None else M
    ids, cent = identity_centroid_matrix(prepared.clean, prepared.classifier.params, config.renormalize_centroids)
    C = prepared.clean.num_identities
    if config.partition == "random":
        return random_partition(len(ids), M, config.seed + 2, ids, cent, C)
    part, _ = kmeans(cent, M, config.kmeans_max_iter, config.seed + 2, ids, C)
    return part


def _partition_summary(part: SubspacePartition, data: SyntheticData) -> dict:
    d = part.to_dict()
    del d["assignment"]
    # share of identities whose subspace's majority supercluster matches their own
    hit = 0
    for m in range(part.M):
        sc = data.supercluster_of[part.members(m)]
        if len(sc):
            hit += int(np.bincount(sc).max())
    d["supercluster_purity"] = hit / max(1, int((part.assignment >= 0).sum()))
    return d


def finish(config: PipelineConfig, prepared: PreparedData, out_dir=None) -> ExperimentRecord:
    """Partition, triplet training, index and evaluation on top of :func:`prepare`."""
    config.validate()
    timings = dict(prepared.timings)
    st = _Stages(timings)
    stages = dict(prepared.stages)
    data, clean, clf = prepared.data, prepared.clean, prepared.classifier
    tcfg = config.train_config()

    params = clf.params
    active = []
    part = None
    if config.mining != "none":
        if config.mining == "subspace":
            part = st.run("partition", build_partition, config, prepared)
            stages["partition"] = _partition_summary(part, data)
        run = st.run("triplet", train_triplet, clf.params, clf.head, clean, tcfg, config.mining, part, config.seed + 3)
        params = run.params
        active = [[s["step"], s["active_triplets"], s["num_triplets"], s["triplet_loss"], s["softmax_loss"]] for s in run.steps]
        stages["triplet"] = {
            "steps": len(run.steps),
            "mean_active": float(np.mean([s["active_triplets"] for s in run.steps])),
            "final_triplet_loss": run.steps[-1]["triplet_loss"],
            "final_softmax_loss": run.steps[-1]["softmax_loss"],
            "fallback_batches": int(sum(s["fallback"] for s in run.steps)),
            "loss_reports": run.steps,
        }

    index = st.run("index", build_index, clean, params, f"seed{config.seed}-{config.mining}")
    pairs = make_pairs(data.heldout, config.verification_pairs, config.verification_pairs, config.seed + 4)
    acc, thr = st.run("evaluate", pair_verification, params, data.heldout, pairs)
    curves, coverage = {}, {}
    if len(data.unseen):
        X, truth = evaluation_queries(data, config.seed)
        res = st.run("evaluate", query_batch, index, embed(params, X), config.retrieval_mode, config.confidence)
        thresholds = default_thresholds(config.num_thresholds)
        curve = precision_coverage(res.predicted_identity, truth, res.confidence, thresholds)
        curves["retrieval"] = curve
        coverage = {f"{p:g}": coverage_at_precision(curve, p) for p in PRECISION_TARGETS}
        stages["retrieval"] = {
            "queries": len(truth),
            "out_of_index": int((truth < 0).sum()),
            "mean_distance_ops": float(res.distance_ops.mean()),
            "flat_distance_ops": len(index),
        }
    if len(data.unseen) >= 2:
        upairs = make_pairs(data.unseen, config.verification_pairs, config.verification_pairs, config.seed + 4)
        stages["unseen_pair_accuracy"] = pair_verification(params, data.unseen, upairs)[0]

    record = ExperimentRecord(config.snapshot(), stages, acc, thr, curves, coverage, active, timings, _versions())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if part is not None:
            write_partition(out / "partition.json", part)
        write_model(out / "model.tfmd", params, None, {"stage": "triplet", "mining": config.mining})
        write_index(out / "index.tfix", index)
        (out / "record.json").write_text(record.to_json())
        write_json(out / "timings.json", timings)
    return record


def run_pipeline(config: PipelineConfig, data: SyntheticData | None = None, out_dir=None) -> ExperimentRecord:
    """Run every stage in order; checkpoints go to ``out_dir`` when given."""
    return finish(config, prepare(config, data, out_dir), out_dir)


ABLATION_ROWS = ("softmax", "batch", "random", "kmeans-half", "kmeans", "kmeans-double")
ABLATION_COLUMNS = (
    "row", "mining", "partition", "M", "joint_lambda", "pair_accuracy", "unseen_pair_accuracy",
    "coverage_at_0.95", "coverage_at_0.99", "mean_active",
)


def ablation_configs(base: PipelineConfig, rows=ABLATION_ROWS, lambdas=None):
    """Cell configs keyed ``row/lambda``; the joint weight defaults to the base one (or 1)."""
    joint = base.joint_lambda if base.joint_lambda > 0 else 1.0
    lambdas = (0.0, joint) if lambdas is None else lambdas
    M = base.num_subspaces
    shapes = {
        "softmax": dict(mining="none"),
        "batch": dict(mining="batch", num_subspaces=1),
        "random": dict(mining="subspace", partition="random", num_subspaces=M),
        "kmeans-half": dict(mining="subspace", partition="kmeans", num_subspaces=max(1, M // 2)),
        "kmeans": dict(mining="subspace", partition="kmeans", num_subspaces=M),
        "kmeans-double": dict(mining="subspace", partition="kmeans", num_subspaces=2 * M),
    }
    cells = []
    for row in rows:
        for lam in lambdas:
            cells.append((f"{row}/{lam:g}", row, base.replace(joint_lambda=lam, **shapes[row])))
    return cells


@dataclass
class AblationResult:
    records: dict  # cell key -> ExperimentRecord
    rows: list  # comparison table, one dict per cell

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return dumps({"rows": self.rows, "records": {k: r.to_dict() for k, r in self.records.items()}})


def ablation_suite(base: PipelineConfig, data: SyntheticData | None = None, rows=ABLATION_ROWS, lambdas=None,
                   prepared: PreparedData | None = None) -> AblationResult:
    """Run the comparison grid on one shared dataset and pre-trained classifier."""
    prepared = prepared or prepare(base, data)
    records, table = {}, []
    for key, row, cfg in ablation_configs(base, rows, lambdas):
        rec = finish(cfg, prepared)
        records[key] = rec
        table.append({
            "row": key,
            "mining": cfg.mining,
            "partition": cfg.partition if cfg.mining == "subspace" else "",
            "M": cfg.num_subspaces if cfg.mining == "subspace" else (1 if cfg.mining == "batch" else 0),
            "joint_lambda": cfg.joint_lambda,
            "pair_accuracy": rec.pair_accuracy,
            "unseen_pair_accuracy": rec.stages.get("unseen_pair_accuracy", float("nan")),
            "coverage_at_0.95": rec.coverage.get("0.95", 0.0),
            "coverage_at_0.99": rec.coverage.get("0.99", 0.0),
            "mean_active": rec.stages.get("triplet", {}).get("mean_active", 0.0),
        })
    return AblationResult(records, table)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    path.write_text(buf.getvalue())


def check_coverage_column(path) -> bool:
    """Re-read a curve CSV and confirm coverage never increases down the rows."""
    with open(path, newline="") as fh:
        cov = [float(r["coverage"]) for r in csv.DictReader(fh)]
    return all(b <= a for a, b in zip(cov, cov[1:]))


def emit_plots(record: ExperimentRecord, out_dir, prefix: str = "") -> dict:
    """One CSV per curve plus ``manifest.json`` describing each file's columns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, curve in sorted(record.curves.items()):
        fname = f"{prefix}curve_{name}.csv"
        (out / fname).write_text(curve.to_csv())
        files.append({
            "file": fname, "kind": "precision_coverage", "columns": list(CURVE_COLUMNS),
            "rows": len(curve.thresholds), "total_queries": curve.total,
            "coverage_non_increasing": check_coverage_column(out / fname),
        })
    if record.active_series:
        fname = f"{prefix}active_triplets.csv"
        cols = ["step", "active_triplets", "num_triplets", "triplet_loss", "softmax_loss"]
        _write_csv(out / fname, cols, record.active_series)
        files.append({"file": fname, "kind": "active_triplet_series", "columns": cols, "rows": len(record.active_series)})
    manifest = {"files": files, "pair_accuracy": record.pair_accuracy, "config_seed": record.config.get("seed")}
    write_json(out / f"{prefix}manifest.json", manifest)
    return manifest


def curve_from_dict(d: dict) -> PrecisionCoverageCurve:
    pts = d["points"]

    def col(key, dtype):
        return np.array([p[key] for p in pts], dtype=dtype)

    return PrecisionCoverageCurve(
        col("threshold", float), col("precision", float), col("coverage", float),
        col("M", np.int64), col("correct", np.int64), int(d["total"]), np.array(d["undefined"], dtype=bool),
    )


def record_from_dict(d: dict) -> ExperimentRecord:
    return ExperimentRecord(
        d["config"], d["stages"], d["pair_accuracy"], d["pair_threshold"],
        {k: curve_from_dict(c) for k, c in d.get("curves", {}).items()},
        d.get("coverage_at_precision", {}), d.get("active_series", []),
        d.get("timings", {}), d.get("versions", {}),
    )
