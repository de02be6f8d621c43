"""Command-line entry point: ``subspace-triplet <command> [options]``.

Every command accepts ``--config FILE`` (``key = value`` lines) and any
config key as a ``--key-name VALUE`` flag; flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .cleaning import cleaning_report, filter_by_agreement, fixed_ratio_mask, retrain_clean, train_initial_classifier
from .config import PipelineConfig, load_config
from .embedding import LabeledDataset
from .errors import ConfigError, TripletError
from .formats import (
    dumps,
    import_csv,
    read_dataset,
    read_index,
    read_json,
    read_model,
    read_partition,
    write_dataset,
    write_index,
    write_json,
    write_model,
    write_partition,
)
from .model import embed
from .pipeline import ablation_suite, emit_plots, pair_verification, record_from_dict
from .retrieval import build_index, coverage_at_precision, default_thresholds, precision_coverage, query_batch
from .subspace import identity_centroid_matrix, kmeans, random_partition
from .synthetic import generate_synthetic, make_pairs
from .training import Classifier, train_classifier, train_triplet

COMMANDS = ("gen-data", "clean", "train", "partition", "build-index", "query", "evaluate", "ablate", "emit-plots")


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="key = value configuration file")
    g = p.add_argument_group("config overrides")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            g.add_argument(flag, dest="seed", required=seed_required, help="random seed")
        else:
            g.add_argument(flag, dest=f.name, metavar="VALUE")


def _config(args) -> PipelineConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(PipelineConfig)}
    return load_config(args.config, overrides)


def _load_data(path) -> LabeledDataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return import_csv(path)
    return read_dataset(path)


def _out(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _meta(cfg, stage, epoch) -> dict:
    return {"config": cfg.snapshot(), "seed": cfg.seed, "stage": stage, "epoch": epoch}


def cmd_gen_data(args, cfg):
    data = generate_synthetic(cfg.synthetic_spec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "train.tfds", data.train)
    write_dataset(out / "heldout.tfds", data.heldout)
    write_dataset(out / "unseen.tfds", data.unseen)
    write_json(out / "truth.json", {
        "spec": cfg.synthetic_spec().to_dict(),
        "noise_flags": data.noise_flags.astype(int),
        "true_identities": data.true_identities,
        "supercluster_of": data.supercluster_of,
    })


def cmd_clean(args, cfg):
    data = _load_data(args.data)
    flags = None
    if args.truth:
        flags = np.asarray(read_json(args.truth)["noise_flags"], dtype=bool)
    tcfg = cfg.train_config()
    initial = train_initial_classifier(data, tcfg, cfg.seed + 1, cfg.init_subset_fraction)
    if args.fixed_ratio is not None:
        keep = fixed_ratio_mask(data, initial, args.fixed_ratio)
        clean, report = data.subset(keep), cleaning_report(data, keep, flags)
    else:
        clean, report = filter_by_agreement(data, initial, flags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "clean.tfds", clean)
    write_json(out / "cleaning_report.json", report.to_dict())
    if args.retrain:
        clf = retrain_clean(clean, tcfg, cfg.seed + 1, initial if cfg.retrain_from_init else None)
        write_model(out / "classifier.tfmd", clf.params, clf.head, _meta(cfg, "classifier", tcfg.cls_epochs_per_rate))


def cmd_train(args, cfg):
    data = _load_data(args.data)
    tcfg = cfg.train_config()
    if args.init:
        params, head = read_model(args.init)
        clf = Classifier(params, head)
    else:
        clf = train_classifier(data, tcfg, cfg.seed + 1)
    if cfg.mining == "none":
        write_model(args.out, clf.params, clf.head, _meta(cfg, "classifier", tcfg.cls_epochs_per_rate))
        return
    part = None
    if cfg.mining == "subspace":
        if args.partition_json:
            part = read_partition(args.partition_json)
        else:
            ids, cent = identity_centroid_matrix(data, clf.params, cfg.renormalize_centroids)
            if cfg.partition == "random":
                part = random_partition(len(ids), cfg.num_subspaces, cfg.seed + 2, ids, cent, data.num_identities)
            else:
                part, _ = kmeans(cent, cfg.num_subspaces, cfg.kmeans_max_iter, cfg.seed + 2, ids, data.num_identities)
    lines = []
    run = train_triplet(clf.params, clf.head, data, tcfg, cfg.mining, part, cfg.seed + 3, on_step=lines.append)
    write_model(args.out, run.params, run.head, _meta(cfg, "triplet", len(run.steps)))
    if args.diagnostics:
        Path(args.diagnostics).write_text("".join(dumps_line(e) for e in lines))


def dumps_line(entry: dict) -> str:
    """Per-step mining diagnostic in the JSON-lines schema."""
    keys = {"step": "step", "scope": "scope", "active_triplets": "active_triplets",
            "mean_loss": "triplet_loss", "batch_size": "batch_size", "top_k": "top_k"}
    return json.dumps({k: entry[v] for k, v in keys.items()}, sort_keys=True) + "\n"


def cmd_partition(args, cfg):
    data = _load_data(args.data)
    params, _ = read_model(args.model)
    ids, cent = identity_centroid_matrix(data, params, cfg.renormalize_centroids)
    if cfg.partition == "random":
        part = random_partition(len(ids), cfg.num_subspaces, cfg.seed + 2, ids, cent, data.num_identities)
    else:
        part, _ = kmeans(cent, cfg.num_subspaces, cfg.kmeans_max_iter, cfg.seed + 2, ids, data.num_identities)
    write_partition(args.out, part)


def cmd_build_index(args, cfg):
    data = _load_data(args.data)
    params, _ = read_model(args.model)
    write_index(args.out, build_index(data, params, args.tag or Path(args.model).stem, cfg.renormalize_centroids))


def _query_embeddings(args):
    if args.embeddings:
        path = Path(args.embeddings)
        if path.suffix == ".npy":
            return np.load(path), None
        return np.loadtxt(path, delimiter=",", ndmin=2), None
    if not (args.features and args.model):
        raise ConfigError("query needs --embeddings, or --features together with --model")
    data = _load_data(args.features)
    params, _ = read_model(args.model)
    return embed(params, data.features), data


def cmd_query(args, cfg):
    index = read_index(args.index)
    E, _ = _query_embeddings(args)
    res = query_batch(index, E, cfg.retrieval_mode, cfg.confidence)
    _out(args.out, dumps({"mode": cfg.retrieval_mode, "confidence": cfg.confidence,
                          "results": [r.to_dict() for r in res.to_list()]}))


def cmd_evaluate(args, cfg):
    params, _ = read_model(args.model)
    report = {}
    if args.pairs_data:
        held = _load_data(args.pairs_data)
        pairs = make_pairs(held, cfg.verification_pairs, cfg.verification_pairs, cfg.seed + 4)
        acc, thr = pair_verification(params, held, pairs)
        report["pair_accuracy"], report["pair_threshold"] = acc, thr
    if args.index and args.queries:
        index = read_index(args.index)
        queries = [_load_data(q) for q in args.queries]
        X = np.concatenate([q.features for q in queries])
        truth = np.concatenate([q.identities for q in queries])
        truth = np.where(np.isin(truth, index.identities), truth, -1)
        res = query_batch(index, embed(params, X), cfg.retrieval_mode, cfg.confidence)
        curve = precision_coverage(res.predicted_identity, truth, res.confidence, default_thresholds(cfg.num_thresholds))
        report["coverage_at_precision"] = {f"{p:g}": coverage_at_precision(curve, p) for p in (0.95, 0.99)}
        report["out_of_index"] = int((truth < 0).sum())
        report["queries"] = len(truth)
        report["mean_distance_ops"] = float(res.distance_ops.mean())
        report["curve"] = curve.to_dict()
        if args.curve:
            Path(args.curve).write_text(curve.to_csv())
    _out(args.out, dumps(report))


def cmd_ablate(args, cfg):
    result = ablation_suite(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(result.to_csv())
    (out / "ablation.json").write_text(result.to_json())
    write_json(out / "timings.json", {k: r.timings for k, r in result.records.items()})


def _safe(key: str) -> str:
    return key.replace("/", "_lambda")


def cmd_emit_plots(args, cfg):
    d = read_json(args.record)
    records = d["records"] if "records" in d else {"": d}
    manifests = {}
    for key, rec in sorted(records.items()):
        prefix = f"{_safe(key)}_" if key else ""
        manifests[key] = emit_plots(record_from_dict(rec), args.out, prefix)
    bad = [f["file"] for m in manifests.values() for f in m["files"] if f.get("coverage_non_increasing") is False]
    if bad:
        raise ConfigError(f"coverage increases in {bad}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "clean": cmd_clean,
    "train": cmd_train,
    "partition": cmd_partition,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "emit-plots": cmd_emit_plots,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subspace-triplet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic supercluster dataset")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, seed_required=True)

    p = sub.add_parser("clean", help="agreement (or fixed-ratio) label cleaning")
    p.add_argument("--data", required=True, help="TFDS or CSV dataset")
    p.add_argument("--truth", help="truth.json from gen-data, for noise precision/recall")
    p.add_argument("--fixed-ratio", type=float, help="use the fixed-ratio baseline with this keep ratio")
    p.add_argument("--retrain", action="store_true", help="also retrain a classifier on the clean set")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, seed_required=False)

    p = sub.add_parser("train", help="classifier pre-training plus triplet fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="TFMD checkpoint to start from instead of training a classifier")
    p.add_argument("--partition-json", help="partition JSON for subspace mining (default: cluster now)")
    p.add_argument("--diagnostics", help="write per-step mining diagnostics as JSON lines")
    p.add_argument("--out", required=True, help="output TFMD checkpoint")
    _add_config_flags(p, seed_required=True)

    p = sub.add_parser("partition", help="cluster identity centroids into subspaces")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output partition JSON")
    _add_config_flags(p, seed_required=False)

    p = sub.add_parser("build-index", help="build a two-layer retrieval index")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--tag", help="model tag stored in the index")
    p.add_argument("--out", required=True, help="output TFIX file")
    _add_config_flags(p, seed_required=False)

    p = sub.add_parser("query", help="retrieve identities for query embeddings or features")
    p.add_argument("--index", required=True)
    p.add_argument("--embeddings", help=".npy or headerless CSV of query embeddings")
    p.add_argument("--features", help="TFDS or CSV dataset of raw query features (needs --model)")
    p.add_argument("--model")
    p.add_argument("--out", help="output JSON (default stdout)")
    _add_config_flags(p, seed_required=False)

    p = sub.add_parser("evaluate", help="pair verification and precision/coverage")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs-data", help="held-out dataset for verification pairs")
    p.add_argument("--index")
    p.add_argument("--queries", nargs="*", help="query datasets; identities outside the index count as out-of-index")
    p.add_argument("--curve", help="write the precision/coverage curve CSV here")
    p.add_argument("--out", help="output JSON (default stdout)")
    _add_config_flags(p, seed_required=False)

    p = sub.add_parser("ablate", help="run the mining/partition ablation grid")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, seed_required=False)

    p = sub.add_parser("emit-plots", help="write curve CSVs and a manifest from a record or ablation JSON")
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, seed_required=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        HANDLERS[args.command](args, cfg)
    except (TripletError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
