"""On-disk containers: datasets (TFDS), models (TFMD), indices (TFIX), JSON reports.

All binary formats are little-endian with a four-byte magic and a u32
version. Floats in model and index files are stored as float64 so a
round trip is exact.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .embedding import LabeledDataset
from .errors import FormatError
from .model import ModelParams, SoftmaxHead
from .retrieval import RetrievalIndex
from .subspace import SubspacePartition

VERSION = 1
_DS_HEADER = struct.Struct("<4sIQQI")  # magic, version, N, C, d_in
_MD_HEADER = struct.Struct("<4sII")  # magic, version, layer count
_IX_HEADER = struct.Struct("<4sIQQI")  # magic, version, C, N, d


def _record_dtype(d_in: int) -> np.dtype:
    return np.dtype([("sample_id", "<u8"), ("identity", "<u4"), ("features", "<f4", (d_in,))])


def _read_header(buf: bytes, header: struct.Struct, magic: bytes):
    if len(buf) < header.size:
        raise FormatError("file too short for header")
    fields = header.unpack_from(buf, 0)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != VERSION:
        raise FormatError(f"unsupported version {fields[1]}")
    return fields[2:]


# datasets -----------------------------------------------------------------

def dataset_to_bytes(dataset: LabeledDataset) -> bytes:
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.d_in))
    rec["sample_id"] = dataset.sample_ids
    rec["identity"] = dataset.identities
    rec["features"] = dataset.features
    head = _DS_HEADER.pack(b"TFDS", VERSION, len(dataset), dataset.num_identities, dataset.d_in)
    return head + rec.tobytes()


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    n, c, d_in = _read_header(buf, _DS_HEADER, b"TFDS")
    dt = _record_dtype(d_in)
    if len(buf) != _DS_HEADER.size + n * dt.itemsize:
        raise FormatError("record block length does not match the header")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=_DS_HEADER.size)
    return LabeledDataset(
        rec["sample_id"].astype(np.int64),
        rec["identity"].astype(np.int64),
        rec["features"].astype(np.float64),
        int(c),
    )


def write_dataset(path, dataset: LabeledDataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def read_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def import_csv(path, num_identities: int | None = None) -> LabeledDataset:
    """Read ``sample_id,identity,f0,f1,...`` rows of precomputed features."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["sample_id", "identity"] or len(header) < 3:
            raise FormatError("CSV header must start with sample_id,identity followed by feature columns")
        expected = [f"f{i}" for i in range(len(header) - 2)]
        if header[2:] != expected:
            raise FormatError("feature columns must be named f0, f1, ...")
        rows = [r for r in reader if r]
    if not rows:
        raise FormatError("CSV contains no samples")
    short = [i for i, r in enumerate(rows, 2) if len(r) != len(header)]
    if short:
        raise FormatError(f"line {short[0]} has the wrong number of columns")
    try:
        table = np.array(rows, dtype=object)
        sids = table[:, 0].astype(np.int64)
        idents = table[:, 1].astype(np.int64)
        X = table[:, 2:].astype(np.float64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed CSV row: {exc}") from exc
    if num_identities is None:
        num_identities = int(idents.max()) + 1
    try:
        return LabeledDataset(sids, idents, X, num_identities)
    except ValueError as exc:
        raise FormatError(f"invalid CSV dataset: {exc}") from exc


def export_csv(path, dataset: LabeledDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "identity"] + [f"f{i}" for i in range(dataset.d_in)])
        for sid, c, x in zip(dataset.sample_ids, dataset.identities, dataset.features):
            w.writerow([int(sid), int(c)] + [repr(float(v)) for v in x])


# models -------------------------------------------------------------------

def _pack_matrix(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    return a.tobytes()


def model_to_bytes(params: ModelParams, head: SoftmaxHead | None = None) -> bytes:
    parts = [_MD_HEADER.pack(b"TFMD", VERSION, len(params.layers))]
    for W, b in params.layers:
        parts.append(struct.pack("<II", *W.shape))
        parts.append(_pack_matrix(W))
        parts.append(_pack_matrix(b))
    if head is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BIId", 1, *head.weight.shape, head.scale))
        parts.append(_pack_matrix(head.weight))
        parts.append(_pack_matrix(head.bias))
    return b"".join(parts)


def _take(buf, offset, count):
    end = offset + 8 * count
    if end > len(buf):
        raise FormatError("truncated model file")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64), end


def model_from_bytes(buf: bytes):
    (n_layers,) = _read_header(buf, _MD_HEADER, b"TFMD")
    off = _MD_HEADER.size
    layers = []
    for _ in range(n_layers):
        if off + 8 > len(buf):
            raise FormatError("truncated model file")
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        W, off = _take(buf, off, rows * cols)
        b, off = _take(buf, off, rows)
        layers.append((W.reshape(rows, cols), b))
    params = ModelParams(tuple(layers))
    if off + 1 > len(buf):
        raise FormatError("truncated model file")
    (flag,) = struct.unpack_from("<B", buf, off)
    off += 1
    head = None
    if flag:
        if off + struct.calcsize("<IId") > len(buf):
            raise FormatError("truncated model file")
        C, d, scale = struct.unpack_from("<IId", buf, off)
        off += struct.calcsize("<IId")
        W, off = _take(buf, off, C * d)
        b, off = _take(buf, off, C)
        head = SoftmaxHead(W.reshape(C, d), b, scale)
    if off != len(buf):
        raise FormatError("trailing bytes after model payload")
    return params, head


def write_model(path, params: ModelParams, head: SoftmaxHead | None = None, metadata: dict | None = None) -> None:
    """Write the TFMD payload plus a ``<path>.json`` sidecar describing it."""
    path = Path(path)
    path.write_bytes(model_to_bytes(params, head))
    side = {
        "format": "TFMD",
        "version": VERSION,
        "d_in": params.d_in,
        "hidden_dims": list(params.hidden_dims),
        "embedding_dim": params.d,
        "num_classes": head.num_classes if head is not None else None,
        "logit_scale": head.scale if head is not None else None,
    }
    side.update(metadata or {})
    write_json(sidecar_path(path), side)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_model(path):
    return model_from_bytes(Path(path).read_bytes())


# retrieval indices --------------------------------------------------------

def index_to_bytes(index: RetrievalIndex) -> bytes:
    tag = index.model_tag.encode("utf-8")
    d = index.d
    cent = np.zeros(index.num_identities, dtype=[("identity", "<u4"), ("count", "<u8"), ("centroid", "<f8", (d,))])
    cent["identity"] = index.identities
    cent["count"] = index.member_counts
    cent["centroid"] = index.centroids
    mem = np.zeros(len(index), dtype=[("sample_id", "<u8"), ("identity", "<u4"), ("embedding", "<f8", (d,))])
    mem["sample_id"] = index.member_ids
    mem["identity"] = index.member_identities
    mem["embedding"] = index.member_embeddings
    head = _IX_HEADER.pack(b"TFIX", VERSION, index.num_identities, len(index), d)
    return head + struct.pack("<I", len(tag)) + tag + cent.tobytes() + mem.tobytes()


def index_from_bytes(buf: bytes) -> RetrievalIndex:
    C, N, d = _read_header(buf, _IX_HEADER, b"TFIX")
    off = _IX_HEADER.size
    if off + 4 > len(buf):
        raise FormatError("truncated index file")
    (tag_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    tag = buf[off : off + tag_len].decode("utf-8")
    off += tag_len
    cdt = np.dtype([("identity", "<u4"), ("count", "<u8"), ("centroid", "<f8", (d,))])
    mdt = np.dtype([("sample_id", "<u8"), ("identity", "<u4"), ("embedding", "<f8", (d,))])
    if len(buf) != off + C * cdt.itemsize + N * mdt.itemsize:
        raise FormatError("index blocks do not match the header")
    cent = np.frombuffer(buf, dtype=cdt, count=C, offset=off)
    mem = np.frombuffer(buf, dtype=mdt, count=N, offset=off + C * cdt.itemsize)
    index = RetrievalIndex(
        cent["identity"].astype(np.int64),
        cent["centroid"].astype(np.float64),
        mem["sample_id"].astype(np.int64),
        mem["identity"].astype(np.int64),
        mem["embedding"].astype(np.float64),
        tag,
    )
    if not np.array_equal(index.member_counts, cent["count"].astype(np.int64)):
        raise FormatError("centroid member counts disagree with the members block")
    return index


def write_index(path, index: RetrievalIndex) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def read_index(path) -> RetrievalIndex:
    return index_from_bytes(Path(path).read_bytes())


# JSON ---------------------------------------------------------------------

def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_default) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def write_partition(path, partition: SubspacePartition) -> None:
    write_json(path, partition.to_dict())


def read_partition(path) -> SubspacePartition:
    d = read_json(path)
    for key in ("M", "assignment"):
        if key not in d:
            raise FormatError(f"partition JSON lacks {key!r}")
    return SubspacePartition.from_dict(d)
