import json

import numpy as np
import pytest

from subspace_triplet.embedding import LabeledDataset, l2_normalize_rows
from subspace_triplet.errors import FormatError
from subspace_triplet.formats import (
    dataset_from_bytes,
    dataset_to_bytes,
    dumps,
    export_csv,
    import_csv,
    index_from_bytes,
    index_to_bytes,
    model_from_bytes,
    model_to_bytes,
    read_dataset,
    read_index,
    read_model,
    read_partition,
    sidecar_path,
    write_dataset,
    write_index,
    write_model,
    write_partition,
)
from subspace_triplet.model import init_head, init_params
from subspace_triplet.retrieval import index_from_embeddings
from subspace_triplet.subspace import kmeans


def _data(rng, n=12, d=5, C=4):
    return LabeledDataset(rng.permutation(1000)[:n], rng.integers(C, size=n), rng.normal(size=(n, d)), C)


def test_dataset_round_trip(tmp_path, rng):
    data = _data(rng)
    write_dataset(tmp_path / "a.tfds", data)
    back = read_dataset(tmp_path / "a.tfds")
    assert np.array_equal(back.sample_ids, data.sample_ids)
    assert np.array_equal(back.identities, data.identities)
    assert back.num_identities == 4
    # features are stored as float32
    assert np.array_equal(back.features, data.features.astype(np.float32).astype(np.float64))
    assert dataset_to_bytes(back) == dataset_to_bytes(data)


def test_dataset_bad_input(rng):
    buf = dataset_to_bytes(_data(rng))
    with pytest.raises(FormatError):
        dataset_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:-3])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:10])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:4] + (99).to_bytes(4, "little") + buf[8:])


def test_csv_round_trip(tmp_path, rng):
    data = _data(rng)
    export_csv(tmp_path / "a.csv", data)
    back = import_csv(tmp_path / "a.csv", num_identities=4)
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.sample_ids, data.sample_ids)


@pytest.mark.parametrize("text", [
    "",
    "id,identity,f0\n1,0,0.5\n",
    "sample_id,identity,x\n1,0,0.5\n",
    "sample_id,identity,f0\n",
    "sample_id,identity,f0\n1,0,abc\n",
    "sample_id,identity,f0,f1\n1,0,0.5\n",
])
def test_csv_rejects_malformed(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(FormatError):
        import_csv(path)


@pytest.mark.parametrize("with_head", [True, False])
def test_model_round_trip(tmp_path, rng, with_head):
    params = init_params(6, 4, (7, 5), rng)
    head = init_head(3, 4, rng, 16.0) if with_head else None
    write_model(tmp_path / "m.tfmd", params, head, {"seed": 3, "stage": "triplet", "epoch": 2})
    p2, h2 = read_model(tmp_path / "m.tfmd")
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), p2.arrays()))
    if with_head:
        assert np.array_equal(h2.weight, head.weight) and h2.scale == 16.0
    else:
        assert h2 is None
    side = json.loads(sidecar_path(tmp_path / "m.tfmd").read_text())
    assert side["seed"] == 3 and side["stage"] == "triplet" and side["epoch"] == 2
    assert side["hidden_dims"] == [7, 5] and side["embedding_dim"] == 4


def test_model_bad_input(rng):
    buf = model_to_bytes(init_params(3, 2, (4,), rng), init_head(2, 2, rng))
    with pytest.raises(FormatError):
        model_from_bytes(b"TFDS" + buf[4:])
    with pytest.raises(FormatError):
        model_from_bytes(buf + b"\0")
    for cut in (5, 20, len(buf) - 8, len(buf) - 30):
        with pytest.raises(FormatError):
            model_from_bytes(buf[:cut])


def test_index_round_trip(tmp_path, rng):
    E = l2_normalize_rows(rng.normal(size=(10, 3)))
    index = index_from_embeddings(E, rng.integers(4, size=10), rng.permutation(50)[:10], "tag-é")
    write_index(tmp_path / "i.tfix", index)
    back = read_index(tmp_path / "i.tfix")
    for name in ("identities", "centroids", "member_ids", "member_identities", "member_embeddings"):
        assert np.array_equal(getattr(back, name), getattr(index, name))
    assert back.model_tag == "tag-é"
    buf = index_to_bytes(index)
    with pytest.raises(FormatError):
        index_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        index_from_bytes(buf[:30])
    with pytest.raises(FormatError):
        index_from_bytes(b"TFMD" + buf[4:])


def test_partition_round_trip(tmp_path, rng):
    part, _ = kmeans(rng.normal(size=(9, 2)), 3, seed=1)
    write_partition(tmp_path / "p.json", part)
    back = read_partition(tmp_path / "p.json")
    assert np.array_equal(back.assignment, part.assignment)
    (tmp_path / "q.json").write_text("{}")
    with pytest.raises(FormatError):
        read_partition(tmp_path / "q.json")


def test_dumps_is_canonical():
    a = dumps({"b": np.float64(0.1), "a": np.arange(2), "c": np.bool_(True)})
    assert a == dumps({"c": True, "a": [0, 1], "b": 0.1})
    assert a.endswith("\n")
    with pytest.raises(TypeError):
        dumps({"x": object()})
