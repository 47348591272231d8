import numpy as np
import pandas as pd
import pytest

from src.utils.container import MAGIC, ArtifactContainer, file_checksum
from src.utils.errors import ChecksumError, ContainerError
from src.utils.parallel import ordered_map, tree_sum
from src.utils.rng import RngStream
from src.utils.tables import read_table, write_table


def test_stream_same_path_same_draws():
    a = RngStream(7).child("example", 3).generator().standard_normal(5)
    b = RngStream(7).child("example").child(3).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_stream_paths_are_independent():
    root = RngStream(7)
    a = root.child("example", 3).generator().standard_normal(5)
    b = root.child("example", 4).generator().standard_normal(5)
    c = root.child("sample", 3).generator().standard_normal(5)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_stream_rejects_negative_index():
    with pytest.raises(ValueError):
        RngStream(0).child(-1).generator()


def test_container_roundtrip(tmp_path):
    container = ArtifactContainer(meta={"config_hash": "abc", "seeds": [1, 2]})
    container.add("weights", np.arange(6, dtype=np.float64).reshape(2, 3))
    container.add("single", np.ones(3, dtype=np.float32))
    container.add("payload", np.array([-127, 0, 127], dtype=np.int8))
    container.add("ids", np.array([0, 5, 9]))
    path = tmp_path / "a.dinf"
    container.save(path)

    loaded = ArtifactContainer.load(path)
    assert path.read_bytes().startswith(MAGIC)
    assert loaded.meta == {"config_hash": "abc", "seeds": [1, 2]}
    np.testing.assert_array_equal(loaded["weights"], container["weights"])
    assert loaded["single"].dtype == np.float32
    assert loaded["payload"].dtype == np.int8
    assert loaded["ids"].dtype == np.uint64
    assert loaded.to_bytes() == container.to_bytes()


def test_container_rejects_duplicate_names():
    container = ArtifactContainer()
    container.add("x", np.zeros(2))
    with pytest.raises(ContainerError):
        container.add("x", np.ones(2))
    with pytest.raises(ContainerError):
        container.add("meta", np.ones(2))


def test_container_detects_corruption():
    container = ArtifactContainer(meta={"k": 1})
    container.add("x", np.linspace(0, 1, 10))
    payload = bytearray(container.to_bytes())
    payload[20] ^= 0xFF
    with pytest.raises(ChecksumError):
        ArtifactContainer.from_bytes(bytes(payload))


def test_container_rejects_foreign_bytes():
    with pytest.raises(ContainerError):
        ArtifactContainer.from_bytes(b"PK\x03\x04 not a container at all")


def test_container_rejects_negative_integers():
    with pytest.raises(ContainerError):
        ArtifactContainer().add("ids", np.array([-1, 2]))


def test_file_checksum_is_trailer(tmp_path):
    container = ArtifactContainer()
    container.add("x", np.ones(4))
    path = tmp_path / "x.dinf"
    digest = container.save(path)
    assert file_checksum(path) == digest


def test_ordered_map_independent_of_workers():
    def job(i):
        return RngStream(3).child("job", i).generator().standard_normal(4)

    serial = ordered_map(job, range(6), workers=1)
    parallel = ordered_map(job, range(6), workers=3)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a, b)


def test_tree_sum_fixed_association():
    arrays = [np.full(2, 0.1 * k) for k in range(7)]
    np.testing.assert_array_equal(tree_sum(arrays), tree_sum(list(arrays)))
    np.testing.assert_allclose(tree_sum(arrays), np.sum(arrays, axis=0))
    with pytest.raises(ValueError):
        tree_sum([])


def test_table_header_roundtrip(tmp_path):
    frame = pd.DataFrame({"query": [0, 1], "value": [0.1, 1 / 3]})
    path = tmp_path / "t.csv"
    write_table(frame, path, {"config_hash": "deadbeef", "damping": 0.01})
    assert path.read_text(encoding="utf-8").startswith("# config_hash=deadbeef damping=0.01\n")
    loaded, meta = read_table(path)
    assert meta == {"config_hash": "deadbeef", "damping": "0.01"}
    assert loaded["value"].tolist() == [0.1, 1 / 3]
