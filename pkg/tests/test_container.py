import numpy as np
import pytest

from modalcast.container import MAGIC, read_container, write_container
from modalcast.errors import FormatError


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "alpha": rng.standard_normal((3, 4)).astype(np.float32),
        "beta.bias": rng.standard_normal(7).astype(np.float64),
        "gamma": np.asarray(0.25, dtype=np.float64),  # rank-0
    }


def test_round_trip_values_and_order(tmp_path):
    path = tmp_path / "w.calf"
    tensors = sample_tensors()
    write_container(path, tensors)
    loaded = read_container(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].shape == arr.shape  # rank-0 stays rank-0


def test_save_load_save_is_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.calf", tmp_path / "b.calf"
    write_container(p1, sample_tensors())
    write_container(p2, read_container(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_is_spec_constant(tmp_path):
    path = tmp_path / "w.calf"
    write_container(path, sample_tensors())
    assert path.read_bytes()[:4] == MAGIC == b"CALF"


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "w.calf"
    path.write_bytes(b"")
    with pytest.raises(FormatError, match="empty"):
        read_container(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "w.calf"
    write_container(path, sample_tensors())
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        read_container(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "w.calf"
    write_container(path, sample_tensors())
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        read_container(path)


@pytest.mark.parametrize("cut", [6, 13, 40])
def test_truncation_reports_position(tmp_path, cut):
    path = tmp_path / "w.calf"
    write_container(path, sample_tensors())
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(FormatError, match="byte"):
        read_container(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "w.calf"
    write_container(path, sample_tensors())
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        read_container(path)


def test_little_endian_layout(tmp_path):
    path = tmp_path / "w.calf"
    write_container(path, {"x": np.asarray([1.0], dtype=np.float32)})
    blob = path.read_bytes()
    # magic, version=1 LE, count=1 LE, name_len=1 LE, "x", dtype=0, rank=1, dim=1 LE
    assert blob[4:8] == b"\x01\x00\x00\x00"
    assert blob[8:12] == b"\x01\x00\x00\x00"
    assert blob[12:16] == b"\x01\x00\x00\x00"
    assert blob[16:17] == b"x"
    assert blob[17] == 0 and blob[18] == 1
    assert blob[19:27] == (1).to_bytes(8, "little")
    assert blob[27:31] == np.asarray([1.0], dtype="<f4").tobytes()
