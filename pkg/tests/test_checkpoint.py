import numpy as np
import numpy.testing as npt
import pytest

from storygen.checkpoint import (CheckpointError, load_tensors, save_tensors,
                                 scalar, state_checksum)


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    state = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "a.bias": rng.normal(size=4).astype(np.float32),
        "meta.k": np.float32(20),
        "deep.nested.name": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }
    path = tmp_path / "state.ntc"
    save_tensors(path, state)
    loaded = load_tensors(path)
    assert set(loaded) == set(state)
    for key in state:
        npt.assert_array_equal(loaded[key], np.asarray(state[key]).reshape(
            loaded[key].shape))
    assert scalar(loaded["meta.k"]) == 20.0


def test_identical_state_identical_bytes(tmp_path):
    state = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.ntc", tmp_path / "b.ntc"
    save_tensors(p1, state)
    save_tensors(p2, {"w": state["w"].copy()})
    assert p1.read_bytes() == p2.read_bytes()
    assert state_checksum(state) == state_checksum({"w": state["w"].copy()})


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ntc"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.ntc"
    import struct
    path.write_bytes(b"NTC1" + struct.pack("<II", 99, 0))
    with pytest.raises(CheckpointError, match="version"):
        load_tensors(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "ok.ntc"
    save_tensors(path, {"w": np.zeros(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_tensors(path)


def test_float64_input_is_cast(tmp_path):
    path = tmp_path / "cast.ntc"
    save_tensors(path, {"w": np.array([1.5, 2.5], dtype=np.float64)})
    out = load_tensors(path)
    assert out["w"].dtype == np.float32
