import numpy as np
import pytest

from paretorl.checkpoint import CheckpointError, read_checkpoint, write_checkpoint


def test_roundtrip_preserves_dtypes_and_shapes(tmp_path):
    sec = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "d": np.array([1.5, -2.0]),
           "step": np.array([7]), "scalar": np.float32(3.0), "blob": b"\x00\x01abc"}
    write_checkpoint(tmp_path / "a.ckpt", sec, "cafe")
    h, out = read_checkpoint(tmp_path / "a.ckpt", expected_hash="cafe")
    assert h == "cafe" and list(out) == list(sec)
    assert out["w"].dtype == np.float32 and np.array_equal(out["w"], sec["w"])
    assert out["d"].dtype == np.float64 and out["step"].dtype == np.int64
    assert out["scalar"].shape == () and out["blob"] == sec["blob"]


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(tmp_path / "x.ckpt")


def test_hash_mismatch_and_missing(tmp_path):
    write_checkpoint(tmp_path / "a.ckpt", {"w": np.zeros(2)}, "aaaa")
    with pytest.raises(CheckpointError, match="does not match"):
        read_checkpoint(tmp_path / "a.ckpt", expected_hash="bbbb")
    with pytest.raises(CheckpointError, match="missing"):
        read_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_file(tmp_path):
    write_checkpoint(tmp_path / "a.ckpt", {"w": np.zeros(100)}, "aaaa")
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "a.ckpt")


def test_failed_write_keeps_previous_file(tmp_path):
    write_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(3)}, "h")
    with pytest.raises(CheckpointError):
        write_checkpoint(tmp_path / "a.ckpt", {"w": np.array(["text"])}, "h")
    assert np.array_equal(read_checkpoint(tmp_path / "a.ckpt")[1]["w"], np.ones(3))
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]
