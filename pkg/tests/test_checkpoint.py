import numpy as np
import pytest

from dualcond import checkpoint as ck


def arrays():
    return {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}


def test_roundtrip(tmp_path):
    d = ck.save(tmp_path / "a.ckpt", "thing", {"k": [1, 2]}, arrays())
    meta, arr, d2 = ck.load(tmp_path / "a.ckpt", "thing")
    assert d == d2 and meta == {"k": [1, 2]}
    for k, v in arrays().items():
        assert np.array_equal(arr[k], v) and arr[k].dtype == v.dtype


def test_byte_identical_rewrites(tmp_path):
    ck.save(tmp_path / "a.ckpt", "thing", {"k": 1}, arrays())
    ck.save(tmp_path / "b.ckpt", "thing", {"k": 1}, arrays())
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_hash_depends_on_content(tmp_path):
    a = arrays()
    d1 = ck.save(tmp_path / "a.ckpt", "thing", {}, a)
    a["w"][0, 0] = 99
    assert ck.save(tmp_path / "b.ckpt", "thing", {}, a) != d1
    assert ck.save(tmp_path / "c.ckpt", "thing", {"x": 1}, arrays()) != d1


def test_kind_mismatch(tmp_path):
    ck.save(tmp_path / "a.ckpt", "thing", {}, arrays())
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "a.ckpt", "other")


def test_corrupted_payload_detected(tmp_path):
    p = tmp_path / "a.ckpt"
    ck.save(p, "thing", {}, arrays())
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ck.CheckpointError, match="hash"):
        ck.load(p)


def test_truncated_and_foreign_files(tmp_path):
    p = tmp_path / "a.ckpt"
    ck.save(p, "thing", {}, arrays())
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ck.CheckpointError):
        ck.load(p)
    q = tmp_path / "b.ckpt"
    q.write_bytes(b"not a checkpoint")
    with pytest.raises(ck.CheckpointError):
        ck.load(q)
    with pytest.raises(FileNotFoundError):
        ck.load(tmp_path / "missing.ckpt")


def test_no_timestamps(tmp_path):
    ck.save(tmp_path / "a.ckpt", "thing", {}, arrays())
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert b"time" not in raw and b"date" not in raw
