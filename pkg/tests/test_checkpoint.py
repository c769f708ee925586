import numpy as np
import pytest

from dpcn.checkpoint import CheckpointError, FORMAT_VERSION, load_checkpoint, save_checkpoint


def _arrays(rng):
    return {"w": rng.normal(size=(3, 4)).astype(np.float32),
            "v": rng.normal(size=5),
            "n": np.arange(4, dtype=np.int64),
            "scalar": np.array(2.5, dtype=np.float32)}


def test_round_trip_is_bit_exact(tmp_path, rng):
    arrays = _arrays(rng)
    save_checkpoint(tmp_path / "a.ckpt", arrays, {"phases_done": 2, "rng": {"x": 1}}, "abc")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.version == FORMAT_VERSION and ck.config_digest == "abc" and ck.phase == 2
    assert ck.meta["rng"] == {"x": 1}
    for k, v in arrays.items():
        assert ck.arrays[k].dtype == v.dtype and ck.arrays[k].shape == v.shape
        assert ck.arrays[k].tobytes() == v.tobytes()


def test_truncation_rejected(tmp_path, rng):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, _arrays(rng))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corruption_rejected(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, _arrays(rng))
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path, rng):
    import hashlib
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, _arrays(rng))
    body = path.read_bytes()[:-32].replace(f"DPCNCKPT {FORMAT_VERSION}\n".encode(), b"DPCNCKPT 99\n", 1)
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello world" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
