import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protogest import tensorio
from protogest.errors import (
    BadMagicError,
    TrailingDataError,
    TruncatedError,
    UnknownDtypeError,
    ValidationError,
)

GOLDEN = Path(__file__).parent / "golden" / "golden_2x3.mgt"


def test_write_2x2_is_30_bytes_and_roundtrips(tmp_path):
    t = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    path = tmp_path / "eye.mgt"
    tensorio.write_tensor(path, t)
    raw = path.read_bytes()
    assert len(raw) == 4 + 1 + 1 + 8 + 16 == 30
    back = tensorio.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, t)
    assert back.tobytes() == t.tobytes()


def test_header_declares_dims_in_order(tmp_path):
    t = np.zeros((8, 3, 16, 16), dtype=np.float32)
    path = tmp_path / "clip.mgt"
    tensorio.write_tensor(path, t)
    raw = path.read_bytes()
    assert raw[:4] == b"MGC1"
    assert raw[4] == 0x01
    assert raw[5] == 4
    assert struct.unpack("<4I", raw[6:22]) == (8, 3, 16, 16)


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=5),
    seed=st.integers(0, 2**31),
)
def test_roundtrip_random_tensors_with_byte_reparse(shape, seed, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("codec")
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(shape).astype(np.float32)
    path = tmp / "t.mgt"
    tensorio.write_tensor(path, t)
    back = tensorio.read_tensor(path)
    assert np.array_equal(back, t) and back.shape == t.shape

    # independent byte-level re-parse of the container
    raw = path.read_bytes()
    assert raw[:4] == b"MGC1" and raw[4] == 1
    ndim = raw[5]
    dims = struct.unpack(f"<{ndim}I", raw[6:6 + 4 * ndim])
    assert dims == tuple(t.shape)
    payload = np.frombuffer(raw, dtype="<f4", offset=6 + 4 * ndim)
    assert payload.size == math.prod(dims)
    assert np.array_equal(payload.reshape(dims), t)

    # write(read(f)) is byte-identical
    path2 = tmp / "t2.mgt"
    tensorio.write_tensor(path2, back)
    assert path2.read_bytes() == raw


def test_golden_fixture_decodes_to_known_values(tmp_path):
    expected = np.array([[0.0, 1.0, -1.0], [0.5, 2.25, -3.75]], dtype=np.float32)
    got = tensorio.read_tensor(GOLDEN)
    assert np.array_equal(got, expected)
    # and re-encodes to the identical bytes on this platform
    out = tmp_path / "re.mgt"
    tensorio.write_tensor(out, got)
    assert out.read_bytes() == GOLDEN.read_bytes()


def test_nonfinite_rejected_on_write(tmp_path):
    bad = np.array([1.0, np.nan], dtype=np.float32)
    with pytest.raises(ValidationError):
        tensorio.write_tensor(tmp_path / "nan.mgt", bad)
    with pytest.raises(ValidationError):
        tensorio.write_tensor(tmp_path / "inf.mgt", np.array([np.inf], dtype=np.float32))


def test_nonfinite_rejected_on_read(tmp_path):
    t = np.array([1.0, 2.0], dtype=np.float32)
    path = tmp_path / "t.mgt"
    tensorio.write_tensor(path, t)
    raw = bytearray(path.read_bytes())
    raw[-4:] = struct.pack("<f", np.inf)
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        tensorio.read_tensor(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.mgt"
    path.write_bytes(b"XXXX" + bytes(30))
    with pytest.raises(BadMagicError):
        tensorio.read_tensor(path)


def test_unknown_dtype(tmp_path):
    path = tmp_path / "x.mgt"
    path.write_bytes(b"MGC1" + bytes([0x02, 1]) + struct.pack("<I", 1) + bytes(4))
    with pytest.raises(UnknownDtypeError):
        tensorio.read_tensor(path)


def test_truncated_payload(tmp_path):
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.mgt"
    tensorio.write_tensor(path, t)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedError):
        tensorio.read_tensor(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.mgt"
    path.write_bytes(b"MGC1\x01")
    with pytest.raises(TruncatedError):
        tensorio.read_tensor(path)


def test_trailing_bytes(tmp_path):
    t = np.ones(2, dtype=np.float32)
    path = tmp_path / "t.mgt"
    tensorio.write_tensor(path, t)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TrailingDataError):
        tensorio.read_tensor(path)


def test_validate_tensor_rejects_wrong_dtype_and_empty():
    with pytest.raises(ValidationError):
        tensorio.validate_tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(ValidationError):
        tensorio.validate_tensor(np.zeros((0, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# manifests


def _write_blob(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(path, np.ones((1, 1), dtype=np.float32))


def _manifest(root, k=3, entries=None):
    entries = entries if entries is not None else [
        tensorio.ManifestEntry("a", 0, "rgb/a.mgt", "pose/a.mgt", "train"),
        tensorio.ManifestEntry("b", 1, "rgb/b.mgt", "pose/b.mgt", "val"),
    ]
    for e in entries:
        _write_blob(root / e.rgb_path)
        _write_blob(root / e.pose_path)
    return tensorio.DatasetManifest(
        num_classes=k, class_names=[f"c{i}" for i in range(k)],
        entries=entries, root=root,
    )


def test_manifest_roundtrip(tmp_path):
    m = _manifest(tmp_path)
    tensorio.save_manifest(m, tmp_path / "manifest.txt")
    loaded = tensorio.load_manifest(tmp_path / "manifest.txt")
    assert loaded.num_classes == 3
    assert loaded.class_names == m.class_names
    assert loaded.entries == m.entries
    assert loaded.root == tmp_path


def test_manifest_label_out_of_range(tmp_path):
    bad = [tensorio.ManifestEntry("a", 5, "rgb/a.mgt", "pose/a.mgt", "train")]
    m = _manifest(tmp_path, entries=bad)
    with pytest.raises(ValidationError):
        tensorio.save_manifest(m, tmp_path / "manifest.txt")


def test_manifest_duplicate_id_and_dangling_path(tmp_path):
    dup = [
        tensorio.ManifestEntry("a", 0, "rgb/a.mgt", "pose/a.mgt", "train"),
        tensorio.ManifestEntry("a", 1, "rgb/a.mgt", "pose/a.mgt", "val"),
    ]
    m = _manifest(tmp_path, entries=dup)
    with pytest.raises(ValidationError):
        tensorio.save_manifest(m, tmp_path / "manifest.txt")

    m2 = _manifest(tmp_path)
    tensorio.save_manifest(m2, tmp_path / "manifest.txt")
    (tmp_path / "rgb" / "a.mgt").unlink()
    with pytest.raises(ValidationError):
        tensorio.load_manifest(tmp_path / "manifest.txt")


# ---------------------------------------------------------------------------
# prediction files


def test_predictions_roundtrip(tmp_path):
    probs = np.array([[0.5, 0.25, 0.25], [0.0, 1.0, 0.0]], dtype=np.float32)
    pred = tensorio.PredictionFile(["a", "b"], probs)
    tensorio.save_predictions(pred, tmp_path / "p.pred")
    loaded = tensorio.load_predictions(tmp_path / "p.pred")
    assert loaded.clip_ids == ["a", "b"]
    assert np.array_equal(loaded.probs, probs)


def test_predictions_validation():
    with pytest.raises(ValidationError):
        tensorio.validate_predictions(
            tensorio.PredictionFile(["a"], np.array([[0.9, 0.2]], dtype=np.float32))
        )
    with pytest.raises(ValidationError):
        tensorio.validate_predictions(
            tensorio.PredictionFile(["a"], np.array([[1.5, -0.5]], dtype=np.float32))
        )
    with pytest.raises(ValidationError):
        tensorio.validate_predictions(
            tensorio.PredictionFile(["a", "a"], np.full((2, 2), 0.5, dtype=np.float32))
        )
