"""On-disk codecs for tensors, dataset manifests, and prediction files.

Tensor files (`.mgt`) are a minimal binary format:

    bytes 0..3   magic "MGC1"
    byte  4      dtype code (0x01 = float32, the only supported dtype)
    byte  5      ndim (1..255)
    next 4*ndim  dims as little-endian uint32
    rest         row-major little-endian float32 payload

All values must be finite; this is enforced on write and on read.
Round-trips are bit-exact: write(read(f)) reproduces f byte for byte.

Manifests and prediction files are line-oriented UTF-8 text; see the
repo README for the full grammar.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    TrailingDataError,
    TruncatedError,
    UnknownDtypeError,
    ValidationError,
)

MAGIC = b"MGC1"
DTYPE_F32 = 0x01

SPLITS = ("train", "val", "test")

# A "tensor" throughout this package is a C-contiguous float32 ndarray.


def read_kv_lines(path) -> dict[str, str]:
    """Parse the non-comment `key value` lines of a manifest-style file."""
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        out[key] = value.strip()
    return out


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce to a valid float32 tensor, optionally reshaping."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return validate_tensor(arr)


def validate_tensor(t: np.ndarray) -> np.ndarray:
    """Check tensor invariants; returns a C-contiguous float32 view/copy."""
    if not isinstance(t, np.ndarray):
        raise ValidationError(f"expected ndarray, got {type(t).__name__}")
    if t.dtype != np.float32:
        raise ValidationError(f"tensor dtype must be float32, got {t.dtype}")
    if t.ndim < 1 or t.ndim > 255:
        raise ValidationError(f"tensor ndim must be in 1..255, got {t.ndim}")
    if any(d <= 0 for d in t.shape):
        raise ValidationError(f"tensor dims must be positive, got {t.shape}")
    if any(d > 0xFFFFFFFF for d in t.shape):
        raise ValidationError(f"tensor dim exceeds uint32 range: {t.shape}")
    if not np.isfinite(t).all():
        raise ValidationError("tensor contains non-finite values")
    return np.ascontiguousarray(t)


def write_tensor(path, t: np.ndarray) -> None:
    """Write a float32 tensor to `path` in the MGC1 binary format."""
    t = validate_tensor(t)
    header = MAGIC + struct.pack("<BB", DTYPE_F32, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = t.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Read an MGC1 tensor file; inverse of write_tensor."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file shorter than magic")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 6:
        raise TruncatedError(f"{path}: header truncated")
    dtype_code, ndim = raw[4], raw[5]
    if dtype_code != DTYPE_F32:
        raise UnknownDtypeError(f"{path}: unknown dtype code 0x{dtype_code:02x}")
    if ndim == 0:
        raise ValidationError(f"{path}: zero-dimensional tensor not allowed")
    dims_end = 6 + 4 * ndim
    if len(raw) < dims_end:
        raise TruncatedError(f"{path}: dim table truncated")
    dims = struct.unpack(f"<{ndim}I", raw[6:dims_end])
    if any(d == 0 for d in dims):
        raise ValidationError(f"{path}: zero-sized dim in {dims}")
    count = math.prod(dims)
    payload_end = dims_end + 4 * count
    if len(raw) < payload_end:
        raise TruncatedError(
            f"{path}: payload truncated ({len(raw) - dims_end} of {4 * count} bytes)"
        )
    if len(raw) > payload_end:
        raise TrailingDataError(f"{path}: {len(raw) - payload_end} trailing bytes")
    arr = np.frombuffer(raw, dtype="<f4", offset=dims_end).reshape(dims)
    arr = arr.astype(np.float32)  # native order, writable copy
    if not np.isfinite(arr).all():
        raise ValidationError(f"{path}: payload contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class ManifestEntry:
    clip_id: str
    label: int
    rgb_path: str
    pose_path: str
    split: str


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)
    # Directory that relative entry paths are resolved against (set on load).
    root: Path | None = None

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def resolve(self, relpath: str) -> Path:
        return (self.root / relpath) if self.root is not None else Path(relpath)


_NO_WS = "token must be non-empty and contain no whitespace"


def _check_token(value: str, what: str) -> str:
    if not value or any(c.isspace() for c in value):
        raise ValidationError(f"{what} {value!r}: {_NO_WS}")
    return value


def validate_manifest(m: DatasetManifest, check_files: bool = False) -> None:
    """Enforce manifest invariants; with check_files, referenced paths must exist."""
    if m.num_classes < 1:
        raise ValidationError(f"num_classes must be >= 1, got {m.num_classes}")
    if len(m.class_names) != m.num_classes:
        raise ValidationError(
            f"expected {m.num_classes} class names, got {len(m.class_names)}"
        )
    for name in m.class_names:
        _check_token(name, "class name")
        if "," in name:
            raise ValidationError(f"class name {name!r} may not contain commas")
    seen = set()
    for e in m.entries:
        _check_token(e.clip_id, "clip_id")
        _check_token(e.rgb_path, "rgb_path")
        _check_token(e.pose_path, "pose_path")
        if e.clip_id in seen:
            raise ValidationError(f"duplicate clip_id {e.clip_id!r}")
        seen.add(e.clip_id)
        if not 0 <= e.label < m.num_classes:
            raise ValidationError(
                f"clip {e.clip_id}: label {e.label} out of range [0,{m.num_classes})"
            )
        if e.split not in SPLITS:
            raise ValidationError(f"clip {e.clip_id}: unknown split {e.split!r}")
        if check_files:
            for p in (e.rgb_path, e.pose_path):
                if not m.resolve(p).is_file():
                    raise ValidationError(f"clip {e.clip_id}: dangling path {p}")


def save_manifest(m: DatasetManifest, path) -> None:
    validate_manifest(m)
    lines = [
        "# protogest dataset manifest",
        "version 1",
        f"num_classes {m.num_classes}",
        f"class_names {','.join(m.class_names)}",
    ]
    for e in m.entries:
        lines.append(f"entry {e.clip_id} {e.label} {e.rgb_path} {e.pose_path} {e.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    header: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "entry":
            if len(parts) != 6:
                raise ValidationError(f"{path}:{ln}: malformed entry line")
            try:
                label = int(parts[2])
            except ValueError:
                raise ValidationError(f"{path}:{ln}: label {parts[2]!r} not an int")
            entries.append(ManifestEntry(parts[1], label, parts[3], parts[4], parts[5]))
        elif len(parts) == 2:
            header[parts[0]] = parts[1]
        else:
            raise ValidationError(f"{path}:{ln}: malformed line {line!r}")
    if header.get("version") != "1":
        raise ValidationError(f"{path}: missing or unsupported manifest version")
    if "num_classes" not in header or "class_names" not in header:
        raise ValidationError(f"{path}: missing num_classes or class_names")
    try:
        num_classes = int(header["num_classes"])
    except ValueError:
        raise ValidationError(f"{path}: num_classes is not an int")
    m = DatasetManifest(
        num_classes=num_classes,
        class_names=header["class_names"].split(","),
        entries=entries,
        root=path.parent,
    )
    validate_manifest(m, check_files=check_files)
    return m


# ---------------------------------------------------------------------------
# prediction files

ROW_SUM_TOL = 1e-5


@dataclass
class PredictionFile:
    clip_ids: list[str]
    probs: np.ndarray  # (N, K) float32, rows sum to 1 within ROW_SUM_TOL


def validate_predictions(pred: PredictionFile) -> None:
    probs = pred.probs
    if not isinstance(probs, np.ndarray) or probs.dtype != np.float32 or probs.ndim != 2:
        raise ValidationError("probs must be a 2-D float32 ndarray")
    if len(pred.clip_ids) != probs.shape[0]:
        raise ValidationError(
            f"{len(pred.clip_ids)} clip ids for {probs.shape[0]} probability rows"
        )
    if len(set(pred.clip_ids)) != len(pred.clip_ids):
        raise ValidationError("duplicate clip ids in prediction file")
    for cid in pred.clip_ids:
        _check_token(cid, "clip_id")
    if not np.isfinite(probs).all():
        raise ValidationError("probabilities contain non-finite values")
    if (probs < 0).any() or (probs > 1).any():
        raise ValidationError("probabilities outside [0, 1]")
    sums = probs.astype(np.float64).sum(axis=1)
    bad = np.abs(sums - 1.0) > ROW_SUM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(
            f"row {i} ({pred.clip_ids[i]}) sums to {sums[i]:.8f}, not 1 +- {ROW_SUM_TOL}"
        )


def save_predictions(pred: PredictionFile, path) -> None:
    validate_predictions(pred)
    lines = ["# protogest predictions", "version 1", f"num_classes {pred.probs.shape[1]}"]
    for cid, row in zip(pred.clip_ids, pred.probs):
        # str(float32) is the shortest round-trip decimal form
        lines.append("pred " + cid + " " + " ".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_predictions(path) -> PredictionFile:
    path = Path(path)
    header: dict[str, str] = {}
    ids: list[str] = []
    rows: list[np.ndarray] = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "pred":
            if len(parts) < 3:
                raise ValidationError(f"{path}:{ln}: malformed pred line")
            ids.append(parts[1])
            try:
                rows.append(np.array([np.float32(v) for v in parts[2:]], dtype=np.float32))
            except ValueError:
                raise ValidationError(f"{path}:{ln}: non-numeric probability")
        elif len(parts) == 2:
            header[parts[0]] = parts[1]
        else:
            raise ValidationError(f"{path}:{ln}: malformed line {line!r}")
    if header.get("version") != "1":
        raise ValidationError(f"{path}: missing or unsupported prediction version")
    try:
        k = int(header.get("num_classes", ""))
    except ValueError:
        raise ValidationError(f"{path}: missing or bad num_classes")
    if any(len(r) != k for r in rows):
        raise ValidationError(f"{path}: prediction row width != num_classes {k}")
    if not rows:
        raise ValidationError(f"{path}: prediction file has no rows")
    pred = PredictionFile(clip_ids=ids, probs=np.stack(rows))
    validate_predictions(pred)
    return pred


__all__ = [
    "MAGIC",
    "DTYPE_F32",
    "SPLITS",
    "ROW_SUM_TOL",
    "read_kv_lines",
    "as_tensor",
    "validate_tensor",
    "write_tensor",
    "read_tensor",
    "ManifestEntry",
    "DatasetManifest",
    "validate_manifest",
    "save_manifest",
    "load_manifest",
    "PredictionFile",
    "validate_predictions",
    "save_predictions",
    "load_predictions",
]
