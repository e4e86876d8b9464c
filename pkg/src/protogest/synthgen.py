"""Deterministic synthetic micro-gesture dataset generator.

Each class owns a latent motion template: per-joint elliptical orbits with
class-specific frequency, phase, center, and radius. A clip samples the
template with per-clip Gaussian jitter (phase in radians, center in pixels)
whose scale is `intra_noise`. Joints are rendered as isotropic Gaussian
blobs: one heatmap channel per joint at pose resolution, and colored blobs
composited into RGB frames at the temporally subsampled rate
(rgb frame i == pose frame stride*i, stride = t_pose // t_rgb).

Classes listed in `ambiguous_pairs` share a template that differs only by a
phase offset, so their time-pooled heatmaps nearly coincide: a controllable
source of hard-to-separate classes.

Everything is keyed by (seed, clip_id), so generation is reproducible
byte-for-byte and embarrassingly parallel in principle.
"""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ValidationError
from .tensorio import DatasetManifest, ManifestEntry

BLOB_SIGMA = 1.5  # px; Gaussian blob radius for both pose and RGB rendering


@dataclass
class GenConfig:
    seed: int = 0
    num_classes: int = 6
    clips_per_class_train: int = 10
    clips_per_class_val: int = 5
    clips_per_class_test: int = 5
    t_rgb: int = 8
    t_pose: int = 32
    height: int = 16
    width: int = 16
    n_joints: int = 5
    # (class_a, class_b, phase offset in revolutions, each in (0, 1])
    ambiguous_pairs: tuple[tuple[int, int, float], ...] = ()
    intra_noise: float = 0.1

    @property
    def stride(self) -> int:
        return self.t_pose // self.t_rgb

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        for name in ("clips_per_class_train", "clips_per_class_val", "clips_per_class_test"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.t_rgb < 1 or self.t_pose < 1:
            raise ValidationError("clip lengths must be >= 1")
        if self.t_pose % self.t_rgb != 0:
            raise ValidationError(
                f"t_pose ({self.t_pose}) must be divisible by t_rgb ({self.t_rgb})"
            )
        if self.height < 8 or self.width < 8:
            raise ValidationError("frames must be at least 8x8")
        if self.n_joints < 1:
            raise ValidationError("n_joints must be >= 1")
        if self.intra_noise < 0:
            raise ValidationError("intra_noise must be >= 0")
        for a, b, off in self.ambiguous_pairs:
            if a == b:
                raise ValidationError(f"ambiguous pair ({a},{b}) must name distinct classes")
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes):
                raise ValidationError(f"ambiguous pair ({a},{b}) out of range")
            if not 0 < off <= 1:
                raise ValidationError(f"pair offset {off} must be in (0, 1]")


@dataclass
class MotionTemplate:
    label: int
    freq: np.ndarray    # (J,) orbit cycles per clip
    phase: np.ndarray   # (J,) radians
    center: np.ndarray  # (J, 2) row/col px
    amp: np.ndarray     # (J, 2) row/col radius px


@dataclass
class ClipSample:
    clip_id: str
    label: int
    rgb: np.ndarray   # (t_rgb, 3, H, W) float32 in [0, 1]
    pose: np.ndarray  # (t_pose, n_joints, H, W) float32 in [0, 1]


def _derived_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def derive_jitter_seed(seed: int, clip_id: str) -> int:
    digest = hashlib.sha256(f"{seed}/clip/{clip_id}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def make_templates(cfg: GenConfig) -> list[MotionTemplate]:
    """Draw one template per class; ambiguous pairs get phase-shifted copies."""
    cfg.validate()
    h, w, j = cfg.height, cfg.width, cfg.n_joints
    templates = []
    for k in range(cfg.num_classes):
        rng = _derived_rng(cfg.seed, "template", k)
        freq = rng.uniform(0.75, 2.25, size=j)
        phase = rng.uniform(0.0, 2 * np.pi, size=j)
        center = np.stack(
            [rng.uniform(0.35 * (h - 1), 0.65 * (h - 1), size=j),
             rng.uniform(0.35 * (w - 1), 0.65 * (w - 1), size=j)],
            axis=1,
        )
        amp = np.stack(
            [rng.uniform(0.15 * h, 0.3 * h, size=j),
             rng.uniform(0.15 * w, 0.3 * w, size=j)],
            axis=1,
        )
        templates.append(MotionTemplate(k, freq, phase, center, amp))
    for a, b, off in cfg.ambiguous_pairs:
        src = templates[a]
        templates[b] = MotionTemplate(
            label=b,
            freq=src.freq.copy(),
            phase=src.phase + 2 * np.pi * off,
            center=src.center.copy(),
            amp=src.amp.copy(),
        )
    return templates


def joint_positions(
    template: MotionTemplate,
    cfg: GenConfig,
    phase_jitter: np.ndarray,
    center_jitter: np.ndarray,
) -> np.ndarray:
    """Jittered per-joint trajectory, shape (t_pose, J, 2), clamped on-grid."""
    t = np.arange(cfg.t_pose)[:, None] / cfg.t_pose
    theta = 2 * np.pi * template.freq[None, :] * t + template.phase[None, :] + phase_jitter[None, :]
    rows = template.center[None, :, 0] + center_jitter[None, :, 0] + template.amp[None, :, 0] * np.sin(theta)
    cols = template.center[None, :, 1] + center_jitter[None, :, 1] + template.amp[None, :, 1] * np.cos(theta)
    rows = np.clip(rows, 1.0, cfg.height - 2.0)
    cols = np.clip(cols, 1.0, cfg.width - 2.0)
    return np.stack([rows, cols], axis=2)


def _blobs(positions: np.ndarray, h: int, w: int) -> np.ndarray:
    """Gaussian blobs for (T, J, 2) positions -> (T, J, H, W), peak value ~1."""
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    d2 = (rr[None, None] - positions[..., 0, None, None]) ** 2 \
        + (cc[None, None] - positions[..., 1, None, None]) ** 2
    return np.exp(-d2 / (2 * BLOB_SIGMA**2))


def joint_colors(n_joints: int) -> np.ndarray:
    """Fixed per-joint RGB palette, shape (J, 3), values in [0, 1]."""
    return np.array(
        [colorsys.hsv_to_rgb(j / n_joints, 1.0, 1.0) for j in range(n_joints)],
        dtype=np.float64,
    )


def render_clip(
    template: MotionTemplate, jitter_seed: int, cfg: GenConfig, clip_id: str = ""
) -> ClipSample:
    """Render one clip; deterministic given (template, jitter_seed, cfg)."""
    rng = np.random.default_rng(jitter_seed)
    phase_jitter = rng.standard_normal(cfg.n_joints) * cfg.intra_noise
    center_jitter = rng.standard_normal((cfg.n_joints, 2)) * cfg.intra_noise

    positions = joint_positions(template, cfg, phase_jitter, center_jitter)
    pose = _blobs(positions, cfg.height, cfg.width)  # (t_pose, J, H, W)

    colors = joint_colors(cfg.n_joints)
    rgb_frames = pose[:: cfg.stride]  # (t_rgb, J, H, W): pose frame stride*i
    rgb = np.einsum("tjhw,jc->tchw", rgb_frames, colors)
    rgb = np.clip(rgb, 0.0, 1.0)

    return ClipSample(
        clip_id=clip_id,
        label=template.label,
        rgb=rgb.astype(np.float32),
        pose=pose.astype(np.float32),
    )


def generate(cfg: GenConfig, out_dir) -> DatasetManifest:
    """Generate the full dataset under out_dir and write its manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "rgb").mkdir(parents=True, exist_ok=True)
    (out_dir / "pose").mkdir(parents=True, exist_ok=True)

    templates = make_templates(cfg)
    per_split = {
        "train": cfg.clips_per_class_train,
        "val": cfg.clips_per_class_val,
        "test": cfg.clips_per_class_test,
    }
    entries = []
    for split, count in per_split.items():
        for k in range(cfg.num_classes):
            for i in range(count):
                clip_id = f"{split}_c{k:02d}_{i:03d}"
                sample = render_clip(
                    templates[k], derive_jitter_seed(cfg.seed, clip_id), cfg, clip_id
                )
                rgb_rel = f"rgb/{clip_id}.mgt"
                pose_rel = f"pose/{clip_id}.mgt"
                tensorio.write_tensor(out_dir / rgb_rel, sample.rgb)
                tensorio.write_tensor(out_dir / pose_rel, sample.pose)
                entries.append(ManifestEntry(clip_id, k, rgb_rel, pose_rel, split))

    manifest = DatasetManifest(
        num_classes=cfg.num_classes,
        class_names=[f"g{k:02d}" for k in range(cfg.num_classes)],
        entries=entries,
        root=out_dir,
    )
    tensorio.save_manifest(manifest, out_dir / "manifest.txt")
    return manifest


__all__ = [
    "BLOB_SIGMA",
    "GenConfig",
    "MotionTemplate",
    "ClipSample",
    "make_templates",
    "joint_positions",
    "joint_colors",
    "derive_jitter_seed",
    "render_clip",
    "generate",
]
