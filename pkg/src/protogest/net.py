"""Two-pathway encoder with classification heads and 1:1 probability fusion.

Each branch is a small 3-D CNN: two conv stages (conv -> group norm -> ReLU,
strided in time and space), a global max pool, a linear embedding layer, and
a linear classification head with softmax. The cross-modal fusion block, when
enabled, mixes the two branches' stage-1 feature maps before stage 2 runs.

The branches are configured so the pose pathway keeps an integer multiple of
the RGB temporal length after stage 1 (the "stride ratio"); the fusion block
and its lateral connections rely on that contract.

Checkpoints are a directory of MGC1 tensor blobs plus a text index mapping
parameter names to files, with free-form metadata lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .errors import ContractError, NumericalError, ValidationError
from .xfuse import CrossModalFusion, FusionConfig

NORM_GROUPS = 4


def conv_out_len(n: int, stride: int) -> int:
    """Output length of a k=3, pad=1 conv along one axis."""
    return (n - 1) // stride + 1


@dataclass
class BranchConfig:
    in_channels: int
    stage_channels: tuple[int, int] = (16, 32)
    temporal_strides: tuple[int, int] = (2, 2)
    spatial_strides: tuple[int, int] = (2, 2)
    embed_dim: int = 64

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        if len(self.stage_channels) != 2 or len(self.temporal_strides) != 2 \
                or len(self.spatial_strides) != 2:
            raise ValidationError("branch configs describe exactly two stages")
        if any(c < 1 for c in self.stage_channels):
            raise ValidationError("stage_channels must be positive")
        if any(s < 1 for s in self.temporal_strides + self.spatial_strides):
            raise ValidationError("strides must be positive")
        if any(c % NORM_GROUPS != 0 for c in self.stage_channels):
            raise ValidationError(
                f"stage_channels must be divisible by {NORM_GROUPS} (group norm)"
            )
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")

    def temporal_out(self, t_in: int, through_stage: int = 2) -> int:
        t = t_in
        for s in self.temporal_strides[:through_stage]:
            t = conv_out_len(t, s)
        return t

    def spatial_out(self, n_in: int, through_stage: int = 2) -> int:
        n = n_in
        for s in self.spatial_strides[:through_stage]:
            n = conv_out_len(n, s)
        return n


@dataclass
class NetConfig:
    num_classes: int
    t_rgb: int = 8
    t_pose: int = 32
    rgb: BranchConfig = field(default_factory=lambda: BranchConfig(in_channels=3))
    pose: BranchConfig = field(default_factory=lambda: BranchConfig(in_channels=5))
    fusion: FusionConfig | None = field(default_factory=FusionConfig)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        self.rgb.validate()
        self.pose.validate()
        if self.fusion is not None:
            self.fusion.validate()
        # temporal contract: stage-1 and final pose lengths must be integer
        # multiples of the rgb ones, so lateral connections have a clean stride
        for stage in (1, 2):
            t_r = self.rgb.temporal_out(self.t_rgb, stage)
            t_p = self.pose.temporal_out(self.t_pose, stage)
            if t_p % t_r != 0:
                raise ContractError(
                    f"after stage {stage}, pose T={t_p} is not an integer "
                    f"multiple of rgb T={t_r}"
                )

    @property
    def stage1_stride_ratio(self) -> int:
        return self.pose.temporal_out(self.t_pose, 1) // self.rgb.temporal_out(self.t_rgb, 1)


@dataclass
class BranchOutput:
    feat_map: torch.Tensor  # (N, C, T', H', W')
    embed: torch.Tensor     # (N, D)
    logits: torch.Tensor    # (N, K)
    probs: torch.Tensor     # (N, K), rows sum to 1


def _check_finite(t: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in tensor {name!r}")
    return t


def _stage(in_ch: int, out_ch: int, t_stride: int, s_stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3,
                  stride=(t_stride, s_stride, s_stride), padding=1),
        nn.GroupNorm(NORM_GROUPS, out_ch),
        nn.ReLU(),
    )


class BranchEncoder(nn.Module):
    """One pathway: two conv stages plus embedding and classification head."""

    def __init__(self, cfg: BranchConfig, num_classes: int, lateral_in: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.lateral_in = lateral_in
        c1, c2 = cfg.stage_channels
        self.stage1 = _stage(cfg.in_channels, c1,
                             cfg.temporal_strides[0], cfg.spatial_strides[0])
        self.stage2 = _stage(c1 + lateral_in, c2,
                             cfg.temporal_strides[1], cfg.spatial_strides[1])
        self.embed = nn.Linear(c2, cfg.embed_dim)
        self.classifier = nn.Linear(cfg.embed_dim, num_classes)

    def head(self, feat_map: torch.Tensor, name: str = "feat") -> BranchOutput:
        pooled = feat_map.amax(dim=(2, 3, 4))
        emb = _check_finite(self.embed(pooled), f"{name}.embed")
        logits = _check_finite(self.classifier(emb), f"{name}.logits")
        probs = torch.softmax(logits, dim=1)
        return BranchOutput(feat_map=feat_map, embed=emb, logits=logits, probs=probs)

    def forward(self, x: torch.Tensor, name: str = "branch") -> BranchOutput:
        h = _check_finite(self.stage1(x), f"{name}.stage1")
        f = _check_finite(self.stage2(h), f"{name}.stage2")
        return self.head(f, name)


class BranchNet(nn.Module):
    """Single-modality model used for per-branch pretraining."""

    def __init__(self, cfg: BranchConfig, num_classes: int, modality: str = "rgb"):
        super().__init__()
        if modality not in ("rgb", "pose"):
            raise ValidationError(f"modality must be rgb or pose, got {modality!r}")
        self.num_classes = num_classes
        self.modality = modality
        self.branch = BranchEncoder(cfg, num_classes)

    def forward(self, clips: torch.Tensor) -> BranchOutput:
        return self.branch(clips, self.modality)


class TwoStreamNet(nn.Module):
    """Joint RGB+pose model with optional cross-modal fusion."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.net_cfg = cfg
        self.num_classes = cfg.num_classes
        lateral = cfg.fusion.lateral_channels if cfg.fusion is not None else 0
        self.rgb = BranchEncoder(cfg.rgb, cfg.num_classes, lateral_in=lateral)
        self.pose = BranchEncoder(cfg.pose, cfg.num_classes, lateral_in=lateral)
        if cfg.fusion is not None:
            self.fusion = CrossModalFusion(
                cfg.fusion,
                rgb_channels=cfg.rgb.stage_channels[0],
                pose_channels=cfg.pose.stage_channels[0],
                rgb_t=cfg.rgb.temporal_out(cfg.t_rgb, 1),
                stride_ratio=cfg.stage1_stride_ratio,
            )
        else:
            self.fusion = None

    def encode(
        self, rgb_clips: torch.Tensor, pose_clips: torch.Tensor
    ) -> tuple[BranchOutput, BranchOutput]:
        _check_finite(rgb_clips, "rgb_clips")
        _check_finite(pose_clips, "pose_clips")
        h_rgb = _check_finite(self.rgb.stage1(rgb_clips), "rgb.stage1")
        h_pose = _check_finite(self.pose.stage1(pose_clips), "pose.stage1")
        if self.fusion is not None:
            state = self.fusion(h_rgb, h_pose)
            h_rgb = _check_finite(state.out_rgb, "fusion.out_rgb")
            h_pose = _check_finite(state.out_pose, "fusion.out_pose")
        f_rgb = _check_finite(self.rgb.stage2(h_rgb), "rgb.stage2")
        f_pose = _check_finite(self.pose.stage2(h_pose), "pose.stage2")
        return self.rgb.head(f_rgb, "rgb"), self.pose.head(f_pose, "pose")

    def forward(self, rgb_clips, pose_clips):
        return self.encode(rgb_clips, pose_clips)


def fuse_probs(p_rgb: np.ndarray, p_pose: np.ndarray) -> np.ndarray:
    """Elementwise 1:1 mean of two probability matrices over the same classes."""
    p_rgb = np.asarray(p_rgb)
    p_pose = np.asarray(p_pose)
    if p_rgb.shape != p_pose.shape or p_rgb.ndim != 2:
        raise ValidationError(
            f"probability shapes differ: {p_rgb.shape} vs {p_pose.shape}"
        )
    for name, p in (("rgb", p_rgb), ("pose", p_pose)):
        if (p < 0).any() or (p > 1).any():
            raise ValidationError(f"{name} probabilities outside [0, 1]")
        if np.abs(p.astype(np.float64).sum(axis=1) - 1.0).max() > tensorio.ROW_SUM_TOL:
            raise ValidationError(f"{name} probability rows do not sum to 1")
    return (p_rgb + p_pose) / 2


def top1_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label.

    Ties resolve to the lowest class index (np.argmax convention).
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValidationError(f"probs must be a nonempty (N, K) matrix, got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ValidationError("labels must have one entry per probability row")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValidationError("label out of range")
    return float((probs.argmax(axis=1) == labels).mean())


def confusion_matrix(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts[true, predicted] from argmax predictions."""
    preds = np.asarray(probs).argmax(axis=1)
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(labels), preds):
        mat[int(t), int(p)] += 1
    return mat


# ---------------------------------------------------------------------------
# checkpoints: directory of tensor blobs + text index


def save_checkpoint(
    ckpt_dir,
    model: nn.Module,
    meta: dict[str, str] | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write model parameters (and extras) as MGC1 blobs plus an index file."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    named = {name: t.detach().cpu().numpy().astype(np.float32)
             for name, t in model.state_dict().items()}
    if extra_tensors:
        for name, arr in extra_tensors.items():
            if name in named:
                raise ValidationError(f"extra tensor name {name!r} collides with a parameter")
            named[name] = np.asarray(arr, dtype=np.float32)
    lines = ["# protogest checkpoint index", "version 1"]
    for key, value in (meta or {}).items():
        tensorio._check_token(key, "meta key")
        lines.append(f"meta {key} {value}")
    for i, (name, arr) in enumerate(named.items()):
        fname = f"t{i:04d}.mgt"
        tensorio.write_tensor(ckpt_dir / fname, arr)
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {fname} {dims}")
    (ckpt_dir / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(ckpt_dir) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read (meta, tensors) back from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    index = ckpt_dir / "index.txt"
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for ln, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line == "version 1":
            continue
        parts = line.split()
        if parts[0] == "meta" and len(parts) >= 3:
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "tensor" and len(parts) == 4:
            arr = tensorio.read_tensor(ckpt_dir / parts[2])
            declared = tuple(int(d) for d in parts[3].split(","))
            if arr.shape != declared:
                raise ValidationError(
                    f"{index}:{ln}: blob shape {arr.shape} != declared {declared}"
                )
            tensors[parts[1]] = arr
        else:
            raise ValidationError(f"{index}:{ln}: malformed line {line!r}")
    return meta, tensors


def load_model_state(model: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Load checkpoint tensors into a model, ignoring non-parameter extras."""
    state = {}
    expected = model.state_dict()
    for name, ref in expected.items():
        if name not in tensors:
            raise ValidationError(f"checkpoint missing parameter {name!r}")
        arr = tensors[name]
        if tuple(ref.shape) != arr.shape:
            raise ValidationError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != model {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)


def init_joint_from_branches(
    model: TwoStreamNet,
    rgb_tensors: dict[str, np.ndarray],
    pose_tensors: dict[str, np.ndarray],
) -> None:
    """Transplant pretrained single-branch weights into a joint model.

    Branch checkpoints come from BranchNet ("branch." prefix). Stage-2 conv
    weights land in the trailing input-channel slice when the joint model
    widened stage 2 for lateral features; fusion parameters keep their fresh
    initialization.
    """
    with torch.no_grad():
        for prefix, tensors in (("rgb", rgb_tensors), ("pose", pose_tensors)):
            encoder: BranchEncoder = getattr(model, prefix)
            for name, param in encoder.state_dict().items():
                src = tensors.get(f"branch.{name}")
                if src is None:
                    raise ValidationError(f"{prefix} checkpoint missing branch.{name}")
                dst = encoder
                *path, leaf = name.split(".")
                for p in path:
                    dst = getattr(dst, p) if not p.isdigit() else dst[int(p)]
                dst_param = getattr(dst, leaf)
                src_t = torch.from_numpy(src.copy())
                if tuple(dst_param.shape) == tuple(src_t.shape):
                    dst_param.copy_(src_t)
                elif name == "stage2.0.weight" and dst_param.shape[1] > src_t.shape[1]:
                    # lateral channels come first in the concat; own features last
                    lat = dst_param.shape[1] - src_t.shape[1]
                    dst_param[:, lat:].copy_(src_t)
                else:
                    raise ValidationError(
                        f"cannot transplant {prefix}.{name}: "
                        f"{tuple(src_t.shape)} -> {tuple(dst_param.shape)}"
                    )


__all__ = [
    "NORM_GROUPS",
    "conv_out_len",
    "BranchConfig",
    "NetConfig",
    "BranchOutput",
    "BranchEncoder",
    "BranchNet",
    "TwoStreamNet",
    "fuse_probs",
    "top1_accuracy",
    "confusion_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "load_model_state",
    "init_joint_from_branches",
]
