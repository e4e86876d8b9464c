"""Training protocol: per-branch pretraining, joint fine-tuning, evaluation.

The optimizer is SGD with momentum and weight decay; the learning rate
starts at `lr` and is multiplied by `lr_drop_factor` at each epoch listed in
`lr_drop_epochs`. Cross-entropy is applied per branch (their sum in the
joint stage); the prototypical refinement loss joins the objective as
`alpha * sum over enabled branches`, each branch keeping its own prototype
bank. The 1:1 probability fusion is inference-only.

Runs are deterministic given the seed: parameter init comes from the global
torch generator seeded once, batch order is drawn from a per-epoch stream
derived from (seed, epoch), and prototype banks get their own derived
streams. Re-running the same configuration reproduces the loss trajectory
bit for bit.

A run directory contains:

    run_manifest.txt   config snapshot (reusable via `--config`), git hash,
                       timestamps, artifact paths (written before training)
    run_record.txt     one row per epoch: lr, losses, train/val top-1
    checkpoints/{init,best,final}/
    proto_drift.txt    per-epoch prototype drift (when the PRM is active)
"""

from __future__ import annotations

import dataclasses
import datetime
import subprocess
from dataclasses import dataclass, field, replace
from hashlib import sha256
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import net, protoref, tensorio
from .errors import NumericalError, ValidationError
from .net import (
    BranchConfig,
    BranchNet,
    NetConfig,
    TwoStreamNet,
    confusion_matrix,
    fuse_probs,
    top1_accuracy,
)
from .tensorio import DatasetManifest, PredictionFile
from .xfuse import FusionConfig

STAGES = ("rgb", "pose", "joint")
_STAGE_ALIASES = {"rgb_only": "rgb", "pose_only": "pose"}
PRM_BRANCHES = ("rgb", "pose", "both", "none")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    lr: float = 0.0075
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_epochs: tuple[int, ...] = (8, 22)
    lr_drop_factor: float = 0.1
    alpha: float = 0.5
    tau: float = 0.1
    rho: float = 0.9
    seed: int = 0
    stage: str = "joint"
    prm_branch: str = "both"
    prm_in_pretrain: bool = False
    fusion: bool = True
    attention_source: str = "cross"
    gate_activation: str = "sigmoid"
    stage_channels: tuple[int, int] = (16, 32)
    embed_dim: int = 64
    hidden_dim: int = 16
    lateral_channels: int = 16

    def __post_init__(self):
        self.stage = _STAGE_ALIASES.get(self.stage, self.stage)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        drops = tuple(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValidationError("lr_drop_epochs must be strictly increasing")
        if any(not 0 <= d < self.epochs for d in drops):
            raise ValidationError("lr_drop_epochs must lie in [0, epochs)")
        if self.lr_drop_factor <= 0:
            raise ValidationError("lr_drop_factor must be positive")
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if not 0 <= self.rho <= 1:
            raise ValidationError("rho must be in [0, 1]")
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.prm_branch not in PRM_BRANCHES:
            raise ValidationError(f"prm_branch must be one of {PRM_BRANCHES}")

    def prm_branches(self) -> tuple[str, ...]:
        """Branches whose refinement loss is active for this run."""
        if self.alpha == 0 or self.prm_branch == "none":
            return ()
        if self.stage != "joint" and not self.prm_in_pretrain:
            return ()
        enabled = ("rgb", "pose") if self.prm_branch == "both" else (self.prm_branch,)
        if self.stage != "joint":
            enabled = tuple(b for b in enabled if b == self.stage)
        return enabled


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for an epoch: lr * factor^(number of drops <= epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    n_drops = sum(1 for d in cfg.lr_drop_epochs if d <= epoch)
    return cfg.lr * cfg.lr_drop_factor**n_drops


def _derive(*parts) -> int:
    digest = sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# data


@dataclass
class ClipArrays:
    clip_ids: list[str]
    labels: np.ndarray     # (N,) int64
    rgb: torch.Tensor      # (N, 3, t_rgb, H, W)
    pose: torch.Tensor     # (N, J, t_pose, H, W)


def load_split(manifest: DatasetManifest, split: str) -> ClipArrays:
    entries = manifest.split_entries(split)
    if not entries:
        raise ValidationError(f"split {split!r} is empty")
    rgb = np.stack([tensorio.read_tensor(manifest.resolve(e.rgb_path)) for e in entries])
    pose = np.stack([tensorio.read_tensor(manifest.resolve(e.pose_path)) for e in entries])
    return ClipArrays(
        clip_ids=[e.clip_id for e in entries],
        labels=np.array([e.label for e in entries], dtype=np.int64),
        rgb=torch.from_numpy(rgb.transpose(0, 2, 1, 3, 4).copy()),
        pose=torch.from_numpy(pose.transpose(0, 2, 1, 3, 4).copy()),
    )


# ---------------------------------------------------------------------------
# model construction and checkpoint metadata


def _branch_cfg(cfg: TrainConfig, in_channels: int) -> BranchConfig:
    return BranchConfig(
        in_channels=in_channels,
        stage_channels=tuple(cfg.stage_channels),
        embed_dim=cfg.embed_dim,
    )


def build_model(cfg: TrainConfig, num_classes: int, rgb_channels: int,
                pose_channels: int, t_rgb: int, t_pose: int) -> torch.nn.Module:
    if cfg.stage == "rgb":
        return BranchNet(_branch_cfg(cfg, rgb_channels), num_classes, "rgb")
    if cfg.stage == "pose":
        return BranchNet(_branch_cfg(cfg, pose_channels), num_classes, "pose")
    fusion = None
    if cfg.fusion:
        fusion = FusionConfig(
            hidden_dim=cfg.hidden_dim,
            attention_source=cfg.attention_source,
            gate_activation=cfg.gate_activation,
            lateral_channels=cfg.lateral_channels,
        )
    net_cfg = NetConfig(
        num_classes=num_classes, t_rgb=t_rgb, t_pose=t_pose,
        rgb=_branch_cfg(cfg, rgb_channels), pose=_branch_cfg(cfg, pose_channels),
        fusion=fusion,
    )
    return TwoStreamNet(net_cfg)


def model_meta(cfg: TrainConfig, num_classes: int, rgb_channels: int,
               pose_channels: int, t_rgb: int, t_pose: int) -> dict[str, str]:
    return {
        "stage": cfg.stage,
        "num_classes": str(num_classes),
        "rgb_channels": str(rgb_channels),
        "pose_channels": str(pose_channels),
        "t_rgb": str(t_rgb),
        "t_pose": str(t_pose),
        "stage_channels": ",".join(str(c) for c in cfg.stage_channels),
        "embed_dim": str(cfg.embed_dim),
        "fusion": "on" if (cfg.stage == "joint" and cfg.fusion) else "off",
        "hidden_dim": str(cfg.hidden_dim),
        "attention_source": cfg.attention_source,
        "gate_activation": cfg.gate_activation,
        "lateral_channels": str(cfg.lateral_channels),
        "rho": repr(cfg.rho),
    }


def model_from_meta(meta: dict[str, str]) -> torch.nn.Module:
    try:
        cfg = TrainConfig(
            stage=meta["stage"],
            stage_channels=tuple(int(c) for c in meta["stage_channels"].split(",")),
            embed_dim=int(meta["embed_dim"]),
            fusion=meta.get("fusion", "off") == "on",
            hidden_dim=int(meta.get("hidden_dim", "16")),
            attention_source=meta.get("attention_source", "cross"),
            gate_activation=meta.get("gate_activation", "sigmoid"),
            lateral_channels=int(meta.get("lateral_channels", "16")),
        )
        return build_model(
            cfg,
            num_classes=int(meta["num_classes"]),
            rgb_channels=int(meta["rgb_channels"]),
            pose_channels=int(meta["pose_channels"]),
            t_rgb=int(meta["t_rgb"]),
            t_pose=int(meta["t_pose"]),
        )
    except KeyError as exc:
        raise ValidationError(f"checkpoint meta missing key {exc}")


def load_model(ckpt_dir) -> tuple[torch.nn.Module, dict[str, str]]:
    meta, tensors = net.load_checkpoint(ckpt_dir)
    model = model_from_meta(meta)
    net.load_model_state(model, tensors)
    return model, meta


# ---------------------------------------------------------------------------
# run records


_COLUMNS = (
    "epoch", "lr", "loss_ce", "loss_pr", "loss_total",
    "train_top1_rgb", "train_top1_pose", "train_top1_fused",
    "val_top1_rgb", "val_top1_pose", "val_top1_fused",
)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_ce: float
    loss_pr: float
    loss_total: float
    train_top1_rgb: float
    train_top1_pose: float
    train_top1_fused: float
    val_top1_rgb: float
    val_top1_pose: float
    val_top1_fused: float


@dataclass
class RunRecord:
    rows: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str = ""
    final_checkpoint: str = ""
    init_checkpoint: str = ""

    def save(self, path) -> None:
        lines = ["# protogest run record", "version 1", "columns " + " ".join(_COLUMNS)]
        for r in self.rows:
            vals = [str(r.epoch)] + [repr(getattr(r, c)) for c in _COLUMNS[1:]]
            lines.append("row " + " ".join(vals))
        lines.append(f"best_epoch {self.best_epoch}")
        lines.append(f"best_checkpoint {self.best_checkpoint}")
        lines.append(f"final_checkpoint {self.final_checkpoint}")
        lines.append(f"init_checkpoint {self.init_checkpoint}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunRecord":
        rec = cls()
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith(("version", "columns")):
                continue
            parts = line.split()
            if parts[0] == "row":
                if len(parts) != len(_COLUMNS) + 1:
                    raise ValidationError(f"{path}:{ln}: bad row width")
                rec.rows.append(EpochStats(
                    int(parts[1]), *(float(v) for v in parts[2:])
                ))
            elif parts[0] == "best_epoch":
                rec.best_epoch = int(parts[1])
            elif parts[0] in ("best_checkpoint", "final_checkpoint", "init_checkpoint"):
                setattr(rec, parts[0], parts[1] if len(parts) > 1 else "")
            else:
                raise ValidationError(f"{path}:{ln}: malformed line {line!r}")
        return rec


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _config_lines(cfg: TrainConfig) -> list[str]:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{f.name} {value}")
    return lines


def write_run_manifest(path, cfg: TrainConfig, data: str, out_dir: str,
                       init_paths: dict[str, str]) -> None:
    """Snapshot of everything needed to reproduce the run.

    Non-comment lines are `key value` pairs understood by `protogest train
    --config <this file>`.
    """
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    lines = [
        "# protogest run manifest",
        f"# created_utc: {stamp}",
        f"# git: {_git_describe()}",
        "# artifact run_record: run_record.txt",
        "# artifact checkpoints: checkpoints/",
        f"data {data}",
        f"out {out_dir}",
    ]
    for key, value in init_paths.items():
        lines.append(f"{key} {value}")
    lines += _config_lines(cfg)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# forward/eval helpers


def _model_probs(model: torch.nn.Module, arrays: ClipArrays,
                 batch_size: int = 64) -> dict[str, np.ndarray]:
    """Per-branch probabilities over a whole split, in eval mode."""
    was_training = model.training
    model.eval()
    outs: dict[str, list[np.ndarray]] = {}
    with torch.no_grad():
        for start in range(0, len(arrays.clip_ids), batch_size):
            sl = slice(start, start + batch_size)
            if isinstance(model, TwoStreamNet):
                o_rgb, o_pose = model(arrays.rgb[sl], arrays.pose[sl])
                outs.setdefault("rgb", []).append(o_rgb.probs.numpy())
                outs.setdefault("pose", []).append(o_pose.probs.numpy())
            else:
                clips = arrays.rgb[sl] if model.modality == "rgb" else arrays.pose[sl]
                out = model(clips)
                outs.setdefault(model.modality, []).append(out.probs.numpy())
    if was_training:
        model.train()
    return {k: np.concatenate(v) for k, v in outs.items()}


def _fused_from(probs: dict[str, np.ndarray]) -> np.ndarray:
    if "rgb" in probs and "pose" in probs:
        return fuse_probs(probs["rgb"], probs["pose"])
    return next(iter(probs.values()))


def _split_top1(probs: dict[str, np.ndarray], labels: np.ndarray) -> tuple[float, float, float]:
    t_rgb = top1_accuracy(probs["rgb"], labels) if "rgb" in probs else float("nan")
    t_pose = top1_accuracy(probs["pose"], labels) if "pose" in probs else float("nan")
    t_fused = top1_accuracy(_fused_from(probs), labels)
    return t_rgb, t_pose, t_fused


# ---------------------------------------------------------------------------
# training


def train(
    manifest: DatasetManifest | str | Path,
    cfg: TrainConfig,
    out_dir,
    init_rgb=None,
    init_pose=None,
    init_checkpoint=None,
) -> RunRecord:
    """Run one training stage and write its artifacts under out_dir."""
    cfg.validate()
    if isinstance(manifest, (str, Path)):
        manifest = tensorio.load_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    init_paths = {}
    if init_rgb:
        init_paths["init_rgb"] = str(init_rgb)
    if init_pose:
        init_paths["init_pose"] = str(init_pose)
    if init_checkpoint:
        init_paths["init_checkpoint"] = str(init_checkpoint)
    write_run_manifest(out_dir / "run_manifest.txt", cfg,
                       data=str(manifest.root), out_dir=str(out_dir),
                       init_paths=init_paths)

    train_arr = load_split(manifest, "train")
    val_arr = load_split(manifest, "val")
    num_classes = manifest.num_classes
    rgb_channels = train_arr.rgb.shape[1]
    pose_channels = train_arr.pose.shape[1]
    t_rgb, t_pose = train_arr.rgb.shape[2], train_arr.pose.shape[2]

    torch.manual_seed(cfg.seed)
    model = build_model(cfg, num_classes, rgb_channels, pose_channels, t_rgb, t_pose)
    if cfg.stage == "joint" and (init_rgb or init_pose):
        if not (init_rgb and init_pose):
            raise ValidationError("joint init needs both --init-rgb and --init-pose")
        _, rgb_tensors = net.load_checkpoint(init_rgb)
        _, pose_tensors = net.load_checkpoint(init_pose)
        net.init_joint_from_branches(model, rgb_tensors, pose_tensors)
    if init_checkpoint:
        _, tensors = net.load_checkpoint(init_checkpoint)
        net.load_model_state(model, tensors)

    meta = model_meta(cfg, num_classes, rgb_channels, pose_channels, t_rgb, t_pose)
    ckpt_root = out_dir / "checkpoints"
    net.save_checkpoint(ckpt_root / "init", model, meta)

    prm_branches = cfg.prm_branches()
    banks = {
        b: protoref.PrototypeBank.random_init(
            num_classes, cfg.embed_dim, rho=cfg.rho, seed=_derive(cfg.seed, "bank", b))
        for b in prm_branches
    }
    bank_init = {b: bank.protos.clone() for b, bank in banks.items()}
    drift_rows: list[str] = []

    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    labels_t = torch.from_numpy(train_arr.labels)
    n_train = len(train_arr.clip_ids)
    record = RunRecord(init_checkpoint=str(ckpt_root / "init"))
    best_val = -1.0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = np.random.default_rng(_derive(cfg.seed, "order", epoch)).permutation(n_train)
        step_ce, step_pr, step_total = [], [], []
        for start in range(0, n_train, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            labels_b = labels_t[idx]
            try:
                if cfg.stage == "joint":
                    out_rgb, out_pose = model(train_arr.rgb[idx], train_arr.pose[idx])
                    branch_outs = {"rgb": out_rgb, "pose": out_pose}
                    ce = (F.cross_entropy(out_rgb.logits, labels_b)
                          + F.cross_entropy(out_pose.logits, labels_b))
                else:
                    clips = train_arr.rgb[idx] if cfg.stage == "rgb" else train_arr.pose[idx]
                    out = model(clips)
                    branch_outs = {cfg.stage: out}
                    ce = F.cross_entropy(out.logits, labels_b)

                pr = ce.new_zeros(())
                parts = {}
                for b in prm_branches:
                    o = branch_outs[b]
                    parts[b] = protoref.partition_batch(o.probs, labels_b.numpy())
                    pr = pr + protoref.proto_loss(banks[b], parts[b], o.embed,
                                                  o.probs, cfg.tau)
                # bank EMA update follows the forward pass, outside the graph
                for b in prm_branches:
                    banks[b].update(parts[b], branch_outs[b].embed)

                loss = ce + cfg.alpha * pr if prm_branches else ce
                if not torch.isfinite(loss):
                    raise NumericalError("training loss is non-finite")
            except NumericalError as exc:
                _dump_bad_batch(out_dir, epoch, start // cfg.batch_size,
                                [train_arr.clip_ids[i] for i in idx.tolist()], exc)
                raise
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step_ce.append(float(ce.detach()))
            step_pr.append(float(pr.detach()))
            step_total.append(float(loss.detach()))

        train_top1 = _split_top1(_model_probs(model, train_arr), train_arr.labels)
        val_top1 = _split_top1(_model_probs(model, val_arr), val_arr.labels)
        record.rows.append(EpochStats(
            epoch=epoch, lr=lr,
            loss_ce=float(np.mean(step_ce)),
            loss_pr=float(np.mean(step_pr)),
            loss_total=float(np.mean(step_total)),
            train_top1_rgb=train_top1[0], train_top1_pose=train_top1[1],
            train_top1_fused=train_top1[2],
            val_top1_rgb=val_top1[0], val_top1_pose=val_top1[1],
            val_top1_fused=val_top1[2],
        ))
        for b in prm_branches:
            drift = banks[b].drift_from(bank_init[b])
            drift_rows.append(f"drift {epoch} {b} " + " ".join(repr(float(v)) for v in drift))
        if val_top1[2] > best_val:
            best_val = val_top1[2]
            record.best_epoch = epoch
            _save_with_banks(ckpt_root / "best", model, meta, banks)

    _save_with_banks(ckpt_root / "final", model, meta, banks)
    record.best_checkpoint = str(ckpt_root / "best")
    record.final_checkpoint = str(ckpt_root / "final")
    record.save(out_dir / "run_record.txt")
    if drift_rows:
        (out_dir / "proto_drift.txt").write_text(
            "# prototype drift: cosine of each prototype to its initial value\n"
            + "\n".join(drift_rows) + "\n", encoding="utf-8")
    return record


def _save_with_banks(ckpt_dir, model, meta, banks) -> None:
    extra = {f"bank_{b}": bank.protos.numpy() for b, bank in banks.items()}
    net.save_checkpoint(ckpt_dir, model, meta, extra_tensors=extra)


def _dump_bad_batch(out_dir: Path, epoch: int, step: int,
                    clip_ids: list[str], exc: Exception) -> None:
    lines = [
        "# diagnostic dump: non-finite loss",
        f"epoch {epoch}",
        f"step {step}",
        f"error {exc}",
        "clips " + " ".join(clip_ids),
    ]
    (out_dir / "diagnostic_dump.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# evaluation and ensembling


@dataclass
class EvalMetrics:
    split: str
    n: int
    top1_rgb: float
    top1_pose: float
    top1_fused: float
    confusion: np.ndarray  # (K, K) counts[true, predicted] of fused argmax


def evaluate(manifest: DatasetManifest | str | Path, ckpt_dir, split: str,
             pred_out=None, batch_size: int = 64) -> EvalMetrics:
    """Deterministic evaluation of a checkpoint on one split."""
    if isinstance(manifest, (str, Path)):
        manifest = tensorio.load_manifest(manifest)
    model, _ = load_model(ckpt_dir)
    arrays = load_split(manifest, split)
    probs = _model_probs(model, arrays, batch_size=batch_size)
    fused = _fused_from(probs)
    top1 = _split_top1(probs, arrays.labels)
    metrics = EvalMetrics(
        split=split, n=len(arrays.clip_ids),
        top1_rgb=top1[0], top1_pose=top1[1], top1_fused=top1[2],
        confusion=confusion_matrix(fused, arrays.labels, manifest.num_classes),
    )
    if pred_out is not None:
        pred = PredictionFile(clip_ids=arrays.clip_ids, probs=fused.astype(np.float32))
        tensorio.save_predictions(pred, pred_out)
    return metrics


def ensemble(preds: list[PredictionFile], weights: list[float]) -> PredictionFile:
    """Weighted average of probability rows, re-normalized; order preserved."""
    if not preds:
        raise ValidationError("ensemble needs at least one prediction file")
    if len(weights) != len(preds):
        raise ValidationError(f"{len(preds)} files but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValidationError("weights must be >= 0")
    total = float(sum(weights))
    if total <= 0:
        raise ValidationError("weights must sum to > 0")
    first = preds[0]
    for p in preds:
        tensorio.validate_predictions(p)
        if p.probs.shape != first.probs.shape:
            raise ValidationError("prediction files disagree on shape")
        if p.clip_ids != first.clip_ids:
            raise ValidationError("prediction files disagree on clip ids or order")
    acc = np.zeros(first.probs.shape, dtype=np.float64)
    for p, w in zip(preds, weights):
        acc += (w / total) * p.probs.astype(np.float64)
    acc /= acc.sum(axis=1, keepdims=True)
    return PredictionFile(clip_ids=list(first.clip_ids), probs=acc.astype(np.float32))


# ---------------------------------------------------------------------------
# mechanism comparison: CE vs CE+PRM vs CE+PRM+fusion


MECHANISM_VARIANTS = ("ce", "ce_prm", "ce_prm_fusion")


@dataclass
class MechanismDelta:
    seeds: tuple[int, ...]
    # variant -> per-seed fused test top-1, in seed order
    results: dict[str, list[float]]

    def mean(self, variant: str) -> float:
        return float(np.mean(self.results[variant]))

    def markdown(self) -> str:
        lines = [
            "| variant | " + " | ".join(f"seed {s}" for s in self.seeds)
            + " | mean fused test top-1 |",
            "|---|" + "---|" * (len(self.seeds) + 1),
        ]
        for variant in MECHANISM_VARIANTS:
            vals = " | ".join(f"{v:.4f}" for v in self.results[variant])
            lines.append(f"| {variant} | {vals} | {self.mean(variant):.4f} |")
        return "\n".join(lines)


def mechanism_delta(manifest: DatasetManifest | str | Path, cfg: TrainConfig,
                    seeds: tuple[int, ...], work_dir) -> MechanismDelta:
    """Train the three mechanism variants per seed and collect test top-1.

    Per seed: both branches are pretrained once (cross-entropy only), then
    three joint runs share those initial weights: plain CE, CE plus the
    refinement loss, and CE plus refinement plus cross-modal fusion.
    """
    if isinstance(manifest, (str, Path)):
        manifest = tensorio.load_manifest(manifest)
    work_dir = Path(work_dir)
    alpha = cfg.alpha if cfg.alpha > 0 else 0.5
    results: dict[str, list[float]] = {v: [] for v in MECHANISM_VARIANTS}
    for seed in seeds:
        seed_dir = work_dir / f"seed{seed}"
        pretrain = {}
        for branch in ("rgb", "pose"):
            branch_cfg = replace(cfg, stage=branch, seed=seed, alpha=0.0)
            rec = train(manifest, branch_cfg, seed_dir / branch)
            pretrain[branch] = rec.best_checkpoint
        variant_cfgs = {
            "ce": replace(cfg, stage="joint", seed=seed, alpha=0.0, fusion=False),
            "ce_prm": replace(cfg, stage="joint", seed=seed, alpha=alpha,
                              prm_branch="both", fusion=False),
            "ce_prm_fusion": replace(cfg, stage="joint", seed=seed, alpha=alpha,
                                     prm_branch="both", fusion=True),
        }
        for variant, vcfg in variant_cfgs.items():
            rec = train(manifest, vcfg, seed_dir / variant,
                        init_rgb=pretrain["rgb"], init_pose=pretrain["pose"])
            metrics = evaluate(manifest, rec.best_checkpoint, "test")
            results[variant].append(metrics.top1_fused)
    return MechanismDelta(seeds=tuple(seeds), results=results)


__all__ = [
    "STAGES",
    "PRM_BRANCHES",
    "TrainConfig",
    "lr_at",
    "ClipArrays",
    "load_split",
    "build_model",
    "model_meta",
    "model_from_meta",
    "load_model",
    "EpochStats",
    "RunRecord",
    "write_run_manifest",
    "train",
    "EvalMetrics",
    "evaluate",
    "ensemble",
    "MechanismDelta",
    "MECHANISM_VARIANTS",
    "mechanism_delta",
]
