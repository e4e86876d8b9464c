"""Static plots and markdown summaries for finished runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import tensorio, trainer
from .errors import ValidationError
from .tensorio import read_kv_lines
from .trainer import MechanismDelta, RunRecord


def _epochs(record: RunRecord) -> list[int]:
    return [r.epoch for r in record.rows]


def plot_losses(record: RunRecord, out_path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = _epochs(record)
    ax.plot(xs, [r.loss_ce for r in record.rows], label="cross-entropy")
    ax.plot(xs, [r.loss_pr for r in record.rows], label="refinement")
    ax.plot(xs, [r.loss_total for r in record.rows], label="total", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_accuracy(record: RunRecord, out_path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = _epochs(record)
    for col, style in (("train_top1_fused", "-"), ("val_top1_fused", "--")):
        ax.plot(xs, [getattr(r, col) for r in record.rows], style, label=col)
    for col in ("val_top1_rgb", "val_top1_pose"):
        vals = [getattr(r, col) for r in record.rows]
        if not np.isnan(vals).all():
            ax.plot(xs, vals, ":", label=col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_confusion(confusion: np.ndarray, class_names: list[str], out_path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(confusion.shape[0]):
        for j in range(confusion.shape[1]):
            ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center",
                    fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_proto_drift(drift_path, out_path) -> None:
    """Per-epoch cosine similarity of each prototype to its initial value."""
    series: dict[str, dict[int, np.ndarray]] = {}
    for line in Path(drift_path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts or parts[0] != "drift":
            continue
        epoch, branch = int(parts[1]), parts[2]
        series.setdefault(branch, {})[epoch] = np.array([float(v) for v in parts[3:]])
    if not series:
        raise ValidationError(f"{drift_path}: no drift rows")
    fig, axes = plt.subplots(1, len(series), figsize=(5.5 * len(series), 4),
                             squeeze=False)
    for ax, (branch, rows) in zip(axes[0], sorted(series.items())):
        epochs = sorted(rows)
        mat = np.stack([rows[e] for e in epochs])  # (E, K)
        for k in range(mat.shape[1]):
            ax.plot(epochs, mat[:, k], label=f"class {k}")
        ax.set_title(f"{branch} prototypes")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cosine to initial prototype")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def run_report(run_dir, data=None, out_dir=None) -> list[Path]:
    """Render plots and a markdown summary for one training run directory."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord.load(run_dir / "run_record.txt")
    manifest_info = read_kv_lines(run_dir / "run_manifest.txt")
    data = data or manifest_info.get("data")
    if data is None:
        raise ValidationError("dataset path unknown: pass --data")

    written = []
    plot_losses(record, out_dir / "losses.png")
    written.append(out_dir / "losses.png")
    plot_accuracy(record, out_dir / "accuracy.png")
    written.append(out_dir / "accuracy.png")

    drift_path = run_dir / "proto_drift.txt"
    if drift_path.exists():
        plot_proto_drift(drift_path, out_dir / "proto_drift.png")
        written.append(out_dir / "proto_drift.png")

    manifest = tensorio.load_manifest(_resolve_manifest(data))
    lines = ["# Run report", "", f"- run directory: `{run_dir}`",
             f"- dataset: `{data}`", f"- best epoch: {record.best_epoch}", ""]
    for split in ("val", "test"):
        try:
            metrics = trainer.evaluate(manifest, record.best_checkpoint, split)
        except ValidationError:
            continue  # split may be empty
        plot_confusion(metrics.confusion, manifest.class_names,
                       out_dir / f"confusion_{split}.png")
        written.append(out_dir / f"confusion_{split}.png")
        lines.append(
            f"- {split}: fused top-1 {metrics.top1_fused:.4f} "
            f"(rgb {metrics.top1_rgb:.4f}, pose {metrics.top1_pose:.4f}, "
            f"n={metrics.n})"
        )
    lines += ["", "## Artifacts", ""]
    lines += [f"- `{p.name}`" for p in written]
    summary = out_dir / "summary.md"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary)
    return written


def _resolve_manifest(data) -> Path:
    data = Path(data)
    return data / "manifest.txt" if data.is_dir() else data


def mechanism_report(delta: MechanismDelta, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    body = [
        "# Mechanism comparison",
        "",
        "Mean fused test top-1 across seeds for the three training variants",
        "(reported, not gated: direction at toy scale is not guaranteed).",
        "",
        delta.markdown(),
        "",
    ]
    out_path.write_text("\n".join(body), encoding="utf-8")
    return out_path


__all__ = [
    "read_kv_lines",
    "plot_losses",
    "plot_accuracy",
    "plot_confusion",
    "plot_proto_drift",
    "run_report",
    "mechanism_report",
]
