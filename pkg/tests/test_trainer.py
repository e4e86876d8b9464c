import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from protogest import tensorio, trainer
from protogest.errors import ValidationError
from protogest.tensorio import DatasetManifest, PredictionFile
from protogest.trainer import TrainConfig, lr_at


def quick_cfg(**kw):
    defaults = dict(epochs=3, lr_drop_epochs=(2,), batch_size=6, seed=3, alpha=0.0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def rows_equal(r1, r2) -> bool:
    """Field-exact equality; single-branch rows carry NaN columns."""
    for f in dataclasses.fields(r1):
        a, b = getattr(r1, f.name), getattr(r2, f.name)
        if a != b and not (isinstance(a, float) and np.isnan(a) and np.isnan(b)):
            return False
    return True


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule_paper_values():
    cfg = TrainConfig()  # lr 0.0075, drops at 8 and 22, factor 0.1
    assert lr_at(0, cfg) == 0.0075
    assert lr_at(7, cfg) == 0.0075
    assert lr_at(8, cfg) == pytest.approx(0.00075, rel=1e-12)
    assert lr_at(21, cfg) == pytest.approx(0.00075, rel=1e-12)
    assert lr_at(22, cfg) == pytest.approx(0.000075, rel=1e-12)
    assert lr_at(29, cfg) == pytest.approx(0.000075, rel=1e-12)


def test_lr_factor_one_is_constant():
    cfg = TrainConfig(lr_drop_factor=1.0)
    assert all(lr_at(e, cfg) == 0.0075 for e in range(30))


def test_lr_epoch_bounds():
    with pytest.raises(ValidationError):
        lr_at(30, TrainConfig())
    with pytest.raises(ValidationError):
        lr_at(-1, TrainConfig())


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValidationError):
        TrainConfig(lr_drop_epochs=(22, 8)).validate()
    with pytest.raises(ValidationError):
        TrainConfig(lr_drop_epochs=(8, 30)).validate()
    with pytest.raises(ValidationError):
        TrainConfig(stage="nope").validate()
    # aliases accepted by the spec's naming
    assert TrainConfig(stage="rgb_only").stage == "rgb"
    assert TrainConfig(stage="pose_only").stage == "pose"


# ---------------------------------------------------------------------------
# optimizer semantics (torch SGD, Sutskever convention: buf = mu*buf + g)


def test_weight_decay_closed_form():
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    loss = (p * 0.0).sum()  # zero data gradient
    loss.backward()
    opt.step()
    # d = wd * p; p <- p - lr * d
    assert p.item() == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, rel=1e-15)


def test_momentum_two_step_closed_form():
    c, lr, mu = 2.0, 0.1, 0.9
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=lr, momentum=mu, weight_decay=0.0)

    def step():
        opt.zero_grad()
        loss = 0.5 * c * p.square().sum()
        loss.backward()
        opt.step()

    p0 = 1.0
    g1 = c * p0
    buf1 = g1
    p1 = p0 - lr * buf1
    step()
    assert abs(p.item() - p1) < 1e-12

    g2 = c * p1
    buf2 = mu * buf1 + g2
    p2 = p1 - lr * buf2
    step()
    assert abs(p.item() - p2) < 1e-12


# ---------------------------------------------------------------------------
# training runs


def test_two_runs_reproduce_losses_exactly(small_dataset, tmp_path):
    cfg = quick_cfg(stage="rgb")
    rec1 = trainer.train(small_dataset, cfg, tmp_path / "a")
    rec2 = trainer.train(small_dataset, cfg, tmp_path / "b")
    assert len(rec1.rows) == len(rec2.rows)
    for r1, r2 in zip(rec1.rows, rec2.rows):
        assert rows_equal(r1, r2)  # full-precision float equality


def _checkpoint_bytes(ckpt_dir):
    return {
        p.name: p.read_bytes() for p in sorted(Path(ckpt_dir).iterdir())
    }


def test_prm_toggle_bitwise_identical_trajectories(small_dataset, tmp_path):
    # alpha=0 must behave exactly as if the refinement module did not exist
    cfg_a = quick_cfg(stage="joint", alpha=0.0, prm_branch="both")
    cfg_b = quick_cfg(stage="joint", alpha=0.9, prm_branch="none")
    rec_a = trainer.train(small_dataset, cfg_a, tmp_path / "a")
    rec_b = trainer.train(small_dataset, cfg_b, tmp_path / "b")
    assert _checkpoint_bytes(rec_a.final_checkpoint) == _checkpoint_bytes(rec_b.final_checkpoint)
    for r1, r2 in zip(rec_a.rows, rec_b.rows):
        assert r1.loss_total == r2.loss_total
        assert r1.loss_pr == 0.0 and r2.loss_pr == 0.0


def test_prm_active_changes_trajectory_and_tracks_drift(small_dataset, tmp_path):
    cfg_on = quick_cfg(stage="joint", alpha=0.5)
    rec_on = trainer.train(small_dataset, cfg_on, tmp_path / "on")
    assert any(r.loss_pr != 0.0 for r in rec_on.rows)
    drift = (tmp_path / "on" / "proto_drift.txt").read_text()
    assert "drift 0 rgb" in drift and "drift 0 pose" in drift
    # banks are persisted in checkpoints
    _, tensors = __import__("protogest.net", fromlist=["net"]).load_checkpoint(
        rec_on.final_checkpoint)
    assert "bank_rgb" in tensors and tensors["bank_rgb"].shape == (3, 64)


def test_best_checkpoint_prefers_earliest_on_ties(small_dataset, tmp_path):
    cfg = quick_cfg(stage="rgb", epochs=4, lr_drop_epochs=(3,))
    rec = trainer.train(small_dataset, cfg, tmp_path / "run")
    best = max(r.val_top1_fused for r in rec.rows)
    first_best = min(r.epoch for r in rec.rows if r.val_top1_fused == best)
    assert rec.best_epoch == first_best


def test_run_record_roundtrip(small_dataset, tmp_path):
    cfg = quick_cfg(stage="rgb")
    rec = trainer.train(small_dataset, cfg, tmp_path / "run")
    loaded = trainer.RunRecord.load(tmp_path / "run" / "run_record.txt")
    assert len(loaded.rows) == len(rec.rows)
    assert all(rows_equal(a, b) for a, b in zip(loaded.rows, rec.rows))
    assert loaded.best_epoch == rec.best_epoch
    assert loaded.final_checkpoint == rec.final_checkpoint


def test_run_manifest_written_before_training(small_dataset, tmp_path):
    cfg = quick_cfg(stage="rgb")
    trainer.train(small_dataset, cfg, tmp_path / "run")
    manifest = (tmp_path / "run" / "run_manifest.txt").read_text()
    assert "stage rgb" in manifest
    assert "seed 3" in manifest
    assert f"data {small_dataset.root}" in manifest
    assert "# git:" in manifest and "# created_utc:" in manifest


def test_joint_init_requires_both_branches(small_dataset, tmp_path):
    cfg = quick_cfg(stage="joint")
    with pytest.raises(ValidationError):
        trainer.train(small_dataset, cfg, tmp_path / "run", init_rgb="only_one")


def test_nonfinite_loss_aborts_with_diagnostic_dump(small_dataset, tmp_path):
    from protogest import net
    from protogest.errors import NumericalError

    cfg = quick_cfg(stage="rgb")
    model = trainer.build_model(cfg, 3, 3, 5, 8, 32)
    with torch.no_grad():
        model.branch.embed.weight.fill_(1e38)      # overflow after two layers
        model.branch.classifier.weight.fill_(1e38)
    meta = trainer.model_meta(cfg, 3, 3, 5, 8, 32)
    net.save_checkpoint(tmp_path / "poison", model, meta)

    with pytest.raises(NumericalError):
        trainer.train(small_dataset, cfg, tmp_path / "run",
                      init_checkpoint=tmp_path / "poison")
    dump = (tmp_path / "run" / "diagnostic_dump.txt").read_text()
    assert "epoch 0" in dump and "clips train_" in dump


# ---------------------------------------------------------------------------
# evaluation


@pytest.fixture(scope="module")
def rgb_run(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("rgb_run")
    rec = trainer.train(small_dataset, quick_cfg(stage="rgb"), out)
    return rec


def test_evaluate_confusion_and_predictions(small_dataset, rgb_run, tmp_path):
    pred_path = tmp_path / "val.pred"
    metrics = trainer.evaluate(small_dataset, rgb_run.best_checkpoint, "val",
                               pred_out=pred_path)
    per_class = np.bincount(
        [e.label for e in small_dataset.split_entries("val")], minlength=3)
    assert metrics.confusion.sum(axis=1).tolist() == per_class.tolist()
    assert metrics.n == per_class.sum()
    pred = tensorio.load_predictions(pred_path)
    sums = pred.probs.astype(np.float64).sum(axis=1)
    assert np.abs(sums - 1).max() <= 1e-5
    assert np.isnan(metrics.top1_pose)  # single-branch checkpoint


def test_evaluate_empty_split_rejected(small_dataset, rgb_run):
    train_only = DatasetManifest(
        num_classes=small_dataset.num_classes,
        class_names=small_dataset.class_names,
        entries=[e for e in small_dataset.entries if e.split == "train"],
        root=small_dataset.root,
    )
    with pytest.raises(ValidationError):
        trainer.evaluate(train_only, rgb_run.best_checkpoint, "val")


def test_evaluate_is_deterministic(small_dataset, rgb_run):
    a = trainer.evaluate(small_dataset, rgb_run.best_checkpoint, "val")
    b = trainer.evaluate(small_dataset, rgb_run.best_checkpoint, "val")
    assert a.top1_fused == b.top1_fused
    assert np.array_equal(a.confusion, b.confusion)


# ---------------------------------------------------------------------------
# ensembling


def _pred(ids, rows):
    return PredictionFile(ids, np.array(rows, dtype=np.float32))


def test_ensemble_single_file_identity():
    # rows sum to exactly 1 in binary, so renormalization is a no-op
    p = _pred(["a", "b"], [[0.5, 0.25, 0.25], [1.0, 0.0, 0.0]])
    out = trainer.ensemble([p], [1.0])
    assert out.clip_ids == p.clip_ids
    assert np.array_equal(out.probs, p.probs)


def test_ensemble_identical_files_any_weights():
    p = _pred(["a"], [[0.75, 0.25]])
    out = trainer.ensemble([p, _pred(["a"], [[0.75, 0.25]])], [0.3, 1.7])
    assert np.array_equal(out.probs, p.probs)


def test_ensemble_mean_of_opposites():
    p1 = _pred(["a"], [[1.0, 0.0]])
    p2 = _pred(["a"], [[0.0, 1.0]])
    out = trainer.ensemble([p1, p2], [1.0, 1.0])
    assert np.array_equal(out.probs, np.array([[0.5, 0.5]], dtype=np.float32))


def test_ensemble_validates_ids_and_weights():
    p1 = _pred(["a"], [[1.0, 0.0]])
    p2 = _pred(["b"], [[1.0, 0.0]])
    with pytest.raises(ValidationError):
        trainer.ensemble([p1, p2], [1.0, 1.0])
    with pytest.raises(ValidationError):
        trainer.ensemble([p1], [-1.0])
    with pytest.raises(ValidationError):
        trainer.ensemble([p1], [0.0])
    with pytest.raises(ValidationError):
        trainer.ensemble([p1], [1.0, 2.0])


# ---------------------------------------------------------------------------
# mechanism comparison (structure only; the full table runs in acceptance)


def test_mechanism_delta_structure(small_dataset, tmp_path):
    cfg = quick_cfg(epochs=2, lr_drop_epochs=(1,), alpha=0.5)
    delta = trainer.mechanism_delta(small_dataset, cfg, (0,), tmp_path / "work")
    assert set(delta.results) == {"ce", "ce_prm", "ce_prm_fusion"}
    assert all(len(v) == 1 for v in delta.results.values())
    table = delta.markdown()
    assert "ce_prm_fusion" in table and "seed 0" in table
