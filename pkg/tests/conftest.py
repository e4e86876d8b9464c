import numpy as np
import pytest

from protogest import cli, synthgen, trainer


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A tiny 3-class dataset for fast trainer/CLI tests."""
    root = tmp_path_factory.mktemp("small_ds")
    cfg = synthgen.GenConfig(
        seed=5, num_classes=3,
        clips_per_class_train=4, clips_per_class_val=2, clips_per_class_test=2,
    )
    manifest = synthgen.generate(cfg, root)
    return manifest


@pytest.fixture(scope="session")
def toy_protocol(tmp_path_factory):
    """The full pretrain->joint protocol on the separable seed-7 dataset.

    Runs through the CLI so acceptance checks exercise the same command
    surface a user would. The joint stage is trained twice with the same
    command to support the bit-identical-rerun check.
    """
    import time

    base = tmp_path_factory.mktemp("toy_protocol")
    ds = base / "dataset"
    assert cli.main(["gen", "--out", str(ds), "--seed", "7"]) == 0

    def run_train(out, extra):
        start = time.monotonic()
        rc = cli.main(["train", "--data", str(ds), "--out", str(out), "--seed", "7",
                       "--alpha", "0"] + extra)
        assert rc == 0
        return trainer.RunRecord.load(out / "run_record.txt"), time.monotonic() - start

    rec_rgb, _ = run_train(base / "rgb", ["--stage", "rgb"])
    rec_pose, _ = run_train(base / "pose", ["--stage", "pose"])
    joint_flags = ["--stage", "joint",
                   "--init-rgb", str(base / "rgb" / "checkpoints" / "best"),
                   "--init-pose", str(base / "pose" / "checkpoints" / "best")]
    rec_joint, joint_seconds = run_train(base / "joint", joint_flags)
    rec_joint_rerun, _ = run_train(base / "joint_rerun", joint_flags)
    return {
        "dataset": ds,
        "base": base,
        "rgb": rec_rgb,
        "pose": rec_pose,
        "joint": rec_joint,
        "joint_rerun": rec_joint_rerun,
        "joint_seconds": joint_seconds,
    }


def rand_tensor(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape).astype(np.float32)
