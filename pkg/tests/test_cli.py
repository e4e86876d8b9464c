import numpy as np
import pytest

from protogest import cli, tensorio


def run(args):
    return cli.main(args)


def tree_bytes(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


GEN_SMALL = ["--num-classes", "3", "--clips-per-class-train", "3",
             "--clips-per-class-val", "1", "--clips-per-class-test", "1"]


def test_gen_same_seed_identical_dirs(tmp_path):
    assert run(["gen", "--out", str(tmp_path / "a"), "--seed", "7"] + GEN_SMALL) == 0
    assert run(["gen", "--out", str(tmp_path / "b"), "--seed", "7"] + GEN_SMALL) == 0
    a = tree_bytes(tmp_path / "a")
    b = tree_bytes(tmp_path / "b")
    a.pop("gen_manifest.txt")  # contains the output path and timestamp
    b.pop("gen_manifest.txt")
    assert a == b


def test_gen_manifest_reproduces_dataset(tmp_path):
    assert run(["gen", "--out", str(tmp_path / "a"), "--seed", "9"] + GEN_SMALL) == 0
    # reuse the recorded config, overriding only the output directory
    assert run(["gen", "--config", str(tmp_path / "a" / "gen_manifest.txt"),
                "--out", str(tmp_path / "b")]) == 0
    a = {k: v for k, v in tree_bytes(tmp_path / "a").items() if k != "gen_manifest.txt"}
    b = {k: v for k, v in tree_bytes(tmp_path / "b").items() if k != "gen_manifest.txt"}
    assert a == b


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_run")
    ds = base / "ds"
    assert run(["gen", "--out", str(ds), "--seed", "5"] + GEN_SMALL) == 0
    rc = run(["train", "--data", str(ds), "--out", str(base / "rgb"),
              "--stage", "rgb", "--epochs", "3", "--lr-drop-epochs", "2",
              "--alpha", "0", "--batch-size", "6", "--seed", "1"])
    assert rc == 0
    return {"base": base, "ds": ds, "ckpt": base / "rgb" / "checkpoints" / "best"}


def test_eval_writes_predictions(cli_run, tmp_path):
    pred = tmp_path / "val.pred"
    rc = run(["eval", "--data", str(cli_run["ds"]), "--checkpoint", str(cli_run["ckpt"]),
              "--split", "val", "--pred-out", str(pred)])
    assert rc == 0
    loaded = tensorio.load_predictions(pred)
    assert loaded.probs.shape == (3, 3)


def test_ensemble_identity_on_identical_files(cli_run, tmp_path):
    pred = tmp_path / "val.pred"
    run(["eval", "--data", str(cli_run["ds"]), "--checkpoint", str(cli_run["ckpt"]),
         "--split", "val", "--pred-out", str(pred)])
    out = tmp_path / "ens.pred"
    rc = run(["ensemble", str(pred), str(pred), "--weights", "1,1", "--out", str(out)])
    assert rc == 0
    a = tensorio.load_predictions(pred)
    b = tensorio.load_predictions(out)
    assert a.clip_ids == b.clip_ids
    assert np.abs(a.probs - b.probs).max() < 1e-6


def test_train_config_flag_override(cli_run, tmp_path):
    # rerun from the run manifest, but override the seed; record must differ
    manifest = cli_run["base"] / "rgb" / "run_manifest.txt"
    rc = run(["train", "--config", str(manifest), "--out", str(tmp_path / "o"),
              "--seed", "2"])
    assert rc == 0
    text = (tmp_path / "o" / "run_manifest.txt").read_text()
    assert "seed 2" in text


def test_report_on_run_dir(cli_run, tmp_path):
    out = tmp_path / "report"
    rc = run(["report", "--run", str(cli_run["base"] / "rgb"), "--out", str(out)])
    assert rc == 0
    assert (out / "losses.png").exists()
    assert (out / "accuracy.png").exists()
    assert (out / "summary.md").exists()


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        run(["train", "--does-not-exist", "1"])
    assert exc.value.code == 2


def test_missing_input_exits_4(tmp_path):
    rc = run(["eval", "--data", str(tmp_path / "nope"), "--checkpoint", "x"])
    assert rc == 4


def test_config_contradiction_exits_2(tmp_path):
    rc = run(["gen", "--out", str(tmp_path / "bad"), "--t-pose", "30"])
    assert rc == 2


def test_invalid_choice_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--data", "x", "--out", "y", "--stage", "fused"])
    assert exc.value.code == 2


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "eval", "ensemble", "gradcheck", "report"):
        assert cmd in out


def test_subcommand_help_documents_flags(capsys):
    with pytest.raises(SystemExit):
        run(["train", "--help"])
    out = capsys.readouterr().out
    for flag in ("--alpha", "--tau", "--attention-source", "--prm-branch", "--stage"):
        assert flag in out
