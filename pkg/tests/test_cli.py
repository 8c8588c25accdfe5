import csv
import json
import shutil

import pytest

from avatarkit.cli import build_parser, main

TINY_CONFIG = """\
resolution = 32
synth_clips = 2
synth_frames = 12
track_fixed_iters = 5
track_first_frame_iters = 5
track_frame_iters = 2
track_fixed_frames = 2
track_refine_iters = 0
a2e_latent = 8
a2e_epochs = 1
a2e_lr = 1e-3
W = 2
N_a = 8
W_R = 1
texture_hidden = 16
texture_layers = 2
unet_base = 4
unet_depth = 2
disc_base = 4
render_epochs = 1
render_batch = 4
"""


def run(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    run("synth-data", "--config", cfg, "--out", root / "data", "--seed", 0)
    run("train-a2e", "--config", cfg, "--data", root / "data", "--out", root / "a2e", "--seed", 1)
    run("train-renderer", "--config", cfg, "--data", root / "data", "--out", root / "renderer", "--seed", 1)
    return root, cfg


def curve_rows(path, epoch=0):
    with open(path) as fh:
        return [r for r in csv.DictReader(fh) if r["epoch"] == str(epoch)]


def test_every_subcommand_is_registered():
    names = set(build_parser()._subparsers._group_actions[0].choices)
    assert names == {"track", "train-a2e", "infer-a2e", "train-renderer", "render", "generate", "eval-emd",
                     "synth-data"}


@pytest.mark.parametrize("command", ["train-a2e", "train-renderer"])
def test_training_requires_seed(command, tmp_path, capsys):
    with pytest.raises(SystemExit):
        main([command, "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert "--seed" in capsys.readouterr().err


def test_training_outputs(workspace):
    root, _ = workspace
    for stage in ("a2e", "renderer"):
        m = json.loads((root / stage / "manifest.json").read_text())
        assert m["seed"] == 1 and m["config"]["resolution"] == 32
        assert (root / stage / "curves.csv").exists() and (root / stage / "curves.png").exists()
    assert (root / "renderer" / "renderer.ckpt").exists()


def test_track_and_infer(workspace):
    root, cfg = workspace
    clip = root / "data" / "clip_000"
    run("track", "--config", cfg, "--frames", clip / "frames", "--out", root / "tracked" / "track.npz")
    assert (root / "tracked" / "manifest.json").exists()
    run("infer-a2e", "--config", cfg, "--checkpoint", root / "a2e" / "a2e_epoch000.ckpt", "--audio",
        clip / "audio.wav", "--emotion", "sad", "--intensity", "0.5", "--reference", clip / "track.npz",
        "--out", root / "inferred" / "track.npz")
    run("render", "--config", cfg, "--checkpoint", root / "renderer" / "renderer.ckpt", "--track",
        root / "inferred" / "track.npz", "--frames", clip / "frames", "--phonemes", clip / "phonemes.bin",
        "--out", root / "rendered")
    assert len(list((root / "rendered").rglob("*.png"))) == 12


def test_generate_and_evaluate(workspace, capsys):
    root, cfg = workspace
    clip = root / "data" / "clip_001"
    run("generate", "--config", cfg, "--audio", clip / "audio.wav", "--phonemes", clip / "phonemes.bin",
        "--emotion", "happy", "--reference", clip, "--a2e", root / "a2e" / "a2e_epoch000.ckpt",
        "--renderer", root / "renderer" / "renderer.ckpt", "--out", root / "gen")
    frames = sorted((root / "gen" / "frames").glob("*.png"))
    assert len(frames) == 12
    for side, src in (("g", root / "gen" / "frames"), ("r", clip / "frames")):
        shutil.copytree(src, root / side / "synth" / "happy" / "v0")
    capsys.readouterr()
    run("eval-emd", "--gen", root / "g", "--real", root / "r", "--out", root / "emd")
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["A-EMD"] >= 0 and summary["V-EMD"] >= 0
    assert (root / "emd" / "emd_groups.csv").exists() and (root / "emd" / "emd_groups.png").exists()


def test_flags_override_config(workspace):
    root, cfg = workspace
    run("train-a2e", "--config", cfg, "--data", root / "data", "--out", root / "a2e_w", "--seed", 1,
        "--a2e-latent", 4, "--lambda-vel", 5)
    m = json.loads((root / "a2e_w" / "manifest.json").read_text())
    assert m["config"]["a2e_latent"] == 4 and m["config"]["lambda_vel"] == 5.0


def test_seeded_reruns_repeat_first_epoch(workspace):
    root, cfg = workspace
    run("train-a2e", "--config", cfg, "--data", root / "data", "--out", root / "a2e_again", "--seed", 1)
    assert curve_rows(root / "a2e" / "curves.csv") == curve_rows(root / "a2e_again" / "curves.csv")


def test_bad_input_reports_error(tmp_path, capsys):
    assert main(["eval-emd", "--gen", str(tmp_path), "--real", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
