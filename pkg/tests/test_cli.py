"""End-to-end CLI tests driving ``main(argv)`` in process.

Covers exit codes (0 ok / 2 input / 3 runtime), the config-file overlay,
the inspect subcommand, and byte-identical reruns in deterministic mode.
"""

import json
import os

import numpy as np
import pytest

from epimatch.cli import EXIT_INPUT, EXIT_OK, EXIT_RUNTIME, main
from epimatch.data import write_scene
from epimatch.formats import parse_matches_csv, write_feat
from epimatch.geometry import Intrinsics
from epimatch.synthesis import DepthMap, make_synthetic_scene

SMALL_EMBED = {"patch_size": 8, "embed_dim": 16, "heads": 4}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train once; later tests only read the outputs."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "embed.json", {"embed": SMALL_EMBED})
    rc = main(["synth", "--synthetic", "2", "--height", "32", "--width", "32",
               "--seed", "3", "--config", cfg, "--out", str(root / "scenes")])
    assert rc == EXIT_OK
    cfg = write_config(root / "train.json", {
        "embed": SMALL_EMBED,
        "train": {"triplets_per_pair": 8, "seed": 1},
    })
    rc = main(["train", "--data-dir", str(root / "scenes"), "--epochs", "1",
               "--config", cfg, "--out", str(root / "train")])
    assert rc == EXIT_OK
    return root


def test_synth_writes_expected_tree(pipeline):
    scenes = pipeline / "scenes"
    dirs = sorted(p for p in scenes.iterdir() if p.is_dir())
    assert len(dirs) == 2
    for d in dirs:
        assert (d / "image.png").exists()
        assert (d / "view_00" / "flow.csv").exists()
    assert (scenes / "manifest.json").exists()


def test_train_writes_checkpoint_and_log(pipeline):
    out = pipeline / "train"
    assert (out / "checkpoint.epiw").exists()
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,mean_loss,n_triplets"
    assert len(lines) == 2


def test_match_baseline_on_pngs(pipeline, capsys):
    scene = sorted(p for p in (pipeline / "scenes").iterdir() if p.is_dir())[0]
    cfg = write_config(pipeline / "match.json", {"embed": SMALL_EMBED})
    rc = main(["match", "--source", str(scene / "image.png"),
               "--target", str(scene / "view_00" / "warped.png"),
               "--baseline", "--no-refine", "--threshold", "0.5",
               "--config", cfg, "--out", str(pipeline / "match")])
    assert rc == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    ps, _, _ = parse_matches_csv(
        (pipeline / "match" / "matches.csv").read_text(), "matches.csv")
    assert doc["n_matches"] == len(ps) > 0


def test_match_with_checkpoint_and_eval(pipeline, capsys):
    scene = sorted(p for p in (pipeline / "scenes").iterdir() if p.is_dir())[0]
    cfg = write_config(pipeline / "m2.json", {"embed": SMALL_EMBED})
    rc = main(["match", "--source", str(scene / "image.png"),
               "--target", str(scene / "view_00" / "warped.png"),
               "--checkpoint", str(pipeline / "train" / "checkpoint.epiw"),
               "--threshold", "0.5", "--config", cfg,
               "--out", str(pipeline / "match_ckpt")])
    assert rc == EXIT_OK
    capsys.readouterr()

    rc = main(["eval", "--matches", str(pipeline / "match_ckpt" / "matches.csv"),
               "--pose", str(scene / "view_00" / "pose.json"),
               "--intrinsics", str(scene / "intrinsics.json"),
               "--out", str(pipeline / "eval")])
    assert rc == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_pairs"] == 1
    assert (pipeline / "eval" / "aggregate.csv").exists()


def test_missing_input_exits_2(tmp_path, capsys):
    rc = main(["match", "--source", str(tmp_path / "nope.feat"),
               "--target", str(tmp_path / "nope2.feat"),
               "--no-refine", "--out", str(tmp_path / "out")])
    assert rc == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_malformed_csv_exits_2(pipeline, tmp_path, capsys):
    scene = sorted(p for p in (pipeline / "scenes").iterdir() if p.is_dir())[0]
    bad = tmp_path / "bad.csv"
    bad.write_text("us,vs,ut,vt,score\n1.0,2.0,oops,4.0,0.9\n")
    rc = main(["eval", "--matches", str(bad),
               "--pose", str(scene / "view_00" / "pose.json"),
               "--intrinsics", str(scene / "intrinsics.json"),
               "--out", str(tmp_path / "out")])
    assert rc == EXIT_INPUT
    assert "line 2" in capsys.readouterr().err


def test_invalid_config_value_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json",
                       {"train": {"margin": -1.0}})
    rc = main(["train", "--data-dir", str(tmp_path), "--config", cfg,
               "--out", str(tmp_path / "out")])
    assert rc == EXIT_INPUT


def test_stalled_training_exits_3(tmp_path, capsys):
    img, _, _ = make_synthetic_scene(seed=4, height=32, width=32)
    depth = DepthMap.from_array(np.full((32, 32), np.nan, dtype=np.float32))
    K = Intrinsics(fx=32.0, fy=32.0, cx=15.5, cy=15.5)
    write_scene(tmp_path / "scene", img, depth, K)
    cfg = write_config(tmp_path / "cfg.json", {"embed": SMALL_EMBED})
    rc = main(["train", "--data-dir", str(tmp_path / "scene"),
               "--epochs", "1", "--config", cfg,
               "--out", str(tmp_path / "train")])
    assert rc == EXIT_RUNTIME
    assert "error:" in capsys.readouterr().err


def test_inspect_each_format(pipeline, capsys):
    scene = sorted(p for p in (pipeline / "scenes").iterdir() if p.is_dir())[0]
    feat_path = pipeline / "sample.feat"
    write_feat(feat_path, np.zeros((2, 3, 4), dtype=np.float32), 8)
    cases = {
        str(feat_path): "feature map:",
        str(scene / "depth.dpt"): "depth map:",
        str(pipeline / "train" / "checkpoint.epiw"): "weights:",
        str(pipeline / "match" / "matches.csv"): "match csv:",
        str(scene / "intrinsics.json"): "json:",
    }
    for path, prefix in cases.items():
        assert main(["inspect", path]) == EXIT_OK
        assert capsys.readouterr().out.startswith(prefix), path


def test_inspect_missing_and_unknown(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "gone.feat")]) == EXIT_INPUT
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00\x01\x02\x03garbage")
    assert main(["inspect", str(junk)]) == EXIT_INPUT
    assert "unrecognized" in capsys.readouterr().err


def tree_bytes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in sorted(names):
            p = os.path.join(dirpath, name)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_deterministic_rerun_is_byte_identical(pipeline, tmp_path,
                                               monkeypatch, capsys):
    monkeypatch.setenv("EPIMATCH_DETERMINISTIC", "1")
    scene = sorted(p for p in (pipeline / "scenes").iterdir() if p.is_dir())[0]
    cfg = write_config(tmp_path / "cfg.json", {"embed": SMALL_EMBED})
    argv = ["match", "--source", str(scene / "image.png"),
            "--target", str(scene / "view_00" / "warped.png"),
            "--baseline", "--no-refine", "--threshold", "0.5",
            "--config", cfg]
    out = tmp_path / "out"
    assert main(argv + ["--out", str(out)]) == EXIT_OK
    first = tree_bytes(out)
    assert main(argv + ["--out", str(out)]) == EXIT_OK
    second = tree_bytes(out)
    capsys.readouterr()
    assert sorted(first) == sorted(second)
    for name in first:
        assert first[name] == second[name], name
