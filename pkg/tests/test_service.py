"""HTTP service tests: the full pipeline driven through the API plus the
error-category contract (bad input -> 400, pipeline failure -> 500).
"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

import epimatch
from epimatch.data import write_scene
from epimatch.formats import parse_matches_csv
from epimatch.geometry import Intrinsics
from epimatch.service.app import create_app
from epimatch.synthesis import DepthMap, make_synthetic_scene

EMBED = {"patch_size": 8, "embed_dim": 16, "heads": 4}


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def workspace(client, tmp_path_factory):
    """One synth run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("svc")
    resp = client.post("/v1/synth", json={
        "out_dir": str(root / "scenes"),
        "synthetic_scenes": 2,
        "height": 32, "width": 32,
        "views_per_scene": 1,
        "seed": 5,
        "embed": EMBED,
    })
    assert resp.status_code == 200, resp.text
    return root, resp.json()


def test_health_endpoint(client):
    doc = client.get("/v1/health").json()
    assert doc == {"status": "ok", "version": epimatch.__version__}


def test_synth_creates_scene_tree(workspace):
    root, doc = workspace
    assert len(doc["scene_dirs"]) == 2
    assert doc["n_views"] == 2
    for d in doc["scene_dirs"]:
        for name in ("image.png", "depth.dpt", "intrinsics.json"):
            assert (root / "scenes" / d.split("/")[-1] / name).exists()
        view = root / "scenes" / d.split("/")[-1] / "view_00"
        for name in ("warped.png", "depth.dpt", "flow.csv", "pose.json"):
            assert (view / name).exists()
    assert (root / "scenes" / "manifest.json").exists()


def test_train_then_match_and_eval(client, workspace):
    root, synth_doc = workspace
    resp = client.post("/v1/train", json={
        "data_dir": str(root / "scenes"),
        "out_dir": str(root / "train"),
        "epochs": 2,
        "train": {"triplets_per_pair": 8, "seed": 1, "epochs": 30},
        "embed": EMBED,
    })
    assert resp.status_code == 200, resp.text
    doc = resp.json()
    assert doc["epochs_run"] == 2
    assert len(doc["history"]) == 2
    assert (root / "train" / "loss.csv").exists()
    ckpt = doc["checkpoint_path"]

    scene0 = synth_doc["scene_dirs"][0]
    resp = client.post("/v1/match", json={
        "source": f"{scene0}/image.png",
        "target": f"{scene0}/view_00/warped.png",
        "out_dir": str(root / "match"),
        "options": {"checkpoint": ckpt, "threshold": 0.5},
        "embed": EMBED,
    })
    assert resp.status_code == 200, resp.text
    match_doc = resp.json()
    assert match_doc["n_matches"] >= 8
    ps, pt, score = parse_matches_csv(
        (root / "match" / "matches.csv").read_text(), "matches.csv")
    assert len(ps) == match_doc["n_matches"]
    assert np.all(score > 0.5)

    resp = client.post("/v1/eval", json={
        "out_dir": str(root / "eval"),
        "matches": match_doc["csv_path"],
        "pose": f"{scene0}/view_00/pose.json",
        "intrinsics": f"{scene0}/intrinsics.json",
        "embed": EMBED,
    })
    assert resp.status_code == 200, resp.text
    eval_doc = resp.json()
    assert eval_doc["n_pairs"] == 1
    assert (root / "eval" / "aggregate.csv").exists()
    assert eval_doc["aggregate"]["epipolar_error_px"] is not None


def test_missing_field_maps_to_input_category(client):
    resp = client.post("/v1/match", json={"source": "a.feat"})
    assert resp.status_code == 400
    body = resp.json()
    assert body["category"] == "input"
    assert body["message"]


def test_bad_path_maps_to_input_category(client, tmp_path):
    resp = client.post("/v1/match", json={
        "source": str(tmp_path / "missing.feat"),
        "target": str(tmp_path / "missing2.feat"),
        "out_dir": str(tmp_path / "out"),
        "options": {"no_refine": True},
    })
    assert resp.status_code == 400
    assert resp.json()["category"] == "input"


def test_pipeline_failure_maps_to_runtime_category(client, tmp_path):
    # A scene with no usable depth cannot supervise anything: training
    # stalls, which is a pipeline error, not an input error.
    img, _, _ = make_synthetic_scene(seed=9, height=32, width=32)
    depth = DepthMap.from_array(np.full((32, 32), np.nan, dtype=np.float32))
    K = Intrinsics(fx=32.0, fy=32.0, cx=15.5, cy=15.5)
    write_scene(tmp_path / "scene", img, depth, K)
    resp = client.post("/v1/train", json={
        "data_dir": str(tmp_path / "scene"),
        "out_dir": str(tmp_path / "train"),
        "epochs": 1,
        "embed": EMBED,
    })
    assert resp.status_code == 500
    assert resp.json()["category"] == "runtime"


def test_robustness_endpoint(client, workspace):
    root, _ = workspace
    resp = client.post("/v1/robustness", json={
        "data_dir": str(root / "scenes"),
        "out_dir": str(root / "robust"),
        "options": {"baseline": True, "threshold": 0.5},
        "embed": EMBED,
    })
    assert resp.status_code == 200, resp.text
    doc = resp.json()
    assert doc["same_matches"] > 0
    assert doc["cross_matches"] >= 0
    text = (root / "robust" / "robustness.csv").read_text()
    assert text.splitlines()[0] == "pair_type,n_matches,n_inliers"
