"""Command-line entry point.

Every subcommand builds the same request model the HTTP service accepts,
then either runs the job in-process (default) or posts it to a running
server (`--server http://host:port`). Exit codes: 0 success, 2 input or
validation error, 3 runtime/algorithmic failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from .errors import InputError, PipelineError
from . import formats
from .service import schemas

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

_ENDPOINTS = {
    "synth": ("/v1/synth", schemas.SynthRequest, schemas.SynthResponse),
    "train": ("/v1/train", schemas.TrainRequest, schemas.TrainResponse),
    "match": ("/v1/match", schemas.MatchRequest, schemas.MatchResponse),
    "eval": ("/v1/eval", schemas.EvalRequest, schemas.EvalResponse),
    "ablate": ("/v1/ablate", schemas.AblateRequest, schemas.AblateResponse),
    "robustness": ("/v1/robustness", schemas.RobustnessRequest,
                   schemas.RobustnessResponse),
}


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise InputError(f"config key {dotted!r} collides with a scalar")
    node[keys[-1]] = value


def _request_doc(args, mapping) -> dict:
    """Config file contents overlaid with explicitly given CLI flags."""
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise InputError(f"{args.config}: missing config file") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
    for attr, dotted in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            _set_path(doc, dotted, val)
    return doc


def _dispatch(command: str, doc: dict, server: str | None):
    path, req_model, resp_model = _ENDPOINTS[command]
    try:
        req = req_model.model_validate(doc)
    except ValidationError as exc:
        raise InputError(str(exc)) from exc
    if not server:
        from .service import jobs
        return getattr(jobs, f"run_{command}")(req)

    import httpx
    try:
        resp = httpx.post(server.rstrip("/") + path,
                          json=req.model_dump(), timeout=3600.0)
    except httpx.HTTPError as exc:
        raise PipelineError(f"server unreachable: {exc}") from exc
    if resp.status_code == 200:
        return resp_model.model_validate(resp.json())
    try:
        body = resp.json()
        message = body.get("message", resp.text)
        category = body.get("category", "runtime")
    except Exception:
        message, category = resp.text, "runtime"
    if resp.status_code == 400 or category == "input":
        raise InputError(message)
    raise PipelineError(message)


def _print(resp) -> None:
    print(json.dumps(resp.model_dump(), indent=2, sort_keys=True, default=str))


# ------------------------------------------------------------ parsers

def _common(p):
    p.add_argument("--config", help="JSON file with request fields")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--server", help="dispatch to a running epimatch server")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="epimatch",
        description="Self-supervised patch matching: synthesis, adaptation "
                    "training, matching and evaluation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate warped views with ground truth")
    _common(p)
    p.add_argument("--input-dir", help="scene dir(s) with image/depth/intrinsics")
    p.add_argument("--synthetic", type=int, help="generate N synthetic scenes")
    p.add_argument("--views", type=int, help="warped views per scene")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--patch-size", type=int, dest="patch_size")

    p = sub.add_parser("train", help="train the adaptation block")
    _common(p)
    p.add_argument("--data-dir", help="scene dirs or precomputed feature pairs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pose-mode", choices=["random", "fixed"], dest="pose_mode")
    p.add_argument("--fixed-poses", type=int, dest="fixed_poses")

    p = sub.add_parser("match", help="match one pair of images or feature files")
    _common(p)
    p.add_argument("--source", help=".feat or .png")
    p.add_argument("--target", help=".feat or .png")
    p.add_argument("--source-image", dest="source_image")
    p.add_argument("--target-image", dest="target_image")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_const", const=True)
    p.add_argument("--no-refine", action="store_const", const=True,
                   dest="no_refine")
    p.add_argument("--upsample", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--subpixel", action="store_const", const=True)

    p = sub.add_parser("eval", help="evaluate matches against ground truth")
    _common(p)
    p.add_argument("--matches", help="one match CSV")
    p.add_argument("--pose")
    p.add_argument("--intrinsics")
    p.add_argument("--pairs-dir", dest="pairs_dir")
    p.add_argument("--sequence-dir", dest="sequence_dir")
    p.add_argument("--stride", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_const", const=True)
    p.add_argument("--no-refine", action="store_const", const=True,
                   dest="no_refine")
    p.add_argument("--threshold", type=float)
    p.add_argument("--tp-threshold", type=float, dest="tp_threshold")
    p.add_argument("--one-sided", action="store_const", const=True,
                   dest="one_sided")

    p = sub.add_parser("ablate", help="pipeline/pose-sampling ablation table")
    _common(p)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--test-scenes", type=int, dest="test_scenes")
    p.add_argument("--eval-views", type=int, dest="eval_views")
    p.add_argument("--benchmark-threshold", type=float,
                   dest="benchmark_threshold")

    p = sub.add_parser("robustness", help="cross-scene spurious-match counts")
    _common(p)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_const", const=True)
    p.add_argument("--views", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-refine", action="store_const", const=True,
                   dest="no_refine")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    p = sub.add_parser("inspect", help="describe a data file (feat/dpt/epiw/csv)")
    p.add_argument("path")
    return ap


_FLAG_MAPS = {
    "synth": {"input_dir": "input_dir", "synthetic": "synthetic_scenes",
              "views": "views_per_scene", "height": "height", "width": "width",
              "patch_size": "embed.patch_size", "seed": "seed",
              "out": "out_dir"},
    "train": {"data_dir": "data_dir", "epochs": "epochs",
              "pose_mode": "pose_mode", "fixed_poses": "fixed_pose_count",
              "seed": "train.seed", "out": "out_dir"},
    "match": {"source": "source", "target": "target",
              "source_image": "source_image", "target_image": "target_image",
              "checkpoint": "options.checkpoint",
              "baseline": "options.baseline", "no_refine": "options.no_refine",
              "upsample": "options.upsample", "threshold": "options.threshold",
              "subpixel": "options.subpixel", "seed": "seed",
              "out": "out_dir"},
    "eval": {"matches": "matches", "pose": "pose", "intrinsics": "intrinsics",
             "pairs_dir": "pairs_dir", "sequence_dir": "sequence_dir",
             "stride": "stride", "checkpoint": "options.checkpoint",
             "baseline": "options.baseline", "no_refine": "options.no_refine",
             "threshold": "options.threshold", "tp_threshold": "tp_threshold",
             "one_sided": "one_sided", "seed": "seed", "out": "out_dir"},
    "ablate": {"data_dir": "data_dir", "epochs": "epochs",
               "test_scenes": "test_scenes", "eval_views": "eval_views",
               "benchmark_threshold": "benchmark_threshold", "seed": "seed",
               "out": "out_dir"},
    "robustness": {"data_dir": "data_dir", "checkpoint": "options.checkpoint",
                   "baseline": "options.baseline", "views": "views_per_scene",
                   "threshold": "options.threshold",
                   "no_refine": "options.no_refine", "seed": "seed",
                   "out": "out_dir"},
}


# ------------------------------------------------------------ inspect

def _inspect(path: str) -> None:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except FileNotFoundError as exc:
        raise InputError(f"{path}: missing file") from exc
    if magic == formats.FEAT_MAGIC:
        feats, patch = formats.read_feat(path)
        print(f"feature map: grid {feats.shape[0]}x{feats.shape[1]}, "
              f"E={feats.shape[2]}, patch={patch}, dtype={feats.dtype}")
    elif magic == formats.DEPTH_MAGIC:
        depth = formats.read_dpt(path)
        import numpy as np
        finite = depth[np.isfinite(depth)]
        rng = (f"range [{finite.min():.4g}, {finite.max():.4g}]"
               if finite.size else "all invalid")
        print(f"depth map: {depth.shape[0]}x{depth.shape[1]}, "
              f"{finite.size} valid px, {rng}")
    elif magic == formats.WEIGHTS_MAGIC:
        tensors = formats.read_weights(path)
        print(f"weights: {len(tensors)} tensors")
        for name, arr in tensors.items():
            print(f"  {name}: {tuple(arr.shape)} {arr.dtype}")
    elif path.endswith(".csv"):
        with open(path, "r", encoding="utf-8") as fh:
            ps, pt, score = formats.parse_matches_csv(fh.read(), path)
        print(f"match csv: {len(ps)} rows, score range "
              f"[{score.min():.4f}, {score.max():.4f}]"
              if len(ps) else "match csv: empty")
    elif path.endswith(".json"):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        print(f"json: keys {sorted(doc)}" if isinstance(doc, dict)
              else f"json: {type(doc).__name__}")
    else:
        raise InputError(f"{path}: unrecognized format "
                         f"(magic {magic!r})")


def _serve(args) -> None:
    import uvicorn
    from .service.app import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            _serve(args)
            return EXIT_OK
        if args.command == "inspect":
            _inspect(args.path)
            return EXIT_OK
        doc = _request_doc(args, _FLAG_MAPS[args.command])
        resp = _dispatch(args.command, doc, getattr(args, "server", None))
        _print(resp)
        return EXIT_OK
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
