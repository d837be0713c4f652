"""On-disk layouts (scene and pair directories, PNGs, pose/intrinsics
JSON, flow CSVs) and the training-sample sources built from them.

A *scene dir* holds `image.png`, `depth.dpt`, `intrinsics.json` and any
number of `view_*/` subdirs produced by synthesis (`warped.png`,
`depth.dpt`, `flow.csv`, `pose.json`). A *pair dir* holds precomputed
features instead: `source.feat`, `warped.feat`, `flow.csv` and
optionally `pose.json`/`intrinsics.json`.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import formats
from .errors import InputError
from .embedding import FeatureMap, pseudo_backbone, read_features
from .geometry import Intrinsics, Pose
from .synthesis import (DepthMap, PhotometricConfig, PoseSampler,
                        make_training_pair)
from .training import TrainSample, anchor_admissibility

SCENE_IMAGE = "image.png"
SCENE_DEPTH = "depth.dpt"
SCENE_INTRINSICS = "intrinsics.json"


# ------------------------------------------------------------ images

def write_png(path, img: np.ndarray) -> None:
    """Quantize a float image in [0, 1] to 8-bit and write atomically."""
    img = np.asarray(img, dtype=np.float64)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(q, mode=mode).save(buf, format="PNG")
    formats.atomic_write_bytes(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    if not os.path.exists(path):
        raise InputError(f"{path}: missing image file")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


# ------------------------------------------------------------ JSON helpers

def write_json(path, doc) -> None:
    formats.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path):
    if not os.path.exists(path):
        raise InputError(f"{path}: missing file")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from exc


def write_pose(path, pose: Pose) -> None:
    write_json(path, pose.to_json())


def load_pose(path) -> Pose:
    return Pose.from_json(read_json(path))


def write_intrinsics(path, K: Intrinsics) -> None:
    write_json(path, K.to_json())


def load_intrinsics(path) -> Intrinsics:
    return Intrinsics.from_json(read_json(path))


# ------------------------------------------------------------ flow files

def flow_csv_from_warp(gt_flow: np.ndarray, valid: np.ndarray) -> str:
    """One CSV row per valid source pixel: integer source coordinates,
    continuous target coordinates."""
    vs, us = np.nonzero(np.asarray(valid, dtype=bool))
    tgt = np.asarray(gt_flow, dtype=np.float64)[vs, us]
    return formats.correspondences_csv(us.astype(float), vs.astype(float),
                                       tgt[:, 0], tgt[:, 1])


def flow_from_csv(text: str, height: int, width: int,
                  path: str = "<string>"):
    """Rebuild the per-pixel flow grid; returns (gt_flow, valid)."""
    ps, pt, _ = formats.parse_matches_csv(text, path)
    gt_flow = np.full((height, width, 2), np.nan)
    valid = np.zeros((height, width), dtype=bool)
    us, vs = ps[:, 0], ps[:, 1]
    iu = np.floor(us + 0.5).astype(np.int64)
    iv = np.floor(vs + 0.5).astype(np.int64)
    if np.any(np.abs(us - iu) > 1e-6) or np.any(np.abs(vs - iv) > 1e-6):
        raise InputError(f"{path}: source coordinates must be integer pixels")
    if np.any((iu < 0) | (iu >= width) | (iv < 0) | (iv >= height)):
        raise InputError(f"{path}: source coordinates out of the "
                         f"{height}x{width} grid")
    gt_flow[iv, iu] = pt
    valid[iv, iu] = True
    return gt_flow, valid


# ------------------------------------------------------------ scene dirs

@dataclass
class Scene:
    image: np.ndarray
    depth: DepthMap
    intrinsics: Intrinsics
    path: str = ""


def write_scene(dirpath, image: np.ndarray, depth: DepthMap,
                K: Intrinsics) -> None:
    os.makedirs(dirpath, exist_ok=True)
    write_png(os.path.join(dirpath, SCENE_IMAGE), image)
    formats.write_dpt(os.path.join(dirpath, SCENE_DEPTH), depth.to_array())
    write_intrinsics(os.path.join(dirpath, SCENE_INTRINSICS), K)


def load_scene(dirpath) -> Scene:
    img_path = os.path.join(dirpath, SCENE_IMAGE)
    depth_path = os.path.join(dirpath, SCENE_DEPTH)
    if not os.path.exists(img_path):
        raise InputError(f"{img_path}: missing image file")
    if not os.path.exists(depth_path):
        raise InputError(f"{depth_path}: missing depth file")
    image = read_png(img_path)
    depth = DepthMap.from_array(formats.read_dpt(depth_path))
    K = load_intrinsics(os.path.join(dirpath, SCENE_INTRINSICS))
    if depth.shape != image.shape[:2]:
        raise InputError(f"{depth_path}: depth {depth.shape} does not match "
                         f"image {image.shape[:2]}")
    return Scene(image=image, depth=depth, intrinsics=K, path=str(dirpath))


def discover_scene_dirs(root) -> list:
    """Scene dirs under root (or root itself), sorted by name."""
    if os.path.exists(os.path.join(root, SCENE_IMAGE)):
        return [str(root)]
    if not os.path.isdir(root):
        raise InputError(f"{root}: not a directory")
    out = []
    for name in sorted(os.listdir(root)):
        cand = os.path.join(root, name)
        if os.path.isdir(cand) and os.path.exists(os.path.join(cand, SCENE_IMAGE)):
            out.append(cand)
    return out


def discover_pair_dirs(root) -> list:
    """Precomputed-feature pair dirs under root, sorted by name."""
    if os.path.exists(os.path.join(root, "source.feat")):
        return [str(root)]
    if not os.path.isdir(root):
        raise InputError(f"{root}: not a directory")
    out = []
    for name in sorted(os.listdir(root)):
        cand = os.path.join(root, name)
        if os.path.isdir(cand) and os.path.exists(os.path.join(cand, "source.feat")):
            out.append(cand)
    return out


def load_pair_dir(dirpath) -> TrainSample:
    feat_s = read_features(os.path.join(dirpath, "source.feat"))
    warped_path = os.path.join(dirpath, "warped.feat")
    if not os.path.exists(warped_path):
        raise InputError(f"{warped_path}: missing feature file")
    feat_w = read_features(warped_path)
    if (feat_s.grid_h, feat_s.grid_w) != (feat_w.grid_h, feat_w.grid_w):
        raise InputError(f"{dirpath}: source/warped grids disagree")
    flow_path = os.path.join(dirpath, "flow.csv")
    if not os.path.exists(flow_path):
        raise InputError(f"{flow_path}: missing flow file")
    H = feat_s.grid_h * feat_s.patch_size
    W = feat_s.grid_w * feat_s.patch_size
    with open(flow_path, "r", encoding="utf-8") as fh:
        gt_flow, valid = flow_from_csv(fh.read(), H, W, flow_path)
    return TrainSample(feat_s=feat_s, feat_w=feat_w, gt_flow=gt_flow,
                       valid=valid)


# ------------------------------------------------------------ configs

@dataclass
class EmbedConfig:
    """Pseudo-backbone and adaptation-block dimensions."""
    patch_size: int = 8
    embed_dim: int = 64
    backbone_seed: int = 17
    heads: int = 8
    mlp_ratio: int = 4
    init_seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.embed_dim < 1:
            raise InputError("patch size and embed dim must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise InputError("head count must divide the embed dim")

    def extract(self, image: np.ndarray) -> FeatureMap:
        return pseudo_backbone(image, self.patch_size, self.embed_dim,
                               self.backbone_seed)


@dataclass
class SynthParams:
    """Pose, photometric and depth-scaling ranges for one synthesis run."""
    max_rotation_deg: float = 5.0
    t_min: float = 0.01
    t_max: float = 0.1
    brightness: float = 0.1
    saturation: float = 0.3
    scale_min: float = 0.5
    scale_max: float = 2.0

    def sampler(self, seed: int = 0) -> PoseSampler:
        return PoseSampler(max_rotation=np.deg2rad(self.max_rotation_deg),
                           t_min=self.t_min, t_max=self.t_max, seed=seed)

    def photometric(self, seed: int = 0) -> PhotometricConfig:
        return PhotometricConfig(brightness=self.brightness,
                                 saturation=self.saturation, seed=seed)

    @property
    def scale_range(self):
        return (self.scale_min, self.scale_max)


@dataclass
class PoseCycle:
    """Deterministic pose source cycling a fixed list; a drop-in for
    PoseSampler where training must not draw fresh random poses."""
    poses: list
    _next: int = field(default=0, repr=False)

    def __post_init__(self):
        if not self.poses:
            raise InputError("pose list must be non-empty")

    def sample(self, rng=None) -> Pose:
        pose = self.poses[self._next % len(self.poses)]
        self._next += 1
        return pose


def fixed_pose_list(params: SynthParams, count: int, seed: int) -> list:
    """Draw `count` poses once; used for the fixed-pose training ablation."""
    if count < 1:
        raise InputError("pose count must be >= 1")
    sampler = params.sampler(seed=seed)
    return [sampler.sample() for _ in range(count)]


# ------------------------------------------------------------ sample sources

def _child_seed(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(p) for p in parts)))


class SceneSampleSource:
    """Per-epoch training samples from raw scenes.

    Source features are extracted once; every epoch re-warps each scene
    with fresh randomness derived from (seed, epoch, scene index). A
    `pose_source` (e.g. PoseCycle) overrides random pose sampling while
    leaving the other draws untouched.
    """

    def __init__(self, scenes, embed: EmbedConfig, params: SynthParams,
                 base_seed: int, pose_source=None):
        if not scenes:
            raise InputError("scene list must be non-empty")
        self.scenes = scenes
        self.embed = embed
        self.params = params
        self.base_seed = base_seed
        self.pose_source = pose_source
        self._sampler = params.sampler(seed=0)
        self._photo = params.photometric(seed=0)
        self._feat_s = [embed.extract(s.image) for s in scenes]

    def __call__(self, epoch: int) -> list:
        out = []
        for idx, scene in enumerate(self.scenes):
            rng = _child_seed(self.base_seed, epoch, idx)
            sampler = self.pose_source or self._sampler
            pair = make_training_pair(scene.image, scene.depth,
                                      scene.intrinsics, sampler, self._photo,
                                      self.params.scale_range, rng)
            feat_w = self.embed.extract(pair.warped)
            valid = anchor_admissibility(pair.warp, pair.pose,
                                         scene.intrinsics,
                                         self.embed.patch_size)
            out.append(TrainSample(feat_s=self._feat_s[idx], feat_w=feat_w,
                                   gt_flow=pair.warp.gt_flow, valid=valid))
        return out


class FixedSampleSource:
    """Static list of precomputed samples served every epoch."""

    def __init__(self, samples):
        if not samples:
            raise InputError("sample list must be non-empty")
        self.samples = list(samples)

    def __call__(self, epoch: int) -> list:
        return self.samples
