"""Pseudo-ground-truth pair generation by depth-based forward warping.

A source image with per-pixel depth is lifted to 3D, rigidly moved to a
sampled target pose and re-projected. Colors are splatted to the nearest
target pixel under a z-buffer; the continuous target coordinates are kept
as the supervision flow field, so rasterization only affects colors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .geometry import Intrinsics, Pose, Z_MIN_DEFAULT, project_masked

# Rec.601 luma; fixed so photometric augmentation is reproducible.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Color written to warp targets no source pixel reaches (disocclusions).
HOLE_FILL = 0.5


@dataclass
class DepthMap:
    """Per-pixel depth in scene units (up to scale) with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        """NaN, non-finite and non-positive entries become invalid."""
        values = np.asarray(values, dtype=np.float32)
        valid = np.isfinite(values) & (values > 0)
        return cls(values, valid)

    def to_array(self) -> np.ndarray:
        """float32 grid with NaN at invalid entries (the .dpt payload)."""
        out = self.values.astype(np.float32).copy()
        out[~self.valid] = np.nan
        return out

    @property
    def shape(self):
        return self.values.shape


@dataclass
class WarpResult:
    warped: np.ndarray        # H x W x 3 float32, HOLE_FILL where unfilled
    gt_flow: np.ndarray       # H x W x 2 float64 target coords, NaN invalid
    valid: np.ndarray         # H x W bool: gt_flow entry usable
    filled: np.ndarray        # H x W bool over the *target* image
    zbuf: np.ndarray          # H x W float64 depth-in-target, +inf unfilled
    winner: np.ndarray        # H x W int64 flat source index, -1 unfilled


@dataclass
class PoseSampler:
    """Uniform random rigid motions: rotation axis uniform on the sphere,
    angle uniform in [0, max_rotation], translation direction uniform with
    magnitude uniform in [t_min, t_max]."""

    max_rotation: float = np.deg2rad(5.0)
    t_min: float = 0.01
    t_max: float = 0.1
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.max_rotation < np.pi:
            raise InputError("max_rotation must lie in [0, pi)")
        if self.t_min < 0 or self.t_max < self.t_min:
            raise InputError("need 0 <= t_min <= t_max")
        self._rng = np.random.default_rng(self.seed)

    def sample(self, rng: np.random.Generator | None = None) -> Pose:
        rng = self._rng if rng is None else rng
        axis = rng.normal(size=3)
        n = np.linalg.norm(axis)
        axis = axis / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])
        angle = rng.uniform(0.0, self.max_rotation)
        tdir = rng.normal(size=3)
        n = np.linalg.norm(tdir)
        tdir = tdir / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])
        tmag = rng.uniform(self.t_min, self.t_max)
        return Pose.from_axis_angle(axis, angle, tdir * tmag)


@dataclass
class PhotometricConfig:
    """Additive brightness in [-brightness, brightness] and saturation
    scaling in [1 - saturation, 1 + saturation]."""

    brightness: float = 0.1
    saturation: float = 0.3
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.brightness <= 0.5:
            raise InputError("brightness must lie in [0, 0.5]")
        if not 0.0 <= self.saturation < 1.0:
            raise InputError("saturation must lie in [0, 1)")
        self._rng = np.random.default_rng(self.seed)


def sample_pose(sampler: PoseSampler) -> Pose:
    """Next pose of the sampler's deterministic sequence."""
    return sampler.sample()


def warp_image(src: np.ndarray, depth: DepthMap, K: Intrinsics, T: Pose,
               z_min: float = Z_MIN_DEFAULT) -> WarpResult:
    """Forward-warp `src` into the view reached by `T`.

    Every source pixel with valid depth is back-projected, transformed and
    re-projected; its color lands on the rounded target pixel if it wins
    the z-buffer (strictly smaller target-frame depth; first writer keeps
    ties). The flow field stores the unrounded coordinates. Disocclusion
    holes are filled with `HOLE_FILL` mid-gray rather than black so that
    mean-centred descriptors and correlation windows see them as neutral
    instead of as spurious dark structure.
    """
    src = np.asarray(src)
    H, W = src.shape[:2]
    if depth.shape != (H, W):
        raise InputError(f"depth {depth.shape} does not match image {(H, W)}")

    vv, uu = np.mgrid[0:H, 0:W]
    dvals = depth.values.astype(np.float64)
    ok = depth.valid & np.isfinite(dvals) & (dvals > 0)

    # Back-project + transform all pixels at once (geometry in float64).
    x = (uu - K.cx) / K.fx * dvals
    y = (vv - K.cy) / K.fy * dvals
    pts = np.stack([x, y, dvals], axis=-1).reshape(-1, 3)
    pts_t = pts @ T.R.T + T.t
    p_gt, front = project_masked(pts_t, K, z_min=z_min)
    z_t = pts_t[:, 2]

    # Round half up; valid supervision requires the rounded pixel in-grid.
    ur = np.floor(p_gt[:, 0] + 0.5)
    vr = np.floor(p_gt[:, 1] + 0.5)
    ok_flat = ok.reshape(-1) & front
    inb = ok_flat & (ur >= 0) & (ur <= W - 1) & (vr >= 0) & (vr <= H - 1)

    gt_flow = np.full((H * W, 2), np.nan)
    gt_flow[inb] = p_gt[inb]

    warped = np.full((H, W, 3), HOLE_FILL, dtype=np.float32)
    zbuf = np.full(H * W, np.inf)
    winner = np.full(H * W, -1, dtype=np.int64)
    cand = np.flatnonzero(inb)
    if cand.size:
        tgt = (vr[cand] * W + ur[cand]).astype(np.int64)
        # Per target pixel keep smallest depth, lowest source index on ties
        # (equivalent to streaming in scan order with a strict < test).
        order = np.lexsort((cand, z_t[cand], tgt))
        tgt_sorted = tgt[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
        win_src = cand[order][first]
        win_tgt = tgt_sorted[first]
        zbuf[win_tgt] = z_t[win_src]
        winner[win_tgt] = win_src
        warped.reshape(-1, 3)[win_tgt] = src.reshape(-1, 3)[win_src]

    return WarpResult(
        warped=warped,
        gt_flow=gt_flow.reshape(H, W, 2),
        valid=inb.reshape(H, W),
        filled=(winner >= 0).reshape(H, W),
        zbuf=zbuf.reshape(H, W),
        winner=winner.reshape(H, W),
    )


def scale_depth(depth: DepthMap, scale_range, seed: int) -> DepthMap:
    """Multiply all valid entries by one factor drawn uniformly from the range."""
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if lo <= 0 or hi < lo:
        raise InputError("scale range must satisfy 0 < lo <= hi")
    factor = np.random.default_rng(seed).uniform(lo, hi)
    return apply_depth_scale(depth, factor)


def apply_depth_scale(depth: DepthMap, factor: float) -> DepthMap:
    values = depth.values.astype(np.float32) * np.float32(factor)
    return DepthMap(values, depth.valid.copy())


def apply_photometric(img: np.ndarray, brightness: float, saturation: float) -> np.ndarray:
    """Deterministic core of the augmentation: add a brightness shift,
    interpolate between per-pixel luma and color, clamp to [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    luma = img @ LUMA_WEIGHTS.astype(np.float32)
    out = luma[..., None] + saturation * (img - luma[..., None])
    out = out + brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_photometric(img: np.ndarray, cfg: PhotometricConfig,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    rng = cfg._rng if rng is None else rng
    shift = rng.uniform(-cfg.brightness, cfg.brightness)
    scale = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
    return apply_photometric(img, shift, scale)


def _value_noise(rng: np.random.Generator, H: int, W: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled uniform noise on a (cells+1)^2 lattice."""
    coarse = rng.random((cells + 1, cells + 1))
    gy = np.linspace(0.0, cells, H)
    gx = np.linspace(0.0, cells, W)
    iy = np.minimum(gy.astype(int), cells - 1)
    ix = np.minimum(gx.astype(int), cells - 1)
    fy = (gy - iy)[:, None]
    fx = (gx - ix)[None, :]
    c00 = coarse[np.ix_(iy, ix)]
    c01 = coarse[np.ix_(iy, ix + 1)]
    c10 = coarse[np.ix_(iy + 1, ix)]
    c11 = coarse[np.ix_(iy + 1, ix + 1)]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def make_synthetic_scene(seed: int, height: int = 128, width: int = 128,
                         patch_size: int = 8):
    """Deterministic textured scene over a smooth depth surface.

    Returns (image in [0,1], DepthMap with depths in [1, 4], Intrinsics).
    The texture mixes value-noise octaves down to pixel scale so every
    patch has non-zero variance; the depth field is low-frequency.
    """
    if height % patch_size or width % patch_size:
        raise InputError("scene dimensions must be divisible by the patch size")
    rng = np.random.default_rng(seed)
    img = np.zeros((height, width, 3))
    # Cell sizes around the patch scale (m/8 lattice = 8 px cells at the
    # default 128/8 geometry): coarse enough that small resampling shifts
    # leave a patch recognizable, fine enough that patches a couple of
    # steps apart decorrelate. Heavily low-frequency mixes leave adjacent
    # patches near-identical, which starves contrastive training.
    m = max(height, width)
    octaves = [(max(2, m // 16), 0.20), (max(3, m // 8), 0.45),
               (max(4, m // 4), 0.35)]
    for c in range(3):
        acc = np.zeros((height, width))
        for cells, w in octaves:
            acc += w * _value_noise(rng, height, width, cells)
        img[..., c] = acc
    img = (img - img.min()) / max(img.max() - img.min(), 1e-9)

    hf = _value_noise(rng, height, width, 4)
    hf = (hf - hf.min()) / max(hf.max() - hf.min(), 1e-9)
    depth = DepthMap.from_array((1.0 + 3.0 * hf).astype(np.float32))

    K = Intrinsics(fx=float(width), fy=float(width),
                   cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)
    return img.astype(np.float32), depth, K


@dataclass
class TrainingPair:
    source: np.ndarray
    warped: np.ndarray        # photometrically augmented I_w
    pose: Pose
    warp: WarpResult          # carries the un-augmented flow/z-buffer data
    depth_used: DepthMap      # depth after random scaling


def make_training_pair(src: np.ndarray, depth: DepthMap, K: Intrinsics,
                       sampler: PoseSampler, photo: PhotometricConfig,
                       scale_range=(0.5, 2.0),
                       rng: np.random.Generator | None = None) -> TrainingPair:
    """Scale depth, sample a pose, warp, then augment the warped view.

    With `rng` given, all randomness (depth scale, pose, photometric
    parameters, in that order) comes from that one stream; otherwise the
    sampler's stream drives all draws. The returned pose and flow are the
    ones actually used, so supervision is exactly consistent with them.
    """
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if lo <= 0 or hi < lo:
        raise InputError("scale range must satisfy 0 < lo <= hi")
    rng = sampler._rng if rng is None else rng
    factor = rng.uniform(lo, hi)
    scaled = apply_depth_scale(depth, factor)
    pose = sampler.sample(rng)
    warp = warp_image(src, scaled, K, pose)
    warped = augment_photometric(warp.warped, photo, rng)
    return TrainingPair(source=src, warped=warped, pose=pose, warp=warp,
                        depth_used=scaled)
