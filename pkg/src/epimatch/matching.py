"""Inference-time correspondence extraction: cosine similarity matrix,
mutual-nearest-neighbor retention with a confidence threshold, and FFT
phase-correlation refinement of the source coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePatchError, InputError
from .embedding import (AdaptationParams, FeatureMap, adaptation_forward,
                        patch_center, upsample_features)
from .synthesis import LUMA_WEIGHTS

ZERO_NORM_SENTINEL = -2.0


@dataclass
class MatchConfig:
    threshold: float = 0.95
    refine: bool = True
    subpixel: bool = False       # parabolic peak interpolation (off: integer argmax)
    tie_break: str = "lowest"
    upsample: int = 1

    def __post_init__(self):
        if not (-1.0 < self.threshold <= 1.0):
            raise InputError("similarity threshold must lie in (-1, 1]")
        if self.tie_break != "lowest":
            raise InputError(f"unknown tie-break rule {self.tie_break!r}")
        if self.upsample < 1 or int(self.upsample) != self.upsample:
            raise InputError("upsample factor must be a positive integer")


@dataclass(frozen=True)
class Match:
    us: float
    vs: float
    ut: float
    vt: float
    score: float
    source_patch: int
    target_patch: int


@dataclass
class CorrespondenceSet:
    matches: list
    elapsed_ms: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        src = [m.source_patch for m in self.matches]
        tgt = [m.target_patch for m in self.matches]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise InputError("correspondences must be one-to-one in patch indices")

    def __len__(self):
        return len(self.matches)

    def source_points(self) -> np.ndarray:
        return np.array([[m.us, m.vs] for m in self.matches],
                        dtype=np.float64).reshape(-1, 2)

    def target_points(self) -> np.ndarray:
        return np.array([[m.ut, m.vt] for m in self.matches],
                        dtype=np.float64).reshape(-1, 2)

    def scores(self) -> np.ndarray:
        return np.array([m.score for m in self.matches], dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "matches": [
                {"us": m.us, "vs": m.vs, "ut": m.ut, "vt": m.vt,
                 "score": m.score, "source_patch": m.source_patch,
                 "target_patch": m.target_patch}
                for m in self.matches
            ],
            "elapsed_ms": self.elapsed_ms,
        }


def similarity_matrix(map_s: FeatureMap, map_t: FeatureMap) -> np.ndarray:
    """Cosine similarities of every source/target descriptor pair.

    Zero-norm descriptors poison their whole row/column with a -2
    sentinel, which can never win an argmax against a real cosine and
    never clears a threshold in (-1, 1].
    """
    if map_s.embed_dim != map_t.embed_dim:
        raise InputError(
            f"embedding dims differ: {map_s.embed_dim} vs {map_t.embed_dim}")
    a = map_s.tokens().astype(np.float64)
    b = map_t.tokens().astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    S = np.clip((a @ b.T) / np.outer(np.maximum(na, 1e-12),
                                     np.maximum(nb, 1e-12)), -1.0, 1.0)
    S[na <= 1e-12, :] = ZERO_NORM_SENTINEL
    S[:, nb <= 1e-12] = ZERO_NORM_SENTINEL
    return S


def mutual_nn_matches(S: np.ndarray, cfg: MatchConfig) -> list:
    """(i, j, score) pairs where i and j are each other's best match and
    the similarity clears the threshold; argmax ties go to the lowest
    index."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or 0 in S.shape:
        return []
    row_best = np.argmax(S, axis=1)
    col_best = np.argmax(S, axis=0)
    out = []
    for i, j in enumerate(row_best):
        if col_best[j] == i and S[i, j] > cfg.threshold:
            out.append((int(i), int(j), float(S[i, j])))
    return out


# ------------------------------------------------------------ phase correlation

def phase_correlation(patch_s: np.ndarray, patch_t: np.ndarray,
                      subpixel: bool = False):
    """Translational offset between two patches via the normalized
    cross-power spectrum.

    Returns (du, dv, peak) such that patch_t(x) ~ patch_s(x + (du, dv)):
    the recovered displacement is added to the source coordinate.
    Displacements use the wrap convention (-P/2, P/2]. With `subpixel`,
    a parabola through the peak's circular neighbors refines each axis
    by at most half a pixel.
    """
    a = np.asarray(patch_s, dtype=np.float64)
    b = np.asarray(patch_t, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InputError("patches must be 2-D and share a shape")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegeneratePatchError("constant patch has a degenerate spectrum")

    cross = np.fft.fft2(a) * np.conj(np.fft.fft2(b))
    mag = np.abs(cross)
    spectrum = np.where(mag > 1e-12, cross / np.where(mag > 1e-12, mag, 1.0), 0.0)
    C = np.real(np.fft.ifft2(spectrum))
    pv, pu = np.unravel_index(int(np.argmax(C)), C.shape)
    peak = float(C[pv, pu])

    def signed(idx, n):
        return idx if idx <= n // 2 else idx - n

    dv = signed(pv, C.shape[0])
    du = signed(pu, C.shape[1])
    if not subpixel:
        return int(du), int(dv), peak

    def parabola(center, minus, plus):
        denom = minus - 2.0 * center + plus
        if abs(denom) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (minus - plus) / denom, -0.5, 0.5))

    h, w = C.shape
    off_v = parabola(C[pv, pu], C[(pv - 1) % h, pu], C[(pv + 1) % h, pu])
    off_u = parabola(C[pv, pu], C[pv, (pu - 1) % w], C[pv, (pu + 1) % w])
    return du + off_u, dv + off_v, peak


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    raise InputError("images must be H x W grayscale or H x W x 3")


def _extract_patch(gray: np.ndarray, lin: int, grid_w: int, patch_size: int):
    gi, gj = divmod(lin, grid_w)
    P = patch_size
    return gray[gi * P:(gi + 1) * P, gj * P:(gj + 1) * P]


def refine_matches(pairs, img_s: np.ndarray, img_t: np.ndarray,
                   patch_size: int, cfg: MatchConfig) -> CorrespondenceSet:
    """Matched patch pairs -> pixel correspondences.

    Coordinates start at the patch centers; when refinement is on, phase
    correlation of the two patches shifts the source coordinate (the
    target stays put). Degenerate patches keep a zero displacement.
    """
    gray_s, gray_t = _luma(img_s), _luma(img_t)
    H, W = gray_s.shape
    if H % patch_size or W % patch_size:
        raise InputError(
            f"image {H}x{W} not divisible by patch size {patch_size}")
    grid_w = W // patch_size

    out = []
    for i, j, score in pairs:
        cs = patch_center(i, grid_w, patch_size)
        ct = patch_center(j, gray_t.shape[1] // patch_size, patch_size)
        du = dv = 0.0
        if cfg.refine:
            try:
                du, dv, _ = phase_correlation(
                    _extract_patch(gray_s, i, grid_w, patch_size),
                    _extract_patch(gray_t, j, grid_w, patch_size),
                    subpixel=cfg.subpixel)
            except DegeneratePatchError:
                du = dv = 0.0
        out.append(Match(us=float(cs[0] + du), vs=float(cs[1] + dv),
                         ut=float(ct[0]), vt=float(ct[1]),
                         score=score, source_patch=i, target_patch=j))
    return CorrespondenceSet(matches=out)


def _centers_only(pairs, grid_w_s: int, grid_w_t: int, patch_size: int
                  ) -> CorrespondenceSet:
    out = []
    for i, j, score in pairs:
        cs = patch_center(i, grid_w_s, patch_size)
        ct = patch_center(j, grid_w_t, patch_size)
        out.append(Match(us=float(cs[0]), vs=float(cs[1]),
                         ut=float(ct[0]), vt=float(ct[1]),
                         score=score, source_patch=i, target_patch=j))
    return CorrespondenceSet(matches=out)


def match_pair(feat_s: FeatureMap, feat_t: FeatureMap,
               params: AdaptationParams | None,
               img_s: np.ndarray | None, img_t: np.ndarray | None,
               cfg: MatchConfig) -> CorrespondenceSet:
    """Full matching pipeline for one pair; wall-clock time for the call
    is recorded on the result.

    `params=None` is the un-adapted baseline (identical to an
    identity-initialized block). Upsampling, when configured, densifies
    both grids before the similarity stage.
    """
    t0 = time.perf_counter()
    if params is not None:
        feat_s = adaptation_forward(feat_s, params)
        feat_t = adaptation_forward(feat_t, params)
    if cfg.upsample > 1:
        feat_s = upsample_features(feat_s, cfg.upsample)
        feat_t = upsample_features(feat_t, cfg.upsample)

    pairs = mutual_nn_matches(similarity_matrix(feat_s, feat_t), cfg)
    if cfg.refine:
        if img_s is None or img_t is None:
            raise InputError("refinement requires both full-resolution images")
        result = refine_matches(pairs, img_s, img_t, feat_s.patch_size, cfg)
    else:
        result = _centers_only(pairs, feat_s.grid_w, feat_t.grid_w,
                               feat_s.patch_size)
    result.elapsed_ms = (time.perf_counter() - t0) * 1000.0
    return result
