"""Camera models, SE(3) poses, projection and epipolar algebra.

All computations run in float64 regardless of the feature dtype: epipolar
residuals of exactly constructed correspondences sit near 1e-12 px, well
below float32 resolution.

Pixel convention: continuous coordinates, origin at the top-left pixel,
u rightward and v downward, with integer (u, v) at pixel centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateLineError,
    DegenerateMotionError,
    InputError,
)

Z_MIN_DEFAULT = 1e-6
ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InputError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        # Closed form; avoids a generic solve for this triangular matrix.
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_json(self) -> str:
        return json.dumps({"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy})

    @classmethod
    def from_json(cls, text: str) -> "Intrinsics":
        try:
            doc = json.loads(text)
            return cls(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad intrinsics document: {exc}") from exc


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping source-frame points to the target frame:
    P_target = R @ P_source + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InputError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InputError("R is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InputError("det(R) != 1 within 1e-9")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float, t: np.ndarray) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            return cls(np.eye(3), t)
        k = axis / n
        K = skew(k)
        R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
        return cls(R, t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying `other` first, then `self`."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def matrix4(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def to_json(self) -> str:
        return json.dumps({"R": self.R.reshape(-1).tolist(), "t": self.t.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise InputError(f"bad pose document: {exc}") from exc
        if isinstance(doc, list):
            return cls.from_matrix4(doc)
        if isinstance(doc, dict) and "matrix" in doc:
            return cls.from_matrix4(doc["matrix"])
        try:
            R = np.asarray(doc["R"], dtype=np.float64).reshape(3, 3)
            t = np.asarray(doc["t"], dtype=np.float64).reshape(3)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad pose document: {exc}") from exc
        return cls(R, t)

    @classmethod
    def from_matrix4(cls, flat) -> "Pose":
        M = np.asarray(flat, dtype=np.float64)
        if M.size != 16:
            raise InputError(f"homogeneous pose needs 16 numbers, got {M.size}")
        M = M.reshape(4, 4)
        if np.max(np.abs(M[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise InputError("last row of homogeneous pose must be [0,0,0,1]")
        return cls(M[:3, :3], M[:3, 3])


def backproject(p, depth: float, K: Intrinsics) -> np.ndarray:
    """Lift pixel(s) with known depth to 3D in the camera frame.

    `p` is (u, v) or an (N, 2) array; `depth` a scalar or length-N vector.
    Returns a 3-vector or an (N, 3) array with Z equal to the depth.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise InputError("depth must be positive and finite")
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    d = np.broadcast_to(d, (pts.shape[0],))
    X = (pts[:, 0] - K.cx) / K.fx * d
    Y = (pts[:, 1] - K.cy) / K.fy * d
    out = np.stack([X, Y, d], axis=1)
    return out[0] if single else out


def transform_point(P, T: Pose) -> np.ndarray:
    """Apply the rigid transform: R @ P + t (vectorized over rows)."""
    P = np.asarray(P, dtype=np.float64)
    single = P.ndim == 1
    pts = np.atleast_2d(P)
    out = pts @ T.R.T + T.t
    return out[0] if single else out


def project(P, K: Intrinsics, z_min: float = Z_MIN_DEFAULT) -> np.ndarray:
    """Perspective projection to pixel coordinates.

    Raises `BehindCameraError` if any Z <= z_min; callers that want to drop
    such points should mask beforehand (see `project_masked`).
    """
    P = np.asarray(P, dtype=np.float64)
    single = P.ndim == 1
    pts = np.atleast_2d(P)
    if np.any(pts[:, 2] <= z_min):
        raise BehindCameraError(f"point at Z <= z_min ({z_min})")
    u = K.fx * pts[:, 0] / pts[:, 2] + K.cx
    v = K.fy * pts[:, 1] / pts[:, 2] + K.cy
    out = np.stack([u, v], axis=1)
    return out[0] if single else out


def project_masked(P, K: Intrinsics, z_min: float = Z_MIN_DEFAULT):
    """Vectorized projection returning (pixels, in_front_mask); behind-camera
    rows hold NaN instead of raising."""
    pts = np.atleast_2d(np.asarray(P, dtype=np.float64))
    ok = pts[:, 2] > z_min
    z = np.where(ok, pts[:, 2], 1.0)
    u = K.fx * pts[:, 0] / z + K.cx
    v = K.fy * pts[:, 1] / z + K.cy
    out = np.stack([u, v], axis=1)
    out[~ok] = np.nan
    return out, ok


def skew(t) -> np.ndarray:
    """Matrix [t]x such that [t]x @ x == cross(t, x)."""
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return np.array(
        [
            [0.0, -t[2], t[1]],
            [t[2], 0.0, -t[0]],
            [-t[1], t[0], 0.0],
        ]
    )


def fundamental_from_pose(K: Intrinsics, T: Pose) -> np.ndarray:
    """Ground-truth fundamental matrix K^-T [t]x R K^-1 for the convention
    P_target = R @ P_source + t; satisfies p_t^T F p_s = 0."""
    if np.linalg.norm(T.t) < 1e-12:
        raise DegenerateMotionError("pure rotation: fundamental matrix undefined")
    Kinv = K.inverse_matrix()
    return Kinv.T @ skew(T.t) @ T.R @ Kinv


def _homogeneous(p) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    return np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)


def epipolar_distances(F: np.ndarray, p_s, p_t, min_line_norm: float = 1e-12):
    """Per-pair terms of the symmetric epipolar distance, vectorized.

    Returns (d_target, d_source, ok): distance of p_t to the line F p_s,
    distance of p_s to the line F^T p_t, and a mask of pairs whose two
    epipolar lines both have a non-vanishing (a, b) normal. Degenerate
    pairs hold NaN distances.
    """
    F = np.asarray(F, dtype=np.float64)
    hs = _homogeneous(p_s)
    ht = _homogeneous(p_t)
    l_t = hs @ F.T          # line in target image: F @ p_s
    l_s = ht @ F            # line in source image: F^T @ p_t
    num = np.abs(np.sum(ht * l_t, axis=1))
    n_t = np.hypot(l_t[:, 0], l_t[:, 1])
    n_s = np.hypot(l_s[:, 0], l_s[:, 1])
    ok = (n_t > min_line_norm) & (n_s > min_line_norm)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_t = np.where(ok, num / n_t, np.nan)
        d_s = np.where(ok, num / n_s, np.nan)
    return d_t, d_s, ok


def symmetric_epipolar_distance(F: np.ndarray, p_s, p_t) -> float:
    """Sum of the two point-to-epipolar-line distances for a single pair."""
    d_t, d_s, ok = epipolar_distances(F, np.atleast_2d(p_s), np.atleast_2d(p_t))
    if not ok[0]:
        raise DegenerateLineError("epipolar line has zero (a, b) normal")
    return float(d_t[0] + d_s[0])
