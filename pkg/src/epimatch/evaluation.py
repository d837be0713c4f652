"""Metrics over correspondences (epipolar error, precision, inlier rate,
fundamental-matrix error), RANSAC estimation of F, per-pair reports and
the cross-scene robustness protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (EstimationFailedError, InputError, InsufficientDataError,
                     UndefinedMetricError)
from .geometry import (Intrinsics, Pose, epipolar_distances,
                       fundamental_from_pose)
from .matching import CorrespondenceSet, MatchConfig, match_pair

MIN_RANSAC_MATCHES = 8


@dataclass
class RansacConfig:
    threshold: float = 1.0       # px, on the symmetric epipolar distance
    confidence: float = 0.999
    max_iterations: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise InputError("inlier threshold must be > 0")
        if not (0.0 < self.confidence < 1.0):
            raise InputError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise InputError("max iterations must be >= 1")


def _symmetric_distances(F: np.ndarray, p_s: np.ndarray, p_t: np.ndarray):
    d_t, d_s, ok = epipolar_distances(F, p_s, p_t)
    total = np.where(ok, d_t + d_s, np.inf)
    return total, d_t, ok


def epipolar_error(corrs: CorrespondenceSet, F_gt: np.ndarray):
    """Mean symmetric epipolar distance in px; degenerate epipolar lines
    are excluded from the mean and counted. Returns (mean, n_degenerate)."""
    if len(corrs) == 0:
        raise UndefinedMetricError("epipolar error undefined for no matches")
    total, _, ok = _symmetric_distances(np.asarray(F_gt, dtype=np.float64),
                                        corrs.source_points(),
                                        corrs.target_points())
    n_bad = int((~ok).sum())
    if not ok.any():
        raise UndefinedMetricError("all epipolar lines degenerate")
    return float(total[ok].mean()), n_bad


def precision(corrs: CorrespondenceSet, F_gt: np.ndarray,
              tp_threshold: float = 1.0, one_sided: bool = False):
    """Percent of matches whose epipolar distance beats the threshold.

    Default verdict uses the symmetric two-term distance; `one_sided`
    scores only the target point against its line. Degenerate lines are
    excluded and counted. Returns (percent, n_degenerate)."""
    if len(corrs) == 0:
        raise UndefinedMetricError("precision undefined for no matches")
    total, d_t, ok = _symmetric_distances(np.asarray(F_gt, dtype=np.float64),
                                          corrs.source_points(),
                                          corrs.target_points())
    n_bad = int((~ok).sum())
    if not ok.any():
        raise UndefinedMetricError("all epipolar lines degenerate")
    dist = d_t if one_sided else total
    tp = int((dist[ok] < tp_threshold).sum())
    return 100.0 * tp / int(ok.sum()), n_bad


# ------------------------------------------------------------ RANSAC

def _hartley_normalization(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    if spread < 1e-12:
        raise EstimationFailedError("coincident points admit no normalization")
    s = np.sqrt(2.0) / spread
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def _eight_point(p_s: np.ndarray, p_t: np.ndarray) -> np.ndarray:
    """Normalized linear solve for F (p_t' F p_s = 0), rank-2 enforced,
    unit Frobenius norm."""
    T_s = _hartley_normalization(p_s)
    T_t = _hartley_normalization(p_t)
    hs = np.column_stack([p_s, np.ones(len(p_s))]) @ T_s.T
    ht = np.column_stack([p_t, np.ones(len(p_t))]) @ T_t.T
    A = (ht[:, :, None] * hs[:, None, :]).reshape(len(p_s), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(F)
    F = (U * np.array([S[0], S[1], 0.0])) @ Vt2
    F = T_t.T @ F @ T_s
    norm = np.linalg.norm(F)
    if not np.isfinite(norm) or norm < 1e-15:
        raise EstimationFailedError("linear system produced a null matrix")
    return F / norm


def estimate_fundamental_ransac(corrs: CorrespondenceSet, cfg: RansacConfig):
    """Hypothesize-and-verify F estimation.

    Eight-point hypotheses from random minimal samples are scored by
    symmetric epipolar distance; the best consensus is re-estimated on
    its inliers. Early exit once the configured confidence is reached.
    Returns (F, inlier mask).
    """
    n = len(corrs)
    if n < MIN_RANSAC_MATCHES:
        raise InsufficientDataError(
            f"RANSAC needs >= {MIN_RANSAC_MATCHES} matches, got {n}")
    p_s = corrs.source_points()
    p_t = corrs.target_points()
    rng = np.random.default_rng(cfg.seed)

    best_F = None
    best_mask = None
    best_count = -1
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, size=MIN_RANSAC_MATCHES, replace=False)
        try:
            F = _eight_point(p_s[idx], p_t[idx])
        except EstimationFailedError:
            continue
        total, _, ok = _symmetric_distances(F, p_s, p_t)
        mask = ok & (total < cfg.threshold)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_F, best_mask = count, F, mask
            w = max(count / n, 1e-9)
            denom = np.log1p(-min(w ** MIN_RANSAC_MATCHES, 1.0 - 1e-12))
            needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom))
    if best_F is None:
        raise EstimationFailedError("every RANSAC iteration was degenerate")

    if best_count >= MIN_RANSAC_MATCHES:
        try:
            F = _eight_point(p_s[best_mask], p_t[best_mask])
            total, _, ok = _symmetric_distances(F, p_s, p_t)
            mask = ok & (total < cfg.threshold)
            if int(mask.sum()) >= best_count:
                best_F, best_mask = F, mask
        except EstimationFailedError:
            pass
    return best_F, best_mask


def fundamental_error(F_est: np.ndarray, F_gt: np.ndarray) -> float:
    """Frobenius distance between the two matrices after mapping both to
    unit Frobenius norm and aligning their signs (F is only defined up
    to a nonzero scale)."""
    A = np.asarray(F_est, dtype=np.float64)
    B = np.asarray(F_gt, dtype=np.float64)
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na < 1e-15 or nb < 1e-15:
        raise InputError("fundamental error undefined for a zero matrix")
    A = A / na
    B = B / nb
    if float(np.sum(A * B)) < 0:
        A = -A
    return float(np.linalg.norm(A - B))


def inlier_percentage(corrs: CorrespondenceSet, cfg: RansacConfig):
    """RANSAC consensus share: (percent, n_inliers, n_matches)."""
    if len(corrs) == 0:
        raise UndefinedMetricError("inlier percentage undefined for no matches")
    _, mask = estimate_fundamental_ransac(corrs, cfg)
    n_in = int(mask.sum())
    return 100.0 * n_in / len(corrs), n_in, len(corrs)


# ------------------------------------------------------------ reports

_METRIC_FIELDS = ("epipolar_error_px", "precision_pct", "fundamental_error",
                  "inlier_pct")


@dataclass
class MetricsReport:
    epipolar_error_px: float | None = None
    precision_pct: float | None = None
    fundamental_error: float | None = None
    inlier_pct: float | None = None
    m_all: int = 0
    m_ransac: int = 0
    elapsed_ms: float | None = None
    degenerate_lines: int = 0
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.precision_pct is not None and not 0 <= self.precision_pct <= 100:
            raise InputError("precision must lie in [0, 100]")
        if self.inlier_pct is not None and not 0 <= self.inlier_pct <= 100:
            raise InputError("inlier percentage must lie in [0, 100]")
        if self.m_ransac > self.m_all:
            raise InputError("inlier count cannot exceed match count")

    def to_json(self) -> dict:
        return {
            "epipolar_error_px": self.epipolar_error_px,
            "precision_pct": self.precision_pct,
            "fundamental_error": self.fundamental_error,
            "inlier_pct": self.inlier_pct,
            "m_all": self.m_all,
            "m_ransac": self.m_ransac,
            "elapsed_ms": self.elapsed_ms,
            "degenerate_lines": self.degenerate_lines,
            "errors": dict(self.errors),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        return cls(**doc)


def evaluate_pair(corrs: CorrespondenceSet, intrinsics: Intrinsics, pose: Pose,
                  timing_ms: float | None = None,
                  ransac: RansacConfig | None = None,
                  tp_threshold: float = 1.0,
                  one_sided: bool = False) -> MetricsReport:
    """All metrics for one pair against the ground-truth geometry.

    Metrics that cannot be computed (no matches, too few for RANSAC)
    are left unset and recorded as error markers instead of raising.
    """
    ransac = ransac or RansacConfig()
    F_gt = fundamental_from_pose(intrinsics, pose)
    report = MetricsReport(m_all=len(corrs), elapsed_ms=timing_ms)

    try:
        report.epipolar_error_px, n_bad = epipolar_error(corrs, F_gt)
        report.degenerate_lines = n_bad
    except UndefinedMetricError as exc:
        report.errors["epipolar_error_px"] = str(exc)
    try:
        report.precision_pct, _ = precision(corrs, F_gt, tp_threshold,
                                            one_sided)
    except UndefinedMetricError as exc:
        report.errors["precision_pct"] = str(exc)
    try:
        F_est, mask = estimate_fundamental_ransac(corrs, ransac)
        report.m_ransac = int(mask.sum())
        report.inlier_pct = 100.0 * report.m_ransac / len(corrs)
        report.fundamental_error = fundamental_error(F_est, F_gt)
    except (InsufficientDataError, EstimationFailedError,
            UndefinedMetricError) as exc:
        report.errors["inlier_pct"] = str(exc)
        report.errors["fundamental_error"] = str(exc)
    return report


def aggregate_csv(reports) -> str:
    """Mean and standard deviation of each metric across pair reports."""
    lines = ["metric,mean,std,n"]
    keys = _METRIC_FIELDS + ("elapsed_ms", "m_all", "m_ransac")
    for key in keys:
        vals = [getattr(r, key) for r in reports]
        vals = np.array([v for v in vals if v is not None], dtype=np.float64)
        if vals.size == 0:
            lines.append(f"{key},nan,nan,0")
        else:
            lines.append(f"{key},{vals.mean():.6f},{vals.std():.6f},{vals.size}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ robustness

@dataclass
class RobustnessResult:
    total_matches: int
    total_inliers: int
    per_pair: list          # (n_matches, n_inliers, too_few_flag)


def robustness_protocol(pairs, params, match_cfg: MatchConfig | None = None,
                        ransac: RansacConfig | None = None) -> RobustnessResult:
    """Aggregate match and RANSAC-inlier counts over image pairs that
    share no scene content; fewer hits means a more discriminative
    model. Pairs with too few matches for RANSAC count zero inliers and
    are flagged rather than failing.

    `pairs` yields (feat_s, feat_t, img_s, img_t) tuples.
    """
    match_cfg = match_cfg or MatchConfig()
    ransac = ransac or RansacConfig()
    per_pair = []
    total_m = total_in = 0
    for feat_s, feat_t, img_s, img_t in pairs:
        corrs = match_pair(feat_s, feat_t, params, img_s, img_t, match_cfg)
        n_m = len(corrs)
        too_few = n_m < MIN_RANSAC_MATCHES
        n_in = 0
        if not too_few:
            try:
                _, mask = estimate_fundamental_ransac(corrs, ransac)
                n_in = int(mask.sum())
            except EstimationFailedError:
                too_few = True
        per_pair.append((n_m, n_in, too_few))
        total_m += n_m
        total_in += n_in
    return RobustnessResult(total_matches=total_m, total_inliers=total_in,
                            per_pair=per_pair)
