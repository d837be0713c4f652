"""Contrastive adaptation training: triplet mining from warp supervision,
triplet loss with cosine distance, analytic gradients through the
adaptation block only, and Adam with a two-phase learning-rate schedule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError, TrainingStalledError
from .embedding import (AdaptationParams, FeatureMap, adaptation_forward,
                        block_backward, block_forward, patch_of)
from .geometry import Intrinsics, Pose, backproject, project_masked, transform_point
from .synthesis import WarpResult

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Triplet:
    anchor: int    # patch index into the source grid
    positive: int  # patch index into the warped/target grid
    negative: int

    def __post_init__(self):
        if self.negative == self.positive:
            raise InputError("negative must differ from positive")


@dataclass
class TrainConfig:
    margin: float = 1.0
    triplets_per_pair: int = 128
    batch_size: int = 1            # image pairs per optimizer step
    epochs: int = 100
    bootstrap_epochs: int = 3
    bootstrap_lr: float = 1e-4
    main_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    exclusion_radius: int = 1      # Chebyshev radius in patch units

    def __post_init__(self):
        if self.margin <= 0:
            raise InputError("margin must be > 0")
        if self.bootstrap_lr <= 0 or self.main_lr <= 0:
            raise InputError("learning rates must be > 0")
        if self.epochs < self.bootstrap_epochs:
            raise InputError("epochs must be >= bootstrap epochs")
        if self.triplets_per_pair < 1 or self.batch_size < 1:
            raise InputError("triplets per pair and batch size must be >= 1")
        if self.exclusion_radius < 0:
            raise InputError("exclusion radius must be >= 0")

    def learning_rate(self, epoch: int) -> float:
        """Two-phase schedule; epochs are 1-indexed."""
        return self.bootstrap_lr if epoch <= self.bootstrap_epochs else self.main_lr

    def to_json(self) -> dict:
        return {
            "margin": self.margin,
            "triplets_per_pair": self.triplets_per_pair,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "bootstrap_epochs": self.bootstrap_epochs,
            "bootstrap_lr": self.bootstrap_lr,
            "main_lr": self.main_lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "exclusion_radius": self.exclusion_radius,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(doc) - known
        if bad:
            raise InputError(f"unknown training config keys: {sorted(bad)}")
        return cls(**doc)


# ------------------------------------------------------------ distances

def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """sqrt(2 - 2 cos(u, v)): the chord length between directions.

    Ranges over [0, 2]; 0 for parallel, sqrt(2) for orthogonal, 2 for
    anti-parallel vectors.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= 0 or nv <= 0:
        raise InputError("cosine distance undefined for zero-norm vectors")
    cos = float(np.dot(u, v) / (nu * nv))
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * cos)))


def triplet_loss(d_ap: float, d_an: float, margin: float) -> float:
    return max(0.0, d_ap - d_an + margin)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, _NORM_FLOOR)


def _cosdist_rows(a_unit: np.ndarray, b_unit: np.ndarray) -> np.ndarray:
    """Distances from each row of a_unit to every row of b_unit; inputs
    pre-normalized."""
    cos = np.clip(a_unit @ b_unit.T, -1.0, 1.0)
    return np.sqrt(np.maximum(0.0, 2.0 - 2.0 * cos))


# ------------------------------------------------------------ anchor filter

def anchor_admissibility(warp: WarpResult, pose: Pose, intrinsics: Intrinsics,
                         patch_size: int, cycle_tol_patches: float = 0.5
                         ) -> np.ndarray:
    """Per-source-pixel mask of pixels usable as anchor supervision.

    A pixel qualifies when its forward projection is valid, it won the
    z-buffer at its rasterized target pixel, and the rasterized round
    trip (backproject the integer target pixel with the z-buffer depth,
    undo the pose, reproject) returns to within `cycle_tol_patches`
    patches of where it started.
    """
    H, W = warp.valid.shape
    mask = warp.valid.copy()
    if not mask.any():
        return mask

    src_v, src_u = np.nonzero(mask)
    tgt = warp.gt_flow[src_v, src_u]                     # continuous (u, v)
    tu = np.floor(tgt[:, 0] + 0.5).astype(np.int64)
    tv = np.floor(tgt[:, 1] + 0.5).astype(np.int64)
    inb = (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)

    lin = src_v * W + src_u
    won = np.zeros(lin.shape, dtype=bool)
    won[inb] = warp.winner[tv[inb], tu[inb]] == lin[inb]

    ok = np.zeros(lin.shape, dtype=bool)
    if won.any():
        sel = np.nonzero(won)[0]
        depth_t = warp.zbuf[tv[sel], tu[sel]]
        pix_t = np.stack([tu[sel], tv[sel]], axis=1).astype(np.float64)
        pts_t = backproject(pix_t, depth_t, intrinsics)
        pts_s = transform_point(pts_t, pose.inverse())
        back, back_ok = project_masked(pts_s, intrinsics)
        dist = np.hypot(back[:, 0] - src_u[sel], back[:, 1] - src_v[sel])
        ok[sel] = back_ok & (dist <= cycle_tol_patches * patch_size)

    mask[src_v, src_u] = ok
    return mask


# ------------------------------------------------------------ mining

def mine_triplets(map_s: FeatureMap, map_w: FeatureMap, gt_flow: np.ndarray,
                  valid: np.ndarray, cfg: TrainConfig, seed) -> list:
    """Hard-negative triplets from one supervised pair.

    Anchors are drawn without replacement among source patches whose
    central pixel carries valid supervision mapping into the target
    grid. The positive is the target patch containing the mapped point;
    the negative minimizes min(d(A, .), d(P, .)) over all target patches
    outside the Chebyshev exclusion neighborhood of the positive.
    """
    if map_s.embed_dim != map_w.embed_dim:
        raise InputError("feature maps must share embedding dimension")
    if (map_s.grid_h, map_s.grid_w) != (map_w.grid_h, map_w.grid_w):
        raise InputError("feature maps must share grid dimensions")
    gh, gw, P = map_s.grid_h, map_s.grid_w, map_s.patch_size
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if gt_flow.shape[:2] != valid.shape or gt_flow.shape[2] != 2:
        raise InputError("gt_flow and valid mask shapes disagree")

    # Supervision is sampled at each patch's central pixel (round-half-up
    # of the continuous center).
    ci = np.arange(gh) * P + P // 2
    cj = np.arange(gw) * P + P // 2
    ci = ci[ci < valid.shape[0]]
    cj = cj[cj < valid.shape[1]]
    if len(ci) != gh or len(cj) != gw:
        raise InputError("gt_flow does not cover the source grid")
    center_valid = valid[np.ix_(ci, cj)]
    center_tgt = gt_flow[np.ix_(ci, cj)]

    finite = np.all(np.isfinite(center_tgt), axis=-1)
    pp = patch_of(np.where(finite[..., None], center_tgt, -10.0 * P), P)
    in_bounds = ((pp[..., 0] >= 0) & (pp[..., 0] < gh)
                 & (pp[..., 1] >= 0) & (pp[..., 1] < gw))
    admissible = center_valid & finite & in_bounds

    anchors = np.nonzero(admissible.reshape(-1))[0]
    if anchors.size == 0:
        return []
    rng = np.random.default_rng(seed)
    if anchors.size > cfg.triplets_per_pair:
        anchors = np.sort(rng.choice(anchors, size=cfg.triplets_per_pair,
                                     replace=False))

    pos_lin = (pp[..., 0] * gw + pp[..., 1]).reshape(-1)
    tok_s = _unit_rows(map_s.tokens().astype(np.float64))
    tok_w = _unit_rows(map_w.tokens().astype(np.float64))
    dist_aw = _cosdist_rows(tok_s[anchors], tok_w)      # (k, N)
    dist_pw = _cosdist_rows(tok_w[pos_lin[anchors]], tok_w)
    cost = np.minimum(dist_aw, dist_pw)

    wi, wj = np.divmod(np.arange(gh * gw), gw)
    triplets = []
    for row, a in enumerate(anchors):
        p = int(pos_lin[a])
        cheb = np.maximum(np.abs(wi - wi[p]), np.abs(wj - wj[p]))
        cand_cost = np.where(cheb <= cfg.exclusion_radius, np.inf, cost[row])
        n = int(np.argmin(cand_cost))
        if not np.isfinite(cand_cost[n]):
            continue   # the whole grid fell inside the exclusion window
        triplets.append(Triplet(anchor=int(a), positive=p, negative=n))
    return triplets


# ------------------------------------------------------------ loss + gradients

def loss_and_gradients(feat_s: FeatureMap, feat_w: FeatureMap, triplets,
                       params: AdaptationParams, margin: float):
    """Mean triplet loss and analytic parameter gradients.

    Both views pass through the adaptation block; gradients flow to the
    block's tensors only, never to the input features.
    """
    if not triplets:
        raise InputError("triplet list must be non-empty")
    dtype = params.wq.dtype
    out_s, cache_s = block_forward(feat_s.tokens(), params, want_cache=True)
    out_w, cache_w = block_forward(feat_w.tokens(), params, want_cache=True)

    a_idx = np.array([t.anchor for t in triplets])
    p_idx = np.array([t.positive for t in triplets])
    n_idx = np.array([t.negative for t in triplets])

    A, Pv, Nv = out_s[a_idx], out_w[p_idx], out_w[n_idx]
    na = np.maximum(np.linalg.norm(A, axis=1, keepdims=True), _NORM_FLOOR)
    npv = np.maximum(np.linalg.norm(Pv, axis=1, keepdims=True), _NORM_FLOOR)
    nn = np.maximum(np.linalg.norm(Nv, axis=1, keepdims=True), _NORM_FLOOR)
    ah, ph, nh = A / na, Pv / npv, Nv / nn

    s_ap = np.clip(np.sum(ah * ph, axis=1), -1.0, 1.0)
    s_an = np.clip(np.sum(ah * nh, axis=1), -1.0, 1.0)
    d_ap = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * s_ap))
    d_an = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * s_an))
    per = np.maximum(0.0, d_ap - d_an + margin)
    loss = float(per.mean())

    T = len(triplets)
    active = (d_ap - d_an + margin) > 0
    # dL/dd = +-active/T; dd/ds = -1/d with the d=0 limit clamped to 0.
    g_ap = np.where(active & (d_ap > 0), -1.0 / np.maximum(d_ap, _NORM_FLOOR), 0.0) / T
    g_an = np.where(active & (d_an > 0), 1.0 / np.maximum(d_an, _NORM_FLOOR), 0.0) / T

    dA = (g_ap[:, None] * (ph - s_ap[:, None] * ah)
          + g_an[:, None] * (nh - s_an[:, None] * ah)) / na
    dP = g_ap[:, None] * (ah - s_ap[:, None] * ph) / npv
    dN = g_an[:, None] * (ah - s_an[:, None] * nh) / nn

    grad_s = np.zeros_like(out_s)
    grad_w = np.zeros_like(out_w)
    np.add.at(grad_s, a_idx, dA.astype(dtype))
    np.add.at(grad_w, p_idx, dP.astype(dtype))
    np.add.at(grad_w, n_idx, dN.astype(dtype))

    gs = block_backward(grad_s, cache_s, params)
    gw = block_backward(grad_w, cache_w, params)
    grads = {k: gs[k] + gw[k] for k in gs}
    return loss, grads


# ------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def like(cls, params: AdaptationParams) -> "AdamState":
        zeros = {n: np.zeros_like(t) for n, t in params.tensors()}
        return cls(m=zeros, v={n: a.copy() for n, a in zeros.items()})


def adam_step(params: AdaptationParams, grads: dict, state: AdamState,
              lr: float, cfg: TrainConfig) -> AdaptationParams:
    """One Adam update; mutates `state`, returns updated parameters."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new = {}
    for name, theta in params.tensors():
        g = grads[name].astype(theta.dtype)
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        new[name] = theta - lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return AdaptationParams(heads=params.heads, **new)


# ------------------------------------------------------------ train loop

@dataclass
class TrainSample:
    """One supervised pair ready for mining: raw (pre-adaptation) feature
    maps plus per-pixel flow supervision."""
    feat_s: FeatureMap
    feat_w: FeatureMap
    gt_flow: np.ndarray
    valid: np.ndarray


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    n_triplets: int


@dataclass
class TrainState:
    params: AdaptationParams
    adam: AdamState
    epoch: int = 0
    history: list = field(default_factory=list)


def loss_log_csv(history) -> str:
    lines = ["epoch,lr,mean_loss,n_triplets"]
    for rec in history:
        lines.append(f"{rec.epoch},{rec.lr:.8g},{rec.mean_loss:.8f},{rec.n_triplets}")
    return "\n".join(lines) + "\n"


def _mining_seed(base_seed: int, epoch: int, pair_index: int) -> int:
    ss = np.random.SeedSequence((base_seed, epoch, pair_index))
    return int(ss.generate_state(1)[0])


def train(sample_source, params: AdaptationParams, cfg: TrainConfig,
          epochs: int | None = None, on_epoch=None) -> TrainState:
    """Run the two-phase training loop.

    `sample_source(epoch)` yields the epoch's list of TrainSample (fresh
    warps for image datasets, a fixed list for precomputed pairs).
    Mining runs on the adapted maps under the current parameters; the
    loss differentiates through the block only. Gradients accumulate
    over `cfg.batch_size` pairs per Adam step. Deterministic given
    cfg.seed in this single-threaded implementation.
    """
    state = TrainState(params=params.copy(), adam=AdamState.like(params))
    n_epochs = cfg.epochs if epochs is None else epochs
    for epoch in range(1, n_epochs + 1):
        lr = cfg.learning_rate(epoch)
        samples = sample_source(epoch)
        loss_sum = 0.0
        trip_count = 0
        pending = []   # (loss, grads) for the current accumulation window

        def flush():
            nonlocal pending
            if not pending:
                return
            acc = {n: sum(g[n] for _, g in pending) / len(pending)
                   for n in pending[0][1]}
            state.params = adam_step(state.params, acc, state.adam, lr, cfg)
            pending = []

        for idx, sample in enumerate(samples):
            adapted_s = adaptation_forward(sample.feat_s, state.params)
            adapted_w = adaptation_forward(sample.feat_w, state.params)
            triplets = mine_triplets(adapted_s, adapted_w, sample.gt_flow,
                                     sample.valid, cfg,
                                     _mining_seed(cfg.seed, epoch, idx))
            if not triplets:
                continue
            loss, grads = loss_and_gradients(sample.feat_s, sample.feat_w,
                                             triplets, state.params, cfg.margin)
            loss_sum += loss * len(triplets)
            trip_count += len(triplets)
            pending.append((loss, grads))
            if len(pending) >= cfg.batch_size:
                flush()
        flush()

        if trip_count == 0:
            raise TrainingStalledError(
                f"epoch {epoch} produced no triplets from any pair")
        state.epoch = epoch
        rec = EpochStats(epoch=epoch, lr=lr, mean_loss=loss_sum / trip_count,
                         n_triplets=trip_count)
        state.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, state)
    return state
