"""Patch-descriptor maps, the trainable adaptation block and the
deterministic pseudo-backbone used for neural-free runs.

The adaptation block is a single pre-norm transformer layer (multi-head
self-attention + 2-layer GELU MLP, both residual) with no positional
terms: backbone features already encode position, and leaving them out
keeps the block token-permutation equivariant. Attention-output and
MLP-output projections initialize to zero, so a fresh block is exactly
the identity map and un-adapted matching is the epoch-0 special case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import InputError
from . import formats

LN_EPS = 1e-6


@dataclass
class FeatureMap:
    """Grid of descriptors at patch resolution."""

    data: np.ndarray          # grid_h x grid_w x E float32
    patch_size: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InputError("feature data must be grid_h x grid_w x E")
        if self.patch_size < 1:
            raise InputError("patch size must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise InputError("feature values must be finite")

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.data.shape[2]

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def tokens(self) -> np.ndarray:
        """Row-major (N, E) view of the grid."""
        return self.data.reshape(-1, self.data.shape[2])


def patch_center(index_or_ij, grid_w: int, patch_size: int) -> np.ndarray:
    """Pixel coordinates (u, v) of a patch center.

    With integer pixel centers, patch j spans pixels [j*P, (j+1)*P) and
    its center sits at j*P + (P-1)/2.
    """
    if np.isscalar(index_or_ij):
        gi, gj = divmod(int(index_or_ij), grid_w)
    else:
        gi, gj = index_or_ij
    half = (patch_size - 1) / 2.0
    return np.array([gj * patch_size + half, gi * patch_size + half])


def patch_centers(grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """(N, 2) array of all patch centers in row-major order."""
    gi, gj = np.mgrid[0:grid_h, 0:grid_w]
    half = (patch_size - 1) / 2.0
    u = gj * patch_size + half
    v = gi * patch_size + half
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)


def patch_of(coords, patch_size: int) -> np.ndarray:
    """Patch grid indices (gi, gj) containing continuous pixel coords (u, v)."""
    coords = np.asarray(coords, dtype=np.float64)
    gj = np.floor((coords[..., 0] + 0.5) / patch_size).astype(np.int64)
    gi = np.floor((coords[..., 1] + 0.5) / patch_size).astype(np.int64)
    return np.stack([gi, gj], axis=-1)


# ------------------------------------------------------------ pseudo-backbone

def pseudo_backbone(img: np.ndarray, patch_size: int, embed_dim: int,
                    seed: int) -> FeatureMap:
    """Deterministic stand-in for a frozen feature extractor.

    Each patch's pixels (centred on the nominal 0.5 image mean, the same
    role dataset-mean subtraction plays for a real backbone) plus
    per-channel mean/variance pass through a fixed seeded random
    projection to `embed_dim` and are L2-normalized. Identical patches
    therefore map to identical unit descriptors. Without the centring,
    every descriptor shares one dominant projection direction and all
    pairwise cosines crowd toward 1, which breaks cosine thresholds and
    margin-based training downstream.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    P = patch_size
    if H % P or W % P:
        raise InputError(f"image {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    patches = img.reshape(gh, P, gw, P, 3).transpose(0, 2, 1, 3, 4)
    flat = patches.reshape(gh * gw, P * P, 3) - 0.5
    mean = flat.mean(axis=1)
    var = flat.var(axis=1)
    desc = np.concatenate([flat.reshape(gh * gw, -1), mean, var], axis=1)

    d_in = desc.shape[1]
    proj = np.random.default_rng(seed).standard_normal((d_in, embed_dim))
    proj /= np.sqrt(d_in)
    feats = desc @ proj
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = np.where(norms > 1e-12, feats / np.maximum(norms, 1e-12), 0.0)
    return FeatureMap(feats.reshape(gh, gw, embed_dim).astype(np.float32), P)


# ------------------------------------------------------------ upsampling

def upsample_features(fmap: FeatureMap, factor: int = 2) -> FeatureMap:
    """Bilinear grid upsampling aligned at patch centers (sample position
    (i + 0.5)/factor - 0.5 in input grid units, borders clamped)."""
    if factor < 1 or int(factor) != factor:
        raise InputError("factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return FeatureMap(fmap.data.copy(), fmap.patch_size)
    if fmap.patch_size % factor:
        raise InputError(
            f"patch size {fmap.patch_size} not divisible by factor {factor}")

    def axis_weights(n: int):
        pos = (np.arange(n * factor) + 0.5) / factor - 0.5
        pos = np.clip(pos, 0.0, n - 1.0)
        i0 = np.clip(pos.astype(int), 0, max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        frac = pos - i0
        return i0, i1, frac

    data = fmap.data.astype(np.float64)
    r0, r1, fr = axis_weights(fmap.grid_h)
    rows = data[r0] * (1 - fr)[:, None, None] + data[r1] * fr[:, None, None]
    c0, c1, fc = axis_weights(fmap.grid_w)
    out = rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    return FeatureMap(out.astype(np.float32), fmap.patch_size // factor)


# ------------------------------------------------------------ adaptation block

@dataclass
class AdaptationParams:
    """All trainable tensors of the adaptation block."""

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: int

    TENSOR_NAMES = (
        "ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv",
        "wo", "bo", "ln2_gamma", "ln2_beta", "w1", "b1", "w2", "b2",
    )

    def __post_init__(self):
        E = self.wq.shape[0]
        if self.heads < 1 or E % self.heads:
            raise InputError(f"head count {self.heads} must divide E={E}")
        hidden = self.w1.shape[1]
        shapes = {
            "ln1_gamma": (E,), "ln1_beta": (E,),
            "wq": (E, E), "bq": (E,), "wk": (E, E), "bk": (E,),
            "wv": (E, E), "bv": (E,), "wo": (E, E), "bo": (E,),
            "ln2_gamma": (E,), "ln2_beta": (E,),
            "w1": (E, hidden), "b1": (hidden,), "w2": (hidden, E), "b2": (E,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise InputError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite values")

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[0]

    def tensors(self):
        """Ordered (name, array) list; checkpoint and optimizer order."""
        return [(n, getattr(self, n)) for n in self.TENSOR_NAMES]

    def copy(self) -> "AdaptationParams":
        kw = {n: getattr(self, n).copy() for n in self.TENSOR_NAMES}
        return AdaptationParams(heads=self.heads, **kw)

    def astype(self, dtype) -> "AdaptationParams":
        kw = {n: getattr(self, n).astype(dtype) for n in self.TENSOR_NAMES}
        return AdaptationParams(heads=self.heads, **kw)


def init_adaptation(embed_dim: int, heads: int = 12, mlp_ratio: int = 4,
                    seed: int = 0, dtype=np.float32) -> AdaptationParams:
    """Truncated-normal input projections, zero output projections: the
    fresh block computes the identity."""
    if heads < 1 or embed_dim % heads:
        raise InputError(f"head count {heads} must divide E={embed_dim}")
    rng = np.random.default_rng(seed)
    hidden = mlp_ratio * embed_dim

    def trunc(shape):
        vals = stats.truncnorm.rvs(-2.0, 2.0, scale=0.02, size=shape,
                                   random_state=rng)
        return np.asarray(vals, dtype=dtype)

    E = embed_dim
    return AdaptationParams(
        ln1_gamma=np.ones(E, dtype=dtype), ln1_beta=np.zeros(E, dtype=dtype),
        wq=trunc((E, E)), bq=np.zeros(E, dtype=dtype),
        wk=trunc((E, E)), bk=np.zeros(E, dtype=dtype),
        wv=trunc((E, E)), bv=np.zeros(E, dtype=dtype),
        wo=np.zeros((E, E), dtype=dtype), bo=np.zeros(E, dtype=dtype),
        ln2_gamma=np.ones(E, dtype=dtype), ln2_beta=np.zeros(E, dtype=dtype),
        w1=trunc((E, hidden)), b1=np.zeros(hidden, dtype=dtype),
        w2=np.zeros((hidden, E), dtype=dtype), b2=np.zeros(E, dtype=dtype),
        heads=heads,
    )


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def _layer_norm_backward(dout, xhat, inv_std, gamma):
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _split_heads(x, heads):
    N, E = x.shape
    return x.reshape(N, heads, E // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, N, d = x.shape
    return x.transpose(1, 0, 2).reshape(N, h * d)


def block_forward(x: np.ndarray, p: AdaptationParams, want_cache: bool = False):
    """Pre-norm transformer block on (N, E) tokens; returns (out, cache)."""
    x = np.asarray(x, dtype=p.wq.dtype)
    if x.ndim != 2 or x.shape[1] != p.embed_dim:
        raise InputError(
            f"tokens of dim {x.shape[-1] if x.ndim else '?'} fed to block "
            f"with E={p.embed_dim}")
    u, xhat1, inv1 = _layer_norm(x, p.ln1_gamma, p.ln1_beta)
    Q = u @ p.wq + p.bq
    K = u @ p.wk + p.bk
    V = u @ p.wv + p.bv
    Qh, Kh, Vh = (_split_heads(m, p.heads) for m in (Q, K, V))
    scale = 1.0 / np.sqrt(Qh.shape[-1])
    S = (Qh @ Kh.transpose(0, 2, 1)) * scale
    S = S - S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    Oh = A @ Vh
    O = _merge_heads(Oh)
    attn = O @ p.wo + p.bo
    y = x + attn

    v2, xhat2, inv2 = _layer_norm(y, p.ln2_gamma, p.ln2_beta)
    hpre = v2 @ p.w1 + p.b1
    hact = _gelu(hpre)
    z = y + hact @ p.w2 + p.b2

    cache = None
    if want_cache:
        cache = dict(x=x, xhat1=xhat1, inv1=inv1, u=u, Qh=Qh, Kh=Kh, Vh=Vh,
                     A=A, O=O, scale=scale, y=y, xhat2=xhat2, inv2=inv2,
                     v2=v2, hpre=hpre, hact=hact)
    return z, cache


def block_backward(dz: np.ndarray, cache: dict, p: AdaptationParams):
    """Gradients of every parameter tensor for upstream dz; input gradients
    are propagated internally but not returned (the backbone is frozen)."""
    g = {}
    dy = dz.copy()

    g["w2"] = cache["hact"].T @ dz
    g["b2"] = dz.sum(axis=0)
    dhact = dz @ p.w2.T
    dhpre = dhact * _gelu_grad(cache["hpre"])
    g["w1"] = cache["v2"].T @ dhpre
    g["b1"] = dhpre.sum(axis=0)
    dv2 = dhpre @ p.w1.T
    dy_ln, g["ln2_gamma"], g["ln2_beta"] = _layer_norm_backward(
        dv2, cache["xhat2"], cache["inv2"], p.ln2_gamma)
    dy += dy_ln

    g["wo"] = cache["O"].T @ dy
    g["bo"] = dy.sum(axis=0)
    dO = dy @ p.wo.T
    dOh = _split_heads(dO, p.heads)
    A, Qh, Kh, Vh = cache["A"], cache["Qh"], cache["Kh"], cache["Vh"]
    dA = dOh @ Vh.transpose(0, 2, 1)
    dVh = A.transpose(0, 2, 1) @ dOh
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQh = (dS @ Kh) * cache["scale"]
    dKh = (dS.transpose(0, 2, 1) @ Qh) * cache["scale"]
    dQ, dK, dV = (_merge_heads(m) for m in (dQh, dKh, dVh))
    u = cache["u"]
    g["wq"] = u.T @ dQ
    g["bq"] = dQ.sum(axis=0)
    g["wk"] = u.T @ dK
    g["bk"] = dK.sum(axis=0)
    g["wv"] = u.T @ dV
    g["bv"] = dV.sum(axis=0)
    dU = dQ @ p.wq.T + dK @ p.wk.T + dV @ p.wv.T
    _, g["ln1_gamma"], g["ln1_beta"] = _layer_norm_backward(
        dU, cache["xhat1"], cache["inv1"], p.ln1_gamma)
    return g


def adaptation_forward(fmap: FeatureMap, params: AdaptationParams) -> FeatureMap:
    """Adapted descriptor map; same grid, same embedding dimension."""
    if fmap.embed_dim != params.embed_dim:
        raise InputError(
            f"feature dim {fmap.embed_dim} != block dim {params.embed_dim}")
    out, _ = block_forward(fmap.tokens(), params)
    return FeatureMap(out.reshape(fmap.data.shape).astype(np.float32),
                      fmap.patch_size)


# ------------------------------------------------------------ feature I/O

def write_features(fmap: FeatureMap, path) -> None:
    formats.write_feat(path, fmap.data, fmap.patch_size)


def read_features(path) -> FeatureMap:
    data, patch_size = formats.read_feat(path)
    return FeatureMap(data, patch_size)


def save_adaptation(path, params: AdaptationParams) -> None:
    tensors = [("num_heads", np.array([params.heads], dtype=np.float32))]
    tensors += params.tensors()
    formats.write_weights(path, tensors)


def load_adaptation(path) -> AdaptationParams:
    tensors = formats.read_weights(path)
    try:
        heads = int(tensors.pop("num_heads")[0])
        kw = {n: tensors[n] for n in AdaptationParams.TENSOR_NAMES}
    except KeyError as exc:
        raise formats.FormatError(f"checkpoint missing tensor {exc}") from exc
    return AdaptationParams(heads=heads, **kw)
