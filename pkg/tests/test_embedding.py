"""Feature-map utilities and adaptation-block tests.

The block's analytic gradients are validated entry by entry against
central finite differences in float64; the bilinear upsampler against a
scalar reimplementation of its sampling rule.
"""

import numpy as np
import pytest

from epimatch.embedding import (AdaptationParams, FeatureMap,
                                adaptation_forward, block_backward,
                                block_forward, init_adaptation, load_adaptation,
                                patch_center, patch_centers, patch_of,
                                pseudo_backbone, read_features,
                                save_adaptation, upsample_features,
                                write_features)
from epimatch.errors import InputError
from epimatch.formats import FormatError, write_weights


def dense_params(embed_dim=16, heads=2, mlp_ratio=2, seed=0):
    """Initialized block with the zero tensors replaced by small random
    values so every gradient path is exercised."""
    p = init_adaptation(embed_dim, heads=heads, mlp_ratio=mlp_ratio, seed=seed,
                        dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    p.wo[:] = rng.normal(scale=0.05, size=p.wo.shape)
    p.w2[:] = rng.normal(scale=0.05, size=p.w2.shape)
    for name in ("bq", "bk", "bv", "bo", "b1", "b2", "ln1_beta", "ln2_beta"):
        arr = getattr(p, name)
        arr[:] = rng.normal(scale=0.01, size=arr.shape)
    p.ln1_gamma[:] = 1.0 + rng.normal(scale=0.05, size=embed_dim)
    p.ln2_gamma[:] = 1.0 + rng.normal(scale=0.05, size=embed_dim)
    return p


# ---------------------------------------------------------------- grid helpers

def test_patch_center_hand_values():
    np.testing.assert_array_equal(patch_center((0, 0), 4, 8), [3.5, 3.5])
    np.testing.assert_array_equal(patch_center((2, 1), 4, 8), [11.5, 19.5])
    # scalar index 6 in a 4-wide grid is (gi=1, gj=2)
    np.testing.assert_array_equal(patch_center(6, 4, 8), [19.5, 11.5])
    np.testing.assert_array_equal(patch_center((0, 1), 4, 14), [20.5, 6.5])


def test_patch_centers_row_major():
    grid = patch_centers(2, 3, 8)
    assert grid.shape == (6, 2)
    for idx in range(6):
        np.testing.assert_array_equal(grid[idx], patch_center(idx, 3, 8))


def test_patch_of_inverts_centers_and_boundaries():
    for idx in range(12):
        gi, gj = divmod(idx, 4)
        got = patch_of(patch_center(idx, 4, 8), 8)
        np.testing.assert_array_equal(got, [gi, gj])
    # pixel u belongs to patch floor((u + 0.5) / P)
    np.testing.assert_array_equal(patch_of((7.4999, 0.0), 8), [0, 0])
    np.testing.assert_array_equal(patch_of((7.5, 0.0), 8), [0, 1])
    np.testing.assert_array_equal(patch_of((-0.6, 0.0), 8), [0, -1])


# ---------------------------------------------------------------- feature maps

def test_feature_map_validation_and_tokens():
    fmap = FeatureMap(np.arange(24, dtype=np.float32).reshape(2, 3, 4), 8)
    assert (fmap.grid_h, fmap.grid_w, fmap.embed_dim, fmap.n_patches) == (2, 3, 4, 6)
    np.testing.assert_array_equal(fmap.tokens()[4], fmap.data[1, 1])
    with pytest.raises(InputError):
        FeatureMap(np.zeros((2, 3)), 8)
    with pytest.raises(InputError):
        FeatureMap(np.full((1, 1, 2), np.nan), 8)
    with pytest.raises(InputError):
        FeatureMap(np.zeros((1, 1, 2)), 0)


def test_pseudo_backbone_deterministic_unit_descriptors():
    rng = np.random.default_rng(4)
    img = rng.random((32, 24, 3))
    a = pseudo_backbone(img, 8, 32, seed=17)
    b = pseudo_backbone(img, 8, 32, seed=17)
    assert (a.grid_h, a.grid_w, a.embed_dim) == (4, 3, 32)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_allclose(np.linalg.norm(a.tokens(), axis=1), 1.0,
                               atol=1e-5)
    c = pseudo_backbone(img, 8, 32, seed=18)
    assert np.any(a.data != c.data)
    with pytest.raises(InputError):
        pseudo_backbone(img, 7, 32, seed=17)


def test_pseudo_backbone_identical_patches_share_descriptors():
    patch = np.random.default_rng(5).random((8, 8, 3))
    img = np.tile(patch, (2, 3, 1))
    fmap = pseudo_backbone(img, 8, 16, seed=0)
    toks = fmap.tokens()
    np.testing.assert_allclose(toks, np.tile(toks[0], (6, 1)), atol=1e-6)


def test_feature_file_round_trip(tmp_path):
    fmap = pseudo_backbone(np.random.default_rng(6).random((16, 16, 3)), 8, 24,
                           seed=1)
    path = tmp_path / "f.feat"
    write_features(fmap, path)
    back = read_features(path)
    assert back.patch_size == 8
    np.testing.assert_array_equal(back.data, fmap.data)


# ---------------------------------------------------------------- upsampling

def reference_upsample(data, factor):
    gh, gw, E = data.shape

    def sample_axis(i, n):
        pos = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = min(int(pos), max(n - 2, 0))
        return i0, min(i0 + 1, n - 1), pos - i0

    out = np.zeros((gh * factor, gw * factor, E))
    for oi in range(gh * factor):
        r0, r1, fr = sample_axis(oi, gh)
        for oj in range(gw * factor):
            c0, c1, fc = sample_axis(oj, gw)
            out[oi, oj] = ((1 - fr) * (1 - fc) * data[r0, c0]
                           + (1 - fr) * fc * data[r0, c1]
                           + fr * (1 - fc) * data[r1, c0]
                           + fr * fc * data[r1, c1])
    return out


def test_upsample_matches_scalar_reference():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(3, 4, 5)).astype(np.float32)
    for factor in (2, 4):
        up = upsample_features(FeatureMap(data, 8), factor)
        assert up.patch_size == 8 // factor
        assert up.data.shape == (3 * factor, 4 * factor, 5)
        np.testing.assert_allclose(up.data,
                                   reference_upsample(data.astype(float), factor),
                                   atol=1e-6)


def test_upsample_identity_and_validation():
    fmap = FeatureMap(np.random.default_rng(9).normal(size=(2, 2, 3)), 8)
    same = upsample_features(fmap, 1)
    np.testing.assert_array_equal(same.data, fmap.data)
    assert same.data is not fmap.data

    const = upsample_features(FeatureMap(np.full((3, 3, 2), 1.5), 8), 2)
    np.testing.assert_allclose(const.data, 1.5, atol=1e-7)

    with pytest.raises(InputError):
        upsample_features(FeatureMap(np.zeros((2, 2, 2)), 7), 2)
    with pytest.raises(InputError):
        upsample_features(fmap, 0)


# ---------------------------------------------------------------- block

def test_init_is_exact_identity():
    params = init_adaptation(32, heads=4, seed=0)
    x = np.random.default_rng(10).normal(size=(12, 32)).astype(np.float32)
    out, _ = block_forward(x, params)
    np.testing.assert_array_equal(out, x)

    fmap = FeatureMap(x.reshape(3, 4, 32), 8)
    np.testing.assert_array_equal(adaptation_forward(fmap, params).data, x.reshape(3, 4, 32))


def test_init_truncated_normal_bounds():
    params = init_adaptation(64, heads=8, seed=2)
    for name in ("wq", "wk", "wv", "w1"):
        arr = getattr(params, name)
        assert np.abs(arr).max() <= 0.04 + 1e-7   # 2 sigma * 0.02
        assert np.abs(arr).max() > 0
    assert not params.wo.any() and not params.w2.any()
    np.testing.assert_array_equal(params.ln1_gamma, np.ones(64))
    with pytest.raises(InputError):
        init_adaptation(64, heads=7)


def test_block_permutation_equivariance():
    params = dense_params()
    x = np.random.default_rng(11).normal(size=(9, 16))
    perm = np.random.default_rng(12).permutation(9)
    out, _ = block_forward(x, params)
    out_p, _ = block_forward(x[perm], params)
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_block_rejects_wrong_width():
    params = init_adaptation(16, heads=2)
    with pytest.raises(InputError):
        block_forward(np.zeros((4, 8)), params)


def test_block_gradients_match_finite_differences():
    """Every parameter entry, float64, central differences."""
    params = dense_params()
    rng = np.random.default_rng(13)
    x = rng.normal(size=(6, 16))
    W_obj = rng.normal(size=(6, 16))    # fixed random linear objective

    def objective(p):
        z, _ = block_forward(x, p)
        return float(np.sum(z * W_obj))

    z, cache = block_forward(x, params, want_cache=True)
    grads = block_backward(W_obj.copy(), cache, params)

    # Central differences carry ~1e-10 absolute roundoff at this h and
    # objective scale; the 1e-5 denominator floor keeps entries whose true
    # gradient sits below that noise from dominating the relative error.
    h = 1e-5
    worst = 0.0
    for name, arr in params.tensors():
        g = grads[name]
        assert g.shape == arr.shape
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            plus = objective(params)
            arr[idx] = orig - h
            minus = objective(params)
            arr[idx] = orig
            num = (plus - minus) / (2 * h)
            denom = max(abs(num), abs(g[idx]), 1e-5)
            worst = max(worst, abs(num - g[idx]) / denom)
    assert worst < 1e-4


def test_params_validation_and_copy():
    params = init_adaptation(16, heads=2)
    dup = params.copy()
    dup.wq[0, 0] += 1.0
    assert params.wq[0, 0] != dup.wq[0, 0]

    kw = {n: getattr(params, n) for n in AdaptationParams.TENSOR_NAMES}
    kw["bq"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(InputError):
        AdaptationParams(heads=2, **kw)
    with pytest.raises(InputError):
        AdaptationParams(heads=3, **{n: getattr(params, n)
                                     for n in AdaptationParams.TENSOR_NAMES})


def test_checkpoint_round_trip(tmp_path):
    params = dense_params(embed_dim=8, heads=2).astype(np.float32)
    path = tmp_path / "ckpt.epiw"
    save_adaptation(path, params)
    back = load_adaptation(path)
    assert back.heads == 2
    for (name, a), (_, b) in zip(params.tensors(), back.tensors()):
        np.testing.assert_array_equal(a, b, err_msg=name)

    write_weights(tmp_path / "broken.epiw",
                  {"num_heads": np.array([2.0], dtype=np.float32)})
    with pytest.raises(FormatError, match="missing"):
        load_adaptation(tmp_path / "broken.epiw")
