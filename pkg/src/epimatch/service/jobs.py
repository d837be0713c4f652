"""Job implementations behind the service endpoints and CLI subcommands.

Each function takes a validated request model, runs the corresponding
pipeline on local paths, writes outputs plus a manifest, and returns a
response model. All randomness is derived from the request seeds.
"""

from __future__ import annotations

import glob
import os
import re

import numpy as np

from .. import data, formats
from ..data import (EmbedConfig, FixedSampleSource, PoseCycle,
                    SceneSampleSource, SynthParams, fixed_pose_list)
from ..embedding import (init_adaptation, load_adaptation, read_features,
                         save_adaptation)
from ..errors import InputError
from ..evaluation import (RansacConfig, RobustnessResult, aggregate_csv,
                          epipolar_error, evaluate_pair, precision,
                          robustness_protocol)
from ..geometry import fundamental_from_pose
from ..manifest import RunManifest, file_elapsed_ms
from ..matching import (CorrespondenceSet, Match, MatchConfig, match_pair)
from ..synthesis import make_synthetic_scene, make_training_pair
from ..training import TrainConfig, train
from . import schemas


def _child_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(tuple(int(p) for p in parts)))


def _child_int(*parts) -> int:
    return int(np.random.SeedSequence(
        tuple(int(p) for p in parts)).generate_state(1)[0])


def _match_config(opt: schemas.MatchOptions, threshold=None) -> MatchConfig:
    return MatchConfig(
        threshold=opt.threshold if threshold is None else threshold,
        refine=not opt.no_refine, subpixel=opt.subpixel,
        upsample=opt.upsample)


def _params_from_options(opt: schemas.MatchOptions, embed_dim: int):
    """Adaptation parameters per the shared flags; None = baseline."""
    if opt.baseline or not opt.checkpoint:
        return None
    params = load_adaptation(opt.checkpoint)
    if params.embed_dim != embed_dim:
        raise InputError(
            f"{opt.checkpoint}: checkpoint E={params.embed_dim} does not "
            f"match features E={embed_dim}")
    return params


# ------------------------------------------------------------ synth

def run_synth(req: schemas.SynthRequest) -> schemas.SynthResponse:
    mf = RunManifest.start("synth", req.model_dump(), seed=req.seed,
                           inputs=[req.input_dir] if req.input_dir else [])
    params = SynthParams(**req.synth.model_dump())
    patch = req.embed.patch_size

    scenes = []
    if req.synthetic_scenes > 0:
        for i in range(req.synthetic_scenes):
            img, depth, K = make_synthetic_scene(
                _child_int(req.seed, i), req.height, req.width, patch)
            scenes.append((f"scene_{i:03d}",
                           data.Scene(image=img, depth=depth, intrinsics=K)))
    elif req.input_dir:
        dirs = data.discover_scene_dirs(req.input_dir)
        if not dirs:
            raise InputError(f"{req.input_dir}: no scene dirs "
                             f"(expected {data.SCENE_IMAGE} inside)")
        for d in dirs:
            scenes.append((os.path.basename(os.path.normpath(d)),
                           data.load_scene(d)))
    else:
        raise InputError("give an input dir or a synthetic scene count")

    os.makedirs(req.out_dir, exist_ok=True)
    scene_dirs = []
    n_views = 0
    for idx, (name, scene) in enumerate(scenes):
        H, W = scene.image.shape[:2]
        if H % patch or W % patch:
            raise InputError(f"{name}: image {H}x{W} not divisible by "
                             f"patch size {patch}")
        sdir = os.path.join(req.out_dir, name)
        data.write_scene(sdir, scene.image, scene.depth, scene.intrinsics)
        scene_dirs.append(mf.add_output(sdir))
        sampler = params.sampler(seed=0)
        photo = params.photometric(seed=0)
        for v in range(req.views_per_scene):
            rng = _child_rng(req.seed, idx, v, 101)
            pair = make_training_pair(scene.image, scene.depth,
                                      scene.intrinsics, sampler, photo,
                                      params.scale_range, rng)
            vdir = os.path.join(sdir, f"view_{v:02d}")
            os.makedirs(vdir, exist_ok=True)
            data.write_png(os.path.join(vdir, "warped.png"), pair.warped)
            formats.write_dpt(os.path.join(vdir, "depth.dpt"),
                              pair.depth_used.to_array())
            formats.atomic_write_text(
                os.path.join(vdir, "flow.csv"),
                data.flow_csv_from_warp(pair.warp.gt_flow, pair.warp.valid))
            data.write_pose(os.path.join(vdir, "pose.json"), pair.pose)
            n_views += 1
    manifest_path = mf.finish(req.out_dir)
    return schemas.SynthResponse(manifest_path=manifest_path,
                                 scene_dirs=scene_dirs, n_views=n_views)


# ------------------------------------------------------------ train

def _open_dataset(req: schemas.TrainRequest, cfg: TrainConfig,
                  embed: EmbedConfig, params: SynthParams):
    """Returns (sample_source, embed_dim) for either data layout."""
    if not os.path.isdir(req.data_dir):
        raise InputError(f"{req.data_dir}: not a directory")
    pair_dirs = data.discover_pair_dirs(req.data_dir)
    if pair_dirs:
        samples = [data.load_pair_dir(d) for d in pair_dirs]
        dims = {s.feat_s.embed_dim for s in samples}
        if len(dims) != 1:
            raise InputError(f"{req.data_dir}: mixed embedding dims {sorted(dims)}")
        return FixedSampleSource(samples), dims.pop()

    scene_dirs = data.discover_scene_dirs(req.data_dir)
    if not scene_dirs:
        raise InputError(f"{req.data_dir}: no scenes ({data.SCENE_IMAGE}) or "
                         "feature pairs (source.feat) found")
    scenes = [data.load_scene(d) for d in scene_dirs]
    pose_source = None
    if req.pose_mode == "fixed":
        pose_source = PoseCycle(fixed_pose_list(
            params, req.fixed_pose_count, seed=_child_int(cfg.seed, 424242)))
    return (SceneSampleSource(scenes, embed, params, cfg.seed,
                              pose_source=pose_source), embed.embed_dim)


def run_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    mf = RunManifest.start("train", req.model_dump(),
                           seed=req.train.seed, inputs=[req.data_dir])
    cfg = TrainConfig(**req.train.model_dump())
    embed = EmbedConfig(**req.embed.model_dump())
    params = SynthParams(**req.synth.model_dump())
    source, embed_dim = _open_dataset(req, cfg, embed, params)

    theta0 = init_adaptation(embed_dim, heads=embed.heads,
                             mlp_ratio=embed.mlp_ratio, seed=embed.init_seed)
    state = train(source, theta0, cfg, epochs=req.epochs)

    os.makedirs(req.out_dir, exist_ok=True)
    ckpt = mf.add_output(os.path.join(req.out_dir, "checkpoint.epiw"))
    save_adaptation(ckpt, state.params)
    loss_csv = mf.add_output(os.path.join(req.out_dir, "loss.csv"))
    from ..training import loss_log_csv
    formats.atomic_write_text(loss_csv, loss_log_csv(state.history))
    manifest_path = mf.finish(req.out_dir)
    history = [schemas.EpochRecord(epoch=r.epoch, lr=r.lr,
                                   mean_loss=r.mean_loss,
                                   n_triplets=r.n_triplets)
               for r in state.history]
    return schemas.TrainResponse(checkpoint_path=ckpt, loss_csv_path=loss_csv,
                                 manifest_path=manifest_path,
                                 epochs_run=state.epoch, history=history)


# ------------------------------------------------------------ match

def _load_side(path: str, embed: EmbedConfig, image_override):
    """Features plus (optionally) the image for refinement."""
    img = None
    if path.endswith(".feat"):
        feats = read_features(path)
    elif path.endswith(".png"):
        img = data.read_png(path)
        feats = embed.extract(img)
    else:
        raise InputError(f"{path}: expected a .feat or .png input")
    if image_override:
        img = data.read_png(image_override)
    return feats, img


def run_match(req: schemas.MatchRequest) -> schemas.MatchResponse:
    mf = RunManifest.start("match", req.model_dump(), seed=req.seed,
                           inputs=[req.source, req.target])
    embed = EmbedConfig(**req.embed.model_dump())
    feat_s, img_s = _load_side(req.source, embed, req.source_image)
    feat_t, img_t = _load_side(req.target, embed, req.target_image)
    if feat_s.embed_dim != feat_t.embed_dim:
        raise InputError(f"embedding dims differ: {feat_s.embed_dim} vs "
                         f"{feat_t.embed_dim}")
    cfg = _match_config(req.options)
    if cfg.refine and (img_s is None or img_t is None):
        raise InputError("refinement needs images; pass PNG inputs or "
                         "--source-image/--target-image, or use --no-refine")
    params = _params_from_options(req.options, feat_s.embed_dim)
    result = match_pair(feat_s, feat_t, params, img_s, img_t, cfg)

    os.makedirs(req.out_dir, exist_ok=True)
    csv_path = mf.add_output(os.path.join(req.out_dir, "matches.csv"))
    formats.atomic_write_text(csv_path, formats.matches_csv(
        [m.us for m in result.matches], [m.vs for m in result.matches],
        [m.ut for m in result.matches], [m.vt for m in result.matches],
        [m.score for m in result.matches]))
    json_path = mf.add_output(os.path.join(req.out_dir, "matches.json"))
    doc = result.to_json()
    doc["elapsed_ms"] = file_elapsed_ms(result.elapsed_ms)
    data.write_json(json_path, doc)
    manifest_path = mf.finish(req.out_dir)
    return schemas.MatchResponse(csv_path=csv_path, json_path=json_path,
                                 manifest_path=manifest_path,
                                 n_matches=len(result),
                                 elapsed_ms=result.elapsed_ms)


# ------------------------------------------------------------ eval

def _corrs_from_csv(path: str) -> CorrespondenceSet:
    if not os.path.exists(path):
        raise InputError(f"{path}: missing match file")
    with open(path, "r", encoding="utf-8") as fh:
        ps, pt, score = formats.parse_matches_csv(fh.read(), path)
    matches = [Match(us=float(ps[i, 0]), vs=float(ps[i, 1]),
                     ut=float(pt[i, 0]), vt=float(pt[i, 1]),
                     score=float(score[i]), source_patch=i, target_patch=i)
               for i in range(len(ps))]
    return CorrespondenceSet(matches=matches)


_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


def _sequence_pairs(req: schemas.EvalRequest, embed: EmbedConfig):
    """Frame k paired with frame k+stride; features computed in-run."""
    seq = req.sequence_dir
    frames = {}
    for p in sorted(glob.glob(os.path.join(seq, "frame_*.png"))):
        m = _FRAME_RE.search(p)
        if m:
            frames[int(m.group(1))] = p
    if not frames:
        raise InputError(f"{seq}: no frame_*.png files")
    K = data.load_intrinsics(os.path.join(seq, data.SCENE_INTRINSICS))
    if req.stride < 1:
        raise InputError("stride must be >= 1")
    cfg = _match_config(req.options)
    params = _params_from_options(req.options, embed.embed_dim)
    cache = {}

    def side(k):
        if k not in cache:
            img = data.read_png(frames[k])
            cache[k] = (embed.extract(img), img,
                        data.load_pose(os.path.join(seq, f"pose_{k:04d}.json")))
        return cache[k]

    out = []
    for k in sorted(frames):
        if k + req.stride not in frames:
            continue
        feat_s, img_s, pose_s = side(k)
        feat_t, img_t, pose_t = side(k + req.stride)
        corrs = match_pair(feat_s, feat_t, params, img_s, img_t, cfg)
        rel = pose_t.compose(pose_s.inverse())
        out.append((f"{k:04d}_{k + req.stride:04d}", corrs, K, rel,
                    corrs.elapsed_ms))
    return out


def run_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    mf = RunManifest.start("eval", req.model_dump(), seed=req.seed)
    embed = EmbedConfig(**req.embed.model_dump())
    pairs = []
    if req.matches:
        if not (req.pose and req.intrinsics):
            raise InputError("evaluating a match file needs --pose and "
                             "--intrinsics")
        mf.inputs += [req.matches, req.pose, req.intrinsics]
        pairs.append((os.path.splitext(os.path.basename(req.matches))[0],
                      _corrs_from_csv(req.matches),
                      data.load_intrinsics(req.intrinsics),
                      data.load_pose(req.pose), None))
    elif req.pairs_dir:
        mf.inputs.append(req.pairs_dir)
        if not os.path.isdir(req.pairs_dir):
            raise InputError(f"{req.pairs_dir}: not a directory")
        for name in sorted(os.listdir(req.pairs_dir)):
            d = os.path.join(req.pairs_dir, name)
            if not os.path.isdir(d) or \
                    not os.path.exists(os.path.join(d, "matches.csv")):
                continue
            pairs.append((name,
                          _corrs_from_csv(os.path.join(d, "matches.csv")),
                          data.load_intrinsics(os.path.join(d, "intrinsics.json")),
                          data.load_pose(os.path.join(d, "pose.json")), None))
    elif req.sequence_dir:
        mf.inputs.append(req.sequence_dir)
        pairs = _sequence_pairs(req, embed)
    else:
        raise InputError("give --matches, --pairs-dir or --sequence-dir")
    if not pairs:
        raise InputError("no evaluable pairs found")

    ransac = RansacConfig(**req.ransac.model_dump())
    os.makedirs(req.out_dir, exist_ok=True)
    reports = []
    report_paths = []
    for pair_id, corrs, K, pose, elapsed in pairs:
        rep = evaluate_pair(corrs, K, pose, timing_ms=elapsed, ransac=ransac,
                            tp_threshold=req.tp_threshold,
                            one_sided=req.one_sided)
        reports.append(rep)
        doc = rep.to_json()
        doc["pair_id"] = pair_id
        doc["elapsed_ms"] = file_elapsed_ms(doc["elapsed_ms"])
        path = mf.add_output(os.path.join(req.out_dir,
                                          f"report_{pair_id}.json"))
        data.write_json(path, doc)
        report_paths.append(path)

    agg_path = mf.add_output(os.path.join(req.out_dir, "aggregate.csv"))
    formats.atomic_write_text(agg_path, aggregate_csv(reports))
    aggregate = {}
    for key in ("epipolar_error_px", "precision_pct", "fundamental_error",
                "inlier_pct"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    manifest_path = mf.finish(req.out_dir)
    return schemas.EvalResponse(manifest_path=manifest_path,
                                aggregate_csv_path=agg_path,
                                report_paths=report_paths,
                                n_pairs=len(pairs), aggregate=aggregate)


# ------------------------------------------------------------ ablate

def _benchmark_eval_pairs(test_scenes, embed: EmbedConfig, params: SynthParams,
                          seed: int, views: int):
    """Warped evaluation pairs with known ground-truth geometry."""
    out = []
    for t, scene in enumerate(test_scenes):
        feat_s = embed.extract(scene.image)
        sampler = params.sampler(seed=0)
        photo = params.photometric(seed=0)
        for v in range(views):
            rng = _child_rng(seed, 7001, t, v)
            pair = make_training_pair(scene.image, scene.depth,
                                      scene.intrinsics, sampler, photo,
                                      params.scale_range, rng)
            feat_w = embed.extract(pair.warped)
            out.append((feat_s, feat_w, scene.image, pair.warped,
                        scene.intrinsics, pair.pose))
    return out


def _row_metrics(name, theta, refine, upsample, eval_pairs, threshold,
                 tp_threshold=1.0, subpixel=False):
    """Match every eval pair under one configuration and pool the
    match-weighted metrics."""
    cfg = MatchConfig(threshold=threshold, refine=refine, upsample=upsample,
                      subpixel=subpixel)
    tot_m = 0
    err_sum = 0.0
    err_n = 0
    tp = 0
    tp_n = 0
    for feat_s, feat_w, img_s, img_w, K, pose in eval_pairs:
        corrs = match_pair(feat_s, feat_w, theta, img_s, img_w, cfg)
        tot_m += len(corrs)
        if len(corrs) == 0:
            continue
        F_gt = fundamental_from_pose(K, pose)
        try:
            e, _ = epipolar_error(corrs, F_gt)
            err_sum += e * len(corrs)
            err_n += len(corrs)
            p, _ = precision(corrs, F_gt, tp_threshold)
            tp += int(round(p / 100.0 * len(corrs)))
            tp_n += len(corrs)
        except Exception:
            continue
    return schemas.AblateRow(
        config=name,
        epipolar_error_px=err_sum / err_n if err_n else None,
        precision_pct=100.0 * tp / tp_n if tp_n else None,
        n_matches=tot_m)


def run_ablate(req: schemas.AblateRequest) -> schemas.AblateResponse:
    mf = RunManifest.start("ablate", req.model_dump(), seed=req.seed,
                           inputs=[req.data_dir])
    scene_dirs = data.discover_scene_dirs(req.data_dir)
    if len(scene_dirs) < req.test_scenes + 1:
        raise InputError(f"{req.data_dir}: need more than {req.test_scenes} "
                         "scenes to hold some out")
    scenes = [data.load_scene(d) for d in scene_dirs]
    train_scenes = scenes[:-req.test_scenes]
    test_scenes = scenes[-req.test_scenes:]

    embed = EmbedConfig(**req.embed.model_dump())
    params = SynthParams(**req.synth.model_dump())
    eval_params = SynthParams(**(req.eval_synth or req.synth).model_dump())
    cfg = TrainConfig(**req.train.model_dump())

    theta0 = init_adaptation(embed.embed_dim, heads=embed.heads,
                             mlp_ratio=embed.mlp_ratio, seed=embed.init_seed)
    src_rand = SceneSampleSource(train_scenes, embed, params, cfg.seed)
    theta_rand = train(src_rand, theta0, cfg, epochs=req.epochs).params
    cycle = PoseCycle(fixed_pose_list(params, req.fixed_pose_count,
                                     seed=_child_int(cfg.seed, 424242)))
    src_fixed = SceneSampleSource(train_scenes, embed, params, cfg.seed,
                                  pose_source=cycle)
    theta_fixed = train(src_fixed, theta0, cfg, epochs=req.epochs).params

    eval_pairs = _benchmark_eval_pairs(test_scenes, embed, eval_params,
                                       req.seed, req.eval_views)
    thr = req.benchmark_threshold
    rows = [
        _row_metrics("baseline", None, False, 1, eval_pairs, thr),
        _row_metrics("adaptation", theta_rand, False, 1, eval_pairs, thr),
        _row_metrics("refinement", theta_rand, True, 1, eval_pairs, thr,
                     subpixel=True),
        _row_metrics("upsample", theta_rand, True, 2, eval_pairs, thr,
                     subpixel=True),
    ]
    pose_random = rows[2].model_copy(update={"config": "pose_random"})
    rows.append(pose_random)
    rows.append(_row_metrics("pose_fixed", theta_fixed, True, 1,
                             eval_pairs, thr, subpixel=True))

    os.makedirs(req.out_dir, exist_ok=True)
    ck_rand = mf.add_output(os.path.join(req.out_dir, "checkpoint_random.epiw"))
    save_adaptation(ck_rand, theta_rand)
    ck_fixed = mf.add_output(os.path.join(req.out_dir, "checkpoint_fixed.epiw"))
    save_adaptation(ck_fixed, theta_fixed)
    lines = ["config,epipolar_error_px,precision_pct,n_matches"]
    for r in rows:
        e = "nan" if r.epipolar_error_px is None else f"{r.epipolar_error_px:.6f}"
        p = "nan" if r.precision_pct is None else f"{r.precision_pct:.6f}"
        lines.append(f"{r.config},{e},{p},{r.n_matches}")
    table = mf.add_output(os.path.join(req.out_dir, "table.csv"))
    formats.atomic_write_text(table, "\n".join(lines) + "\n")
    manifest_path = mf.finish(req.out_dir)
    return schemas.AblateResponse(table_csv_path=table,
                                  manifest_path=manifest_path, rows=rows,
                                  checkpoint_random=ck_rand,
                                  checkpoint_fixed=ck_fixed)


# ------------------------------------------------------------ robustness

def run_robustness(req: schemas.RobustnessRequest) -> schemas.RobustnessResponse:
    mf = RunManifest.start("robustness", req.model_dump(), seed=req.seed,
                           inputs=[req.data_dir])
    scene_dirs = data.discover_scene_dirs(req.data_dir)
    if len(scene_dirs) < 2:
        raise InputError("the protocol requires at least 2 disjoint scenes")
    scenes = [data.load_scene(d) for d in scene_dirs]
    embed = EmbedConfig(**req.embed.model_dump())
    params = SynthParams(**req.synth.model_dump())
    feats = [embed.extract(s.image) for s in scenes]
    theta = _params_from_options(req.options, embed.embed_dim)
    mcfg = _match_config(req.options)
    ransac = RansacConfig(**req.ransac.model_dump())

    same = []
    for i, scene in enumerate(scenes):
        sampler = params.sampler(seed=0)
        photo = params.photometric(seed=0)
        for v in range(req.views_per_scene):
            rng = _child_rng(req.seed, 303, i, v)
            pair = make_training_pair(scene.image, scene.depth,
                                      scene.intrinsics, sampler, photo,
                                      params.scale_range, rng)
            same.append((feats[i], embed.extract(pair.warped),
                         scene.image, pair.warped))
    cross = []
    for i in range(len(scenes)):
        for j in range(i + 1, len(scenes)):
            cross.append((feats[i], feats[j], scenes[i].image, scenes[j].image))

    cross_res: RobustnessResult = robustness_protocol(cross, theta, mcfg, ransac)
    same_res: RobustnessResult = robustness_protocol(same, theta, mcfg, ransac)

    os.makedirs(req.out_dir, exist_ok=True)
    csv_path = mf.add_output(os.path.join(req.out_dir, "robustness.csv"))
    formats.atomic_write_text(csv_path, "\n".join([
        "pair_type,n_matches,n_inliers",
        f"cross_scene,{cross_res.total_matches},{cross_res.total_inliers}",
        f"same_scene_warp,{same_res.total_matches},{same_res.total_inliers}",
    ]) + "\n")
    manifest_path = mf.finish(req.out_dir)
    return schemas.RobustnessResponse(
        csv_path=csv_path, manifest_path=manifest_path,
        cross_matches=cross_res.total_matches,
        cross_inliers=cross_res.total_inliers,
        same_matches=same_res.total_matches,
        same_inliers=same_res.total_inliers)
