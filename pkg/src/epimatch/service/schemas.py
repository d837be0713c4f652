"""Request/response models for the service endpoints (and, one-to-one,
for CLI invocations dispatched locally)."""

from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, Field


class EmbedModel(BaseModel):
    patch_size: int = 8
    embed_dim: int = 64
    backbone_seed: int = 17
    heads: int = 8
    mlp_ratio: int = 4
    init_seed: int = 0


class SynthModel(BaseModel):
    max_rotation_deg: float = 5.0
    t_min: float = 0.01
    t_max: float = 0.1
    brightness: float = 0.1
    saturation: float = 0.3
    scale_min: float = 0.5
    scale_max: float = 2.0


class TrainModel(BaseModel):
    margin: float = 1.0
    triplets_per_pair: int = 128
    batch_size: int = 1
    epochs: int = 100
    bootstrap_epochs: int = 3
    bootstrap_lr: float = 1e-4
    main_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    exclusion_radius: int = 1


class RansacModel(BaseModel):
    threshold: float = 1.0
    confidence: float = 0.999
    max_iterations: int = 10000
    seed: int = 0


class MatchOptions(BaseModel):
    """Pipeline switches shared by every command that matches pairs."""
    checkpoint: Optional[str] = None
    baseline: bool = False       # ignore the checkpoint, use raw features
    no_refine: bool = False
    upsample: int = 1
    threshold: float = 0.95
    subpixel: bool = False


class ErrorBody(BaseModel):
    category: Literal["input", "runtime"]
    message: str


# ------------------------------------------------------------ synth

class SynthRequest(BaseModel):
    out_dir: str
    input_dir: Optional[str] = None
    synthetic_scenes: int = 0
    height: int = 128
    width: int = 128
    views_per_scene: int = 1
    seed: int = 0
    embed: EmbedModel = Field(default_factory=EmbedModel)
    synth: SynthModel = Field(default_factory=SynthModel)


class SynthResponse(BaseModel):
    manifest_path: str
    scene_dirs: List[str]
    n_views: int


# ------------------------------------------------------------ train

class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    epochs: Optional[int] = None        # cap below train.epochs if set
    pose_mode: Literal["random", "fixed"] = "random"
    fixed_pose_count: int = 8
    train: TrainModel = Field(default_factory=TrainModel)
    embed: EmbedModel = Field(default_factory=EmbedModel)
    synth: SynthModel = Field(default_factory=SynthModel)


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    mean_loss: float
    n_triplets: int


class TrainResponse(BaseModel):
    checkpoint_path: str
    loss_csv_path: str
    manifest_path: str
    epochs_run: int
    history: List[EpochRecord]


# ------------------------------------------------------------ match

class MatchRequest(BaseModel):
    source: str                       # .feat or .png
    target: str
    out_dir: str
    source_image: Optional[str] = None
    target_image: Optional[str] = None
    seed: int = 0
    options: MatchOptions = Field(default_factory=MatchOptions)
    embed: EmbedModel = Field(default_factory=EmbedModel)


class MatchResponse(BaseModel):
    csv_path: str
    json_path: str
    manifest_path: str
    n_matches: int
    elapsed_ms: float


# ------------------------------------------------------------ eval

class EvalRequest(BaseModel):
    out_dir: str
    # mode 1: one explicit triple
    matches: Optional[str] = None
    pose: Optional[str] = None
    intrinsics: Optional[str] = None
    # mode 2: directory of per-pair subdirs (matches.csv, pose.json, intrinsics.json)
    pairs_dir: Optional[str] = None
    # mode 3: frame sequence paired at a fixed stride, matched in-run
    sequence_dir: Optional[str] = None
    stride: int = 16
    seed: int = 0
    options: MatchOptions = Field(default_factory=MatchOptions)
    embed: EmbedModel = Field(default_factory=EmbedModel)
    ransac: RansacModel = Field(default_factory=RansacModel)
    tp_threshold: float = 1.0
    one_sided: bool = False


class EvalResponse(BaseModel):
    manifest_path: str
    aggregate_csv_path: str
    report_paths: List[str]
    n_pairs: int
    aggregate: dict


# ------------------------------------------------------------ ablate

class AblateRequest(BaseModel):
    data_dir: str
    out_dir: str
    seed: int = 0
    epochs: int = 12
    test_scenes: int = 2
    eval_views: int = 2
    fixed_pose_count: int = 8
    benchmark_threshold: float = 0.5
    train: TrainModel = Field(default_factory=TrainModel)
    embed: EmbedModel = Field(default_factory=EmbedModel)
    synth: SynthModel = Field(default_factory=SynthModel)
    eval_synth: Optional[SynthModel] = None
    ransac: RansacModel = Field(default_factory=RansacModel)


class AblateRow(BaseModel):
    config: str
    epipolar_error_px: Optional[float] = None
    precision_pct: Optional[float] = None
    n_matches: int = 0


class AblateResponse(BaseModel):
    table_csv_path: str
    manifest_path: str
    rows: List[AblateRow]
    checkpoint_random: str
    checkpoint_fixed: str


# ------------------------------------------------------------ robustness

class RobustnessRequest(BaseModel):
    data_dir: str
    out_dir: str
    seed: int = 0
    views_per_scene: int = 1
    options: MatchOptions = Field(default_factory=MatchOptions)
    embed: EmbedModel = Field(default_factory=EmbedModel)
    synth: SynthModel = Field(default_factory=SynthModel)
    ransac: RansacModel = Field(default_factory=RansacModel)


class RobustnessResponse(BaseModel):
    csv_path: str
    manifest_path: str
    cross_matches: int
    cross_inliers: int
    same_matches: int
    same_inliers: int


class HealthResponse(BaseModel):
    status: str
    version: str
