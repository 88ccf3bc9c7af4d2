from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from tomoclass.core import config
from tomoclass.services.cube_io import PolChannel
from tomoclass.services.evaluation import Objective
from tomoclass.services.features import Scale
from tomoclass.services.geosplit import SplitMethod

INPUT_FIELDS = ("nw", "se", "cube", "labels", "lidar", "mask", "features", "model", "pred")


class RunConfig(BaseModel):
    """One run's settings: config file keys, overridden by CLI flags."""
    model_config = ConfigDict(extra="forbid")

    out_dir: str = config.OUTPUT_DIR
    threads: Optional[int] = Field(None, ge=1)

    # inputs
    nw: Optional[str] = None
    se: Optional[str] = None
    cube: Optional[str] = None
    labels: Optional[str] = None
    lidar: Optional[str] = None
    mask: Optional[str] = None
    features: Optional[str] = None
    model: Optional[str] = None
    pred: Optional[str] = None

    # synthetic scene
    synth_seed: Optional[int] = None
    n_range: Optional[int] = Field(None, ge=4)
    n_azimuth: Optional[int] = Field(None, ge=4)
    patch_size: Optional[float] = Field(None, gt=0)
    noise: Optional[float] = Field(None, ge=0)
    unlabeled_frac: Optional[float] = Field(None, ge=0, lt=1)

    # split
    split_method: SplitMethod = SplitMethod.SWATH
    test_frac: float = 0.20
    square_frac: float = 0.05
    split_seed: int = 0
    buffer_px: int = Field(0, ge=0)
    horizontal: bool = False
    tolerance: float = Field(0.02, gt=0)

    # features
    channels: list[PolChannel] = [PolChannel.HH, PolChannel.HV, PolChannel.VV]
    include_xy: bool = False
    scale: Scale = Scale.LINEAR

    # learner
    learner: Literal["tree", "forest", "gbm", "auto"] = "gbm"
    seed: int = 0
    class_weight: Literal["none", "balanced"] = "none"
    max_depth: Optional[int] = Field(None, ge=1)
    min_samples_leaf: Optional[int] = Field(None, ge=1)
    n_trees: Optional[int] = Field(None, ge=1)
    n_rounds: Optional[int] = Field(None, ge=1)
    learning_rate: Optional[float] = Field(None, gt=0, le=1)
    subsample: Optional[float] = Field(None, gt=0, le=1)
    tune_budget: int = Field(0, ge=0)
    objective: Objective = Objective.ACCURACY

    # heights
    height_source: str = "first"
    threshold_db: float = Field(-3.0, le=0)

    # extras
    export_probs: bool = False
    export_features: bool = False
    channel_combos: bool = False

    @field_validator("test_frac", "square_frac")
    @classmethod
    def _open_unit(cls, v, info):
        if not (0.0 < v < 1.0):
            raise ValueError(f"{info.field_name.replace('_', '-')} must be in (0,1)")
        return v

    @field_validator("tune_budget")
    @classmethod
    def _budget(cls, v):
        if v == 1:
            raise ValueError("tune-budget must be 0 (no tuning) or >= 2")
        return v

    @field_validator("height_source")
    @classmethod
    def _source(cls, v):
        if v not in ("first", "mean") and v not in [c.value for c in PolChannel]:
            raise ValueError("height-source must be first, mean, HH, HV or VV")
        return v

    @model_validator(mode="after")
    def _inputs_exist(self):
        for name in INPUT_FIELDS:
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ValueError(f"input {name} not found: {p}")
        return self

    def inputs(self) -> dict[str, str]:
        return {n: getattr(self, n) for n in INPUT_FIELDS if getattr(self, n) is not None}


class RunManifest(BaseModel):
    command: str
    argv: list[str]
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    seeds: dict[str, int] = {}
    versions: dict[str, str] = {}
    started_at: str
    wall_time_s: float
    threads: int
    config: dict[str, Any] = {}
