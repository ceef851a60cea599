"""HTTP service wrapping the pipeline stages.

Each endpoint validates a pydantic request, builds a PipelineConfig and runs
the corresponding stage synchronously, returning the run report. Bad
configuration maps to 400; per-subject failures keep the 200 status and are
listed in the report's ``failures`` field.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, pipeline
from .pipeline import ConfigError, PipelineConfig


class PathsModel(BaseModel):
    atlas_dir: str | None = None
    subject_dir: str | None = None
    output_dir: str | None = None
    prediction_dir: str | None = None
    reference_dir: str | None = None
    model_path: str | None = None


class LrSimModel(BaseModel):
    target_slice_thickness: float = 10.0
    max_shift: float = 5.0
    apical_truncation_slices: int = 1


class AugmentModel(BaseModel):
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_max: float = 15.0
    translation_max: float = 5.0
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)


class LossWeightsModel(BaseModel):
    alpha: float = 0.8
    beta: float = 5e-5
    epsilon: float = 1e-8


class PyramidLevelModel(BaseModel):
    control_spacing: float | tuple[float, float, float] = 20.0
    max_iterations: int = 30
    step_size: float = 2.0


class RegistrationModel(BaseModel):
    pyramid_levels: list[PyramidLevelModel] = Field(
        default_factory=lambda: [
            PyramidLevelModel(control_spacing=40.0, max_iterations=40, step_size=4.0),
            PyramidLevelModel(control_spacing=20.0, max_iterations=40, step_size=2.0),
        ]
    )
    convergence_tol: float = 1e-5
    gradient_mode: str = "analytic"


class FusionModel(BaseModel):
    h: float = 10.0
    patch_dims: tuple[int, int, int] = (7, 7, 1)
    search_dims: tuple[int, int, int] = (7, 7, 3)
    atlas_count: int = 5


class TrainingModel(BaseModel):
    epochs: int = 30
    lr: float = 0.05
    optimizer: str = "adam"
    stack_depth: int = 3
    kernel_size: int = 5


class PipelineConfigModel(BaseModel):
    paths: PathsModel = Field(default_factory=PathsModel)
    lr_sim: LrSimModel = Field(default_factory=LrSimModel)
    augment: AugmentModel = Field(default_factory=AugmentModel)
    loss_weights: LossWeightsModel = Field(default_factory=LossWeightsModel)
    registration: RegistrationModel = Field(default_factory=RegistrationModel)
    fusion: FusionModel = Field(default_factory=FusionModel)
    training: TrainingModel = Field(default_factory=TrainingModel)
    seed: int
    worker_count: int = 1

    def to_config(self) -> PipelineConfig:
        doc = self.model_dump()
        doc["registration"]["pyramid_levels"] = [
            dict(lv) for lv in doc["registration"]["pyramid_levels"]
        ]
        try:
            return PipelineConfig.from_dict(doc)
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc


class StageRequest(BaseModel):
    config: PipelineConfigModel


class PhantomRequest(BaseModel):
    count: int = 1
    seed: int
    out_dir: str
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.25, 1.25, 2.0)


class RunReportModel(BaseModel):
    command: str
    subjects: list[dict]
    failures: list[str]
    elapsed_s: float
    model_config = {"extra": "allow"}


app = FastAPI(title="cardrefine", version=__version__)


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


def _run(stage_fn, cfg: PipelineConfig) -> dict:
    try:
        return stage_fn(cfg)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


@app.post("/phantom", response_model=RunReportModel)
def phantom(req: PhantomRequest):
    try:
        return pipeline.run_phantom(req.count, req.seed, req.out_dir, req.dims, req.spacing)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


@app.post("/simulate", response_model=RunReportModel)
def simulate(req: StageRequest):
    return _run(pipeline.run_simulate, req.config.to_config())


@app.post("/train", response_model=RunReportModel)
def train(req: StageRequest):
    return _run(pipeline.run_train, req.config.to_config())


@app.post("/refine", response_model=RunReportModel)
def refine(req: StageRequest):
    return _run(pipeline.run_refine, req.config.to_config())


@app.post("/evaluate", response_model=RunReportModel)
def evaluate(req: StageRequest):
    return _run(pipeline.run_evaluate, req.config.to_config())


@app.post("/fuse", response_model=RunReportModel)
def fuse(req: StageRequest):
    return _run(pipeline.run_fuse, req.config.to_config())


@app.post("/register", response_model=RunReportModel)
def register(req: StageRequest):
    return _run(pipeline.run_register, req.config.to_config())


@app.post("/select-atlases", response_model=RunReportModel)
def select_atlases_endpoint(req: StageRequest):
    return _run(pipeline.run_select_atlases, req.config.to_config())
