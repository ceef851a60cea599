"""Batch orchestration over directories of subjects.

Subjects live one directory each under a root; stages read standard file
names and write their outputs (plus a manifest and a run report) under the
configured output directory. Per-subject errors are isolated: the run
continues and the report lists the failures.
"""

from __future__ import annotations

import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as met
from . import multitask as mt
from .landmarks import centroid_landmarks
from .phantom import cohort_seeds, generate_phantom
from .preproc import LrSimParams, AugmentParams, normalize_intensity, shift_landmarks_for_lr, simulate_lr
from .regfuse import (
    FusionConfig,
    working_geometry,
    RegistrationConfig,
    refine,
    register_ffd,
    select_atlases,
    warp_labels,
    warp_volume,
)
from .ffd import write_ffd
from .volgrid import (
    Atlas,
    LabelGrid,
    VolumeGrid,
    argmax_labels,
    read_grid,
    read_landmarks,
    resample_labels,
    sample_nearest,
    sample_trilinear,
    voxel_centers,
    world_to_voxel,
    write_grid,
    write_landmarks,
)

WORKERS_ENV = "CARDREFINE_WORKERS"


class ConfigError(ValueError):
    """Invalid pipeline configuration (bad paths, malformed JSON, ...)."""


@dataclass
class PipelinePaths:
    atlas_dir: str | None = None
    subject_dir: str | None = None
    output_dir: str | None = None
    prediction_dir: str | None = None
    reference_dir: str | None = None
    model_path: str | None = None


@dataclass
class TrainingParams:
    epochs: int = 30
    lr: float = 0.05
    optimizer: str = "adam"
    stack_depth: int = 3
    kernel_size: int = 5


@dataclass
class PipelineConfig:
    paths: PipelinePaths = field(default_factory=PipelinePaths)
    lr_sim: LrSimParams = field(default_factory=LrSimParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    loss_weights: mt.LossWeights = field(default_factory=mt.LossWeights)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    training: TrainingParams = field(default_factory=TrainingParams)
    seed: int = 0
    worker_count: int = 1

    @staticmethod
    def from_dict(doc: dict) -> "PipelineConfig":
        try:
            cfg = PipelineConfig(
                paths=PipelinePaths(**doc.get("paths", {})),
                lr_sim=LrSimParams(**doc.get("lr_sim", {})),
                augment=AugmentParams(**doc.get("augment", {})),
                loss_weights=mt.LossWeights(**doc.get("loss_weights", {})),
                registration=RegistrationConfig(**doc.get("registration", {})),
                fusion=FusionConfig(**doc.get("fusion", {})),
                training=TrainingParams(**doc.get("training", {})),
                seed=int(doc["seed"]) if "seed" in doc else 0,
                worker_count=int(doc.get("worker_count", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if "seed" not in doc:
            raise ConfigError("configuration must set a seed")
        return cfg

    def echo(self) -> dict:
        doc = asdict(self)
        doc["augment"]["scale_range"] = list(self.augment.scale_range)
        doc["augment"]["intensity_scale_range"] = list(self.augment.intensity_scale_range)
        return doc


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {path}: {exc}") from exc
    return PipelineConfig.from_dict(doc)


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is not set")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} does not exist: {p}")
    return p


def _require_out(path: str | None) -> Path:
    if not path:
        raise ConfigError("output_dir is not set")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def worker_count(cfg: PipelineConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(int(env), 1)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return max(cfg.worker_count, 1)


# ---------------------------------------------------------------------------
# subject discovery and reports

@dataclass
class SubjectResult:
    id: str
    status: str  # "ok" | "error"
    outputs: list[str] = field(default_factory=list)
    error: str | None = None
    info: dict = field(default_factory=dict)


def discover_subjects(root: Path, required: tuple[str, ...]) -> list[Path]:
    subjects = []
    for entry in sorted(root.iterdir()):
        if entry.is_dir() and all((entry / name).exists() for name in required):
            subjects.append(entry)
    if not subjects:
        raise ConfigError(
            f"no subjects with {list(required)} found under {root}"
        )
    return subjects


def _limit_worker_threads():
    # workers share the machine; oversubscribed BLAS threads thrash
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = "1"


def _run_subjects(fn, jobs, workers: int) -> list[SubjectResult]:
    """Run fn(job) per subject with isolation; results sorted by subject id."""
    results: list[SubjectResult] = []
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            results.append(_isolated(fn, job))
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_limit_worker_threads
        ) as pool:
            results = list(pool.map(_IsolatedCall(fn), jobs))
    return sorted(results, key=lambda r: r.id)


class _IsolatedCall:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, job):
        return _isolated(self.fn, job)


def _isolated(fn, job) -> SubjectResult:
    subject_id = job.get("id", "?") if isinstance(job, dict) else "?"
    try:
        return fn(job)
    except Exception as exc:  # per-subject isolation is the contract
        return SubjectResult(
            id=subject_id,
            status="error",
            error=f"{type(exc).__name__}: {exc}",
            info={"traceback": traceback.format_exc(limit=5)},
        )


def _emit_report(command: str, cfg_echo: dict, results: list[SubjectResult],
                 out_dir: Path, elapsed: float, extra: dict | None = None) -> dict:
    failures = [r.id for r in results if r.status != "ok"]
    report = {
        "command": command,
        "config": cfg_echo,
        "subjects": [
            {"id": r.id, "status": r.status, "outputs": r.outputs,
             "error": r.error, **({"info": r.info} if r.info else {})}
            for r in results
        ],
        "failures": failures,
        "elapsed_s": elapsed,
    }
    if extra:
        report.update(extra)
    (out_dir / "run_report.json").write_text(json.dumps(report, indent=2) + "\n")
    manifest = {
        "command": command,
        "subjects": {r.id: r.outputs for r in results},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# stage: phantom generation

def run_phantom(
    count: int,
    seed: int,
    out_dir,
    dims=(64, 64, 64),
    spacing=(1.25, 1.25, 2.0),
) -> dict:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    out = _require_out(str(out_dir))
    t0 = time.perf_counter()
    results = []
    for i, subj_seed in enumerate(cohort_seeds(seed, count)):
        sid = f"subject_{i:03d}"
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        vol, lab, lm = generate_phantom(subj_seed, dims=dims, spacing=spacing)
        write_grid(vol, sdir / "volume.mgrid")
        write_grid(lab, sdir / "labels.mgrid")
        write_landmarks(lm, sdir / "landmarks.json")
        results.append(
            SubjectResult(sid, "ok", ["volume.mgrid", "labels.mgrid", "landmarks.json"])
        )
    return _emit_report(
        "phantom",
        {"count": count, "seed": seed, "dims": list(dims), "spacing": list(spacing)},
        results,
        out,
        time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# stage: LR simulation

def _simulate_one(job: dict) -> SubjectResult:
    sdir = Path(job["subject"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    vol = read_grid(sdir / "volume.mgrid")
    lab = read_grid(sdir / "labels.mgrid")
    lm = read_landmarks(sdir / "landmarks.json")
    params = LrSimParams(**job["lr_sim"], seed=job["seed"])
    lr_vol, lr_lab, shift_log = simulate_lr(vol, lab, params)
    lr_lm = shift_landmarks_for_lr(lm, lr_vol, shift_log)
    write_grid(lr_vol, out / "lr_volume.mgrid")
    write_grid(lr_lab, out / "lr_labels.mgrid")
    write_landmarks(lr_lm, out / "lr_landmarks.json")
    shift_log.write(out / "shift_log.json")
    return SubjectResult(
        job["id"], "ok",
        ["lr_volume.mgrid", "lr_labels.mgrid", "lr_landmarks.json", "shift_log.json"],
    )


def run_simulate(cfg: PipelineConfig) -> dict:
    subject_root = _require_dir(cfg.paths.subject_dir, "subject_dir")
    out = _require_out(cfg.paths.output_dir)
    subjects = discover_subjects(subject_root, ("volume.mgrid", "labels.mgrid", "landmarks.json"))
    seeds = cohort_seeds(cfg.seed, len(subjects))
    lr_sim = {
        "target_slice_thickness": cfg.lr_sim.target_slice_thickness,
        "max_shift": cfg.lr_sim.max_shift,
        "apical_truncation_slices": cfg.lr_sim.apical_truncation_slices,
    }
    jobs = [
        {"id": s.name, "subject": str(s), "out": str(out / s.name), "seed": seeds[i],
         "lr_sim": lr_sim}
        for i, s in enumerate(subjects)
    ]
    t0 = time.perf_counter()
    results = _run_subjects(_simulate_one, jobs, worker_count(cfg))
    return _emit_report("simulate", cfg.echo(), results, out, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# stage: training

def _load_lr_sample(sdir: Path):
    vol = normalize_intensity(read_grid(sdir / "lr_volume.mgrid"))
    lab = read_grid(sdir / "lr_labels.mgrid")
    lm = read_landmarks(sdir / "lr_landmarks.json")
    lmk_grid = mt.rasterize_landmarks(lm, lab)
    return vol, lab, lmk_grid


def run_train(cfg: PipelineConfig) -> dict:
    subject_root = _require_dir(cfg.paths.subject_dir, "subject_dir")
    out = _require_out(cfg.paths.output_dir)
    subjects = discover_subjects(
        subject_root, ("lr_volume.mgrid", "lr_labels.mgrid", "lr_landmarks.json")
    )
    t0 = time.perf_counter()
    results = []
    samples = []
    for sdir in subjects:
        try:
            samples.append(_load_lr_sample(sdir))
            results.append(SubjectResult(sdir.name, "ok"))
        except Exception as exc:
            results.append(
                SubjectResult(sdir.name, "error", error=f"{type(exc).__name__}: {exc}")
            )
    if not samples:
        raise ConfigError(f"no loadable training subjects under {subject_root}")
    tr = cfg.training
    outcome = mt.train_toy(
        samples,
        cfg.loss_weights,
        epochs=tr.epochs,
        lr=tr.lr,
        seed=cfg.seed,
        optimizer=tr.optimizer,
        stack_depth=tr.stack_depth,
        kernel_size=tr.kernel_size,
        trace_path=out / "loss_trace.csv",
    )
    mt.save_model(outcome.model, out / "model.mgrid")
    extra = {
        "model": "model.mgrid",
        "loss_trace": "loss_trace.csv",
        "initial_loss": outcome.trace[0].total,
        "final_loss": outcome.trace[-1].total,
    }
    return _emit_report("train", cfg.echo(), results, out, time.perf_counter() - t0, extra)


# ---------------------------------------------------------------------------
# stage: refinement (and its register/fuse/select sub-stages)

def load_atlases(atlas_root: Path) -> list[Atlas]:
    atlases = []
    for sdir in discover_subjects(atlas_root, ("volume.mgrid", "labels.mgrid", "landmarks.json")):
        atlases.append(
            Atlas(
                volume=normalize_intensity(read_grid(sdir / "volume.mgrid")),
                labels=read_grid(sdir / "labels.mgrid"),
                landmarks=read_landmarks(sdir / "landmarks.json"),
                id=sdir.name,
            )
        )
    return atlases


def _predict_subject(model: mt.ToyModel, sdir: Path):
    lr_vol = normalize_intensity(read_grid(sdir / "lr_volume.mgrid"))
    seg_p, lmk_p = mt.predict(model, lr_vol)
    lr_seg = argmax_labels(seg_p)
    lmk_lab = argmax_labels(lmk_p)
    lr_lms = centroid_landmarks(lmk_lab)
    return lr_vol, lr_seg, lr_lms


def _refine_one(job: dict) -> SubjectResult:
    sdir = Path(job["subject"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = mt.load_model(job["model_path"])
    atlases = [a for a in load_atlases(Path(job["atlas_dir"])) if a.id != job["id"]]
    lr_vol, lr_seg, lr_lms = _predict_subject(model, sdir)
    write_grid(lr_seg, out / "pred_labels.mgrid")
    write_landmarks(lr_lms, out / "pred_landmarks.json")
    reg_cfg = RegistrationConfig(**job["registration"])
    fus_cfg = FusionConfig(**job["fusion"])
    refined, report = refine(lr_vol, lr_seg, lr_lms, atlases, reg_cfg, fus_cfg)
    write_grid(refined, out / "refined_labels.mgrid")
    (out / "refine_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return SubjectResult(
        job["id"], "ok",
        ["pred_labels.mgrid", "pred_landmarks.json", "refined_labels.mgrid", "refine_report.json"],
        info={"selected": report["selected_atlas_ids"]},
    )


def _registration_echo(cfg: RegistrationConfig) -> dict:
    return {
        "pyramid_levels": [
            {"control_spacing": list(lv.control_spacing),
             "max_iterations": lv.max_iterations,
             "step_size": lv.step_size}
            for lv in cfg.pyramid_levels
        ],
        "convergence_tol": cfg.convergence_tol,
        "gradient_mode": cfg.gradient_mode,
    }


def _fusion_echo(cfg: FusionConfig) -> dict:
    return {
        "h": cfg.h,
        "patch_dims": list(cfg.patch_dims),
        "search_dims": list(cfg.search_dims),
        "atlas_count": cfg.atlas_count,
    }


def run_refine(cfg: PipelineConfig) -> dict:
    atlas_root = _require_dir(cfg.paths.atlas_dir, "atlas_dir")
    subject_root = _require_dir(cfg.paths.subject_dir, "subject_dir")
    out = _require_out(cfg.paths.output_dir)
    model_path = cfg.paths.model_path or str(Path(cfg.paths.output_dir) / "model.mgrid")
    if not Path(model_path).is_file():
        raise ConfigError(f"model_path does not exist: {model_path}")
    subjects = discover_subjects(subject_root, ("lr_volume.mgrid",))
    jobs = [
        {
            "id": s.name,
            "subject": str(s),
            "out": str(out / s.name),
            "model_path": model_path,
            "atlas_dir": str(atlas_root),
            "registration": _registration_echo(cfg.registration),
            "fusion": _fusion_echo(cfg.fusion),
        }
        for s in subjects
    ]
    t0 = time.perf_counter()
    results = _run_subjects(_refine_one, jobs, worker_count(cfg))
    return _emit_report("refine", cfg.echo(), results, out, time.perf_counter() - t0)


def _select_one(job: dict) -> SubjectResult:
    sdir = Path(job["subject"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = mt.load_model(job["model_path"])
    atlases = [a for a in load_atlases(Path(job["atlas_dir"])) if a.id != job["id"]]
    lr_vol, lr_seg, lr_lms = _predict_subject(model, sdir)
    hr_spacing = atlases[0].volume.spacing
    geom = working_geometry(lr_vol, hr_spacing, 10.0)
    seg_hr = resample_labels(lr_seg, geom)
    ranked = select_atlases(seg_hr, lr_lms, atlases, job["count"])
    doc = [
        {"atlas_id": s.atlas.id, "nmi": s.nmi_score, "affine": s.affine.to_flat()}
        for s in ranked
    ]
    (out / "selected_atlases.json").write_text(json.dumps(doc, indent=2) + "\n")
    return SubjectResult(job["id"], "ok", ["selected_atlases.json"])


def run_select_atlases(cfg: PipelineConfig) -> dict:
    atlas_root = _require_dir(cfg.paths.atlas_dir, "atlas_dir")
    subject_root = _require_dir(cfg.paths.subject_dir, "subject_dir")
    out = _require_out(cfg.paths.output_dir)
    model_path = cfg.paths.model_path or str(Path(cfg.paths.output_dir) / "model.mgrid")
    if not Path(model_path).is_file():
        raise ConfigError(f"model_path does not exist: {model_path}")
    subjects = discover_subjects(subject_root, ("lr_volume.mgrid",))
    jobs = [
        {"id": s.name, "subject": str(s), "out": str(out / s.name),
         "model_path": model_path, "atlas_dir": str(atlas_root),
         "count": cfg.fusion.atlas_count}
        for s in subjects
    ]
    t0 = time.perf_counter()
    results = _run_subjects(_select_one, jobs, worker_count(cfg))
    return _emit_report("select-atlases", cfg.echo(), results, out, time.perf_counter() - t0)


def _register_one(job: dict) -> SubjectResult:
    sdir = Path(job["subject"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = mt.load_model(job["model_path"])
    atlases = [a for a in load_atlases(Path(job["atlas_dir"])) if a.id != job["id"]]
    lr_vol, lr_seg, lr_lms = _predict_subject(model, sdir)
    hr_spacing = atlases[0].volume.spacing
    geom = working_geometry(lr_vol, hr_spacing, 10.0)
    pts = world_to_voxel(lr_vol, voxel_centers(geom))
    vol_hr = VolumeGrid(
        sample_trilinear(lr_vol.voxels, pts).reshape(geom.dims).astype(np.float32),
        geom.spacing, geom.origin,
    )
    seg_hr = LabelGrid(
        sample_nearest(lr_seg.labels, pts).reshape(geom.dims),
        geom.spacing, geom.origin, class_count=lr_seg.class_count,
    )
    write_grid(vol_hr, out / "target_hr_volume.mgrid")
    write_grid(seg_hr, out / "target_hr_labels.mgrid")
    reg_cfg = RegistrationConfig(**job["registration"])
    ranked = select_atlases(seg_hr, lr_lms, atlases, job["count"])
    outputs = ["target_hr_volume.mgrid", "target_hr_labels.mgrid"]
    traces = {}
    for sel in ranked:
        result = register_ffd(seg_hr, sel.atlas.labels, sel.affine, reg_cfg)
        write_ffd(result.transform, out / f"ffd_{sel.atlas.id}.mgrid")
        wvol = warp_volume(sel.atlas.volume, result.transform, geom)
        wlab = warp_labels(sel.atlas.labels, result.transform, geom, mode="nearest")
        write_grid(wvol, out / f"warped_{sel.atlas.id}_volume.mgrid")
        write_grid(wlab, out / f"warped_{sel.atlas.id}_labels.mgrid")
        outputs += [
            f"ffd_{sel.atlas.id}.mgrid",
            f"warped_{sel.atlas.id}_volume.mgrid",
            f"warped_{sel.atlas.id}_labels.mgrid",
        ]
        traces[sel.atlas.id] = result.objective_trace
    (out / "registration_traces.json").write_text(json.dumps(traces, indent=2) + "\n")
    outputs.append("registration_traces.json")
    return SubjectResult(job["id"], "ok", outputs)


def run_register(cfg: PipelineConfig) -> dict:
    atlas_root = _require_dir(cfg.paths.atlas_dir, "atlas_dir")
    subject_root = _require_dir(cfg.paths.subject_dir, "subject_dir")
    out = _require_out(cfg.paths.output_dir)
    model_path = cfg.paths.model_path or str(Path(cfg.paths.output_dir) / "model.mgrid")
    if not Path(model_path).is_file():
        raise ConfigError(f"model_path does not exist: {model_path}")
    subjects = discover_subjects(subject_root, ("lr_volume.mgrid",))
    jobs = [
        {"id": s.name, "subject": str(s), "out": str(out / s.name),
         "model_path": model_path, "atlas_dir": str(atlas_root),
         "count": cfg.fusion.atlas_count,
         "registration": _registration_echo(cfg.registration)}
        for s in subjects
    ]
    t0 = time.perf_counter()
    results = _run_subjects(_register_one, jobs, worker_count(cfg))
    return _emit_report("register", cfg.echo(), results, out, time.perf_counter() - t0)


def _fuse_one(job: dict) -> SubjectResult:
    from .regfuse import fuse_labels

    sdir = Path(job["subject"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    vol_hr = read_grid(sdir / "target_hr_volume.mgrid")
    warped = []
    for vol_file in sorted(sdir.glob("warped_*_volume.mgrid")):
        lab_file = vol_file.with_name(vol_file.name.replace("_volume", "_labels"))
        if lab_file.exists():
            warped.append((read_grid(vol_file), read_grid(lab_file)))
    if not warped:
        raise FileNotFoundError(f"no warped atlas pairs under {sdir}")
    fus_cfg = FusionConfig(**job["fusion"])
    fused = fuse_labels(vol_hr, warped, fus_cfg)
    write_grid(fused, out / "fused_labels.mgrid")
    return SubjectResult(job["id"], "ok", ["fused_labels.mgrid"])


def run_fuse(cfg: PipelineConfig) -> dict:
    subject_root = _require_dir(cfg.paths.subject_dir, "subject_dir")
    out = _require_out(cfg.paths.output_dir)
    subjects = discover_subjects(subject_root, ("target_hr_volume.mgrid",))
    jobs = [
        {"id": s.name, "subject": str(s), "out": str(out / s.name),
         "fusion": _fusion_echo(cfg.fusion)}
        for s in subjects
    ]
    t0 = time.perf_counter()
    results = _run_subjects(_fuse_one, jobs, worker_count(cfg))
    return _emit_report("fuse", cfg.echo(), results, out, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# stage: evaluation

def _evaluate_one(job: dict) -> SubjectResult:
    pred_dir = Path(job["prediction"])
    ref_dir = Path(job["reference"])
    pred_file = None
    for name in ("refined_labels.mgrid", "fused_labels.mgrid", "labels.mgrid"):
        if (pred_dir / name).exists():
            pred_file = pred_dir / name
            break
    if pred_file is None:
        raise FileNotFoundError(f"no prediction labels under {pred_dir}")
    pred = read_grid(pred_file)
    ref = read_grid(ref_dir / "labels.mgrid")
    if not pred.same_geometry(ref):
        pred = resample_labels(pred, ref)
    score = met.score_segmentation(pred, ref, job["id"])
    measures = met.clinical_measures(pred)
    return SubjectResult(
        job["id"], "ok",
        info={
            "dice": score.dice,
            "hausdorff_mm": score.hausdorff_mm,
            "clinical": asdict(measures),
        },
    )


def run_evaluate(cfg: PipelineConfig) -> dict:
    pred_root = _require_dir(
        cfg.paths.prediction_dir or cfg.paths.subject_dir, "prediction_dir"
    )
    ref_root = _require_dir(
        cfg.paths.reference_dir or cfg.paths.atlas_dir, "reference_dir"
    )
    out = _require_out(cfg.paths.output_dir)
    ref_subjects = {p.name for p in discover_subjects(ref_root, ("labels.mgrid",))}
    pred_subjects = [p for p in sorted(pred_root.iterdir()) if p.is_dir() and p.name in ref_subjects]
    if not pred_subjects:
        raise ConfigError(
            f"no overlapping subjects between {pred_root} and {ref_root}"
        )
    jobs = [
        {"id": p.name, "prediction": str(p), "reference": str(ref_root / p.name)}
        for p in pred_subjects
    ]
    t0 = time.perf_counter()
    results = _run_subjects(_evaluate_one, jobs, worker_count(cfg))
    scores = []
    clinical_rows = []
    for r in results:
        if r.status == "ok":
            scores.append(
                met.SegScore(r.id, r.info["dice"], r.info["hausdorff_mm"])
            )
            clinical_rows.append((r.id, met.ClinicalMeasures(**r.info["clinical"])))
    extra = {}
    if scores:
        met.write_seg_scores_csv(scores, out / "seg_scores.csv")
        met.write_clinical_csv(clinical_rows, out / "clinical.csv")
        summary = met.cohort_report(scores)
        met.write_cohort_json(summary, out / "cohort_summary.json")
        met.write_cohort_csv(summary, out / "cohort_summary.csv")
        extra = {
            "outputs": ["seg_scores.csv", "clinical.csv", "cohort_summary.json", "cohort_summary.csv"],
            "cohort": summary,
        }
    return _emit_report("evaluate", cfg.echo(), results, out, time.perf_counter() - t0, extra)
