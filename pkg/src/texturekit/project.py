"""Project persistence, pipeline configuration, and staged job orchestration.

A project is a directory: an index file naming the images and their
artifacts, a config file holding every pipeline constant, the artifact
files themselves, and a trajectory store. Stages (detect, segment, invert,
synth, tile, edit, transfer) run as background jobs, at most one per
project at a time; every artifact write goes through a temp file and an
atomic rename, and the index is rewritten last, so a killed job can leave
orphaned files but never a readable-yet-inconsistent project.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import EmbedderConfig, label_pixels, train_embedder
from .diffusion import (
    ExemplarPatchDenoiser,
    GaussianAnalyticDenoiser,
    GuidanceConfig,
    build_schedule,
)
from .editing import (
    Trajectory,
    TrajectoryStore,
    invert,
    localized_edit,
    record_generation,
    transfer_feature,
)
from .errors import ProjectError, RegionMiningError, StageBusyError, TextureKitError
from .filters import FilterBank
from .grid import (
    Grid,
    LabelMap,
    Rng,
    grid_to_txf1_bytes,
    labels_to_png_bytes,
    read_grid,
    read_labels,
)
from .regions import connected_components, mine_pairs, region_descriptor
from .scoring import binarize, combined_thresholds, score_patch_dissimilarity
from .synthesis import (
    multidiffusion_sample,
    plan_windows,
    seam_report,
    tileable_synthesize,
    uniformize,
)

SCHEMA_VERSION = 1

STAGES = ("detect", "segment", "invert", "synth", "tile", "edit", "transfer")


# ---------------------------------------------------------------------------
# Pipeline configuration


@dataclass
class PipelineConfig:
    """Every tunable constant of the pipeline, grouped into config sections.

    The on-disk form is a sectioned key = value file; keys are exactly the
    field names here and the section grouping is fixed by CONFIG_SECTIONS.
    """

    schema_version: int = SCHEMA_VERSION
    k: int = 2
    seed: int = 0

    scorer_patch: int = 7
    scorer_filters: int = 48
    scorer_seed: int = 11

    beta: float = 1.5
    bins: int = 256

    min_region: int = 12
    positives: int = 10
    stratify: bool = True

    bank_filters: int = 64
    bank_seed: int = 0
    embed_hidden: int = 64
    embed_out: int = 32
    head_dim: int = 32
    tau: float = 0.07
    iterations: int = 10_000
    lr: float = 0.05

    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    gamma: float = 4.0

    alpha: float = 0.3
    fp_iters: int = 4
    min_edit_patch: int = 442
    interactive_steps: int = 42
    transfer_steps: int = 250
    background_mode: str = "replay"

    synthesis_steps: int = 18
    window: int = 64
    overlap_min: int = 32
    f_c: float = 0.1
    coarse: int = 32

    denoiser: str = "exemplar"
    exemplar_patch: int = 7
    exemplar_bandwidth: float = 0.05
    exemplar_stride: int = 1
    analytic_mean: float = 0.5
    analytic_std: float = 0.25
    bridge_endpoint: str = ""


CONFIG_SECTIONS: dict[str, tuple[str, ...]] = {
    "project": ("schema_version", "k", "seed"),
    "scorer": ("scorer_patch", "scorer_filters", "scorer_seed"),
    "threshold": ("beta", "bins"),
    "regions": ("min_region", "positives", "stratify"),
    "embedder": (
        "bank_filters",
        "bank_seed",
        "embed_hidden",
        "embed_out",
        "head_dim",
        "tau",
        "iterations",
        "lr",
    ),
    "cluster": ("kmeans_max_iters", "kmeans_tol"),
    "diffusion": ("sigma_min", "sigma_max", "rho", "gamma"),
    "editing": (
        "alpha",
        "fp_iters",
        "min_edit_patch",
        "interactive_steps",
        "transfer_steps",
        "background_mode",
    ),
    "synthesis": ("synthesis_steps", "window", "overlap_min", "f_c", "coarse"),
    "denoiser": (
        "denoiser",
        "exemplar_patch",
        "exemplar_bandwidth",
        "exemplar_stride",
        "analytic_mean",
        "analytic_std",
        "bridge_endpoint",
    ),
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _coerce_config_value(key: str, raw):
    """Parse one config value to its field's type; raw may be str or typed."""
    if key not in _FIELD_TYPES:
        raise ProjectError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ProjectError(f"config key {key!r} expects true/false, got {raw!r}")
    if kind == "int":
        try:
            return int(str(raw).strip())
        except ValueError as exc:
            raise ProjectError(f"config key {key!r} expects an integer, got {raw!r}") from exc
    if kind == "float":
        try:
            return float(str(raw).strip())
        except ValueError as exc:
            raise ProjectError(f"config key {key!r} expects a number, got {raw!r}") from exc
    text = str(raw).strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        text = text[1:-1]
    return text


def parse_config_text(text: str) -> PipelineConfig:
    """Parse the sectioned key = value config format.

    Sections are headers in brackets; keys must belong to the declared
    section. Blank lines and # comments are ignored.
    """
    values: dict[str, object] = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in CONFIG_SECTIONS:
                raise ProjectError(f"unknown config section {section!r} (line {lineno})")
            continue
        if "=" not in line:
            raise ProjectError(f"config line {lineno} is not key = value: {raw_line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if section is None:
            raise ProjectError(f"config key {key!r} appears before any section (line {lineno})")
        if key not in CONFIG_SECTIONS[section]:
            raise ProjectError(f"config key {key!r} does not belong to section [{section}]")
        values[key] = _coerce_config_value(key, raw)
    config = PipelineConfig(**values)
    if config.schema_version != SCHEMA_VERSION:
        raise ProjectError(
            f"config schema_version {config.schema_version} unsupported; this build reads {SCHEMA_VERSION}"
        )
    return config


def render_config_text(config: PipelineConfig) -> str:
    lines = []
    for section, keys in CONFIG_SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(config, key)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = f'"{value}"'
            else:
                text = repr(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def apply_config_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    coerced = {key: _coerce_config_value(key, value) for key, value in overrides.items()}
    return dataclasses.replace(config, **coerced)


# ---------------------------------------------------------------------------
# Project store


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".tmp-{uuid.uuid4().hex}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


_ARTIFACT_KINDS = ("texture", "scores", "mask", "labels", "seam")


class Project:
    """One project directory: index, config, artifacts, trajectories."""

    def __init__(self, root, project_id: str, index: dict, config: PipelineConfig):
        self.root = Path(root)
        self.id = project_id
        self.index = index
        self.config = config
        self.dir = self.root / project_id
        self.trajectories = TrajectoryStore(self.dir / "trajectories")
        self._traj_cache: dict[str, Trajectory] = {}
        self._denoiser = None
        self._lock = threading.Lock()

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def create(
        cls,
        root,
        project_id: str | None = None,
        config: PipelineConfig | None = None,
        overrides: dict | None = None,
    ) -> "Project":
        root = Path(root)
        if project_id is None:
            project_id = f"proj-{uuid.uuid4().hex[:8]}"
        if not _valid_id(project_id):
            raise ProjectError(f"invalid project id {project_id!r}")
        target = root / project_id
        if target.exists():
            raise ProjectError(f"project {project_id!r} already exists")
        config = config or PipelineConfig()
        if overrides:
            config = apply_config_overrides(config, overrides)
        index = {
            "schema_version": SCHEMA_VERSION,
            "id": project_id,
            "counters": {},
            "images": {},
            "stages": {},
        }
        target.mkdir(parents=True)
        project = cls(root, project_id, index, config)
        _atomic_write_text(target / "config.toml", render_config_text(config))
        project._write_index()
        return project

    @classmethod
    def open(cls, root, project_id: str) -> "Project":
        root = Path(root)
        index_path = root / project_id / "project.json"
        if not index_path.exists():
            raise ProjectError(f"no project {project_id!r} under {root}")
        index = json.loads(index_path.read_text("utf-8"))
        if index.get("schema_version") != SCHEMA_VERSION:
            raise ProjectError(
                f"project schema_version {index.get('schema_version')} unsupported"
            )
        config = parse_config_text((root / project_id / "config.toml").read_text("utf-8"))
        return cls(root, project_id, index, config)

    def _write_index(self) -> None:
        _atomic_write_text(self.dir / "project.json", json.dumps(self.index, indent=2))

    # -- images and artifacts ------------------------------------------------

    def allocate_id(self, prefix: str) -> str:
        with self._lock:
            count = self.index["counters"].get(prefix, 0)
            self.index["counters"][prefix] = count + 1
        return f"{prefix}_{count:04d}"

    def image_ids(self) -> list[str]:
        return list(self.index["images"])

    def source_image_ids(self) -> list[str]:
        return [i for i, e in self.index["images"].items() if e["kind"] == "source"]

    def has_image(self, image_id: str) -> bool:
        return image_id in self.index["images"]

    def add_image(self, image, image_id: str | None = None) -> str:
        """Register a source texture; image is a Grid or a readable path."""
        if not isinstance(image, Grid):
            image = read_grid(image)
        image_id = image_id or self.allocate_id("img")
        if not _valid_id(image_id):
            raise ProjectError(f"invalid image id {image_id!r}")
        if image_id in self.index["images"]:
            raise ProjectError(f"image {image_id!r} already exists")
        rel = f"images/{image_id}.txf1"
        _atomic_write_bytes(self.dir / rel, _txf1_bytes(image))
        self.index["images"][image_id] = {"kind": "source", "artifacts": {"texture": rel}}
        self._write_index()
        self._denoiser = None
        return image_id

    def artifact_path(self, image_id: str, kind: str) -> Path:
        entry = self.index["images"].get(image_id)
        if entry is None:
            raise ProjectError(f"unknown image {image_id!r}")
        if kind not in _ARTIFACT_KINDS:
            raise ProjectError(f"unknown artifact kind {kind!r}")
        rel = entry["artifacts"].get(kind)
        if rel is None:
            raise ProjectError(
                f"image {image_id!r} has no {kind} artifact",
                missing_prerequisite=_ARTIFACT_STAGE.get(kind),
            )
        return self.dir / rel

    def has_artifact(self, image_id: str, kind: str) -> bool:
        entry = self.index["images"].get(image_id)
        return bool(entry and entry["artifacts"].get(kind))

    def load_image(self, image_id: str) -> Grid:
        return read_grid(self.artifact_path(image_id, "texture"))

    def load_scores(self, image_id: str) -> Grid:
        return read_grid(self.artifact_path(image_id, "scores"))

    def load_mask(self, image_id: str) -> np.ndarray:
        return read_labels(self.artifact_path(image_id, "mask")).labels > 0

    def load_labels(self, image_id: str) -> LabelMap:
        return read_labels(self.artifact_path(image_id, "labels"))

    def _set_artifact(self, image_id: str, kind: str, rel: str) -> None:
        self.index["images"][image_id]["artifacts"][kind] = rel

    def save_generated(self, image_id: str, kind: str, grid: Grid) -> None:
        """Register a synthesized/edited texture as a new image entry."""
        rel = f"textures/{image_id}.txf1"
        _atomic_write_bytes(self.dir / rel, _txf1_bytes(grid))
        self.index["images"][image_id] = {"kind": kind, "artifacts": {"texture": rel}}

    def mark_stage(self, stage: str, job: "Job") -> None:
        self.index["stages"][stage] = {"job": job.id, "seed": job.seed}

    # -- heavy state ----------------------------------------------------------

    def load_trajectory(self, image_id: str) -> Trajectory:
        """Stored trajectory, cached in memory after the first load."""
        cached = self._traj_cache.get(image_id)
        if cached is not None:
            return cached
        traj = self.trajectories.load(image_id)
        self._traj_cache[image_id] = traj
        return traj

    def store_trajectory(self, image_id: str, traj: Trajectory) -> None:
        self.trajectories.save(image_id, traj)
        self._traj_cache[image_id] = traj

    def denoiser(self):
        """The bound denoiser; exemplar sets rebuild when labels change."""
        if self._denoiser is not None:
            return self._denoiser
        cfg = self.config
        if cfg.denoiser == "analytic":
            den = GaussianAnalyticDenoiser(mu=cfg.analytic_mean, s=cfg.analytic_std)
        elif cfg.denoiser == "exemplar":
            exemplars = []
            for image_id in self.source_image_ids():
                image = self.load_image(image_id)
                if self.has_artifact(image_id, "labels"):
                    labels = self.load_labels(image_id)
                else:
                    labels = LabelMap(np.zeros((image.h, image.w), dtype=np.uint8))
                exemplars.append((image, labels))
            if not exemplars:
                raise ProjectError(
                    "project has no images to build the exemplar denoiser from"
                )
            den = ExemplarPatchDenoiser(
                exemplars,
                patch=cfg.exemplar_patch,
                bandwidth=cfg.exemplar_bandwidth,
                stride=cfg.exemplar_stride,
            )
        elif cfg.denoiser == "bridge":
            from .bridge import BridgeRemoteDenoiser

            host, _, port = cfg.bridge_endpoint.rpartition(":")
            if not host or not port.isdigit():
                raise ProjectError(
                    f"bridge_endpoint must be host:port, got {cfg.bridge_endpoint!r}"
                )
            den = BridgeRemoteDenoiser(host=host, port=int(port))
        else:
            raise ProjectError(f"unknown denoiser binding {cfg.denoiser!r}")
        self._denoiser = den
        return den

    def channels(self) -> int:
        ids = self.source_image_ids()
        return self.load_image(ids[0]).c if ids else 1


_ARTIFACT_STAGE = {"scores": "detect", "mask": "detect", "labels": "segment"}


def _valid_id(value: str) -> bool:
    return bool(value) and all(ch.isalnum() or ch in "-_" for ch in value)


def _txf1_bytes(grid: Grid) -> bytes:
    if grid.dtype != np.float32:
        grid = Grid(grid.data.astype(np.float32))
    return grid_to_txf1_bytes(grid)


# ---------------------------------------------------------------------------
# Jobs


_STATE_ORDER = {"queued": 0, "running": 1, "done": 2, "failed": 2}


@dataclass
class Job:
    """One background stage run; states only move forward."""

    id: str
    kind: str
    project_id: str
    seed: int
    state: str = "queued"
    progress: float = 0.0
    result: dict = field(default_factory=dict)
    error: dict | None = None
    _thread: threading.Thread | None = field(default=None, repr=False)

    def advance_state(self, new_state: str) -> None:
        if _STATE_ORDER[new_state] < _STATE_ORDER[self.state]:
            raise ProjectError(f"job state cannot move {self.state} -> {new_state}")
        self.state = new_state

    def set_progress(self, fraction: float) -> None:
        self.progress = max(self.progress, min(float(fraction), 1.0))

    def to_dict(self) -> dict:
        payload = {
            "id": self.id,
            "kind": self.kind,
            "project": self.project_id,
            "state": self.state,
            "progress": round(self.progress, 4),
            "seed": self.seed,
            "result": self.result,
        }
        if self.error is not None:
            payload["error"] = self.error
        return payload


class JobManager:
    """Threaded runner enforcing one queued-or-running job per project."""

    def __init__(self):
        self.jobs: dict[str, Job] = {}
        self._busy: dict[str, str] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def _new_job(self, kind: str, project_id: str, seed: int) -> Job:
        with self._lock:
            self._counter += 1
            job_id = f"job_{self._counter:04d}"
            job = Job(id=job_id, kind=kind, project_id=project_id, seed=seed)
            self.jobs[job_id] = job
        return job

    def get(self, job_id: str) -> Job | None:
        return self.jobs.get(job_id)

    def raise_if_busy(self, project_id: str) -> None:
        with self._lock:
            self._raise_if_busy_locked(project_id)

    def _raise_if_busy_locked(self, project_id: str) -> None:
        running = self._busy.get(project_id)
        if running is not None:
            raise StageBusyError(
                f"a {self.jobs[running].kind} job is already active for "
                f"project {project_id!r}"
            )

    def submit(self, project_id: str, kind: str, seed: int, fn) -> Job:
        with self._lock:
            self._raise_if_busy_locked(project_id)
            self._counter += 1
            job = Job(id=f"job_{self._counter:04d}", kind=kind, project_id=project_id, seed=seed)
            self.jobs[job.id] = job
            self._busy[project_id] = job.id
        thread = threading.Thread(target=self._run, args=(job, fn), daemon=True)
        job._thread = thread
        thread.start()
        return job

    def fail_immediately(self, project_id: str, kind: str, seed: int, message: str) -> Job:
        job = self._new_job(kind, project_id, seed)
        job.advance_state("failed")
        job.error = {"code": "invalid_input", "message": message}
        return job

    def _run(self, job: Job, fn) -> None:
        job.advance_state("running")
        try:
            job.result = fn(job) or {}
            job.set_progress(1.0)
            job.advance_state("done")
        except TextureKitError as exc:
            job.error = _error_payload(exc)
            job.advance_state("failed")
        except Exception as exc:  # noqa: BLE001 - job boundary
            job.error = {"code": "internal", "message": f"{type(exc).__name__}: {exc}"}
            job.advance_state("failed")
        finally:
            with self._lock:
                if self._busy.get(job.project_id) == job.id:
                    del self._busy[job.project_id]

    def wait(self, job_id: str, timeout: float = 120.0) -> Job:
        job = self.jobs[job_id]
        if job._thread is not None:
            job._thread.join(timeout)
        if job.state not in ("done", "failed"):
            raise ProjectError(f"job {job_id} did not finish within {timeout}s")
        return job


def _error_payload(exc: TextureKitError) -> dict:
    payload = {"code": _snake_case(type(exc).__name__), "message": str(exc)}
    missing = getattr(exc, "missing_prerequisite", None)
    if missing:
        payload["missing_prerequisite"] = missing
    return payload


def _snake_case(name: str) -> str:
    if name.endswith("Error"):
        name = name[: -len("Error")]
    out = []
    for ch in name:
        if ch.isupper() and out:
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


class _ProgressDenoiser:
    """Wrapper counting denoiser evaluations into a job's progress."""

    def __init__(self, inner, job: Job, expected_calls: int):
        self.inner = inner
        self.job = job
        self.expected = max(int(expected_calls), 1)
        self.calls = 0

    def eval(self, z, cond, sigma):
        out = self.inner.eval(z, cond, sigma)
        self.calls += 1
        self.job.set_progress(0.99 * min(self.calls / self.expected, 1.0))
        return out


# ---------------------------------------------------------------------------
# Stages


def run_stage(project: Project, stage: str, manager: JobManager, params: dict | None = None) -> Job:
    """Validate prerequisites and enqueue one stage as a background job.

    Prerequisite violations raise immediately (so callers can answer with
    the missing stage named); a detect run on an empty project instead
    returns an already-failed job, mirroring a submitted-but-doomed run.
    """
    if stage not in STAGES:
        raise ProjectError(f"unknown stage {stage!r}")
    params = dict(params or {})
    seed = int(params.pop("seed", project.config.seed))
    if stage == "detect" and not project.source_image_ids():
        manager.raise_if_busy(project.id)
        return manager.fail_immediately(project.id, stage, seed, "no inputs")
    _PRECHECKS[stage](project, params)
    runner = _RUNNERS[stage]

    def body(job: Job) -> dict:
        result = runner(project, params, seed, job)
        project.mark_stage(stage, job)
        project._write_index()
        return result

    return manager.submit(project.id, stage, seed, body)


def _require_image(project: Project, params: dict, key: str = "image") -> str:
    image_id = params.get(key)
    if not image_id or not project.has_image(image_id):
        raise ProjectError(f"unknown image {image_id!r}")
    return image_id


def _precheck_detect(project: Project, params: dict) -> None:
    return None


def _precheck_segment(project: Project, params: dict) -> None:
    missing = [
        image_id
        for image_id in project.source_image_ids()
        if not (project.has_artifact(image_id, "scores") and project.has_artifact(image_id, "mask"))
    ]
    if not project.source_image_ids() or missing:
        raise ProjectError(
            "anomaly scores and masks are missing; run the detect stage first",
            missing_prerequisite="detect",
        )


def _precheck_invert(project: Project, params: dict) -> None:
    _require_image(project, params)


def _precheck_edit(project: Project, params: dict) -> None:
    image_id = _require_image(project, params)
    if "labels" not in params or "mask" not in params:
        raise ProjectError("edit needs brushed labels and an edit mask")
    if not project.trajectories.has(image_id):
        raise ProjectError(
            f"no stored trajectory for image {image_id!r}; invert the image first",
            missing_prerequisite="invert",
        )


def _precheck_synth(project: Project, params: dict) -> None:
    height = int(params.get("height", 0))
    width = int(params.get("width", 0))
    if height < 1 or width < 1:
        raise ProjectError(f"synthesis size {height}x{width} must be at least 1x1")


def _precheck_transfer(project: Project, params: dict) -> None:
    _require_image(project, params)
    if "labels" not in params:
        raise ProjectError("transfer needs a condition label map")


_PRECHECKS = {
    "detect": _precheck_detect,
    "segment": _precheck_segment,
    "invert": _precheck_invert,
    "synth": _precheck_synth,
    "tile": _precheck_synth,
    "edit": _precheck_edit,
    "transfer": _precheck_transfer,
}


def _run_detect(project: Project, params: dict, seed: int, job: Job) -> dict:
    cfg = project.config
    ids = project.source_image_ids()
    images = [project.load_image(i) for i in ids]
    score_grids = score_patch_dissimilarity(images, patch=cfg.scorer_patch, seed=cfg.scorer_seed)
    job.set_progress(0.6)
    thresholds = combined_thresholds(
        [g.data[:, :, 0] for g in score_grids], beta=cfg.beta, bins=cfg.bins
    )
    for pos, (image_id, scores, threshold) in enumerate(zip(ids, score_grids, thresholds)):
        mask = binarize(scores.data[:, :, 0], threshold)
        score_rel = f"scores/{image_id}.txf1"
        mask_rel = f"masks/{image_id}.png"
        _atomic_write_bytes(project.dir / score_rel, _txf1_bytes(scores))
        _atomic_write_bytes(
            project.dir / mask_rel,
            labels_to_png_bytes(LabelMap(mask.astype(np.uint8), num_classes=1)),
        )
        project._set_artifact(image_id, "scores", score_rel)
        project._set_artifact(image_id, "mask", mask_rel)
        job.set_progress(0.6 + 0.4 * (pos + 1) / len(ids))
    return {"images": ids, "thresholds": [float(t) for t in thresholds]}


def _run_segment(project: Project, params: dict, seed: int, job: Job) -> dict:
    cfg = project.config
    k = int(params.get("k", cfg.k))
    ids = project.source_image_ids()
    images = [project.load_image(i) for i in ids]
    masks = [project.load_mask(i) for i in ids]
    scores = [project.load_scores(i) for i in ids]
    bank = FilterBank(
        size=5, n_filters=cfg.bank_filters, channels=images[0].c, seed=cfg.bank_seed
    )
    regions = []
    for idx, (image, mask, score) in enumerate(zip(images, masks, scores)):
        components = connected_components(mask, image_id=idx, min_pixels=cfg.min_region)
        if components:
            features = bank.responses(image)
            for region in components:
                region.descriptor = region_descriptor(region, features, score)
        regions.extend(components)
    if len(regions) < 2:
        raise RegionMiningError(
            f"found {len(regions)} usable regions; need at least 2 to mine pairs"
        )
    job.set_progress(0.15)
    rng = Rng(seed)
    pairs = mine_pairs(
        regions, k_pre=k, rng=rng.derive("mining"), p=cfg.positives, stratify=cfg.stratify
    )
    job.set_progress(0.25)
    embedder_config = EmbedderConfig(
        in_channels=cfg.bank_filters,
        hidden=cfg.embed_hidden,
        out_dim=cfg.embed_out,
        head_dim=cfg.head_dim,
        tau=cfg.tau,
    )
    embedder = train_embedder(
        pairs,
        rng.derive("train"),
        config=embedder_config,
        iterations=cfg.iterations,
        lr=cfg.lr,
        bank=bank,
    )
    job.set_progress(0.8)
    label_maps = label_pixels(
        embedder,
        images,
        masks,
        k=k,
        rng=rng.derive("labels"),
        max_iters=cfg.kmeans_max_iters,
        rel_tol=cfg.kmeans_tol,
    )
    for image_id, label_map in zip(ids, label_maps):
        rel = f"labels/{image_id}.png"
        _atomic_write_bytes(project.dir / rel, labels_to_png_bytes(label_map))
        project._set_artifact(image_id, "labels", rel)
    project._denoiser = None
    return {"images": ids, "k": k, "regions": len(regions)}


def _run_invert(project: Project, params: dict, seed: int, job: Job) -> dict:
    cfg = project.config
    image_id = params["image"]
    image = project.load_image(image_id)
    steps = int(params.get("steps") or cfg.interactive_steps)
    fp_iters = int(params.get("fp_iters") or cfg.fp_iters)
    schedule = build_schedule(steps, cfg.sigma_min, cfg.sigma_max, cfg.rho)
    denoiser = _ProgressDenoiser(project.denoiser(), job, steps * fp_iters)
    trajectory = invert(denoiser, image, steps, fp_iters=fp_iters, schedule=schedule)
    project.store_trajectory(image_id, trajectory)
    return {"image": image_id, "steps": steps}


def _run_edit(project: Project, params: dict, seed: int, job: Job) -> dict:
    cfg = project.config
    image_id = params["image"]
    trajectory = project.load_trajectory(image_id)
    steps = params.get("steps")
    if steps is not None and int(steps) != trajectory.n_steps:
        raise ProjectError(
            f"trajectory for {image_id!r} has {trajectory.n_steps} steps; "
            f"requested {steps}"
        )
    image = project.load_image(image_id)
    denoiser = _ProgressDenoiser(project.denoiser(), job, 2 * trajectory.n_steps)
    edited = localized_edit(
        denoiser,
        trajectory,
        image,
        params["mask"],
        params["labels"],
        alpha=cfg.alpha,
        gamma=cfg.gamma,
        background_mode=cfg.background_mode,
        min_patch=cfg.min_edit_patch,
    )
    new_id = project.allocate_id("edit")
    project.save_generated(new_id, "edit", edited)
    return {"image": new_id, "source": image_id}


def _run_synth(project: Project, params: dict, seed: int, job: Job) -> dict:
    return _synthesize(project, params, seed, job, wrap=bool(params.get("tileable")))


def _run_tile(project: Project, params: dict, seed: int, job: Job) -> dict:
    return _synthesize(project, params, seed, job, wrap=True)


def _synthesize(project: Project, params: dict, seed: int, job: Job, wrap: bool) -> dict:
    cfg = project.config
    height = int(params["height"])
    width = int(params["width"])
    cond = params.get("labels")
    steps = int(params.get("steps") or cfg.synthesis_steps)
    channels = project.channels() if cfg.denoiser == "exemplar" else 1
    guidance = GuidanceConfig(gamma=cfg.gamma) if cond is not None else None
    stride = max(cfg.window - cfg.overlap_min, 1)
    windows = math.ceil(height / stride) * math.ceil(width / stride)
    expected = steps * windows * (2 if guidance is not None else 1)
    denoiser = _ProgressDenoiser(project.denoiser(), job, expected)
    result: dict = {"height": height, "width": width, "steps": steps, "tileable": wrap}

    if wrap:
        output = tileable_synthesize(
            denoiser,
            height,
            width,
            cond=cond,
            prototype_seed=seed,
            steps=steps,
            window=cfg.window,
            overlap_min=cfg.overlap_min,
            channels=channels,
            guidance=guidance,
            f_c=cfg.f_c,
            coarse=cfg.coarse,
        )
        new_id = project.allocate_id("synth")
        report = seam_report(output)
        report_rel = f"reports/{new_id}.seam.json"
        _atomic_write_text(project.dir / report_rel, json.dumps(report, indent=2))
        project.save_generated(new_id, "synth", output)
        project._set_artifact(new_id, "seam", report_rel)
        result.update({"image": new_id, "seam": report})
        return result

    rng = Rng(seed)
    noise = rng.derive("noise").normal((height, width, channels))
    schedule = build_schedule(steps, cfg.sigma_min, cfg.sigma_max, cfg.rho)
    new_id = project.allocate_id("synth")
    if height <= cfg.window and width <= cfg.window:
        z_init = schedule.sigma_max * noise
        image, trajectory = record_generation(
            denoiser, z_init, schedule, cond=cond, guidance=guidance
        )
        project.save_generated(new_id, "synth", Grid(image))
        project.store_trajectory(new_id, trajectory)
        result.update({"image": new_id, "trajectory": True})
        return result
    prototype = noise[: min(cfg.window, height), : min(cfg.window, width)]
    uniform = uniformize(
        noise, prototype, f_c=cfg.f_c, coarse=cfg.coarse, rng=rng.derive("lf")
    )
    plan = plan_windows(
        height,
        width,
        window=cfg.window,
        overlap_min=cfg.overlap_min,
        wrap=False,
        rng=rng.derive("plan"),
        steps=steps,
    )
    output = multidiffusion_sample(
        denoiser, schedule.sigma_max * uniform.data, cond, schedule, plan, guidance=guidance
    )
    project.save_generated(new_id, "synth", output)
    result.update({"image": new_id, "trajectory": False})
    return result


def _run_transfer(project: Project, params: dict, seed: int, job: Job) -> dict:
    cfg = project.config
    image_id = params["image"]
    target = project.load_image(image_id)
    steps = int(params.get("steps") or cfg.transfer_steps)
    denoiser = _ProgressDenoiser(
        project.denoiser(), job, steps * cfg.fp_iters + 2 * steps
    )
    output = transfer_feature(
        denoiser,
        target,
        params["labels"],
        mask=params.get("mask"),
        steps=steps,
        alpha=cfg.alpha,
        gamma=cfg.gamma,
        fp_iters=cfg.fp_iters,
        background_mode=cfg.background_mode,
    )
    new_id = project.allocate_id("transfer")
    project.save_generated(new_id, "transfer", Grid(output))
    return {"image": new_id, "source": image_id}


_RUNNERS = {
    "detect": _run_detect,
    "segment": _run_segment,
    "invert": _run_invert,
    "synth": _run_synth,
    "tile": _run_tile,
    "edit": _run_edit,
    "transfer": _run_transfer,
}
