"""HTTP service exposing projects, staged jobs, and image artifacts.

All request and response bodies are JSON except image payloads, which
travel as 8-bit PNG: artifact GETs return ``image/png`` directly, and
label or mask uploads arrive base64-encoded inside JSON fields. Errors
are always ``{"code", "message"}`` plus ``"missing_prerequisite"`` when a
pipeline stage has to run first: unknown ids are 404, busy projects and
missing prerequisites are 409, malformed input is 422.

Handlers only validate and enqueue; the heavy work runs on the project's
single job thread, so concurrent requests stay responsive and at most one
stage mutates a project at a time.
"""

from __future__ import annotations

import base64
import binascii
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .errors import GridFormatError, ProjectError, StageBusyError, TextureKitError
from .grid import (
    Grid,
    LabelMap,
    grid_to_png_bytes,
    png_bytes_to_grid,
    png_bytes_to_labels,
    read_grid,
)
from .project import STAGES, JobManager, Project, _snake_case, run_stage

_ARTIFACTS = ("scores", "mask", "labels", "texture")


class ApiError(Exception):
    """An HTTP-mappable failure raised from request handlers."""

    def __init__(self, status: int, code: str, message: str, missing: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.missing = missing

    def response(self) -> JSONResponse:
        body = {"code": self.code, "message": self.message}
        if self.missing:
            body["missing_prerequisite"] = self.missing
        return JSONResponse(status_code=self.status, content=body)


class Studio:
    """Shared service state: the project root, cache, and job manager."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manager = JobManager()
        self._projects: dict[str, Project] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def allocate_project_id(self) -> str:
        with self._lock:
            while True:
                candidate = f"proj_{self._counter:04d}"
                self._counter += 1
                if not (self.root / candidate).exists():
                    return candidate

    def register(self, project: Project) -> None:
        with self._lock:
            self._projects[project.id] = project

    def project(self, project_id: str) -> Project:
        with self._lock:
            cached = self._projects.get(project_id)
        if cached is not None:
            return cached
        try:
            project = Project.open(self.root, project_id)
        except ProjectError as exc:
            raise ApiError(404, "unknown_project", str(exc)) from exc
        self.register(project)
        return project


# ---------------------------------------------------------------------------
# Request parsing helpers


async def _json_object(request: Request, allow_empty: bool = False) -> dict:
    raw = await request.body()
    if not raw:
        if allow_empty:
            return {}
        raise ApiError(422, "malformed_body", "request body must be a JSON object")
    try:
        body = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ApiError(422, "malformed_body", f"request body is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise ApiError(422, "malformed_body", "request body must be a JSON object")
    return body


def _expect_int(body: dict, key: str, required: bool = False):
    if key not in body or body[key] is None:
        if required:
            raise ApiError(422, "missing_field", f"field {key!r} is required")
        return None
    value = body[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ApiError(422, "invalid_field", f"field {key!r} must be an integer")
    return value


def _expect_str(body: dict, key: str, required: bool = False):
    if key not in body or body[key] is None:
        if required:
            raise ApiError(422, "missing_field", f"field {key!r} is required")
        return None
    value = body[key]
    if not isinstance(value, str):
        raise ApiError(422, "invalid_field", f"field {key!r} must be a string")
    return value


def _decode_png_field(body: dict, key: str, required: bool = False) -> bytes | None:
    text = _expect_str(body, key, required=required)
    if text is None:
        return None
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ApiError(422, "invalid_field", f"field {key!r} is not valid base64: {exc}") from exc


def _decode_labels(blob: bytes, key: str) -> LabelMap:
    try:
        return png_bytes_to_labels(blob)
    except GridFormatError as exc:
        raise ApiError(422, "invalid_field", f"field {key!r}: {exc}") from exc


def _decode_mask(blob: bytes, key: str) -> np.ndarray:
    """A mask PNG may be indexed (nonzero class) or grayscale (nonzero)."""
    try:
        return png_bytes_to_labels(blob).labels > 0
    except GridFormatError:
        pass
    try:
        return png_bytes_to_grid(blob).data[:, :, 0] > 0
    except GridFormatError as exc:
        raise ApiError(422, "invalid_field", f"field {key!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Application


def create_app(root=None, studio: Studio | None = None) -> FastAPI:
    """Build the service around one project root (or an existing Studio)."""
    if studio is None:
        if root is None:
            raise ValueError("create_app needs a project root or a Studio")
        studio = Studio(root)

    app = FastAPI(title="texturekit studio")
    app.state.studio = studio

    @app.exception_handler(ApiError)
    async def _on_api_error(_request: Request, exc: ApiError) -> JSONResponse:
        return exc.response()

    @app.exception_handler(TextureKitError)
    async def _on_kit_error(_request: Request, exc: TextureKitError) -> JSONResponse:
        missing = getattr(exc, "missing_prerequisite", None)
        status = 409 if missing else 422
        return ApiError(status, _error_code(exc), str(exc), missing).response()

    def _project_payload(project: Project) -> dict:
        images = {
            image_id: {"kind": entry["kind"], "artifacts": sorted(entry["artifacts"])}
            for image_id, entry in project.index["images"].items()
        }
        return {
            "id": project.id,
            "k": project.config.k,
            "denoiser": project.config.denoiser,
            "seed": project.config.seed,
            "images": images,
            "stages": project.index["stages"],
        }

    def _submit(project: Project, stage: str, params: dict) -> dict:
        try:
            job = run_stage(project, stage, studio.manager, params)
        except StageBusyError as exc:
            raise ApiError(409, "stage_busy", str(exc)) from exc
        except ProjectError as exc:
            if exc.missing_prerequisite:
                raise ApiError(
                    409, _error_code(exc), str(exc), exc.missing_prerequisite
                ) from exc
            raise ApiError(422, _error_code(exc), str(exc)) from exc
        return job.to_dict()

    def _require_image(project: Project, body: dict) -> str:
        image_id = _expect_str(body, "image", required=True)
        if not project.has_image(image_id):
            raise ApiError(404, "unknown_image", f"no image {image_id!r} in project {project.id!r}")
        return image_id

    def _edit_params(project: Project, body: dict) -> dict:
        image_id = _require_image(project, body)
        labels = _decode_labels(_decode_png_field(body, "labels_png_b64", required=True), "labels_png_b64")
        mask = _decode_mask(_decode_png_field(body, "mask_png_b64", required=True), "mask_png_b64")
        image = project.load_image(image_id)
        if labels.labels.shape != (image.h, image.w):
            raise ApiError(
                422,
                "invalid_field",
                f"labels are {labels.labels.shape}, image {image_id!r} is {(image.h, image.w)}",
            )
        if mask.shape != (image.h, image.w):
            raise ApiError(
                422,
                "invalid_field",
                f"mask is {mask.shape}, image {image_id!r} is {(image.h, image.w)}",
            )
        params = {"image": image_id, "labels": labels, "mask": mask}
        steps = _expect_int(body, "steps")
        if steps is not None:
            params["steps"] = steps
        return params

    def _synth_params(body: dict) -> dict:
        params = {
            "height": _expect_int(body, "height", required=True),
            "width": _expect_int(body, "width", required=True),
        }
        blob = _decode_png_field(body, "labels_png_b64")
        if blob is not None:
            params["labels"] = _decode_labels(blob, "labels_png_b64").labels
        steps = _expect_int(body, "steps")
        if steps is not None:
            params["steps"] = steps
        return params

    def _transfer_params(project: Project, body: dict) -> dict:
        image_id = _require_image(project, body)
        labels = _decode_labels(_decode_png_field(body, "labels_png_b64", required=True), "labels_png_b64")
        params = {"image": image_id, "labels": labels}
        mask_blob = _decode_png_field(body, "mask_png_b64")
        if mask_blob is not None:
            params["mask"] = _decode_mask(mask_blob, "mask_png_b64")
        steps = _expect_int(body, "steps")
        if steps is not None:
            params["steps"] = steps
        return params

    def _stage_params(project: Project, stage: str, body: dict) -> dict:
        if stage == "detect":
            params = {}
        elif stage == "segment":
            params = {}
            k = _expect_int(body, "k")
            if k is not None:
                params["k"] = k
        elif stage == "invert":
            params = {"image": _require_image(project, body)}
            steps = _expect_int(body, "steps")
            if steps is not None:
                params["steps"] = steps
        elif stage == "edit":
            params = _edit_params(project, body)
        elif stage in ("synth", "tile"):
            params = _synth_params(body)
            if stage == "synth" and isinstance(body.get("tileable"), bool):
                params["tileable"] = body["tileable"]
        elif stage == "transfer":
            params = _transfer_params(project, body)
        else:  # pragma: no cover - guarded by the route
            raise ApiError(404, "unknown_stage", f"no stage {stage!r}")
        seed = _expect_int(body, "seed")
        if seed is not None:
            params["seed"] = seed
        return params

    @app.post("/projects", status_code=201)
    async def create_project(request: Request):
        body = await _json_object(request)
        project_id = _expect_str(body, "id")
        overrides = body.get("config", {})
        if not isinstance(overrides, dict):
            raise ApiError(422, "invalid_field", "field 'config' must be an object")
        overrides = dict(overrides)
        for key in ("k", "seed"):
            value = _expect_int(body, key)
            if value is not None:
                overrides[key] = value
        denoiser = _expect_str(body, "denoiser")
        if denoiser is not None:
            overrides["denoiser"] = denoiser
        if project_id is not None and (studio.root / project_id).exists():
            raise ApiError(409, "project_exists", f"project {project_id!r} already exists")
        project_id = project_id or studio.allocate_project_id()
        try:
            project = Project.create(studio.root, project_id, overrides=overrides)
        except ProjectError as exc:
            raise ApiError(422, "invalid_config", str(exc)) from exc
        images_dir = _expect_str(body, "images_dir")
        if images_dir is not None:
            _load_images_dir(project, images_dir)
        studio.register(project)
        return _project_payload(project)

    @app.get("/projects/{project_id}")
    async def get_project(project_id: str):
        return _project_payload(studio.project(project_id))

    @app.post("/projects/{project_id}/stages/{stage}")
    async def post_stage(project_id: str, stage: str, request: Request):
        project = studio.project(project_id)
        if stage not in STAGES:
            raise ApiError(404, "unknown_stage", f"no stage {stage!r}")
        body = await _json_object(request, allow_empty=True)
        return _submit(project, stage, _stage_params(project, stage, body))

    @app.get("/jobs/{job_id}")
    async def get_job(job_id: str):
        job = studio.manager.get(job_id)
        if job is None:
            raise ApiError(404, "unknown_job", f"no job {job_id!r}")
        return job.to_dict()

    @app.get("/projects/{project_id}/images/{image_id}/{artifact}")
    async def get_artifact(project_id: str, image_id: str, artifact: str):
        project = studio.project(project_id)
        if not project.has_image(image_id):
            raise ApiError(404, "unknown_image", f"no image {image_id!r} in project {project_id!r}")
        if artifact not in _ARTIFACTS:
            raise ApiError(404, "unknown_artifact", f"no artifact kind {artifact!r}")
        try:
            path = project.artifact_path(image_id, artifact)
        except ProjectError as exc:
            raise ApiError(404, "missing_artifact", str(exc), exc.missing_prerequisite) from exc
        if artifact in ("mask", "labels"):
            blob = path.read_bytes()
        elif artifact == "scores":
            blob = grid_to_png_bytes(_normalized(read_grid(path)))
        else:
            blob = grid_to_png_bytes(read_grid(path))
        return Response(content=blob, media_type="image/png")

    @app.post("/projects/{project_id}/edit")
    async def post_edit(project_id: str, request: Request):
        project = studio.project(project_id)
        body = await _json_object(request)
        params = _edit_params(project, body)
        seed = _expect_int(body, "seed")
        if seed is not None:
            params["seed"] = seed
        return _submit(project, "edit", params)

    @app.post("/projects/{project_id}/synthesize")
    async def post_synthesize(project_id: str, request: Request):
        project = studio.project(project_id)
        body = await _json_object(request)
        tileable = body.get("tileable", False)
        if not isinstance(tileable, bool):
            raise ApiError(422, "invalid_field", "field 'tileable' must be a boolean")
        params = _synth_params(body)
        seed = _expect_int(body, "seed")
        if seed is not None:
            params["seed"] = seed
        return _submit(project, "tile" if tileable else "synth", params)

    return app


def _load_images_dir(project: Project, images_dir: str) -> None:
    folder = Path(images_dir)
    if not folder.is_dir():
        raise ApiError(422, "invalid_field", f"images_dir {images_dir!r} is not a directory")
    paths = sorted(p for p in folder.iterdir() if p.suffix in (".png", ".txf1"))
    if not paths:
        raise ApiError(422, "invalid_field", f"images_dir {images_dir!r} has no .png or .txf1 files")
    for path in paths:
        try:
            project.add_image(read_grid(path), image_id=path.stem)
        except (GridFormatError, ProjectError) as exc:
            raise ApiError(422, "invalid_field", f"{path.name}: {exc}") from exc


def _normalized(grid: Grid) -> Grid:
    """Min-max rescale so score maps render on the full PNG range."""
    data = grid.data.astype(np.float64)
    low = float(data.min())
    high = float(data.max())
    if high > low:
        data = (data - low) / (high - low)
    else:
        data = np.zeros_like(data)
    return Grid(data)


def _error_code(exc: TextureKitError) -> str:
    return _snake_case(type(exc).__name__)
