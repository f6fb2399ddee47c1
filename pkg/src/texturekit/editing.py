"""Inversion with trajectory capture, noise-mixed regeneration, local edits.

Index conventions follow the schedule: position k runs down the ladder, so
k = 0 is the noisiest level sigma_max and k = N is the clean state at
sigma 0. The blend exponent in mix() counts the other way (i = N - k,
N at the noise end), so the stored directions dominate early steps and the
fresh conditioned directions take over as sigma shrinks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .diffusion import (
    Denoiser,
    GuidanceConfig,
    SigmaSchedule,
    build_schedule,
    cfg,
    sample_euler,
)
from .errors import GridFormatError, SamplerError, TrajectoryMissingError
from .grid import Grid, LabelMap, read_grid, resample_labels, write_grid

DEFAULT_ALPHA = 0.3
DEFAULT_GAMMA = 4.0
DEFAULT_FP_ITERS = 4
MIN_EDIT_PATCH = 442
TRANSFER_STEPS = 250


def _as_field(z) -> np.ndarray:
    data = z.data if isinstance(z, Grid) else np.asarray(z)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise GridFormatError(f"expected an (H, W, C) field, got shape {data.shape}")
    return data.astype(np.float64, copy=False)


def _as_mask(mask, shape: tuple[int, int]) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != shape:
        raise GridFormatError(f"mask shape {m.shape} does not match field {shape}")
    return m.astype(bool)


def _fit_labels(cond, h: int, w: int):
    if cond is None:
        return None
    lm = cond if isinstance(cond, LabelMap) else LabelMap(np.asarray(cond))
    if lm.labels.shape != (h, w):
        lm = resample_labels(lm, h, w, mode="nearest")
    return lm


@dataclass
class Trajectory:
    """A captured solve: per-step directions plus the noise-end state.

    eps_history[k] is the direction used (or recovered) at ladder position
    k, so the first-order replay z_{k+1} = z_k + (sigma_{k+1} - sigma_k) *
    eps_history[k], starting from z_n, retraces the solve.
    """

    schedule: SigmaSchedule
    eps_history: np.ndarray
    z_n: np.ndarray
    provenance: str = "inversion"

    def __post_init__(self):
        self.eps_history = np.asarray(self.eps_history, dtype=np.float64)
        self.z_n = np.asarray(self.z_n, dtype=np.float64)
        n = self.schedule.n_steps
        if self.eps_history.shape[0] != n:
            raise GridFormatError(
                f"history has {self.eps_history.shape[0]} entries for {n} steps"
            )
        if self.eps_history.shape[1:] != self.z_n.shape:
            raise GridFormatError(
                f"history entries {self.eps_history.shape[1:]} do not match "
                f"state {self.z_n.shape}"
            )
        if self.provenance not in ("inversion", "generation"):
            raise GridFormatError(f"unknown provenance {self.provenance!r}")

    @property
    def n_steps(self) -> int:
        return self.schedule.n_steps

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.z_n.shape[0], self.z_n.shape[1]

    def crop(self, y0: int, y1: int, x0: int, x1: int) -> "Trajectory":
        """Spatial slice; sigma levels are position-independent and shared."""
        return Trajectory(
            schedule=self.schedule,
            eps_history=self.eps_history[:, y0:y1, x0:x1, :],
            z_n=self.z_n[y0:y1, x0:x1, :],
            provenance=self.provenance,
        )


@dataclass
class EditRequest:
    """What to change: target labels, where changes may land, blend knobs."""

    condition: LabelMap
    edit_mask: np.ndarray
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    steps: int | None = None
    background_mode: str = "replay"

    def __post_init__(self):
        if self.alpha <= 0:
            raise GridFormatError(f"alpha must be positive, got {self.alpha}")
        if self.background_mode not in ("replay", "literal_zero_factor"):
            raise GridFormatError(f"unknown background mode {self.background_mode!r}")
        labels = (
            self.condition.labels
            if isinstance(self.condition, LabelMap)
            else np.asarray(self.condition)
        )
        mask = np.asarray(self.edit_mask)
        if labels.shape != mask.shape:
            raise GridFormatError(
                f"mask {mask.shape} and condition {labels.shape} must share shape"
            )


def invert(
    denoiser: Denoiser,
    x_0,
    steps: int,
    fp_iters: int = DEFAULT_FP_ITERS,
    schedule: SigmaSchedule | None = None,
) -> Trajectory:
    """Walk the state up the ladder by fixed-point Euler steps.

    Each step solves the implicit relation z_k = z_{k+1} + (sigma_k -
    sigma_{k+1}) eps(z_k; sigma_k) by fp_iters substitution passes, seeding
    with z_{k+1}. The direction is evaluated at the target level sigma_k:
    evaluating at the source level would be degenerate on the first step,
    where the source sits at sigma 0. The direction from the final pass is
    stored, so the last update and the history agree bit for bit.
    """
    if steps < 1:
        raise SamplerError("inversion needs at least one step")
    if fp_iters < 1:
        raise SamplerError("fp_iters must be at least 1")
    sched = schedule if schedule is not None else build_schedule(steps)
    if sched.n_steps != steps:
        raise SamplerError(
            f"schedule has {sched.n_steps} steps, caller asked for {steps}"
        )
    z = _as_field(x_0).astype(np.float64, copy=True)
    sigmas = sched.sigmas
    history = np.empty((steps,) + z.shape, dtype=np.float64)
    for k in range(steps - 1, -1, -1):
        gap = float(sigmas[k] - sigmas[k + 1])
        level = float(sigmas[k])
        estimate = z
        eps = None
        for _ in range(fp_iters):
            eps = np.asarray(denoiser.eval(estimate, None, level), dtype=np.float64)
            estimate = z + gap * eps
        history[k] = eps
        z = estimate
        if not np.all(np.isfinite(z)):
            raise SamplerError(f"non-finite state while inverting to level {k}")
    return Trajectory(
        schedule=sched, eps_history=history, z_n=z, provenance="inversion"
    )


def record_generation(
    denoiser: Denoiser,
    z_noise,
    schedule: SigmaSchedule,
    cond=None,
    guidance: GuidanceConfig | None = None,
) -> tuple[np.ndarray, Trajectory]:
    """First-order generation that also returns its own exact trajectory."""
    history: list[np.ndarray] = []
    image = sample_euler(denoiser, z_noise, cond, schedule, guidance, history=history)
    traj = Trajectory(
        schedule=schedule,
        eps_history=np.stack(history, axis=0),
        z_n=_as_field(z_noise).astype(np.float64, copy=True),
        provenance="generation",
    )
    return image, traj


def reconstruct(traj: Trajectory) -> np.ndarray:
    """Replay the stored directions from the noise end; no denoiser needed."""
    z = traj.z_n.copy()
    sigmas = traj.schedule.sigmas
    for k in range(traj.n_steps):
        z = z + (sigmas[k + 1] - sigmas[k]) * traj.eps_history[k]
    return z


def mix(eps_hat: np.ndarray, eps: np.ndarray, i: int, n: int, alpha: float) -> np.ndarray:
    """Blend fresh and stored directions: eps_hat + (eps - eps_hat)(i/n)^alpha.

    The boundary factors are applied exactly: i = n returns the stored
    direction and i = 0 the fresh one, bit for bit.
    """
    if eps_hat.shape != eps.shape:
        raise GridFormatError(
            f"direction shapes differ: {eps_hat.shape} vs {eps.shape}"
        )
    if not 0 <= i <= n:
        raise GridFormatError(f"blend index {i} outside 0..{n}")
    if i == n:
        return eps.copy()
    if i == 0:
        return eps_hat.copy()
    factor = (i / n) ** alpha
    return eps_hat + (eps - eps_hat) * factor


def regenerate_with_edit(denoiser: Denoiser, traj: Trajectory, req: EditRequest) -> np.ndarray:
    """Re-run the solve with guided directions blended into the stored ones.

    Inside the edit mask the blend factor decays as ((n - k) / n)^alpha, so
    early (high-sigma) steps keep the stored layout and late steps follow
    the new condition. Outside the mask the stored direction is replayed
    unchanged, which keeps background pixels on the original path; the
    literal_zero_factor mode instead applies a zero blend factor there,
    which hands the background to the fresh conditioned direction.
    """
    n = traj.n_steps
    if req.steps is not None and req.steps != n:
        raise ValueError(f"request wants {req.steps} steps, trajectory has {n}")
    h, w = traj.spatial_shape
    mask = np.asarray(req.edit_mask)
    if mask.shape != (h, w):
        raise GridFormatError(
            f"edit mask {mask.shape} does not cover trajectory field {(h, w)}"
        )
    mask = mask.astype(bool)
    cond = _fit_labels(req.condition, h, w)
    mask3 = mask[:, :, None]
    z = traj.z_n.copy()
    sigmas = traj.schedule.sigmas
    for k in range(n):
        stored = traj.eps_history[k]
        eps_hat = cfg(denoiser, z, cond, float(sigmas[k]), req.gamma)
        blended = mix(eps_hat, stored, n - k, n, req.alpha)
        if req.background_mode == "replay":
            direction = np.where(mask3, blended, stored)
        else:
            direction = np.where(mask3, blended, eps_hat)
        z = z + (sigmas[k + 1] - sigmas[k]) * direction
        if not np.all(np.isfinite(z)):
            raise SamplerError(f"non-finite state after edit step {k}")
    return z


def _patch_bounds(lo: int, hi: int, size: int, minimum: int) -> tuple[int, int]:
    """Grow the span [lo, hi) to at least `minimum`, clamped to [0, size)."""
    want = min(max(hi - lo, minimum), size)
    grow = want - (hi - lo)
    start = lo - grow // 2
    start = max(0, min(start, size - want))
    return start, start + want


def localized_edit(
    denoiser: Denoiser,
    traj: Trajectory,
    image: Grid,
    brushed_mask,
    new_labels: LabelMap,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    background_mode: str = "replay",
    min_patch: int = MIN_EDIT_PATCH,
) -> Grid:
    """Regenerate only a bounding patch around the brushed pixels.

    The patch is the mask's bounding box grown to at least min_patch per
    axis, clamped to the image bounds rather than padded, because padding
    would fabricate trajectory data. The stored trajectory is sliced to the
    patch and the whole regenerated patch is composited back, so pixels
    outside the patch are untouched bit for bit.
    """
    field = _as_field(image)
    h, w = field.shape[:2]
    if traj.spatial_shape != (h, w):
        raise GridFormatError(
            f"trajectory field {traj.spatial_shape} does not match image {(h, w)}"
        )
    mask = _as_mask(brushed_mask, (h, w))
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return image
    y0, y1 = _patch_bounds(int(ys.min()), int(ys.max()) + 1, h, min_patch)
    x0, x1 = _patch_bounds(int(xs.min()), int(xs.max()) + 1, w, min_patch)
    patch_traj = traj.crop(y0, y1, x0, x1)
    labels = _fit_labels(new_labels, h, w)
    request = EditRequest(
        condition=LabelMap(labels.labels[y0:y1, x0:x1], labels.num_classes),
        edit_mask=mask[y0:y1, x0:x1],
        alpha=alpha,
        gamma=gamma,
        background_mode=background_mode,
    )
    edited = regenerate_with_edit(denoiser, patch_traj, request)
    out = field.astype(np.float64, copy=True)
    out[y0:y1, x0:x1, :] = edited
    return Grid(out)


def transfer_feature(
    denoiser: Denoiser,
    target_image: Grid,
    condition: LabelMap,
    mask=None,
    steps: int = TRANSFER_STEPS,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    fp_iters: int = DEFAULT_FP_ITERS,
    background_mode: str = "replay",
) -> np.ndarray:
    """Invert an out-of-distribution image, then regenerate under new labels.

    When no mask is given, every pixel with a positive condition label is
    editable; background pixels replay their inverted directions, which
    keeps the target's own appearance outside the requested features.
    """
    field = _as_field(target_image)
    h, w = field.shape[:2]
    labels = _fit_labels(condition, h, w)
    if mask is None:
        mask = labels.labels > 0
    traj = invert(denoiser, field, steps, fp_iters=fp_iters)
    request = EditRequest(
        condition=labels,
        edit_mask=np.asarray(mask, dtype=bool),
        alpha=alpha,
        gamma=gamma,
        background_mode=background_mode,
    )
    return regenerate_with_edit(denoiser, traj, request)


class TrajectoryStore:
    """Directory-backed trajectory persistence, one subdirectory per image.

    Layout: {image_id}/meta holds schedule parameters and provenance as
    JSON; eps_{k}.txf1 holds the direction at ladder position k; z_N.txf1
    holds the noise-end state. Tensors persist as float32 containers, so a
    load returns float64 arrays quantized to float32 precision.
    """

    def __init__(self, root):
        self.root = os.fspath(root)
        os.makedirs(self.root, exist_ok=True)

    def _dir(self, image_id: str) -> str:
        safe = str(image_id)
        if not safe or any(ch in safe for ch in "/\\") or safe.startswith("."):
            raise ValueError(f"bad image id {image_id!r}")
        return os.path.join(self.root, safe)

    def has(self, image_id: str) -> bool:
        return os.path.isfile(os.path.join(self._dir(image_id), "meta"))

    def save(self, image_id: str, traj: Trajectory) -> None:
        target = self._dir(image_id)
        os.makedirs(target, exist_ok=True)
        meta = {
            "n_steps": traj.n_steps,
            "sigma_min": traj.schedule.sigma_min,
            "sigma_max": traj.schedule.sigma_max,
            "rho": traj.schedule.rho,
            "provenance": traj.provenance,
        }
        for k in range(traj.n_steps):
            write_grid(
                os.path.join(target, f"eps_{k}.txf1"),
                Grid(traj.eps_history[k].astype(np.float32)),
            )
        write_grid(
            os.path.join(target, "z_N.txf1"), Grid(traj.z_n.astype(np.float32))
        )
        tmp = os.path.join(target, "meta.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        os.replace(tmp, os.path.join(target, "meta"))

    def load(self, image_id: str) -> Trajectory:
        target = self._dir(image_id)
        meta_path = os.path.join(target, "meta")
        if not os.path.isfile(meta_path):
            raise TrajectoryMissingError(
                f"no stored trajectory for {image_id!r}; invert the image first"
            )
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        schedule = build_schedule(
            int(meta["n_steps"]),
            sigma_min=float(meta["sigma_min"]),
            sigma_max=float(meta["sigma_max"]),
            rho=float(meta["rho"]),
        )
        history = np.stack(
            [
                read_grid(os.path.join(target, f"eps_{k}.txf1")).data.astype(
                    np.float64
                )
                for k in range(schedule.n_steps)
            ],
            axis=0,
        )
        z_n = read_grid(os.path.join(target, "z_N.txf1")).data.astype(np.float64)
        return Trajectory(
            schedule=schedule,
            eps_history=history,
            z_n=z_n,
            provenance=str(meta["provenance"]),
        )

    def delete(self, image_id: str) -> None:
        target = self._dir(image_id)
        if not os.path.isdir(target):
            return
        for name in os.listdir(target):
            os.unlink(os.path.join(target, name))
        os.rmdir(target)
