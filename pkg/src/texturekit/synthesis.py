"""Noise uniformization, shifted-window denoising, and tileable synthesis.

Large outputs never need a full-size denoiser call: the field is covered by
window-sized crops each step, the predicted directions are averaged where
crops overlap, and one solver step is applied to the whole field. Wrapping
the crops around the edges makes the result tile seamlessly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    Denoiser,
    GuidanceConfig,
    SigmaSchedule,
    _fit_condition,
    _resolve_eps,
    build_schedule,
)
from .errors import GridFormatError, PlanError, SamplerError
from .grid import Grid, Rng, _nearest_index, lanczos_lowpass

DEFAULT_CUTOFF = 0.1
DEFAULT_COARSE = 32
DEFAULT_WINDOW = 64
DEFAULT_OVERLAP_MIN = 32


def _as_field3(value) -> np.ndarray:
    if isinstance(value, NoiseField):
        value = value.tensor
    data = value.data if isinstance(value, Grid) else np.asarray(value)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise GridFormatError(f"expected an (H, W, C) field, got shape {data.shape}")
    return data.astype(np.float64, copy=False)


@dataclass
class NoiseField:
    """White noise, or the uniformized field derived from it.

    A uniformized field also carries its decomposition: the high-frequency
    part of the original noise and the injected low-frequency component, so
    callers can check that uniformization touched only the low band.
    """

    tensor: Grid
    prototype: bool = False
    highpass: np.ndarray | None = None
    injected_lf: np.ndarray | None = None

    @classmethod
    def white(cls, rng: Rng, h: int, w: int, c: int = 1, prototype: bool = False):
        return cls(tensor=Grid(rng.normal((h, w, c))), prototype=prototype)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def validate_white(self) -> None:
        """Sample mean of i.i.d. standard normals stays within 5 sigma."""
        data = self.tensor.data
        bound = 5.0 / math.sqrt(data.size)
        mean = float(data.mean())
        if abs(mean) > bound:
            raise GridFormatError(
                f"sample mean {mean:.4f} exceeds the 5-sigma bound {bound:.4f}"
            )


def uniformize(
    w,
    p,
    f_c: float = DEFAULT_CUTOFF,
    coarse: int = DEFAULT_COARSE,
    rng: Rng | None = None,
    boundary: str = "mirror",
) -> NoiseField:
    """Replace the noise's low band with shuffled prototype low-band sites.

    out = w + (injected - blur(w)), computed in exactly that order so the
    two blur terms cancel bit for bit when the injected component equals
    blur(w). The injected component is built per prototype-sized tile: the
    blurred prototype is decimated to a coarse grid, the coarse sites are
    permuted independently for each tile (channels move jointly), and the
    permuted grid is replicated back up by nearest indexing, which keeps
    the multiset of coarse values intact.

    For tileable outputs pass boundary="wrap": with a mirror boundary the
    high-frequency residual carries edge artifacts one filter radius deep,
    which would break the statistical continuation across the seam.
    """
    w_field = _as_field3(w)
    p_field = _as_field3(p)
    if w_field.shape[2] != p_field.shape[2]:
        raise GridFormatError(
            f"noise has {w_field.shape[2]} channels, prototype {p_field.shape[2]}"
        )
    hp, wp, channels = p_field.shape
    if coarse < 1 or coarse > hp or coarse > wp:
        raise GridFormatError(
            f"coarse grid {coarse} does not fit the prototype {(hp, wp)}"
        )
    big_h, big_w = w_field.shape[:2]
    blur_w = lanczos_lowpass(Grid(w_field), f_c, boundary=boundary).data
    blur_p = lanczos_lowpass(Grid(p_field), f_c, boundary=boundary).data
    down_r = _nearest_index(coarse, hp)
    down_c = _nearest_index(coarse, wp)
    sites = blur_p[down_r][:, down_c].reshape(coarse * coarse, channels)
    up_r = _nearest_index(hp, coarse)
    up_c = _nearest_index(wp, coarse)
    injected = np.empty_like(w_field)
    for ty in range(0, big_h, hp):
        for tx in range(0, big_w, wp):
            if rng is None:
                order = np.arange(coarse * coarse)
            else:
                order = rng.permutation(coarse * coarse)
            tile = sites[order].reshape(coarse, coarse, channels)[up_r][:, up_c]
            th = min(hp, big_h - ty)
            tw = min(wp, big_w - tx)
            injected[ty : ty + th, tx : tx + tw] = tile[:th, :tw]
    out = w_field + (injected - blur_w)
    return NoiseField(
        tensor=Grid(out),
        prototype=False,
        highpass=w_field - blur_w,
        injected_lf=injected,
    )


@dataclass(frozen=True)
class WindowPlan:
    """Per-step window origin lattices covering an H x W field."""

    h: int
    w: int
    window: int
    overlap_min: int
    overlap_max: int
    wrap: bool
    rows: tuple[tuple[int, ...], ...]
    cols: tuple[tuple[int, ...], ...]

    @property
    def n_steps(self) -> int:
        return len(self.rows)

    def origins(self, step: int):
        """Row-major (y, x) origins for one step; the reduction order."""
        for y in self.rows[step]:
            for x in self.cols[step]:
                yield y, x


def _axis_origins(size: int, window: int, stride: int, wrap: bool, delta: int):
    if wrap:
        if window >= size:
            return ((-delta) % size,)
        count = math.ceil(size / stride)
        return tuple((k * stride - delta) % size for k in range(count))
    origins = [0]
    pos = delta
    while pos <= size - window:
        if pos != origins[-1]:
            origins.append(pos)
        pos += stride
    if origins[-1] != size - window:
        origins.append(size - window)
    return tuple(origins)


def plan_windows(
    h: int,
    w: int,
    window: int = DEFAULT_WINDOW,
    overlap_min: int = DEFAULT_OVERLAP_MIN,
    wrap: bool = False,
    rng: Rng | None = None,
    steps: int = 1,
) -> WindowPlan:
    """Jittered covering lattices, one per solver step.

    Each step shifts the whole lattice by one offset per axis, drawn
    uniformly from [0, overlap_min / 2); without wrapping, the first and
    last windows stay pinned to the field edges so coverage never leaks,
    and the offset is additionally kept below the stride so the gap from
    the pinned edge to the first shifted window never drops the overlap
    under overlap_min. A wrapped lattice is a pure rotation, so any offset
    preserves its spacings.
    """
    if h < 1 or w < 1:
        raise PlanError(f"field {h}x{w} must be at least 1x1")
    if window < 1:
        raise PlanError(f"window must be positive, got {window}")
    if overlap_min < 0 or overlap_min >= window:
        raise PlanError(
            f"overlap_min {overlap_min} must lie in [0, window {window})"
        )
    if steps < 1:
        raise PlanError(f"steps must be positive, got {steps}")
    if not wrap and (h < window or w < window):
        raise PlanError(
            f"field {h}x{w} is smaller than window {window}; enable wrap"
        )
    stride = window - overlap_min
    half = overlap_min // 2 if wrap else min(overlap_min // 2, stride)
    rows = []
    cols = []
    for _ in range(steps):
        dy = int(rng.integers(0, half)) if rng is not None and half > 0 else 0
        dx = int(rng.integers(0, half)) if rng is not None and half > 0 else 0
        rows.append(_axis_origins(h, window, stride, wrap, dy))
        cols.append(_axis_origins(w, window, stride, wrap, dx))
    return WindowPlan(
        h=h,
        w=w,
        window=window,
        overlap_min=overlap_min,
        overlap_max=window - 1,
        wrap=wrap,
        rows=tuple(rows),
        cols=tuple(cols),
    )


@dataclass
class SynthStats:
    """Observed memory and work figures for one multidiffusion run."""

    window_working_set_bytes: int = 0
    full_field_buffer_bytes: int = 0
    windows_evaluated: int = 0


def multidiffusion_sample(
    denoiser: Denoiser,
    z,
    cond,
    schedule: SigmaSchedule,
    plan: WindowPlan,
    guidance: GuidanceConfig | None = None,
    stats: SynthStats | None = None,
) -> Grid:
    """Overlapping-window solve: average window directions, step globally.

    Every step evaluates the denoiser once per window crop (wrapping the
    crop indices when the plan wraps), accumulates the predictions into a
    full-size sum/count pair in row-major window order, divides, and takes
    one first-order step on the whole field. Per-window memory stays
    bounded by the window size however large the field is.
    """
    state = _as_field3(z).astype(np.float64, copy=True)
    big_h, big_w = state.shape[:2]
    if (big_h, big_w) != (plan.h, plan.w):
        raise PlanError(
            f"plan covers {(plan.h, plan.w)}, field is {(big_h, big_w)}"
        )
    if plan.n_steps != schedule.n_steps:
        raise PlanError(
            f"plan has {plan.n_steps} steps, schedule has {schedule.n_steps}"
        )
    cond_labels = _fit_condition(cond, big_h, big_w)
    sigmas = schedule.sigmas
    sum_buf = np.zeros_like(state)
    count_buf = np.zeros((big_h, big_w, 1), dtype=np.float64)
    if stats is not None:
        stats.full_field_buffer_bytes = sum_buf.nbytes + count_buf.nbytes
    for k in range(schedule.n_steps):
        sigma = float(sigmas[k])
        sum_buf[:] = 0.0
        count_buf[:] = 0.0
        for y, x in plan.origins(k):
            row_idx = np.arange(y, y + plan.window)
            col_idx = np.arange(x, x + plan.window)
            if plan.wrap:
                row_idx %= big_h
                col_idx %= big_w
            crop = state[row_idx][:, col_idx]
            crop_cond = (
                cond_labels[row_idx][:, col_idx] if cond_labels is not None else None
            )
            eps = _resolve_eps(denoiser, crop, crop_cond, sigma, guidance)
            np.add.at(sum_buf, (row_idx[:, None], col_idx[None, :]), eps)
            np.add.at(count_buf, (row_idx[:, None], col_idx[None, :]), 1.0)
            if stats is not None:
                stats.windows_evaluated += 1
                working = crop.nbytes + eps.nbytes
                if crop_cond is not None:
                    working += crop_cond.nbytes
                stats.window_working_set_bytes = max(
                    stats.window_working_set_bytes, working
                )
        if not np.all(count_buf > 0):
            raise PlanError(f"step {k} leaves pixels uncovered")
        state = state + (sigmas[k + 1] - sigma) * (sum_buf / count_buf)
        if not np.all(np.isfinite(state)):
            raise SamplerError(f"non-finite state after windowed step {k}")
    return Grid(state)


def seam_report(image, alpha: float = 0.01) -> dict:
    """Do wrap-around finite differences look like interior ones?

    For each axis, the cross-boundary difference line (first minus last) is
    scored by its two-sample KS statistic against the pooled interior
    differences. The p-value is permutation-calibrated: every interior
    difference line is scored the same way, and the seam's p is the
    fraction of lines at least as extreme. Naive pooled-KS p-values are
    badly miscalibrated here because differences along a line are
    spatially correlated, which makes every single line, interior or seam,
    fluctuate more than an i.i.d. sample would.
    """
    from scipy.stats import ks_2samp

    data = _as_field3(image).mean(axis=2)
    report: dict = {}
    for name, axis in (("rows", 0), ("cols", 1)):
        rolled = data if axis == 0 else data.T
        seam = rolled[0, :] - rolled[-1, :]
        interior = np.diff(rolled, axis=0)
        pooled = interior.ravel()
        seam_stat = float(ks_2samp(seam, pooled).statistic)
        line_stats = [
            float(ks_2samp(interior[i], pooled).statistic)
            for i in range(interior.shape[0])
        ]
        worse = sum(1 for s in line_stats if s >= seam_stat)
        p_value = (1 + worse) / (1 + len(line_stats))
        report[name] = {
            "ks_statistic": seam_stat,
            "p_value": p_value,
            "interior_lines": len(line_stats),
        }
    report["alpha"] = alpha
    report["tileable"] = all(
        report[name]["p_value"] > alpha for name in ("rows", "cols")
    )
    return report


def tileable_synthesize(
    denoiser: Denoiser,
    h: int,
    w: int,
    cond=None,
    prototype_seed: int = 0,
    steps: int = 18,
    window: int = DEFAULT_WINDOW,
    overlap_min: int = DEFAULT_OVERLAP_MIN,
    channels: int = 1,
    guidance: GuidanceConfig | None = None,
    f_c: float = DEFAULT_CUTOFF,
    coarse: int = DEFAULT_COARSE,
    stats: SynthStats | None = None,
) -> Grid:
    """Seamlessly tiling synthesis: wrap-around windows on uniformized noise.

    The first window-sized tile of the freshly drawn noise acts as the
    low-frequency prototype for the whole field, so every tile shares one
    coarse statistic; the windows wrap at the edges, which is what makes
    opposite borders continue into each other.
    """
    rng = Rng(prototype_seed)
    noise = rng.derive("noise").normal((h, w, channels))
    proto = noise[: min(window, h), : min(window, w)]
    uniform = uniformize(
        noise, proto, f_c=f_c, coarse=coarse, rng=rng.derive("lf"), boundary="wrap"
    )
    plan = plan_windows(
        h,
        w,
        window=window,
        overlap_min=overlap_min,
        wrap=True,
        rng=rng.derive("plan"),
        steps=steps,
    )
    schedule = build_schedule(steps)
    z0 = schedule.sigma_max * uniform.data
    return multidiffusion_sample(
        denoiser, z0, cond, schedule, plan, guidance=guidance, stats=stats
    )
