"""Probability-flow ODE machinery: sigma ladders, denoisers, guided samplers.

The engine standardizes on the direction convention dz/dsigma = eps with
eps = (z - D(z; sigma)) / sigma, where D is a denoiser's posterior-mean
estimate. Samplers integrate that ODE down a decreasing sigma ladder and
stay agnostic to how a denoiser is built; any preconditioning is the
denoiser's private concern.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GridFormatError, NoExemplarSupportError, SamplerError
from .grid import Grid, LabelMap, resample_labels

DEFAULT_SIGMA_MIN = 0.002
DEFAULT_SIGMA_MAX = 80.0
DEFAULT_RHO = 7.0
DEFAULT_GAMMA = 4.0


def _as_field(z) -> np.ndarray:
    """Coerce a Grid or array to a float64 (H, W, C) field."""
    data = z.data if isinstance(z, Grid) else np.asarray(z)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise GridFormatError(f"expected an (H, W, C) field, got shape {data.shape}")
    return data.astype(np.float64, copy=False)


def _fit_condition(cond, h: int, w: int) -> np.ndarray | None:
    """Nearest-resample a label condition onto the sampler's pixel grid."""
    if cond is None:
        return None
    lm = cond if isinstance(cond, LabelMap) else LabelMap(np.asarray(cond))
    if lm.labels.shape != (h, w):
        lm = resample_labels(lm, h, w, mode="nearest")
    return lm.labels


@dataclass(frozen=True)
class SigmaSchedule:
    """Noise-level ladder sigma_0 > sigma_1 > ... > sigma_N = 0."""

    sigmas: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1


def build_schedule(
    n: int,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    sigma_max: float = DEFAULT_SIGMA_MAX,
    rho: float = DEFAULT_RHO,
) -> SigmaSchedule:
    """Power-interpolated ladder of n positive levels, then an exact zero.

    Levels follow sigma_i = (a + (i/(n-1))(b - a))^rho with a,b the 1/rho
    powers of sigma_max and sigma_min, so both endpoints are hit exactly.
    """
    if n < 1:
        raise SamplerError("schedule needs at least one step")
    if sigma_min >= sigma_max:
        raise SamplerError(
            f"sigma_min must be below sigma_max, got {sigma_min} >= {sigma_max}"
        )
    if sigma_min <= 0:
        raise SamplerError("sigma_min must be positive")
    if n == 1:
        ladder = np.array([sigma_max], dtype=np.float64)
    else:
        top = sigma_max ** (1.0 / rho)
        bottom = sigma_min ** (1.0 / rho)
        t = np.arange(n, dtype=np.float64) / (n - 1)
        ladder = (top + t * (bottom - top)) ** rho
        ladder[0] = sigma_max
        ladder[-1] = sigma_min
    sigmas = np.append(ladder, 0.0)
    return SigmaSchedule(
        sigmas=sigmas, sigma_min=sigma_min, sigma_max=sigma_max, rho=rho
    )


class Denoiser(Protocol):
    """Direction estimate eps(z, c; sigma) such that dz/dsigma = eps."""

    def eval(self, z, cond, sigma: float) -> np.ndarray: ...


class GaussianAnalyticDenoiser:
    """Exact slope for N(mu, s^2) data: eps = sigma (z - mu) / (s^2 + sigma^2).

    Serves as a closed-form oracle: the ODE it induces is linear, so
    trajectories and endpoint statistics are known exactly.
    """

    def __init__(self, mu=0.0, s: float = 1.0):
        self.mu = mu.data if isinstance(mu, Grid) else mu
        self.s = float(s)

    def eval(self, z, cond, sigma: float) -> np.ndarray:
        field = _as_field(z)
        if sigma == 0.0:
            return np.zeros_like(field)
        return sigma * (field - self.mu) / (self.s**2 + sigma**2)

    def solve_exact(self, z, sigma_0: float) -> np.ndarray:
        """Closed-form ODE endpoint x(0) = mu + (x(sigma_0) - mu) s / sqrt(s^2 + sigma_0^2)."""
        field = _as_field(z)
        shrink = self.s / np.sqrt(self.s**2 + sigma_0**2)
        return self.mu + (field - self.mu) * shrink


class EchoDenoiser:
    """Test denoiser with eps = z / sigma, i.e. D(z; sigma) = 0 identically."""

    def eval(self, z, cond, sigma: float) -> np.ndarray:
        field = _as_field(z)
        if sigma == 0.0:
            return np.zeros_like(field)
        return field / sigma


class ExemplarPatchDenoiser:
    """Nonparametric label-conditioned denoiser over exemplar patches.

    D(z; sigma) at each pixel is a softmax-weighted average of exemplar
    patch centers, weighted by exp(-|z_patch - x_patch|^2 / (2 (sigma^2 +
    bandwidth^2))) over candidates whose center label equals the condition
    at that pixel (all candidates when unconditioned). The sigma term makes
    the weighting the exact posterior mean of a discrete patch mixture
    under noise level sigma; the bandwidth floor keeps the sigma -> 0 limit
    finite while still concentrating on the nearest patch.
    """

    def __init__(
        self,
        exemplars: Sequence[tuple],
        patch: int = 7,
        bandwidth: float = 0.05,
        stride: int = 1,
    ):
        if not exemplars:
            raise NoExemplarSupportError("exemplar set is empty")
        if patch % 2 == 0 or patch < 1:
            raise GridFormatError(f"patch must be odd and positive, got {patch}")
        if bandwidth <= 0:
            raise GridFormatError("bandwidth must be positive")
        self.patch = patch
        self.bandwidth = float(bandwidth)
        flats = []
        centers = []
        labels = []
        channels = None
        for image, label_map in exemplars:
            img = _as_field(image)
            if channels is None:
                channels = img.shape[2]
            elif img.shape[2] != channels:
                raise GridFormatError("exemplars must share a channel count")
            lab = (
                label_map.labels
                if isinstance(label_map, LabelMap)
                else np.asarray(label_map)
            )
            if lab.shape != img.shape[:2]:
                raise GridFormatError(
                    f"label map {lab.shape} does not cover image {img.shape[:2]}"
                )
            flat, cent = self._extract(img, stride)
            flats.append(flat)
            centers.append(cent)
            labels.append(lab[::stride, ::stride].reshape(-1))
        self.channels = channels
        self._flat = np.concatenate(flats, axis=0)
        self._centers = np.concatenate(centers, axis=0)
        self._labels = np.concatenate(labels, axis=0)
        self._flat_sq = np.einsum("ij,ij->i", self._flat, self._flat)

    def _extract(self, img: np.ndarray, stride: int):
        pad = self.patch // 2
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        windows = sliding_window_view(padded, (self.patch, self.patch), axis=(0, 1))
        windows = windows[::stride, ::stride]
        flat = windows.reshape(-1, img.shape[2] * self.patch * self.patch)
        cent = img[::stride, ::stride].reshape(-1, img.shape[2])
        return flat.astype(np.float64), cent.astype(np.float64)

    def denoise(self, z, cond, sigma: float) -> np.ndarray:
        """Posterior-mean estimate D(z; sigma) per pixel."""
        field = _as_field(z)
        if field.shape[2] != self.channels:
            raise GridFormatError(
                f"state has {field.shape[2]} channels, exemplars have {self.channels}"
            )
        h, w, c = field.shape
        cond_labels = _fit_condition(cond, h, w)
        pad = self.patch // 2
        padded = np.pad(field, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        windows = sliding_window_view(padded, (self.patch, self.patch), axis=(0, 1))
        rows = windows.reshape(h * w, c * self.patch * self.patch)
        scale = 2.0 * (sigma * sigma + self.bandwidth * self.bandwidth)
        out = np.empty((h * w, c), dtype=np.float64)
        if cond_labels is None:
            groups = [(None, np.arange(h * w))]
        else:
            flat_cond = cond_labels.reshape(-1)
            groups = [
                (value, np.flatnonzero(flat_cond == value))
                for value in np.unique(flat_cond)
            ]
        for value, pixel_idx in groups:
            if value is None:
                cand = slice(None)
                n_cand = len(self._flat)
            else:
                cand = np.flatnonzero(self._labels == value)
                n_cand = len(cand)
                if n_cand == 0:
                    raise NoExemplarSupportError(
                        f"label {value} has no exemplar support"
                    )
            cand_flat = self._flat[cand]
            cand_sq = self._flat_sq[cand]
            sub = rows[pixel_idx]
            d2 = (
                np.einsum("ij,ij->i", sub, sub)[:, None]
                + cand_sq[None, :]
                - 2.0 * (sub @ cand_flat.T)
            )
            np.clip(d2, 0.0, None, out=d2)
            logits = -d2 / scale
            logits -= logits.max(axis=1, keepdims=True)
            weights = np.exp(logits)
            weights /= weights.sum(axis=1, keepdims=True)
            out[pixel_idx] = weights @ self._centers[cand]
        return out.reshape(h, w, c)

    def eval(self, z, cond, sigma: float) -> np.ndarray:
        field = _as_field(z)
        if sigma == 0.0:
            return np.zeros_like(field)
        return (field - self.denoise(field, cond, sigma)) / sigma


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance strength; the null condition token is None."""

    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.gamma < 0:
            raise SamplerError(f"guidance scale must be nonnegative, got {self.gamma}")


def cfg(denoiser: Denoiser, z, cond, sigma: float, gamma: float) -> np.ndarray:
    """Guided direction eps_null + gamma (eps_cond - eps_null).

    Always makes exactly two denoiser evaluations; gamma 0 and 1 return the
    respective evaluation unchanged so the boundary cases are exact.
    """
    if gamma < 0:
        raise SamplerError(f"guidance scale must be nonnegative, got {gamma}")
    eps_null = np.asarray(denoiser.eval(z, None, sigma), dtype=np.float64)
    eps_cond = np.asarray(denoiser.eval(z, cond, sigma), dtype=np.float64)
    if gamma == 0.0:
        return eps_null
    if gamma == 1.0:
        return eps_cond
    return eps_null + gamma * (eps_cond - eps_null)


def _resolve_eps(denoiser, z, cond, sigma, guidance) -> np.ndarray:
    if guidance is not None and cond is not None:
        return cfg(denoiser, z, cond, sigma, guidance.gamma)
    return np.asarray(denoiser.eval(z, cond, sigma), dtype=np.float64)


def sample_euler(
    denoiser: Denoiser,
    z_init,
    cond,
    schedule: SigmaSchedule,
    guidance: GuidanceConfig | None = None,
    history: list | None = None,
) -> np.ndarray:
    """First-order solve down the ladder: z += (sigma_next - sigma) eps.

    When a list is passed as history, the per-step slope is appended so the
    trajectory can be replayed exactly with the same first-order update.
    """
    z = _as_field(z_init).astype(np.float64, copy=True)
    cond_labels = _fit_condition(cond, z.shape[0], z.shape[1])
    sigmas = schedule.sigmas
    for k in range(schedule.n_steps):
        eps = _resolve_eps(denoiser, z, cond_labels, float(sigmas[k]), guidance)
        z = z + (sigmas[k + 1] - sigmas[k]) * eps
        if not np.all(np.isfinite(z)):
            raise SamplerError(f"non-finite state after Euler step {k}")
        if history is not None:
            history.append(eps)
    return z


def sample_heun(
    denoiser: Denoiser,
    z_init,
    cond,
    schedule: SigmaSchedule,
    guidance: GuidanceConfig | None = None,
    history: list | None = None,
    corrector_iters: int = 2,
) -> np.ndarray:
    """Second-order solve: slopes averaged at both step endpoints.

    Each step takes an Euler predictor, then refines the endpoint slope by
    fixed-point passes on the trapezoid update (corrector_iters of them).
    A single pass is the textbook explicit corrector; the default second
    pass re-evaluates the endpoint slope at the corrected state, which
    roughly halves the per-step bias on stiff low-sigma stretches of the
    default ladder. The final step lands on sigma = 0 where the endpoint
    slope is undefined, so that step falls back to plain Euler. Recorded
    history entries are the effective slopes, exact for first-order replay.
    """
    if corrector_iters < 1:
        raise SamplerError("corrector_iters must be at least 1")
    z = _as_field(z_init).astype(np.float64, copy=True)
    cond_labels = _fit_condition(cond, z.shape[0], z.shape[1])
    sigmas = schedule.sigmas
    for k in range(schedule.n_steps):
        sigma = float(sigmas[k])
        sigma_next = float(sigmas[k + 1])
        eps_here = _resolve_eps(denoiser, z, cond_labels, sigma, guidance)
        if sigma_next > 0.0:
            slope = eps_here
            current = z + (sigma_next - sigma) * eps_here
            for _ in range(corrector_iters):
                eps_there = _resolve_eps(
                    denoiser, current, cond_labels, sigma_next, guidance
                )
                slope = 0.5 * (eps_here + eps_there)
                current = z + (sigma_next - sigma) * slope
            z = current
        else:
            slope = eps_here
            z = z + (sigma_next - sigma) * eps_here
        if not np.all(np.isfinite(z)):
            raise SamplerError(f"non-finite state after Heun step {k}")
        if history is not None:
            history.append(slope)
    return z
