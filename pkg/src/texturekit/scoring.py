"""Anomaly scoring and adaptive thresholding for texture images.

Scoring measures how far each pixel's local patch statistics sit from the
dominant texture of an image set.  Thresholding turns score maps into masks
with a histogram split (Otsu) that is skew-corrected for heavy-tailed score
distributions and stabilized across images by a global floor: an image only
contributes mask pixels above both its own threshold and a consensus level
computed from every image's threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import DegenerateHistogramError
from .filters import FilterBank
from .grid import Grid

DEFAULT_BINS = 256
DEFAULT_BETA = 1.5
DEFAULT_PATCH = 7


def _binned_between_class(hist: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Between-class variance for every split after bin k (vectorized)."""
    counts = hist.astype(np.float64)
    total = counts.sum()
    w0 = np.cumsum(counts)
    m0 = np.cumsum(counts * centers)
    w1 = total - w0
    m_total = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=valid)
    mu1 = np.divide(m_total - m0, w1, out=np.zeros_like(m0), where=valid)
    var = w0 * w1 * (mu0 - mu1) ** 2
    var[~valid] = 0.0
    return var


def otsu_threshold(scores: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Histogram split maximizing between-class variance.

    Bins are uniform over [min, max].  The returned threshold is the center
    of the best split's bin.  Exact ties on the variance curve (plateaus from
    empty bins between the classes) resolve to the floor of the mean tied
    index, which lands on the lower of two tied bins.
    """
    vals = np.asarray(scores, dtype=np.float64).ravel()
    if vals.size == 0:
        raise DegenerateHistogramError("empty score map")
    lo = float(vals.min())
    hi = float(vals.max())
    if not (hi > lo):
        raise DegenerateHistogramError(
            "degenerate histogram: all scores equal, no split exists"
        )
    hist, _ = np.histogram(vals, bins=bins, range=(lo, hi))
    centers = lo + (np.arange(bins, dtype=np.float64) + 0.5) * (hi - lo) / bins
    var = _binned_between_class(hist, centers)
    # splits are "<= bin k" vs "> bin k"; the last split has an empty class
    var = var[:-1]
    best = int(var.argmax())
    # Splits separated only by empty bins partition the data identically and
    # tie exactly; the below-split count (an integer) identifies the
    # partition, so tie detection is immune to summation rounding.
    w0 = np.cumsum(hist)[:-1]
    tied = np.flatnonzero(w0 == w0[best])
    idx = int(np.floor(tied.mean()))
    return float(centers[idx])


def skewed_threshold(
    scores: np.ndarray, beta: float = DEFAULT_BETA, bins: int = DEFAULT_BINS
) -> float:
    """Otsu on power-transformed scores, mapped back: Otsu(s**beta)**(1/beta).

    The power transform spreads the bulk of a right-skewed score histogram so
    the split does not collapse onto the tail.  Requires nonnegative scores.
    """
    vals = np.asarray(scores, dtype=np.float64)
    if vals.size and float(vals.min()) < 0.0:
        raise ValueError("skewed threshold requires nonnegative scores; shift first")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return float(otsu_threshold(vals**beta, bins=bins) ** (1.0 / beta))


def _exhaustive_scalar_split(values: np.ndarray) -> float:
    """Unbinned exhaustive Otsu over a small set of scalars.

    Evaluates every split of the sorted values, maximizing between-class
    variance, and returns the midpoint of the boundary pair.  Ties resolve
    to the lowest split.  With all values equal there is no split; the
    common value is returned so a later max() with per-image thresholds
    leaves them unchanged.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise DegenerateHistogramError("no thresholds to combine")
    if n == 1 or v[0] == v[-1]:
        return float(v[0])
    csum = np.cumsum(v)
    k = np.arange(1, n, dtype=np.float64)  # size of the lower class
    mu0 = csum[:-1] / k
    mu1 = (csum[-1] - csum[:-1]) / (n - k)
    var = k * (n - k) * (mu0 - mu1) ** 2
    best = int(np.argmax(var))  # argmax takes the first (lowest) tie
    return float((v[best] + v[best + 1]) / 2.0)


def combined_thresholds(
    score_maps: list[np.ndarray], beta: float = DEFAULT_BETA, bins: int = DEFAULT_BINS
) -> list[float]:
    """Per-image thresholds floored by a consensus over the whole set.

    Each image gets its own skew-corrected threshold; a global level is the
    exhaustive scalar split of those per-image thresholds.  The effective
    threshold per image is max(global, local), so images whose local split
    sits suspiciously low (typical when an image has no anomaly at all and
    Otsu splits noise) are pulled up to the consensus.
    """
    if not score_maps:
        raise DegenerateHistogramError("no score maps given")
    local = [skewed_threshold(m, beta=beta, bins=bins) for m in score_maps]
    if len(local) == 1:
        return [local[0]]
    global_level = _exhaustive_scalar_split(np.array(local))
    return [max(global_level, t) for t in local]


def binarize(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean mask of scores strictly above the threshold."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ValueError("binarize expects a single-channel score map")
        arr = arr[:, :, 0]
    return arr > threshold


@dataclass(frozen=True)
class ScorerConfig:
    patch: int = DEFAULT_PATCH
    n_filters: int = 48
    seed: int = 11
    # score-map smoothing, roughly patch/3.5: wide enough to fill the
    # interior of a closed dissimilarity ring around a compact anomaly
    smooth_sigma: float = 2.0


class PatchDissimilarityScorer:
    """Scores pixels by distance from the set-median filter response.

    Each pixel gets a local descriptor from a fixed random filter bank whose
    footprint is the patch size.  The reference statistic is the per-filter
    median over every pixel of every image in the set, so the dominant
    texture defines "normal" and repeated structure scores low even when it
    is high-contrast.  Maps are lightly smoothed and shifted to min zero
    per image.
    """

    def __init__(self, config: ScorerConfig | None = None):
        self.config = config or ScorerConfig()
        self._banks: dict[int, FilterBank] = {}

    def _bank(self, channels: int) -> FilterBank:
        if channels not in self._banks:
            self._banks[channels] = FilterBank(
                size=self.config.patch,
                n_filters=self.config.n_filters,
                channels=channels,
                seed=self.config.seed,
            )
        return self._banks[channels]

    def score(self, images: list[Grid]) -> list[Grid]:
        if not images:
            return []
        channels = images[0].c
        for img in images:
            if img.c != channels:
                raise ValueError("all images in a set must share a channel count")
        bank = self._bank(channels)
        # rectified responses: zero-mean filters respond to opposite texture
        # phases with opposite signs, and |r| folds those into one mode so
        # the median sits on the texture instead of between phases
        descs = [np.abs(bank.responses(img)) for img in images]
        stacked = np.concatenate([d.reshape(-1, d.shape[2]) for d in descs], axis=0)
        center = np.median(stacked, axis=0)
        out: list[Grid] = []
        for d in descs:
            dist = np.sqrt(((d - center) ** 2).sum(axis=2))
            if self.config.smooth_sigma > 0:
                dist = scipy.ndimage.gaussian_filter(
                    dist, sigma=self.config.smooth_sigma, mode="reflect"
                )
            dist -= dist.min()
            out.append(Grid(dist))
        return out


def score_patch_dissimilarity(
    images: list[Grid], patch: int = DEFAULT_PATCH, seed: int = 11
) -> list[Grid]:
    """Score maps for an image set; see PatchDissimilarityScorer."""
    scorer = PatchDissimilarityScorer(ScorerConfig(patch=patch, seed=seed))
    return scorer.score(images)
