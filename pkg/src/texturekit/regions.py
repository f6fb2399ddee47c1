"""Region extraction from binary masks and contrastive pair mining.

Masks are cleaned with a 2x2 erosion before 8-connected labeling, which
strips single-pixel bridges and halo pixels that survive thresholding; a
minimum area then drops fragments too small to carry a stable descriptor.
Each kept region is summarized by a score-weighted mean of per-pixel
features.  Pair mining is where class imbalance is handled: negatives are
drawn round-robin across coarse preclusters so the (usually huge) normal
cluster cannot dominate the contrastive signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .cluster import kmeans
from .errors import RegionMiningError
from .grid import Grid, Rng

MIN_REGION_PIXELS = 12
DEFAULT_POSITIVES = 10


@dataclass
class Region:
    """A connected anomalous region within one image."""

    image_id: int
    ys: np.ndarray
    xs: np.ndarray
    descriptor: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.ys.size)


def erode_2x2(mask: np.ndarray) -> np.ndarray:
    """Keep pixels whose 2x2 block (anchored top-left) is fully set."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise RegionMiningError(f"mask must be 2-D, got shape {m.shape}")
    out = np.zeros_like(m)
    if m.shape[0] >= 2 and m.shape[1] >= 2:
        out[:-1, :-1] = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
    return out


def connected_components(
    mask: np.ndarray, image_id: int = 0, min_pixels: int = MIN_REGION_PIXELS
) -> list[Region]:
    """Regions of a mask: 2x2 erosion, 8-connected labeling, area filter.

    Returns regions in scanline order of their first pixel.  Pixel lists are
    sorted row-major, so repeated calls on equal masks are identical.
    """
    eroded = erode_2x2(mask)
    labeled, count = scipy.ndimage.label(eroded, structure=np.ones((3, 3), dtype=bool))
    regions: list[Region] = []
    for idx in range(1, count + 1):
        ys, xs = np.nonzero(labeled == idx)
        if ys.size >= min_pixels:
            regions.append(Region(image_id=image_id, ys=ys, xs=xs))
    return regions


def region_descriptor(
    region: Region, features: np.ndarray, scores: Grid | np.ndarray
) -> np.ndarray:
    """Unit-norm, score-weighted mean feature over the region's pixels.

    Weights are a softmax of the anomaly scores inside the region, so the
    most anomalous pixels dominate while low-score rim pixels still
    contribute.  The result is L2-normalized.
    """
    if region.size == 0:
        raise RegionMiningError("cannot describe an empty region")
    feats = np.asarray(features, dtype=np.float64)
    score_arr = scores.data[:, :, 0] if isinstance(scores, Grid) else np.asarray(scores)
    s = score_arr[region.ys, region.xs].astype(np.float64)
    w = np.exp(s - s.max())
    w /= w.sum()
    desc = (feats[region.ys, region.xs] * w[:, None]).sum(axis=0)
    norm = float(np.linalg.norm(desc))
    if norm == 0.0:
        raise RegionMiningError("degenerate region descriptor (zero feature vector)")
    return desc / norm


@dataclass
class RegionPairSet:
    """Mined contrastive pairs over a region list.

    ``positives`` and ``negatives`` hold unordered-unique index pairs into
    ``regions`` (stored as (anchor-first-seen, partner)).  ``precluster``
    assigns every region to a coarse cluster.  ``negatives_by_anchor`` keeps
    the per-anchor draw lists the loss consumes; the flat ``negatives`` list
    is its deduplicated view.
    """

    regions: list[Region]
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]
    precluster: np.ndarray
    negatives_by_anchor: dict[int, list[int]] = field(default_factory=dict)

    def descriptor_matrix(self) -> np.ndarray:
        rows = []
        for r in self.regions:
            if r.descriptor is None:
                raise RegionMiningError("region is missing a descriptor")
            rows.append(r.descriptor)
        return np.asarray(rows, dtype=np.float64)


def _descriptor_matrix(regions: list[Region]) -> np.ndarray:
    rows = []
    for r in regions:
        if r.descriptor is None:
            raise RegionMiningError("region is missing a descriptor")
        rows.append(np.asarray(r.descriptor, dtype=np.float64))
    return np.stack(rows, axis=0)


def mine_pairs(
    regions: list[Region],
    k_pre: int,
    rng: Rng,
    p: int = DEFAULT_POSITIVES,
    stratify: bool = True,
) -> RegionPairSet:
    """Mine positive and negative pairs from region descriptors.

    Positives: each region's ``p`` nearest neighbors by cosine distance.
    Negatives (stratified): drawn from candidates outside both regions'
    closest-half neighborhoods, cycling round-robin over preclusters with a
    per-anchor budget of (total regions) minus the largest precluster's
    size.  With ``stratify=False`` the same budget is drawn uniformly over
    all other regions with no exclusions; that imbalance-blind baseline
    exists for ablation comparisons and does not honor the closest-half
    invariant.
    """
    n = len(regions)
    if n < 2:
        raise RegionMiningError(f"pair mining needs at least 2 regions, got {n}")
    descs = _descriptor_matrix(regions)
    norms = np.linalg.norm(descs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RegionMiningError("region descriptor with zero norm")
    unit = descs / norms
    dist = np.clip(1.0 - unit @ unit.T, 0.0, None)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")  # per-row neighbor ranking

    eff_p = p
    if eff_p > n - 1:
        warnings.warn(
            f"requested {p} positives per region but only {n - 1} neighbors exist; "
            f"clamping to {n - 1}",
            stacklevel=2,
        )
        eff_p = n - 1

    positive_set: set[tuple[int, int]] = set()
    positives: list[tuple[int, int]] = []
    for a in range(n):
        for b in order[a, :eff_p]:
            key = (min(a, int(b)), max(a, int(b)))
            if key not in positive_set:
                positive_set.add(key)
                positives.append((a, int(b)))

    k_eff = min(max(1, k_pre), n)
    pre = kmeans(descs, k_eff, rng.derive("precluster")).labels
    cluster_sizes = np.bincount(pre, minlength=k_eff)
    n_neg = n - int(cluster_sizes.max())

    # near[a, b]: b is within a's closest half of other regions
    half = (n - 1) // 2
    near = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), half)
    near[rows, order[:, :half].ravel()] = True

    neg_rng = rng.derive("negatives")
    negative_set: set[tuple[int, int]] = set()
    negatives: list[tuple[int, int]] = []
    by_anchor: dict[int, list[int]] = {}
    for a in range(n):
        if stratify:
            # candidates must sit outside BOTH regions' closest halves
            pool = [
                b for b in range(n) if b != a and not near[a, b] and not near[b, a]
            ]
            groups: dict[int, list[int]] = {cid: [] for cid in range(k_eff)}
            for b in pool:
                groups[int(pre[b])].append(b)
            order_ids = [int(i) for i in neg_rng.permutation(k_eff)]
            for cid in order_ids:
                groups[cid] = list(neg_rng.shuffled(groups[cid]))
            # Round-robin over ALL preclusters (the anchor's own is usually
            # dry, since own-cluster members are its nearest regions), one
            # draw per cluster per round, aborting the whole draw the moment
            # a visited cluster is dry: per-cluster counts then never differ
            # by more than one, even when a small cluster cannot supply its
            # share, at the cost of drawing fewer than n in total.
            drawn: list[int] = []
            exhausted = k_eff == 0
            while len(drawn) < n_neg and not exhausted:
                for cid in order_ids:
                    if not groups[cid]:
                        exhausted = True
                        break
                    drawn.append(groups[cid].pop())
                    if len(drawn) == n_neg:
                        break
        else:
            # imbalance-blind baseline: uniform over every other region
            pool = [b for b in range(n) if b != a]
            picks = neg_rng.permutation(len(pool))[: min(n_neg, len(pool))]
            drawn = [pool[i] for i in picks]
        by_anchor[a] = drawn
        for b in drawn:
            key = (min(a, b), max(a, b))
            if key not in negative_set:
                negative_set.add(key)
                negatives.append((a, b))

    return RegionPairSet(
        regions=regions,
        positives=positives,
        negatives=negatives,
        precluster=pre,
        negatives_by_anchor=by_anchor,
    )
