"""Contrastive embedder over texture descriptors, trained with InfoNCE.

The embedder is a small convolutional network (3x3, 3x3, 1x1 kernels with
per-position layer norm and GELU, receptive field 5x5) applied to filter-bank
responses.  Region descriptors are spatially constant inputs, so during
training the network reduces to a 3-layer MLP whose weights are the kernel
tap sums; gradients are derived by hand below, with the tap-sum gradient
broadcast back onto every tap.  A 2-layer MLP projection head is used only
during training and discarded afterwards.

The loss is InfoNCE with cosine similarity: each stored positive pair is an
anchor term whose denominator covers the anchor's mined negatives.  Negative
sets are summed in region-index order, so the loss is bitwise invariant to
the order pairs were mined in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .cluster import kmeans
from .errors import ClusterError, TrainingDivergedError
from .filters import FilterBank
from .grid import Grid, LabelMap, Rng
from .regions import RegionPairSet

DEFAULT_TAU = 0.07
DEFAULT_ITERATIONS = 10_000
DEFAULT_LR = 0.05
_LN_EPS = 1e-5


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(
        2.0 * math.pi
    )


def infonce_pair_loss(pos_sim: float, neg_sims: np.ndarray, tau: float) -> float:
    """-log(exp(p/tau) / (exp(p/tau) + sum_j exp(n_j/tau))), stably.

    With no negatives the ratio is 1 and the loss is exactly 0.
    """
    neg = np.asarray(neg_sims, dtype=np.float64).ravel()
    if neg.size == 0:
        return 0.0
    logits = np.concatenate(([pos_sim], neg)) / tau
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[0])


@dataclass(frozen=True)
class EmbedderConfig:
    in_channels: int = 64
    hidden: int = 64
    out_dim: int = 32
    head_dim: int = 32
    tau: float = DEFAULT_TAU


def _layernorm_forward(a: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (a - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    da = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return da, dg, db


class Embedder:
    """Conv 3x3 -> LN -> GELU -> conv 3x3 -> LN -> GELU -> conv 1x1.

    Parameters live in ``params`` as float64 arrays.  ``embed_vectors`` runs
    the constant-field reduction (kernel tap sums as dense weights);
    ``embed_image`` runs the dense convolutional form with mirror padding.
    An optional filter bank maps raw images to the network's input features.
    """

    def __init__(
        self,
        config: EmbedderConfig,
        rng: Rng,
        bank: FilterBank | None = None,
    ):
        self.config = config
        self.bank = bank
        c_in, h, d, dh = config.in_channels, config.hidden, config.out_dim, config.head_dim
        r = rng.derive("embedder-init")

        def conv_init(shape, fan_in):
            return r.normal(size=shape) * math.sqrt(2.0 / fan_in)

        self.params: dict[str, np.ndarray] = {
            "k1": conv_init((h, c_in, 3, 3), c_in * 9),
            "b1": np.zeros(h),
            "g1": np.ones(h),
            "be1": np.zeros(h),
            "k2": conv_init((h, h, 3, 3), h * 9),
            "b2": np.zeros(h),
            "g2": np.ones(h),
            "be2": np.zeros(h),
            "w3": conv_init((d, h), h),
            "b3": np.zeros(d),
            "v1": conv_init((dh, d), d),
            "c1": np.zeros(dh),
            "v2": conv_init((dh, dh), dh),
            "c2": np.zeros(dh),
        }

    # ---- constant-field (vector) path -------------------------------------

    def _effective(self, name: str) -> np.ndarray:
        return self.params[name].sum(axis=(2, 3))

    def _forward_vectors(self, x: np.ndarray) -> dict:
        p = self.params
        cache: dict = {"x": x}
        cache["a1"] = x @ self._effective("k1").T + p["b1"]
        cache["l1"], cache["ln1"] = _layernorm_forward(cache["a1"], p["g1"], p["be1"])
        cache["g1out"] = gelu(cache["l1"])
        cache["a2"] = cache["g1out"] @ self._effective("k2").T + p["b2"]
        cache["l2"], cache["ln2"] = _layernorm_forward(cache["a2"], p["g2"], p["be2"])
        cache["g2out"] = gelu(cache["l2"])
        cache["z"] = cache["g2out"] @ p["w3"].T + p["b3"]
        cache["u1"] = cache["z"] @ p["v1"].T + p["c1"]
        cache["gu"] = gelu(cache["u1"])
        cache["e"] = cache["gu"] @ p["v2"].T + p["c2"]
        return cache

    def embed_vectors(self, descriptors: np.ndarray) -> np.ndarray:
        """Embeddings (without head) for rows of descriptors, (m, out_dim)."""
        x = np.asarray(descriptors, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        z = self._forward_vectors(x)["z"]
        return z[0] if single else z

    def _backward_vectors(self, cache: dict, de: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads: dict[str, np.ndarray] = {}
        grads["c2"] = de.sum(axis=0)
        grads["v2"] = de.T @ cache["gu"]
        dgu = de @ p["v2"]
        du1 = dgu * gelu_grad(cache["u1"])
        grads["c1"] = du1.sum(axis=0)
        grads["v1"] = du1.T @ cache["z"]
        dz = du1 @ p["v1"]
        grads["b3"] = dz.sum(axis=0)
        grads["w3"] = dz.T @ cache["g2out"]
        dg2 = dz @ p["w3"]
        dl2 = dg2 * gelu_grad(cache["l2"])
        da2, grads["g2"], grads["be2"] = _layernorm_backward(dl2, cache["ln2"], p["g2"])
        grads["b2"] = da2.sum(axis=0)
        dw2 = da2.T @ cache["g1out"]
        grads["k2"] = np.broadcast_to(dw2[:, :, None, None], p["k2"].shape).copy()
        dg1 = da2 @ self._effective("k2")
        dl1 = dg1 * gelu_grad(cache["l1"])
        da1, grads["g1"], grads["be1"] = _layernorm_backward(dl1, cache["ln1"], p["g1"])
        grads["b1"] = da1.sum(axis=0)
        dw1 = da1.T @ cache["x"]
        grads["k1"] = np.broadcast_to(dw1[:, :, None, None], p["k1"].shape).copy()
        return grads

    # ---- dense (image) path ------------------------------------------------

    @staticmethod
    def _conv3(data: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
        h, w, _ = data.shape
        padded = np.pad(data, ((1, 1), (1, 1), (0, 0)), mode="reflect")
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(padded, (3, 3), axis=(0, 1))  # (h, w, c, 3, 3)
        win = np.moveaxis(win, 2, -1)  # (h, w, 3, 3, c)
        flat = win.reshape(h, w, -1)
        kflat = np.moveaxis(kernel, 1, -1).reshape(kernel.shape[0], -1)  # (out, 3*3*c)
        return flat @ kflat.T + bias

    def embed_grid(self, features: np.ndarray) -> np.ndarray:
        """Dense embeddings (H, W, out_dim) from a feature field (H, W, C)."""
        p = self.params
        x = np.asarray(features, dtype=np.float64)
        a1 = self._conv3(x, p["k1"], p["b1"])
        l1, _ = _layernorm_forward(a1, p["g1"], p["be1"])
        g1 = gelu(l1)
        a2 = self._conv3(g1, p["k2"], p["b2"])
        l2, _ = _layernorm_forward(a2, p["g2"], p["be2"])
        g2 = gelu(l2)
        return g2 @ p["w3"].T + p["b3"]

    def embed_image(self, image: Grid) -> np.ndarray:
        if self.bank is None:
            raise ClusterError("embedder has no filter bank bound; cannot embed images")
        return self.embed_grid(self.bank.responses(image))


def _neighbor_lists(pairs: RegionPairSet) -> dict[int, list[int]]:
    """Per-anchor negative partners, sorted by region index."""
    neg: dict[int, set[int]] = {}
    for a, b in pairs.negatives:
        neg.setdefault(a, set()).add(b)
        neg.setdefault(b, set()).add(a)
    return {a: sorted(s) for a, s in neg.items()}


def _loss_and_grad_embeddings(
    e: np.ndarray,
    positives: list[tuple[int, int]],
    neg_lists: dict[int, list[int]],
    tau: float,
) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over positive pairs; gradient w.r.t. embedding rows.

    Each pair's loss is -log softmax over [cos(a, b), cos(a, n_1), ...] / tau
    with d cos(x, y)/dx = y/(|x||y|) - cos(x, y) x/|x|^2.  Pairs are batched
    in groups sharing a negative count so every term is one array op; pairs
    whose anchor has no negatives contribute exactly zero loss and gradient.
    """
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise TrainingDivergedError("zero-norm embedding", last_finite=None)
    total = 0.0
    de = np.zeros_like(e)

    groups: dict[int, list[tuple[int, int]]] = {}
    for a, b in positives:
        n = len(neg_lists.get(a, ()))
        if n:
            groups.setdefault(n, []).append((a, b))

    for n, members in groups.items():
        anchors = np.array([a for a, _ in members], dtype=np.int64)
        partners = np.array([b for _, b in members], dtype=np.int64)
        neg_idx = np.array([neg_lists[a] for a in anchors], dtype=np.int64)
        ea, eb, en = e[anchors], e[partners], e[neg_idx]
        na, nb, nn = norms[anchors], norms[partners], norms[neg_idx]
        s_pos = (ea * eb).sum(axis=1) / (na * nb)
        s_neg = np.einsum("gd,gnd->gn", ea, en) / (na[:, None] * nn)
        logits = np.concatenate((s_pos[:, None], s_neg), axis=1) / tau
        m = logits.max(axis=1)
        shifted = np.exp(logits - m[:, None])
        z = shifted.sum(axis=1)
        soft = shifted / z[:, None]
        total += float((m + np.log(z) - logits[:, 0]).sum())
        cp = (soft[:, 0] - 1.0) / tau
        cn = soft[:, 1:] / tau
        # anchors and partners repeat across pairs, so the scatter-adds must
        # be unbuffered (np.add.at) to keep colliding contributions
        np.add.at(
            de,
            anchors,
            cp[:, None] * (eb / (na * nb)[:, None] - (s_pos / na**2)[:, None] * ea)
            + np.einsum("gn,gnd->gd", cn / (na[:, None] * nn), en)
            - ((cn * s_neg).sum(axis=1) / na**2)[:, None] * ea,
        )
        np.add.at(
            de,
            partners,
            cp[:, None] * (ea / (na * nb)[:, None] - (s_pos / nb**2)[:, None] * eb),
        )
        np.add.at(
            de,
            neg_idx.reshape(-1),
            (
                (cn / (na[:, None] * nn))[:, :, None] * ea[:, None, :]
                - (cn * s_neg / nn**2)[:, :, None] * en
            ).reshape(-1, e.shape[1]),
        )

    n_terms = max(1, len(positives))
    return total / n_terms, de / n_terms


def infonce_loss_and_grads(
    embedder: Embedder, descriptors: np.ndarray, pairs: RegionPairSet, tau: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic parameter gradients for one full batch."""
    cache = embedder._forward_vectors(np.asarray(descriptors, dtype=np.float64))
    loss, de = _loss_and_grad_embeddings(
        cache["e"], pairs.positives, _neighbor_lists(pairs), tau
    )
    grads = embedder._backward_vectors(cache, de)
    return loss, grads


@dataclass
class TrainingReport:
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_embedder(
    pairs: RegionPairSet,
    rng: Rng,
    config: EmbedderConfig | None = None,
    iterations: int = DEFAULT_ITERATIONS,
    lr: float = DEFAULT_LR,
    bank: FilterBank | None = None,
    report: TrainingReport | None = None,
) -> Embedder:
    """Full-batch SGD with cosine learning-rate decay; returns the embedder.

    The projection head is trained jointly but not part of the returned
    embedding map (``embed_vectors``/``embed_image`` stop before it).  A
    non-finite loss aborts with the last finite loss attached.
    """
    descs = pairs.descriptor_matrix()
    if config is None:
        config = EmbedderConfig(in_channels=descs.shape[1])
    if descs.shape[1] != config.in_channels:
        raise ClusterError(
            f"descriptors have {descs.shape[1]} features, config expects "
            f"{config.in_channels}"
        )
    embedder = Embedder(config, rng, bank=bank)
    neg_lists = _neighbor_lists(pairs)
    last_finite: float | None = None
    for t in range(iterations):
        cache = embedder._forward_vectors(descs)
        loss, de = _loss_and_grad_embeddings(
            cache["e"], pairs.positives, neg_lists, config.tau
        )
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at iteration {t}", last_finite=last_finite
            )
        last_finite = loss
        if report is not None:
            report.losses.append(loss)
        grads = embedder._backward_vectors(cache, de)
        step = lr * 0.5 * (1.0 + math.cos(math.pi * t / max(1, iterations)))
        for name, g in grads.items():
            embedder.params[name] -= step * g
    return embedder


def label_pixels(
    embedder: Embedder,
    images: list[Grid],
    masks: list[np.ndarray],
    k: int,
    rng: Rng,
    max_iters: int = 100,
    rel_tol: float = 1e-4,
) -> list[LabelMap]:
    """Cluster masked pixels' embeddings into classes 1..k; 0 elsewhere.

    Embeddings are L2-normalized before clustering, matching the cosine
    geometry the embedder was trained in.
    """
    if len(images) != len(masks):
        raise ClusterError("images and masks differ in length")
    fields = []
    vecs = []
    for img, mask in zip(images, masks):
        m = np.asarray(mask, dtype=bool)
        if m.shape != (img.h, img.w):
            raise ClusterError(
                f"mask shape {m.shape} does not match image {(img.h, img.w)}"
            )
        emb = embedder.embed_image(img)
        fields.append((emb, m))
        if m.any():
            vecs.append(emb[m])
    total = sum(v.shape[0] for v in vecs)
    if total < k:
        raise ClusterError(f"only {total} masked pixels for {k} classes")
    allv = np.concatenate(vecs, axis=0)
    norms = np.linalg.norm(allv, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    result = kmeans(allv / norms, k, rng.derive("label-pixels"), max_iters, rel_tol)
    out: list[LabelMap] = []
    cursor = 0
    for emb, m in fields:
        labels = np.zeros(m.shape, dtype=np.uint8)
        count = int(m.sum())
        if count:
            labels[m] = (result.labels[cursor : cursor + count] + 1).astype(np.uint8)
            cursor += count
        out.append(LabelMap(labels, num_classes=k))
    return out
