"""Embedder forward/backward passes, InfoNCE loss, and pixel labeling."""

import math

import numpy as np
import pytest

from texturekit.cluster import evaluate_labels
from texturekit.contrastive import (
    Embedder,
    EmbedderConfig,
    infonce_loss_and_grads,
    infonce_pair_loss,
    label_pixels,
    train_embedder,
)
from texturekit.errors import ClusterError, TrainingDivergedError
from texturekit.filters import FilterBank
from texturekit.grid import Grid, Rng
from texturekit.regions import Region, RegionPairSet


def fake_pairs(descriptors, positives, negatives):
    regions = [
        Region(0, ys=np.array([i]), xs=np.array([0]), descriptor=np.asarray(d, float))
        for i, d in enumerate(descriptors)
    ]
    return RegionPairSet(
        regions=regions,
        positives=positives,
        negatives=negatives,
        precluster=np.zeros(len(regions), dtype=int),
    )


class TestPairLoss:
    def test_closed_form_single_positive_single_negative(self):
        # similarity 1 vs 0 at temperature 1: -log(e / (e + 1))
        expected = -math.log(math.e / (math.e + 1.0))
        assert infonce_pair_loss(1.0, np.array([0.0]), tau=1.0) == pytest.approx(
            expected, abs=1e-12
        )

    def test_zero_negatives_is_exactly_zero(self):
        assert infonce_pair_loss(0.37, np.array([]), tau=0.07) == 0.0

    def test_temperature_sharpens(self):
        mild = infonce_pair_loss(0.9, np.array([0.1]), tau=1.0)
        sharp = infonce_pair_loss(0.9, np.array([0.1]), tau=0.07)
        assert sharp < mild


class TestGradients:
    def test_analytic_gradients_match_finite_differences(self):
        rng = Rng(3)
        config = EmbedderConfig(in_channels=2, hidden=2, out_dim=2, head_dim=2, tau=0.5)
        emb = Embedder(config, Rng(17))
        descs = rng.normal(size=(4, 2))
        pairs = fake_pairs(
            descs, positives=[(0, 1), (2, 3)], negatives=[(0, 2), (1, 3), (0, 3)]
        )

        _, grads = infonce_loss_and_grads(emb, descs, pairs, config.tau)

        def loss_at() -> float:
            loss, _ = infonce_loss_and_grads(emb, descs, pairs, config.tau)
            return loss

        h = 1e-6
        worst = 0.0
        for name, g in grads.items():
            param = emb.params[name]
            it = np.nditer(param, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + h
                up = loss_at()
                param[idx] = orig - h
                down = loss_at()
                param[idx] = orig
                numeric = (up - down) / (2 * h)
                denom = max(1.0, abs(numeric), abs(g[idx]))
                worst = max(worst, abs(numeric - g[idx]) / denom)
                it.iternext()
        assert worst <= 1e-4

    def test_head_excluded_from_embedding_output(self):
        config = EmbedderConfig(in_channels=3, hidden=4, out_dim=5, head_dim=6)
        emb = Embedder(config, Rng(1))
        out = emb.embed_vectors(np.ones(3))
        assert out.shape == (5,)


class TestTraining:
    def test_loss_decreases_on_separable_toy(self):
        rng = Rng(5)
        descs = []
        for ci in range(2):
            base = np.zeros(4)
            base[ci] = 1.0
            for _ in range(5):
                v = base + rng.normal(size=4) * 0.05
                descs.append(v / np.linalg.norm(v))
        positives = [(i, i + 1) for i in range(0, 4)] + [(i, i + 1) for i in range(5, 9)]
        negatives = [(i, j) for i in range(5) for j in range(5, 10)]
        pairs = fake_pairs(descs, positives, negatives)
        from texturekit.contrastive import TrainingReport

        report = TrainingReport()
        config = EmbedderConfig(in_channels=4, hidden=8, out_dim=4, head_dim=4)
        emb = train_embedder(
            pairs, Rng(7), config=config, iterations=150, lr=0.05, report=report
        )
        assert report.losses[-1] < report.losses[0]
        z = emb.embed_vectors(np.asarray(descs))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        within = np.mean([z[i] @ z[j] for i in range(5) for j in range(5) if i != j])
        across = np.mean([z[i] @ z[j] for i in range(5) for j in range(5, 10)])
        assert within > across

    def test_divergence_raises_with_last_finite_loss(self):
        # a vanishing temperature saturates the softmax, so gradient terms
        # scale as 1/tau, overflow the update, and poison the next forward
        rng = Rng(6)
        descs = rng.normal(size=(4, 3))
        pairs = fake_pairs(
            descs,
            positives=[(0, 1), (2, 3)],
            negatives=[(0, 2), (0, 3), (1, 2), (1, 3)],
        )
        config = EmbedderConfig(
            in_channels=3, hidden=4, out_dim=3, head_dim=3, tau=1e-300
        )
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as err:
            train_embedder(pairs, Rng(0), config=config, iterations=50, lr=0.05)
        assert err.value.last_finite is not None
        assert math.isfinite(err.value.last_finite)

    def test_descriptor_width_mismatch_raises(self):
        pairs = fake_pairs(np.eye(3), positives=[(0, 1)], negatives=[(0, 2)])
        with pytest.raises(ClusterError):
            train_embedder(pairs, Rng(0), config=EmbedderConfig(in_channels=7))


class TestDenseForm:
    def test_constant_field_matches_vector_path(self):
        config = EmbedderConfig(in_channels=3, hidden=4, out_dim=2, head_dim=2)
        emb = Embedder(config, Rng(9))
        v = np.array([0.3, -0.7, 1.1])
        field = np.broadcast_to(v, (6, 5, 3)).copy()
        dense = emb.embed_grid(field)
        vec = emb.embed_vectors(v)
        assert np.allclose(dense, vec[None, None, :], atol=1e-10)

    def test_embed_image_requires_bank(self):
        emb = Embedder(EmbedderConfig(in_channels=2, hidden=2, out_dim=2), Rng(0))
        with pytest.raises(ClusterError):
            emb.embed_image(Grid.full(8, 8, 0.5))

    def test_receptive_field_is_five(self):
        # perturbing a pixel changes embeddings only within a 5x5 halo
        config = EmbedderConfig(in_channels=1, hidden=3, out_dim=2, head_dim=2)
        emb = Embedder(config, Rng(11))
        base = np.zeros((11, 11, 1))
        bumped = base.copy()
        bumped[5, 5, 0] = 1.0
        delta = np.abs(emb.embed_grid(bumped) - emb.embed_grid(base)).sum(axis=2)
        changed = delta > 1e-12
        ys, xs = np.nonzero(changed)
        assert changed[5, 5]
        assert ys.min() >= 3 and ys.max() <= 7 and xs.min() >= 3 and xs.max() <= 7


class TestLabelPixels:
    def _bank_embedder(self):
        bank = FilterBank(size=5, n_filters=12, channels=1, seed=2)
        config = EmbedderConfig(in_channels=12, hidden=8, out_dim=4, head_dim=4)
        return Embedder(config, Rng(13), bank=bank)

    def test_constant_fields_split_into_distinct_classes(self):
        # a constant image embeds to a single repeated point, so two distinct
        # constants force k-means with k=2 to give each image its own class
        emb = self._bank_embedder()
        dark = Grid.full(12, 12, 0.0)
        bright = Grid.full(12, 12, 1.0)
        mask = np.zeros((12, 12), dtype=bool)
        mask[3:9, 3:9] = True
        out = label_pixels(emb, [dark, bright], [mask, mask], k=2, rng=Rng(15))
        a, b = out[0].labels, out[1].labels
        assert np.all(a[~mask] == 0) and np.all(b[~mask] == 0)
        assert len(np.unique(a[mask])) == 1 and len(np.unique(b[mask])) == 1
        assert a[5, 5] != b[5, 5]
        assert {int(a[5, 5]), int(b[5, 5])} == {1, 2}
        agreement = evaluate_labels([a, b], [np.where(mask, 1, 0), np.where(mask, 2, 0)])
        assert agreement.accuracy == 1.0

    def test_periodic_textures_label_deterministically(self):
        emb = self._bank_embedder()
        yy, xx = np.mgrid[0:24, 0:24]
        stripes = Grid(((yy // 2) % 2).astype(np.float64))
        checks = Grid(((yy + xx) % 2).astype(np.float64))
        mask = np.zeros((24, 24), dtype=bool)
        mask[4:20, 4:20] = True
        first = label_pixels(emb, [stripes, checks], [mask, mask], k=3, rng=Rng(21))
        again = label_pixels(emb, [stripes, checks], [mask, mask], k=3, rng=Rng(21))
        for one, two in zip(first, again):
            assert np.array_equal(one.labels, two.labels)
        assert set(np.unique(first[0].labels[mask])) <= {1, 2, 3}
        assert np.all(first[0].labels[~mask] == 0)

    def test_too_few_masked_pixels_raises(self):
        emb = self._bank_embedder()
        img = Grid.full(8, 8, 0.1)
        mask = np.zeros((8, 8), dtype=bool)
        mask[0, 0] = True
        with pytest.raises(ClusterError):
            label_pixels(emb, [img], [mask], k=3, rng=Rng(0))

    def test_mask_shape_mismatch_raises(self):
        emb = self._bank_embedder()
        with pytest.raises(ClusterError):
            label_pixels(emb, [Grid.full(8, 8, 0.0)], [np.zeros((4, 4), bool)], 1, Rng(0))
