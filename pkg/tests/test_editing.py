import os

import numpy as np
import pytest

from texturekit.diffusion import (
    ExemplarPatchDenoiser,
    GaussianAnalyticDenoiser,
    build_schedule,
    cfg,
    sample_euler,
)
from texturekit.editing import (
    EditRequest,
    Trajectory,
    TrajectoryStore,
    invert,
    localized_edit,
    mix,
    reconstruct,
    record_generation,
    regenerate_with_edit,
    transfer_feature,
)
from texturekit.errors import (
    GridFormatError,
    SamplerError,
    TrajectoryMissingError,
)
from texturekit.grid import Grid, LabelMap, Rng


class LabeledGaussianDenoiser:
    """Analytic slope for per-pixel Gaussian modes selected by the condition.

    The null condition uses null_mean everywhere, so guidance has a real
    unconditional branch to lean against.
    """

    def __init__(self, modes, null_mean=0.0, s=0.5):
        self.modes = dict(modes)
        self.null_mean = float(null_mean)
        self.s = float(s)

    def eval(self, z, cond, sigma):
        field = z.data if isinstance(z, Grid) else np.asarray(z, dtype=np.float64)
        if field.ndim == 2:
            field = field[:, :, None]
        if sigma == 0.0:
            return np.zeros_like(field)
        if cond is None:
            mu = np.full(field.shape, self.null_mean)
        else:
            labels = cond.labels if isinstance(cond, LabelMap) else np.asarray(cond)
            flat = np.full(labels.shape, self.null_mean, dtype=np.float64)
            for value, mean in self.modes.items():
                flat[labels == value] = mean
            mu = flat[:, :, None]
        return sigma * (field - mu) / (self.s**2 + sigma**2)


class ConstantDirection:
    def __init__(self, value):
        self.value = float(value)

    def eval(self, z, cond, sigma):
        field = z.data if isinstance(z, Grid) else np.asarray(z, dtype=np.float64)
        if field.ndim == 2:
            field = field[:, :, None]
        return np.full_like(field, self.value)


class ExplodingDenoiser:
    def eval(self, z, cond, sigma):
        field = z.data if isinstance(z, Grid) else np.asarray(z, dtype=np.float64)
        return np.full_like(field, np.inf)


class RecordingDenoiser:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.shapes = []

    def eval(self, z, cond, sigma):
        self.calls += 1
        field = z.data if isinstance(z, Grid) else np.asarray(z)
        if field.ndim == 2:
            field = field[:, :, None]
        self.shapes.append(field.shape)
        return self.inner.eval(z, cond, sigma)


def fresh_roundtrip(den, x0, steps, fp_iters=4):
    """Invert, then regenerate with fresh evaluations; return (MAE, traj)."""
    field = x0.data if isinstance(x0, Grid) else np.asarray(x0)
    if field.ndim == 2:
        field = field[:, :, None]
    traj = invert(den, x0, steps, fp_iters=fp_iters)
    back = sample_euler(den, traj.z_n, None, traj.schedule)
    return float(np.abs(back - field).mean()), traj


def circular_scene(h=24, w=24, radius=6, seed=5):
    rng = Rng(seed)
    x0 = 1.5 + 0.05 * rng.normal((h, w, 1))
    yy, xx = np.mgrid[0:h, 0:w]
    circle = (yy - h / 2) ** 2 + (xx - w / 2) ** 2 <= radius**2
    labels = np.where(circle, 2, 1).astype(np.uint8)
    return x0, circle, labels


class TestInvert:
    def test_constant_direction_one_step_round_trip(self):
        den = ConstantDirection(0.25)
        x0 = np.full((4, 4, 1), 0.5)
        traj = invert(den, x0, steps=1)
        assert np.array_equal(traj.z_n, np.full((4, 4, 1), 20.5))
        assert np.array_equal(reconstruct(traj), x0)
        fresh = sample_euler(den, traj.z_n, None, traj.schedule)
        assert np.array_equal(fresh, x0)

    def test_gaussian_round_trip_accuracy(self):
        den = GaussianAnalyticDenoiser(mu=0.4, s=0.8)
        x0 = 0.4 + 0.35 * Rng(7).normal((16, 16, 1))
        mae_40, _ = fresh_roundtrip(den, x0, 40)
        mae_10, _ = fresh_roundtrip(den, x0, 10)
        assert mae_40 <= 1e-3
        assert mae_10 > mae_40

    def test_round_trip_error_non_increasing_in_steps(self):
        den = GaussianAnalyticDenoiser(mu=0.4, s=0.8)
        x0 = 0.4 + 0.35 * Rng(7).normal((16, 16, 1))
        maes = [fresh_roundtrip(den, x0, steps)[0] for steps in (10, 20, 40, 80)]
        for coarse, fine in zip(maes, maes[1:]):
            assert fine <= coarse

    def test_replay_reconstruction_is_tight(self):
        den = GaussianAnalyticDenoiser(mu=0.4, s=0.8)
        x0 = 0.4 + 0.35 * Rng(7).normal((16, 16, 1))
        traj = invert(den, x0, 40)
        assert float(np.abs(reconstruct(traj) - x0).mean()) <= 1e-9

    def test_more_fixed_point_passes_help(self):
        base = 0.5 + 0.25 * np.sin(np.arange(16)[:, None] * 0.8) * np.ones((16, 16))
        exemplar = Grid(base + 0.05 * Rng(3).normal((16, 16)))
        den = ExemplarPatchDenoiser(
            [(exemplar, np.zeros((16, 16), dtype=np.uint8))], patch=5, bandwidth=0.1
        )
        x0 = Grid(base + 0.05 * Rng(9).normal((16, 16)))
        mae_1, _ = fresh_roundtrip(den, x0, 12, fp_iters=1)
        mae_4, _ = fresh_roundtrip(den, x0, 12, fp_iters=4)
        assert mae_4 <= mae_1

    def test_history_layout(self):
        den = GaussianAnalyticDenoiser()
        traj = invert(den, np.zeros((5, 6, 2)), steps=7)
        assert traj.eps_history.shape == (7, 5, 6, 2)
        assert traj.z_n.shape == (5, 6, 2)
        assert traj.provenance == "inversion"
        assert traj.n_steps == 7

    def test_invert_validation(self):
        den = GaussianAnalyticDenoiser()
        x0 = np.zeros((4, 4, 1))
        with pytest.raises(SamplerError):
            invert(den, x0, steps=0)
        with pytest.raises(SamplerError):
            invert(den, x0, steps=4, fp_iters=0)
        with pytest.raises(SamplerError):
            invert(den, x0, steps=4, schedule=build_schedule(5))
        with pytest.raises(SamplerError, match="inverting"):
            invert(ExplodingDenoiser(), x0, steps=2)


class TestRecordGeneration:
    def test_generation_replay_is_bit_exact(self):
        den = GaussianAnalyticDenoiser(mu=0.2, s=0.6)
        z_noise = 3.0 * Rng(11).normal((8, 8, 1))
        image, traj = record_generation(den, z_noise, build_schedule(12))
        assert traj.provenance == "generation"
        assert np.array_equal(reconstruct(traj), image)


class TestMix:
    def test_boundary_indices_exact(self):
        rng = Rng(1)
        fresh = rng.normal((3, 3, 1))
        stored = rng.normal((3, 3, 1))
        at_top = mix(fresh, stored, 8, 8, 0.3)
        at_zero = mix(fresh, stored, 0, 8, 0.3)
        assert np.array_equal(at_top, stored)
        assert np.array_equal(at_zero, fresh)
        at_top[0, 0, 0] = 99.0
        assert stored[0, 0, 0] != 99.0

    def test_midpoint_factor_value(self):
        fresh = np.zeros((2, 2, 1))
        stored = np.ones((2, 2, 1))
        out = mix(fresh, stored, 1, 2, 0.3)
        assert np.allclose(out, 0.5**0.3, atol=1e-15)
        assert abs(0.5**0.3 - 0.8122523963562356) < 1e-12

    def test_factor_monotone_in_index(self):
        fresh = np.zeros((1, 1, 1))
        stored = np.ones((1, 1, 1))
        factors = [float(mix(fresh, stored, i, 10, 0.3)[0, 0, 0]) for i in range(11)]
        for lo, hi in zip(factors, factors[1:]):
            assert hi > lo

    def test_mix_validation(self):
        with pytest.raises(GridFormatError):
            mix(np.zeros((2, 2, 1)), np.zeros((3, 2, 1)), 1, 2, 0.3)
        with pytest.raises(GridFormatError):
            mix(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), 3, 2, 0.3)


class TestTrajectoryType:
    def test_history_length_must_match_steps(self):
        with pytest.raises(GridFormatError, match="entries"):
            Trajectory(build_schedule(4), np.zeros((3, 2, 2, 1)), np.zeros((2, 2, 1)))

    def test_entry_shape_must_match_state(self):
        with pytest.raises(GridFormatError, match="match"):
            Trajectory(build_schedule(4), np.zeros((4, 3, 2, 1)), np.zeros((2, 2, 1)))

    def test_unknown_provenance(self):
        with pytest.raises(GridFormatError, match="provenance"):
            Trajectory(
                build_schedule(2),
                np.zeros((2, 2, 2, 1)),
                np.zeros((2, 2, 1)),
                provenance="dreamt",
            )

    def test_crop_replays_like_the_full_field(self):
        den = GaussianAnalyticDenoiser(mu=0.1, s=0.7)
        traj = invert(den, Rng(2).normal((10, 12, 1)), steps=6)
        window = traj.crop(2, 7, 3, 9)
        assert np.array_equal(reconstruct(window), reconstruct(traj)[2:7, 3:9, :])


class TestEditRequest:
    def test_alpha_must_be_positive(self):
        labels = LabelMap(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(GridFormatError, match="alpha"):
            EditRequest(labels, np.zeros((4, 4), dtype=bool), alpha=0.0)

    def test_background_mode_is_checked(self):
        labels = LabelMap(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(GridFormatError, match="background"):
            EditRequest(labels, np.zeros((4, 4), dtype=bool), background_mode="omit")

    def test_mask_and_condition_share_shape(self):
        labels = LabelMap(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(GridFormatError, match="share"):
            EditRequest(labels, np.zeros((4, 5), dtype=bool))


class TestRegenerateWithEdit:
    def test_empty_mask_replays_exactly(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        x0, _, labels = circular_scene()
        traj = invert(den, x0, 30)
        req = EditRequest(LabelMap(labels), np.zeros(labels.shape, dtype=bool))
        out = regenerate_with_edit(den, traj, req)
        assert np.array_equal(out, reconstruct(traj))

    def test_single_step_edit_keeps_stored_direction(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        x0, circle, labels = circular_scene()
        traj = invert(den, x0, 1)
        req = EditRequest(LabelMap(labels), np.ones(labels.shape, dtype=bool))
        out = regenerate_with_edit(den, traj, req)
        assert np.array_equal(out, reconstruct(traj))

    def test_alpha_limit_matches_fresh_conditional_after_first_step(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        x0, circle, labels = circular_scene()
        traj = invert(den, x0, 30)
        req = EditRequest(
            LabelMap(labels), np.ones(labels.shape, dtype=bool), alpha=1e9
        )
        out = regenerate_with_edit(den, traj, req)
        z = traj.z_n.copy()
        sig = traj.schedule.sigmas
        for k in range(traj.n_steps):
            if k == 0:
                z = z + (sig[1] - sig[0]) * traj.eps_history[0]
            else:
                eps_hat = cfg(den, z, LabelMap(labels), float(sig[k]), 4.0)
                z = z + (sig[k + 1] - sig[k]) * eps_hat
        assert np.array_equal(out, z)

    def test_circular_mask_moves_masked_mode_only(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        x0, circle, labels = circular_scene()
        traj = invert(den, x0, 30)
        req = EditRequest(LabelMap(labels), circle)
        out = regenerate_with_edit(den, traj, req)
        replay = reconstruct(traj)
        outside = ~circle
        assert np.array_equal(out[outside], replay[outside])
        assert float(np.abs(out[outside] - x0[outside]).max()) <= 1e-6
        assert float(out[circle].mean()) < 0.0
        assert float(x0[circle].mean()) > 1.4

    def test_literal_zero_factor_regenerates_background(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        x0, circle, labels = circular_scene()
        traj = invert(den, x0, 30)
        req = EditRequest(
            LabelMap(labels), circle, background_mode="literal_zero_factor"
        )
        out = regenerate_with_edit(den, traj, req)
        replay = reconstruct(traj)
        outside = ~circle
        assert np.all(np.isfinite(out))
        assert not np.array_equal(out[outside], replay[outside])

    def test_step_count_mismatch_rejected(self):
        den = LabeledGaussianDenoiser({1: 1.5}, s=0.4)
        x0, circle, labels = circular_scene()
        traj = invert(den, x0, 5)
        req = EditRequest(LabelMap(labels), circle, steps=6)
        with pytest.raises(ValueError, match="steps"):
            regenerate_with_edit(den, traj, req)

    def test_mask_must_cover_trajectory_field(self):
        den = LabeledGaussianDenoiser({1: 1.5}, s=0.4)
        x0, _, _ = circular_scene()
        traj = invert(den, x0, 5)
        small = LabelMap(np.zeros((8, 8), dtype=np.uint8))
        req = EditRequest(small, np.zeros((8, 8), dtype=bool))
        with pytest.raises(GridFormatError, match="cover"):
            regenerate_with_edit(den, traj, req)


class TestLocalizedEdit:
    def scene(self, h=48, w=48, steps=5, seed=4):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        image = Grid(1.5 + 0.05 * Rng(seed).normal((h, w, 1)))
        traj = invert(den, image, steps)
        return den, image, traj

    def test_empty_brush_is_identity_without_denoiser_calls(self):
        den, image, traj = self.scene()
        recorder = RecordingDenoiser(den)
        labels = LabelMap(np.ones((48, 48), dtype=np.uint8))
        out = localized_edit(
            recorder, traj, image, np.zeros((48, 48), dtype=bool), labels
        )
        assert out is image
        assert recorder.calls == 0

    def test_changes_confined_to_a_min_patch_window(self):
        den, image, traj = self.scene()
        mask = np.zeros((48, 48), dtype=bool)
        mask[30:33, 30:33] = True
        labels = LabelMap(np.where(mask, 2, 1).astype(np.uint8))
        out = localized_edit(recorder := RecordingDenoiser(den), traj, image, mask, labels, min_patch=8)
        changed = np.any(out.data != image.data, axis=2)
        assert changed[mask].any()
        ys, xs = np.nonzero(changed)
        assert ys.max() - ys.min() + 1 <= 8
        assert xs.max() - xs.min() + 1 <= 8
        assert all(shape == (8, 8, 1) for shape in recorder.shapes)

    def test_interior_mask_uses_default_patch_size(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        image = Grid(1.5 + 0.05 * Rng(4).normal((600, 600, 1)))
        traj = invert(den, image, 3, fp_iters=2)
        mask = np.zeros((600, 600), dtype=bool)
        mask[296:304, 296:304] = True
        labels = LabelMap(np.where(mask, 2, 1).astype(np.uint8))
        recorder = RecordingDenoiser(den)
        out = localized_edit(recorder, traj, image, mask, labels)
        assert set(recorder.shapes) == {(442, 442, 1)}
        assert recorder.calls == 2 * traj.n_steps
        changed = np.any(out.data != image.data, axis=2)
        ys, xs = np.nonzero(changed)
        assert ys.max() - ys.min() + 1 <= 442
        assert xs.max() - xs.min() + 1 <= 442

    def test_patch_clamps_to_small_images(self):
        den, image, traj = self.scene(h=24, w=24)
        mask = np.zeros((24, 24), dtype=bool)
        mask[10:12, 10:12] = True
        labels = LabelMap(np.where(mask, 2, 1).astype(np.uint8))
        recorder = RecordingDenoiser(den)
        localized_edit(recorder, traj, image, mask, labels)
        assert set(recorder.shapes) == {(24, 24, 1)}

    def test_disjoint_edits_commute_exactly(self):
        den, image, traj = self.scene()
        mask_a = np.zeros((48, 48), dtype=bool)
        mask_a[6:9, 6:9] = True
        mask_b = np.zeros((48, 48), dtype=bool)
        mask_b[38:41, 38:41] = True
        labels_a = LabelMap(np.where(mask_a, 2, 1).astype(np.uint8))
        labels_b = LabelMap(np.where(mask_b, 2, 1).astype(np.uint8))

        def edit(img, mask, labels):
            return localized_edit(den, traj, img, mask, labels, min_patch=8)

        ab = edit(edit(image, mask_a, labels_a), mask_b, labels_b)
        ba = edit(edit(image, mask_b, labels_b), mask_a, labels_a)
        assert np.array_equal(ab.data, ba.data)

    def test_masked_region_adopts_new_mode(self):
        den, image, traj = self.scene(steps=12)
        mask = np.zeros((48, 48), dtype=bool)
        mask[20:28, 20:28] = True
        labels = LabelMap(np.where(mask, 2, 1).astype(np.uint8))
        out = localized_edit(den, traj, image, mask, labels, min_patch=16)
        assert float(out.data[mask].mean()) < float(image.data[mask].mean()) - 0.5

    def test_trajectory_must_match_image(self):
        den, image, traj = self.scene()
        other = Grid(np.zeros((20, 20, 1)))
        labels = LabelMap(np.ones((20, 20), dtype=np.uint8))
        with pytest.raises(GridFormatError, match="match"):
            localized_edit(den, traj, other, np.ones((20, 20), dtype=bool), labels)


class TestTransferFeature:
    def test_matches_manual_invert_and_regenerate(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        target = Grid(1.5 + 0.05 * Rng(6).normal((20, 20, 1)))
        yy, xx = np.mgrid[0:20, 0:20]
        circle = (yy - 10) ** 2 + (xx - 10) ** 2 <= 25
        labels = LabelMap(np.where(circle, 2, 0).astype(np.uint8))
        out = transfer_feature(den, target, labels, steps=8, fp_iters=3)
        traj = invert(den, target, 8, fp_iters=3)
        req = EditRequest(labels, circle)
        manual = regenerate_with_edit(den, traj, req)
        assert np.array_equal(out, manual)

    def test_matches_localized_edit_when_patch_covers_image(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        target = Grid(1.5 + 0.05 * Rng(6).normal((20, 20, 1)))
        yy, xx = np.mgrid[0:20, 0:20]
        circle = (yy - 10) ** 2 + (xx - 10) ** 2 <= 25
        labels = LabelMap(np.where(circle, 2, 0).astype(np.uint8))
        out = transfer_feature(den, target, labels, steps=8)
        traj = invert(den, target, 8)
        local = localized_edit(den, traj, target, circle, labels)
        assert np.allclose(out, local.data, atol=1e-4)
        assert np.array_equal(out, local.data)

    def test_empty_condition_returns_target_appearance(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        target = Grid(1.5 + 0.05 * Rng(6).normal((16, 16, 1)))
        labels = LabelMap(np.zeros((16, 16), dtype=np.uint8))
        out = transfer_feature(den, target, labels, steps=12)
        assert float(np.abs(out - target.data).mean()) <= 1e-6

    def test_condition_mask_pulls_toward_new_mode(self):
        den = LabeledGaussianDenoiser({1: 1.5, 2: -1.5}, s=0.4)
        target = Grid(1.5 + 0.05 * Rng(5).normal((24, 24, 1)))
        yy, xx = np.mgrid[0:24, 0:24]
        circle = (yy - 12) ** 2 + (xx - 12) ** 2 <= 36
        labels = LabelMap(np.where(circle, 2, 0).astype(np.uint8))
        out = transfer_feature(den, target, labels, steps=20)
        outside = ~circle
        assert float(np.abs(out[outside] - target.data[outside]).max()) <= 1e-6
        assert float(out[circle].mean()) < 0.5


class TestTrajectoryStore:
    def test_save_load_round_trip_quantizes_to_float32(self, tmp_path):
        den = GaussianAnalyticDenoiser(mu=0.4, s=0.8)
        traj = invert(den, Rng(8).normal((8, 8, 1)), steps=5)
        store = TrajectoryStore(tmp_path / "store")
        store.save("img-1", traj)
        loaded = store.load("img-1")
        assert loaded.provenance == "inversion"
        assert np.array_equal(loaded.schedule.sigmas, traj.schedule.sigmas)
        assert np.array_equal(
            loaded.z_n, traj.z_n.astype(np.float32).astype(np.float64)
        )
        assert np.array_equal(
            loaded.eps_history,
            traj.eps_history.astype(np.float32).astype(np.float64),
        )
        assert np.allclose(reconstruct(loaded), reconstruct(traj), atol=1e-3)

    def test_directory_layout(self, tmp_path):
        den = GaussianAnalyticDenoiser()
        traj = invert(den, np.zeros((4, 4, 1)), steps=3)
        store = TrajectoryStore(tmp_path / "store")
        store.save("tex", traj)
        names = sorted(os.listdir(tmp_path / "store" / "tex"))
        assert names == ["eps_0.txf1", "eps_1.txf1", "eps_2.txf1", "meta", "z_N.txf1"]

    def test_missing_trajectory_instructs_invert_first(self, tmp_path):
        store = TrajectoryStore(tmp_path / "store")
        assert not store.has("ghost")
        with pytest.raises(TrajectoryMissingError, match="invert"):
            store.load("ghost")

    def test_delete_and_has(self, tmp_path):
        den = GaussianAnalyticDenoiser()
        traj = invert(den, np.zeros((4, 4, 1)), steps=2)
        store = TrajectoryStore(tmp_path / "store")
        store.save("tex", traj)
        assert store.has("tex")
        store.delete("tex")
        assert not store.has("tex")
        store.delete("tex")

    def test_rejects_path_like_ids(self, tmp_path):
        store = TrajectoryStore(tmp_path / "store")
        with pytest.raises(ValueError, match="image id"):
            store.has("a/b")
        with pytest.raises(ValueError, match="image id"):
            store.load("..")
