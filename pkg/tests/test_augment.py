"""Augmentation ops and the gated, order-shuffled pipeline."""

import numpy as np
import pytest

from util import random_volume

from voxcnn.augment import (
    CUTOUT_FILL, GATE_ORDER, RATE_GATED, AugmentConfig,
    add_gaussian_noise, apply_cutout_rects, apply_pipeline, apply_plan,
    cutout, flip, gamma_contrast, gaussian_blur, rotate_inplane, sample_plan,
)
from voxcnn.rng import Rng


def smooth_volume(seed, shape=(4, 48, 48)):
    """A band-limited test volume; interpolation bounds need smooth data."""
    vol = random_volume(seed, shape)
    return gaussian_blur(vol, None, 2.0)


class TestNoise:
    def test_std_zero_identity(self):
        vol = random_volume(0)
        out = add_gaussian_noise(vol, Rng(1), 0.0)
        assert out is not vol
        assert np.array_equal(out, vol)

    def test_sample_std_on_constant_volume(self):
        vol = np.full((100, 100, 100), 128.0, dtype=np.float32)
        out = add_gaussian_noise(vol, Rng(2), 10.0)
        delta = out.astype(np.float64) - 128.0
        assert 9.8 <= delta.std() <= 10.2
        assert abs(delta.mean()) < 0.1

    def test_clamped_to_range(self):
        vol = np.full((8, 32, 32), 250.0, dtype=np.float32)
        out = add_gaussian_noise(vol, Rng(3), 20.0)
        assert out.max() <= 255.0 and out.min() >= 0.0

    def test_std_out_of_range(self):
        vol = random_volume(0, (2, 4, 4))
        for bad in (-0.1, 20.1):
            with pytest.raises(ValueError, match="noise std"):
                add_gaussian_noise(vol, Rng(0), bad)


class TestBlur:
    def test_std_zero_identity(self):
        vol = random_volume(4)
        assert np.array_equal(gaussian_blur(vol, None, 0.0), vol)

    def test_constant_volume_unchanged(self):
        vol = np.full((3, 20, 20), 77.0, dtype=np.float32)
        assert np.allclose(gaussian_blur(vol, None, 1.5), 77.0, atol=1e-4)

    def test_single_voxel_peak_matches_kernel(self):
        from oracles import gauss_kernel_2d_peak
        vol = np.zeros((1, 31, 31), dtype=np.float32)
        vol[0, 15, 15] = 255.0
        out = gaussian_blur(vol, None, 1.0)
        expected = 255.0 * gauss_kernel_2d_peak(1.0)
        assert abs(out[0, 15, 15] - expected) / expected < 1e-5

    def test_slicewise_no_depth_mixing(self):
        vol = np.zeros((3, 16, 16), dtype=np.float32)
        vol[1] = 200.0
        out = gaussian_blur(vol, None, 1.0)
        assert np.allclose(out[0], 0.0)
        assert np.allclose(out[2], 0.0)
        assert np.allclose(out[1], 200.0, atol=1e-4)

    def test_kernel_radius_larger_than_slice(self):
        # radius ceil(3*2) = 6 exceeds a 4-wide slice; reflection must hold up
        vol = random_volume(5, (2, 4, 4))
        out = gaussian_blur(vol, None, 2.0)
        assert out.shape == vol.shape
        assert out.min() >= vol.min() - 1e-4 and out.max() <= vol.max() + 1e-4
        const = np.full((2, 4, 4), 13.0, dtype=np.float32)
        assert np.allclose(gaussian_blur(const, None, 2.0), 13.0, atol=1e-4)

    def test_std_out_of_range(self):
        vol = random_volume(0, (2, 4, 4))
        with pytest.raises(ValueError, match="blur std"):
            gaussian_blur(vol, None, 2.5)


class TestRotate:
    def test_angle_zero_identity(self):
        vol = random_volume(6)
        assert np.array_equal(rotate_inplane(vol, None, 0.0), vol)

    def test_ninety_degrees_is_grid_permutation(self):
        vol = random_volume(7, (3, 17, 17))
        out = rotate_inplane(vol, None, 90.0)
        assert np.allclose(out, np.rot90(vol, k=1, axes=(1, 2)), atol=1e-4)
        vol = random_volume(8, (2, 16, 16))  # even extent too
        out = rotate_inplane(vol, None, 90.0)
        assert np.allclose(out, np.rot90(vol, k=1, axes=(1, 2)), atol=1e-4)

    def test_round_trip_fifteen_degrees(self):
        vol = smooth_volume(9)
        back = rotate_inplane(rotate_inplane(vol, None, 15.0), None, -15.0)
        m = 12  # stay away from the zero-filled borders
        diff = np.abs(back[:, m:-m, m:-m].astype(np.float64)
                      - vol[:, m:-m, m:-m].astype(np.float64))
        assert diff.mean() < 2.0

    def test_out_of_bounds_filled_with_zero(self):
        vol = np.full((1, 21, 21), 255.0, dtype=np.float32)
        out = rotate_inplane(vol, None, 45.0)
        assert out[0, 0, 0] == 0.0  # corner leaves the source square
        assert out[0, 10, 10] == 255.0  # center fixed point

    def test_slice_consistency(self):
        vol = random_volume(10, (5, 12, 12))
        out = rotate_inplane(vol, None, 22.5)
        for k in range(5):
            single = rotate_inplane(vol[k:k + 1], None, 22.5)
            assert np.array_equal(out[k], single[0])


class TestFlip:
    def test_involution(self):
        vol = random_volume(11)
        for axis in ("vertical", "horizontal"):
            assert np.array_equal(flip(flip(vol, axis), axis), vol)

    def test_horizontal_moves_columns(self):
        vol = random_volume(12, (2, 4, 6))
        out = flip(vol, "horizontal")
        assert np.array_equal(out[:, :, 0], vol[:, :, 5])
        assert np.array_equal(out[:, :, 5], vol[:, :, 0])

    def test_vertical_moves_rows_not_depth(self):
        vol = random_volume(13, (3, 5, 4))
        out = flip(vol, "vertical")
        assert np.array_equal(out[1], vol[1, ::-1, :])
        assert np.array_equal(out[0, 0], vol[0, 4])  # slice order untouched

    def test_commutes_with_gamma(self):
        vol = random_volume(14, (2, 8, 8))
        a = flip(gamma_contrast(vol, None, 1.7), "horizontal")
        b = gamma_contrast(flip(vol, "horizontal"), None, 1.7)
        assert np.array_equal(a, b)

    def test_bad_axis(self):
        with pytest.raises(ValueError, match="flip axis"):
            flip(random_volume(0, (1, 2, 2)), "depth")


class TestCutout:
    def test_zero_rects_identity(self):
        vol = random_volume(15)
        out = apply_cutout_rects(vol, ())
        assert np.array_equal(out, vol) and out is not vol

    def test_fill_value_and_area_bound(self):
        vol = np.full((4, 224, 224), 7.0, dtype=np.float32)
        for seed in range(30):
            out = cutout(vol, Rng(seed))
            filled = out != 7.0
            if filled.any():
                assert np.unique(out[filled]) == CUTOUT_FILL == 128.0
            frac = filled[0].mean()
            assert frac <= 4 * 0.04 + 1e-9

    def test_identical_positions_across_slices(self):
        vol = np.zeros((6, 50, 50), dtype=np.float32)
        out = cutout(vol, Rng(99))
        for k in range(1, 6):
            assert np.array_equal(out[k], out[0])

    def test_rectangle_shape_is_20_percent_floor(self):
        vol = np.zeros((1, 224, 224), dtype=np.float32)
        for seed in range(40):
            out = cutout(vol, Rng(seed), count_range=(1, 1))
            rows = np.flatnonzero(out[0].any(axis=1))
            cols = np.flatnonzero(out[0].any(axis=0))
            assert rows.size == 44 and cols.size == 44  # int(0.2 * 224)
            assert rows[-1] - rows[0] == 43 and cols[-1] - cols[0] == 43

    def test_mean_count_over_many_draws(self):
        root = Rng(16)
        counts = []
        vol_shape = (1, 40, 40)
        from voxcnn.augment import _draw_cutout_rects
        for i in range(10_000):
            rects = _draw_cutout_rects(root.child(f"{i}"), vol_shape)
            counts.append(len(rects))
        mean = float(np.mean(counts))
        assert abs(mean - 2.0) < 0.05
        assert set(counts) == {0, 1, 2, 3, 4}


class TestGamma:
    def test_identity(self):
        vol = random_volume(17)
        assert np.array_equal(gamma_contrast(vol, None, 1.0), vol)

    def test_endpoints_fixed(self):
        vol = np.array([[[0.0, 255.0]]], dtype=np.float32)
        for g in (0.5, 0.77, 2.0):
            out = gamma_contrast(vol, None, g)
            assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == 255.0

    def test_worked_example(self):
        vol = np.array([[[64.0]]], dtype=np.float32)
        out = gamma_contrast(vol, None, 2.0)
        assert abs(out[0, 0, 0] - 4096.0 / 255.0) < 5e-3  # 16.06 at 2 d.p.

    def test_out_of_range(self):
        vol = random_volume(0, (1, 2, 2))
        for bad in (0.49, 2.01):
            with pytest.raises(ValueError, match="gamma"):
                gamma_contrast(vol, None, bad)


class TestPipeline:
    def test_empty_pipeline_is_bit_identity(self):
        vol = random_volume(18)
        cfg = AugmentConfig(gate_rate=0.0, gate_geometry=True)
        out = apply_pipeline(vol, Rng(0), cfg)
        assert np.array_equal(out, vol)
        assert out is not vol

    def test_seed_determinism(self):
        vol = random_volume(19)
        cfg = AugmentConfig()
        a = apply_pipeline(vol, Rng(77), cfg)
        b = apply_pipeline(vol, Rng(77), cfg)
        c = apply_pipeline(vol, Rng(78), cfg)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_gate_frequencies(self):
        root = Rng(20)
        cfg = AugmentConfig()
        hits = {op: 0 for op in GATE_ORDER}
        n = 10_000
        for i in range(n):
            plan = sample_plan(root.child(f"{i}"), cfg, (2, 8, 8))
            for op in plan.ops:
                hits[op] += 1
        for op in GATE_ORDER:
            frac = hits[op] / n
            if op in RATE_GATED:
                assert abs(frac - 0.5) < 0.02, (op, frac)
            else:
                assert frac == 1.0, (op, frac)  # rotate and cutout always on

    def test_geometry_gating_switch(self):
        root = Rng(21)
        cfg = AugmentConfig(gate_geometry=True)
        hits = {"rotate": 0, "cutout": 0}
        n = 4000
        for i in range(n):
            plan = sample_plan(root.child(f"{i}"), cfg, (2, 8, 8))
            for op in ("rotate", "cutout"):
                hits[op] += op in plan.ops
        for op, c in hits.items():
            assert abs(c / n - 0.5) < 0.03, (op, c / n)

    def test_parameter_distributions_are_uniform(self):
        # empirical CDF within Kolmogorov-style distance of the target
        root = Rng(22)
        cfg = AugmentConfig()
        n = 10_000
        draws = {"noise": [], "blur": [], "angle": [], "gamma": []}
        for i in range(n):
            p = sample_plan(root.child(f"{i}"), cfg, (2, 8, 8))
            draws["noise"].append(p.noise_std)
            draws["blur"].append(p.blur_std)
            draws["angle"].append(p.angle_deg)
            draws["gamma"].append(p.gamma)
        ranges = {"noise": (0.0, 20.0), "blur": (0.0, 2.0),
                  "angle": (-30.0, 30.0), "gamma": (0.5, 2.0)}
        for name, (lo, hi) in ranges.items():
            xs = np.sort(draws[name])
            assert lo <= xs[0] and xs[-1] <= hi
            u = (xs - lo) / (hi - lo)
            ecdf_hi = np.arange(1, n + 1) / n
            ecdf_lo = np.arange(0, n) / n
            dist = max(np.abs(ecdf_hi - u).max(), np.abs(u - ecdf_lo).max())
            assert dist < 0.025, (name, dist)  # 1.63/sqrt(n) ~ 0.016 at alpha 0.01

    def test_order_is_shuffled(self):
        root = Rng(23)
        cfg = AugmentConfig(gate_rate=1.0)
        first = {op: 0 for op in GATE_ORDER}
        n = 10_000
        seen_orders = set()
        for i in range(n):
            plan = sample_plan(root.child(f"{i}"), cfg, (2, 8, 8))
            assert sorted(plan.ops) == sorted(GATE_ORDER)
            first[plan.ops[0]] += 1
            seen_orders.add(plan.ops)
        for op, c in first.items():
            assert abs(c / n - 1.0 / 7.0) < 0.02, (op, c / n)
        assert len(seen_orders) > 2000  # 7! = 5040 possible orders

    def test_pipeline_output_range_and_shape(self):
        cfg = AugmentConfig()
        for i in range(25):
            vol = random_volume(100 + i, (3, 12, 12))
            out = apply_pipeline(vol, Rng(i), cfg)
            assert out.shape == vol.shape
            assert out.min() >= 0.0 and out.max() <= 255.0

    def test_plan_shape_mismatch(self):
        vol = random_volume(24, (2, 8, 8))
        plan = sample_plan(Rng(0), AugmentConfig(), (2, 8, 9))
        with pytest.raises(ValueError, match="does not match plan"):
            apply_plan(vol, plan)

    def test_bad_config(self):
        with pytest.raises(ValueError, match="gate_rate"):
            AugmentConfig(gate_rate=1.5)
        with pytest.raises(ValueError, match="well-ordered"):
            AugmentConfig(gamma_range=(2.0, 0.5))
        with pytest.raises(ValueError, match="cutout_frac"):
            AugmentConfig(cutout_frac=0.0)
