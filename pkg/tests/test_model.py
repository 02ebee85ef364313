import logging
import math

import numpy as np
import pytest

from flod.model import (
    GaussianLevelSet,
    MultiLevelModel,
    clone_level,
    covariance,
    effective_scale,
    init_next_level,
    opacity,
    scale_constraint,
)
from conftest import random_level_set, ring_camera


class TestScaleConstraint:
    def test_paper_config_level_one(self):
        assert scale_constraint(1, 0.2, 4, 5) == 0.2

    def test_interior_level(self):
        assert scale_constraint(3, 0.2, 4, 5) == pytest.approx(0.0125, abs=0)

    def test_top_level_is_zero(self):
        assert scale_constraint(5, 0.2, 4, 5) == 0.0

    def test_strictly_decreasing_and_zero_at_top(self):
        vals = [scale_constraint(l, 0.2, 4, 5) for l in range(1, 6)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.0

    @pytest.mark.parametrize("level", [0, 6, -1])
    def test_level_out_of_range(self, level):
        with pytest.raises(ValueError):
            scale_constraint(level, 0.2, 4, 5)

    def test_bad_tau_rho(self):
        with pytest.raises(ValueError):
            scale_constraint(1, -0.1, 4, 5)
        with pytest.raises(ValueError):
            scale_constraint(1, 0.2, 1.0, 5)


class TestEffectiveScale:
    def test_zero_offset(self):
        np.testing.assert_allclose(effective_scale(np.zeros(3), 0.05), 1.05)

    def test_direct_substitution(self):
        out = effective_scale(np.full(3, math.log(0.15)), 0.05)
        np.testing.assert_allclose(out, 0.2, rtol=1e-15)

    def test_never_below_floor(self):
        out = effective_scale(np.full(3, -30.0), 0.2)
        assert np.all(out > 0.2)
        np.testing.assert_allclose(out, 0.2, atol=1e-12)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(covariance(np.ones(3), [1, 0, 0, 0]), np.eye(3))

    def test_axis_scaling(self):
        np.testing.assert_allclose(
            covariance(np.array([2.0, 1.0, 1.0]), [1, 0, 0, 0]), np.diag([4.0, 1.0, 1.0]))

    def test_rotation_90deg_about_z(self):
        # oracle: evaluate R S S^T R^T with an explicitly constructed R
        q = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])
        s = np.array([2.0, 1.0, 1.0])
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        expected = rot @ np.diag(s) @ np.diag(s) @ rot.T
        got = covariance(s, q)
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(got, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_psd_and_determinant(self, rng):
        for _ in range(50):
            s = rng.uniform(0.1, 2.0, 3)
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            cov = covariance(s, q)
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            eig = np.linalg.eigvalsh(cov)
            assert np.all(eig > 0)
            np.testing.assert_allclose(sorted(eig), sorted(s * s), rtol=1e-9)
            np.testing.assert_allclose(np.linalg.det(cov), np.prod(s * s), rtol=1e-9)

    def test_nonunit_quaternion_normalized_and_flagged(self, caplog):
        with caplog.at_level(logging.DEBUG, logger="flod.model"):
            got = covariance(np.ones(3), np.array([2.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(got, np.eye(3))
        assert any("normalizing" in r.message for r in caplog.records)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            covariance(np.array([1.0, 0.0, 1.0]), [1, 0, 0, 0])


class TestOpacity:
    def test_midpoint(self):
        assert opacity(0.0) == 0.5

    def test_saturation(self):
        assert opacity(20.0) == pytest.approx(1.0, abs=1e-8)
        assert opacity(-20.0) == pytest.approx(0.0, abs=1e-8)

    def test_monotone(self):
        x = np.linspace(-6, 6, 100)
        y = opacity(x)
        assert np.all(np.diff(y) > 0)


class TestInitNextLevel:
    def test_scale_reencoding(self):
        prev = GaussianLevelSet(
            positions=np.zeros((2, 3)),
            scale_params=np.full((2, 3), math.log(0.15)),  # effective 0.2 at s_min 0.05
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            opacity_params=np.zeros(2),
            colors=np.full((2, 3), 0.5),
            s_min=0.05, level=1,
        )
        nxt = init_next_level(prev, 0.0125)
        np.testing.assert_allclose(nxt.scale_params, math.log(0.2 - 0.0125), rtol=1e-12)
        np.testing.assert_allclose(nxt.effective_scales, prev.effective_scales, rtol=1e-12)
        assert nxt.level == 2 and nxt.s_min == 0.0125
        np.testing.assert_array_equal(nxt.positions, prev.positions)
        np.testing.assert_array_equal(nxt.opacity_params, prev.opacity_params)

    def test_render_unchanged_across_transition(self, rng):
        from flod.rasterizer import render

        prev = random_level_set(rng, 12, s_min=0.1)
        nxt = init_next_level(prev, 0.025)
        cam = ring_camera(0.7)
        before = render(prev, cam, (0.1, 0.1, 0.1)).rgb
        after = render(nxt, cam, (0.1, 0.1, 0.1)).rgb
        assert np.max(np.abs(before - after)) <= 1e-6

    def test_clamp_at_boundary(self):
        eps = 1e-12
        prev = GaussianLevelSet(
            positions=np.zeros((1, 3)),
            scale_params=np.full((1, 3), math.log(eps)),  # effective = s_min + eps
            rotations=[[1.0, 0, 0, 0]],
            opacity_params=np.zeros(1),
            colors=np.full((1, 3), 0.5),
            s_min=0.1, level=1,
        )
        nxt = init_next_level(prev, 0.05)
        assert nxt.transition_clamped == 0
        np.testing.assert_allclose(nxt.effective_scales, prev.effective_scales,
                                   atol=2 * eps)
        # and a case that genuinely clamps (gap below the 1e-12 floor)
        prev.scale_params[:] = np.log(1e-14)
        tight = init_next_level(prev, 0.1 - 1e-15)
        assert tight.transition_clamped == 3
        assert np.all(np.isfinite(tight.scale_params))

    def test_rejects_larger_floor(self):
        prev = random_level_set(np.random.default_rng(1), 3, s_min=0.05)
        with pytest.raises(ValueError):
            init_next_level(prev, 0.05)


class TestCloneLevel:
    def test_mutation_isolation(self, rng):
        original = random_level_set(rng, 7, s_min=0.1)
        clone = clone_level(original)
        snapshot = clone_level(clone)
        original.positions += 10.0
        original.colors[:] = 0.0
        np.testing.assert_array_equal(clone.positions, snapshot.positions)
        np.testing.assert_array_equal(clone.colors, snapshot.colors)

    def test_empty_set(self):
        empty = GaussianLevelSet(
            positions=np.zeros((0, 3)), scale_params=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacity_params=np.zeros(0),
            colors=np.zeros((0, 3)), s_min=0.2, level=1)
        assert len(clone_level(empty)) == 0

    def test_roundtrip_through_file(self, rng, tmp_path):
        from flod.io import load_level, save_level

        original = random_level_set(rng, 20, s_min=0.05)
        clone = clone_level(original)
        save_level(tmp_path / "lv.ply", clone, tau=0.05, rho=4.0, l_max=2)
        loaded, _ = load_level(tmp_path / "lv.ply")
        # identity is defined at the float32 representation
        np.testing.assert_array_equal(loaded.positions,
                                      clone.positions.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(loaded.colors,
                                      clone.colors.astype(np.float32).astype(np.float64))


class TestMultiLevelModel:
    def test_floor_ladder_enforced(self, rng):
        levels = [random_level_set(rng, 4, s_min=scale_constraint(l, 0.2, 4, 3), level=l)
                  for l in (1, 2, 3)]
        model = MultiLevelModel(levels=levels, tau=0.2, rho=4.0, l_max=3)
        floors = [lv.s_min for lv in model.levels]
        assert floors == sorted(floors, reverse=True)
        assert floors[-1] == 0.0

    def test_wrong_floor_rejected(self, rng):
        levels = [random_level_set(rng, 4, s_min=0.3, level=1),
                  random_level_set(rng, 4, s_min=0.0, level=2)]
        with pytest.raises(ValueError):
            MultiLevelModel(levels=levels, tau=0.2, rho=4.0, l_max=2)

    def test_mismatched_array_lengths_rejected(self):
        with pytest.raises(ValueError):
            GaussianLevelSet(
                positions=np.zeros((3, 3)), scale_params=np.zeros((2, 3)),
                rotations=np.zeros((3, 4)), opacity_params=np.zeros(3),
                colors=np.zeros((3, 3)), s_min=0.0, level=1)
