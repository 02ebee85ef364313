import math

import numpy as np
import pytest

import flod.selective as selective_mod
from flod.model import MultiLevelModel, scale_constraint
from flod.rasterizer import render
from flod.selective import (
    SelectionConfig,
    build_subset,
    d_proj,
    selection_bands,
    selective_session,
)
from conftest import random_level_set, ring_camera


def make_model(rng, counts=(6, 10, 20), tau=0.2, rho=4.0):
    l_max = len(counts)
    levels = [random_level_set(rng, n, s_min=scale_constraint(l, tau, rho, l_max),
                               level=l) for l, n in enumerate(counts, start=1)]
    return MultiLevelModel(levels=levels, tau=tau, rho=rho, l_max=l_max)


class TestDProj:
    def test_substitution(self):
        assert d_proj(0.05, 1.0, 1000.0) == 50.0

    def test_zero_floor_gives_zero(self):
        assert d_proj(0.0, 8.0, 640.0) == 0.0

    def test_doubling_gamma_halves_distance(self):
        assert d_proj(0.05, 2.0, 1000.0) == pytest.approx(d_proj(0.05, 1.0, 1000.0) / 2)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            d_proj(0.05, 0.0, 100.0)


class TestBands:
    def test_partition_properties(self, rng):
        model = make_model(rng, counts=(3, 3, 3, 3, 3))
        for _ in range(100):
            gamma = float(rng.uniform(0.2, 40.0))
            f = float(rng.uniform(10.0, 2000.0))
            l_start = int(rng.integers(1, 6))
            l_end = int(rng.integers(l_start, 6))
            cfg = SelectionConfig(l_start=l_start, l_end=l_end, gamma=gamma)
            bands = selection_bands(model, cfg, f)
            los = [bands.lower[l] for l in bands.levels]
            his = [bands.upper[l] for l in bands.levels]
            assert los[-1] == 0.0 and his[0] == math.inf
            # contiguous half-open intervals: upper(l) == lower(l-1)
            for l in bands.levels[:-1]:
                assert bands.upper[l + 1] == bands.lower[l]
            # cover: any distance belongs to exactly one band
            for d in rng.uniform(0, 3 * max(los[0], 1.0), 20):
                owners = [l for l in bands.levels
                          if bands.lower[l] <= d < bands.upper[l]]
                assert len(owners) == 1
                assert bands.assign(float(d)) == owners[0]

    def test_edge_ownership_follows_closed_lower_bound(self, rng):
        # membership is d(l) <= d_G < d(l-1): a distance exactly on a shared
        # edge belongs to the band whose (closed) lower bound it is
        model = make_model(rng)
        cfg = SelectionConfig(l_start=1, l_end=3, gamma=8.0)
        bands = selection_bands(model, cfg, 64.0)
        edge_32 = bands.lower[2]  # upper edge of band 3, lower edge of band 2
        assert bands.upper[3] == edge_32
        assert bands.assign(edge_32) == 2
        just_inside = np.nextafter(edge_32, 0.0)
        assert bands.assign(float(just_inside)) == 3

    def test_out_of_range_rejected(self, rng):
        model = make_model(rng)
        with pytest.raises(ValueError):
            selection_bands(model, SelectionConfig(l_start=1, l_end=4), 64.0)


class TestBuildSubset:
    def test_single_level_range_is_whole_level(self, rng):
        model = make_model(rng)
        cfg = SelectionConfig(l_start=2, l_end=2, gamma=8.0)
        subset, info = build_subset(model, np.zeros(3), cfg, 64.0)
        level = model.level(2).activate()
        np.testing.assert_array_equal(subset.positions, level.positions)
        np.testing.assert_array_equal(subset.scales, level.scales)
        assert info["count"] == len(level)

    def test_band_membership_brute_force(self, rng):
        # three Gaussians at known distances against edges ~{0, 50, 500}
        model = make_model(rng, counts=(4, 4, 4, 4, 4), tau=1.0, rho=10.0)
        for lv, d in zip((5, 4, 3), (10.0, 100.0, 1000.0)):
            model.level(lv).positions[0] = np.array([d, 0.0, 0.0])
        cfg = SelectionConfig(l_start=3, l_end=5, gamma=1.0)
        # s_min(4) = 1e-3, s_min(3) = 1e-2 -> f = 50 / 1e-3
        f = 50000.0
        bands = selection_bands(model, cfg, f)
        assert bands.lower[4] == pytest.approx(50.0) and \
            bands.lower[3] == pytest.approx(500.0)
        subset, info = build_subset(model, np.zeros(3), cfg, f)
        # brute-force band membership for the three probes
        for lv, d in zip((5, 4, 3), (10.0, 100.0, 1000.0)):
            owner = [l for l in (3, 4, 5)
                     if bands.lower[l] <= d < bands.upper[l]]
            assert owner == [lv]
            probe = model.level(lv).positions[0]
            assert any(np.array_equal(p, probe) for p in subset.positions)

    def test_monotone_cost_vs_finest_level(self, rng):
        model = make_model(rng, counts=(5, 12, 40))
        ref = np.zeros(3)
        for l_start in (1, 2, 3):
            cfg = SelectionConfig(l_start=l_start, l_end=3, gamma=4.0)
            _, info = build_subset(model, ref, cfg, 64.0)
            assert info["count"] <= len(model.level(3))

    def test_empty_model_gives_empty_subset(self):
        import flod.model as m

        empty = m.GaussianLevelSet(
            positions=np.zeros((0, 3)), scale_params=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacity_params=np.zeros(0),
            colors=np.zeros((0, 3)), s_min=0.0, level=1)
        model = MultiLevelModel(levels=[empty], tau=0.2, rho=4.0, l_max=1)
        subset, info = build_subset(model, np.zeros(3), SelectionConfig(1, 1), 64.0)
        assert len(subset) == 0 and info["count"] == 0


class TestSession:
    def trajectory(self, n, size=32):
        return [ring_camera(a, size=size, fx=float(size))
                for a in np.linspace(0, 2 * np.pi, n, endpoint=False)]

    def test_update_period_longer_than_trajectory_builds_once(self, rng):
        model = make_model(rng)
        cams = self.trajectory(10)
        res = selective_session(model, cams, SelectionConfig(1, 3, 8.0, "current", 50))
        assert len(res.builds) == 1
        assert all(s["generation"] == 1 for s in res.stats)

    def test_stationary_camera_snapshots_identical(self, rng):
        model = make_model(rng)
        cams = [ring_camera(0.5, size=32, fx=32.0)] * 12
        res = selective_session(model, cams, SelectionConfig(1, 3, 8.0, "current", 4),
                                keep_frames=True)
        assert len({tuple(b["ref_pos"]) for b in res.builds}) == 1
        first = res.frames[0]
        assert all(np.array_equal(f, first) for f in res.frames)

    def test_background_replay_bit_identical_and_stamped(self, rng):
        model = make_model(rng, counts=(8, 20, 60))
        cams = self.trajectory(40)
        cfg = SelectionConfig(1, 3, 4.0, "current", 10)
        bg = selective_session(model, cams, cfg, keep_frames=True)
        assert [s["view"] for s in bg.stats] == list(range(40))
        replay = selective_session(model, cams, cfg, mode="replay",
                                   swap_schedule=bg.swap_schedule(), keep_frames=True)
        for i, (fa, fb) in enumerate(zip(bg.frames, replay.frames)):
            assert np.array_equal(fa, fb), f"frame {i} differs"
        # every frame is stamped with the generation that rendered it
        gens_bg = [s["generation"] for s in bg.stats]
        gens_rp = [s["generation"] for s in replay.stats]
        assert gens_bg == gens_rp
        assert gens_bg == sorted(gens_bg)  # monotone swaps, no torn frames

    def test_sync_mode_schedule(self, rng):
        model = make_model(rng)
        cams = self.trajectory(30)
        res = selective_session(model, cams, SelectionConfig(1, 3, 8.0, "current", 10),
                                mode="sync")
        assert [(b["generation"], b["activated_at"]) for b in res.builds] == \
            [(1, 0), (2, 10), (3, 20)]

    def test_rebuild_failure_keeps_previous_snapshot(self, rng, monkeypatch):
        model = make_model(rng)
        cams = self.trajectory(12)
        original = selective_mod.build_subset
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:  # the first periodic rebuild fails
                raise RuntimeError("injected failure")
            return original(*args, **kwargs)

        monkeypatch.setattr(selective_mod, "build_subset", flaky)
        res = selective_session(model, cams, SelectionConfig(1, 3, 8.0, "current", 4),
                                mode="sync")
        assert len(res.diagnostics) == 1
        assert res.diagnostics[0]["event"] == "rebuild_failed"
        # views keep rendering from the previous generation
        gens = [s["generation"] for s in res.stats]
        assert gens[4] == 1 and gens[8] == 3

    def test_empty_trajectory_rejected(self, rng):
        with pytest.raises(ValueError):
            selective_session(make_model(rng), [], SelectionConfig(1, 3))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SelectionConfig(l_start=2, l_end=1)
        with pytest.raises(ValueError):
            SelectionConfig(l_start=1, l_end=1, gamma=0.0)
        with pytest.raises(ValueError):
            SelectionConfig(l_start=1, l_end=1, ref_policy="nearest")
