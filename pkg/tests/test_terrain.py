"""Terrain generation, flood truth, canopy masking, BFS propagation."""

import numpy as np
import pytest

from floodseg.loss import violation_rate
from floodseg.raster import ElevationMap
from floodseg.terrain import (
    Region,
    SynthConfig,
    flood_truth,
    gen_dataset,
    gen_terrain,
    generate_region,
    load_dataset,
    mask_canopy,
    propagate_dry,
    propagate_flood,
    render_spectra,
    resolve_water_level,
)


def cfg(**kw):
    base = dict(width=32, height=32, seed=0)
    base.update(kw)
    return SynthConfig(**base)


def elev1d(values):
    return ElevationMap(np.array([values], dtype=np.float32))


class TestGenTerrain:
    def test_deterministic(self):
        a = gen_terrain(cfg(seed=5)).values
        b = gen_terrain(cfg(seed=5)).values
        np.testing.assert_array_equal(a, b)

    def test_zero_roughness_is_bilinear(self):
        e = gen_terrain(cfg(width=33, height=33, roughness=0.0)).values.astype(np.float64)
        n = 32
        u = np.arange(33) / n
        a, b, c, d = e[0, 0], e[0, n], e[n, 0], e[n, n]
        want = (
            a * np.outer(1 - u, 1 - u) + b * np.outer(1 - u, u)
            + c * np.outer(u, 1 - u) + d * np.outer(u, u)
        )
        np.testing.assert_allclose(e, want, atol=1e-5)

    def test_rough_terrain_varies(self):
        for seed in range(10):
            e = gen_terrain(cfg(seed=seed)).values
            assert e.min() < e.max()

    def test_non_square_crop(self):
        e = gen_terrain(cfg(width=48, height=20))
        assert (e.width, e.height) == (48, 20)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match=">= 16"):
            SynthConfig(width=8, height=32)


class TestFloodTruth:
    def test_level_below_min_all_dry(self):
        e = gen_terrain(cfg(seed=1))
        labels = flood_truth(e, e.values.min() - 1.0)
        assert (labels.values == -1).all()

    def test_level_above_max_all_flooded(self):
        e = gen_terrain(cfg(seed=2))
        labels = flood_truth(e, e.values.max())
        assert (labels.values == 1).all()

    def test_basin_fill_hand_example(self):
        labels = flood_truth(elev1d([5.0, 3.0, 1.0, 3.0, 5.0]), 3.0)
        np.testing.assert_array_equal(labels.values[0], [-1, 1, 1, 1, -1])

    def test_enclosed_pit_stays_dry(self):
        # a pit below the level but cut off from the boundary is not a source
        h = np.full((5, 5), 10.0, dtype=np.float32)
        h[2, 2] = 0.0
        labels = flood_truth(ElevationMap(h), 5.0)
        assert (labels.values == -1).all()

    @pytest.mark.parametrize("seed,q", [(0, 0.2), (1, 0.4), (2, 0.6), (3, 0.8)])
    def test_never_violates_physics(self, seed, q):
        e = gen_terrain(cfg(seed=seed, width=48, height=48))
        level = float(np.quantile(e.values, q))
        labels = flood_truth(e, level)
        assert violation_rate(labels.values, labels.values, e) == 0.0


class TestPropagation:
    def test_pit_fill_hand_example(self):
        got = propagate_flood(elev1d([5.0, 3.0, 1.0, 3.0, 5.0]), (0, 1))
        assert got == {(0, 1), (0, 2), (0, 3)}

    def test_seed_at_strict_local_min_alone(self):
        h = np.full((3, 3), 9.0, dtype=np.float32)
        h[1, 1] = 1.0
        assert propagate_flood(ElevationMap(h), (1, 1)) == {(1, 1)}

    def test_flat_terrain_floods_everything(self):
        got = propagate_flood(ElevationMap(np.zeros((4, 6), np.float32)), (2, 3))
        assert len(got) == 24

    def test_flood_set_below_seed_level(self):
        rng = np.random.default_rng(0)
        for seed_idx in range(20):
            e = gen_terrain(cfg(seed=seed_idx))
            px = (int(rng.integers(0, 32)), int(rng.integers(0, 32)))
            got = propagate_flood(e, px)
            assert px in got
            limit = e.values[px]
            assert all(e.values[q] <= limit for q in got)

    def test_path_monotone_variant_subset(self):
        e = gen_terrain(cfg(seed=3))
        px = (10, 10)
        assert propagate_flood(e, px, "path_monotone") <= propagate_flood(e, px)

    def test_hill_climb_hand_example(self):
        got = propagate_dry(elev1d([1.0, 2.0, 3.0, 2.0, 1.0]), (0, 0))
        assert got == {(0, 0), (0, 1), (0, 2)}

    def test_hill_climb_monotone_ramp(self):
        got = propagate_dry(elev1d([1.0, 2.0, 3.0, 4.0]), (0, 0))
        assert got == {(0, 0), (0, 1), (0, 2), (0, 3)}

    def test_hill_climb_from_peak_plateau(self):
        h = np.array([[1.0, 5.0, 5.0, 1.0]], dtype=np.float32)
        assert propagate_dry(ElevationMap(h), (0, 1)) == {(0, 1), (0, 2)}

    def test_dry_set_at_or_above_seed(self):
        for seed_idx in range(10):
            e = gen_terrain(cfg(seed=seed_idx))
            px = (5, 20)
            got = propagate_dry(e, px)
            assert all(e.values[q] >= e.values[px] for q in got)

    def test_out_of_bounds_seed(self):
        with pytest.raises(ValueError, match="out of bounds"):
            propagate_flood(elev1d([1.0, 2.0]), (3, 0))

    def test_pit_fill_from_flooded_seed_stays_in_truth(self):
        # whatever the fill reaches from a truly flooded seed is flooded
        # in the truth as well (water-level semantics agree)
        rng = np.random.default_rng(6)
        for seed_idx in range(5):
            e = gen_terrain(cfg(seed=seed_idx))
            level = float(np.quantile(e.values, 0.5))
            truth = flood_truth(e, level)
            flooded_px = np.argwhere(truth.values == 1)
            px = tuple(flooded_px[rng.integers(0, len(flooded_px))])
            got = propagate_flood(e, px)
            assert all(truth.values[q] == 1 for q in got)


class TestSpectra:
    def test_clean_render_two_colored(self):
        c = cfg(ambiguity_fraction=0.0, noise_sigma=0.0)
        region_elev = gen_terrain(c)
        truth = flood_truth(region_elev, resolve_water_level(c, region_elev))
        disaster, normal = render_spectra(region_elev, truth, c)
        colors = {tuple(disaster.data[:, i, j]) for i in range(32) for j in range(32)}
        assert len(colors) == 2
        assert len({tuple(normal.data[:, i, j]) for i in range(32) for j in range(32)}) == 1

    def test_full_ambiguity_erases_class_signal(self):
        # at fraction 1 the rendering no longer depends on the truth at all
        c = cfg(ambiguity_fraction=1.0, noise_sigma=0.0)
        e = gen_terrain(c)
        truth = flood_truth(e, resolve_water_level(c, e))
        a, _ = render_spectra(e, truth, c)
        b, _ = render_spectra(e, type(truth)((-truth.values).astype(np.int8)), c)
        np.testing.assert_array_equal(a.data, b.data)

    def test_class_means_well_separated(self):
        c = cfg(width=64, height=64)
        e = gen_terrain(c)
        truth = flood_truth(e, resolve_water_level(c, e))
        disaster, _ = render_spectra(e, truth, c)
        flooded = truth.values == 1
        mean_w = disaster.data[:, flooded].mean(axis=1)
        mean_l = disaster.data[:, ~flooded].mean(axis=1)
        assert np.linalg.norm(mean_w - mean_l) >= 3 * c.noise_sigma

    def test_deterministic(self):
        c = cfg(seed=9)
        e = gen_terrain(c)
        truth = flood_truth(e, resolve_water_level(c, e))
        a, _ = render_spectra(e, truth, c)
        b, _ = render_spectra(e, truth, c)
        np.testing.assert_array_equal(a.data, b.data)


class TestCanopy:
    def test_zero_fraction_keeps_truth(self):
        c = cfg(canopy_fraction=0.0)
        e = gen_terrain(c)
        truth = flood_truth(e, resolve_water_level(c, e))
        labels = mask_canopy(truth, c)
        np.testing.assert_array_equal(labels.values, truth.values)

    def test_full_fraction_all_unlabeled(self):
        c = cfg(canopy_fraction=1.0)
        e = gen_terrain(c)
        truth = flood_truth(e, resolve_water_level(c, e))
        assert (mask_canopy(truth, c).values == 0).all()

    def test_fraction_within_tolerance(self):
        for seed in range(10):
            c = cfg(seed=seed, width=64, height=64, canopy_fraction=0.25)
            e = gen_terrain(c)
            truth = flood_truth(e, resolve_water_level(c, e))
            frac = (mask_canopy(truth, c).values == 0).mean()
            assert abs(frac - 0.25) <= 0.05

    def test_labels_agree_with_truth_where_present(self):
        region = generate_region(cfg(seed=4))
        lv, tv = region.labels.values, region.truth.values
        assert np.all((lv == 0) | (lv == tv))

    def test_region_invariant_enforced(self):
        region = generate_region(cfg(seed=5))
        bad = np.array(region.labels.values, copy=True)
        labeled = np.argwhere(bad != 0)
        i, j = labeled[0]
        bad[i, j] = -bad[i, j]
        with pytest.raises(ValueError, match="disagree"):
            Region(
                region.elevation, region.disaster_rgb, region.normal_rgb,
                type(region.labels)(bad), region.truth,
            )


class TestDataset:
    def test_layout_roles_and_determinism(self, tmp_path):
        c = cfg()
        m1 = gen_dataset(c, tmp_path / "d1", n_train=2, n_test=1)
        assert [r["role"] for r in m1["regions"]] == ["train", "train", "test"]
        for entry in m1["regions"]:
            for rel in entry["paths"].values():
                assert (tmp_path / "d1" / rel).exists()
        gen_dataset(c, tmp_path / "d2", n_train=2, n_test=1)
        for entry in m1["regions"]:
            for rel in entry["paths"].values():
                a = (tmp_path / "d1" / rel).read_bytes()
                b = (tmp_path / "d2" / rel).read_bytes()
                assert a == b
        assert (tmp_path / "d1/manifest.json").read_text() == (
            tmp_path / "d2/manifest.json"
        ).read_text()

    def test_load_round_trip(self, tmp_path):
        gen_dataset(cfg(), tmp_path / "d", n_train=1, n_test=1)
        manifest, regions = load_dataset(tmp_path / "d")
        assert set(regions) == {"region_0", "region_1"}
        role, region = regions["region_1"]
        assert role == "test"
        assert region.width == 32

    def test_default_flood_fraction_in_band(self):
        for seed in range(5):
            region = generate_region(SynthConfig(width=128, height=128, seed=seed))
            frac = (region.truth.values == 1).mean()
            assert 0.2 <= frac <= 0.6, f"seed {seed}: flood fraction {frac:.3f}"
