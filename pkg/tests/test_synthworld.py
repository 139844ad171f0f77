"""Tests for the synthetic scene and audio generator."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixsep import synthworld as sw

CFG = sw.WorldConfig()
classes = st.integers(0, CFG.n_classes - 1)
levels = st.integers(0, CFG.n_levels - 1)
seeds = st.integers(0, 2**32 - 1)


def rng_of(seed):
    return sw.make_rng(seed, 99, 0)


class TestWorldConfig:
    @pytest.mark.parametrize("kw", [dict(n_classes=1), dict(H_img=3), dict(T_a=2),
                                    dict(band_overlap=1.5), dict(n_sound=-1), dict(n_levels=0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            sw.WorldConfig(**kw)

    def test_levels_are_geometric(self):
        vals = [CFG.level_value(v) for v in range(CFG.n_levels)]
        assert vals[0] == pytest.approx(sw.LEVEL_FLOOR) and vals[-1] == pytest.approx(1.0)
        ratios = np.array(vals[1:]) / np.array(vals[:-1])
        np.testing.assert_allclose(ratios, ratios[0])

    def test_level_out_of_range(self):
        with pytest.raises(ValueError):
            CFG.level_value(CFG.n_levels)

    def test_bands_overlap_by_half(self):
        (slo, shi), (plo, phi) = CFG.sound_band(), CFG.speech_band()
        assert (slo, shi, plo, phi) == (0, 24, 8, 32)
        assert shi - plo == CFG.F_a // 2

    def test_zero_overlap_partitions_axis(self):
        c = sw.WorldConfig(band_overlap=0.0)
        assert c.sound_band()[1] == c.speech_band()[0]


class TestScenes:
    @given(seeds, classes)
    def test_single_object_area(self, seed, cls):
        s = sw.gen_scene(rng_of(seed), CFG, [cls])
        frac = s.masks[0].mean()
        assert 0.10 <= frac <= 0.25

    @given(seeds, st.lists(classes, min_size=2, max_size=2, unique=True))
    def test_two_objects_disjoint(self, seed, cls):
        s = sw.gen_scene(rng_of(seed), CFG, cls)
        assert len(s.masks) == 2
        assert (s.masks[0] * s.masks[1]).sum() == 0

    @given(seeds, classes, levels)
    def test_mask_matches_box(self, seed, cls, lvl):
        s = sw.gen_scene(rng_of(seed), CFG, [cls], [lvl])
        y0, x0, y1, x1 = s.objects[0][1]
        assert 0 <= y0 < y1 <= CFG.H_img and 0 <= x0 < x1 <= CFG.W_img
        expect = np.zeros((CFG.H_img, CFG.W_img), np.float32)
        expect[y0:y1, x0:x1] = 1
        np.testing.assert_array_equal(s.masks[0], expect)
        assert s.image.min() >= 0 and s.image.max() <= 1

    def test_deterministic(self):
        a = sw.gen_scene(rng_of(5), CFG, [1, 2])
        b = sw.gen_scene(rng_of(5), CFG, [1, 2])
        np.testing.assert_array_equal(a.image, b.image)
        assert a.objects == b.objects

    def test_invalid_class(self):
        with pytest.raises(ValueError):
            sw.gen_scene(rng_of(0), CFG, [CFG.n_classes])

    def test_placement_failure_reports_seed(self, monkeypatch):
        # every draw lands on the same box, so a second object never fits
        monkeypatch.setattr(sw, "_sample_box", lambda rng, config: (0, 0, 12, 12))
        with pytest.raises(sw.PlacementError, match="seed 42"):
            sw.gen_scene(rng_of(0), CFG, [0, 1], seed_hint=42)


class TestSound:
    @given(seeds, classes, levels)
    def test_rows_and_energy(self, seed, cls, lvl):
        a = sw.render_sound(cls, rng_of(seed), CFG, lvl)
        active_rows = np.flatnonzero(a.grid.sum(1))
        assert set(active_rows) == set(sw.sound_rows(cls, CFG))
        assert len(active_rows) <= 3
        lo, hi = CFG.sound_band()
        assert active_rows.min() >= lo and active_rows.max() < hi
        on = a.provenance[0] > 0
        assert on.any()
        assert (a.grid[:, on].sum(0) > 0).all()
        assert (a.grid[:, ~on] == 0).all()
        assert a.kind == sw.SOUND

    def test_base_rows_distinct(self):
        bases = [sw.sound_rows(c, CFG)[0] for c in range(CFG.n_classes)]
        assert len(set(bases)) == CFG.n_classes

    def test_amplitude_follows_level(self):
        a = sw.render_sound(3, rng_of(0), CFG, 2)
        assert a.grid.max() == pytest.approx(CFG.level_value(2))


class TestSpeech:
    @given(seeds, classes, levels)
    def test_spans_within_bounds(self, seed, cls, lvl):
        a = sw.render_speech(cls, rng_of(seed), CFG, lvl)
        assert len(a.token_spans) == 1
        c, t0, t1 = a.token_spans[0]
        assert c == cls and 0 <= t0 < t1 <= CFG.T_a
        cols = np.flatnonzero(a.grid.sum(0))
        assert cols.min() >= t0 and cols.max() < t1
        assert a.grid.min() >= 0 and a.grid.max() <= 1

    @given(seeds, classes)
    def test_rows_in_speech_band(self, seed, cls):
        a = sw.render_speech(cls, rng_of(seed), CFG)
        rows = np.flatnonzero(a.grid.sum(1))
        lo, hi = CFG.speech_band()
        assert rows.min() >= lo and rows.max() < hi
        # three formant rows plus at most one blur row each
        assert 3 <= len(rows) <= 6

    def test_deterministic(self):
        a = sw.render_speech(4, rng_of(7), CFG)
        b = sw.render_speech(4, rng_of(7), CFG)
        np.testing.assert_array_equal(a.grid, b.grid)
        assert a.token_spans == b.token_spans

    @given(seeds, seeds, classes, classes)
    def test_zero_overlap_rows_disjoint(self, s1, s2, c1, c2):
        c = sw.WorldConfig(band_overlap=0.0)
        snd = sw.render_sound(c1, rng_of(s1), c)
        sp = sw.render_speech(c2, rng_of(s2), c)
        assert not set(np.flatnonzero(snd.grid.sum(1))) & set(np.flatnonzero(sp.grid.sum(1)))


class TestMix:
    @given(seeds, classes, classes)
    def test_commutative(self, seed, c1, c2):
        r = rng_of(seed)
        a, b = sw.render_sound(c1, r, CFG), sw.render_speech(c2, r, CFG)
        np.testing.assert_array_equal(sw.mix(a, b).grid, sw.mix(b, a).grid)

    @given(seeds, classes)
    def test_silence_is_identity(self, seed, cls):
        a = sw.render_speech(cls, rng_of(seed), CFG)
        m = sw.mix(a, sw.silence(CFG))
        np.testing.assert_array_equal(m.grid, a.grid)

    @given(seeds, classes, classes)
    def test_provenance_union(self, seed, c1, c2):
        r = rng_of(seed)
        a, b = sw.render_sound(c1, r, CFG), sw.render_speech(c2, r, CFG)
        m = sw.mix(a, b)
        assert m.kind == sw.MIXTURE
        n = (m.provenance.sum(0) > 0).sum()
        assert n >= max((a.provenance.sum(0) > 0).sum(), (b.provenance.sum(0) > 0).sum())
        assert (m.provenance.sum(1) > 0).all()
        assert m.token_spans == b.token_spans
        assert m.grid.max() <= 1

    def test_rejects_mixture_input(self):
        r = rng_of(0)
        m = sw.mix(sw.render_sound(0, r, CFG), sw.render_speech(1, r, CFG))
        with pytest.raises(ValueError):
            sw.mix(m, sw.render_sound(2, r, CFG))

    def test_rejects_shape_mismatch(self):
        other = sw.WorldConfig(T_a=32)
        with pytest.raises(ValueError):
            sw.mix(sw.silence(CFG), sw.silence(other))


class TestSplice:
    @given(seeds, st.floats(0.1, 0.3))
    def test_mask_sum_and_plateau(self, seed, rho):
        r = rng_of(seed)
        a, d = sw.render_sound(0, r, CFG), sw.render_speech(5, r, CFG)
        out, mask = sw.splice_negative(a, d, r, rho=rho)
        length = int(round(rho * CFG.T_a))
        ramp = min(2, length // 2)
        # each ramp of r frames carries r/2 mass instead of r
        assert mask.sum() == pytest.approx(length - ramp, abs=1e-5)
        on = np.flatnonzero(mask > 0)
        assert on.max() - on.min() + 1 == length
        plateau = mask == 1
        np.testing.assert_array_equal(out.grid[:, plateau], d.grid[:, plateau])
        np.testing.assert_array_equal(out.grid[:, mask == 0], a.grid[:, mask == 0])
        assert out.kind == a.kind

    @given(seeds)
    def test_default_rho_range(self, seed):
        r = rng_of(seed)
        a = sw.render_sound(1, r, CFG)
        _, mask = sw.splice_negative(a, sw.silence(CFG), r)
        length = (mask > 0).sum()
        assert round(0.1 * CFG.T_a) <= length <= round(0.3 * CFG.T_a)

    def test_rho_zero_is_identity(self):
        r = rng_of(0)
        a = sw.render_sound(1, r, CFG)
        out, mask = sw.splice_negative(a, sw.render_speech(2, r, CFG), r, rho=0.0)
        assert (mask == 0).all()
        np.testing.assert_array_equal(out.grid, a.grid)


class TestDatasets:
    def test_identity_blocks_are_collision_free(self, small_world):
        n = small_world.n_identities
        ids = {sw.identity_of(small_world, "sound", i) for i in range(n)}
        assert len(ids) == n

    def test_manifest_counts(self, small_data_dir, small_world):
        man = json.loads((small_data_dir / "manifest.json").read_text())
        for split in sw.SPLITS:
            assert man["splits"][split]["count"] == small_world.split_size(split)
            assert len(man["splits"][split]["samples"]) == small_world.split_size(split)
        assert len(man["class_names"]) == small_world.n_classes
        assert sw.config_from_manifest(man) == small_world

    def test_extended_triplets(self, small_data_dir, small_world):
        ext = sw.load_split(small_data_dir, "extended")
        assert len(ext) == small_world.n_extended
        masks = ext.arrays["mask0"] * ext.arrays["mask1"]
        assert masks.sum() == 0
        for j in range(2):
            other = 1 - j
            expect = np.clip(ext.arrays[f"sound{j}"] + ext.arrays[f"speech{other}"], 0, 1)
            np.testing.assert_array_equal(ext.arrays[f"mix{j}"], expect)
        for meta in ext.meta:
            assert len(meta["classes"]) == 2 and meta["classes"][0] != meta["classes"][1]

    def test_values_in_unit_range(self, small_data_dir, small_world):
        for split in sw.SPLITS:
            s = sw.load_split(small_data_dir, split)
            for name, arr in s.arrays.items():
                if name == "box":  # pixel coordinates
                    assert arr.min() >= 0 and arr.max() <= small_world.H_img
                    continue
                assert arr.min() >= 0 and arr.max() <= 1, (split, name)

    def test_regeneration_bitwise(self, small_world, small_data_dir, tmp_path):
        sw.make_datasets(small_world, tmp_path)
        for path in sorted(small_data_dir.rglob("*")):
            if path.is_file():
                twin = tmp_path / path.relative_to(small_data_dir)
                assert path.read_bytes() == twin.read_bytes(), path

    def test_pairs_independent_of_order(self, small_world):
        a = sw.gen_pair(small_world, "speech", 17)[0]
        sw.gen_pair(small_world, "speech", 3)
        b = sw.gen_pair(small_world, "speech", 17)[0]
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_unwritable_directory_names_path(self, tmp_path, small_world):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            sw.make_datasets(small_world, blocker)

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(OSError, match="corrupt"):
            sw.load_manifest(tmp_path)

    def test_missing_split(self, small_data_dir):
        with pytest.raises(KeyError):
            sw.load_split(small_data_dir, "nope")


class TestIdentifiability:
    """Nearest-centroid over per-sample mean frequency profiles, 64 samples per class."""

    @pytest.mark.parametrize("split", ["sound", "speech"])
    def test_classes_separable(self, split):
        n = 64 * CFG.n_classes
        X, y = [], []
        for i in range(n):
            rec, meta = sw.gen_pair(CFG, split, i)
            p = rec["audio"].mean(1)
            X.append(p / np.linalg.norm(p))
            y.append(meta["class"])
        X, y = np.array(X), np.array(y)
        assert (np.bincount(y) == 64).all()
        cent = np.stack([X[y == k].mean(0) for k in range(CFG.n_classes)])
        pred = np.argmin(((X[:, None] - cent[None]) ** 2).sum(-1), axis=1)
        assert (pred == y).mean() == 1.0
