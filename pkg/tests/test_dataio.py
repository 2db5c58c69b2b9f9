"""Cube storage, synthetic mixtures, patches and augmentation pools."""

import numpy as np
import pytest

from ldgan.dataio import (
    Dataset,
    SynthConfig,
    assemble_augmented,
    assemble_patches,
    batch_to_cubes,
    cubes_to_batch,
    extract_patches,
    geometric_augment,
    geometric_pool,
    load_cube,
    load_dataset,
    patch_dataset,
    planted_signatures,
    save_cube,
    save_dataset,
    synth_dataset,
)
from ldgan.errors import ConfigError, FormatError


def _marker_cube(m=4, n=4, l=2):
    """A cube whose entries encode their own (row, col, band) position."""
    i, j, b = np.meshgrid(np.arange(m), np.arange(n), np.arange(l), indexing="ij")
    return (i * 100 + j * 10 + b).astype(np.float64)


class TestScubFormat:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        cube = rng.random((5, 7, 3)).astype(np.float32)
        path = tmp_path / "a.scub"
        save_cube(cube, path)
        back = load_cube(path)
        assert back.shape == (5, 7, 3)
        assert back.dtype == np.float32
        assert np.array_equal(back, cube)

    def test_header_size_is_32_bytes(self, tmp_path):
        path = tmp_path / "a.scub"
        save_cube(np.zeros((2, 2, 2)), path)
        assert path.stat().st_size == 32 + 4 * 2 * 2 * 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "a.scub"
        save_cube(np.zeros((2, 2, 2)), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_cube(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "a.scub"
        save_cube(np.zeros((4, 4, 4)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            load_cube(path)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "a.scub"
        path.write_bytes(b"SCUB\x01")
        with pytest.raises(FormatError):
            load_cube(path)

    def test_implausible_dims_rejected(self, tmp_path):
        path = tmp_path / "a.scub"
        save_cube(np.zeros((2, 2, 2)), path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = (0).to_bytes(4, "little")  # M = 0
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_cube(path)


class TestSyntheticData:
    def test_same_seed_same_dataset(self):
        cfg = SynthConfig(m=8, n=8, l=6, count=3, q_true=3, seed=11)
        a = synth_dataset(cfg)
        b = synth_dataset(cfg)
        for ca, cb in zip(a.cubes, b.cubes):
            assert np.array_equal(ca, cb)

    def test_different_seed_differs(self):
        a = synth_dataset(SynthConfig(m=8, n=8, l=6, count=1, q_true=3, seed=1))
        b = synth_dataset(SynthConfig(m=8, n=8, l=6, count=1, q_true=3, seed=2))
        assert not np.allclose(a.cubes[0], b.cubes[0])

    def test_values_in_unit_interval(self):
        ds = synth_dataset(SynthConfig(m=8, n=8, l=6, count=2, q_true=3, seed=4))
        for cube in ds.cubes:
            assert cube.min() >= 0.0
            assert np.isclose(cube.max(), 1.0)

    def test_mixture_has_exact_planted_rank(self):
        cfg = SynthConfig(m=12, n=12, l=8, count=2, q_true=4, seed=7)
        ds = synth_dataset(cfg)
        pixels = np.concatenate([c.reshape(-1, cfg.l) for c in ds.cubes], axis=0)
        s = np.linalg.svd(pixels, compute_uv=False)
        assert s[cfg.q_true] / s[0] < 1e-10

    def test_pure_pixels_hit_planted_signatures(self):
        cfg = SynthConfig(m=10, n=10, l=8, count=1, q_true=4, seed=9)
        ds = synth_dataset(cfg)
        sigs = planted_signatures(cfg.l, cfg.q_true, cfg.seed)
        pixels = ds.cubes[0].reshape(-1, cfg.l)
        unit = pixels / np.linalg.norm(pixels, axis=1, keepdims=True)
        for j in range(cfg.q_true):
            sj = sigs[j] / np.linalg.norm(sigs[j])
            cos = unit @ sj
            # per-cube max scaling keeps pure pixels exact scalar multiples
            assert cos.max() > 1.0 - 1e-12

    def test_disjoint_splits_share_signatures(self):
        train = synth_dataset(SynthConfig(m=8, n=8, l=6, count=2, q_true=3, seed=3))
        test = synth_dataset(
            SynthConfig(m=8, n=8, l=6, count=2, q_true=3, seed=3,
                        split="test", start_index=2)
        )
        assert not np.allclose(train.cubes[0], test.cubes[0])
        both = np.concatenate(
            [c.reshape(-1, 6) for c in train.cubes + test.cubes], axis=0
        )
        s = np.linalg.svd(both, compute_uv=False)
        assert s[3] / s[0] < 1e-10

    def test_q_true_beyond_bands_rejected(self):
        with pytest.raises(ConfigError):
            synth_dataset(SynthConfig(l=4, q_true=5, count=1))


class TestPatches:
    def test_extract_then_assemble_restores_cube(self):
        cube = _marker_cube(8, 12, 3)
        tiles = extract_patches(cube, 4)
        assert len(tiles) == (8 // 4) * (12 // 4)
        back = assemble_patches(tiles, rows=2, cols=3)
        assert np.array_equal(back, cube)

    def test_row_major_order(self):
        cube = _marker_cube(4, 4, 1)
        tiles = extract_patches(cube, 2)
        assert tiles[0][0, 0, 0] == 0.0
        assert tiles[1][0, 0, 0] == 20.0  # second tile starts at column 2
        assert tiles[2][0, 0, 0] == 200.0  # third tile starts at row 2

    def test_non_divisible_size_rejected(self):
        with pytest.raises(ConfigError):
            extract_patches(_marker_cube(4, 4, 1), 3)

    def test_patch_dataset_multiplies_count(self):
        ds = Dataset([_marker_cube(4, 4, 2)] * 3, ["original"] * 3)
        out = patch_dataset(ds, 2)
        assert len(out) == 12
        assert out.cube_shape == (2, 2, 2)
        assert set(out.provenance) == {"original"}


class TestGeometricAugment:
    def test_four_quarter_turns_are_identity(self):
        cube = _marker_cube(4, 4, 2)
        out = cube
        for _ in range(4):
            out = geometric_augment(out, "rot90")
        assert np.array_equal(out, cube)

    def test_double_flip_is_half_turn(self):
        cube = _marker_cube(4, 4, 2)
        a = geometric_augment(geometric_augment(cube, "hflip"), "vflip")
        b = geometric_augment(cube, "rot180")
        assert np.array_equal(a, b)

    def test_bands_move_together(self):
        cube = _marker_cube(4, 4, 3)
        out = geometric_augment(cube, "rot90")
        # band offset pattern survives any purely spatial transform
        assert np.array_equal(out[:, :, 1] - out[:, :, 0], np.ones((4, 4)))

    def test_rotation_of_rectangle_rejected(self):
        with pytest.raises(ConfigError):
            geometric_augment(_marker_cube(2, 4, 1), "rot90")

    def test_unknown_transform_rejected(self):
        with pytest.raises(ConfigError):
            geometric_augment(_marker_cube(), "transpose")

    def test_pool_is_deterministic(self):
        ds = synth_dataset(SynthConfig(m=8, n=8, l=4, count=3, q_true=2, seed=5))
        a = geometric_pool(ds, 6, seed=1)
        b = geometric_pool(ds, 6, seed=1)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca, cb)


class TestAugmentedAssembly:
    def _base(self, n=10):
        cubes = [np.full((2, 2, 2), float(i)) for i in range(n)]
        return Dataset(cubes, ["original"] * n)

    def test_fraction_counts(self):
        base = self._base(10)
        pool = [np.ones((2, 2, 2))] * 10
        for frac, extra in [(0.0, 0), (0.2, 2), (0.5, 5), (1.0, 10)]:
            out = assemble_augmented(base, pool, frac)
            assert len(out) == 10 + extra
            assert out.provenance.count("gan-generated") == extra

    def test_base_cubes_preserved_in_order(self):
        base = self._base(4)
        out = assemble_augmented(base, [np.ones((2, 2, 2))] * 4, 0.5)
        for i in range(4):
            assert np.array_equal(out.cubes[i], base.cubes[i])

    def test_fraction_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            assemble_augmented(self._base(), [], 1.5)

    def test_pool_too_small_rejected(self):
        with pytest.raises(ConfigError):
            assemble_augmented(self._base(10), [np.ones((2, 2, 2))] * 3, 0.5)


class TestDatasetDirectories:
    def test_save_load_round_trip(self, tmp_path):
        ds = synth_dataset(SynthConfig(m=6, n=6, l=4, count=3, q_true=2, seed=8))
        save_dataset(ds, tmp_path / "data")
        back = load_dataset(tmp_path / "data", "train")
        assert len(back) == 3
        assert back.provenance == ds.provenance
        for a, b in zip(back.cubes, ds.cubes):
            assert np.allclose(a, b.astype(np.float32))

    def test_two_splits_share_manifest(self, tmp_path):
        train = synth_dataset(SynthConfig(m=4, n=4, l=4, count=2, q_true=2, seed=1))
        test = synth_dataset(
            SynthConfig(m=4, n=4, l=4, count=1, q_true=2, seed=1,
                        split="test", start_index=2)
        )
        save_dataset(train, tmp_path / "data")
        save_dataset(test, tmp_path / "data")
        assert len(load_dataset(tmp_path / "data", "train")) == 2
        assert len(load_dataset(tmp_path / "data", "test")) == 1

    def test_missing_split_rejected(self, tmp_path):
        ds = synth_dataset(SynthConfig(m=4, n=4, l=4, count=1, q_true=2, seed=1))
        save_dataset(ds, tmp_path / "data")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "data", "validation")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "nothing", "train")


class TestBatchLayout:
    def test_round_trip(self):
        cubes = [_marker_cube(3, 4, 2), _marker_cube(3, 4, 2) + 1]
        batch = cubes_to_batch(cubes, dtype=np.float64)
        assert batch.shape == (2, 2, 3, 4)
        back = batch_to_cubes(batch)
        for a, b in zip(back, cubes):
            assert np.array_equal(a, b)

    def test_band_becomes_channel(self):
        cube = _marker_cube(3, 3, 2)
        batch = cubes_to_batch([cube], dtype=np.float64)
        assert np.array_equal(batch[0, 1], cube[:, :, 1])
