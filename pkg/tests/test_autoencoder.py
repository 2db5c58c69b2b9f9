"""Spectral autoencoder: shapes, variance penalty oracle, gradients, training."""

import numpy as np
import pytest

from ldgan.autoencoder import (
    AETrainConfig,
    build_autoencoder,
    decode,
    encode,
    encode_dataset,
    load_autoencoder,
    reconstruction_loss,
    save_autoencoder,
    train_ae,
    variance_reg,
)
from ldgan.dataio import Dataset, SynthConfig, synth_dataset
from ldgan.engine import Tensor, batch_variance_norm
from ldgan.errors import ConfigError, ShapeError, TrainingError


def _tiny_dataset(count=8, m=8, n=8, l=4, seed=0):
    return synth_dataset(SynthConfig(m=m, n=n, l=l, count=count, q_true=2, seed=seed))


class TestArchitecture:
    def test_shapes_round_trip(self):
        ae = build_autoencoder(8, 3, seed=1)
        x = np.random.default_rng(0).random((4, 8, 12, 20)).astype(np.float32)
        lat = encode(ae, x)
        assert lat.shape == (4, 3, 12, 20)  # spatial extents preserved
        out = decode(ae, lat)
        assert out.shape == x.shape

    def test_output_in_unit_interval(self):
        ae = build_autoencoder(6, 2, seed=2)
        out = decode(ae, np.random.default_rng(1).standard_normal((3, 2, 8, 8)).astype(np.float32))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_channel_mismatch_rejected(self):
        ae = build_autoencoder(8, 3)
        with pytest.raises(ShapeError):
            encode(ae, np.zeros((2, 6, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            decode(ae, np.zeros((2, 2, 8, 8), dtype=np.float32))

    def test_encoder_has_seven_convs_decoder_eight(self):
        ae = build_autoencoder(8, 3)
        # weight + bias per conv
        assert len(ae.encoder.parameters()) == 7 * 2
        assert len(ae.decoder.parameters()) == 8 * 2

    def test_invalid_channel_count_rejected(self):
        with pytest.raises(ConfigError):
            build_autoencoder(8, 8)
        with pytest.raises(ConfigError):
            build_autoencoder(8, 0)

    def test_deterministic_on_frozen_params(self):
        ae = build_autoencoder(4, 2, seed=3)
        x = np.random.default_rng(2).random((2, 4, 8, 8)).astype(np.float32)
        assert np.array_equal(encode(ae, x), encode(ae, x))


class TestVarianceReg:
    def test_identical_batch_is_zero(self):
        batch = np.tile(np.random.default_rng(3).random((1, 3, 4, 4)), (5, 1, 1, 1))
        assert variance_reg(batch) <= 1e-12

    def test_zero_two_batch_hand_value(self):
        batch = np.zeros((2, 3, 4, 4))
        batch[1] = 2.0  # every coordinate has variance 1
        expect = np.sqrt(3 * 4 * 4)
        assert abs(variance_reg(batch) - expect) <= 1e-12

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(4)
        batch = rng.standard_normal((4, 2, 3, 3))
        base = variance_reg(batch)
        assert variance_reg(3.0 * batch) == pytest.approx(9.0 * base, rel=1e-12)

    def test_batch_order_invariant(self):
        rng = np.random.default_rng(5)
        batch = rng.standard_normal((6, 2, 4, 4))
        assert variance_reg(batch) == pytest.approx(
            variance_reg(batch[::-1].copy()), abs=1e-12
        )

    def test_single_sample_rejected(self):
        with pytest.raises(ConfigError):
            variance_reg(np.zeros((1, 2, 4, 4)))


def _ae_objective(seed, mu):
    ae = build_autoencoder(4, 2, seed=seed, dtype=np.float64)
    x = Tensor(np.random.default_rng(seed + 1).random((2, 4, 4, 4)))

    def objective():
        latent = ae.encoder(x)
        recon = reconstruction_loss(ae.decoder(latent), x)
        if mu:
            recon = recon + batch_variance_norm(latent) * mu
        return recon

    return objective, ae.parameters()


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_objective_finite_difference(self, seed):
        from conftest import checked_gradient

        assert checked_gradient(lambda s: _ae_objective(s, 1e-3), seed) <= 1e-4

    def test_plain_objective_finite_difference(self):
        # mu = 0 path (reconstruction only)
        from conftest import checked_gradient

        assert checked_gradient(lambda s: _ae_objective(s, 0.0), 7) <= 1e-4


class TestTraining:
    def test_loss_decreases(self):
        ds = _tiny_dataset(count=8)
        _, hist = train_ae(ds, AETrainConfig(channels=2, epochs=12, batch=4, seed=1))
        first = np.mean([h["recon_loss"] for h in hist[:5]])
        last = np.mean([h["recon_loss"] for h in hist[-5:]])
        assert last < first

    def test_bit_reproducible(self):
        ds = _tiny_dataset(count=6)
        cfg = AETrainConfig(channels=2, epochs=3, batch=3, seed=4)
        ae_a, _ = train_ae(ds, cfg)
        ae_b, _ = train_ae(ds, cfg)
        for pa, pb in zip(ae_a.state_arrays(), ae_b.state_arrays()):
            assert np.array_equal(pa, pb)

    def test_regularizer_lowers_latent_variance(self):
        ds = _tiny_dataset(count=8, seed=3)
        held = _tiny_dataset(count=4, seed=3)
        held_batch = np.stack([c.transpose(2, 0, 1) for c in held.cubes]).astype(np.float32)
        finals = {}
        for mu in (0.0, 0.1):
            cfg = AETrainConfig(channels=2, epochs=15, batch=4, mu_ae=mu, seed=5)
            ae, _ = train_ae(ds, cfg)
            finals[mu] = variance_reg(encode(ae, held_batch))
        assert finals[0.1] < finals[0.0]

    def test_history_columns(self):
        ds = _tiny_dataset(count=4)
        _, hist = train_ae(ds, AETrainConfig(channels=2, epochs=2, batch=2, seed=0), test=ds)
        assert len(hist) == 2
        for key in ("epoch", "recon_loss", "reg_value", "psnr", "ssim"):
            assert key in hist[0]
        assert np.isfinite(hist[0]["psnr"])

    def test_nan_input_raises_training_error(self):
        cubes = [np.full((4, 4, 4), np.nan)] * 4
        ds = Dataset(cubes, ["original"] * 4)
        with pytest.raises(TrainingError):
            train_ae(ds, AETrainConfig(channels=2, epochs=1, batch=2, seed=0))

    def test_batch_below_two_rejected(self):
        with pytest.raises(ConfigError):
            AETrainConfig(batch=1).validate()

    def test_negative_mu_rejected(self):
        with pytest.raises(ConfigError):
            AETrainConfig(mu_ae=-1e-3).validate()


class TestLatentDataset:
    def test_encode_dataset_counts_and_shape(self):
        ds = _tiny_dataset(count=5, l=4)
        ae = build_autoencoder(4, 2, seed=6)
        lat = encode_dataset(ae, ds)
        assert len(lat) == 5
        assert lat.cube_shape == (8, 8, 2)
        assert lat.provenance == ds.provenance

    def test_idempotent_given_frozen_params(self):
        ds = _tiny_dataset(count=3, l=4)
        ae = build_autoencoder(4, 2, seed=7)
        a = encode_dataset(ae, ds)
        b = encode_dataset(ae, ds)
        for ca, cb in zip(a.cubes, b.cubes):
            assert np.array_equal(ca, cb)


class TestCheckpoint:
    def test_round_trip_preserves_outputs(self, tmp_path):
        ds = _tiny_dataset(count=4)
        ae, _ = train_ae(ds, AETrainConfig(channels=2, epochs=2, batch=2, seed=8))
        path = tmp_path / "ae.ckpt"
        save_autoencoder(path, ae, {"epochs_trained": 2})
        back = load_autoencoder(path)
        x = np.random.default_rng(9).random((2, 4, 8, 8)).astype(np.float32)
        assert np.array_equal(encode(back, x), encode(ae, x))
        assert np.array_equal(decode(back, encode(back, x)), decode(ae, encode(ae, x)))
