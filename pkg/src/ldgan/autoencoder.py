"""Spectral compression autoencoder with batch-variance regularization.

The encoder squeezes L bands to c < L channels through seven stride-1
convolutions (widths tapering 16c to c); the decoder mirrors it and ends
with a sigmoid conv back to L bands.  Compression is spectral only, so
spatial extents never change.  Training minimizes per-sample squared
reconstruction error plus mu_ae times the latent variance penalty: the
Euclidean norm of the per-coordinate population variance across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ldgan import engine
from ldgan.checkpoints import load_params, save_params
from ldgan.dataio import Dataset, batch_to_cubes, cubes_to_batch
from ldgan.engine import Tensor, no_grad
from ldgan.engine.nn import Activation, Conv2d, Sequential
from ldgan.errors import ConfigError, ShapeError, TrainingError

_EVAL_CHUNK = 32


@dataclass
class Autoencoder:
    encoder: Sequential
    decoder: Sequential
    c: int
    l: int

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def state_arrays(self):
        return self.encoder.state_arrays() + self.decoder.state_arrays()

    def load_state(self, arrays):
        n_enc = len(self.encoder.state_arrays())
        self.encoder.load_state(arrays[:n_enc])
        self.decoder.load_state(arrays[n_enc:])


@dataclass
class AETrainConfig:
    channels: int = 3  # latent c, must stay below the band count
    lr: float = 1e-3
    epochs: int = 100
    batch: int = 8
    mu_ae: float = 0.0
    seed: int = 0

    def validate(self):
        if self.batch < 2:
            raise ConfigError("batch must be >= 2 (batch variance undefined otherwise)")
        if self.mu_ae < 0:
            raise ConfigError(f"mu_ae must be >= 0, got {self.mu_ae}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 1 and lr > 0")


def _taper(c: int):
    return [16 * c, 8 * c, 8 * c, 4 * c, 4 * c, 2 * c, c]


def build_autoencoder(l: int, c: int, seed: int = 0, dtype=np.float32) -> Autoencoder:
    if not 1 <= c < l:
        raise ConfigError(f"latent channels c={c} must satisfy 1 <= c < L={l}")
    rng = np.random.default_rng([int(seed), 0xAE0])
    widths = _taper(c)
    enc_layers = []
    prev = l
    for i, w in enumerate(widths):
        enc_layers.append(Conv2d(prev, w, rng=rng, dtype=dtype))
        if i < len(widths) - 1:
            enc_layers.append(Activation("relu"))  # latent head stays linear
        prev = w
    dec_layers = []
    prev = c
    for w in reversed(widths[:-1]):
        dec_layers.append(Conv2d(prev, w, rng=rng, dtype=dtype))
        dec_layers.append(Activation("relu"))
        prev = w
    dec_layers.append(Conv2d(prev, prev, rng=rng, dtype=dtype))
    dec_layers.append(Activation("relu"))
    dec_layers.append(Conv2d(prev, l, rng=rng, dtype=dtype))
    dec_layers.append(Activation("sigmoid"))
    return Autoencoder(Sequential(*enc_layers), Sequential(*dec_layers), c, l)


def encode(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    """(B, L, M, N) batch -> (B, c, M, N) latents on frozen params."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != ae.l:
        raise ShapeError(f"expected (B, {ae.l}, M, N) input, got {x.shape}")
    with no_grad():
        chunks = [ae.encoder(Tensor(x[i : i + _EVAL_CHUNK])).data
                  for i in range(0, x.shape[0], _EVAL_CHUNK)]
    return np.concatenate(chunks, axis=0)


def decode(ae: Autoencoder, b: np.ndarray) -> np.ndarray:
    """(B, c, M, N) latents -> (B, L, M, N) cubes in [0, 1]."""
    b = np.asarray(b)
    if b.ndim != 4 or b.shape[1] != ae.c:
        raise ShapeError(f"expected (B, {ae.c}, M, N) latents, got {b.shape}")
    with no_grad():
        chunks = [ae.decoder(Tensor(b[i : i + _EVAL_CHUNK])).data
                  for i in range(0, b.shape[0], _EVAL_CHUNK)]
    return np.concatenate(chunks, axis=0)


def variance_reg(batch):
    """Euclidean norm of per-coordinate population variance across the batch.

    Tensor in, Tensor out (differentiable); array in, float out.
    """
    if isinstance(batch, Tensor):
        return engine.batch_variance_norm(batch)
    with no_grad():
        return float(engine.batch_variance_norm(Tensor(np.asarray(batch))).item())


def reconstruction_loss(xhat: Tensor, x: Tensor) -> Tensor:
    """Batch-mean of per-sample squared error (sum over all coordinates)."""
    diff = xhat - x
    return (diff * diff).sum() * (1.0 / x.data.shape[0])


def _eval_metrics(ae: Autoencoder, batch: np.ndarray):
    from ldgan.analysis import psnr, ssim

    recon = decode(ae, encode(ae, batch))
    cubes, recon_cubes = batch_to_cubes(batch), batch_to_cubes(recon)
    p = float(np.mean([min(psnr(a, b), 99.0) for a, b in zip(cubes, recon_cubes)]))
    s = float(np.mean([ssim(a, b) for a, b in zip(cubes, recon_cubes)]))
    return p, s


def train_ae(train: Dataset, cfg: AETrainConfig, test: Dataset = None,
             ae: Autoencoder = None, on_epoch=None):
    """Returns (Autoencoder, history rows: epoch, recon_loss, reg_value, psnr, ssim).

    Pass ``ae`` to continue training an existing network (fresh optimizer).
    ``on_epoch(ae, row)`` fires after each epoch, e.g. for checkpointing.
    """
    cfg.validate()
    if len(train) == 0:
        raise ConfigError("training dataset is empty")
    _, _, l = train.cube_shape
    if ae is None:
        ae = build_autoencoder(l, cfg.channels, seed=cfg.seed)
    elif ae.l != l:
        raise ShapeError(f"network expects {ae.l} bands, dataset has {l}")
    x_all = cubes_to_batch(train.cubes)
    test_batch = cubes_to_batch(test.cubes[:8]) if test and len(test) else None

    opt = engine.Adam(ae.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        shuffle = np.random.default_rng([int(cfg.seed), 0xAE1, epoch])
        order = shuffle.permutation(len(x_all))
        rec_sum = reg_sum = 0.0
        batches = 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            if len(idx) < 2:
                continue  # a single sample has no batch variance
            x = Tensor(x_all[idx])
            latent = ae.encoder(x)
            loss = reconstruction_loss(ae.decoder(latent), x)
            rec_val = float(loss.item())
            reg_val = variance_reg(latent.data)
            if cfg.mu_ae > 0:
                loss = loss + variance_reg(latent) * cfg.mu_ae
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            opt.zero_grad()
            engine.backward(loss)
            opt.step()
            rec_sum += rec_val
            reg_sum += reg_val
            batches += 1
        row = {
            "epoch": epoch,
            "recon_loss": rec_sum / max(batches, 1),
            "reg_value": reg_sum / max(batches, 1),
            "psnr": float("nan"),
            "ssim": float("nan"),
        }
        if test_batch is not None:
            row["psnr"], row["ssim"] = _eval_metrics(ae, test_batch)
        history.append(row)
        if on_epoch is not None:
            on_epoch(ae, row)
    return ae, history


def encode_dataset(ae: Autoencoder, ds: Dataset) -> Dataset:
    """One latent cube per input cube, order and provenance preserved."""
    if len(ds) == 0:
        return Dataset([], [], split=ds.split)
    latents = encode(ae, cubes_to_batch(ds.cubes))
    return Dataset(batch_to_cubes(latents), list(ds.provenance), split=ds.split)


AE_HISTORY_FIELDS = ("epoch", "recon_loss", "reg_value", "psnr", "ssim")


def save_autoencoder(path, ae: Autoencoder, extra_meta: dict = None) -> None:
    meta = {"kind": "autoencoder", "c": ae.c, "l": ae.l}
    if extra_meta:
        meta.update(extra_meta)
    save_params(path, b"AEPM", meta, ae.state_arrays())


def load_autoencoder(path) -> Autoencoder:
    meta, arrays = load_params(path, b"AEPM")
    ae = build_autoencoder(int(meta["l"]), int(meta["c"]))
    ae.load_state(arrays)
    return ae
