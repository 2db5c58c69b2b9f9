"""Adversarial pair over latent cubes, with a full-cube baseline mode.

The generator maps 100-dim standard-normal noise through a 4x4 seed map
and transpose-conv upsampling to (C_out, M, N); the discriminator is a
stride-2 conv stack ending in a sigmoid scalar.  Trained on encoder
latents C_out = c ("latent" target); the baseline ("full" target) is the
same architecture generating L-band cubes directly.

The generator objective optionally subtracts mu_gan times the batch
variance penalty of its own samples, so gradient descent pushes the
generated set's per-coordinate spread up rather than down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ldgan import engine
from ldgan.autoencoder import Autoencoder, decode, variance_reg
from ldgan.checkpoints import load_params, save_params
from ldgan.dataio import Dataset, batch_to_cubes, cubes_to_batch
from ldgan.engine import Tensor, no_grad
from ldgan.engine.functional import _BCE_EPS
from ldgan.engine.nn import Activation, BatchNorm2d, Conv2d, ConvTranspose2d, Sequential
from ldgan.errors import ConfigError, TrainingError

Z_DIM = 100
GAN_TARGETS = ("latent", "full")
_LADDER = (256, 128, 64, 32)
_SAMPLE_CHUNK = 64


@dataclass
class GanPair:
    generator: Sequential
    discriminator: Sequential
    out_channels: int
    spatial: int
    target: str

    def parameters(self):
        return self.generator.parameters() + self.discriminator.parameters()

    def state_arrays(self):
        return self.generator.state_arrays() + self.discriminator.state_arrays()

    def load_state(self, arrays):
        n_gen = len(self.generator.state_arrays())
        self.generator.load_state(arrays[:n_gen])
        self.discriminator.load_state(arrays[n_gen:])


@dataclass
class GanTrainConfig:
    epochs: int = 50
    lr: float = 2e-4
    batch: int = 16
    mu_gan: float = 0.0
    seed: int = 0
    target: str = "latent"

    def validate(self):
        if self.mu_gan < 0:
            raise ConfigError(f"mu_gan must be >= 0, got {self.mu_gan}")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2 (batch norm and variance need it)")
        if self.target not in GAN_TARGETS:
            raise ConfigError(f"target must be one of {GAN_TARGETS}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 1 and lr > 0")


def _stages(spatial: int) -> int:
    n = 0
    size = 4
    while size < spatial:
        size *= 2
        n += 1
    if size != spatial or spatial < 4:
        raise ConfigError(f"spatial size {spatial} must be 4 * 2^k")
    return n


def build_gan(out_channels: int, spatial: int, target: str = "latent",
              seed: int = 0, dtype=np.float32) -> GanPair:
    if target not in GAN_TARGETS:
        raise ConfigError(f"target must be one of {GAN_TARGETS}")
    n_up = _stages(spatial)
    if n_up > len(_LADDER) - 1:
        raise ConfigError(f"spatial size {spatial} exceeds the {_LADDER} ladder")
    rng = np.random.default_rng([int(seed), 0x6A1])

    gen = [
        ConvTranspose2d(Z_DIM, _LADDER[0], kernel=4, stride=1, padding=0,
                        bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(_LADDER[0], gamma_noise=0.02, rng=rng, dtype=dtype),
        Activation("relu"),
    ]
    for i in range(len(_LADDER) - 1):
        cin, cout = _LADDER[i], _LADDER[i + 1]
        if i < n_up:  # doubling stage
            gen.append(ConvTranspose2d(cin, cout, kernel=4, stride=2, padding=1,
                                       bias=False, rng=rng, dtype=dtype))
        else:
            gen.append(Conv2d(cin, cout, kernel=3, stride=1, padding=1,
                              bias=False, init="dcgan", rng=rng, dtype=dtype))
        gen.append(BatchNorm2d(cout, gamma_noise=0.02, rng=rng, dtype=dtype))
        gen.append(Activation("relu"))
    gen.append(Conv2d(_LADDER[-1], out_channels, kernel=3, stride=1, padding=1,
                      init="dcgan", rng=rng, dtype=dtype))
    if target == "full":
        gen.append(Activation("sigmoid"))  # latent range stays unconstrained

    n_down = _stages(spatial) + 2  # spatial -> 1 via stride-2 halvings
    widths = [32 * (1 << i) for i in range(n_down)]
    disc = []
    prev = out_channels
    for i, w in enumerate(widths):
        disc.append(Conv2d(prev, w, kernel=4, stride=2, padding=1, bias=(i == 0),
                           init="dcgan", rng=rng, dtype=dtype))
        if i > 0:  # no batch norm on the first block
            disc.append(BatchNorm2d(w, gamma_noise=0.02, rng=rng, dtype=dtype))
        disc.append(Activation("leaky_relu", alpha=0.2))
        prev = w
    disc.append(Conv2d(prev, 1, kernel=1, stride=1, padding=0,
                       init="dcgan", rng=rng, dtype=dtype))
    disc.append(Activation("sigmoid"))

    return GanPair(Sequential(*gen), Sequential(*disc), out_channels, spatial, target)


def generator_forward(gan: GanPair, z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    if z.data.ndim != 2 or z.data.shape[1] != Z_DIM:
        raise ConfigError(f"noise must be (B, {Z_DIM}), got {z.data.shape}")
    return gan.generator(z.reshape(z.data.shape[0], Z_DIM, 1, 1))


def discriminator_forward(gan: GanPair, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    out = gan.discriminator(x)
    return out.reshape(out.data.shape[0])


def generate(gan: GanPair, z: np.ndarray) -> np.ndarray:
    """Frozen-params sampling: (B, 100) noise -> (B, C_out, M, N)."""
    gan.generator.eval()
    try:
        with no_grad():
            chunks = [generator_forward(gan, z[i : i + _SAMPLE_CHUNK]).data
                      for i in range(0, len(z), _SAMPLE_CHUNK)]
    finally:
        gan.generator.train()
    return np.concatenate(chunks, axis=0)


def gan_losses(d_real: Tensor, d_fake: Tensor):
    """(value_V, loss_D, loss_G) from discriminator probabilities.

    value_V = mean log d_real + mean log(1 - d_fake); loss_D = -value_V;
    loss_G is the non-saturating -mean log d_fake.
    """
    lo, hi = _BCE_EPS, 1.0 - _BCE_EPS
    value_v = d_real.clip(lo, hi).log().mean() + (1.0 - d_fake).clip(lo, hi).log().mean()
    loss_g = d_fake.clip(lo, hi).log().mean() * -1.0
    return value_v, value_v * -1.0, loss_g


generated_variance_reg = variance_reg


def train_gan(latents: Dataset, cfg: GanTrainConfig, gan: GanPair = None,
              on_epoch=None):
    """Alternating single-step updates; returns (GanPair, history rows).

    History per epoch: loss_d, loss_g, value_v, reg_value (per-batch means)
    and sample_reg, the variance penalty of a fresh 64-sample draw -- a
    reading of 0 flags mode collapse.  ``on_epoch(gan, row)`` fires after
    each epoch, e.g. for checkpointing.
    """
    cfg.validate()
    if len(latents) == 0:
        raise ConfigError("latent dataset is empty")
    m, n, c = latents.cube_shape
    if m != n:
        raise ConfigError(f"square cubes required, got {m}x{n}")
    if gan is None:
        gan = build_gan(c, m, target=cfg.target, seed=cfg.seed)
    elif gan.out_channels != c or gan.spatial != m:
        raise ConfigError(
            f"network generates {gan.out_channels}x{gan.spatial}^2, data is {c}x{m}^2"
        )
    x_all = cubes_to_batch(latents.cubes)
    opt_d = engine.Adam(gan.discriminator.parameters(), lr=cfg.lr, beta1=0.5)
    opt_g = engine.Adam(gan.generator.parameters(), lr=cfg.lr, beta1=0.5)

    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([int(cfg.seed), 0x6A2, epoch])
        order = rng.permutation(len(x_all))
        sums = {"loss_d": 0.0, "loss_g": 0.0, "value_v": 0.0, "reg_value": 0.0}
        batches = 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            if len(idx) < 2:
                continue
            bsz = len(idx)
            # discriminator step on real batch vs detached fakes
            z = rng.standard_normal((bsz, Z_DIM)).astype(np.float32)
            fake = generator_forward(gan, z)
            d_real = discriminator_forward(gan, x_all[idx])
            d_fake = discriminator_forward(gan, fake.detach())
            value_v, loss_d, _ = gan_losses(d_real, d_fake)
            opt_d.zero_grad()
            engine.backward(loss_d)
            opt_d.step()

            # generator step on a fresh draw
            z = rng.standard_normal((bsz, Z_DIM)).astype(np.float32)
            fake = generator_forward(gan, z)
            d_out = discriminator_forward(gan, fake)
            _, _, loss_g = gan_losses(d_out, d_out)
            reg_val = variance_reg(fake.data)
            objective = loss_g
            if cfg.mu_gan > 0:
                objective = loss_g - variance_reg(fake) * cfg.mu_gan
            if not (np.isfinite(loss_d.item()) and np.isfinite(objective.item())):
                raise TrainingError(f"adversarial loss diverged at epoch {epoch}")
            opt_g.zero_grad()
            engine.backward(objective)
            opt_g.step()

            sums["loss_d"] += float(loss_d.item())
            sums["loss_g"] += float(loss_g.item())
            sums["value_v"] += float(value_v.item())
            sums["reg_value"] += reg_val
            batches += 1
        k = max(batches, 1)
        probe = generate(gan, np.random.default_rng([int(cfg.seed), 0x6A3, epoch])
                         .standard_normal((64, Z_DIM)).astype(np.float32))
        history.append({
            "epoch": epoch,
            "loss_d": sums["loss_d"] / k,
            "loss_g": sums["loss_g"] / k,
            "value_v": sums["value_v"] / k,
            "reg_value": sums["reg_value"] / k,
            "sample_reg": variance_reg(probe),
        })
        if on_epoch is not None:
            on_epoch(gan, history[-1])
    return gan, history


def sample_latents(gan: GanPair, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0x6A4])
    z = rng.standard_normal((n, Z_DIM)).astype(np.float32)
    if n == 0:
        return np.zeros((0, gan.out_channels, gan.spatial, gan.spatial), dtype=np.float32)
    return generate(gan, z)


def sample_spectral(n: int, gan: GanPair, ae: Autoencoder, seed: int = 0):
    """n generated cubes decoded to full spectra; [] when n = 0."""
    if gan.target != "latent" or gan.out_channels != ae.c:
        raise ConfigError(
            f"generator emits {gan.out_channels}-channel {gan.target} cubes; "
            f"decoder expects {ae.c}-channel latents"
        )
    if n == 0:
        return []
    out = decode(ae, sample_latents(gan, n, seed))
    return batch_to_cubes(out)


def sample_full(n: int, gan: GanPair, seed: int = 0):
    """Full-cube baseline sampling (generator trained with target='full')."""
    if gan.target != "full":
        raise ConfigError("sample_full needs a generator trained on full cubes")
    if n == 0:
        return []
    return batch_to_cubes(sample_latents(gan, n, seed))


GAN_HISTORY_FIELDS = ("epoch", "loss_d", "loss_g", "value_v", "reg_value", "sample_reg")


def save_gan(path, gan: GanPair, extra_meta: dict = None) -> None:
    meta = {"kind": "gan", "out_channels": gan.out_channels,
            "spatial": gan.spatial, "target": gan.target}
    if extra_meta:
        meta.update(extra_meta)
    save_params(path, b"GANP", meta, gan.state_arrays())


def load_gan(path) -> GanPair:
    meta, arrays = load_params(path, b"GANP")
    gan = build_gan(int(meta["out_channels"]), int(meta["spatial"]), meta["target"])
    gan.load_state(arrays)
    return gan
