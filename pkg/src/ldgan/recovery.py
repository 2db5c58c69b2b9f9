"""Task networks for the three inverse problems and their training loop.

CASSI recovery uses an unrolled gradient network: each stage takes a data
fidelity step x - alpha * Ht(H x - y) with a learned scalar step size,
then refines it with a small residual conv prior.  The RGB-to-spectral
and super-resolution tasks share an encoder-decoder net with skip
connections (channel ladder 32-64-128-256, four stride-2 descents, four
transpose-conv ascents, sigmoid head).  The super-resolution input is the
decimated cube replicated back to full size (nearest neighbor) first.

Training minimizes mean squared recovery error over measurements
simulated on the fly from the training cubes, optionally topping up the
set with geometric or generated cubes, and reports the best test-set
PSNR/SSIM seen over the run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ldgan import engine
from ldgan.checkpoints import load_params, save_params
from ldgan.dataio import (
    Dataset,
    assemble_augmented,
    cubes_to_batch,
    geometric_pool,
)
from ldgan.engine import Tensor, apply_linear, concat, mse_loss, no_grad
from ldgan.engine import functional as F
from ldgan.engine.nn import Activation, Conv2d, ConvTranspose2d, Sequential
from ldgan.errors import ConfigError, ShapeError, TrainingError
from ldgan.operators import CodedAperture, ForwardOperator, Measurement, make_operator

UNET_LADDER = (32, 64, 128, 256)
CSI_STAGES = 5
CSI_PRIOR_WIDTH = 32
TASK_SOURCES = ("none", "geometric", "s-gan", "ld-gan")
TASK_HISTORY_FIELDS = ("epoch", "train_loss", "lr", "test_psnr", "test_ssim")
REPORT_FIELDS = ("task", "source", "fraction", "seed", "best_psnr", "best_ssim",
                 "epoch_of_best")


# ---------------------------------------------------------------------------
# measurement plumbing

def measurement_batch(y) -> np.ndarray:
    """Cube-level Measurement (channel-last) -> (1, C, ...) channel-first."""
    v = y.value if isinstance(y, Measurement) else np.asarray(y)
    if v.ndim == 2:  # cassi: (M, W)
        return v[None, None]
    return v.transpose(2, 0, 1)[None]


def upsample_nearest(y: np.ndarray, s: int, k_l: int) -> np.ndarray:
    """Replicate a decimated (B, L/k_l, m, n) batch back to (B, L, m*s, n*s)."""
    up = np.repeat(np.repeat(y, s, axis=2), s, axis=3)
    return np.repeat(up, k_l, axis=1)


def backproject(op: ForwardOperator, y: np.ndarray) -> np.ndarray:
    """Adjoint image normalized by the operator's response to a flat cube.

    Voxels the operator never observes (closed aperture cells) stay zero.
    """
    num = op.batch_adjoint(y)
    ones = np.ones((1, op.l, op.m, op.n), dtype=y.dtype)
    den = op.batch_adjoint(op.batch_forward(ones))
    return np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)


def baseline_recover(y: Measurement, op: ForwardOperator) -> np.ndarray:
    """Training-free estimate the task nets are judged against."""
    yb = measurement_batch(y)
    if op.kind == "sisr":
        x0 = upsample_nearest(yb, op.s, op.k_l)
    else:
        x0 = backproject(op, yb)
    return np.clip(x0[0].transpose(1, 2, 0), 0.0, 1.0).astype(np.float64)


def fidelity_gradient(x: np.ndarray, y: np.ndarray, op: ForwardOperator) -> np.ndarray:
    """Data term gradient Ht(H x - y) on channel-first batches."""
    return op.batch_adjoint(op.batch_forward(x) - y)


# ---------------------------------------------------------------------------
# networks

class _UnrolledCsi:
    """Fixed-depth unrolled gradient descent with per-stage residual priors."""

    def __init__(self, op, stages, width, rng, dtype):
        self.op = op
        # shape (1,) rather than a 0-d scalar so the checkpoint container
        # round-trips the step sizes without a rank special case
        self.alphas = [
            Tensor(np.full(1, 0.5, dtype=dtype), requires_grad=True) for _ in range(stages)
        ]
        self.priors = [
            Sequential(
                Conv2d(op.l, width, rng=rng, dtype=dtype),
                Activation("relu"),
                Conv2d(width, width, rng=rng, dtype=dtype),
                Activation("relu"),
                Conv2d(width, op.l, rng=rng, dtype=dtype),
            )
            for _ in range(stages)
        ]
        self.width = width

    def forward(self, y):
        yv = y.data if isinstance(y, Tensor) else np.asarray(y)
        x = Tensor(backproject(self.op, yv))
        y = Tensor(yv)
        for alpha, prior in zip(self.alphas, self.priors):
            x = unrolled_csi_stage(x, y, self.op, alpha, prior)
        return x

    def parameters(self):
        out = []
        for alpha, prior in zip(self.alphas, self.priors):
            out.append(alpha)
            out.extend(prior.parameters())
        return out


def unrolled_csi_stage(x, y, op: ForwardOperator, alpha, prior) -> Tensor:
    """One stage: prior-refined gradient step on the data fidelity term.

    The prior is applied residually, so a zero-weight prior with alpha = 0
    leaves x untouched.
    """
    r = apply_linear(x, op.batch_forward, op.batch_adjoint, op="measure") - y
    g = apply_linear(r, op.batch_adjoint, op.batch_forward, op="measure_t")
    x = x - alpha * g
    return x + prior(x)


class _Unet:
    """Skip-connected encoder-decoder; needs M, N divisible by 2^len(widths)."""

    def __init__(self, in_ch, out_ch, widths, rng, dtype):
        self.enc = []
        prev = in_ch
        for w in widths:
            feat = Conv2d(prev, w, rng=rng, dtype=dtype)
            down = Conv2d(w, w, kernel=4, stride=2, padding=1, rng=rng, dtype=dtype)
            self.enc.append((feat, down))
            prev = w
        self.mid = Conv2d(prev, prev, rng=rng, dtype=dtype)
        self.dec = []
        for w in reversed(widths):
            up = ConvTranspose2d(prev, w, init="he", rng=rng, dtype=dtype)
            fuse = Conv2d(2 * w, w, rng=rng, dtype=dtype)
            self.dec.append((up, fuse))
            prev = w
        self.head = Conv2d(prev, out_ch, rng=rng, dtype=dtype)

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        skips = []
        for feat, down in self.enc:
            x = F.activation(feat(x), "relu")
            skips.append(x)
            x = F.activation(down(x), "relu")
        x = F.activation(self.mid(x), "relu")
        for (up, fuse), skip in zip(self.dec, reversed(skips)):
            x = F.activation(up(x), "relu")
            x = F.activation(fuse(concat([x, skip], axis=1)), "relu")
        return F.activation(self.head(x), "sigmoid")

    def parameters(self):
        out = []
        for feat, down in self.enc:
            out.extend(feat.parameters() + down.parameters())
        out.extend(self.mid.parameters())
        for up, fuse in self.dec:
            out.extend(up.parameters() + fuse.parameters())
        out.extend(self.head.parameters())
        return out


@dataclass
class RecoveryNet:
    kind: str  # "unrolled-csi" | "unet"
    op: ForwardOperator
    core: object
    widths: tuple = UNET_LADDER
    stages: int = CSI_STAGES
    prior_width: int = CSI_PRIOR_WIDTH

    def parameters(self):
        return self.core.parameters()

    def state_arrays(self):
        return [p.data for p in self.parameters()]

    def load_state(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} tensors, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.data.shape:
                raise ShapeError(f"checkpoint tensor {a.shape} != parameter {p.data.shape}")
            p.data = a.astype(p.data.dtype)

    def net_input(self, y: np.ndarray) -> np.ndarray:
        """Measurement batch -> what the core net consumes."""
        if self.op.kind == "sisr":
            return upsample_nearest(y, self.op.s, self.op.k_l)
        return y

    def forward_batch(self, y: np.ndarray) -> Tensor:
        """Tape-recorded recovery of a (B, C, ...) measurement batch."""
        if self.kind == "unrolled-csi":
            return self.core.forward(y)
        return self.core.forward(self.net_input(y))


def build_recovery(op: ForwardOperator, seed: int = 0, dtype=np.float32,
                   stages: int = CSI_STAGES, prior_width: int = CSI_PRIOR_WIDTH,
                   widths=UNET_LADDER) -> RecoveryNet:
    rng = np.random.default_rng([int(seed), 0x4E0])
    widths = tuple(int(w) for w in widths)
    if op.kind == "cassi":
        if stages < 1 or prior_width < 1:
            raise ConfigError("need at least one stage and a positive prior width")
        core = _UnrolledCsi(op, stages, prior_width, rng, dtype)
        return RecoveryNet("unrolled-csi", op, core, widths, stages, prior_width)
    factor = 1 << len(widths)
    if op.m % factor or op.n % factor:
        raise ConfigError(
            f"{len(widths)} downsampling stages need M, N divisible by {factor}, "
            f"got {op.m}x{op.n}"
        )
    in_ch = 3 if op.kind == "rgb" else op.l
    core = _Unet(in_ch, op.l, widths, rng, dtype)
    return RecoveryNet("unet", op, core, widths, stages, prior_width)


def recover(y: Measurement, net: RecoveryNet) -> np.ndarray:
    """Single measurement -> (M, N, L) cube in [0, 1]."""
    if isinstance(y, Measurement) and y.kind != net.op.kind:
        raise ConfigError(f"measurement kind '{y.kind}' does not match '{net.op.kind}'")
    yb = measurement_batch(y).astype(_net_dtype(net))
    with no_grad():
        out = net.forward_batch(yb)
    return np.clip(out.data[0].transpose(1, 2, 0), 0.0, 1.0).astype(np.float64)


def _net_dtype(net: RecoveryNet):
    return net.parameters()[0].data.dtype


# ---------------------------------------------------------------------------
# training

@dataclass
class TaskTrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    lr_decay: bool = False  # exponential x0.97 per epoch (the RGB task wants it)
    batch: int = 4
    seed: int = 0
    source: str = "none"
    fraction: float = 0.0
    snr_db: float = float("inf")  # noise on simulated measurements; inf = clean

    def validate(self):
        if self.source not in TASK_SOURCES:
            raise ConfigError(f"source must be one of {TASK_SOURCES}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.epochs < 1 or self.lr <= 0 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1 and lr > 0")


def _augmented_train_set(train: Dataset, cfg: TaskTrainConfig, pool) -> Dataset:
    if cfg.source == "none" or cfg.fraction == 0.0:
        return train
    if cfg.source == "geometric":
        count = int(round(cfg.fraction * len(train)))
        transformed = geometric_pool(train, count, cfg.seed)
        return assemble_augmented(train, transformed, cfg.fraction, provenance="geometric")
    if pool is None:
        raise ConfigError(f"source '{cfg.source}' needs an augmentation pool")
    cubes = pool.cubes if isinstance(pool, Dataset) else list(pool)
    return assemble_augmented(train, cubes, cfg.fraction, provenance=cfg.source)


def _eval_task(net: RecoveryNet, test_batch: np.ndarray) -> tuple:
    from ldgan.analysis import psnr, ssim

    with no_grad():
        out = net.forward_batch(net.op.batch_forward(test_batch)).data
    out = np.clip(out, 0.0, 1.0)
    ps, ss = [], []
    for ref, got in zip(test_batch, out):
        a = ref.transpose(1, 2, 0).astype(np.float64)
        b = got.transpose(1, 2, 0).astype(np.float64)
        ps.append(min(psnr(a, b), 99.0))
        ss.append(ssim(a, b))
    return float(np.mean(ps)), float(np.mean(ss))


def train_task(train: Dataset, test: Dataset, op: ForwardOperator,
               cfg: TaskTrainConfig, pool=None, net: RecoveryNet = None,
               on_epoch=None):
    """Returns (RecoveryNet, report dict, history rows).

    The report carries the best test PSNR/SSIM and the epoch that reached
    it; ``pool`` supplies generated cubes for the s-gan / ld-gan sources.
    ``on_epoch(net, row)`` fires after each epoch, e.g. for checkpointing.
    """
    cfg.validate()
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("train and test splits must be non-empty")
    if train.cube_shape != test.cube_shape:
        raise ShapeError(
            f"train {train.cube_shape} and test {test.cube_shape} cubes disagree"
        )
    m, n, l = train.cube_shape
    if (op.m, op.n, op.l) != (m, n, l):
        raise ShapeError(f"operator is bound to {(op.m, op.n, op.l)}, data is {(m, n, l)}")
    if net is None:
        net = build_recovery(op, seed=cfg.seed)

    ds = _augmented_train_set(train, cfg, pool)
    dtype = _net_dtype(net)
    x_all = cubes_to_batch(ds.cubes, dtype=dtype)
    test_batch = cubes_to_batch(test.cubes, dtype=dtype)

    params = net.parameters()
    opt_state = engine.AdamState(params)
    lr = cfg.lr
    history = []
    best = {"best_psnr": -np.inf, "best_ssim": float("nan"), "epoch_of_best": -1}
    for epoch in range(cfg.epochs):
        shuffle = np.random.default_rng([int(cfg.seed), 0x4E1, epoch])
        order = shuffle.permutation(len(x_all))
        loss_sum = 0.0
        batches = 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            x = x_all[idx]
            y = op.batch_measure(x)
            if np.isfinite(cfg.snr_db):
                y = _noisy_batch(y, cfg.snr_db, shuffle)
            loss = mse_loss(net.forward_batch(y), Tensor(x))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            for p in params:
                p.zero_grad()
            engine.backward(loss)
            engine.adam_step(params, [p.grad for p in params], opt_state, lr)
            loss_sum += float(loss.item())
            batches += 1
        psnr_val, ssim_val = _eval_task(net, test_batch)
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / max(batches, 1),
            "lr": lr,
            "test_psnr": psnr_val,
            "test_ssim": ssim_val,
        })
        if psnr_val > best["best_psnr"]:
            best = {"best_psnr": psnr_val, "best_ssim": ssim_val, "epoch_of_best": epoch}
        if on_epoch is not None:
            on_epoch(net, history[-1])
        if cfg.lr_decay:
            lr *= 0.97
    report = {
        "task": op.kind,
        "source": cfg.source,
        "fraction": cfg.fraction,
        "seed": cfg.seed,
        **best,
    }
    return net, report, history


def _noisy_batch(y: np.ndarray, snr_db: float, rng) -> np.ndarray:
    power = float(np.mean(y.astype(np.float64) ** 2))
    sigma = np.sqrt(power / (10.0 ** (snr_db / 10.0)))
    return y + (sigma * rng.standard_normal(y.shape)).astype(y.dtype)


# ---------------------------------------------------------------------------
# persistence

def save_recovery(path, net: RecoveryNet, extra_meta: dict = None) -> None:
    meta = {
        "kind": net.kind,
        "task": net.op.kind,
        "m": net.op.m, "n": net.op.n, "l": net.op.l,
        "stages": net.stages, "prior_width": net.prior_width,
        "widths": list(net.widths),
        "k_s": net.op.k_s, "k_l": net.op.k_l,
    }
    arrays = net.state_arrays()
    if net.op.kind == "cassi":
        meta["transmittance"] = float(net.op.ca.transmittance)
        arrays = arrays + [net.op.ca.mask]
    if extra_meta:
        meta.update(extra_meta)
    save_params(path, b"RCVR", meta, arrays)


def load_recovery(path) -> RecoveryNet:
    meta, arrays = load_params(path, b"RCVR")
    m, n, l = int(meta["m"]), int(meta["n"]), int(meta["l"])
    if meta["task"] == "cassi":
        mask = arrays.pop().astype(np.float64)
        ca = CodedAperture(mask, float(meta["transmittance"]))
        op = ForwardOperator("cassi", m, n, l, ca=ca)
    else:
        op = make_operator(meta["task"], m, n, l,
                           k_s=int(meta["k_s"]), k_l=int(meta["k_l"]))
    net = build_recovery(op, stages=int(meta["stages"]),
                         prior_width=int(meta["prior_width"]),
                         widths=tuple(meta["widths"]))
    net.load_state(arrays)
    return net
