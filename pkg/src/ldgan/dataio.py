"""Spectral-cube storage, synthetic dataset generation and augmentation.

A spectral cube is a numpy array shaped (M, N, L): two spatial axes and a
band axis, values in [0, 1] for image cubes (encoder latents reuse the
same container with unconstrained values).

The on-disk format (extension ``.scub``) is a fixed 32-byte header --
magic ``SCUB``, version, M, N, L as unsigned 32-bit little-endian, rest
reserved -- followed by band-planar float32 little-endian samples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ldgan.errors import ConfigError, FormatError

SCUB_MAGIC = b"SCUB"
SCUB_VERSION = 1
_HEADER = struct.Struct("<4sIIII12x")  # magic, version, M, N, L, reserved
_MAX_ELEMS = 1 << 28  # shape-overflow guard on load

PROVENANCE_TAGS = ("original", "geometric", "gan-generated")


# ---------------------------------------------------------------------------
# containers

@dataclass
class Dataset:
    """One split of cubes with identical (M, N, L) and per-cube provenance."""

    cubes: list
    provenance: list
    split: str = "train"

    def __post_init__(self):
        if len(self.cubes) != len(self.provenance):
            raise ConfigError("provenance list must match cube count")
        shapes = {c.shape for c in self.cubes}
        if len(shapes) > 1:
            raise ConfigError(f"cubes disagree on shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.cubes)

    @property
    def cube_shape(self):
        return self.cubes[0].shape if self.cubes else None


@dataclass
class SynthConfig:
    m: int = 32
    n: int = 32
    l: int = 8
    count: int = 400
    q_true: int = 4
    smoothness: float = 4.0
    seed: int = 0
    split: str = "train"
    start_index: int = 0  # offset into the cube stream, so splits never overlap

    def validate(self):
        if min(self.m, self.n, self.l, self.count) < 1:
            raise ConfigError("m, n, l, count must all be >= 1")
        if self.q_true > self.l:
            raise ConfigError(f"q_true={self.q_true} exceeds band count l={self.l}")
        if self.q_true < 1:
            raise ConfigError("q_true must be >= 1")


def check_cube(cube, name: str = "cube"):
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ConfigError(f"{name} must be (M, N, L), got shape {cube.shape}")
    return cube


# ---------------------------------------------------------------------------
# synthetic data: exact linear mixtures of smooth band signatures

def planted_signatures(l: int, q: int, seed: int) -> np.ndarray:
    """The (q, L) spectral signatures a dataset with this seed is built from."""
    rng = np.random.default_rng([int(seed), 0x51])
    grid = np.arange(l, dtype=np.float64)
    centers = (np.arange(q) + 0.5) / q * (l - 1)
    centers += rng.uniform(-0.25, 0.25, size=q) * (l - 1) / max(q, 1)
    widths = (0.5 + 0.6 * rng.uniform(size=q)) * l / (2.0 * q) + 0.35
    sigs = 0.05 + np.exp(-((grid[None, :] - centers[:, None]) ** 2) / (2.0 * widths[:, None] ** 2))
    return sigs / sigs.max(axis=1, keepdims=True)


def _abundance_maps(m, n, q, smoothness, rng):
    """Smooth nonnegative per-material weights summing to 1 at every pixel."""
    fields = np.empty((q, m, n))
    for j in range(q):
        f = gaussian_filter(rng.standard_normal((m, n)), sigma=smoothness, mode="wrap")
        std = f.std()
        fields[j] = f / std if std > 0 else f
    fields *= 3.0  # sharpen the softmax so mixtures vary across the scene
    fields -= fields.max(axis=0, keepdims=True)
    ab = np.exp(fields)
    ab /= ab.sum(axis=0, keepdims=True)

    # guarantee one exactly-pure pixel per material
    flat = rng.choice(m * n, size=q, replace=False)
    for j, pos in enumerate(flat):
        i, k = divmod(int(pos), n)
        ab[:, i, k] = 0.0
        ab[j, i, k] = 1.0
    return ab


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Generate ``cfg.count`` cubes from one set of planted signatures.

    Every cube is an exact linear mixture: pixel spectrum = sum_j a_j * s_j
    with the q_true signatures shared across the whole dataset, so a rank
    q_true fit is exact and vertex-component analysis can recover the
    signatures from the guaranteed pure pixels.
    """
    cfg.validate()
    sigs = planted_signatures(cfg.l, cfg.q_true, cfg.seed)
    cubes = []
    for i in range(cfg.count):
        rng = np.random.default_rng([int(cfg.seed), 0xC0, cfg.start_index + i])
        ab = _abundance_maps(cfg.m, cfg.n, cfg.q_true, cfg.smoothness, rng)
        cube = np.tensordot(ab, sigs, axes=(0, 0))  # (M, N, L)
        cube /= cube.max()
        cubes.append(cube)
    return Dataset(cubes, ["original"] * cfg.count, split=cfg.split)


# ---------------------------------------------------------------------------
# patches

def extract_patches(cube, size: int):
    """Non-overlapping ``size`` x ``size`` tiles, row-major order."""
    cube = check_cube(cube)
    m, n, _ = cube.shape
    if size < 1 or m % size or n % size:
        raise ConfigError(f"patch size {size} must tile the {m}x{n} cube exactly")
    out = []
    for i in range(0, m, size):
        for j in range(0, n, size):
            out.append(cube[i : i + size, j : j + size, :].copy())
    return out


def assemble_patches(patches, rows: int, cols: int):
    """Inverse of :func:`extract_patches` for a rows x cols tiling."""
    if len(patches) != rows * cols:
        raise ConfigError(f"{len(patches)} patches cannot fill a {rows}x{cols} grid")
    bands = [np.concatenate(patches[r * cols : (r + 1) * cols], axis=1) for r in range(rows)]
    return np.concatenate(bands, axis=0)


def patch_dataset(ds: Dataset, size: int) -> Dataset:
    cubes, prov = [], []
    for cube, p in zip(ds.cubes, ds.provenance):
        tiles = extract_patches(cube, size)
        cubes.extend(tiles)
        prov.extend([p] * len(tiles))
    return Dataset(cubes, prov, split=ds.split)


# ---------------------------------------------------------------------------
# geometric augmentation

GEOMETRIC_TRANSFORMS = ("rot90", "rot180", "rot270", "hflip", "vflip")


def geometric_augment(cube, transform: str):
    """Apply one spatial transform identically to every band."""
    cube = check_cube(cube)
    m, n, _ = cube.shape
    if transform.startswith("rot") and m != n:
        raise ConfigError(f"{transform} requires a square cube, got {m}x{n}")
    if transform == "rot90":
        out = np.rot90(cube, k=1, axes=(0, 1))
    elif transform == "rot180":
        out = np.rot90(cube, k=2, axes=(0, 1))
    elif transform == "rot270":
        out = np.rot90(cube, k=3, axes=(0, 1))
    elif transform == "hflip":
        out = cube[:, ::-1, :]
    elif transform == "vflip":
        out = cube[::-1, :, :]
    else:
        raise ConfigError(f"unknown transform '{transform}'")
    return np.ascontiguousarray(out)


def geometric_pool(ds: Dataset, count: int, seed: int):
    """Random (transform, cube) draws, the traditional-augmentation pool."""
    rng = np.random.default_rng([int(seed), 0x6E0])
    out = []
    for _ in range(count):
        cube = ds.cubes[int(rng.integers(len(ds.cubes)))]
        t = GEOMETRIC_TRANSFORMS[int(rng.integers(len(GEOMETRIC_TRANSFORMS)))]
        out.append(geometric_augment(cube, t))
    return out


def assemble_augmented(base: Dataset, extra, fraction: float,
                       provenance: str = "gan-generated") -> Dataset:
    """Extend a train split with ``round(fraction * len(base))`` pool cubes."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    n_extra = int(round(fraction * len(base)))
    if n_extra == 0:
        return Dataset(list(base.cubes), list(base.provenance), split=base.split)
    if len(extra) < n_extra:
        raise ConfigError(
            f"augmentation pool has {len(extra)} cubes, need {n_extra} "
            f"for fraction {fraction} of {len(base)}"
        )
    cubes = list(base.cubes) + [np.asarray(c) for c in extra[:n_extra]]
    prov = list(base.provenance) + [provenance] * n_extra
    return Dataset(cubes, prov, split=base.split)


# ---------------------------------------------------------------------------
# .scub I/O

def save_cube(cube, path):
    cube = check_cube(cube)
    m, n, l = cube.shape
    payload = np.ascontiguousarray(cube.transpose(2, 0, 1), dtype="<f4")  # band-planar
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SCUB_MAGIC, SCUB_VERSION, m, n, l))
        fh.write(payload.tobytes())


def load_cube(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, m, n, l = _HEADER.unpack(header)
        if magic != SCUB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != SCUB_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if min(m, n, l) < 1 or m * n * l > _MAX_ELEMS:
            raise FormatError(f"{path}: implausible dimensions M={m} N={n} L={l}")
        body = fh.read()
    expected = 4 * m * n * l
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload is {len(body)} bytes but header M={m} N={n} L={l} "
            f"implies {expected}"
        )
    planes = np.frombuffer(body, dtype="<f4").reshape(l, m, n)
    return np.ascontiguousarray(planes.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# dataset directories

def save_dataset(ds: Dataset, root) -> Path:
    """Write ``<root>/<split>/<index>.scub`` plus a provenance manifest."""
    root = Path(root)
    split_dir = root / ds.split
    split_dir.mkdir(parents=True, exist_ok=True)
    for i, cube in enumerate(ds.cubes):
        save_cube(cube, split_dir / f"{i:05d}.scub")
    manifest_path = root / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    m, n, l = ds.cube_shape
    manifest[ds.split] = {
        "count": len(ds),
        "m": m, "n": n, "l": l,
        "provenance": list(ds.provenance),
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_dataset(root, split: str) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{root}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest:
        raise FormatError(f"{root}: split '{split}' not in manifest")
    entry = manifest[split]
    cubes = [load_cube(root / split / f"{i:05d}.scub") for i in range(entry["count"])]
    return Dataset(cubes, list(entry["provenance"]), split=split)


# ---------------------------------------------------------------------------
# batch layout converters (cubes are band-last, the engine is channel-first)

def cubes_to_batch(cubes, dtype=np.float32) -> np.ndarray:
    """(M, N, L) cubes -> (B, L, M, N) activation batch."""
    return np.stack([np.asarray(c).transpose(2, 0, 1) for c in cubes]).astype(dtype)


def batch_to_cubes(batch) -> list:
    """(B, L, M, N) batch -> list of (M, N, L) cubes (float64)."""
    return [np.ascontiguousarray(b.transpose(1, 2, 0)).astype(np.float64) for b in batch]
