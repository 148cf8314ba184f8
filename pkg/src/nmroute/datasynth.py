"""Synthetic degradation data with restoration-difficulty pseudo labels.

The labeling pipeline for noise-like degradations:

1. subtract clean from degraded to get the residual R = y - x,
2. split the training distribution of per-sample residual variances into L
   quantile tiers and take each tier's median variance,
3. rescale every residual to its tier's median variance
   (R_i = R * sqrt(median_i) / sqrt(Var[R])) and rebuild the degraded image
   as clamp(x + R_i); the tier index is the pseudo label.

Variances are per sample over all pixels and channels jointly (population
form, computed in float64). The rescaled residual hits the tier median
exactly before clamping; the clamp-loss fraction is recorded in the
manifest.

Clean sources are procedurally generated (smooth gradients, rectangles,
band-limited texture) so no downloads are required; PGM/PPM import is
available for user-supplied images. Every sample derives its own RNG stream
from (seed, index), so parallel and serial synthesis agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateSampleError, FormatError, ShapeError
from .tensorio import read_tensor, write_tensor


@dataclass
class LabeledSample:
    """One (degraded, clean, difficulty-class) training triple in [0, 1]."""

    degraded: np.ndarray  # (C, H, W) float32
    clean: np.ndarray
    pseudo_class: int

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise ShapeError("degraded/clean shape mismatch")


@dataclass(frozen=True)
class DifficultyTiers:
    """Quantile split of residual variances into difficulty classes."""

    medians: tuple  # per-class median variance, strictly increasing
    boundaries: tuple  # L-1 upper variance thresholds

    def __post_init__(self):
        med = np.asarray(self.medians)
        if len(med) > 1 and not (np.diff(med) > 0).all():
            raise ContractError("tier medians must be strictly increasing")

    @property
    def num_classes(self) -> int:
        return len(self.medians)

    def classify(self, variance: float) -> int:
        """Tier index of a residual variance; boundary values go to the lower tier."""
        return int(np.searchsorted(np.asarray(self.boundaries), variance, side="left"))


def residual_variance(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.var((y - x).astype(np.float64)))


def compute_tiers(residual_variances, num_classes: int) -> DifficultyTiers:
    """Fit tier boundaries at the L-quantiles and medians per tier."""
    v = np.asarray(residual_variances, dtype=np.float64)
    if v.size == 0:
        raise ContractError("cannot fit tiers on an empty variance list")
    if num_classes < 1:
        raise ContractError("need at least one class")
    if num_classes == 1:
        return DifficultyTiers(medians=(float(np.median(v)),), boundaries=())
    if np.ptp(v) == 0:
        raise DegenerateSampleError("all residual variances equal; tiers are undefined")
    qs = [k / num_classes for k in range(1, num_classes)]
    boundaries = tuple(float(np.quantile(v, q)) for q in qs)
    classes = np.searchsorted(np.asarray(boundaries), v, side="left")
    medians = []
    for i in range(num_classes):
        members = v[classes == i]
        if members.size == 0:
            raise DegenerateSampleError(f"tier {i} is empty; variance distribution too clumped")
        medians.append(float(np.median(members)))
    return DifficultyTiers(medians=tuple(medians), boundaries=boundaries)


def residual_remap(y: np.ndarray, x: np.ndarray, tiers: DifficultyTiers):
    """Rescale the residual of (y, x) to its tier's median variance.

    Returns ``(sample, remapped_residual_f64, clamp_loss_fraction)``; the
    float64 residual has variance exactly equal to the tier median before
    the [0, 1] clamp is applied to ``x + residual``.
    """
    r = (np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64))
    var = float(np.var(r))
    if var <= 0.0:
        raise DegenerateSampleError("zero-variance residual cannot be difficulty-labeled")
    cls = tiers.classify(var)
    scale = np.sqrt(tiers.medians[cls] / var)
    r_i = r * scale
    raw = np.asarray(x, dtype=np.float64) + r_i
    clipped = np.clip(raw, 0.0, 1.0)
    clamp_loss = float(np.mean(raw != clipped))
    sample = LabeledSample(
        degraded=clipped.astype(np.float32),
        clean=np.asarray(x, dtype=np.float32),
        pseudo_class=cls,
    )
    return sample, r_i, clamp_loss


# ---------------------------------------------------------------------------
# degradation generators
# ---------------------------------------------------------------------------


def synth_gaussian(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise at level ``sigma`` on the 255 scale."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    if sigma == 0:
        return np.asarray(x, dtype=np.float32).copy()
    noise = rng.standard_normal(np.asarray(x).shape) * (sigma / 255.0)
    return np.clip(np.asarray(x, dtype=np.float64) + noise, 0.0, 1.0).astype(np.float32)


def deblur_fuse(frames) -> np.ndarray:
    """Fuse adjacent frames into one blurred image (mean of the stack)."""
    if len(frames) == 0:
        raise ContractError("cannot fuse an empty frame list")
    first = np.asarray(frames[0], dtype=np.float64)
    acc = np.zeros_like(first)
    for f in frames:
        fa = np.asarray(f, dtype=np.float64)
        if fa.shape != first.shape:
            raise ShapeError("all frames must share one shape")
        acc += fa
    return (acc / len(frames)).astype(np.float32)


# ---------------------------------------------------------------------------
# procedural clean images
# ---------------------------------------------------------------------------


def _separable_blur(img: np.ndarray, taps: int) -> np.ndarray:
    kernel = np.ones(taps) / taps
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, out)


def procedural_clean(rng: np.random.Generator, size: int, channels: int = 1) -> np.ndarray:
    """A clean (C, size, size) image: gradient + rectangles + soft texture."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((channels, size, size))
    for c in range(channels):
        theta = rng.uniform(0, 2 * np.pi)
        base = rng.uniform(0.15, 0.6)
        amp = rng.uniform(0.2, 0.5)
        plane = base + amp * (np.cos(theta) * xx + np.sin(theta) * yy)
        for _ in range(rng.integers(2, 6)):
            h = int(rng.integers(size // 8, size // 2))
            w = int(rng.integers(size // 8, size // 2))
            r0 = int(rng.integers(0, size - h))
            c0 = int(rng.integers(0, size - w))
            plane[r0 : r0 + h, c0 : c0 + w] += rng.uniform(-0.35, 0.35)
        texture = _separable_blur(rng.standard_normal((size, size)), 5) * 0.06
        img[c] = plane + texture
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def extract_patches(image: np.ndarray, patch_size: int, stride: int) -> list[np.ndarray]:
    """Deterministic tiling of a (C, H, W) image into patches."""
    C, H, W = image.shape
    if patch_size > H or patch_size > W:
        raise ShapeError(f"patch {patch_size} larger than image {H}x{W}")
    out = []
    for r in range(0, H - patch_size + 1, stride):
        for c in range(0, W - patch_size + 1, stride):
            out.append(np.ascontiguousarray(image[:, r : r + patch_size, c : c + patch_size]))
    return out


# ---------------------------------------------------------------------------
# dataset assembly and serialization
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    degraded: np.ndarray  # (N, C, H, W) float32
    clean: np.ndarray
    labels: np.ndarray  # (N,) int64
    manifest: dict
    sigma: np.ndarray | None = None  # generating noise level per sample (255 scale)

    def __len__(self):
        return self.degraded.shape[0]

    def class_histogram(self, num_classes: int) -> list[int]:
        return [int((self.labels == i).sum()) for i in range(num_classes)]


def _sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def synthesize_splits(
    seed: int,
    sigmas,
    num_classes: int,
    train_samples: int,
    test_samples: int,
    patch_size: int = 32,
    stride: int = 32,
    source_size: int = 64,
    channels: int = 1,
    clean_images: list[np.ndarray] | None = None,
) -> tuple[Dataset, Dataset]:
    """Build the train/test splits of a tiered Gaussian-noise dataset.

    Noise levels cycle through ``sigmas`` so classes stay balanced; tiers
    are fit on the training split's residual variances and applied to both
    splits. The whole procedure is a pure function of (inputs, seed).
    """
    total = train_samples + test_samples
    if train_samples <= 0 or test_samples < 0:
        raise ContractError("need a positive number of training samples")
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ContractError("need at least one sigma")

    patches: list[np.ndarray] = []
    if clean_images is not None:
        for img in clean_images:
            patches.extend(extract_patches(img, patch_size, stride))
            if len(patches) >= total:
                break
        if len(patches) < total:
            raise ContractError(f"clean sources yield {len(patches)} patches, need {total}")
    else:
        idx = 0
        while len(patches) < total:
            img = procedural_clean(_sample_rng(seed, 0, idx), source_size, channels)
            patches.extend(extract_patches(img, patch_size, stride))
            idx += 1
    patches = patches[:total]

    # deterministic interleave of noise levels, then a seeded shuffle so the
    # train/test split stays balanced
    order = np.random.default_rng([seed, 1]).permutation(total)
    cleans = [patches[i] for i in order]
    sigma_of = [sigmas[i % len(sigmas)] for i in range(total)]

    noisy = [synth_gaussian(cleans[i], sigma_of[i], _sample_rng(seed, 2, i)) for i in range(total)]
    variances = [residual_variance(noisy[i], cleans[i]) for i in range(total)]
    tiers = compute_tiers(variances[:train_samples], num_classes)

    deg, lab, clamp_losses = [], [], []
    for i in range(total):
        sample, _, closs = residual_remap(noisy[i], cleans[i], tiers)
        deg.append(sample.degraded)
        lab.append(sample.pseudo_class)
        clamp_losses.append(closs)

    def build(lo, hi, split):
        d = np.stack(deg[lo:hi]).astype(np.float32)
        c = np.stack(cleans[lo:hi]).astype(np.float32)
        y = np.asarray(lab[lo:hi], dtype=np.int64)
        s = np.asarray(sigma_of[lo:hi], dtype=np.float32)
        manifest = {
            "split": split,
            "samples": hi - lo,
            "shape": list(d.shape[1:]),
            "num_classes": num_classes,
            "class_histogram": [int((y == i).sum()) for i in range(num_classes)],
            "generator": "procedural-v1" if clean_images is None else "imported",
            "seed": seed,
            "sigmas": sigmas,
            "patch_size": patch_size,
            "stride": stride,
            "tiers": {"medians": list(tiers.medians), "boundaries": list(tiers.boundaries)},
            "clamp_loss_fraction": float(np.mean(clamp_losses[lo:hi])),
        }
        return Dataset(degraded=d, clean=c, labels=y, manifest=manifest, sigma=s)

    return build(0, train_samples, "train"), build(train_samples, total, "test")


def write_dataset(directory, dataset: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "degraded.nmt", dataset.degraded)
    write_tensor(d / "clean.nmt", dataset.clean)
    write_tensor(d / "labels.nmt", dataset.labels.astype(np.float32))
    if dataset.sigma is not None:
        write_tensor(d / "sigma.nmt", dataset.sigma.astype(np.float32))
    (d / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: not a dataset directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    degraded = read_tensor(d / "degraded.nmt")
    clean = read_tensor(d / "clean.nmt")
    labels = read_tensor(d / "labels.nmt").astype(np.int64)
    sigma = read_tensor(d / "sigma.nmt") if (d / "sigma.nmt").exists() else None
    if degraded.shape != clean.shape or degraded.shape[0] != labels.shape[0]:
        raise FormatError(f"{directory}: inconsistent tensor shapes")
    return Dataset(degraded=degraded, clean=clean, labels=labels, manifest=manifest, sigma=sigma)


# ---------------------------------------------------------------------------
# PGM/PPM import
# ---------------------------------------------------------------------------


def read_pnm(path) -> np.ndarray:
    """Load a binary or ASCII PGM/PPM image as (C, H, W) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    # header tokens (width, height, maxval) with comment support
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    w, h, maxval = tokens
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace after maxval
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float64)
    else:
        data = np.array(raw[pos:].split()[:count], dtype=np.float64)
    if data.size != count:
        raise FormatError(f"{path}: truncated pixel data")
    img = data.reshape(h, w, channels).transpose(2, 0, 1)
    return (img / maxval).astype(np.float32)
