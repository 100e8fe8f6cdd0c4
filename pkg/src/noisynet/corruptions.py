"""Natural image corruptions at five severity levels.

The severity parameter tables below are repo constants chosen for small
grayscale/color images; every transform clips back to [0, 1] and is
deterministic per (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import RngStream
from .validation import check_batch

KINDS = ("gaussian", "impulse", "glass_blur", "contrast")

GAUSSIAN_STD = (0.04, 0.06, 0.08, 0.09, 0.10)
IMPULSE_FRACTION = (0.01, 0.02, 0.03, 0.05, 0.07)
GLASS_BLUR_SIGMA = (0.7, 0.9, 1.0, 1.1, 1.5)
GLASS_BLUR_ROUNDS = (1, 2, 2, 3, 3)
GLASS_BLUR_RADIUS = (1, 1, 2, 2, 3)
CONTRAST_FACTOR = (0.75, 0.5, 0.4, 0.3, 0.15)

_KIND_STREAM = {kind: i + 1 for i, kind in enumerate(KINDS)}


@dataclass
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def gaussian_noise(x: np.ndarray, std: float, stream: RngStream) -> np.ndarray:
    return np.clip(x + std * stream.standard_normal(x.shape), 0.0, 1.0)


def impulse_noise(x: np.ndarray, fraction: float, stream: RngStream) -> np.ndarray:
    """Salt-and-pepper: a `fraction` of pixels become 0 or 1 equiprobably."""
    hit = stream.uniform(x.shape) < fraction
    salt = stream.uniform(x.shape) < 0.5
    out = x.copy()
    out[hit] = salt[hit].astype(np.float64)
    return out


def glass_blur(x: np.ndarray, blur_sigma: float, rounds: int, radius: int,
               stream: RngStream) -> np.ndarray:
    """Gaussian blur followed by rounds of local random pixel swaps.

    Swaps walk the image in raster order; each pixel trades places with a
    random neighbour within `radius`.  Offsets are drawn per image so a
    batch is a stack of independently corrupted images.
    """
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for ch in range(c):
            out[i, ch] = gaussian_filter(x[i, ch], sigma=blur_sigma, mode="nearest")
    if rounds > 0 and radius > 0:
        offsets = stream.integers(-radius, radius + 1, (rounds, n, h, w, 2))
        idx = np.arange(n)
        for r in range(rounds):
            for row in range(h):
                for col in range(w):
                    row2 = np.clip(row + offsets[r, :, row, col, 0], 0, h - 1)
                    col2 = np.clip(col + offsets[r, :, row, col, 1], 0, w - 1)
                    tmp = out[idx, :, row, col].copy()
                    out[idx, :, row, col] = out[idx, :, row2, col2]
                    out[idx, :, row2, col2] = tmp
    return np.clip(out, 0.0, 1.0)


def contrast(x: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from each image's mean intensity by `factor`."""
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip((x - mean) * factor + mean, 0.0, 1.0)


def corrupt(x, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption kind at the given severity; output stays in [0, 1]."""
    spec.validate()
    x = check_batch(x, "x")
    if x.ndim != 4:
        raise ValueError("corrupt expects image batches (n, C, H, W)")
    level = int(spec.severity) - 1
    stream = RngStream(spec.seed, _KIND_STREAM[spec.kind]).substream(spec.severity)
    if spec.kind == "gaussian":
        out = gaussian_noise(x, GAUSSIAN_STD[level], stream)
    elif spec.kind == "impulse":
        out = impulse_noise(x, IMPULSE_FRACTION[level], stream)
    elif spec.kind == "glass_blur":
        out = glass_blur(x, GLASS_BLUR_SIGMA[level], GLASS_BLUR_ROUNDS[level],
                         GLASS_BLUR_RADIUS[level], stream)
    else:
        out = contrast(x, CONTRAST_FACTOR[level])
    return out


def corruption_accuracy(net, dataset, kind: str, seed: int = 0,
                        noise_mode: str | None = None,
                        batch_size: int = 256):
    """Accuracy at each severity 1..5 plus their unweighted mean.

    The model's own noise is active by default when it has noise layers
    (randomization is part of the defense); pass noise_mode to override.
    """
    from .network import predict

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if kind not in KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if noise_mode is None:
        noise_mode = "active" if net.has_noise() else "disabled"
    accuracies = []
    for severity in range(1, 6):
        spec = CorruptionSpec(kind=kind, severity=severity, seed=seed)
        corrupted = corrupt(dataset.images, spec)
        eval_stream = RngStream(seed, _KIND_STREAM[kind]).substream(severity, 0xE7A1)
        correct = 0
        for start in range(0, len(dataset), batch_size):
            xb = corrupted[start:start + batch_size]
            yb = dataset.labels[start:start + batch_size]
            preds = predict(net, xb, noise_mode=noise_mode, rng=eval_stream)
            correct += int((preds == yb).sum())
        accuracies.append(correct / len(dataset))
    return accuracies, float(np.mean(accuracies))
