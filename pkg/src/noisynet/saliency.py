"""Smoothed input-gradient saliency maps, written out as PGM images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkState, input_gradient, predict
from .tensor import RngStream


@dataclass
class SaliencyConfig:
    smoothing_std: float = 0.15   # input-space Gaussian std
    samples: int = 25             # perturbed copies averaged
    target: int | str = "predicted"
    noise_mode: str = "disabled"  # model noise while differentiating

    def validate(self) -> None:
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.smoothing_std < 0:
            raise ValueError(f"smoothing_std must be >= 0, got {self.smoothing_std}")


def saliency_map(net: NetworkState, x, cfg: SaliencyConfig | None = None,
                 stream: RngStream | None = None) -> np.ndarray:
    """Average of squared class-score input gradients over noisy copies.

    Returns the raw (H, W) map with channels summed; normalization to
    [0, 1] happens only when the map is written out.  With samples=1 and
    smoothing_std=0 this is exactly the squared channel-summed gradient of
    the class score.
    """
    cfg = cfg or SaliencyConfig()
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(net.input_shape) + 1 and x.shape[0] == 1:
        x = x[0]
    if x.ndim == 1:
        x = x.reshape(1, 1, -1)
    if x.ndim != 3:
        raise ValueError(f"saliency_map expects a single image, got shape {x.shape}")

    model_rng = RngStream(0, 0x5A11) if stream is None else stream.substream(1)
    if cfg.target == "predicted":
        target = int(predict(net, x[None], noise_mode=cfg.noise_mode,
                             rng=model_rng)[0])
    else:
        target = int(cfg.target)

    if cfg.smoothing_std > 0 and stream is None:
        raise ValueError("smoothing_std > 0 needs an RngStream")

    accum = None
    for _ in range(cfg.samples):
        xi = x
        if cfg.smoothing_std > 0:
            xi = x + cfg.smoothing_std * stream.standard_normal(x.shape)
        grad = input_gradient(net, xi, target, noise_mode=cfg.noise_mode,
                              rng=model_rng)
        contribution = (grad * grad).sum(axis=0)
        accum = contribution if accum is None else accum + contribution
    return accum / cfg.samples


def write_pgm(map2d: np.ndarray, path) -> None:
    """Emit a min-max normalized 8-bit binary PGM (P5)."""
    arr = np.asarray(map2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM output needs a 2-D map, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
