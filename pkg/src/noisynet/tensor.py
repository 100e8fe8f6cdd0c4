"""Dense float64 tensors, counter-based random streams, and the shared linear kernels.

Everything downstream (layers, attacks, corruptions) works on plain
``numpy.ndarray`` values in 64-bit floats.  Randomness goes through
:class:`RngStream`, a keyed counter-based generator, so that any draw
sequence can be reproduced or re-derived from a (seed, stream id) pair.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtri


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer; used to derive child stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Backed by the counter-based Philox generator, so identical keys always
    replay the identical draw sequence and distinct stream ids give
    statistically independent sequences.  ``substream`` derives new
    independent streams from integer indices, which lets callers hand a
    private stream to every (epoch, batch, row, ...) unit of work without
    coordinating draw counts.

    Normal variates are produced by inverse-CDF transform of the raw
    counter output, keeping the draw for index k independent of any other
    index.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.draw_count = 0
        self._bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64)
        )

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, *indices: int) -> "RngStream":
        """Derive an independent child stream from one or more integer indices."""
        child = self.stream_id
        for index in indices:
            child = _splitmix64(child ^ _splitmix64(int(index) & _MASK64))
        return RngStream(self.seed, child)

    def raw(self, n: int) -> np.ndarray:
        """n raw 64-bit outputs, advancing the stream."""
        self.draw_count += int(n)
        return self._bitgen.random_raw(int(n))

    def standard_normal(self, shape) -> np.ndarray:
        """i.i.d. N(0, 1) draws via inverse-CDF on the counter output."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        bits = self.raw(n)
        # 52 random bits mapped to the open interval (0, 1); both endpoints
        # excluded so ndtri stays finite.
        u = ((bits >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0**-52
        return ndtri(u).reshape(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """i.i.d. Uniform[low, high) draws."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        bits = self.raw(n)
        u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """i.i.d. integer draws in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Seeded permutation of range(n)."""
        return np.argsort(self.uniform((n,)), kind="stable")


def _as_shape(shape) -> tuple:
    if np.isscalar(shape):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise DimensionError(f"invalid shape {shape}")
    return shape


def sample_standard_normal(stream: RngStream, shape) -> np.ndarray:
    """Standard normal tensor of the given shape, advancing ``stream``."""
    return stream.standard_normal(shape)


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m, k) and b (k, n).

    Raises :class:`DimensionError` naming both shapes when the inner
    dimensions disagree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 1) -> np.ndarray:
    """2-D cross-correlation (no kernel flip) with zero padding.

    x is (C, H, W) or batched (N, C, H, W); kernels are (K, C, kh, kw) with
    square odd spatial size.  One output channel per kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(
            f"conv2d expects (N,C,H,W) input and (K,C,kh,kw) kernels, "
            f"got {x.shape} and {kernels.shape}"
        )
    n, c, h, w = x.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c} channels, kernels expect {ck}"
        )
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d kernels must be square with odd size, got {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,kcij->nkhw", win, kernels, optimize=True)
    return out[0] if squeeze else out
