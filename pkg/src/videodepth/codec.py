"""Fixed per-frame latent codec: orthonormal 8x8 block DCT-II with zig-zag truncation.

A frame of shape ``[H, W, C]`` maps to a latent of shape ``[H/b, W/b, C*k]``
holding, for each block and channel, the ``k`` lowest-frequency coefficients.
Latent channels are channel-major: index ``c * k + j`` is coefficient ``j`` of
input channel ``c``. Decoding zero-fills the dropped coefficients, so
``decode`` is exactly the adjoint of ``encode``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class CodecConfig:
    block: int = 8
    keep: int = 16

    def __post_init__(self):
        if self.block < 1 or not 1 <= self.keep <= self.block * self.block:
            raise ValueError(f"invalid codec config block={self.block} keep={self.keep}")


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are frequencies."""
    i = np.arange(n)
    m = np.cos(np.pi * (2 * i[None, :] + 1) * i[:, None] / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def zigzag_order(n: int) -> list[tuple[int, int]]:
    """JPEG zig-zag traversal of an n x n coefficient grid."""
    out = []
    for s in range(2 * n - 1):
        diag = [(u, s - u) for u in range(n) if 0 <= s - u < n]
        out.extend(diag if s % 2 else diag[::-1])
    return out


@lru_cache(maxsize=16)
def _basis(block: int, keep: int) -> np.ndarray:
    c = dct_matrix(block)
    rows = [np.outer(c[u], c[v]).ravel() for u, v in zigzag_order(block)[:keep]]
    return np.stack(rows)  # [keep, block*block], orthonormal rows


def _to_blocks(x: np.ndarray, b: int) -> np.ndarray:
    t, h, w, c = x.shape
    if h % b or w % b:
        raise ShapeError(f"frame size {h}x{w} not divisible by block {b}")
    x = x.reshape(t, h // b, b, w // b, b, c).transpose(0, 1, 3, 5, 2, 4)
    return x.reshape(t, h // b, w // b, c, b * b)


def encode(x: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Frames ``[T, H, W, C]`` to latents ``[T, H/b, W/b, C*k]``."""
    if x.ndim != 4:
        raise ShapeError(f"expected [T,H,W,C] frames, got shape {x.shape}")
    blocks = _to_blocks(np.asarray(x, dtype=np.float64), cfg.block)
    coef = blocks @ _basis(cfg.block, cfg.keep).T
    t, hb, wb, c, k = coef.shape
    return coef.reshape(t, hb, wb, c * k).astype(np.float32)


def decode(z: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Latents ``[T, h, w, C*k]`` back to frames ``[T, h*b, w*b, C]``."""
    b, k = cfg.block, cfg.keep
    if z.ndim != 4 or z.shape[-1] % k:
        raise ShapeError(f"latent shape {z.shape} inconsistent with keep={k}")
    t, hb, wb, ck = z.shape
    c = ck // k
    coef = np.asarray(z, dtype=np.float64).reshape(t, hb, wb, c, k)
    blocks = (coef @ _basis(b, k)).reshape(t, hb, wb, c, b, b)
    x = blocks.transpose(0, 1, 4, 2, 5, 3).reshape(t, hb * b, wb * b, c)
    return x.astype(np.float32)


def encode_depth(d: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Replicate ``[T, H, W]`` depth to three channels, then encode."""
    if d.ndim != 3:
        raise ShapeError(f"expected [T,H,W] depth, got shape {d.shape}")
    return encode(np.repeat(d[..., None], 3, axis=-1), cfg)


def decode_depth(z: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Decode to three channels and average them."""
    return decode(z, cfg).astype(np.float64).mean(axis=-1).astype(np.float32)


def latent_channels(channels: int, cfg: CodecConfig) -> int:
    return channels * cfg.keep


# ---------------------------------------------------------------- model-space scaling

# Fixed affine map between codec coefficients and the space the denoiser works
# in: pixels are centred on 0.5 and coefficient j, at zig-zag frequency (u, v),
# is multiplied by GAIN_BASE * (1 + u + v) ** GAIN_POWER. Natural-image DCT
# spectra fall off roughly that fast, so the scaled latents have comparable
# spread in every channel.
CENTER = 0.5
GAIN_BASE = 0.5
GAIN_POWER = 1.5


@lru_cache(maxsize=16)
def _gain(block: int, keep: int) -> np.ndarray:
    return np.array([GAIN_BASE * (1 + u + v) ** GAIN_POWER for u, v in zigzag_order(block)[:keep]])


def _affine(z: np.ndarray, cfg: CodecConfig) -> tuple[np.ndarray, np.ndarray]:
    k = cfg.keep
    if z.shape[-1] % k:
        raise ShapeError(f"latent shape {z.shape} inconsistent with keep={k}")
    c = z.shape[-1] // k
    gain = np.tile(_gain(cfg.block, k), c)
    shift = np.zeros(c * k)
    shift[::k] = CENTER * cfg.block  # DC coefficient of a constant CENTER block
    return gain, shift


def to_model_space(z: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    gain, shift = _affine(z, cfg)
    return ((np.asarray(z, dtype=np.float64) - shift) * gain).astype(np.float32)


def from_model_space(z: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    gain, shift = _affine(z, cfg)
    return (np.asarray(z, dtype=np.float64) / gain + shift).astype(np.float32)
