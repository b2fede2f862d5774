"""Segment-wise inference for sequences longer than the model window.

The video is cut into overlapping windows. Each window after the first starts
its overlapping frames from the previous window's denoised latents plus fresh
``sigma_max`` noise, and consecutive windows are merged by cross-fading the
overlap with weights falling linearly from 1 (previous) to 0 (next).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import codec, edm
from .net import ConditioningBundle, Denoiser, DenoiserParams, frame_embed
from .tensor import Rng

VARIANTS = ("baseline", "init", "full")


class PlanError(ValueError):
    pass


class StitchError(ValueError):
    pass


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmentPlan:
    window: int
    overlap: int
    segments: tuple[tuple[int, int], ...]

    def overlaps(self) -> list[int]:
        """Actual overlap of each segment with its predecessor (0 for the first)."""
        out = [0]
        for (_, e0), (s1, _) in zip(self.segments, self.segments[1:]):
            out.append(e0 - s1)
        return out


def plan_segments(T: int, L: int, o: int) -> SegmentPlan:
    if L < 1 or T < 1 or o < 0:
        raise PlanError(f"need T >= 1, L >= 1, o >= 0 (got T={T}, L={L}, o={o})")
    if o >= L:
        raise PlanError(f"overlap {o} must be smaller than window {L}")
    if T <= L:
        return SegmentPlan(L, o, ((0, T),))
    segs = []
    start = 0
    while True:
        if start + L >= T:
            segs.append((T - L, T))
            break
        segs.append((start, start + L))
        start += L - o
    return SegmentPlan(L, o, tuple(segs))


def default_overlap(L: int) -> int:
    return min(max(round(0.23 * L), 1 if L > 1 else 0), L - 1)


def stitch_weights(o: int) -> np.ndarray:
    if o < 1:
        raise StitchError("overlap must be >= 1")
    if o == 1:
        return np.ones(1)
    i = np.arange(1, o + 1)
    return (o - i) / (o - 1)


def anchored_init(prev_overlap: Optional[np.ndarray], fresh_len: int, sigma_max: float, rng: Rng, latent_shape) -> np.ndarray:
    """Initial latent for a segment: re-noised previous overlap (if any) followed by pure noise."""
    o = 0 if prev_overlap is None else prev_overlap.shape[0]
    if prev_overlap is not None and tuple(prev_overlap.shape[1:]) != tuple(latent_shape):
        raise StitchError(f"overlap latent shape {prev_overlap.shape[1:]} != {tuple(latent_shape)}")
    if fresh_len < 0 or o + fresh_len < 1:
        raise StitchError(f"invalid segment composition overlap={o} fresh={fresh_len}")
    noise = rng.normal((o + fresh_len,) + tuple(latent_shape)) * np.float32(sigma_max)
    if prev_overlap is not None:
        noise[:o] += prev_overlap.astype(np.float32)
    return noise


def stitch(prev: np.ndarray, nxt: np.ndarray, o: int, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Concatenate two latent runs sharing ``o`` frames, blending the shared frames.

    Overlap frame i becomes ``w_i * prev + (1 - w_i) * next``.
    """
    if o < 1 or o > prev.shape[0] or o > nxt.shape[0]:
        raise StitchError(f"overlap {o} exceeds segment lengths {prev.shape[0]}, {nxt.shape[0]}")
    w = stitch_weights(o) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w.reshape((o,) + (1,) * (prev.ndim - 1))
    a = prev[-o:].astype(np.float64)
    b = nxt[:o].astype(np.float64)
    mid = (w * a + (1.0 - w) * b).astype(prev.dtype)
    return np.concatenate([prev[:-o], mid, nxt[o:]], axis=0)


def renormalize_output(d: np.ndarray) -> np.ndarray:
    d = d.astype(np.float64)
    lo, hi = d.min(), d.max()
    if hi - lo < 1e-12:
        return np.clip(d, 0.0, 1.0).astype(np.float32)
    return ((d - lo) / (hi - lo)).astype(np.float32)


@dataclass
class LongInference:
    depth: np.ndarray  # [T, H, W] in [0, 1]
    latent: np.ndarray  # stitched model-space latent
    plan: SegmentPlan


def infer_long(
    params: DenoiserParams,
    video: np.ndarray,
    window: int,
    overlap: int,
    schedule: edm.SigmaSchedule,
    codec_cfg: codec.CodecConfig,
    rng: Rng,
    variant: str = "full",
    guidance: Optional[float] = None,
) -> LongInference:
    """Depth for a whole video via planned, anchored, stitched segments.

    ``variant`` selects the stitching ablation: ``baseline`` (independent noise,
    overlap averaged), ``init`` (anchored noise, overlap averaged) or ``full``
    (anchored noise, linear cross-fade).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if video.ndim != 4 or video.shape[-1] != 3:
        raise InferenceError(f"expected a [T,H,W,3] video, got shape {video.shape}")
    T = video.shape[0]
    cfg = params.config
    cond_all = ConditioningBundle(codec.to_model_space(codec.encode(video, codec_cfg), codec_cfg), frame_embed(video, cfg.embed_dim))
    lat_shape = cond_all.cond_latent.shape[1:3] + (cfg.in_channels,)
    plan = plan_segments(T, window, overlap)
    F = Denoiser(params)
    merged = None
    prev_out = None
    for k, ((s, e), o) in enumerate(zip(plan.segments, plan.overlaps())):
        seg_rng = rng.child(k)
        anchor = prev_out[-o:] if (prev_out is not None and variant != "baseline") else None
        init = anchored_init(anchor, (e - s) - (0 if anchor is None else o), schedule.sigma_max, seg_rng, lat_shape)
        out = edm.sample(F, init, schedule, cond_all.slice(s, e), guidance=guidance)
        if not np.all(np.isfinite(out)):
            raise InferenceError(f"non-finite latent in segment {k}")
        if merged is None:
            merged = out
        else:
            weights = None if variant == "full" else np.full(o, 0.5)
            merged = stitch(merged, out, o, weights)
        prev_out = out
    depth = codec.decode_depth(codec.from_model_space(merged, codec_cfg), codec_cfg)
    return LongInference(renormalize_output(depth), merged, plan)


# ---------------------------------------------------------------- seam statistics


def frame_changes(depth: np.ndarray) -> np.ndarray:
    """Mean |d_t - d_{t-1}| for t = 1..T-1 (index t-1 in the result)."""
    d = depth.astype(np.float64)
    return np.abs(np.diff(d, axis=0)).reshape(d.shape[0] - 1, -1).mean(axis=1)


def boundary_discontinuity(depth: np.ndarray, plan: SegmentPlan) -> float:
    """Largest mean frame-to-frame change at any transition inside or at the edges of an overlap."""
    ch = frame_changes(depth)
    worst = 0.0
    for (s1, _), (_, e0) in zip(plan.segments[1:], plan.segments):
        ts = [t for t in range(s1, e0 + 1) if 1 <= t < depth.shape[0]]
        if ts:
            worst = max(worst, float(ch[np.asarray(ts) - 1].max()))
    return worst


def median_frame_change(depth: np.ndarray) -> float:
    return float(np.median(frame_changes(depth)))
