"""Video depth evaluation: one least-squares scale/shift per sequence, AbsRel and delta1.

Predictions are normalised disparities. Ground truth arrives as metric depth,
is cropped and masked by the dataset's depth cap, converted to disparity, and
the prediction is affinely aligned to it over every valid pixel of every frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InsufficientDataError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


class EvalConfigError(ValueError):
    pass


# Per-dataset depth caps in metres.
DEPTH_CAPS = {"sintel": 70.0, "kitti": 80.0, "scannet": 10.0, "bonn": 10.0, "nyuv2": 10.0, "synthetic": 20.0}
SCANNET_CROP = (8, 8, 11, 11)


@dataclass(frozen=True)
class AlignmentResult:
    scale: float
    shift: float
    residual: float


@dataclass(frozen=True)
class EvalConfig:
    depth_cap: float = math.inf
    crop: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right
    valid_min: float = 1e-3

    def __post_init__(self):
        if not self.depth_cap > 0:
            raise EvalConfigError("depth_cap must be positive")
        if any(c < 0 for c in self.crop):
            raise EvalConfigError("crops must be non-negative")


@dataclass(frozen=True)
class SequenceReport:
    absrel: float
    delta1: float
    scale: float
    shift: float
    excluded: int


def align_scale_shift(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> AlignmentResult:
    """Closed-form minimiser of sum over valid pixels of (s * pred + t - gt)^2."""
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    n = p.size
    if n < 2:
        raise InsufficientDataError(f"alignment needs >= 2 valid pixels, got {n}")
    pm, gm = p.mean(), g.mean()
    dp, dg = p - pm, g - gm
    var = float(np.dot(dp, dp))
    if var <= 1e-20 * max(1.0, float(np.dot(p, p))):
        raise DegenerateAlignmentError("prediction is constant over the valid pixels")
    s = float(np.dot(dp, dg)) / var
    t = gm - s * pm
    r = s * p + t - g
    return AlignmentResult(s, float(t), float(np.mean(r * r)))


def absrel(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    if p.size == 0:
        raise InsufficientDataError("no valid pixels")
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Fraction of valid pixels with max(p/g, g/p) < 1.25; non-positive predictions count as failures."""
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    if p.size == 0:
        raise InsufficientDataError("no valid pixels")
    ok = p > 0
    ratio = np.full(p.shape, np.inf)
    ratio[ok] = np.maximum(p[ok] / g[ok], g[ok] / p[ok])
    return float(np.mean(ratio < 1.25))


def crop_frames(x: np.ndarray, crop) -> np.ndarray:
    top, bottom, left, right = crop
    H, W = x.shape[1], x.shape[2]
    if top + bottom >= H or left + right >= W:
        raise EvalConfigError(f"crop {crop} leaves no pixels of a {H}x{W} frame")
    return x[:, top:H - bottom, left:W - right]


def apply_eval_config(gt_metric: np.ndarray, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    gt = crop_frames(np.asarray(gt_metric), cfg.crop)
    valid = (gt >= cfg.valid_min) & (gt <= cfg.depth_cap)
    return gt, valid


def evaluate_sequence(pred: np.ndarray, gt_metric: np.ndarray, cfg: EvalConfig = EvalConfig()) -> SequenceReport:
    """AbsRel and delta1 of a normalised-disparity prediction against metric ground truth.

    Aligned disparities that are not positive are excluded from AbsRel (and
    counted) and fail delta1; predicted depths above ``cfg.depth_cap`` are
    clipped to the cap.
    """
    if pred.shape != gt_metric.shape:
        raise EvalConfigError(f"prediction shape {pred.shape} != ground truth shape {gt_metric.shape}")
    gt, valid = apply_eval_config(gt_metric, cfg)
    p = crop_frames(np.asarray(pred, dtype=np.float64), cfg.crop)
    gt_disp = np.zeros(gt.shape, np.float64)
    gt_disp[valid] = 1.0 / gt[valid].astype(np.float64)
    al = align_scale_shift(p, gt_disp, valid)
    aligned = al.scale * p + al.shift
    positive = valid & (aligned > 0)
    excluded = int(valid.sum() - positive.sum())
    depth_pred = np.zeros_like(aligned)
    # predictions beyond the cap are clipped to it, like the ground truth mask
    depth_pred[positive] = np.minimum(1.0 / aligned[positive], cfg.depth_cap)
    gt64 = gt.astype(np.float64)
    rel = absrel(depth_pred, gt64, positive) if positive.any() else math.inf
    return SequenceReport(rel, delta1(np.where(positive, depth_pred, 0.0), gt64, valid), al.scale, al.shift, excluded)


def temporal_profile(depth: np.ndarray, row: int) -> np.ndarray:
    """Time-by-width slice ``P[t, x] = depth[t, row, x]``."""
    if not 0 <= row < depth.shape[1]:
        raise IndexError(f"row {row} outside [0, {depth.shape[1]})")
    return np.array(depth[:, row, :])


def profile_image(profile: np.ndarray) -> np.ndarray:
    """Map [0, 1] linearly onto 8-bit grey levels."""
    return np.clip(np.rint(np.asarray(profile, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greymap."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
