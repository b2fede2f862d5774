"""Procedural paired video/depth sequences.

Scenes are textured rectangles and ellipses moving over a sloped background
plane, seen by a panning/zooming/dollying camera and z-buffered per pixel.
Colour fades toward a haze colour with distance, which gives the network a
monocular depth cue. Two corpus styles are produced:

* ``realistic``: wide scene diversity, variable length, labels corrupted by
  smooth and edge-localised errors (a stand-in for stereo-derived depth).
* ``synthetic``: narrow diversity, fixed length, exact labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import Rng, derive_seed, load_tensor, save_tensor

STYLES = ("realistic", "synthetic")


class SpecError(ValueError):
    pass


class DegenerateSequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # "rect" or "ellipse"
    x: float  # screen centre at t=0, pixels
    y: float
    half_w: float  # half extents at the initial depth, pixels
    half_h: float
    depth: float
    vx: float = 0.0  # pixels / frame
    vy: float = 0.0
    vdepth: float = 0.0  # depth units / frame
    wobble: tuple[float, float, float] = (0.0, 0.0, 0.0)  # sinusoid amplitude in x, y, depth
    freq: float = 0.0  # radians / frame
    phase: float = 0.0
    color: tuple[float, float, float] = (0.8, 0.3, 0.2)
    stripes: float = 0.5  # texture frequency, radians / pixel


@dataclass(frozen=True)
class CameraSpec:
    pan_x: float = 0.0  # pixels / frame
    pan_y: float = 0.0
    zoom: float = 0.0  # relative magnification per frame
    dolly: float = 0.0  # depth units / frame toward the scene


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    T: int
    H: int
    W: int
    objects: tuple[ObjectSpec, ...] = ()
    camera: CameraSpec = field(default_factory=CameraSpec)
    plane_depth: float = 10.0
    plane_gx: float = 0.0  # depth change across the full width
    plane_gy: float = 0.0
    bg_color: tuple[float, float, float] = (0.35, 0.55, 0.4)
    haze: tuple[float, float, float] = (0.75, 0.78, 0.82)
    fog: float = 12.0  # attenuation distance; <= 0 disables fog
    texture: float = 0.15  # background texture amplitude

    @property
    def num_objects(self) -> int:
        return len(self.objects)


@dataclass
class PairedSequence:
    video: np.ndarray  # [T, H, W, 3] in [0, 1]
    depth_norm: np.ndarray  # [T, H, W] normalised disparity in [0, 1]
    seq_id: str = ""
    style: str = "synthetic"
    seed: int = 0
    metric: Optional[np.ndarray] = None  # [T, H, W] metric depth


# ---------------------------------------------------------------- rendering


def _object_state(o: ObjectSpec, cam: CameraSpec, t: int, H: int, W: int):
    wob = math.sin(o.freq * t + o.phase)
    depth = o.depth + o.vdepth * t + o.wobble[2] * wob - cam.dolly * t
    s = 1.0 + cam.zoom * t
    cx = (o.x + o.vx * t + o.wobble[0] * wob - cam.pan_x * t - W / 2) * s + W / 2
    cy = (o.y + o.vy * t + o.wobble[1] * wob - cam.pan_y * t - H / 2) * s + H / 2
    persp = o.depth / depth if depth > 0 else float("inf")
    return cx, cy, o.half_w * s * persp, o.half_h * s * persp, depth


def _object_mask(o: ObjectSpec, cx, cy, hw, hh, u, v):
    du, dv = u - cx, v - cy
    if o.shape == "rect":
        return (np.abs(du) <= hw) & (np.abs(dv) <= hh)
    return (du / hw) ** 2 + (dv / hh) ** 2 <= 1.0


def _validate(spec: SceneSpec) -> None:
    if spec.T < 1 or spec.H < 1 or spec.W < 1:
        raise SpecError(f"invalid sequence size T={spec.T} H={spec.H} W={spec.W}")
    for i, o in enumerate(spec.objects):
        if o.shape not in ("rect", "ellipse"):
            raise SpecError(f"object {i}: unknown shape {o.shape!r}")
        if not (o.half_w > 0 and o.half_h > 0):
            raise SpecError(f"object {i}: zero-area object")


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(video [T,H,W,3], metric_depth [T,H,W])``; depth is the exact z-buffer."""
    _validate(spec)
    T, H, W = spec.T, spec.H, spec.W
    v, u = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    cam = spec.camera
    video = np.empty((T, H, W, 3), np.float64)
    depth = np.empty((T, H, W), np.float64)
    bg = np.asarray(spec.bg_color)
    haze = np.asarray(spec.haze)
    for t in range(T):
        s = 1.0 + cam.zoom * t
        wu = (u - W / 2) / s + W / 2 + cam.pan_x * t
        wv = (v - H / 2) / s + H / 2 + cam.pan_y * t
        z = spec.plane_depth - cam.dolly * t + spec.plane_gx * (u / W - 0.5) + spec.plane_gy * (v / H - 0.5)
        tex = 1.0 + spec.texture * np.sin(0.9 * wu) * np.sin(0.7 * wv)
        col = bg[None, None, :] * tex[..., None]
        for o in spec.objects:
            cx, cy, hw, hh, d = _object_state(o, cam, t, H, W)
            if d <= 0:
                raise SpecError(f"object behind the camera at frame {t}")
            m = _object_mask(o, cx, cy, hw, hh, u, v) & (d < z)
            if not m.any():
                continue
            stripe = 0.8 + 0.2 * np.sign(np.sin(o.stripes * ((u - cx) + (v - cy)) / max(s, 1e-6)))
            z = np.where(m, d, z)
            col = np.where(m[..., None], np.asarray(o.color)[None, None, :] * stripe[..., None], col)
        if np.any(z <= 0):
            raise SpecError(f"non-positive background depth at frame {t}")
        if spec.fog > 0:
            a = np.exp(-z / spec.fog)[..., None]
            col = col * a + haze * (1.0 - a)
        video[t] = np.clip(col, 0.0, 1.0)
        depth[t] = z
    return video.astype(np.float32), depth.astype(np.float32)


def visible_fraction(spec: SceneSpec, index: int) -> float:
    """Fraction of frames in which object ``index`` overlaps the image rectangle."""
    o = spec.objects[index]
    seen = 0
    for t in range(spec.T):
        cx, cy, hw, hh, _ = _object_state(o, spec.camera, t, spec.H, spec.W)
        if cx + hw > 0 and cx - hw < spec.W and cy + hh > 0 and cy - hh < spec.H:
            seen += 1
    return seen / spec.T


def random_scene(rng: Rng, style: str, T: int, H: int, W: int, drift: float = 0.0) -> SceneSpec:
    """Draw a scene; ``drift`` adds a dolly that shrinks the depth range over time."""
    if style not in STYLES:
        raise SpecError(f"unknown style {style!r}")
    g = rng.gen
    px = W / 32.0
    wide = style == "realistic"
    for _ in range(100):
        plane = g.uniform(6.0, 20.0) if wide else g.uniform(9.0, 13.0)
        n_obj = int(g.integers(1, 5)) if wide else int(g.integers(2, 4))
        dolly = drift * plane / max(T, 1)
        cam = CameraSpec(
            pan_x=g.uniform(-0.3, 0.3) * px if wide else g.uniform(-0.15, 0.15) * px,
            pan_y=g.uniform(-0.15, 0.15) * px if wide else 0.0,
            zoom=g.uniform(-0.003, 0.003) if wide else 0.0,
            dolly=dolly,
        )
        objs = []
        for _ in range(n_obj):
            d0 = g.uniform(1.5, plane - 1.0) if wide else g.uniform(2.5, plane - 2.0)
            hw = g.uniform(2.0, 7.0) * px
            vd_max = 0.02 if wide else 0.01
            objs.append(
                ObjectSpec(
                    shape="rect" if g.uniform() < 0.5 else "ellipse",
                    x=g.uniform(0.2, 0.8) * W,
                    y=g.uniform(0.2, 0.8) * H,
                    half_w=hw,
                    half_h=hw * g.uniform(0.6, 1.6),
                    depth=d0,
                    vx=g.uniform(-0.6, 0.6) * px,
                    vy=g.uniform(-0.3, 0.3) * px,
                    vdepth=g.uniform(-vd_max, vd_max) * d0,
                    wobble=(g.uniform(0, 2) * px, g.uniform(0, 1) * px, g.uniform(0, 0.1) * d0),
                    freq=g.uniform(0.05, 0.3),
                    phase=g.uniform(0, 2 * math.pi),
                    color=tuple(g.uniform(0.15, 1.0, 3)),
                    stripes=g.uniform(0.3, 1.5),
                )
            )
        spec = SceneSpec(
            seed=rng.seed,
            T=T,
            H=H,
            W=W,
            objects=tuple(objs),
            camera=cam,
            plane_depth=plane,
            plane_gx=g.uniform(-0.3, 0.3) * plane,
            plane_gy=g.uniform(-0.2, 0.4) * plane if wide else g.uniform(0.1, 0.3) * plane,
            bg_color=tuple(g.uniform(0.2, 0.8, 3)) if wide else (0.35, 0.55, 0.4),
            haze=tuple(np.full(3, g.uniform(0.6, 0.9))) if wide else (0.75, 0.78, 0.82),
            fog=g.uniform(8.0, 25.0) if wide else 12.0,
            texture=g.uniform(0.05, 0.3) if wide else 0.15,
        )
        if _plausible(spec):
            return spec
    raise SpecError("could not draw a valid scene in 100 attempts")


def _plausible(spec: SceneSpec) -> bool:
    cam = spec.camera
    for i, o in enumerate(spec.objects):
        for t in range(spec.T):
            if _object_state(o, cam, t, spec.H, spec.W)[4] <= 0.3:
                return False
        if visible_fraction(spec, i) < 0.8:
            return False
    lowest = spec.plane_depth - cam.dolly * (spec.T - 1) - 0.5 * (abs(spec.plane_gx) + abs(spec.plane_gy))
    return lowest > 0.5


# ---------------------------------------------------------------- labels


def normalize_disparity(metric_depth: np.ndarray) -> np.ndarray:
    """Disparity min-max normalised with one scale/shift for the whole sequence."""
    d = np.asarray(metric_depth, dtype=np.float64)
    if np.any(d <= 0):
        raise DegenerateSequenceError("depth must be positive everywhere")
    disp = 1.0 / d
    lo, hi = disp.min(), disp.max()
    if hi == lo:
        raise DegenerateSequenceError("constant disparity cannot be normalised")
    return ((disp - lo) / (hi - lo)).astype(np.float32)


def corrupt_labels(depth_norm: np.ndarray, rng: Rng, strength: float) -> np.ndarray:
    """Smooth low-frequency drift plus noise concentrated on depth edges, clamped to [0, 1].

    The perturbation field is drawn independently of ``strength`` and scaled by
    it, so larger strengths move each pixel further from the clean label.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    d = np.asarray(depth_norm, dtype=np.float64)
    T, H, W = d.shape
    g = rng.gen
    t, y, x = np.meshgrid(np.arange(T) / max(T, 1), np.arange(H) / H, np.arange(W) / W, indexing="ij")
    smooth = np.zeros_like(d)
    for _ in range(3):
        fx, fy, ft = g.uniform(0.3, 1.5, 3)
        smooth += 0.06 * g.standard_normal() * np.sin(2 * np.pi * (fx * x + fy * y + ft * t) + g.uniform(0, 2 * np.pi))
    gy, gx = np.gradient(d, axis=(1, 2))
    edges = np.hypot(gx, gy) > 0.02
    edges = edges | np.roll(edges, 1, 1) | np.roll(edges, -1, 1) | np.roll(edges, 1, 2) | np.roll(edges, -1, 2)
    edge_noise = 0.25 * g.standard_normal(d.shape) * edges
    if strength == 0:
        return np.asarray(depth_norm, dtype=np.float32).copy()
    return np.clip(d + strength * (smooth + edge_noise), 0.0, 1.0).astype(np.float32)


def renormalize(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        raise DegenerateSequenceError("constant sequence cannot be normalised")
    return ((d - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------- corpora


def make_pair(seed: int, style: str, T: int, H: int, W: int, strength: float = 0.0, drift: float = 0.0) -> PairedSequence:
    rng = Rng(seed)
    spec = random_scene(rng, style, T, H, W, drift=drift)
    video, metric = render_scene(spec)
    depth = normalize_disparity(metric)
    if style == "realistic" and strength > 0:
        depth = renormalize(corrupt_labels(depth, rng.child(1), strength))
    return PairedSequence(video, depth, style=style, seed=seed, metric=metric)


@dataclass(frozen=True)
class ManifestEntry:
    seq_id: str
    style: str
    T: int
    H: int
    W: int
    seed: int


def build_corpus(
    style: str,
    count: int,
    length_range: tuple[int, int],
    seed: int,
    out_dir,
    H: int = 32,
    W: int = 32,
    strength: float = 0.5,
) -> list[ManifestEntry]:
    """Write ``count`` sequences under ``<out_dir>/<style>/`` plus ``manifest.tsv``.

    Realistic lengths are uniform in ``length_range``; synthetic sequences all
    have length ``length_range[1]``.
    """
    if style not in STYLES:
        raise SpecError(f"unknown style {style!r}")
    lo, hi = length_range
    if not 1 <= lo <= hi or count < 1:
        raise SpecError(f"invalid corpus parameters count={count} lengths={length_range}")
    root = Path(out_dir) / style
    root.mkdir(parents=True, exist_ok=True)
    base = Rng(derive_seed(seed, STYLES.index(style)))
    entries = []
    for i in range(count):
        item_seed = derive_seed(base.seed, i)
        T = Rng(item_seed).child(0).integers(lo, hi) if style == "realistic" else hi
        pair = make_pair(item_seed, style, T, H, W, strength=strength)
        sid = f"{style[:3]}{i:05d}"
        d = root / sid
        d.mkdir(exist_ok=True)
        save_tensor(d / "video.dcrf", pair.video)
        save_tensor(d / "depth.dcrf", pair.depth_norm)
        save_tensor(d / "metric.dcrf", pair.metric)
        entries.append(ManifestEntry(sid, style, T, H, W, item_seed))
    write_manifest(root / "manifest.tsv", entries)
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "style", "T", "H", "W", "seed"])
        for e in entries:
            w.writerow([e.seq_id, e.style, e.T, e.H, e.W, e.seed])


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    return [ManifestEntry(r["id"], r["style"], int(r["T"]), int(r["H"]), int(r["W"]), int(r["seed"])) for r in rows]


def iter_corpus(root, style: str) -> Iterator[PairedSequence]:
    d = Path(root) / style
    for e in read_manifest(d / "manifest.tsv"):
        sd = d / e.seq_id
        metric = load_tensor(sd / "metric.dcrf") if (sd / "metric.dcrf").exists() else None
        yield PairedSequence(
            load_tensor(sd / "video.dcrf"), load_tensor(sd / "depth.dcrf"), e.seq_id, e.style, e.seed, metric
        )


def load_corpus(root, style: str) -> list[PairedSequence]:
    return list(iter_corpus(root, style))


def write_sequences(directory, seqs: list[PairedSequence]) -> list[ManifestEntry]:
    """Store already generated pairs in corpus layout (``<dir>/<id>/*.dcrf`` plus ``manifest.tsv``)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in seqs:
        d = root / s.seq_id
        d.mkdir(exist_ok=True)
        save_tensor(d / "video.dcrf", s.video)
        save_tensor(d / "depth.dcrf", s.depth_norm)
        if s.metric is not None:
            save_tensor(d / "metric.dcrf", s.metric)
        T, H, W = s.depth_norm.shape
        entries.append(ManifestEntry(s.seq_id, s.style, T, H, W, s.seed))
    write_manifest(root / "manifest.tsv", entries)
    return entries
