"""Tiny spatio-temporal conditional denoiser with hand-written reverse-mode gradients.

Architecture, per latent sequence ``[T, h, w, C_d]``:

    u    = [noisy_latent || cond_latent]                 (channel concat, per frame)
    h    = u @ W_in + b_in                               (spatial)
    e_t  = noise_embedding(c_noise) + frame_embed[t]
    h   += silu(conv3x3(h) + b + e_t @ M)                (spatial block, repeated)
    h   += silu(tconv3(h) + b + mean_t(h) @ G)           (temporal block, repeated)
    out  = h @ W_out + b_out                             (spatial, zero-initialised)

``tconv3`` is a per-pixel kernel-3 convolution along time with zero padding, so
each temporal block widens the temporal receptive field by one frame per side.
``mean_t(h)`` averages every pixel's features over all frames of the clip, the
only path that carries context from the whole clip.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .edm import ConditioningError
from .tensor import Rng, load_tensor, save_tensor

SPATIAL = "spatial"
TEMPORAL = "temporal"
EMBED_SEED = 0x5EED_F00D
N_FRAME_FEATURES = 6


class ParamsError(KeyError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    channels: int = 16
    spatial_blocks: int = 2
    temporal_blocks: int = 2
    embed_dim: int = 8
    in_channels: int = 48
    cond_channels: int = 48

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k in ("spatial_blocks", "temporal_blocks"):
                if v < 0:
                    raise ValueError(f"{k} must be >= 0")
            elif v < 1:
                raise ValueError(f"{k} must be positive")


@dataclass
class ConditioningBundle:
    cond_latent: np.ndarray  # [T, h, w, C_v]
    frame_embed: np.ndarray  # [T, E]

    def __post_init__(self):
        if self.cond_latent.shape[0] != self.frame_embed.shape[0]:
            raise ConditioningError(
                f"cond_latent has {self.cond_latent.shape[0]} frames, frame_embed has {self.frame_embed.shape[0]}"
            )

    @property
    def num_frames(self) -> int:
        return self.cond_latent.shape[0]

    def zeroed(self) -> "ConditioningBundle":
        return ConditioningBundle(np.zeros_like(self.cond_latent), np.zeros_like(self.frame_embed))

    def slice(self, start: int, end: int) -> "ConditioningBundle":
        return ConditioningBundle(self.cond_latent[start:end], self.frame_embed[start:end])


@dataclass
class DenoiserParams:
    config: NetConfig
    groups: dict[str, np.ndarray]
    tags: dict[str, str]
    frozen: set[str] = field(default_factory=set)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.groups.items()}, dict(self.tags), set(self.frozen))

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(
            self.config, {k: v.astype(dtype) for k, v in self.groups.items()}, dict(self.tags), set(self.frozen)
        )

    def names_with_tag(self, tag: str) -> list[str]:
        return [k for k, t in self.tags.items() if t == tag]

    def freeze_except(self, trainable_tags) -> None:
        self.frozen = {k for k, t in self.tags.items() if t not in set(trainable_tags)}

    def count(self, tag: Optional[str] = None) -> int:
        return sum(v.size for k, v in self.groups.items() if tag is None or self.tags[k] == tag)

    @property
    def dtype(self):
        return next(iter(self.groups.values())).dtype


def group_layout(cfg: NetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    c, e = cfg.channels, cfg.embed_dim
    out = [
        ("in.w", (cfg.in_channels + cfg.cond_channels, c), SPATIAL),
        ("in.b", (c,), SPATIAL),
    ]
    for i in range(cfg.spatial_blocks):
        out += [(f"s{i}.w", (3, 3, c, c), SPATIAL), (f"s{i}.b", (c,), SPATIAL), (f"s{i}.m", (e, c), SPATIAL)]
    for i in range(cfg.temporal_blocks):
        out += [(f"t{i}.w", (3, c, c), TEMPORAL), (f"t{i}.b", (c,), TEMPORAL), (f"t{i}.g", (c, c), TEMPORAL)]
    out += [("out.w", (c, cfg.in_channels), SPATIAL), ("out.b", (cfg.in_channels,), SPATIAL)]
    return out


def init_params(cfg: NetConfig, rng: Rng) -> DenoiserParams:
    """Gaussian init with std 1/sqrt(fan_in); biases and the output projection start at zero."""
    groups, tags = {}, {}
    for name, shape, tag in group_layout(cfg):
        tags[name] = tag
        if name.endswith(".b") or name.startswith("out."):
            groups[name] = np.zeros(shape, np.float32)
            continue
        fan_in = int(np.prod(shape[:-1]))
        groups[name] = (rng.normal(shape) / math.sqrt(fan_in)).astype(np.float32)
    return DenoiserParams(cfg, groups, tags)


# ---------------------------------------------------------------- embeddings


def noise_embedding(c_noise: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.pi * 2.0 ** np.linspace(-1.0, 3.0, max(half, 1))[:half]
    ang = c_noise * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [c_noise]])
    return emb


def frame_features(frames: np.ndarray) -> np.ndarray:
    """Per frame: [mean, std, mean R, mean G, mean B, mean spatial gradient magnitude]."""
    f = np.asarray(frames, dtype=np.float64)
    t = f.shape[0]
    flat = f.reshape(t, -1)
    gray = f.mean(axis=-1)
    gx = gray[:, :-1, 1:] - gray[:, :-1, :-1]
    gy = gray[:, 1:, :-1] - gray[:, :-1, :-1]
    grad = np.sqrt(gx * gx + gy * gy).reshape(t, -1)
    grad_mean = grad.mean(axis=1) if grad.shape[1] else np.zeros(t)
    return np.column_stack([flat.mean(1), flat.std(1), f.mean(axis=(1, 2)), grad_mean])


def frame_embed(frames: np.ndarray, embed_dim: int) -> np.ndarray:
    """Frame features projected to ``embed_dim`` by a fixed seeded random matrix."""
    proj = np.random.Generator(np.random.PCG64(EMBED_SEED + embed_dim)).standard_normal((N_FRAME_FEATURES, embed_dim))
    return (frame_features(frames) @ proj).astype(np.float32)


# ---------------------------------------------------------------- primitives


def _silu(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a))  # logistic without exp overflow
    return a * s, s


def _conv3x3(h, w):
    t, hh, ww, _ = h.shape
    hp = np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros(h.shape[:3] + (w.shape[-1],), h.dtype)
    for dy in range(3):
        for dx in range(3):
            out += hp[:, dy:dy + hh, dx:dx + ww, :] @ w[dy, dx]
    return out, hp


def _conv3x3_back(hp, w, da):
    _, hh, ww, _ = da.shape
    dw = np.empty_like(w)
    dhp = np.zeros_like(hp)
    c_in = hp.shape[-1]
    da2 = da.reshape(-1, da.shape[-1])
    for dy in range(3):
        for dx in range(3):
            sl = hp[:, dy:dy + hh, dx:dx + ww, :]
            dw[dy, dx] = sl.reshape(-1, c_in).T @ da2
            dhp[:, dy:dy + hh, dx:dx + ww, :] += da @ w[dy, dx].T
    return dw, dhp[:, 1:-1, 1:-1, :]


def _tconv(h, w):
    t = h.shape[0]
    hp = np.pad(h, ((1, 1), (0, 0), (0, 0), (0, 0)))
    out = hp[0:t] @ w[0] + hp[1:t + 1] @ w[1] + hp[2:t + 2] @ w[2]
    return out, hp


def _tconv_back(hp, w, da):
    t = da.shape[0]
    c_in = hp.shape[-1]
    da2 = da.reshape(-1, da.shape[-1])
    dw = np.stack([hp[k:k + t].reshape(-1, c_in).T @ da2 for k in range(3)])
    dhp = np.zeros_like(hp)
    for k in range(3):
        dhp[k:k + t] += da @ w[k].T
    return dw, dhp[1:-1]


# ---------------------------------------------------------------- forward / backward


def _get(params: DenoiserParams, name: str) -> np.ndarray:
    try:
        return params.groups[name]
    except KeyError:
        raise ParamsError(f"missing parameter group {name!r}") from None


def _check_inputs(params, x, cond):
    cfg = params.config
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ConditioningError(f"noisy latent shape {x.shape} incompatible with in_channels={cfg.in_channels}")
    if cond.num_frames != x.shape[0]:
        raise ConditioningError(f"latent has {x.shape[0]} frames but conditioning has {cond.num_frames}")
    if cond.cond_latent.shape[:3] != x.shape[:3] or cond.cond_latent.shape[-1] != cfg.cond_channels:
        raise ConditioningError(f"cond latent shape {cond.cond_latent.shape} incompatible with {x.shape}")
    if cond.frame_embed.shape[-1] != cfg.embed_dim:
        raise ConditioningError(f"frame_embed width {cond.frame_embed.shape[-1]} != embed_dim {cfg.embed_dim}")


def forward_cached(params: DenoiserParams, x: np.ndarray, c_noise: float, cond: ConditioningBundle):
    _check_inputs(params, x, cond)
    cfg = params.config
    dt = params.dtype
    u = np.concatenate([x.astype(dt), cond.cond_latent.astype(dt)], axis=-1)
    emb = (noise_embedding(c_noise, cfg.embed_dim)[None, :] + cond.frame_embed).astype(dt)
    h = u @ _get(params, "in.w") + _get(params, "in.b")
    cache = {"u": u, "emb": emb, "blocks": []}
    for i in range(cfg.spatial_blocks):
        conv, hp = _conv3x3(h, _get(params, f"s{i}.w"))
        a = conv + _get(params, f"s{i}.b") + (emb @ _get(params, f"s{i}.m"))[:, None, None, :]
        y, sig = _silu(a)
        cache["blocks"].append(("s", i, hp, a, sig))
        h = h + y
    for i in range(cfg.temporal_blocks):
        conv, hp = _tconv(h, _get(params, f"t{i}.w"))
        m = h.mean(axis=0)
        a = conv + _get(params, f"t{i}.b") + (m @ _get(params, f"t{i}.g"))[None]
        y, sig = _silu(a)
        cache["blocks"].append(("t", i, (hp, m), a, sig))
        h = h + y
    cache["h"] = h
    out = h @ _get(params, "out.w") + _get(params, "out.b")
    return out, cache


def forward(params: DenoiserParams, x: np.ndarray, c_noise: float, cond: ConditioningBundle) -> np.ndarray:
    return forward_cached(params, x, c_noise, cond)[0]


def backward_cached(params: DenoiserParams, cache, upstream: np.ndarray):
    cfg = params.config
    g = params.groups
    dt = params.dtype
    upstream = upstream.astype(dt)
    grads: dict[str, np.ndarray] = {}
    h = cache["h"]
    grads["out.w"] = h.reshape(-1, h.shape[-1]).T @ upstream.reshape(-1, upstream.shape[-1])
    grads["out.b"] = upstream.sum(axis=(0, 1, 2))
    dh = upstream @ g["out.w"].T
    emb = cache["emb"]
    for kind, i, hp, a, sig in reversed(cache["blocks"]):
        da = dh * (sig * (1.0 + a * (1.0 - sig)))
        if kind == "t":
            hp, m = hp
            grads[f"t{i}.w"], dprev = _tconv_back(hp, g[f"t{i}.w"], da)
            grads[f"t{i}.b"] = da.sum(axis=(0, 1, 2))
            da_t = da.sum(axis=0)
            grads[f"t{i}.g"] = m.reshape(-1, m.shape[-1]).T @ da_t.reshape(-1, da_t.shape[-1])
            dprev = dprev + (da_t @ g[f"t{i}.g"].T)[None] / da.shape[0]
        else:
            grads[f"s{i}.w"], dprev = _conv3x3_back(hp, g[f"s{i}.w"], da)
            grads[f"s{i}.b"] = da.sum(axis=(0, 1, 2))
            grads[f"s{i}.m"] = emb.T @ da.sum(axis=(1, 2))
        dh = dh + dprev
    u = cache["u"]
    grads["in.w"] = u.reshape(-1, u.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
    grads["in.b"] = dh.sum(axis=(0, 1, 2))
    du = dh @ g["in.w"].T
    inputs = {"x": du[..., : cfg.in_channels], "cond_latent": du[..., cfg.in_channels:]}
    return grads, inputs


def backward(params: DenoiserParams, x: np.ndarray, c_noise: float, cond: ConditioningBundle, upstream: np.ndarray):
    """Exact reverse-mode gradients of ``forward`` contracted with ``upstream``.

    Returns ``(param_grads, input_grads)``; gradients for frozen groups are computed too.
    """
    _, cache = forward_cached(params, x, c_noise, cond)
    return backward_cached(params, cache, upstream)


class Denoiser:
    """Adapter exposing params as the raw-network callable used by the EDM sampler."""

    def __init__(self, params: DenoiserParams):
        self.params = params

    def __call__(self, x_in, c_noise, cond):
        return forward(self.params, x_in, c_noise, cond).astype(np.asarray(x_in).dtype)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: DenoiserParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update of every unfrozen group."""
    active = [k for k in params.groups if k not in params.frozen]
    for k in active:
        if k not in grads:
            raise ParamsError(f"no gradient for group {k!r}")
        if not np.all(np.isfinite(grads[k])):
            raise TrainingError(f"non-finite gradient in group {k!r}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k in active:
        gk = grads[k].astype(np.float64)
        m = state.m.get(k, np.zeros_like(gk))
        v = state.v.get(k, np.zeros_like(gk))
        m = beta1 * m + (1.0 - beta1) * gk
        v = beta2 * v + (1.0 - beta2) * gk * gk
        state.m[k], state.v[k] = m, v
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        params.groups[k] = (params.groups[k] - upd).astype(params.groups[k].dtype)


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"


def save_checkpoint(params: DenoiserParams, directory: str | os.PathLike) -> None:
    """Write one ``<group>.dcrf`` per group plus ``manifest.txt``.

    Manifest grammar: a ``config`` line of ``key=value`` pairs, then one
    ``group<TAB>tag<TAB>d0xd1x...`` line per group, in layout order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["config " + " ".join(f"{k}={v}" for k, v in asdict(params.config).items())]
    for name, arr in params.groups.items():
        save_tensor(d / f"{name}.dcrf", arr.astype(np.float32))
        lines.append(f"{name}\t{params.tags[name]}\t{'x'.join(str(s) for s in arr.shape)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: str | os.PathLike) -> DenoiserParams:
    d = Path(directory)
    lines = (d / MANIFEST).read_text().splitlines()
    head = lines[0].split()
    if head[0] != "config":
        raise ParamsError(f"{d / MANIFEST}: first line must start with 'config'")
    cfg = NetConfig(**{k: int(v) for k, v in (kv.split("=") for kv in head[1:])})
    groups, tags = {}, {}
    for line in lines[1:]:
        if not line.strip():
            continue
        name, tag, shape = line.split("\t")
        arr = load_tensor(d / f"{name}.dcrf")
        if "x".join(str(s) for s in arr.shape) != shape:
            raise ParamsError(f"group {name}: shape {arr.shape} does not match manifest {shape}")
        groups[name], tags[name] = arr, tag
    expected = {n for n, _, _ in group_layout(cfg)}
    if set(groups) != expected:
        raise ParamsError(f"checkpoint groups {sorted(set(groups) ^ expected)} mismatch the config layout")
    return DenoiserParams(cfg, groups, tags)
