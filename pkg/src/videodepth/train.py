"""Three-stage training: dataset style, clip-length law and spatial/temporal freezing per stage."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import codec, edm
from .net import (
    SPATIAL,
    TEMPORAL,
    AdamState,
    ConditioningBundle,
    DenoiserParams,
    TrainingError,
    adam_step,
    backward_cached,
    forward_cached,
    frame_embed,
    save_checkpoint,
)
from .synth import PairedSequence
from .tensor import Rng, load_tensor, save_tensor

log = logging.getLogger(__name__)


class StageConfigError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class LengthLaw:
    """Uniform integer clip length in [lo, hi]; ``lo == hi`` is a fixed length."""

    lo: int
    hi: int

    def __post_init__(self):
        if not 1 <= self.lo <= self.hi:
            raise StageConfigError(f"invalid length law [{self.lo}, {self.hi}]")

    @property
    def fixed(self) -> bool:
        return self.lo == self.hi

    def draw(self, rng: Rng) -> int:
        return self.lo if self.fixed else rng.integers(self.lo, self.hi)

    def __str__(self):
        return f"fixed {self.lo}" if self.fixed else f"uniform[{self.lo}, {self.hi}]"


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    corpus_style: str
    length_law: LengthLaw
    trainable_tags: frozenset
    iterations: int
    batch_size: int = 4
    lr: float = 1e-3


def default_stages(
    iterations=(300, 150, 60), lengths=((1, 8), (1, 32), 12), batch_size: int = 4, lr: float = 1e-3
) -> list[StageConfig]:
    (l1, h1), (l2, h2), fixed = lengths
    return [
        StageConfig(1, "realistic", LengthLaw(l1, h1), frozenset({SPATIAL, TEMPORAL}), iterations[0], batch_size, lr),
        StageConfig(2, "realistic", LengthLaw(l2, h2), frozenset({TEMPORAL}), iterations[1], batch_size, lr),
        StageConfig(3, "synthetic", LengthLaw(fixed, fixed), frozenset({SPATIAL}), iterations[2], batch_size, lr),
    ]


_PATTERN = {
    1: ("realistic", False, {SPATIAL, TEMPORAL}),
    2: ("realistic", False, {TEMPORAL}),
    3: ("synthetic", True, {SPATIAL}),
}


def validate_stage(stage: StageConfig) -> None:
    if stage.stage_id not in _PATTERN:
        raise StageConfigError(f"stage_id must be 1, 2 or 3, got {stage.stage_id}")
    style, fixed, tags = _PATTERN[stage.stage_id]
    sid = stage.stage_id
    if stage.corpus_style != style:
        raise StageConfigError(f"stage {sid} must train on the {style} corpus, not {stage.corpus_style}")
    if stage.length_law.fixed != fixed:
        raise StageConfigError(f"stage {sid} needs a {'fixed' if fixed else 'range'} length law, got {stage.length_law}")
    if set(stage.trainable_tags) != tags:
        raise StageConfigError(f"stage {sid} must train exactly {sorted(tags)}, got {sorted(stage.trainable_tags)}")
    if stage.iterations < 0 or stage.batch_size < 1 or not stage.lr > 0:
        raise StageConfigError(f"stage {sid}: iterations/batch_size/lr out of range")


def validate_pipeline(stages: Sequence[StageConfig]) -> None:
    if [s.stage_id for s in stages] != [1, 2, 3]:
        raise StageConfigError("the pipeline needs exactly stages 1, 2, 3 in order")
    for s in stages:
        validate_stage(s)
    if stages[1].length_law.hi <= stages[0].length_law.hi:
        raise StageConfigError("stage 2 must sample longer clips than stage 1")


# ---------------------------------------------------------------- latent cache


@dataclass
class Encoded:
    video_latent: np.ndarray
    depth_latent: np.ndarray
    frame_embed: np.ndarray


class LatentCache:
    """Memoises per-sequence model-space latents, optionally persisted as DCRF files under ``directory``."""

    def __init__(self, codec_cfg: codec.CodecConfig, embed_dim: int, directory=None):
        self.codec_cfg = codec_cfg
        self.embed_dim = embed_dim
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[tuple[str, str], Encoded] = {}
        self.hits = 0
        self.misses = 0

    def _encode(self, seq: PairedSequence) -> Encoded:
        cfg = self.codec_cfg
        return Encoded(
            codec.to_model_space(codec.encode(seq.video, cfg), cfg),
            codec.to_model_space(codec.encode_depth(seq.depth_norm, cfg), cfg),
            frame_embed(seq.video, self.embed_dim),
        )

    def get(self, seq: PairedSequence) -> Encoded:
        key = (seq.seq_id, seq.style)
        if key in self._mem:
            self.hits += 1
            return self._mem[key]
        enc = None
        if self.directory is not None:
            d = self.directory / seq.style / seq.seq_id
            if (d / "frame_embed.dcrf").exists():
                enc = Encoded(load_tensor(d / "video_latent.dcrf"), load_tensor(d / "depth_latent.dcrf"), load_tensor(d / "frame_embed.dcrf"))
                self.hits += 1
        if enc is None:
            self.misses += 1
            enc = self._encode(seq)
            if self.directory is not None:
                d = self.directory / seq.style / seq.seq_id
                d.mkdir(parents=True, exist_ok=True)
                save_tensor(d / "video_latent.dcrf", enc.video_latent)
                save_tensor(d / "depth_latent.dcrf", enc.depth_latent)
                save_tensor(d / "frame_embed.dcrf", enc.frame_embed)
        self._mem[key] = enc
        return enc


# ---------------------------------------------------------------- batches


@dataclass
class BatchItem:
    depth_latent: np.ndarray
    cond: ConditioningBundle
    seq_id: str
    start: int

    @property
    def length(self) -> int:
        return self.depth_latent.shape[0]


def sample_batch(corpus: Sequence[PairedSequence], law: LengthLaw, batch_size: int, rng: Rng, cache: LatentCache) -> list[BatchItem]:
    """Variable-length clips: draw L from ``law``, a sequence with T >= L, then a start frame."""
    items = []
    for _ in range(batch_size):
        L = law.draw(rng)
        eligible = [s for s in corpus if s.depth_norm.shape[0] >= L]
        if not eligible:
            raise CorpusError(f"no sequence has >= {L} frames (length law {law})")
        seq = eligible[rng.integers(0, len(eligible) - 1)]
        start = rng.integers(0, seq.depth_norm.shape[0] - L)
        enc = cache.get(seq)
        sl = slice(start, start + L)
        items.append(BatchItem(enc.depth_latent[sl], ConditioningBundle(enc.video_latent[sl], enc.frame_embed[sl]), seq.seq_id, start))
    return items


# ---------------------------------------------------------------- training


@dataclass
class TraceRow:
    iteration: int
    sigma_mean: float
    loss: float


def item_loss_and_grads(params: DenoiserParams, item: BatchItem, sigma: float, rng: Rng):
    """Weighted denoising loss for one clip and its parameter gradients."""
    x0 = item.depth_latent
    x_t = edm.add_noise(x0, sigma, rng)
    p = edm.precondition(sigma)
    raw, cache = forward_cached(params, (p.c_in * x_t).astype(np.float32), p.c_noise, item.cond)
    d = p.c_skip * x_t.astype(np.float64) + p.c_out * raw.astype(np.float64)
    err = d - x0.astype(np.float64)
    lam = edm.loss_weight(sigma)
    loss = lam * float(np.mean(err * err))
    upstream = (2.0 * lam * p.c_out / err.size) * err
    grads, _ = backward_cached(params, cache, upstream.astype(np.float32))
    return loss, grads


def run_stage(
    params: DenoiserParams,
    stage: StageConfig,
    corpora: dict[str, Sequence[PairedSequence]],
    rng: Rng,
    cache: LatentCache,
    dist: edm.NoiseLevelDistribution = edm.NoiseLevelDistribution(),
) -> list[TraceRow]:
    """Run ``stage.iterations`` Adam steps in place; groups outside ``trainable_tags`` stay bit-identical."""
    validate_stage(stage)
    corpus = corpora.get(stage.corpus_style)
    if not corpus:
        raise CorpusError(f"stage {stage.stage_id}: {stage.corpus_style} corpus is missing or empty")
    params.freeze_except(stage.trainable_tags)
    state = AdamState()
    trace = []
    for it in range(stage.iterations):
        it_rng = rng.child(it)
        batch = sample_batch(corpus, stage.length_law, stage.batch_size, it_rng.child(0), cache)
        total = {}
        losses, sigmas = [], []
        for j, item in enumerate(batch):
            item_rng = it_rng.child(1 + j)
            sigma = edm.sample_sigma(dist, item_rng)
            loss, grads = item_loss_and_grads(params, item, sigma, item_rng)
            losses.append(loss)
            sigmas.append(sigma)
            for k, g in grads.items():
                total[k] = total[k] + g if k in total else g.astype(np.float64)
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise TrainingError(f"stage {stage.stage_id}: non-finite loss at iteration {it}")
        adam_step(params, {k: v / len(batch) for k, v in total.items()}, state, stage.lr)
        trace.append(TraceRow(it, float(np.mean(sigmas)), mean_loss))
        if it % 50 == 0:
            log.info("stage %d iter %d loss %.4f", stage.stage_id, it, mean_loss)
    params.frozen = set()
    return trace


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w") as f:
        f.write("iteration\tsigma_mean\tloss\n")
        for r in trace:
            f.write(f"{r.iteration}\t{r.sigma_mean:.9g}\t{r.loss:.9g}\n")


def run_pipeline(
    init_params: DenoiserParams,
    stages: Sequence[StageConfig],
    corpora: dict[str, Sequence[PairedSequence]],
    rng: Rng,
    cache: LatentCache,
    checkpoint_dir=None,
    only: Optional[Sequence[int]] = None,
    dist: edm.NoiseLevelDistribution = edm.NoiseLevelDistribution(),
) -> tuple[DenoiserParams, dict[int, list[TraceRow]]]:
    """Stages in order, each with its own derived RNG stream, checkpointing after each.

    ``only`` restricts which stage ids run (resume or ablation); stream
    derivation per stage id keeps results identical to a full run.
    """
    validate_pipeline(stages)
    params = init_params.copy()
    traces = {}
    for stage in stages:
        if only is not None and stage.stage_id not in only:
            continue
        traces[stage.stage_id] = run_stage(params, stage, corpora, rng.child(stage.stage_id), cache, dist)
        if checkpoint_dir is not None:
            d = Path(checkpoint_dir) / f"stage{stage.stage_id}"
            save_checkpoint(params, d)
            write_trace(d / "loss.tsv", traces[stage.stage_id])
    return params, traces
