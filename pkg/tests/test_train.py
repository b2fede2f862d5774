import numpy as np
import pytest
from scipy.stats import chisquare

from videodepth import codec
from videodepth.net import SPATIAL, TEMPORAL, NetConfig, init_params, load_checkpoint
from videodepth.synth import make_pair
from videodepth.tensor import Rng
from videodepth.train import (
    CorpusError,
    LatentCache,
    LengthLaw,
    StageConfig,
    StageConfigError,
    default_stages,
    run_pipeline,
    run_stage,
    sample_batch,
    validate_pipeline,
)

CC = codec.CodecConfig()
SMALL = NetConfig(channels=8, spatial_blocks=1, temporal_blocks=1)


@pytest.fixture(scope="module")
def corpora():
    real = []
    for i in range(6):
        p = make_pair(100 + i, "realistic", 10 + 2 * i, 32, 32, strength=0.5)
        p.seq_id = f"rea{i:05d}"
        real.append(p)
    syn = []
    for i in range(4):
        p = make_pair(200 + i, "synthetic", 12, 32, 32)
        p.seq_id = f"syn{i:05d}"
        syn.append(p)
    return {"realistic": real, "synthetic": syn}


def small_stages(iters=(4, 3, 3)):
    return default_stages(iterations=iters, lengths=((1, 4), (1, 8), 6))


def test_length_law_uniform_chi_square():
    law = LengthLaw(1, 25)
    r = Rng(17)
    counts = np.bincount([law.draw(r) for _ in range(10_000)], minlength=26)[1:]
    assert chisquare(counts).pvalue > 0.01


def test_fixed_length_law_single_frames(corpora):
    batch = sample_batch(corpora["realistic"], LengthLaw(1, 1), 4, Rng(0), LatentCache(CC, 8))
    assert [b.length for b in batch] == [1, 1, 1, 1]


def test_sample_batch_deterministic_and_in_support(corpora):
    law = LengthLaw(2, 9)
    a = sample_batch(corpora["realistic"], law, 8, Rng(3), LatentCache(CC, 8))
    b = sample_batch(corpora["realistic"], law, 8, Rng(3), LatentCache(CC, 8))
    assert [(x.seq_id, x.start, x.length) for x in a] == [(x.seq_id, x.start, x.length) for x in b]
    assert all(2 <= x.length <= 9 for x in a)
    assert all(x.cond.num_frames == x.length for x in a)


def test_sample_batch_too_long(corpora):
    with pytest.raises(CorpusError, match="100"):
        sample_batch(corpora["synthetic"], LengthLaw(100, 100), 1, Rng(0), LatentCache(CC, 8))


def test_cache_hit_equals_reencode(corpora, tmp_path):
    seq = corpora["realistic"][0]
    c = LatentCache(CC, 8, tmp_path)
    first = c.get(seq)
    again = LatentCache(CC, 8, tmp_path).get(seq)  # from disk
    fresh = LatentCache(CC, 8)._encode(seq)
    for f in ("video_latent", "depth_latent", "frame_embed"):
        assert getattr(again, f).tobytes() == getattr(fresh, f).tobytes() == getattr(first, f).tobytes()


@pytest.mark.parametrize("stage_id, frozen_tag", [(2, SPATIAL), (3, TEMPORAL)])
def test_freeze_bit_identity(corpora, stage_id, frozen_tag):
    params = init_params(SMALL, Rng(0))
    # the output head starts at zero, which would leave every other gradient zero
    params.groups["out.w"] = Rng(5).normal(params.groups["out.w"].shape) * 0.1
    stage = small_stages()[stage_id - 1]
    before = params.copy()
    run_stage(params, stage, corpora, Rng(1), LatentCache(CC, 8))
    for k in params.groups:
        same = params.groups[k].tobytes() == before.groups[k].tobytes()
        if params.tags[k] == frozen_tag:
            assert same, k
    trained = [k for k in params.groups if params.tags[k] != frozen_tag and not k.startswith("out.") and not k.endswith(".g")]
    assert any(params.groups[k].tobytes() != before.groups[k].tobytes() for k in trained)


def test_trace_deterministic_and_cache_transparent(corpora, tmp_path):
    st = small_stages()[0]
    p1, p2 = init_params(SMALL, Rng(0)), init_params(SMALL, Rng(0))
    t1 = run_stage(p1, st, corpora, Rng(9), LatentCache(CC, 8))
    t2 = run_stage(p2, st, corpora, Rng(9), LatentCache(CC, 8, tmp_path))
    assert [r.loss for r in t1] == [r.loss for r in t2]
    for k in p1.groups:
        assert p1.groups[k].tobytes() == p2.groups[k].tobytes()


def test_pipeline_checkpoints_and_resume(corpora, tmp_path):
    init = init_params(SMALL, Rng(0))
    full, traces = run_pipeline(init, small_stages(), corpora, Rng(4), LatentCache(CC, 8), tmp_path / "full")
    for sid in (1, 2, 3):
        assert (tmp_path / "full" / f"stage{sid}" / "loss.tsv").exists()
    resumed, rtraces = run_pipeline(load_checkpoint(tmp_path / "full" / "stage1"), small_stages(), corpora, Rng(4),
                                    LatentCache(CC, 8), tmp_path / "resumed", only=[2, 3])
    assert [r.loss for r in rtraces[3]] == [r.loss for r in traces[3]]
    for k in full.groups:
        assert resumed.groups[k].tobytes() == full.groups[k].tobytes()
    reloaded = load_checkpoint(tmp_path / "full" / "stage3")
    for k in full.groups:
        assert reloaded.groups[k].tobytes() == full.groups[k].tobytes()


def test_stage_pattern_enforced():
    st = small_stages()
    bad = StageConfig(2, "realistic", LengthLaw(1, 8), frozenset({SPATIAL}), 1)
    with pytest.raises(StageConfigError):
        validate_pipeline([st[0], bad, st[2]])
    with pytest.raises(StageConfigError):
        validate_pipeline([st[0], st[2]])
    with pytest.raises(StageConfigError):
        validate_pipeline([st[0], StageConfig(2, "realistic", LengthLaw(1, 4), frozenset({TEMPORAL}), 1), st[2]])
    with pytest.raises(StageConfigError):
        StageConfig(3, "synthetic", LengthLaw(4, 12), frozenset({SPATIAL}), 1) and validate_pipeline(
            [st[0], st[1], StageConfig(3, "synthetic", LengthLaw(4, 12), frozenset({SPATIAL}), 1)])


def test_missing_corpus(corpora):
    with pytest.raises(CorpusError):
        run_stage(init_params(SMALL, Rng(0)), small_stages()[2], {"realistic": corpora["realistic"]}, Rng(0), LatentCache(CC, 8))


@pytest.mark.slow
def test_toy_run_loss_halves(corpora):
    real = [make_pair(300 + i, "realistic", 24, 32, 32, strength=0.5) for i in range(16)]
    for i, p in enumerate(real):
        p.seq_id = f"toy{i}"
    params = init_params(NetConfig(channels=8), Rng(0))
    st = StageConfig(1, "realistic", LengthLaw(1, 8), frozenset({SPATIAL, TEMPORAL}), 300, 4)
    trace = run_stage(params, st, {"realistic": real}, Rng(1), LatentCache(CC, 8))
    losses = np.array([r.loss for r in trace])
    assert losses[-50:].mean() < 0.5 * losses[:50].mean()
