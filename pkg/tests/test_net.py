import numpy as np
import pytest

from videodepth.edm import ConditioningError
from videodepth.net import (
    SPATIAL,
    TEMPORAL,
    AdamState,
    ConditioningBundle,
    NetConfig,
    ParamsError,
    TrainingError,
    adam_step,
    backward,
    forward,
    frame_embed,
    init_params,
    load_checkpoint,
    noise_embedding,
    save_checkpoint,
)
from videodepth.tensor import Rng

TINY = NetConfig(channels=4, spatial_blocks=1, temporal_blocks=1, embed_dim=4, in_channels=3, cond_channels=3)


def tiny_setup(cfg=TINY, T=3, h=8, w=8, seed=0):
    r = Rng(seed)
    p = init_params(cfg, r).astype(np.float64)
    # non-zero output head and biases so every path carries gradient
    for k in p.groups:
        if k.endswith(".b") or k.startswith("out."):
            p.groups[k] = r.normal(p.groups[k].shape).astype(np.float64) * 0.3
    x = r.normal([T, h, w, cfg.in_channels]).astype(np.float64)
    cond = ConditioningBundle(r.normal([T, h, w, cfg.cond_channels]).astype(np.float64), r.normal([T, cfg.embed_dim]).astype(np.float64))
    up = r.normal([T, h, w, cfg.in_channels]).astype(np.float64)
    return p, x, cond, up


def objective(p, x, c_noise, cond, up):
    return float(np.sum(forward(p, x, c_noise, cond) * up))


def test_gradients_match_central_differences():
    p, x, cond, up = tiny_setup(T=3, h=4, w=4)
    grads, _ = backward(p, x, 0.3, cond, up)
    h = 1e-6
    worst = 0.0
    for name, arr in p.groups.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = objective(p, x, 0.3, cond, up)
            arr[idx] = old - h
            fm = objective(p, x, 0.3, cond, up)
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            g = grads[name][idx]
            worst = max(worst, abs(g - fd) / max(abs(g) + abs(fd), 1e-6))
    assert worst < 1e-4


def test_input_gradients_match_central_differences():
    p, x, cond, up = tiny_setup(T=2, h=4, w=4, seed=3)
    _, gin = backward(p, x, -0.5, cond, up)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 3, 2, 1), (0, 2, 1, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (objective(p, xp, -0.5, cond, up) - objective(p, xm, -0.5, cond, up)) / (2 * h)
        assert gin["x"][idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_parameter_tags_partition():
    p = init_params(NetConfig(), Rng(0))
    names = set(p.groups)
    sp, tp = set(p.names_with_tag(SPATIAL)), set(p.names_with_tag(TEMPORAL))
    assert sp | tp == names and not sp & tp
    assert tp == {"t0.w", "t0.b", "t0.g", "t1.w", "t1.b", "t1.g"}
    assert p.count() == p.count(SPATIAL) + p.count(TEMPORAL)


def test_zero_init_output():
    p = init_params(NetConfig(), Rng(0))
    cond = ConditioningBundle(np.ones((2, 4, 4, 48), np.float32), np.ones((2, 8), np.float32))
    assert not forward(p, np.ones((2, 4, 4, 48), np.float32), 0.1, cond).any()


@pytest.mark.parametrize("t_blocks", [0, 1, 2])
def test_temporal_receptive_field(t_blocks):
    cfg = NetConfig(channels=4, spatial_blocks=1, temporal_blocks=t_blocks, embed_dim=4, in_channels=3, cond_channels=3)
    p, x, cond, _ = tiny_setup(cfg, T=6, h=4, w=4)
    for i in range(t_blocks):
        p.groups[f"t{i}.g"][:] = 0.0  # switch off the clip-mean path
    base = forward(p, x, 0.0, cond)
    x2 = x.copy()
    x2[0] += 1.0
    diff = np.abs(forward(p, x2, 0.0, cond) - base).reshape(6, -1).max(axis=1)
    assert np.all(diff[t_blocks + 1:] == 0)
    assert diff[t_blocks] > 0


def test_clip_mean_reaches_every_frame():
    cfg = NetConfig(channels=4, spatial_blocks=1, temporal_blocks=1, embed_dim=4, in_channels=3, cond_channels=3)
    p, x, cond, _ = tiny_setup(cfg, T=8, h=4, w=4)
    base = forward(p, x, 0.0, cond)
    x2 = x.copy()
    x2[0] += 1.0
    diff = np.abs(forward(p, x2, 0.0, cond) - base).reshape(8, -1).max(axis=1)
    assert np.all(diff > 0)


def test_spatial_receptive_field():
    cfg = NetConfig(channels=4, spatial_blocks=2, temporal_blocks=1, embed_dim=4, in_channels=3, cond_channels=3)
    p, x, cond, _ = tiny_setup(cfg, T=2, h=8, w=8)
    base = forward(p, x, 0.0, cond)
    x2 = x.copy()
    x2[:, 0, 0] += 1.0
    diff = np.abs(forward(p, x2, 0.0, cond) - base).max(axis=(0, 3))
    assert diff[3:, :].max() == 0 and diff[:, 3:].max() == 0
    assert diff[2, 2] > 0


def test_noise_embedding_bounded():
    e = noise_embedding(0.25 * np.log(700.0), 8)
    assert e.shape == (8,) and np.all(np.abs(e) <= 1)


def test_frame_embed_deterministic():
    v = Rng(1).uniform(size=(3, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(frame_embed(v, 8), frame_embed(v, 8))
    assert frame_embed(v, 8).shape == (3, 8)


def test_adam_first_step_is_lr():
    p = init_params(TINY, Rng(0))
    before = p.copy()
    grads = {k: np.ones_like(v) for k, v in p.groups.items()}
    adam_step(p, grads, AdamState(), lr=0.1)
    for k in p.groups:
        np.testing.assert_allclose(p.groups[k] - before.groups[k], -0.1, atol=1e-6)


def test_adam_skips_frozen_groups():
    p = init_params(TINY, Rng(0))
    p.freeze_except({TEMPORAL})
    before = p.copy()
    adam_step(p, {k: np.ones_like(v) for k, v in p.groups.items()}, AdamState(), lr=0.1)
    for k in p.names_with_tag(SPATIAL):
        assert p.groups[k].tobytes() == before.groups[k].tobytes()
    assert not np.array_equal(p.groups["t0.w"], before.groups["t0.w"])


def test_adam_rejects_non_finite():
    p = init_params(TINY, Rng(0))
    grads = {k: np.ones_like(v) for k, v in p.groups.items()}
    grads["in.w"][0, 0] = np.nan
    with pytest.raises(TrainingError):
        adam_step(p, grads, AdamState(), lr=0.1)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(NetConfig(channels=8), Rng(4))
    save_checkpoint(p, tmp_path / "ck")
    q = load_checkpoint(tmp_path / "ck")
    assert q.config == p.config and q.tags == p.tags
    for k in p.groups:
        assert q.groups[k].tobytes() == p.groups[k].tobytes()
    assert (tmp_path / "ck" / "manifest.txt").read_text().startswith("config channels=8")


def test_checkpoint_missing_group(tmp_path):
    p = init_params(TINY, Rng(0))
    save_checkpoint(p, tmp_path)
    m = tmp_path / "manifest.txt"
    m.write_text("\n".join(l for l in m.read_text().splitlines() if not l.startswith("t0.b")) + "\n")
    with pytest.raises(ParamsError):
        load_checkpoint(tmp_path)


def test_forward_rejects_frame_mismatch():
    p, x, cond, _ = tiny_setup(T=3, h=4, w=4)
    with pytest.raises(ConditioningError):
        forward(p, x[:2], 0.0, cond)
