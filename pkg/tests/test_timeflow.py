import math

import numpy as np
import pytest

from sundial import tensor as T
from sundial.config import ConfigError, ModelConfig, model_config
from sundial.model import SundialModel
from sundial.tensor import Tensor
from sundial.timeflow import (
    CosineSchedule,
    FMNet,
    MSEHead,
    TrainingDataError,
    ddpm_sample,
    diffusion_objective,
    fmnet_forward,
    fourier_features,
    interpolate,
    mse_objective,
    push_forward,
    sample_ensemble,
    sample_one,
    split_noise,
    timeflow_loss,
)


class Stub:
    """Velocity network that ignores its condition."""

    def __init__(self, fn, f):
        self.fn = fn
        self.output_proj = type("P", (), {"weight": np.zeros((1, f))})()

    def __call__(self, y_t, t, h):
        return T.as_tensor(self.fn(np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=np.float64), t))


def test_interpolate_endpoints_and_midpoint():
    y, y0 = np.array([[2.0, 4.0]]), np.array([[0.0, 0.0]])
    np.testing.assert_array_equal(interpolate(y, y0, [0.0]), y0)
    np.testing.assert_array_equal(interpolate(y, y0, [1.0]), y)
    np.testing.assert_array_equal(interpolate(y, y0, [0.5]), [[1.0, 2.0]])


def test_interpolate_rowwise_t(rng):
    y, y0 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    t = np.array([0.0, 0.3, 1.0])
    np.testing.assert_allclose(interpolate(y, y0, t), t[:, None] * y + (1 - t[:, None]) * y0)


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_interpolate_rejects_out_of_range(t):
    with pytest.raises(ValueError):
        interpolate(np.zeros((1, 2)), np.zeros((1, 2)), [t])


def small_cfg(**kw):
    base = dict(horizon=2, d_model=3, d_flow=2, n_flow_blocks=1, flow_mlp_ratio=2, time_features=4,
                n_layers=1, d_ff=4, n_heads=1, patch_len=2, max_context=16, rope_enabled=False)
    base.update(kw)
    return ModelConfig(**base)


def test_fmnet_init_shape_and_determinism(rng):
    net = FMNet(small_cfg(horizon=3, d_flow=8), rng)
    h = np.repeat(rng.standard_normal((1, 3)), 2, axis=0)
    y = np.repeat(rng.standard_normal((1, 3)), 2, axis=0)
    out = fmnet_forward(y, np.array([0.4, 0.4]), h, net).data
    assert out.shape == (2, 3) and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out[0], out[1])


def test_fmnet_blocks_are_identity_at_init(rng):
    net = FMNet(small_cfg(d_flow=8, n_flow_blocks=3), rng)
    x = Tensor(rng.standard_normal((4, 8)))
    c = Tensor(rng.standard_normal((4, 8)))
    for blk in net.blocks:
        np.testing.assert_array_equal(blk(x, c).data, x.data)


def _gelu(z):
    return 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))


def _ln(x):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)


def test_fmnet_matches_hand_evaluation(rng):
    net = FMNet(small_cfg(), rng)
    for p in net.parameters():           # make every path, including the gates, non-trivial
        p.data = rng.standard_normal(p.shape).astype(np.float32) * 0.7
    W = {n: p.data.astype(np.float64) for n, p in net.named_parameters()}
    y, t, h = rng.standard_normal((1, 2)), np.array([0.37]), rng.standard_normal((1, 3))

    lin = lambda x, n: x @ W[n + ".weight"] + W[n + ".bias"]  # noqa: E731
    silu = lambda z: z / (1 + np.exp(-z))  # noqa: E731
    half = 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * 1000.0 * freqs
    feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    temb = lin(silu(lin(feats, "time_embed.fc1")), "time_embed.fc2")
    c = silu(lin(h, "cond_proj") + temb)
    x = lin(y, "input_proj")
    mod = lin(c, "blocks.0.modulation")
    shift, scale, gate = mod[:, :2], mod[:, 2:4], mod[:, 4:]
    inner = _ln(x) * (1 + scale) + shift
    x = x + gate * lin(_gelu(lin(inner, "blocks.0.mlp.fc1")), "blocks.0.mlp.fc2")
    fm = lin(c, "final_modulation")
    expected = lin(_ln(x) * (1 + fm[:, 2:]) + fm[:, :2], "output_proj")

    got = net(y, t, h).data
    assert np.max(np.abs(got - expected)) < 1e-5


def test_fourier_features_shape():
    assert fourier_features(np.array([0.0, 1.0]), 64).shape == (2, 64)


# -- objectives -------------------------------------------------------------------

def test_loss_zero_for_exact_velocity(rng):
    y = rng.standard_normal((5, 3))
    noise = rng.standard_normal((5, 3))
    t = rng.random(5)
    # the stub closes over the frozen draws
    net = Stub(lambda yt, tt: y - noise, 3)
    assert float(timeflow_loss(Tensor(np.zeros((5, 2))), y, net, t=t, noise=noise).data) == 0.0


def test_loss_zero_when_target_equals_noise(rng):
    y = rng.standard_normal((4, 3))
    net = Stub(lambda yt, tt: np.zeros_like(yt), 3)
    assert float(timeflow_loss(Tensor(np.zeros((4, 2))), y, net, t=rng.random(4), noise=y).data) == 0.0


def test_loss_hand_value_f3():
    y, y0 = np.array([[1.0, -2.0, 0.5]]), np.array([[0.2, 0.3, -0.1]])
    net = Stub(lambda yt, tt: np.zeros_like(yt), 3)
    loss = float(timeflow_loss(Tensor(np.zeros((1, 2))), y, net, t=[0.4], noise=y0).data)
    assert abs(loss - ((0.8 ** 2 + 2.3 ** 2 + 0.6 ** 2) / 3)) < 1e-6


def test_loss_skips_invalid_positions(rng):
    y = rng.standard_normal((3, 2))
    noise = rng.standard_normal((3, 2))
    net = Stub(lambda yt, tt: np.zeros_like(yt), 2)
    valid = np.array([True, False, True])
    got = float(timeflow_loss(Tensor(np.zeros((3, 2))), y, net, t=np.full(2, 0.5), noise=noise[valid],
                              valid=valid).data)
    assert abs(got - np.mean((y[valid] - noise[valid]) ** 2)) < 1e-6


def test_loss_without_any_target_raises(rng):
    net = Stub(lambda yt, tt: yt, 2)
    with pytest.raises(TrainingDataError):
        timeflow_loss(Tensor(np.zeros((3, 2))), np.zeros((3, 2)), net, rng, valid=np.zeros(3, bool))


def test_mse_objective_zero_for_perfect_head(rng):
    y = rng.standard_normal((4, 3))
    head = lambda h: Tensor(y)  # noqa: E731
    assert float(mse_objective(Tensor(np.zeros((4, 2))), y, head).data) == 0.0


def test_diffusion_objective_zero_for_perfect_noise_predictor(rng):
    y, noise = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    net = lambda x, t, h: Tensor(noise)  # noqa: E731
    loss = diffusion_objective(Tensor(np.zeros((4, 2))), y, net, steps=np.array([0, 10, 500, 999]), noise=noise)
    assert float(loss.data) == 0.0


def test_cosine_schedule_monotone():
    s = CosineSchedule(1000)
    assert np.all(np.diff(s.alpha_bar) < 0) and 0 < s.alpha_bar[-1] < s.alpha_bar[0] <= 1


def test_ddpm_sampler_recovers_point_target(rng):
    # an oracle noise predictor for a point mass at c makes every sample exactly c
    sched = CosineSchedule(1000)
    c = np.array([0.7, -1.2])

    def net(x, t, h):
        step = np.round(np.asarray(t) * 1000).astype(int)
        ab = sched.alpha_bar[step][:, None]
        return Tensor((x - np.sqrt(ab) * c) / np.sqrt(1 - ab), dtype=np.float64)

    out = ddpm_sample(net, Tensor(np.zeros((5, 1)), dtype=np.float64), rng.standard_normal((5, 2)), 50, rng, sched)
    np.testing.assert_allclose(out, np.tile(c, (5, 1)), atol=1e-6)


# -- sampling ------------------------------------------------------------------------

def test_single_euler_step(rng):
    net = FMNet(small_cfg(horizon=3, d_flow=8), rng)
    h = rng.standard_normal(3)
    noise = split_noise(np.random.default_rng(5), 1, 3)
    got = sample_one(h, 1, net, np.random.default_rng(5))
    with T.no_grad():
        expected = noise[0] + net(noise, np.zeros(1), h[None]).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-6)


@pytest.mark.parametrize("k", [1, 3, 50, 97])
def test_constant_velocity_telescopes(k):
    c = np.array([0.3, -1.1, 2.0])
    net = Stub(lambda y, t: np.broadcast_to(c, y.shape), 3)
    noise = split_noise(np.random.default_rng(1), 1, 3)
    got = sample_one(np.zeros(2), k, net, np.random.default_rng(1))
    np.testing.assert_allclose(got, noise[0] + c, atol=1e-5)


def test_sampling_is_deterministic(rng):
    net = FMNet(small_cfg(horizon=3, d_flow=8), rng)
    h = rng.standard_normal(3)
    a = sample_one(h, 50, net, np.random.default_rng(9))
    b = sample_one(h, 50, net, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_steps_must_be_positive(rng):
    net = FMNet(small_cfg(), rng)
    with pytest.raises(ConfigError):
        sample_one(np.zeros(3), 0, net, rng)
    with pytest.raises(ConfigError):
        push_forward(net, Tensor(np.zeros((1, 3))), np.zeros((1, 2)), -1)


def test_ensemble_of_one_equals_sample_one(rng):
    net = FMNet(small_cfg(horizon=3, d_flow=8), rng)
    h = rng.standard_normal(3)
    a = sample_ensemble(h, 1, 20, net, np.random.default_rng(4))[0]
    b = sample_one(h, 20, net, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_ensemble_draws_independent_of_ensemble_size(rng):
    net = FMNet(small_cfg(horizon=3, d_flow=8), rng)
    h = rng.standard_normal(3)
    small = sample_ensemble(h, 3, 10, net, np.random.default_rng(4))
    big = sample_ensemble(h, 7, 10, net, np.random.default_rng(4))
    np.testing.assert_allclose(big[:3], small, atol=1e-6)


def test_ensemble_shape_and_single_backbone_call():
    from sundial.forecast import generate
    m = SundialModel(model_config("tiny"))
    for s in (1, 20):
        m.backbone_calls = 0
        out = generate(m, np.sin(np.arange(30.0)), m.cfg.horizon, n_samples=s, steps=50,
                       rng=np.random.default_rng(0))
        assert out.shape == (s, m.cfg.horizon)
        assert m.backbone_calls == 1


def test_sample_ensemble_default_shape(rng):
    net = FMNet(model_config("tiny"), rng)
    assert sample_ensemble(rng.standard_normal(8), 20, 50, net, rng).shape == (20, 4)


def test_mse_head_shape(rng):
    head = MSEHead(small_cfg(horizon=5), rng)
    assert head(rng.standard_normal((2, 3))).shape == (2, 5)


@pytest.mark.parametrize("head", ["mse", "diffusion"])
def test_alternate_heads_train_and_sample(head):
    from sundial.training import make_batch
    from sundial.config import TrainConfig
    from sundial import data
    cfg = model_config("tiny").replace(head=head)
    m = SundialModel(cfg)
    corpus = data.synth_corpus(0, 3, 64)
    batch = make_batch(corpus, cfg, TrainConfig(batch_size=2, min_context=16, max_context=64), np.random.default_rng(0))
    loss = m.loss(batch, np.random.default_rng(0))
    loss.backward()
    assert np.isfinite(float(loss.data))
    out = m.sample(np.zeros((1, cfg.d_model)), 3, 10, np.random.default_rng(0))
    assert out.shape == (1, 3, cfg.horizon)
