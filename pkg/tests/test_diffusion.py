import math

import numpy as np
import pytest
import sympy as sp
import torch

from helpers import fd_relative_error

from bevloc.diffusion import (
    Denoiser, DenoiserConfig, PoseNormalizer, add_noise, build_schedule, ddim_sample, ddim_step,
    epsilon_loss, step_embedding, step_sequence,
)

TINY = DenoiserConfig(layers=1, heads=2, latent_dim=16, sequence_len=3, step_embed_dim=8, feature_dim=6)


def cosine_alpha_bar_oracle(k, K, s=0.008):
    f = lambda t: math.cos((t / K + s) / (1 + s) * math.pi / 2) ** 2
    return f(k) / f(0)


def test_cosine_schedule():
    s = build_schedule(100, "cosine")
    ab = s.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[100] < 0.01
    assert np.all((s.beta > 0) & (s.beta < 1))
    for k in range(100):  # the final beta is clipped, earlier ones follow the closed form
        assert ab[k] == pytest.approx(cosine_alpha_bar_oracle(k, 100), abs=1e-12)
    np.testing.assert_allclose(ab[1:], ab[:-1] * s.alpha, rtol=0, atol=1e-12)


def test_linear_schedule():
    s = build_schedule(100, "linear")
    np.testing.assert_allclose(s.beta[[0, -1]], [1e-3, 0.2])
    assert s.alpha_bar[-1] < 1e-4
    for K in (2, 10):  # the upper beta reaches 10 and 2
        with pytest.raises(ValueError):
            build_schedule(K, "linear")
    with pytest.raises(ValueError):
        build_schedule(1, "cosine")
    with pytest.raises(ValueError):
        build_schedule(10, "quadratic")


def test_add_noise_examples():
    s = build_schedule(100)
    k = int(np.argmin(np.abs(s.alpha_bar - 0.25)))
    t0 = np.array([0.3, -0.2, 1.0, 0.0])
    a = s.alpha_bar[k]
    np.testing.assert_allclose(add_noise(t0, k, np.zeros(4), s), math.sqrt(a) * t0)
    eps = np.array([1.0, 2.0, -1.0, 0.5])
    np.testing.assert_allclose(add_noise(np.zeros(4), k, eps, s), math.sqrt(1 - a) * eps)
    with pytest.raises(ValueError):
        add_noise(t0, 0, eps, s)
    with pytest.raises(ValueError):
        add_noise(t0, 101, eps, s)


def test_add_noise_per_tuple_steps_torch():
    s = build_schedule(100)
    t0 = torch.rand(2, 3, 4, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, dtype=torch.float64)
    k = torch.tensor([5, 80])
    out = add_noise(t0, k, eps, s)
    for i in range(2):
        torch.testing.assert_close(out[i], add_noise(t0[i], int(k[i]), eps[i], s))


def test_step_embedding():
    e0 = step_embedding(0, 8)
    assert e0.tolist() == [0.0, 1.0] * 4
    e = step_embedding(1, 4)
    np.testing.assert_allclose(e.numpy(), [math.sin(1), math.cos(1), math.sin(1e-2), math.cos(1e-2)], atol=1e-15)
    big = step_embedding(torch.arange(0, 1000, 37), 128)
    assert big.abs().max() <= 1.0
    with pytest.raises(ValueError):
        step_embedding(3, 7)


def make_inputs(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    noisy = torch.randn(b, 3, 4, generator=g, dtype=torch.float64)
    feats = torch.randn(b, 3, 6, generator=g, dtype=torch.float64)
    return noisy, feats


def test_denoiser_shape_and_determinism():
    torch.manual_seed(0)
    net = Denoiser(TINY).double()
    noisy, feats = make_inputs()
    out1 = net(noisy, torch.tensor([3, 50]), feats)
    out2 = net(noisy, torch.tensor([3, 50]), feats)
    assert out1.shape == noisy.shape
    assert torch.equal(out1, out2)
    with pytest.raises(ValueError):
        net(noisy[:, :2], 3, feats[:, :2])
    with pytest.raises(ValueError):
        net(noisy, 3, feats[..., :5])


def test_denoiser_permutation_equivariance_without_frame_embedding():
    torch.manual_seed(1)
    net = Denoiser(TINY).double()
    with torch.no_grad():
        net.frame_embed.zero_()
    noisy, feats = make_inputs(1)
    perm = [2, 0, 1]
    with torch.no_grad():
        a = net(noisy, 7, feats)
        b = net(noisy[:, perm], 7, feats[:, perm])
    torch.testing.assert_close(b, a[:, perm], rtol=0, atol=1e-12)



@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_matches_finite_differences(seed):
    torch.manual_seed(seed)
    net = Denoiser(TINY).double()
    noisy, feats = make_inputs(3, seed)
    g = torch.Generator().manual_seed(seed)
    eps = torch.randn(noisy.shape, generator=g, dtype=torch.float64)
    k = torch.tensor([3, 40, 97])
    assert fd_relative_error(net, lambda: epsilon_loss(net(noisy, k, feats), eps), 1e-3, seed) < 1e-4

def test_ddim_step_with_true_noise_walks_forward_marginal():
    s = build_schedule(100)
    rng = np.random.default_rng(0)
    t0 = rng.uniform(-1, 1, size=(5, 4))
    eps = rng.normal(size=(5, 4))
    t_k = add_noise(t0, 60, eps, s)
    np.testing.assert_allclose(ddim_step(t_k, eps, 60, 30, s), add_noise(t0, 30, eps, s), atol=1e-12)
    np.testing.assert_allclose(ddim_step(t_k, eps, 60, 0, s), t0, atol=1e-6)


def test_ddim_step_to_zero():
    s = build_schedule(100)
    t_k, e = np.array([0.5, -0.3]), np.array([0.1, 0.7])
    a = s.alpha_bar[40]
    np.testing.assert_array_equal(ddim_step(t_k, e, 40, 0, s), (t_k - math.sqrt(1 - a) * e) / math.sqrt(a))
    with pytest.raises(ValueError):
        ddim_step(t_k, e, 10, 10, s)
    with pytest.raises(ValueError):
        ddim_step(t_k, e, 101, 10, s)


def symbolic_ddim():
    t, e, a, ap = sp.symbols("t e a ap", real=True)
    x0 = (t - sp.sqrt(1 - a) * e) / sp.sqrt(a)
    expr = sp.simplify(sp.sqrt(ap) * x0 + sp.sqrt(1 - ap) * e)
    return sp.lambdify((t, e, a, ap), expr, "mpmath")


def test_ddim_step_matches_symbolic_oracle():
    f = symbolic_ddim()
    s = build_schedule(100)
    rng = np.random.default_rng(5)
    for _ in range(20):
        k = int(rng.integers(2, 101))
        kp = int(rng.integers(0, k))
        t_k, e = rng.normal(size=4), rng.normal(size=4)
        got = ddim_step(t_k, e, k, kp, s)
        want = [float(f(ti, ei, s.alpha_bar[k], s.alpha_bar[kp])) for ti, ei in zip(t_k, e)]
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_step_sequence():
    assert step_sequence(100, 10) == [100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0]
    assert step_sequence(100, 100) == list(range(100, -1, -1))
    seq = step_sequence(100, 15)
    assert seq[0] == 100 and seq[-1] == 0 and len(seq) == 16 and all(np.diff(seq) < 0)
    with pytest.raises(ValueError):
        step_sequence(100, 0)
    with pytest.raises(ValueError):
        step_sequence(100, 101)


def oracle_eps_fn(t0, schedule):
    ab = schedule.alpha_bar

    def fn(t, k):
        return (t - math.sqrt(ab[k]) * t0) / math.sqrt(1 - ab[k])

    return fn


@pytest.mark.parametrize("steps", [10, 15, 100])
def test_ddim_sample_oracle_recovery(steps):
    s = build_schedule(100)
    t0 = torch.rand(50, 3, 4, dtype=torch.float64) * 2 - 1
    out = ddim_sample(oracle_eps_fn(t0, s), t0.shape, steps, s, rng_seed=3, dtype=torch.float64)
    assert (out - t0).abs().max() < 1e-5


def test_ddim_sample_visits_every_step_and_is_deterministic():
    s = build_schedule(100)
    seen = []

    def fn(t, k):
        seen.append(k)
        return torch.zeros_like(t)

    a = ddim_sample(fn, (2, 3, 4), 100, s, rng_seed=7)
    assert seen == list(range(100, 0, -1))
    b = ddim_sample(lambda t, k: torch.zeros_like(t), (2, 3, 4), 100, s, rng_seed=7)
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        ddim_sample(fn, (1, 3, 4), 0, s)


def test_clip_bounds_intermediate_estimate():
    s = build_schedule(100)
    t = torch.full((1, 4), 3.0)
    out = ddim_step(t, torch.zeros(1, 4), 50, 0, s, clip=1.5)
    assert out.abs().max() <= 1.5


def test_epsilon_loss():
    a = torch.randn(4, 3, 4)
    assert epsilon_loss(a, a) == 0
    assert epsilon_loss(a + 1, a).item() == pytest.approx(1.0)
    b = np.random.default_rng(0).normal(size=(2, 3, 4))
    c = np.random.default_rng(1).normal(size=(2, 3, 4))
    total = 0.0
    for i in range(2):
        for j in range(3):
            for m in range(4):
                total += abs(b[i, j, m] - c[i, j, m])
    assert epsilon_loss(b, c) == pytest.approx(total / 24, abs=1e-15)
    with pytest.raises(ValueError):
        epsilon_loss(a, a[:, :2])


def test_normalizer_round_trip_and_decode_scale_invariance(rng):
    poses = np.c_[rng.uniform(-40, 40, size=(100, 2)), rng.uniform(-np.pi, np.pi, 100)]
    norm = PoseNormalizer.fit(poses)
    enc = norm.encode(poses)
    assert np.abs(enc[:, :2]).max() < 1.0
    np.testing.assert_allclose(norm.decode(enc), poses, atol=1e-9)
    np.testing.assert_allclose(norm.encode(norm.decode(enc)), enc, atol=1e-12)
    scaled = enc.copy()
    scaled[:, 2:] *= 3.7
    np.testing.assert_allclose(norm.decode(scaled), norm.decode(enc), atol=1e-12)
    back = PoseNormalizer.from_dict(norm.to_dict())
    np.testing.assert_array_equal(back.encode(poses), enc)


def test_normalizer_margin():
    norm = PoseNormalizer.fit(np.array([[0.0, 0.0, 0.0], [10.0, 20.0, 0.0]]))
    np.testing.assert_allclose(norm.lo, [-0.5, -1.0])
    np.testing.assert_allclose(norm.hi, [10.5, 21.0])
