"""Velocity Langevin refresh: closed-form steps, invariance, guards."""

import logging

import numpy as np
import pytest

from phasebridge.langevin import LangevinConfig, velocity_langevin
from phasebridge.nnet import ArchConfig, net_init, adamw_step


def test_config_validation():
    LangevinConfig()  # defaults are valid
    with pytest.raises(ValueError):
        LangevinConfig(snr=0.0)
    with pytest.raises(ValueError):
        LangevinConfig(n_steps=-1)
    with pytest.raises(ValueError):
        LangevinConfig(score_norm_floor=0.0)


def test_zero_steps_is_identity():
    v0 = np.random.default_rng(0).standard_normal((5, 2)).astype(np.float32)
    zero = lambda t, m: np.zeros((m.shape[0], 2))  # noqa: E731
    out = velocity_langevin(np.zeros((5, 2)), v0, zero, zero, 0.0, 0.2,
                            LangevinConfig(n_steps=0), np.random.default_rng(1))
    np.testing.assert_array_equal(out, v0)


def test_single_step_closed_form():
    # with constant policies the documented update is fully predictable:
    # sigma = 2 snr^2 g^2 (mean ||eps||)^2 / (mean ||z+zhat||)^2,
    # v <- v + sigma (z+zhat)/g + sqrt(2 sigma) eps
    b, d, g = 64, 2, 0.5
    x = np.zeros((b, d), np.float32)
    v0 = np.random.default_rng(1).standard_normal((b, d)).astype(np.float32)
    cvec = np.array([0.3, -0.4])
    fwd = lambda t, m: np.tile(0.6 * cvec, (m.shape[0], 1))  # noqa: E731
    bwd = lambda t, m: np.tile(0.4 * cvec, (m.shape[0], 1))  # noqa: E731

    def expected(snr: float) -> tuple[np.ndarray, float]:
        eps = np.random.default_rng(5).standard_normal((b, d)).astype(np.float32)
        combined = np.tile(cvec, (b, 1))
        noise_norm = float(np.linalg.norm(eps, axis=1).mean())
        score_sq = float(np.linalg.norm(combined, axis=1).mean()) ** 2
        sigma = 2.0 * snr**2 * g**2 * noise_norm**2 / score_sq
        return v0 + sigma * (combined / g) + np.sqrt(2.0 * sigma) * eps, sigma

    for snr in (0.15, 0.3):
        out = velocity_langevin(x, v0, fwd, bwd, 0.7, g,
                                LangevinConfig(snr=snr, n_steps=1),
                                np.random.default_rng(5))
        want, _ = expected(snr)
        np.testing.assert_allclose(out, want, rtol=1e-6)
    # step size scales with snr^2: doubling snr quadruples sigma
    _, s1 = expected(0.15)
    _, s2 = expected(0.3)
    assert s2 == pytest.approx(4.0 * s1, rel=1e-12)


def test_gaussian_score_stub_preserves_standard_normal():
    # z + zhat = -g v makes the score -v, whose stationary law is N(0, I)
    b, g = 10_000, 0.2
    half = lambda t, m: -0.5 * g * m[:, 2:]  # noqa: E731
    x = np.zeros((b, 2), np.float32)
    v = np.random.default_rng(3).standard_normal((b, 2)).astype(np.float32)
    out = velocity_langevin(x, v, half, half, 0.0, g,
                            LangevinConfig(snr=0.15, n_steps=100),
                            np.random.default_rng(4))
    means = out.mean(axis=0)
    variances = out.var(axis=0)
    assert np.all(np.abs(means) < 0.05), means
    assert np.all((variances > 0.9) & (variances < 1.1)), variances


def test_zero_score_floor_walk(caplog):
    zero = lambda t, m: np.zeros((m.shape[0], 2))  # noqa: E731
    v0 = np.random.default_rng(6).standard_normal((16, 2)).astype(np.float32)
    with caplog.at_level(logging.WARNING, logger="phasebridge.langevin"):
        out = velocity_langevin(np.zeros((16, 2)), v0, zero, zero, 0.3, 0.2,
                                LangevinConfig(n_steps=3),
                                np.random.default_rng(7))
    assert "below floor" in caplog.text
    assert np.all(np.isfinite(out))
    # sigma is clamped to the tiny floor, so the walk barely moves
    np.testing.assert_allclose(out, v0, atol=1e-4)


def test_positions_never_modified():
    x = np.random.default_rng(8).standard_normal((12, 2)).astype(np.float32)
    x_before = x.copy()
    score = lambda t, m: -m[:, 2:]  # noqa: E731
    velocity_langevin(x, np.zeros((12, 2), np.float32), score, score, 0.0, 1.0,
                      LangevinConfig(n_steps=5), np.random.default_rng(9))
    np.testing.assert_array_equal(x, x_before)


def test_deterministic_under_seed():
    score = lambda t, m: -m[:, 2:]  # noqa: E731
    v0 = np.zeros((8, 2), np.float32)
    a = velocity_langevin(np.zeros((8, 2)), v0, score, score, 0.0, 0.5,
                          LangevinConfig(n_steps=4), np.random.default_rng(10))
    b = velocity_langevin(np.zeros((8, 2)), v0, score, score, 0.0, 0.5,
                          LangevinConfig(n_steps=4), np.random.default_rng(10))
    np.testing.assert_array_equal(a, b)


def test_argument_checks():
    zero = lambda t, m: np.zeros((m.shape[0], 2))  # noqa: E731
    with pytest.raises(ValueError):
        velocity_langevin(np.zeros((4, 2)), np.zeros((3, 2)), zero, zero, 0.0,
                          0.2, LangevinConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        velocity_langevin(np.zeros((4, 2)), np.zeros((4, 2)), zero, zero, 0.0,
                          0.0, LangevinConfig(), np.random.default_rng(0))


def test_ema_flag_selects_parameter_set():
    arch = ArchConfig(state_dim=2, hidden_width=8, num_residual_blocks=1,
                      time_embed_dim=4)
    net = net_init(arch, seed=1)
    # push raw params away from the EMA shadow
    d = arch.state_dim
    tail = arch.hidden_width * d + d
    net.params[-tail:] = 0.5
    net.ema_decay = 0.5
    adamw_step(net, np.ones_like(net.params), lr=0.3)
    x = np.zeros((6, 2), np.float32)
    v0 = np.ones((6, 2), np.float32)
    raw = velocity_langevin(x, v0, net, net, 0.1, 0.2, LangevinConfig(),
                            np.random.default_rng(2), use_ema=False)
    ema = velocity_langevin(x, v0, net, net, 0.1, 0.2, LangevinConfig(),
                            np.random.default_rng(2), use_ema=True)
    assert not np.allclose(raw, ema)
