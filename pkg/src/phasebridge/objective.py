"""Mean-matching training objective for one policy against a frozen reference.

Each half-bridge optimization trains one direction's policy on transitions
simulated by the frozen opposite policy. For a transition (m_lo at t,
m_hi at t + dt) the residual lives in the velocity block only:

    training the forward policy on a backward-simulated cache:
        r = dt*g*(z(t, m_lo) + zhat(t+dt, m_lo))
            - (v_hi - v_lo + dt*g*zhat(t+dt, m_hi))

    training the backward policy on a forward-simulated cache:
        r = dt*g*(zhat(t+dt, m_hi) + z(t, m_hi))
            - (v_lo - v_hi + dt*g*z(t, m_lo))

and the loss is the batch mean of ||r||^2. Substituting the step rule of
the cache-producing policy collapses the label to the negated injected
noise, so at the optimum the two policies' controls sum to g times the
velocity score of the cached marginal; this is what makes (z + zhat)/g a
usable score in the velocity Langevin sampler.

The position block of the residual is dropped: positions receive neither
control nor noise, so that block is a constant with zero gradient.

Gradients flow only through the optimized policy's single evaluation; the
frozen policy enters through values alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import PhaseBatch, TrajectoryCache
from .nnet import PolicyNet, net_backprop, net_eval, policy_eval


@dataclass
class TransitionBatch:
    """Consecutive-time state pairs drawn from one trajectory cache.

    delta_t is per transition (a scalar is broadcast): caches stitched over
    several segments may carry a different step size per segment.
    """

    m_lo: PhaseBatch
    m_hi: PhaseBatch
    t: np.ndarray
    delta_t: float | np.ndarray

    def __post_init__(self) -> None:
        b = self.m_lo.batch_size
        if self.m_hi.batch_size != b:
            raise ValueError("m_lo and m_hi batch sizes differ")
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if self.t.shape != (b,):
            raise ValueError(f"t must be ({b},), got {self.t.shape}")
        dt = np.asarray(self.delta_t, dtype=np.float64)
        if dt.ndim == 0:
            dt = np.full(b, float(dt))
        if dt.shape != (b,):
            raise ValueError(f"delta_t must be scalar or ({b},), got {dt.shape}")
        if np.any(dt <= 0):
            raise ValueError("delta_t entries must be > 0")
        self.delta_t = dt

    @property
    def batch_size(self) -> int:
        return self.m_lo.batch_size


def sample_transitions(
    cache: TrajectoryCache, batch_size: int, rng: np.random.Generator
) -> TransitionBatch:
    """Draw transition pairs uniformly over (sample, step) indices."""
    n_b, n_s = cache.batch_size, cache.n_steps
    rows = rng.integers(0, n_b, size=batch_size)
    steps = rng.integers(0, n_s, size=batch_size)
    m_lo = PhaseBatch(
        cache.positions[rows, steps, :], cache.velocities[rows, steps, :]
    )
    m_hi = PhaseBatch(
        cache.positions[rows, steps + 1, :], cache.velocities[rows, steps + 1, :]
    )
    dts = np.diff(cache.times)
    return TransitionBatch(
        m_lo=m_lo, m_hi=m_hi, t=cache.times[steps], delta_t=dts[steps]
    )


def _finite_or_raise(per_sample: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        shown = ", ".join(str(i) for i in bad[:8])
        raise FloatingPointError(
            f"non-finite {what} at batch indices [{shown}]"
            + ("..." if bad.size > 8 else "")
        )


def _mm_loss(
    opt_net: PolicyNet,
    opt_t: np.ndarray,
    opt_m: np.ndarray,
    frozen_sum: np.ndarray,
    label: np.ndarray,
    scale: np.ndarray,
    alpha: float,
) -> tuple[float, np.ndarray]:
    """Shared core: residual r = dt*g*(opt(opt_t, opt_m) + frozen_sum) - label."""
    if alpha != 1.0:
        raise NotImplementedError(
            "auxiliary regularizer is reserved (alpha must be 1.0)"
        )
    z_opt = net_eval(opt_net, opt_t, opt_m, use_ema=False)
    r = scale * (z_opt + frozen_sum) - label
    per_sample = np.sum(r.astype(np.float64) ** 2, axis=1)
    _finite_or_raise(per_sample, "mean-matching residual")
    b = r.shape[0]
    loss = float(per_sample.mean())
    upstream = (2.0 / b) * scale * r
    grad = net_backprop(opt_net, opt_t, opt_m, upstream)
    return loss, grad


def mm_loss_forward(
    fwd_net: PolicyNet,
    bwd_net_frozen,
    batch: TransitionBatch,
    g: float,
    alpha: float = 1.0,
    ref_use_ema: bool = True,
) -> tuple[float, np.ndarray]:
    """Loss and flat gradient for the forward policy.

    The batch must come from a cache simulated by the frozen backward
    policy; ``ref_use_ema`` must match how that cache was produced so the
    frozen evaluations agree with the generator.
    """
    t_hi = batch.t + batch.delta_t
    zh_lo = policy_eval(bwd_net_frozen, t_hi, batch.m_lo.m, use_ema=ref_use_ema)
    zh_hi = policy_eval(bwd_net_frozen, t_hi, batch.m_hi.m, use_ema=ref_use_ema)
    scale = (batch.delta_t * g)[:, None]
    label = (batch.m_hi.v - batch.m_lo.v) + scale * zh_hi
    return _mm_loss(fwd_net, batch.t, batch.m_lo.m, zh_lo, label, scale, alpha)


def mm_loss_backward(
    bwd_net: PolicyNet,
    fwd_net_frozen,
    batch: TransitionBatch,
    g: float,
    alpha: float = 1.0,
    ref_use_ema: bool = True,
) -> tuple[float, np.ndarray]:
    """Loss and flat gradient for the backward policy (mirror of the forward case).

    The batch must come from a cache simulated by the frozen forward policy.
    """
    z_hi = policy_eval(fwd_net_frozen, batch.t, batch.m_hi.m, use_ema=ref_use_ema)
    z_lo = policy_eval(fwd_net_frozen, batch.t, batch.m_lo.m, use_ema=ref_use_ema)
    scale = (batch.delta_t * g)[:, None]
    label = (batch.m_lo.v - batch.m_hi.v) + scale * z_lo
    t_hi = batch.t + batch.delta_t
    return _mm_loss(bwd_net, t_hi, batch.m_hi.m, z_hi, label, scale, alpha)
