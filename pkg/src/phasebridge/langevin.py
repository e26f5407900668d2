"""Langevin refresh of velocities at a marginal time, positions held fixed.

At a marginal constraint only positions are observed; velocities are a
model quantity. The two trained policies supply a velocity score

    s(t, x, v) = (z(t, m) + zhat(t, m)) / g

and a few unadjusted Langevin steps move a warm-started velocity batch
toward the model's conditional velocity distribution at that time:

    eps   ~ N(0, I)
    sigma = 2 * snr^2 * g^2 * mean_i||eps_i||^2 / mean_i||(z+zhat)_i||^2
    v    <- v + sigma * s + sqrt(2 * sigma) * eps

with both norms averaged over the batch before squaring, the convention
used by predictor-corrector score samplers. When the score norm falls
below the floor the step degenerates to a tiny pure-noise walk (sigma set
to the floor itself) instead of dividing by almost-zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nnet import policy_eval

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LangevinConfig:
    """Step-size and iteration knobs for the velocity sampler.

    snr is the signal-to-noise ratio controlling the step size (sigma
    scales as snr^2); n_steps = 0 makes the sampler a no-op.
    """

    snr: float = 0.15
    n_steps: int = 1
    score_norm_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.snr <= 0:
            raise ValueError(f"snr must be > 0, got {self.snr}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.score_norm_floor <= 0:
            raise ValueError(
                f"score_norm_floor must be > 0, got {self.score_norm_floor}"
            )


def velocity_langevin(
    x: np.ndarray,
    v_init: np.ndarray,
    fwd_net,
    bwd_net,
    t: float,
    g: float,
    cfg: LangevinConfig,
    rng: np.random.Generator,
    use_ema: bool = False,
) -> np.ndarray:
    """Run cfg.n_steps Langevin updates on v at fixed positions x.

    Returns the refreshed velocities; x is never modified. Deterministic
    given the rng state. Either net may be a callable (t, m) -> control
    batch standing in for a trained policy.
    """
    x = np.asarray(x)
    v = np.asarray(v_init).astype(np.float32).copy()
    if x.shape != v.shape or x.ndim != 2:
        raise ValueError(
            f"x and v_init must share a (B, d) shape, got {x.shape} and {v.shape}"
        )
    if g <= 0:
        raise ValueError(f"diffusion scale g must be > 0, got {g}")
    b = x.shape[0]
    for _ in range(cfg.n_steps):
        m = np.concatenate([x, v], axis=1)
        combined = policy_eval(fwd_net, t, m, use_ema=use_ema) + policy_eval(
            bwd_net, t, m, use_ema=use_ema
        )
        score = combined / g
        eps = rng.standard_normal((b, x.shape[1])).astype(np.float32)
        noise_norm = float(np.linalg.norm(eps, axis=1).mean())
        score_scale_sq = float(np.linalg.norm(combined, axis=1).mean()) ** 2
        if score_scale_sq <= cfg.score_norm_floor:
            logger.warning(
                "velocity score norm %.3e below floor at t=%.4f; taking a "
                "pure-noise step",
                score_scale_sq,
                t,
            )
            sigma = cfg.score_norm_floor
        else:
            sigma = 2.0 * cfg.snr**2 * g**2 * noise_norm**2 / score_scale_sq
        v = v + sigma * score + np.sqrt(2.0 * sigma) * eps
    return v
