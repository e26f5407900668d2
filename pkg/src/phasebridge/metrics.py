"""Two-sample distances and marginal-wise evaluation reports.

All metrics compare empirical point clouds with equal sample weights:

    swd        sliced Wasserstein: random unit projections, exact 1-D W_p
               per slice (unequal sizes handled via piecewise-constant
               quantile functions), aggregated as (mean W_p^p)^(1/p).
    max_swd    max over the same kind of projection set of the 1-D W_p;
               a Monte-Carlo stand-in for the max-sliced distance.
    mmd        squared maximum mean discrepancy, biased V-statistic, with
               a mixture of Gaussian kernels exp(-||x-y||^2 / (2h)) whose
               bandwidths are multiples of the median pairwise squared
               distance of the pooled sample.
    energy     energy distance 2 E||X-Y|| - E||X-X'|| - E||Y-Y'|| with
               self-pairs excluded from the within terms.
    w1_small   exact equal-weight W1 by optimal assignment; small inputs
               only, used as an oracle for the sliced approximations.

evaluate() lines up a simulated trajectory batch with a reference
MarginalSet at the reference's snapshot times and tabulates every metric
per marginal plus arithmetic averages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import MarginalSet
from .dynamics import TrajectoryCache

W1_SMALL_MAX_N = 512
DEFAULT_BANDWIDTH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class MetricConfig:
    """Evaluation knobs echoed into every report."""

    n_proj: int = 128
    p: int = 2
    seed: int = 0
    bandwidth_multipliers: tuple[float, ...] = DEFAULT_BANDWIDTH_MULTIPLIERS
    w1_subsample: int = W1_SMALL_MAX_N

    def echo(self) -> dict:
        return {
            "n_proj": self.n_proj,
            "p": self.p,
            "seed": self.seed,
            "bandwidth_multipliers": list(self.bandwidth_multipliers),
            "w1_subsample": self.w1_subsample,
        }


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("empty sample set")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def _wp_1d_pow(a: np.ndarray, b: np.ndarray, p: int) -> float:
    """Exact W_p^p between 1-D empirical laws with equal per-set weights."""
    a = np.sort(a)
    b = np.sort(b)
    n, m = a.shape[0], b.shape[0]
    if n == m:
        return float(np.mean(np.abs(a - b) ** p))
    levels = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(levels, prepend=0.0)
    mids = levels - widths / 2.0
    ia = np.minimum((mids * n).astype(int), n - 1)
    ib = np.minimum((mids * m).astype(int), m - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib]) ** p))


def _unit_projections(
    d: int, n_proj: int, seed: int, projections: np.ndarray | None
) -> np.ndarray:
    if projections is not None:
        proj = np.atleast_2d(np.asarray(projections, dtype=np.float64))
        if proj.shape[1] != d:
            raise ValueError(f"projections must be (k, {d}), got {proj.shape}")
        return proj
    if n_proj < 1:
        raise ValueError(f"n_proj must be >= 1, got {n_proj}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    proj = rng.standard_normal((n_proj, d))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    return proj


def _sliced_wp_pow(
    x: np.ndarray, y: np.ndarray, proj: np.ndarray, p: int
) -> np.ndarray:
    xs = x @ proj.T
    ys = y @ proj.T
    return np.array([_wp_1d_pow(xs[:, k], ys[:, k], p) for k in range(proj.shape[0])])


def swd(
    x: np.ndarray,
    y: np.ndarray,
    n_proj: int = 128,
    p: int = 2,
    seed: int = 0,
    projections: np.ndarray | None = None,
) -> float:
    """Sliced Wasserstein distance, (mean over slices of W_p^p)^(1/p)."""
    x, y = _check_pair(x, y)
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    proj = _unit_projections(x.shape[1], n_proj, seed, projections)
    return float(np.mean(_sliced_wp_pow(x, y, proj, p)) ** (1.0 / p))


def max_swd(
    x: np.ndarray,
    y: np.ndarray,
    n_proj: int = 128,
    p: int = 2,
    seed: int = 0,
    projections: np.ndarray | None = None,
) -> float:
    """Largest per-slice W_p over the sampled projection set."""
    x, y = _check_pair(x, y)
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    proj = _unit_projections(x.shape[1], n_proj, seed, projections)
    return float(np.max(_sliced_wp_pow(x, y, proj, p)) ** (1.0 / p))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(a**2, axis=1)[:, None]
        + np.sum(b**2, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(sq, 0.0)


def mmd(
    x: np.ndarray,
    y: np.ndarray,
    bandwidth_multipliers: tuple[float, ...] = DEFAULT_BANDWIDTH_MULTIPLIERS,
) -> float:
    """Squared MMD (biased V-statistic) under a Gaussian kernel mixture.

    Bandwidths are multiplier * median pooled pairwise squared distance;
    the result is averaged over multipliers and clamped at zero.
    """
    x, y = _check_pair(x, y)
    if not bandwidth_multipliers:
        raise ValueError("need at least one bandwidth multiplier")
    dxx = _sq_dists(x, x)
    dyy = _sq_dists(y, y)
    dxy = _sq_dists(x, y)
    pooled = np.concatenate([x, y], axis=0)
    dpool = _sq_dists(pooled, pooled)
    off_diag = dpool[np.triu_indices(dpool.shape[0], k=1)]
    median_sq = float(np.median(off_diag)) if off_diag.size else 0.0
    if median_sq <= 0.0:
        median_sq = 1.0
    total = 0.0
    for mult in bandwidth_multipliers:
        h = mult * median_sq
        total += (
            np.mean(np.exp(-dxx / (2.0 * h)))
            + np.mean(np.exp(-dyy / (2.0 * h)))
            - 2.0 * np.mean(np.exp(-dxy / (2.0 * h)))
        )
    return max(float(total / len(bandwidth_multipliers)), 0.0)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """2 E||X-Y|| - E||X-X'|| - E||Y-Y'||, plug-in V-statistics.

    The within terms average over all n^2 ordered pairs (the zero
    self-pairs included), which makes the distance exactly zero for
    identical sample sets.
    """
    x, y = _check_pair(x, y)

    def within(a: np.ndarray) -> float:
        n = a.shape[0]
        if n < 2:
            return 0.0
        dist = np.sqrt(_sq_dists(a, a))
        return float(np.sum(dist) / (n * n))

    cross = float(np.mean(np.sqrt(_sq_dists(x, y))))
    return 2.0 * cross - within(x) - within(y)


def w1_small(x: np.ndarray, y: np.ndarray) -> float:
    """Exact equal-weight W1 via optimal assignment; requires n = m <= 512."""
    x, y = _check_pair(x, y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"w1_small needs equal sizes, got {x.shape[0]} and {y.shape[0]}"
        )
    if x.shape[0] > W1_SMALL_MAX_N:
        raise ValueError(f"w1_small capped at n = {W1_SMALL_MAX_N}, got {x.shape[0]}")
    cost = np.sqrt(_sq_dists(x, y))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class MetricReport:
    """Per-marginal metric rows plus their arithmetic averages."""

    rows: list[dict] = field(default_factory=list)
    averages: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def compute_averages(self) -> None:
        keys = [
            k
            for k in ("swd", "mmd", "energy", "mswd", "w1_small", "vel_swd")
            if all(k in r and r[k] is not None for r in self.rows)
        ]
        self.averages = {
            k: float(np.mean([r[k] for r in self.rows])) for k in keys
        }

    def to_json(self) -> str:
        return json.dumps(
            {"rows": self.rows, "averages": self.averages, "config": self.config},
            indent=2,
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")


def _subsampled_w1(
    x: np.ndarray, y: np.ndarray, cap: int, rng: np.random.Generator
) -> float:
    n = min(x.shape[0], y.shape[0], cap)
    xi = rng.choice(x.shape[0], size=n, replace=False)
    yi = rng.choice(y.shape[0], size=n, replace=False)
    return w1_small(x[xi], y[yi])


def evaluate(
    traj: TrajectoryCache, reference: MarginalSet, cfg: MetricConfig | None = None
) -> MetricReport:
    """Score generated states against every reference marginal.

    The trajectory must contain a knot at each reference time. Velocity
    rows are added when the reference carries ground-truth velocities.
    """
    cfg = cfg or MetricConfig()
    report = MetricReport(config=cfg.echo())
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(cfg.seed)))
    for marg in reference.marginals:
        hits = np.flatnonzero(np.isclose(traj.times, marg.time, atol=1e-6))
        if hits.size != 1:
            raise ValueError(
                f"trajectory times do not contain reference time {marg.time}"
            )
        k = int(hits[0])
        gen_x = traj.positions[:, k, :].astype(np.float64)
        row = {
            "time": float(marg.time),
            "left_out": bool(marg.left_out),
            "n_generated": int(gen_x.shape[0]),
            "n_reference": int(marg.n),
            "swd": swd(gen_x, marg.positions, cfg.n_proj, cfg.p, cfg.seed),
            "mmd": mmd(gen_x, marg.positions, cfg.bandwidth_multipliers),
            "energy": energy_distance(gen_x, marg.positions),
            "mswd": max_swd(gen_x, marg.positions, cfg.n_proj, cfg.p, cfg.seed),
            "w1_small": _subsampled_w1(
                gen_x, marg.positions, cfg.w1_subsample, rng
            ),
        }
        if marg.velocities is not None:
            gen_v = traj.velocities[:, k, :].astype(np.float64)
            row["vel_swd"] = swd(
                gen_v, marg.velocities, cfg.n_proj, cfg.p, cfg.seed
            )
        report.rows.append(row)
    report.compute_averages()
    return report
