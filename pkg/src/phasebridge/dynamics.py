"""Euler-Maruyama simulation of the degenerate phase-space SDE.

The state is m = (x, v) with positions driven only by velocities and all
noise and control injected into velocities:

    forward,  left to right in time:   x' = x + dt * v
                                       v' = v + dt * g * z + sqrt(dt) * g * eps
    backward, right to left in time:   x_prev = x - dt * v
                                       v_prev = v + dt * g * zhat + sqrt(dt) * g * eps

with eps ~ N(0, I) drawn fresh per step. Position paths are therefore
piecewise-linear integrals of the velocity path and stay smooth in the
step-size limit even though velocities are rough.

Simulated trajectories are recorded in a TrajectoryCache whose arrays are
always ordered by ascending physical time, no matter which direction
produced them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nnet import PolicyNet, policy_eval

# Any coordinate beyond this magnitude aborts the simulation.
DIVERGENCE_BOUND = 1e6


class SimulationDivergence(RuntimeError):
    """A trajectory left the numerically trustworthy region."""


@dataclass
class PhaseBatch:
    """A batch of phase-space points: positions and velocities, (B, d) each."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x))
        self.v = np.atleast_2d(np.asarray(self.v))
        if self.x.shape != self.v.shape:
            raise ValueError(f"x shape {self.x.shape} != v shape {self.v.shape}")

    @property
    def m(self) -> np.ndarray:
        """Concatenated phase vector, (B, 2d)."""
        return np.concatenate([self.x, self.v], axis=1)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "PhaseBatch":
        return PhaseBatch(self.x.copy(), self.v.copy())


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of n_steps intervals covering [t_lo, t_hi]."""

    t_lo: float
    t_hi: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.t_hi > self.t_lo:
            raise ValueError(f"need t_hi > t_lo, got [{self.t_lo}, {self.t_hi}]")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def delta_t(self) -> float:
        return (self.t_hi - self.t_lo) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        """All n_steps + 1 knot times, ascending."""
        return np.linspace(self.t_lo, self.t_hi, self.n_steps + 1)


@dataclass
class TrajectoryCache:
    """A simulated batch of trajectories, stored in ascending time order.

    positions and velocities are (B, S+1, d) with index s holding the state
    at times[s]; this holds for both simulation directions, so a backward
    run fills the arrays from the right end down to index 0.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    direction: str
    g: float

    def __post_init__(self) -> None:
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward|backward, got {self.direction}")
        s1 = self.times.shape[0]
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have matching shapes")
        if self.positions.ndim != 3 or self.positions.shape[1] != s1:
            raise ValueError(
                f"positions must be (B, {s1}, d), got {self.positions.shape}"
            )
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly ascending")

    @property
    def batch_size(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def state_at(self, index: int) -> PhaseBatch:
        return PhaseBatch(
            self.positions[:, index, :].copy(), self.velocities[:, index, :].copy()
        )


def em_forward_step(
    x: np.ndarray,
    v: np.ndarray,
    z: np.ndarray,
    g: float,
    delta_t: float,
    noise: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One explicit step left to right; returns (x_next, v_next)."""
    x_next = x + delta_t * v
    v_next = v + delta_t * g * z + np.sqrt(delta_t) * g * noise
    return x_next, v_next


def em_backward_step(
    x: np.ndarray,
    v: np.ndarray,
    z: np.ndarray,
    g: float,
    delta_t: float,
    noise: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One explicit step right to left; returns (x_prev, v_prev).

    The position update integrates -v (time runs down) while the velocity
    picks up the backward policy's drift and fresh noise with the same
    signs as the forward update.
    """
    x_prev = x - delta_t * v
    v_prev = v + delta_t * g * z + np.sqrt(delta_t) * g * noise
    return x_prev, v_prev


def _check_finite(x: np.ndarray, v: np.ndarray, step: int, direction: str) -> None:
    for name, arr in (("x", x), ("v", v)):
        bad = ~np.isfinite(arr)
        if np.any(bad) or np.any(np.abs(arr) > DIVERGENCE_BOUND):
            raise SimulationDivergence(
                f"{direction} simulation diverged at step {step}: |{name}| exceeded "
                f"{DIVERGENCE_BOUND:g} or went non-finite"
            )


def knot_times(marginal_times, steps_per_segment: int) -> np.ndarray:
    """Stitched knot-time array over consecutive segments.

    Each segment [t_i, t_{i+1}] contributes steps_per_segment uniform
    steps, so every marginal time lands exactly on a knot even when the
    segments have different lengths.
    """
    marginal_times = np.asarray(marginal_times, dtype=np.float64)
    if marginal_times.ndim != 1 or marginal_times.shape[0] < 2:
        raise ValueError("need at least two marginal times")
    if np.any(np.diff(marginal_times) <= 0):
        raise ValueError("marginal times must be strictly increasing")
    if steps_per_segment < 1:
        raise ValueError(f"steps_per_segment must be >= 1, got {steps_per_segment}")
    pieces = [np.array([marginal_times[0]])]
    for lo, hi in zip(marginal_times[:-1], marginal_times[1:]):
        pieces.append(np.linspace(lo, hi, steps_per_segment + 1)[1:])
    return np.concatenate(pieces)


def simulate(
    net,
    direction: str,
    start: PhaseBatch,
    grid: "TimeGrid | np.ndarray",
    g: float,
    rng: np.random.Generator,
    use_ema: bool = True,
) -> TrajectoryCache:
    """Roll a policy across the grid and record every knot state.

    net is a PolicyNet or any callable (t, m) -> control batch (oracles
    use g=0 or a closed-form callable to get uncontrolled transport).
    grid is either a TimeGrid or an explicit ascending knot-time array
    (e.g. from knot_times, where step size may vary across segments).
    direction "forward" anchors ``start`` at the first knot and integrates
    up; "backward" anchors it at the last knot and integrates down. Either
    way the returned cache is in ascending time order. The policy is
    evaluated at the state each step leaves from, at that state's own time.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward|backward, got {direction}")
    if g < 0:
        raise ValueError(f"diffusion scale g must be >= 0, got {g}")
    times = grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, np.float64)
    if times.ndim != 1 or times.shape[0] < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be >= 2 strictly ascending values")
    s_total = times.shape[0] - 1
    b, d = start.batch_size, start.dim
    dtype = np.float32
    positions = np.empty((b, s_total + 1, d), dtype=dtype)
    velocities = np.empty((b, s_total + 1, d), dtype=dtype)
    x = start.x.astype(dtype).copy()
    v = start.v.astype(dtype).copy()

    if direction == "forward":
        positions[:, 0], velocities[:, 0] = x, v
        for s in range(s_total):
            dt = times[s + 1] - times[s]
            z = policy_eval(net, times[s], np.concatenate([x, v], axis=1), use_ema=use_ema)
            eps = rng.standard_normal((b, d)).astype(dtype)
            x, v = em_forward_step(x, v, z, g, dt, eps)
            _check_finite(x, v, s + 1, direction)
            positions[:, s + 1], velocities[:, s + 1] = x, v
    else:
        positions[:, s_total], velocities[:, s_total] = x, v
        for s in range(s_total, 0, -1):
            dt = times[s] - times[s - 1]
            z = policy_eval(net, times[s], np.concatenate([x, v], axis=1), use_ema=use_ema)
            eps = rng.standard_normal((b, d)).astype(dtype)
            x, v = em_backward_step(x, v, z, g, dt, eps)
            _check_finite(x, v, s - 1, direction)
            positions[:, s - 1], velocities[:, s - 1] = x, v

    return TrajectoryCache(
        times=times.astype(np.float64),
        positions=positions,
        velocities=velocities,
        direction=direction,
        g=float(g),
    )


def save_cache(cache: TrajectoryCache, path: str | Path) -> None:
    """Persist a trajectory batch as a compressed npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        times=cache.times,
        positions=cache.positions,
        velocities=cache.velocities,
        direction=np.frombuffer(cache.direction.encode(), dtype=np.uint8),
        g=np.float64(cache.g),
    )


def load_cache(path: str | Path) -> TrajectoryCache:
    with np.load(path) as z:
        return TrajectoryCache(
            times=z["times"].copy(),
            positions=z["positions"].copy(),
            velocities=z["velocities"].copy(),
            direction=bytes(z["direction"]).decode(),
            g=float(z["g"]),
        )


def save_cache_csv(cache: TrajectoryCache, path: str | Path) -> None:
    """Row-per-state CSV dump: sample_id, step, time, x_0.., v_0..."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = cache.dim
    header = (
        ["sample_id", "step", "time"]
        + [f"x_{j}" for j in range(d)]
        + [f"v_{j}" for j in range(d)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(cache.batch_size):
            for k in range(cache.n_steps + 1):
                writer.writerow(
                    [i, k, float(cache.times[k])]
                    + [float(x) for x in cache.positions[i, k]]
                    + [float(x) for x in cache.velocities[i, k]]
                )


def save_cache_binary(cache: TrajectoryCache, path: str | Path) -> None:
    """Packed little-endian float32 dump plus a JSON sidecar.

    The .bin file holds one C-order array of shape (B, steps+1, 2d) with
    positions in the leading d lanes and velocities in the trailing d; the
    sidecar <path>.json records shape, dtype, knot times, direction, g.
    """
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stacked = np.concatenate([cache.positions, cache.velocities], axis=2)
    stacked = np.ascontiguousarray(stacked, dtype="<f4")
    stacked.tofile(path)
    sidecar = {
        "shape": list(stacked.shape),
        "dtype": "<f4",
        "order": "C",
        "layout": "positions then velocities on the last axis",
        "times": [float(t) for t in cache.times],
        "direction": cache.direction,
        "g": cache.g,
    }
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, indent=2) + "\n", encoding="utf-8"
    )


def load_cache_binary(path: str | Path) -> TrajectoryCache:
    import json

    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    shape = tuple(sidecar["shape"])
    stacked = np.fromfile(path, dtype=sidecar["dtype"]).reshape(shape)
    d = shape[2] // 2
    return TrajectoryCache(
        times=np.asarray(sidecar["times"], dtype=np.float64),
        positions=stacked[:, :, :d].copy(),
        velocities=stacked[:, :, d:].copy(),
        direction=sidecar["direction"],
        g=float(sidecar["g"]),
    )


def load_cache_any(path: str | Path) -> TrajectoryCache:
    """Dispatch on extension: .npz archive or .bin with JSON sidecar."""
    path = Path(path)
    if path.suffix == ".npz":
        return load_cache(path)
    if path.suffix == ".bin":
        return load_cache_binary(path)
    raise ValueError(f"unrecognized trajectory format: {path}")
