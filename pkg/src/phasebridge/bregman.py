"""Training orchestration: scheduled half-bridge projections over segments.

One training iteration sweeps a fixed schedule of projection tasks. Each
task trains one policy while the opposite, frozen policy simulates the
reference trajectories:

    the forward policy as reference  -> simulate left to right, anchored
        at the span's earliest marginal; the backward policy trains;
    the backward policy as reference -> simulate right to left, anchored
        at the span's latest marginal; the forward policy trains.

Boundary tasks cover one segment between consecutive training-visible
snapshot times and anchor their start positions in that marginal's data
rows (velocities come from ground truth when provided, otherwise from a
Langevin refresh warm-started at the most recent simulated velocities for
that time). Bridge tasks cover the whole horizon, start from the carried
full-horizon samples when available, and refresh those carried samples
from their own cache's states at the snapshot times.

The even-parity schedule runs, in order: backward boundary passes right
to left, forward boundary passes left to right, a forward full-horizon
bridge, forward boundary passes again (reusing carried velocities),
backward boundary passes, and a closing backward bridge. Odd parity
mirrors every role and direction so the two policies alternate opening
the iteration. With a single segment this degenerates to plain
alternating two-marginal half-bridges.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import MarginalSet, leave_out
from .dynamics import PhaseBatch, TrajectoryCache, knot_times, simulate
from .langevin import LangevinConfig, velocity_langevin
from .metrics import MetricConfig, MetricReport, evaluate
from .nnet import (
    ArchConfig,
    PolicyNet,
    adamw_step,
    load_checkpoint,
    net_init,
    save_checkpoint,
)
from .objective import mm_loss_backward, mm_loss_forward, sample_transitions
from .rng import SeedTree

logger = logging.getLogger(__name__)

THETA = "theta"
PHI = "phi"

STATE_FORMAT_VERSION = 1


class ScheduleError(ValueError):
    """Invalid projection schedule request."""


@dataclass(frozen=True)
class BPTask:
    """One projection: train opt_tag against a cache simulated by ref_tag.

    span holds marginal indices in simulation order: span[0] is the anchor
    the reference starts from, so a forward (theta) reference has
    span[0] < span[1] and a backward (phi) reference the opposite.
    """

    kind: str
    span: tuple[int, int]
    ref_tag: str
    opt_tag: str
    uses_carried_samples: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("boundary", "bridge"):
            raise ScheduleError(f"kind must be boundary|bridge, got {self.kind}")
        for tag in (self.ref_tag, self.opt_tag):
            if tag not in (THETA, PHI):
                raise ScheduleError(f"policy tag must be theta|phi, got {tag}")
        if self.ref_tag == self.opt_tag:
            raise ScheduleError("reference must be the opposite policy")
        if self.span[0] == self.span[1]:
            raise ScheduleError(f"span endpoints coincide: {self.span}")
        if (self.ref_tag == THETA) != (self.span[0] < self.span[1]):
            raise ScheduleError(
                f"span order {self.span} inconsistent with reference {self.ref_tag}"
            )

    @property
    def direction(self) -> str:
        return "forward" if self.span[0] < self.span[1] else "backward"

    @property
    def anchor(self) -> int:
        return self.span[0]

    @property
    def lo_hi(self) -> tuple[int, int]:
        return (min(self.span), max(self.span))


@dataclass(frozen=True)
class BISchedule:
    """The ordered projection tasks of one training iteration."""

    tasks: tuple[BPTask, ...]
    parity: str
    n_segments: int
    visible: tuple[int, ...]

    def validate(self) -> None:
        if self.parity not in ("even", "odd"):
            raise ScheduleError(f"parity must be even|odd, got {self.parity}")
        pairs = set(zip(self.visible[:-1], self.visible[1:]))
        horizon = (0, self.n_segments)
        bridges = [t for t in self.tasks if t.kind == "bridge"]
        if len(bridges) != 2 or {t.lo_hi for t in bridges} != {horizon}:
            raise ScheduleError("expected exactly two full-horizon bridge tasks")
        if {t.direction for t in bridges} != {"forward", "backward"}:
            raise ScheduleError("bridge tasks must cover both directions")
        seen: dict[tuple[int, int], set[str]] = {p: set() for p in pairs}
        for task in self.tasks:
            if task.kind != "boundary":
                continue
            if task.lo_hi not in pairs:
                raise ScheduleError(
                    f"boundary task spans non-consecutive-visible pair {task.span}"
                )
            seen[task.lo_hi].add(task.direction)
        missing = [p for p, dirs in seen.items() if dirs != {"forward", "backward"}]
        if missing:
            raise ScheduleError(
                f"segments missing a boundary direction within the iteration: "
                f"{sorted(missing)}"
            )


def build_schedule(
    n_segments: int,
    parity: str,
    visible: list[int] | tuple[int, ...] | None = None,
) -> BISchedule:
    """Projection task order for one iteration.

    visible lists the marginal indices the trainer may anchor on (default
    all of 0..n_segments); both endpoints must be visible. Boundary tasks
    run over consecutive visible pairs, bridge tasks over the full horizon.
    """
    if n_segments < 1:
        raise ScheduleError(f"need n_segments >= 1, got {n_segments}")
    if parity not in ("even", "odd"):
        raise ScheduleError(f"parity must be even|odd, got {parity}")
    if visible is None:
        visible = tuple(range(n_segments + 1))
    else:
        visible = tuple(int(i) for i in visible)
    if len(visible) < 2 or any(b <= a for a, b in zip(visible, visible[1:])):
        raise ScheduleError(f"visible indices must be >= 2 ascending, got {visible}")
    if visible[0] != 0 or visible[-1] != n_segments:
        raise ScheduleError("horizon endpoints can never be left out")

    pairs = list(zip(visible[:-1], visible[1:]))
    n = n_segments

    def phi_pass(carried: bool) -> list[BPTask]:
        return [
            BPTask("boundary", (lo, hi), THETA, PHI, carried)
            for lo, hi in reversed(pairs)
        ]

    def theta_pass(carried: bool) -> list[BPTask]:
        return [BPTask("boundary", (hi, lo), PHI, THETA, carried) for lo, hi in pairs]

    fwd_bridge = BPTask("bridge", (0, n), THETA, PHI, True)
    bwd_bridge = BPTask("bridge", (n, 0), PHI, THETA, True)

    if parity == "even":
        tasks = (
            phi_pass(False)
            + theta_pass(False)
            + [fwd_bridge]
            + theta_pass(True)
            + phi_pass(False)
            + [bwd_bridge]
        )
    else:
        tasks = (
            theta_pass(False)
            + phi_pass(False)
            + [bwd_bridge]
            + phi_pass(True)
            + theta_pass(False)
            + [fwd_bridge]
        )
    schedule = BISchedule(tuple(tasks), parity, n_segments, visible)
    schedule.validate()
    return schedule


@dataclass
class TrainState:
    """Everything that evolves across projections."""

    theta: PolicyNet
    phi: PolicyNet
    rng: SeedTree
    bi_done: int = 0
    carried: dict | None = None
    velocity_bank: dict[int, np.ndarray] = field(default_factory=dict)
    velocity_source: str = "langevin"

    def __post_init__(self) -> None:
        if self.velocity_source not in ("langevin", "ground_truth"):
            raise ValueError(
                f"velocity_source must be langevin|ground_truth, "
                f"got {self.velocity_source}"
            )


LogSink = Callable[[dict], None]


def _start_batch(
    state: TrainState, task: BPTask, data: MarginalSet, cfg: RunConfig
) -> PhaseBatch:
    """Anchor batch for the reference simulation (fixed RNG draw order)."""
    anchor = task.anchor
    marg = data.marginals[anchor]
    if marg.left_out:
        raise ScheduleError(f"task anchored at hidden marginal {anchor}")
    if task.kind == "bridge" and task.uses_carried_samples and state.carried is not None:
        return PhaseBatch(
            state.carried["positions"][:, anchor, :].copy(),
            state.carried["velocities"][:, anchor, :].copy(),
        )
    b = cfg.cache_size
    draw_rng = state.rng.child()
    rows = draw_rng.integers(0, marg.n, size=b)
    x = marg.positions[rows].astype(np.float32)
    if state.velocity_source == "ground_truth" and marg.velocities is not None:
        return PhaseBatch(x, marg.velocities[rows].astype(np.float32))
    init_rng = state.rng.child()
    bank = state.velocity_bank.get(anchor)
    if bank is not None and bank.shape[0] == b:
        v_init = bank
    else:
        v_init = init_rng.standard_normal((b, data.dim)).astype(np.float32)
    lang_rng = state.rng.child()
    v = velocity_langevin(
        x,
        v_init,
        state.theta,
        state.phi,
        float(data.times[anchor]),
        cfg.g,
        LangevinConfig(snr=cfg.snr, n_steps=cfg.langevin_steps),
        lang_rng,
        use_ema=False,
    )
    return PhaseBatch(x, v)


def opt_subset(
    state: TrainState,
    task: BPTask,
    data: MarginalSet,
    cfg: RunConfig,
    log_sink: LogSink | None = None,
    bi_index: int = 0,
    bp_index: int = 0,
) -> tuple[TrainState, TrajectoryCache]:
    """Run one projection: simulate the reference, train the opposite policy.

    Mutates and returns the state along with the reference cache. The
    velocity bank picks up the cache's velocities at every covered
    snapshot time; bridge caches also replace the carried samples.
    """
    lo, hi = task.lo_hi
    span_marginals = list(range(lo, hi + 1))
    knots = knot_times(data.times[lo : hi + 1], cfg.steps_per_segment)

    start = _start_batch(state, task, data, cfg)
    sim_rng = state.rng.child()
    ref_net = state.theta if task.ref_tag == THETA else state.phi
    opt_net = state.theta if task.opt_tag == THETA else state.phi
    cache = simulate(
        ref_net, task.direction, start, knots, cfg.g, sim_rng, use_ema=True
    )

    for j, marg_idx in enumerate(span_marginals):
        k = j * cfg.steps_per_segment
        state.velocity_bank[marg_idx] = cache.velocities[:, k, :].copy()

    if task.kind == "bridge":
        snap = np.arange(len(data.times)) * cfg.steps_per_segment
        state.carried = {
            "times": data.times.copy(),
            "positions": cache.positions[:, snap, :].copy(),
            "velocities": cache.velocities[:, snap, :].copy(),
        }

    inner_rng = state.rng.child()
    first_loss = last_loss = None
    for it in range(cfg.inner_iters):
        batch = sample_transitions(cache, cfg.batch_size, inner_rng)
        if task.opt_tag == THETA:
            loss, grad = mm_loss_forward(state.theta, state.phi, batch, cfg.g)
        else:
            loss, grad = mm_loss_backward(state.phi, state.theta, batch, cfg.g)
        adamw_step(opt_net, grad, cfg.lr, cfg.weight_decay)
        if first_loss is None:
            first_loss = loss
        last_loss = loss
        if log_sink is not None:
            log_sink(
                {
                    "bi": bi_index,
                    "bp_index": bp_index,
                    "task_kind": task.kind,
                    "span": list(task.span),
                    "policy": task.opt_tag,
                    "step": it,
                    "loss": loss,
                }
            )
    if first_loss is not None and last_loss > 1.5 * first_loss:
        logger.warning(
            "projection loss rose %.4g -> %.4g (bi=%d bp=%d span=%s)",
            first_loss,
            last_loss,
            bi_index,
            bp_index,
            task.span,
        )
    return state, cache


def init_state(cfg: RunConfig, data: MarginalSet) -> TrainState:
    """Fresh policies (zero controls) plus the run's root RNG tree."""
    arch = ArchConfig(
        state_dim=data.dim,
        hidden_width=cfg.hidden_width,
        num_residual_blocks=cfg.num_residual_blocks,
        time_embed_dim=cfg.time_embed_dim,
    )
    tree = SeedTree(cfg.seed)
    init_rng = tree.child()
    theta = net_init(arch, int(init_rng.integers(2**31)), direction_tag="forward")
    phi = net_init(arch, int(init_rng.integers(2**31)), direction_tag="backward")
    theta.ema_decay = cfg.ema_decay
    phi.ema_decay = cfg.ema_decay
    source = "ground_truth" if cfg.use_ground_truth_velocity else "langevin"
    return TrainState(theta, phi, tree, velocity_source=source)


def save_state(state: TrainState, out_dir: str | Path) -> None:
    """Checkpoint layout: theta.ckpt, phi.ckpt, state.json, state_arrays.npz."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.theta, out / "theta.ckpt")
    save_checkpoint(state.phi, out / "phi.ckpt")
    doc = {
        "format_version": STATE_FORMAT_VERSION,
        "bi_done": state.bi_done,
        "velocity_source": state.velocity_source,
        "rng": state.rng.state(),
        "has_carried": state.carried is not None,
        "bank_keys": sorted(state.velocity_bank),
    }
    (out / "state.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    arrays: dict[str, np.ndarray] = {}
    if state.carried is not None:
        arrays["carried_times"] = state.carried["times"]
        arrays["carried_positions"] = state.carried["positions"]
        arrays["carried_velocities"] = state.carried["velocities"]
    for key, bank in state.velocity_bank.items():
        arrays[f"bank_{key}"] = bank
    with open(out / "state_arrays.npz", "wb") as fh:
        np.savez(fh, **arrays)


def load_state(out_dir: str | Path) -> TrainState:
    out = Path(out_dir)
    doc = json.loads((out / "state.json").read_text(encoding="utf-8"))
    version = int(doc["format_version"])
    if version != STATE_FORMAT_VERSION:
        raise ValueError(f"unsupported state version {version}")
    carried = None
    bank: dict[int, np.ndarray] = {}
    with np.load(out / "state_arrays.npz") as z:
        if doc["has_carried"]:
            carried = {
                "times": z["carried_times"].copy(),
                "positions": z["carried_positions"].copy(),
                "velocities": z["carried_velocities"].copy(),
            }
        for key in doc["bank_keys"]:
            bank[int(key)] = z[f"bank_{key}"].copy()
    return TrainState(
        theta=load_checkpoint(out / "theta.ckpt"),
        phi=load_checkpoint(out / "phi.ckpt"),
        rng=SeedTree.from_state(doc["rng"]),
        bi_done=int(doc["bi_done"]),
        carried=carried,
        velocity_bank=bank,
        velocity_source=doc["velocity_source"],
    )


def _eval_state(state: TrainState, data: MarginalSet, cfg: RunConfig) -> MetricReport:
    """Metric report on a fixed side-channel RNG stream (never advances
    the training tree, so evaluation cadence cannot change the run)."""
    rng = state.rng.peek_fixed(1, state.bi_done)
    traj = sample(state, data, cfg, cfg.n_eval_samples, rng, use_ema=True)
    metric_cfg = MetricConfig(n_proj=cfg.metric_projections, seed=cfg.seed)
    return evaluate(traj, data, metric_cfg)


def train(
    cfg: RunConfig,
    data: MarginalSet,
    resume_from: str | Path | None = None,
    output_dir: str | Path | None = None,
) -> TrainState:
    """Run the scheduled projections for cfg.n_bi iterations.

    Writes the effective config, a line-delimited JSON loss log, optional
    periodic metric reports, and checkpoints into the output directory.
    Resuming from a checkpoint directory replays exactly the run that
    would have happened without the interruption.
    """
    cfg.validate()
    if data.n_segments < 1:
        raise ValueError("need at least 2 marginals to train")
    if cfg.leave_out_index is not None and not any(
        m.left_out for m in data.marginals
    ):
        data = leave_out(data, cfg.leave_out_index)

    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")

    if resume_from is not None:
        state = load_state(resume_from)
        log_mode = "a"
    else:
        state = init_state(cfg, data)
        log_mode = "w"

    visible = data.visible_indices()
    with (
        open(out / "train_log.jsonl", log_mode, encoding="utf-8") as log_fh,
        open(out / "metrics.jsonl", log_mode, encoding="utf-8") as metrics_fh,
    ):

        def sink(record: dict) -> None:
            log_fh.write(json.dumps(record, separators=(",", ":")) + "\n")

        for bi in range(state.bi_done, cfg.n_bi):
            parity = "even" if bi % 2 == 0 else "odd"
            schedule = build_schedule(data.n_segments, parity, visible)
            for bp_index, task in enumerate(schedule.tasks):
                state, _ = opt_subset(state, task, data, cfg, sink, bi, bp_index)
            state.bi_done = bi + 1
            if cfg.eval_every and state.bi_done % cfg.eval_every == 0:
                report = _eval_state(state, data, cfg)
                metrics_fh.write(
                    json.dumps(
                        {"bi": bi, "averages": report.averages},
                        separators=(",", ":"),
                    )
                    + "\n"
                )
                logger.info("bi=%d averages=%s", bi, report.averages)
            if cfg.checkpoint_every and state.bi_done % cfg.checkpoint_every == 0:
                save_state(state, out)
    save_state(state, out)
    return state


def sample(
    state: TrainState,
    data: MarginalSet,
    cfg: RunConfig,
    n_samples: int,
    rng: np.random.Generator,
    use_ema: bool = True,
) -> TrajectoryCache:
    """Push data positions at the first snapshot through the forward policy.

    Start velocities come from ground truth when the data provides it,
    otherwise from a Langevin refresh (warm-started at banked velocities
    when available). The result covers the whole horizon with
    steps_per_segment knots per segment.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    m0 = data.marginals[0]
    rows = rng.integers(0, m0.n, size=n_samples)
    x = m0.positions[rows].astype(np.float32)
    if m0.velocities is not None:
        v = m0.velocities[rows].astype(np.float32)
    else:
        bank = state.velocity_bank.get(0)
        if bank is not None:
            v_init = bank[rng.integers(0, bank.shape[0], size=n_samples)]
        else:
            v_init = rng.standard_normal((n_samples, data.dim)).astype(np.float32)
        v = velocity_langevin(
            x,
            v_init,
            state.theta,
            state.phi,
            float(data.times[0]),
            cfg.g,
            LangevinConfig(snr=cfg.snr, n_steps=cfg.langevin_steps),
            rng,
            use_ema=use_ema,
        )
    knots = knot_times(data.times, cfg.steps_per_segment)
    return simulate(
        state.theta, "forward", PhaseBatch(x, v), knots, cfg.g, rng, use_ema=use_ema
    )
