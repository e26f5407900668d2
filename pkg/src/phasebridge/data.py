"""Multi-marginal snapshot datasets: builtin generators, CSV I/O, splits.

A MarginalSet is the training-side view of a population observed at N+1
times: positions only, optionally paired with ground-truth velocities (the
synthetic generators here do not produce velocities; the column layout
supports them for datasets that do).

Builtin generators (all 2-D, documented constants):

    gmm         5 marginals at t = 0..4; standard normal at both ends,
                4 modes (radius 5, diagonals) at t=1 and t=3, 8 modes
                (radius 8, every 45 degrees) at t=2; per-mode std 0.5.
    petal       3 marginals at t = 0..2; one root cluster splitting into
                2 branches and then 4 petal tips on a fan (bifurcation).
    semicircle  4 marginals at t = 0..3; one blob sliding along a
                semicircular arc.

CSV layout: one file with a leading integer marginal-index column, header
required ('.' decimals, ',' separator, UTF-8). Columns named v* pair with
the position columns as velocities when counts match; otherwise every
feature column is a position coordinate. A file-per-marginal form is
accepted too.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GMM_MODE_STD = 0.5
GMM_FOUR_MODE_RADIUS = 5.0
GMM_EIGHT_MODE_RADIUS = 8.0

PETAL_CLUSTER_STD = 0.3
PETAL_BRANCH_RADIUS = 2.5
PETAL_TIP_RADIUS = 5.0

SEMICIRCLE_RADIUS = 4.0
SEMICIRCLE_BLOB_STD = 0.3


class DataError(ValueError):
    """Malformed dataset input."""


@dataclass(frozen=True)
class Marginal:
    """One observed snapshot: time, positions, optional velocities."""

    time: float
    positions: np.ndarray
    velocities: np.ndarray | None = None
    left_out: bool = False

    def __post_init__(self) -> None:
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise DataError(f"positions must be (n, d) with n >= 1, got {p.shape}")
        object.__setattr__(self, "positions", p)
        if self.velocities is not None:
            v = np.asarray(self.velocities, dtype=np.float64)
            if v.shape != p.shape:
                raise DataError(
                    f"velocities shape {v.shape} != positions shape {p.shape}"
                )
            object.__setattr__(self, "velocities", v)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class MarginalSet:
    """Snapshots at strictly increasing times, all sharing one dimension."""

    marginals: tuple[Marginal, ...]
    name: str = "unnamed"
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if len(self.marginals) < 2:
            raise DataError("need at least 2 marginals")
        dims = {m.dim for m in self.marginals}
        if len(dims) != 1:
            raise DataError(f"marginals disagree on dimension: {sorted(dims)}")
        times = [m.time for m in self.marginals]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"times must be strictly increasing, got {times}")

    @property
    def dim(self) -> int:
        return self.marginals[0].dim

    @property
    def n_segments(self) -> int:
        return len(self.marginals) - 1

    @property
    def times(self) -> np.ndarray:
        return np.array([m.time for m in self.marginals])

    @property
    def has_velocities(self) -> bool:
        return all(m.velocities is not None for m in self.marginals)

    def visible_indices(self) -> list[int]:
        """Marginal indices the trainer may anchor on."""
        return [i for i, m in enumerate(self.marginals) if not m.left_out]

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "times": [float(m.time) for m in self.marginals],
            "counts": [m.n for m in self.marginals],
            "seed": self.seed,
        }


def _mixture(
    rng: np.random.Generator, n: int, centers: np.ndarray, std: float
) -> np.ndarray:
    which = rng.integers(0, centers.shape[0], size=n)
    return centers[which] + std * rng.standard_normal((n, centers.shape[1]))


def _ring(n_modes: int, radius: float, phase_deg: float) -> np.ndarray:
    angles = np.deg2rad(phase_deg + 360.0 * np.arange(n_modes) / n_modes)
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_gmm(n_per_marginal: int, seed: int = 0) -> MarginalSet:
    """Gaussian -> 4-mode -> 8-mode -> 4-mode -> Gaussian at t = 0..4."""
    if n_per_marginal < 1:
        raise DataError(f"n_per_marginal must be >= 1, got {n_per_marginal}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    four = _ring(4, GMM_FOUR_MODE_RADIUS, 45.0)
    eight = _ring(8, GMM_EIGHT_MODE_RADIUS, 0.0)
    marginals = [
        Marginal(0.0, rng.standard_normal((n_per_marginal, 2))),
        Marginal(1.0, _mixture(rng, n_per_marginal, four, GMM_MODE_STD)),
        Marginal(2.0, _mixture(rng, n_per_marginal, eight, GMM_MODE_STD)),
        Marginal(3.0, _mixture(rng, n_per_marginal, four, GMM_MODE_STD)),
        Marginal(4.0, rng.standard_normal((n_per_marginal, 2))),
    ]
    return MarginalSet(tuple(marginals), name="gmm", seed=seed)


def gen_petal(n_per_marginal: int, seed: int = 0) -> MarginalSet:
    """Root cluster bifurcating into 2 branches and then 4 petal tips."""
    if n_per_marginal < 1:
        raise DataError(f"n_per_marginal must be >= 1, got {n_per_marginal}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    branch_angles = np.deg2rad([45.0, 135.0])
    branches = PETAL_BRANCH_RADIUS * np.stack(
        [np.cos(branch_angles), np.sin(branch_angles)], axis=1
    )
    tip_angles = np.deg2rad([22.5, 67.5, 112.5, 157.5])
    tips = PETAL_TIP_RADIUS * np.stack(
        [np.cos(tip_angles), np.sin(tip_angles)], axis=1
    )
    marginals = [
        Marginal(0.0, PETAL_CLUSTER_STD * rng.standard_normal((n_per_marginal, 2))),
        Marginal(1.0, _mixture(rng, n_per_marginal, branches, PETAL_CLUSTER_STD)),
        Marginal(2.0, _mixture(rng, n_per_marginal, tips, PETAL_CLUSTER_STD)),
    ]
    return MarginalSet(tuple(marginals), name="petal", seed=seed)


def gen_semicircle(n_per_marginal: int, seed: int = 0) -> MarginalSet:
    """One blob travelling along a semicircular arc over 4 snapshots."""
    if n_per_marginal < 1:
        raise DataError(f"n_per_marginal must be >= 1, got {n_per_marginal}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    stop_angles = np.deg2rad([180.0, 120.0, 60.0, 0.0])
    marginals = []
    for i, ang in enumerate(stop_angles):
        center = SEMICIRCLE_RADIUS * np.array([np.cos(ang), np.sin(ang)])
        marginals.append(
            Marginal(
                float(i),
                center + SEMICIRCLE_BLOB_STD * rng.standard_normal((n_per_marginal, 2)),
            )
        )
    return MarginalSet(tuple(marginals), name="semicircle", seed=seed)


GENERATORS = {"gmm": gen_gmm, "petal": gen_petal, "semicircle": gen_semicircle}


def _parse_rows(path: Path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, rows


def _split_feature_columns(names: list[str]) -> tuple[list[int], list[int]]:
    """Indices of position vs velocity columns within the feature names."""
    vel = [i for i, h in enumerate(names) if h.lower().startswith("v")]
    pos = [i for i in range(len(names)) if i not in vel]
    if vel and len(vel) == len(pos):
        return pos, vel
    return list(range(len(names))), []


def load_csv(
    paths: str | Path | list[str | Path],
    times: list[float] | None = None,
    name: str = "csv",
) -> MarginalSet:
    """Read marginals from one indexed CSV or one file per marginal.

    A single path is read as an indexed file whose first column holds the
    integer marginal index; marginal times default to those indices. A list
    of paths is read as one marginal per file (all features, no index
    column); times default to 0..N.
    """
    if isinstance(paths, (str, Path)):
        path = Path(paths)
        header, rows = _parse_rows(path)
        arr = np.asarray(rows)
        idx = arr[:, 0]
        if np.any(idx != np.round(idx)):
            raise DataError(f"{path}: first column must hold integer marginal indices")
        feat = arr[:, 1:]
        pos_cols, vel_cols = _split_feature_columns(header[1:])
        keys = sorted(set(int(i) for i in idx))
        if times is None:
            times = [float(k) for k in keys]
        if len(times) != len(keys):
            raise DataError(
                f"{path}: {len(keys)} marginal indices but {len(times)} times given"
            )
        marginals = []
        for t, k in zip(times, keys):
            block = feat[idx == k]
            vel = block[:, vel_cols] if vel_cols else None
            marginals.append(Marginal(t, block[:, pos_cols], vel))
        return MarginalSet(tuple(marginals), name=name)

    file_list = [Path(p) for p in paths]
    if times is None:
        times = [float(i) for i in range(len(file_list))]
    if len(times) != len(file_list):
        raise DataError(f"{len(file_list)} files but {len(times)} times given")
    marginals = []
    first_header: list[str] | None = None
    first_path: Path | None = None
    for t, path in zip(times, file_list):
        header, rows = _parse_rows(path)
        if first_header is None:
            first_header, first_path = header, path
        elif header != first_header:
            raise DataError(
                f"header mismatch between {first_path} ({first_header}) "
                f"and {path} ({header})"
            )
        arr = np.asarray(rows)
        pos_cols, vel_cols = _split_feature_columns(header)
        vel = arr[:, vel_cols] if vel_cols else None
        marginals.append(Marginal(t, arr[:, pos_cols], vel))
    return MarginalSet(tuple(marginals), name=name)


def save_csv(dataset: MarginalSet, path: str | Path) -> None:
    """Write the indexed single-file CSV form (velocities included if present)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset.dim
    header = ["t"] + [f"x{j}" for j in range(d)]
    with_vel = dataset.has_velocities
    if with_vel:
        header += [f"v{j}" for j in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, marg in enumerate(dataset.marginals):
            for row_idx in range(marg.n):
                row = [i] + [float(x) for x in marg.positions[row_idx]]
                if with_vel:
                    row += [float(x) for x in marg.velocities[row_idx]]
                writer.writerow(row)


def save_csv_marginals(dataset: MarginalSet, out_dir: str | Path) -> list[Path]:
    """Write one CSV file per marginal; returns the paths in time order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = dataset.dim
    header = [f"x{j}" for j in range(d)]
    with_vel = dataset.has_velocities
    if with_vel:
        header += [f"v{j}" for j in range(d)]
    paths = []
    for i, marg in enumerate(dataset.marginals):
        path = out / f"marginal_{i}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row_idx in range(marg.n):
                row = [float(x) for x in marg.positions[row_idx]]
                if with_vel:
                    row += [float(x) for x in marg.velocities[row_idx]]
                writer.writerow(row)
        paths.append(path)
    return paths


def save_manifest(dataset: MarginalSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataset.manifest(), indent=2) + "\n", encoding="utf-8")


def split(
    dataset: MarginalSet, train_fraction: float = 0.85, seed: int = 0
) -> tuple[MarginalSet, MarginalSet]:
    """Disjoint per-marginal train/test row split, deterministic in seed."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    train_margs, test_margs = [], []
    for marg in dataset.marginals:
        n_train = int(round(train_fraction * marg.n))
        n_train = min(max(n_train, 1), marg.n - 1)
        perm = rng.permutation(marg.n)
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        for picks, out in ((tr, train_margs), (te, test_margs)):
            out.append(
                replace(
                    marg,
                    positions=marg.positions[picks],
                    velocities=None
                    if marg.velocities is None
                    else marg.velocities[picks],
                )
            )
    return (
        MarginalSet(tuple(train_margs), name=f"{dataset.name}-train", seed=dataset.seed),
        MarginalSet(tuple(test_margs), name=f"{dataset.name}-test", seed=dataset.seed),
    )


def leave_out(dataset: MarginalSet, k: int) -> MarginalSet:
    """Flag interior marginal k as hidden from training (still evaluated)."""
    n = dataset.n_segments
    if not 0 < k < n:
        raise DataError(
            f"leave-out index must be interior (0 < k < {n}), got {k}"
        )
    marginals = tuple(
        replace(m, left_out=True) if i == k else m
        for i, m in enumerate(dataset.marginals)
    )
    return MarginalSet(marginals, name=dataset.name, seed=dataset.seed)
