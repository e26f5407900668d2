"""Deterministic, resumable random-stream management.

Every stochastic operation in a training run draws from a child generator
handed out by a :class:`SeedTree`. A child is identified by the pair
(root seed, monotone counter), so the whole run is reproducible from the
root seed alone, and a run can be resumed mid-way by restoring the counter:
children handed out after the restore are identical to the ones an
uninterrupted run would have produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SeedTree:
    """Counter-based factory of independent numpy Generators.

    Args:
        seed: Root entropy for the whole tree.
        counter: Number of children already handed out (restored on resume).
    """

    seed: int
    counter: int = field(default=0)

    def child(self) -> np.random.Generator:
        """Return the next child generator and advance the counter."""
        gen = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.counter,))
        )
        self.counter += 1
        return gen

    def peek_fixed(self, *labels: int) -> np.random.Generator:
        """A generator keyed by explicit labels, without touching the counter.

        Used for side computations (e.g. periodic evaluation during training)
        that must not perturb the main stream. The key space is disjoint from
        the counter-derived children (first spawn label offset by 2**32).
        """
        key = (2**32 + int(labels[0]),) + tuple(int(x) for x in labels[1:])
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        )

    def state(self) -> dict:
        """JSON-serializable snapshot."""
        return {"seed": int(self.seed), "counter": int(self.counter)}

    @classmethod
    def from_state(cls, state: dict) -> "SeedTree":
        return cls(seed=int(state["seed"]), counter=int(state["counter"]))
