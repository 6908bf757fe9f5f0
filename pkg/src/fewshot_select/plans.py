"""Fold plans and example-order (permutation) plans."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._seeding import rng_for
from .task import TrainSet

EXHAUSTIVE = "exhaustive"
BALANCED = "balanced"


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: Mapping[str, int]
    seed: int
    order: tuple[str, ...] = ()

    @property
    def folds(self) -> tuple[tuple[str, ...], ...]:
        ids = self.order or tuple(self.assignment)
        return tuple(tuple(i for i in ids if self.assignment[i] == f) for f in range(self.k))

    @property
    def is_loo(self) -> bool:
        return self.k == len(self.assignment)


def make_folds(train: TrainSet, k: int, seed: int) -> FoldPlan:
    """Uniformly random partition into ``k`` folds whose sizes differ by at most one."""
    n = len(train)
    if not 2 <= k <= n:
        raise ValueError(f"fold count must satisfy 2 <= k <= N={n}, got {k}")
    shuffled = rng_for("folds", seed, k).permutation(n)
    assignment = {train.examples[int(j)].id: pos % k for pos, j in enumerate(shuffled)}
    return FoldPlan(k, assignment, seed, train.ids)


@dataclass(frozen=True, eq=False)
class PermutationPlan:
    n: int
    orderings: np.ndarray
    mode: str
    seed: int

    def __len__(self) -> int:
        return len(self.orderings)

    def position_counts(self) -> np.ndarray:
        """counts[i, pos] = number of orderings with unit ``i`` at ``pos``."""
        counts = np.zeros((self.n, self.n), dtype=int)
        for pos in range(self.n):
            np.add.at(counts[:, pos], self.orderings[:, pos], 1)
        return counts

    def to_json(self) -> dict:
        return {"n": self.n, "mode": self.mode, "seed": self.seed, "orderings": self.orderings.tolist()}

    @classmethod
    def from_json(cls, data: Mapping) -> "PermutationPlan":
        orderings = np.asarray(data["orderings"], dtype=np.int64).reshape(-1, data["n"])
        return cls(int(data["n"]), orderings, data["mode"], int(data["seed"]))


def plan_permutations(n: int, budget: int, seed: int) -> PermutationPlan:
    """All ``n!`` orders when they fit in ``budget``, else a position-balanced sample.

    The balanced sample is built from ``budget / n`` blocks; each block holds
    the ``n`` cyclic rotations of a fresh random permutation (rows shuffled),
    so every unit sits in every position exactly ``budget / n`` times.  Blocks
    from an already-used rotation class are redrawn, which keeps orderings
    distinct.
    """
    if n < 1:
        raise ValueError("need at least one unit to order")
    if budget < 1:
        raise ValueError("permutation budget must be positive")
    if math.factorial(n) <= budget:
        orderings = np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
        return PermutationPlan(n, orderings, EXHAUSTIVE, seed)
    if budget < n or budget % n:
        raise ValueError(f"balanced sampling needs budget divisible by n={n}, got {budget}")
    rng = rng_for("permutations", seed, n, budget)
    blocks = []
    seen: set[tuple[int, ...]] = set()
    while len(blocks) < budget // n:
        perm = rng.permutation(n)
        zero = int(np.flatnonzero(perm == 0)[0])
        key = tuple(np.roll(perm, -zero).tolist())
        if key in seen:
            continue
        seen.add(key)
        block = np.stack([np.roll(perm, -r) for r in range(n)])
        blocks.append(block[rng.permutation(n)])
    return PermutationPlan(n, np.concatenate(blocks).astype(np.int64), BALANCED, seed)
