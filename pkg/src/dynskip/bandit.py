"""k-armed-bandit redundancy estimation over skippable modules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import sigmoid
from .network import SkipMask


class SearchAbort(RuntimeError):
    """A non-finite loss reached the reward computation."""


@dataclass
class RedundancyState:
    """Per-module redundancy degrees and their history."""

    r: np.ndarray
    step: int = 0
    trajectory: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros(cls, n: int) -> RedundancyState:
        return cls(np.zeros(n, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.r.size

    def write_trajectory(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"module_{i}" for i in range(self.n)])
            for step, r in self.trajectory:
                w.writerow([step] + [repr(float(v)) for v in r])


def read_trajectory(path: str | Path) -> list[tuple[int, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(row[0]), np.array([float(v) for v in row[1:]])) for row in rows[1:]]


@dataclass
class CandidateBatch:
    masks: list[SkipMask]
    rewards: np.ndarray | None = None

    @property
    def c(self) -> int:
        return len(self.masks)


def sample_scores(state: RedundancyState, rng: np.random.Generator) -> np.ndarray:
    """One score per module, ``s_i ~ U(0, sigmoid(r_i))``."""
    return rng.random(state.n) * sigmoid(state.r)


def select_skip_set(scores: Sequence[float], m: int) -> SkipMask:
    """The ``m`` highest-scoring modules; equal scores go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if not 0 <= m <= n:
        raise ValueError(f"cannot skip m={m} of n={n} modules")
    order = np.lexsort((np.arange(n), -scores))
    return SkipMask(order[:m].tolist(), n)


def sample_mask(state: RedundancyState, m: int, rng: np.random.Generator) -> SkipMask:
    return select_skip_set(sample_scores(state, rng), m)


def reward(loss: float) -> float:
    """``exp(-loss)``; NaN or infinite losses abort the search."""
    loss = float(loss)
    if not math.isfinite(loss):
        raise SearchAbort(f"non-finite validation loss {loss!r}")
    return math.exp(-loss)


def update_redundancy(state: RedundancyState, batch: CandidateBatch) -> None:
    """Credit each candidate's mean-centred reward to every module it skipped."""
    if batch.rewards is None or len(batch.rewards) != batch.c:
        raise ValueError("candidate rewards must be filled before updating")
    v = np.asarray(batch.rewards, dtype=np.float64)
    centred = v - v.mean()
    delta = np.zeros_like(state.r)
    for mask, adv in zip(batch.masks, centred):
        if mask.n != state.n:
            raise ValueError(f"candidate mask is for n={mask.n}, state has n={state.n}")
        for i in mask.sorted():
            delta[i] += adv
    state.r = state.r + delta
    state.step += 1
    state.trajectory.append((state.step, state.r.copy()))


def final_skip_set(state: RedundancyState, m: int) -> SkipMask:
    return select_skip_set(state.r, m)


def random_mask(n: int, m: int, rng: np.random.Generator) -> SkipMask:
    """Uniform m-subset, ignoring redundancy (warmup and the random baseline)."""
    return SkipMask(rng.choice(n, size=m, replace=False).tolist(), n)
