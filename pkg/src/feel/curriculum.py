"""Self-paced incremental instance selection over pseudo-labelled videos."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PseudoLabelSet:
    labels: np.ndarray     # N, cluster index per video
    distances: np.ndarray  # N, refined distance to the assigned center


def assign_pseudolabels(refined) -> PseudoLabelSet:
    """Nearest center under the refined distance; ties to the lowest center."""
    d = getattr(refined, "distances", refined)
    d = np.asarray(d, dtype=np.float64)
    labels = np.argmin(d, axis=0)
    return PseudoLabelSet(labels, d[labels, np.arange(d.shape[1])])


def filtered_rankings(rankings, labels) -> list:
    """Keep, in each center's re-ranked list, only the videos labelled with
    that center. The K lists partition the videos."""
    labels = np.asarray(labels)
    return [np.asarray(row)[labels[np.asarray(row)] == k] for k, row in enumerate(rankings)]


@dataclass(frozen=True)
class SelectionSchedule:
    mode: str = "constant"  # or "variable"
    I_max: int = 6
    mu: float = 1.05

    def __post_init__(self):
        if self.mode not in ("constant", "variable"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.I_max < 1:
            raise ValueError("I_max must be at least 1")
        if self.mode == "variable" and not self.mu > 1:
            raise ValueError("variable mode needs mu > 1")


def selection_rate(i: int, schedule: SelectionSchedule) -> float:
    """Fraction of each cluster selected at iteration ``i`` (1-based)."""
    if not 1 <= i <= schedule.I_max:
        raise ValueError(f"iteration {i} outside [1, {schedule.I_max}]")
    if i == schedule.I_max:
        return 1.0
    if schedule.mode == "constant":
        return i / schedule.I_max
    mu = schedule.mu
    # expm1/log1p keep precision when mu is within ~1e-6 of 1
    lg = math.log(mu)
    return math.expm1(i * lg) / math.expm1(schedule.I_max * lg)


@dataclass
class SelectionRound:
    iteration: int
    rate: float
    videos: np.ndarray   # selected video indices, cluster by cluster in rank order
    labels: np.ndarray   # pseudo label of each selected video
    per_cluster: list    # selected count per cluster


def select_instances(filtered: list, rate: float, iteration: int = 0) -> SelectionRound:
    """Top ``floor(rate * n_k)`` videos of every filtered list."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"selection rate {rate} outside [0, 1]")
    vids, labs, counts = [], [], []
    for k, lst in enumerate(filtered):
        n_k = len(lst)
        # the 1e-9 absorbs products like 0.7 * 10 = 6.999...
        take = n_k if rate == 1.0 else int(math.floor(rate * n_k + 1e-9))
        vids.append(np.asarray(lst[:take], dtype=np.int64))
        labs.append(np.full(take, k, dtype=np.int64))
        counts.append(take)
    return SelectionRound(iteration, rate, np.concatenate(vids), np.concatenate(labs), counts)


def epochs_for_iteration(E_max: int, selected: int, N: int) -> int:
    """Epoch budget proportional to the selected share, at least one."""
    if N <= 0 or not 0 <= selected <= N:
        raise ValueError(f"invalid counts selected={selected}, N={N}")
    return max(1, -(-E_max * selected // N))
