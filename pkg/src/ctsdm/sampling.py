"""View-sampling schedules, view selection strategies and the degradation operator.

View indices are 0-based throughout. A mask is a sorted int64 array of
measured view indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Sinogram, check_mask

STRATEGIES = ("grouped-random", "random", "fixed")


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass(frozen=True)
class StepSchedule:
    full_views: int
    total_steps: int
    min_views: int
    counts: tuple[int, ...]

    def rate(self, t: int) -> float:
        return self.counts[t] / self.full_views

    def to_dict(self, seed: int | None = None) -> dict:
        return {
            "v": self.full_views,
            "T": self.total_steps,
            "k_min": self.min_views,
            "counts": list(self.counts),
            "seed": seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StepSchedule":
        sched = build_schedule(data["v"], data["T"], data["k_min"])
        if "counts" in data and list(data["counts"]) != list(sched.counts):
            raise ValueError("stored counts disagree with the schedule formula")
        return sched


def exponential_counts(v: int, T: int, k_min: int) -> np.ndarray:
    """Unrepaired counts, rounded half up."""
    t = np.arange(T + 1)
    return np.floor(v * (k_min / v) ** (t / T) + 0.5).astype(np.int64)


def build_schedule(v: int, T: int, k_min: int) -> StepSchedule:
    """Exponential view-count schedule ``k_t = round(v * (k_min / v) ** (t / T))``.

    Ties produced by rounding are repaired so the counts drop by at least one
    view per step while still ending at ``k_min``.
    """
    if T < 1:
        raise ValueError("need at least one diffusion step")
    if not 1 <= k_min < v:
        raise ValueError("need 1 <= k_min < v")
    if T > v - k_min:
        raise ValueError(f"T={T} steps cannot strictly decrease from {v} to {k_min} views")
    t = np.arange(T + 1)
    counts = np.maximum(exponential_counts(v, T, k_min), k_min + (T - t))
    for i in range(1, T + 1):
        counts[i] = min(counts[i], counts[i - 1] - 1)
    counts[0], counts[T] = v, k_min
    return StepSchedule(v, T, k_min, tuple(int(c) for c in counts))


@dataclass(frozen=True)
class GroupPartition:
    full_views: int
    num_groups: int
    groups: tuple[np.ndarray, ...] = field(repr=False)


def partition_groups(v: int, c: int) -> GroupPartition:
    """Split views into ``c`` interleaved combs: group ``s`` holds ``s, s+c, s+2c, ...``."""
    if not 1 <= c <= v:
        raise ValueError(f"group count must be in [1, {v}], got {c}")
    return GroupPartition(v, c, tuple(np.arange(s, v, c) for s in range(c)))


def _check_count(k: int, v: int) -> None:
    if not 1 <= k <= v:
        raise ValueError(f"view count must be in [1, {v}], got {k}")


def grouped_random_order(part: GroupPartition, rng) -> np.ndarray:
    """All views, group by group, each group shuffled independently."""
    rng = _rng(rng)
    return np.concatenate([rng.permutation(g) for g in part.groups])


def grouped_random_select(k: int, part: GroupPartition, rng) -> np.ndarray:
    """Whole groups in order, then a uniform draw from the next group."""
    _check_count(k, part.full_views)
    rng = _rng(rng)
    picked = []
    taken = 0
    for g in part.groups:
        if taken + g.size <= k:
            picked.append(g)
            taken += g.size
        else:
            picked.append(rng.choice(g, size=k - taken, replace=False))
            break
    return np.sort(np.concatenate(picked))


def fixed_select(k: int, v: int) -> np.ndarray:
    """Equispaced views ``round(j * v / k)``."""
    _check_count(k, v)
    return np.floor(np.arange(k) * v / k + 0.5).astype(np.int64)


def random_select(k: int, v: int, rng) -> np.ndarray:
    _check_count(k, v)
    return np.sort(_rng(rng).choice(v, size=k, replace=False))


def select(strategy: str, k: int, part: GroupPartition, rng) -> np.ndarray:
    """Dispatch to one of :data:`STRATEGIES`."""
    if strategy == "grouped-random":
        return grouped_random_select(k, part, rng)
    if strategy == "random":
        return random_select(k, part.full_views, rng)
    if strategy == "fixed":
        return fixed_select(k, part.full_views)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


@dataclass(frozen=True)
class MaskTrajectory:
    """Masks ``M_0 .. M_T``; ``masks[t]`` is the measured set at step ``t``."""

    masks: tuple[np.ndarray, ...] = field(repr=False)
    schedule: StepSchedule | None = None

    @classmethod
    def from_order(cls, order, counts, schedule=None) -> "MaskTrajectory":
        order = np.asarray(order, dtype=np.int64)
        return cls(tuple(np.sort(order[:k]) for k in counts), schedule)

    @property
    def total_steps(self) -> int:
        return len(self.masks) - 1

    @property
    def counts(self) -> list[int]:
        return [m.size for m in self.masks]

    def is_nested(self) -> bool:
        return all(np.isin(self.masks[t], self.masks[t - 1]).all() for t in range(1, len(self.masks)))


def build_trajectory(sched: StepSchedule, part: GroupPartition, rng) -> MaskTrajectory:
    """Nested masks: ``M_t`` is the first ``k_t`` views of one grouped-random order."""
    if part.full_views != sched.full_views:
        raise ValueError("schedule and partition disagree on the view count")
    return MaskTrajectory.from_order(grouped_random_order(part, rng), sched.counts, sched)


def nearest_step(sched: StepSchedule, k: int) -> int:
    """Step whose count is closest to ``k``; ties go to the larger step."""
    gaps = np.abs(np.asarray(sched.counts) - k)
    return int(np.flatnonzero(gaps == gaps.min())[-1])


def trajectory_from_measured(measured, sched: StepSchedule, part: GroupPartition, rng) -> tuple[int, MaskTrajectory]:
    """Start step and a nested trajectory passing exactly through ``measured``.

    Steps before the start grow the measured set with unmeasured views in
    grouped-random order; steps after it take grouped-random prefixes of the
    measured set.
    """
    measured = check_mask(measured, sched.full_views)
    m = measured.size
    t_star = nearest_step(sched, m)
    if t_star == 0 and m < sched.full_views:
        # step 0 must be the full view set, or nothing gets filled in
        t_star = 1
    order = grouped_random_order(part, rng)
    is_measured = np.zeros(sched.full_views, dtype=bool)
    is_measured[measured] = True
    order = np.concatenate([order[is_measured[order]], order[~is_measured[order]]])
    counts = [
        max(k, m) if t < t_star else (m if t == t_star else min(k, m))
        for t, k in enumerate(sched.counts)
    ]
    return t_star, MaskTrajectory.from_order(order, counts, sched)


def degrade(y: Sinogram | np.ndarray, traj: MaskTrajectory, t: int) -> Sinogram:
    """Zero every row outside ``M_t``."""
    if not 0 <= t <= traj.total_steps:
        raise ValueError(f"step {t} outside [0, {traj.total_steps}]")
    if not isinstance(y, Sinogram):
        y = Sinogram(y)
    return y.masked(traj.masks[t])
