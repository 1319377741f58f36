"""Reverse sampling loop and the end-to-end reconstruction pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import FanBeamGeometry, Sinogram, fbp_linear
from .restorer import ImageRefiner, SinogramRestorer, refine
from .sampling import GroupPartition, MaskTrajectory, StepSchedule, trajectory_from_measured


def _operator(restorer):
    return restorer.operator() if isinstance(restorer, SinogramRestorer) else restorer


def _keep_rows(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    out[mask] = values[mask]
    return out


def tacos(restorer, y_start: Sinogram, traj: MaskTrajectory, t_start: int, trace: list | None = None) -> Sinogram:
    """Transformation-agnostic cold sampling from step ``t_start`` down to 0.

    Each step estimates the clean sinogram, removes its step-``s`` degradation
    and adds back its step-``s-1`` degradation::

        y_{s-1} = y_s - D(y0_hat, s) + D(y0_hat, s-1)

    With nested masks the rows measured at ``t_start`` pass through unchanged,
    whatever the restorer returns. If ``trace`` is a list, ``(s, residual)``
    pairs are appended, where ``residual`` is the max deviation on the
    starting rows.
    """
    if not 0 <= t_start <= traj.total_steps:
        raise ValueError(f"start step {t_start} outside [0, {traj.total_steps}]")
    if not traj.is_nested():
        raise ValueError("TACoS needs a nested mask trajectory")
    start_rows = traj.masks[t_start]
    y = np.array(y_start.values, dtype=np.float64)
    if np.any(_keep_rows(y, start_rows) != y):
        raise ValueError("start sinogram has nonzero rows outside the start mask")
    op = _operator(restorer)
    for s in range(t_start, 0, -1):
        y0_hat = np.asarray(op(y, traj.masks[s], s), dtype=np.float64)
        if y0_hat.shape != y.shape:
            raise ValueError(f"restorer returned shape {y0_hat.shape}, expected {y.shape}")
        y = y - _keep_rows(y0_hat, traj.masks[s]) + _keep_rows(y0_hat, traj.masks[s - 1])
        if trace is not None:
            trace.append((s, float(np.max(np.abs(y[start_rows] - y_start.values[start_rows])))))
    return Sinogram(y, traj.masks[0])


@dataclass
class ReconstructionRequest:
    measurements: Sinogram
    geometry: FanBeamGeometry
    schedule: StepSchedule
    partition: GroupPartition
    seed: int = 0
    filter: str = "ram-lak"

    def __post_init__(self):
        if self.measurements.values.shape != self.geometry.shape:
            raise ValueError("measurements do not match the geometry")
        if self.schedule.full_views != self.geometry.num_views:
            raise ValueError("schedule and geometry disagree on the view count")


@dataclass
class ReconstructionResult:
    sinogram_estimate: Sinogram
    image_raw: np.ndarray
    image_refined: np.ndarray
    start_step: int
    consistency_residual: float
    trajectory: MaskTrajectory = field(repr=False)
    per_step_trace: list = field(default_factory=list, repr=False)


def reconstruct(req: ReconstructionRequest, restorer, refiner: ImageRefiner | None = None) -> ReconstructionResult:
    """Pick the start step matching the measured count, run TACoS, FBP, refine."""
    meas = req.measurements
    measured = meas.measured
    t_star, traj = trajectory_from_measured(measured, req.schedule, req.partition, np.random.default_rng(req.seed))
    trace: list = []
    est = tacos(restorer, meas, traj, t_star, trace=trace)
    residual = float(np.max(np.abs(est.values[measured] - meas.values[measured])))
    full = Sinogram(est.values)
    # the refiner is trained on unclamped FBP, so it sees the same here
    linear = fbp_linear(full.values, req.geometry, req.filter)
    image_raw = np.clip(linear, 0.0, 1.0)
    image_refined = image_raw if refiner is None else refine(refiner, linear)
    return ReconstructionResult(full, image_raw, image_refined, t_star, residual, traj, trace)
