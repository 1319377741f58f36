"""Joint training of the sinogram restorer and the image refiner."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import FanBeamGeometry, as_image, fbp_adjoint, fbp_linear, forward_project
from .restorer import ImageRefiner, SinogramRestorer
from .sampling import (
    STRATEGIES,
    GroupPartition,
    MaskTrajectory,
    StepSchedule,
    build_trajectory,
    fixed_select,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class _FBP(torch.autograd.Function):
    @staticmethod
    def forward(ctx, sino, geom, filter):
        ctx.geom, ctx.filter = geom, filter
        arr = sino.detach().cpu().double().numpy()
        out = np.stack([fbp_linear(a, geom, filter) for a in arr])
        return torch.from_numpy(out).to(sino.dtype)

    @staticmethod
    def backward(ctx, grad):
        g = grad.detach().cpu().double().numpy()
        out = np.stack([fbp_adjoint(a, ctx.geom, ctx.filter) for a in g])
        return torch.from_numpy(out).to(grad.dtype), None, None


def differentiable_fbp(sino: torch.Tensor, geom: FanBeamGeometry, filter: str = "ram-lak") -> torch.Tensor:
    """Unclamped FBP of a (B, V, D) batch with gradients via the exact adjoint."""
    return _FBP.apply(sino, geom, filter)


@dataclass
class TrainConfig:
    lambda_weight: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    loss_norm: str = "l2"
    optimizer: str = "sgd"
    lr_schedule: str = "constant"
    strategy: str = "grouped-random"
    widths: tuple[int, int, int] = (16, 32, 64)
    emb_dim: int = 32
    refiner_width: int = 16
    skip: str = "identity"
    sino_scale: float | None = None
    filter: str = "ram-lak"

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.loss_norm not in ("l1", "l2"):
            raise ValueError("loss_norm must be 'l1' or 'l2'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        self.widths = tuple(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    seed: int
    rows: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "L_s", "L_i", "L"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return path


def _distance(a: torch.Tensor, b: torch.Tensor, norm: str) -> torch.Tensor:
    diff = a - b
    return diff.abs().mean() if norm == "l1" else (diff * diff).mean()


def joint_loss(restorer, refiner, xs, ys, masks, ts, geom, lam, norm="l2", filter="ram-lak"):
    """Batched ``(L_s, L_i, L)`` for images ``xs`` (B, n, n) and full sinograms ``ys``.

    ``restorer`` may be a :class:`SinogramRestorer` or a plain restoration
    operator (no gradients flow through the latter). The sinogram term is
    measured in units of the restorer's ``sino_scale``.
    """
    scale = getattr(restorer, "sino_scale", 1.0)
    dtype = restorer.dtype if isinstance(restorer, SinogramRestorer) else refiner.conv1.weight.dtype
    ys = np.asarray(ys, dtype=np.float64)
    zero_filled = np.zeros_like(ys)
    for b, mask in enumerate(masks):
        zero_filled[b, mask] = ys[b, mask]
    if isinstance(restorer, SinogramRestorer):
        inp = restorer.make_input(zero_filled, masks)
        est = restorer(inp, torch.as_tensor(np.asarray(ts, dtype=np.float64), dtype=dtype))[:, 0]
    else:
        est = torch.as_tensor(
            np.stack([restorer(zero_filled[b], masks[b], int(ts[b])) for b in range(len(masks))]) / scale,
            dtype=dtype,
        )
    target = torch.as_tensor(ys / scale, dtype=dtype)
    loss_s = _distance(est, target, norm)
    img = differentiable_fbp(est * scale, geom, filter)
    refined = refiner(img[:, None])[:, 0]
    loss_i = _distance(refined, torch.as_tensor(np.asarray(xs), dtype=dtype), norm)
    return loss_s, loss_i, loss_s + lam * loss_i


def compute_loss(model, refiner, x, geom, traj: MaskTrajectory, t: int, lam: float, norm: str = "l2", y=None):
    """Single-image joint loss; ``y`` defaults to ``forward_project(x)``."""
    if not 1 <= t <= traj.total_steps:
        raise ValueError(f"training step {t} outside [1, {traj.total_steps}]")
    if y is None:
        y = forward_project(x, geom).values
    return joint_loss(model, refiner, [x], [y], [traj.masks[t]], [t], geom, lam, norm)


def training_trajectory(strategy: str, sched: StepSchedule, part: GroupPartition, rng) -> MaskTrajectory:
    """Per-sample mask trajectory for the given sampling strategy.

    Only the grouped-random and random trajectories are nested; the fixed
    one holds the equispaced mask for every count, which is all the loss needs.
    """
    if strategy == "grouped-random":
        return build_trajectory(sched, part, rng)
    if strategy == "random":
        return MaskTrajectory.from_order(rng.permutation(sched.full_views), sched.counts, sched)
    if strategy == "fixed":
        return MaskTrajectory(tuple(fixed_select(k, sched.full_views) for k in sched.counts), sched)
    raise ValueError(f"unknown strategy {strategy!r}")


def train(dataset, geom: FanBeamGeometry, sched: StepSchedule, part: GroupPartition, cfg: TrainConfig):
    """Returns ``(restorer, refiner, history)``; deterministic for a fixed ``cfg.seed``."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    images = np.stack([as_image(x) for x in dataset])
    sinos = np.stack([forward_project(x, geom).values for x in images])
    scale = cfg.sino_scale or float(np.max(sinos))
    restorer = SinogramRestorer(sched.total_steps, cfg.widths, cfg.emb_dim, scale, cfg.skip)
    refiner = ImageRefiner(cfg.refiner_width)
    params = list(restorer.parameters()) + list(refiner.parameters())
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate)
    batches_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total_batches = cfg.epochs * batches_per_epoch
    step = 0
    history = TrainHistory(seed=cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        totals = np.zeros(3)
        for batch in np.array_split(rng.permutation(len(images)), batches_per_epoch):
            if cfg.lr_schedule == "cosine":
                for group in opt.param_groups:
                    group["lr"] = 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / total_batches))
            step += 1
            ts = rng.integers(1, sched.total_steps + 1, size=batch.size)
            masks = [training_trajectory(cfg.strategy, sched, part, rng).masks[t] for t in ts]
            losses = joint_loss(
                restorer, refiner, images[batch], sinos[batch], masks, ts, geom,
                cfg.lambda_weight, cfg.loss_norm, cfg.filter,
            )
            values = [float(v.detach()) for v in losses]
            if not all(math.isfinite(v) for v in values):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, steps {ts.tolist()}: "
                    f"L_s={values[0]} L_i={values[1]}; try a smaller learning rate"
                )
            opt.zero_grad()
            losses[2].backward()
            opt.step()
            totals += np.array(values) * batch.size
        mean = totals / len(images)
        history.rows.append({"epoch": epoch, "L_s": float(mean[0]), "L_i": float(mean[1]), "L": float(mean[2])})
        logger.info("epoch %d  L_s=%.6f  L_i=%.6f  L=%.6f", epoch, *mean)
    history.wall_time_s = time.perf_counter() - start
    return restorer.eval(), refiner.eval(), history
