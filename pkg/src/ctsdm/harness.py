"""Experiment drivers: sampling-rate sweeps, strategy ablation, view disturbance."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import ReconstructionRequest, reconstruct
from .geometry import FanBeamGeometry, fbp, forward_project
from .metrics import psnr, ssim
from .phantoms import phantom_set
from .sampling import STRATEGIES, GroupPartition, StepSchedule, select
from .training import TrainConfig

logger = logging.getLogger(__name__)

PAPER_VIEW_COUNTS = (116, 100, 74, 60, 55, 40, 30, 23)
DESK_VIEW_COUNTS = (45, 37, 27, 22, 20, 15, 11, 9)

# training recipe used for the desk-scale experiments
DESK_TRAINING = dict(
    epochs=10, batch_size=8, optimizer="adam", learning_rate=1e-3, lr_schedule="cosine",
    widths=(16, 32, 64), skip="interp", seed=0,
)
DESK_TRAIN_IMAGES = 128
DESK_TRAIN_SEED = 1


def desk_train_config(strategy: str = "grouped-random", **overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_TRAINING, "strategy": strategy, **overrides})


ROW_FIELDS = ["strategy", "view_count", "image_id", "method", "psnr_db", "ssim"]
SUMMARY_FIELDS = ["strategy", "view_count", "method", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"]


@dataclass
class SweepConfig:
    view_counts: tuple[int, ...] = DESK_VIEW_COUNTS
    strategies: tuple[str, ...] = ("grouped-random",)
    num_test_images: int = 10
    seed: int = 0
    image_seed: int = 2
    method: str = "ct-sdm"
    model_paths: tuple[str, ...] = ()

    def __post_init__(self):
        self.view_counts = tuple(int(k) for k in self.view_counts)
        self.strategies = tuple(self.strategies)
        if not self.view_counts or not self.strategies:
            raise ValueError("need at least one view count and one strategy")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        if self.num_test_images < 1:
            raise ValueError("need at least one test image")


def scaled_view_counts(v: int, counts=PAPER_VIEW_COUNTS, full_views: int = 488) -> tuple[int, ...]:
    """The 488-view counts rescaled to ``v`` full views (never below 1)."""
    return tuple(max(1, int(round(k * v / full_views))) for k in counts)


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, strategy, view_count, image_id, method, image, reference):
        self.rows.append({
            "strategy": strategy,
            "view_count": int(view_count),
            "image_id": str(image_id),
            "method": method,
            "psnr_db": psnr(image, reference),
            "ssim": ssim(image, reference),
        })

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.rows.extend(other.rows)
        return self

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def values(self, metric: str = "psnr_db", **where) -> np.ndarray:
        return np.array([r[metric] for r in self.select(**where)], dtype=np.float64)

    def mean(self, metric: str = "psnr_db", **where) -> float:
        vals = self.values(metric, **where)
        if vals.size == 0:
            raise KeyError(f"no rows match {where}")
        return float(vals.mean())

    def summary(self) -> list[dict]:
        """Mean and (population) std per (strategy, view_count, method)."""
        keys = []
        for r in self.rows:
            key = (r["strategy"], r["view_count"], r["method"])
            if key not in keys:
                keys.append(key)
        out = []
        for strategy, count, method in keys:
            p = self.values("psnr_db", strategy=strategy, view_count=count, method=method)
            s = self.values("ssim", strategy=strategy, view_count=count, method=method)
            out.append({
                "strategy": strategy, "view_count": count, "method": method,
                "psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                "ssim_mean": float(s.mean()), "ssim_std": float(s.std()),
            })
        return out

    def write_csv(self, path) -> Path:
        return _write_csv(path, ROW_FIELDS, self.rows)

    def write_summary(self, path) -> Path:
        return _write_csv(path, SUMMARY_FIELDS, self.summary())

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = [
                {**r, "view_count": int(r["view_count"]), "psnr_db": float(r["psnr_db"]), "ssim": float(r["ssim"])}
                for r in csv.DictReader(fh)
            ]
        return cls(rows)


def _write_csv(path, fields, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_pgm(path, image) -> Path:
    """8-bit binary PGM of an image in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
    return path


def test_images(cfg: SweepConfig, geom: FanBeamGeometry) -> list[np.ndarray]:
    return phantom_set(cfg.num_test_images, geom.image_size_px, seed=cfg.image_seed)


def _mask(strategy: str, k: int, image_id: int, seed: int, part: GroupPartition, draw: int = 0):
    rng = np.random.default_rng([seed, k, image_id, STRATEGIES.index(strategy), draw])
    return select(strategy, k, part, rng)


def _evaluate(report, x, y, mask, geom, sched, part, restorer, refiner, recon_seed, labels, method, dump=None):
    strategy, count, image_id = labels
    ys = y.masked(mask)
    report.add(strategy, count, image_id, "fbp", fbp(ys, geom), x)
    res = reconstruct(ReconstructionRequest(ys, geom, sched, part, seed=recon_seed), restorer, refiner)
    report.add(strategy, count, image_id, f"{method}-raw", res.image_raw, x)
    report.add(strategy, count, image_id, method, res.image_refined, x)
    if dump is not None:
        stem = Path(dump) / f"{method}_{strategy}_{count}_{image_id}"
        write_pgm(f"{stem}_recon.pgm", res.image_refined)
        write_pgm(f"{stem}_error.pgm", np.abs(res.image_refined - x))
    return res


def run_sweep(cfg: SweepConfig, geom, sched: StepSchedule, part: GroupPartition, restorer, refiner,
              images=None, dump_dir=None) -> MetricReport:
    """Rows for zero-filled FBP, raw and refined reconstructions per (strategy, count, image)."""
    if max(cfg.view_counts) > geom.num_views:
        raise ValueError(f"view count above the {geom.num_views} available views")
    images = test_images(cfg, geom) if images is None else images
    sinos = [forward_project(x, geom) for x in images]
    report = MetricReport()
    for strategy in cfg.strategies:
        for k in cfg.view_counts:
            for i, (x, y) in enumerate(zip(images, sinos)):
                mask = _mask(strategy, k, i, cfg.seed, part)
                dump = dump_dir if (dump_dir is not None and i == 0) else None
                _evaluate(report, x, y, mask, geom, sched, part, restorer, refiner,
                          [cfg.seed, k, i], (strategy, k, i), cfg.method, dump)
            logger.info("%s k=%d  %s %.2f dB  fbp %.2f dB", strategy, k, cfg.method,
                        report.mean(strategy=strategy, view_count=k, method=cfg.method),
                        report.mean(strategy=strategy, view_count=k, method="fbp"))
    return report


def disturbance_eval(cfg: SweepConfig, geom, sched: StepSchedule, part: GroupPartition, restorer, refiner,
                     num_seeds: int = 10, images=None) -> MetricReport:
    """Fixed (undisturbed) masks vs grouped-random masks drawn with ``num_seeds`` seeds.

    Fixed rows reuse the ``run_sweep`` mask and reconstruction seeds, so they
    match a fixed-strategy sweep exactly. Disturbed rows are tagged
    ``"<image>-s<seed>"``.
    """
    images = test_images(cfg, geom) if images is None else images
    sinos = [forward_project(x, geom) for x in images]
    report = MetricReport()
    for k in cfg.view_counts:
        for i, (x, y) in enumerate(zip(images, sinos)):
            mask = _mask("fixed", k, i, cfg.seed, part)
            _evaluate(report, x, y, mask, geom, sched, part, restorer, refiner,
                      [cfg.seed, k, i], ("fixed", k, i), cfg.method)
            for draw in range(num_seeds):
                mask = _mask("grouped-random", k, i, cfg.seed, part, draw=draw + 1)
                _evaluate(report, x, y, mask, geom, sched, part, restorer, refiner,
                          [cfg.seed, k, i], ("grouped-random", k, f"{i}-s{draw}"), cfg.method)
    return report


def disturbance_drop(report: MetricReport, k: int, method: str) -> float:
    """Mean PSNR on fixed masks minus mean PSNR on disturbed masks at count ``k``."""
    return (report.mean(strategy="fixed", view_count=k, method=method)
            - report.mean(strategy="grouped-random", view_count=k, method=method))


def per_seed_means(report: MetricReport, k: int, method: str) -> np.ndarray:
    """Mean disturbed PSNR over images, one value per disturbance seed."""
    by_seed: dict[str, list[float]] = {}
    for r in report.select(strategy="grouped-random", view_count=k, method=method):
        by_seed.setdefault(r["image_id"].split("-s")[1], []).append(r["psnr_db"])
    return np.array([np.mean(v) for _, v in sorted(by_seed.items(), key=lambda kv: int(kv[0]))])
