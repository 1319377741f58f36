"""``ctsdm`` command line: phantom, project, train, reconstruct, sweep.

Option values resolve as CLI flag > ``--config`` JSON > built-in default.
A run manifest passed to ``--config`` replays that run. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime or numeric failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import FanBeamGeometry, forward_project
from .kernels import apply_thread_limit

logger = logging.getLogger("ctsdm")

GEOMETRY_KEYS = {
    "num_views": "num_views",
    "num_detectors": "num_detectors",
    "image_size": "image_size_px",
    "pixel_spacing": "pixel_spacing_mm",
    "source_detector": "source_to_detector_mm",
    "source_center": "source_to_center_mm",
}

SCALES = {
    "paper": {"geometry": FanBeamGeometry().to_dict(), "steps": 100, "min_views": 23},
    "desk": {"geometry": FanBeamGeometry.desk().to_dict(), "steps": 50, "min_views": 9},
}

COMMON_DEFAULTS = {"seed": 0, "groups": 8, "steps": None, "min_views": None, "filter": "ram-lak"}

DEFAULTS = {
    "phantom": {"scale": "paper", "kind": "shepp-logan", "size": None, "count": 1, "num_ellipses": 8},
    "project": {"scale": "paper", "input": None, "views": None, "strategy": "fixed"},
    "train": {
        "scale": "paper", "data": None, "phantoms": 16, "phantom_seed": 1,
        "epochs": 1, "batch_size": 4, "learning_rate": 1e-3, "lambda_weight": 1.0,
        "optimizer": "sgd", "lr_schedule": "constant", "strategy": "grouped-random",
        "widths": [16, 32, 64], "emb_dim": 32, "refiner_width": 16, "skip": "identity", "loss_norm": "l2",
    },
    "reconstruct": {"scale": "paper", "input": None, "checkpoint": None, "restorer": "model", "truth": None},
    "sweep": {
        "scale": "desk", "checkpoint": None, "restorer": "model", "strategies": ["grouped-random"],
        "counts": None, "num_images": 10, "image_seed": 2, "dump_images": False,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _csv(kind):
    def parse(text):
        return [kind(s) for s in text.split(",") if s.strip()]
    return parse


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config or a run manifest to replay")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--filter", choices=("ram-lak", "hann"))
    g = p.add_argument_group("geometry (defaults follow --scale)")
    g.add_argument("--scale", choices=tuple(SCALES))
    g.add_argument("--paper-scale", dest="scale", action="store_const", const="paper",
                   help="same as --scale paper")
    g.add_argument("--num-views", type=int)
    g.add_argument("--num-detectors", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--pixel-spacing", type=float)
    g.add_argument("--source-detector", type=float, help="source to detector distance, mm")
    g.add_argument("--source-center", type=float, help="source to rotation centre distance, mm")
    s = p.add_argument_group("diffusion schedule")
    s.add_argument("--steps", type=int, help="diffusion steps T")
    s.add_argument("--min-views", type=int, help="view count at step T")
    s.add_argument("--groups", type=int, help="number of view groups")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctsdm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ctsdm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write phantom images")
    _add_common(p)
    p.add_argument("--kind", choices=("shepp-logan", "random"))
    p.add_argument("--size", type=int, help="image side in pixels (default: geometry image size)")
    p.add_argument("--count", type=int)
    p.add_argument("--num-ellipses", type=int)

    p = sub.add_parser("project", help="forward-project images to sinograms")
    _add_common(p)
    p.add_argument("--input", type=Path, help="image file or directory of images")
    p.add_argument("--views", type=int, help="keep only this many views")
    p.add_argument("--strategy", choices=("fixed", "random", "grouped-random"))

    p = sub.add_parser("train", help="train the restorer and refiner")
    _add_common(p)
    p.add_argument("--data", type=Path, help="directory of training images (default: random phantoms)")
    p.add_argument("--phantoms", type=int, help="number of random phantoms when --data is absent")
    p.add_argument("--phantom-seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lambda", dest="lambda_weight", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--strategy", choices=("fixed", "random", "grouped-random"))
    p.add_argument("--widths", type=_csv(int))
    p.add_argument("--emb-dim", type=int)
    p.add_argument("--refiner-width", type=int)
    p.add_argument("--skip", choices=("identity", "interp"))
    p.add_argument("--loss-norm", choices=("l1", "l2"))

    p = sub.add_parser("reconstruct", help="reconstruct from a (sparse) sinogram")
    _add_common(p)
    p.add_argument("--input", type=Path, help="sinogram CTSD file")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--restorer", choices=("model", "oracle", "interp"))
    p.add_argument("--truth", type=Path, help="full sinogram for the oracle restorer")

    p = sub.add_parser("sweep", help="evaluate over view counts and strategies")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--restorer", choices=("model", "interp"))
    p.add_argument("--strategies", type=_csv(str))
    p.add_argument("--counts", type=_csv(int))
    p.add_argument("--num-images", type=int)
    p.add_argument("--image-seed", type=int)
    p.add_argument("--dump-images", action="store_const", const=True)
    return parser


def _load_config(path: Path | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if "command" in data and "config" in data:
        if data["command"] != command:
            raise UsageError(f"manifest is for '{data['command']}', not '{command}'")
        data = data["config"]
    return data


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags into one flat dict."""
    command = args.command
    cfg = {**COMMON_DEFAULTS, **DEFAULTS[command]}
    cfg.update(_load_config(args.config, command))
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
             if v is not None and k not in ("command", "config", "verbose", "out")}
    cfg.update(flags)
    cfg["out"] = str(args.out)
    scale = SCALES[cfg["scale"]]
    # an explicit --scale flag outranks a geometry block from the config file
    base = {} if "scale" in flags else cfg.get("geometry", {})
    geom = dict(scale["geometry"], **base)
    for flag, field in GEOMETRY_KEYS.items():
        if cfg.get(flag) is not None:
            geom[field] = cfg[flag]
    cfg["geometry"] = geom
    for flag in GEOMETRY_KEYS:
        cfg.pop(flag, None)
    return cfg


def _geometry(cfg) -> FanBeamGeometry:
    try:
        return FanBeamGeometry.from_dict(cfg["geometry"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid geometry: {exc}") from exc


def _schedule(cfg, v: int):
    from .sampling import build_schedule, partition_groups

    # unset schedule options follow the scale whose view count matches
    scale = next((sc for sc in SCALES.values() if sc["geometry"]["num_views"] == v), SCALES[cfg["scale"]])
    for key in ("steps", "min_views"):
        if cfg[key] is None:
            cfg[key] = scale[key]
    try:
        return build_schedule(v, cfg["steps"], cfg["min_views"]), partition_groups(v, cfg["groups"])
    except ValueError as exc:
        raise UsageError(f"invalid schedule: {exc}") from exc


def _version() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command: str, cfg: dict, inputs, outputs, wall: float) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": cfg.get("seed"),
        "version": _version(),
        "wall_time_s": wall,
    }
    path = Path(out) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _ctsd_files(path: Path) -> list[Path]:
    if path is None:
        raise UsageError("--input is required")
    if path.is_dir():
        files = sorted(path.glob("*.ctsd"))
    elif path.exists():
        files = [path]
    else:
        raise UsageError(f"{path} does not exist")
    if not files:
        raise UsageError(f"no .ctsd files in {path}")
    return files


def cmd_phantom(cfg) -> tuple[list, list]:
    from .phantoms import PhantomSpec, random_phantom, shepp_logan
    from .tensorio import save_image

    size = cfg["size"] if cfg["size"] is not None else cfg["geometry"]["image_size_px"]
    if size < 1 or cfg["count"] < 1:
        raise UsageError("--size and --count must be positive")
    out = Path(cfg["out"])
    paths = []
    for i in range(cfg["count"]):
        if cfg["kind"] == "shepp-logan":
            img, meta = shepp_logan(size), {"phantom": "shepp-logan"}
        else:
            seed = cfg["seed"] * 100003 + i
            spec = PhantomSpec(size_px=size, num_ellipses=cfg["num_ellipses"], seed=seed)
            img, meta = random_phantom(spec), {"phantom": "random-ellipses", "seed": seed}
        paths.append(save_image(out / f"phantom_{i:04d}.ctsd", img, meta))
    return [], paths


def cmd_project(cfg) -> tuple[list, list]:
    from .sampling import partition_groups, select
    from .tensorio import load_image, save_sinogram

    geom = _geometry(cfg)
    inputs = _ctsd_files(Path(cfg["input"]) if cfg["input"] else None)
    k = cfg["views"]
    if k is not None and not 1 <= k <= geom.num_views:
        raise UsageError(f"--views must be in [1, {geom.num_views}]")
    if cfg["groups"] < 1 or cfg["groups"] > geom.num_views:
        raise UsageError("--groups out of range")
    logger.info("geometry %s", geom.to_dict())
    part = partition_groups(geom.num_views, cfg["groups"])
    out = Path(cfg["out"])
    outputs = []
    for i, path in enumerate(inputs):
        img, _ = load_image(path)
        mask = None
        if k is not None:
            mask = select(cfg["strategy"], k, part, np.random.default_rng([cfg["seed"], i]))
        sino = forward_project(img, geom, mask=mask)
        meta = {"source": str(path), "strategy": cfg["strategy"] if k is not None else None, "seed": cfg["seed"]}
        outputs.append(save_sinogram(out / f"{path.stem}_sino.ctsd", sino, geom, meta))
    return inputs, outputs


def cmd_train(cfg) -> tuple[list, list]:
    from .phantoms import phantom_set
    from .restorer import save_checkpoint
    from .tensorio import load_image
    from .training import TrainConfig, train

    geom = _geometry(cfg)
    sched, part = _schedule(cfg, geom.num_views)
    if cfg["data"]:
        inputs = _ctsd_files(Path(cfg["data"]))
        images = [load_image(p)[0] for p in inputs]
    else:
        if cfg["phantoms"] < 1:
            raise UsageError("--phantoms must be positive")
        inputs = []
        images = phantom_set(cfg["phantoms"], geom.image_size_px, seed=cfg["phantom_seed"])
    keys = ("lambda_weight", "learning_rate", "epochs", "batch_size", "seed", "loss_norm", "optimizer",
            "lr_schedule", "strategy", "widths", "emb_dim", "refiner_width", "skip", "filter")
    try:
        tcfg = TrainConfig(**{k: cfg[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    restorer, refiner, history = train(images, geom, sched, part, tcfg)
    out = Path(cfg["out"])
    extra = {
        "geometry": geom.to_dict(),
        "schedule": sched.to_dict(seed=cfg["seed"]),
        "groups": cfg["groups"],
        "train_config": {**tcfg.to_dict(), "widths": list(tcfg.widths)},
    }
    ckpt = save_checkpoint(out / "model.ctsm", restorer, refiner, extra)
    hist = history.to_csv(out / "history.csv")
    last = history.rows[-1]
    print(f"epochs={len(history)} L_s={last['L_s']:.6g} L_i={last['L_i']:.6g} L={last['L']:.6g}")
    return inputs, [ckpt, hist]


def _load_model(cfg):
    from .restorer import load_checkpoint

    path = cfg.get("checkpoint")
    if not path:
        raise UsageError("--checkpoint is required with --restorer model")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _model_schedule(cfg, extra, v):
    """Schedule stored in the checkpoint, else the one implied by the flags."""
    from .sampling import StepSchedule, partition_groups

    if "schedule" in extra and extra["schedule"]["v"] == v:
        sched = StepSchedule.from_dict(extra["schedule"])
        cfg["steps"], cfg["min_views"] = sched.total_steps, sched.min_views
        cfg["groups"] = extra.get("groups", cfg["groups"])
        return sched, partition_groups(v, cfg["groups"])
    return _schedule(cfg, v)


def cmd_reconstruct(cfg) -> tuple[list, list]:
    from .diffusion import ReconstructionRequest, reconstruct
    from .restorer import interp_operator, oracle_restore
    from .tensorio import load_sinogram, save_image, save_sinogram

    if not cfg["input"]:
        raise UsageError("--input is required")
    inputs = _ctsd_files(Path(cfg["input"]))[:1]
    sino, geom, meta = load_sinogram(inputs[0])
    geom = geom or _geometry(cfg)
    cfg["geometry"] = geom.to_dict()
    refiner, extra = None, {}
    if cfg["restorer"] == "model":
        restorer, refiner, extra = _load_model(cfg)
        inputs.append(Path(cfg["checkpoint"]))
    elif cfg["restorer"] == "oracle":
        if not cfg["truth"]:
            raise UsageError("--restorer oracle needs --truth")
        truth, _, _ = load_sinogram(_ctsd_files(Path(cfg["truth"]))[0])
        restorer = oracle_restore(truth)
        inputs.append(Path(cfg["truth"]))
    else:
        restorer = interp_operator
    sched, part = _model_schedule(cfg, extra, geom.num_views)
    req = ReconstructionRequest(sino, geom, sched, part, seed=cfg["seed"], filter=cfg["filter"])
    res = reconstruct(req, restorer, refiner)
    out = Path(cfg["out"])
    side = {"start_step": res.start_step, "seed": cfg["seed"], "consistency_residual": res.consistency_residual,
            "measured_views": int(sino.measured.size)}
    outputs = [
        save_sinogram(out / "sinogram_estimate.ctsd", res.sinogram_estimate, geom, side),
        save_image(out / "image_raw.ctsd", res.image_raw, side),
        save_image(out / "image_refined.ctsd", res.image_refined, side),
    ]
    print(f"start_step={res.start_step} measured_views={sino.measured.size} "
          f"consistency_residual={res.consistency_residual:.3e}")
    return inputs, outputs


def sweep_counts(cfg, v: int) -> tuple[int, ...]:
    """Explicit ``counts``, else the standard list for the paper-scale or desk-scale view count."""
    from .harness import DESK_VIEW_COUNTS, PAPER_VIEW_COUNTS, scaled_view_counts

    if cfg["counts"]:
        counts = tuple(cfg["counts"])
    elif v == 488:
        counts = PAPER_VIEW_COUNTS
    elif v == 180:
        counts = DESK_VIEW_COUNTS
    else:
        counts = scaled_view_counts(v)
    if max(counts) > v or min(counts) < 1:
        raise UsageError(f"view counts must lie in [1, {v}]")
    return counts


def cmd_sweep(cfg) -> tuple[list, list]:
    from .harness import SweepConfig, run_sweep
    from .restorer import interp_operator

    geom = _geometry(cfg)
    v = geom.num_views
    counts = sweep_counts(cfg, v)
    inputs, refiner, extra = [], None, {}
    if cfg["restorer"] == "model":
        restorer, refiner, extra = _load_model(cfg)
        inputs.append(Path(cfg["checkpoint"]))
    else:
        restorer = interp_operator
    sched, part = _model_schedule(cfg, extra, v)
    try:
        scfg = SweepConfig(view_counts=counts, strategies=tuple(cfg["strategies"]), num_test_images=cfg["num_images"],
                           seed=cfg["seed"], image_seed=cfg["image_seed"], model_paths=tuple(map(str, inputs)))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    dump = out / "images" if cfg["dump_images"] else None
    report = run_sweep(scfg, geom, sched, part, restorer, refiner, dump_dir=dump)
    outputs = [report.write_csv(out / "rows.csv"), report.write_summary(out / "summary.csv")]
    for row in report.summary():
        print(f"{row['strategy']:>15} k={row['view_count']:<4d} {row['method']:<11} "
              f"PSNR {row['psnr_mean']:.2f}±{row['psnr_std']:.2f}  SSIM {row['ssim_mean']:.4f}±{row['ssim_std']:.4f}")
    return inputs, outputs


COMMANDS = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    # an outdated system TBB makes numba warn on every run; it falls back to another layer
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    apply_thread_limit()
    start = time.perf_counter()
    try:
        cfg = resolve(args)
        inputs, outputs = COMMANDS[args.command](cfg)
        write_manifest(Path(cfg["out"]), args.command, cfg, inputs, outputs, time.perf_counter() - start)
    except UsageError as exc:
        print(f"ctsdm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime and numeric failures
        logger.debug("failure", exc_info=True)
        print(f"ctsdm {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
