"""Command-line entry point: ``raydf generate|train|render|eval|ablate``.

All outputs of a run live under one directory::

    <out>/config.toml          effective configuration
    <out>/manifest.txt         sha256 of every output file
    <out>/data/                scans (RAYD) and the training store (RAYS)
    <out>/checkpoints/         classifier and distance weights (RAYW)
    <out>/logs/                per-step training logs
    <out>/render/, <out>/eval/ rasters, previews, point clouds, metrics

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import config as config_mod
from . import dataset, evaluation, nn
from .errors import ConfigError, EmptyStore, MissingClassifier, RayDFError, ShapeMismatch
from .geometry import Camera
from .scene import render_depth_scan
from .training import (
    ClassifierConfig,
    DistanceConfig,
    make_scorer,
    read_classifier,
    train_classifier,
    train_distance,
    write_classifier,
)

log = logging.getLogger("raydf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CLASSIFIER_FILE = "classifier.rayw"
DISTANCE_FILE = "distance.rayw"
RADIANCE_FILE = "radiance.rayw"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directory helpers


class Run:
    def __init__(self, cfg: config_mod.RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.data = self.root / "data"
        self.ckpt = self.root / "checkpoints"
        self.logs = self.root / "logs"

    def scan_paths(self, tag):
        return sorted(self.data.glob(f"{tag}_*.rayd"))

    def load_scans(self, tag):
        paths = self.scan_paths(tag)
        if not paths:
            raise EmptyStore(f"no {tag} scans under {self.data}; run 'generate' first")
        return [dataset.read_scan(p, scan_id=i) for i, p in enumerate(paths)]

    def sphere(self):
        return self.cfg.build_scene().bounding

    def write_config(self):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.toml").write_text(config_mod.dumps(self.cfg))

    def write_manifest(self):
        lines = []
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name not in ("manifest.txt", ".lock"):
                digest = hashlib.sha256(p.read_bytes()).hexdigest()
                lines.append(f"{digest}  {p.relative_to(self.root).as_posix()}")
        (self.root / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(run: Run, args):
    cfg = run.cfg
    try:
        scene = cfg.build_scene()
    except ValueError as e:
        raise ConfigError(f"scene does not fit the bounding sphere: {e}") from e
    traj = cfg.build_trajectory()
    run.data.mkdir(parents=True, exist_ok=True)
    counts = {"train": 0, "test": 0}
    for cam, tag in zip(traj.cameras, traj.splits):
        k = counts[tag]
        scan = render_depth_scan(scene, cam, scan_id=k, with_color=cfg.color)
        dataset.write_scan(run.data / f"{tag}_{k:03d}.rayd", scan)
        counts[tag] += 1
    train = run.load_scans("train")
    store = dataset.convert_scans(train, scene.bounding, cfg.sparsity, cfg.subseed("sparsity"))
    dataset.write_store(run.data / "train.rays", store)
    print(f"generated {counts['train']} train + {counts['test']} test scans, {len(store)} training rays")


def _train_classifier(run: Run, scans, sphere):
    cc: ClassifierConfig = run.cfg.classifier
    pairs = dataset.build_visibility_pairs(scans, sphere, cc.epsilon, cc.budget, run.cfg.subseed("pairs"))
    run.ckpt.mkdir(parents=True, exist_ok=True)
    res = train_classifier(pairs, cc, checkpoint_dir=run.ckpt)
    write_classifier(run.ckpt / CLASSIFIER_FILE, res.params)
    print(f"classifier: {len(pairs)} pairs, held-out accuracy {res.accuracy:.2f}%, F1 {res.f1:.2f}%")
    return res.params


def _load_classifier(run: Run, path=None):
    path = Path(path) if path else run.ckpt / CLASSIFIER_FILE
    if not path.exists():
        raise MissingClassifier(f"classifier checkpoint {path} not found; train stage 'classifier' first")
    return read_classifier(path)[0]


def _train_distance(run: Run, dcfg: DistanceConfig, classifier, store, tag=""):
    run.ckpt.mkdir(parents=True, exist_ok=True)
    run.logs.mkdir(parents=True, exist_ok=True)
    scorer = make_scorer(classifier) if classifier is not None else None
    sub = run.ckpt / tag if tag else run.ckpt
    sub.mkdir(parents=True, exist_ok=True)
    res = train_distance(store, scorer, dcfg, checkpoint_dir=sub,
                         log_path=run.logs / f"distance{'_' + tag if tag else ''}.log")
    nn.write_checkpoint(sub / DISTANCE_FILE, res.params)
    if res.radiance is not None:
        nn.write_checkpoint(sub / RADIANCE_FILE, res.radiance)
    return res


def _heldout(run: Run, params, test_scans, sphere):
    views = [evaluation.render_view(params, s.camera, sphere, run.cfg.eval.outlier_threshold) for s in test_scans]
    return evaluation.heldout_ade(views, test_scans, sphere)


def cmd_train(run: Run, args):
    stage = args.stage
    sphere = run.sphere()
    classifier = None
    if stage in ("classifier", "both"):
        classifier = _train_classifier(run, run.load_scans("train"), sphere)
    if stage in ("distance", "both"):
        dcfg = run.cfg.distance
        if dcfg.M > 0 and classifier is None:
            classifier = _load_classifier(run, args.checkpoint)
        store = dataset.read_store(run.data / "train.rays")
        res = _train_distance(run, dcfg, classifier if dcfg.M > 0 else None, store)
        a = _heldout(run, res.params, run.load_scans("test"), sphere)
        print(f"distance: final loss {res.epoch_losses[-1]:.6f}, held-out ADE {a:.4f} cm")


def _render_cameras(run: Run, args):
    cams = run.cfg.build_trajectory().split("test")
    H, W = run.cfg.eval.render_resolution
    out = []
    for cam in cams[: args.views]:
        # same pose and field of view at the render resolution
        s = W / cam.width
        out.append(Camera(cam.R, cam.t, cam.f * s, cam.cx * s, cam.cy * H / cam.height, W, H))
    return out


def cmd_render(run: Run, args):
    if not args.checkpoint:
        raise ConfigError("render needs --checkpoint")
    params, _ = nn.read_checkpoint(args.checkpoint)
    sphere = run.sphere()
    dest = run.root / "render"
    dest.mkdir(parents=True, exist_ok=True)
    views = []
    for i, cam in enumerate(_render_cameras(run, args)):
        view = evaluation.render_view(params, cam, sphere, run.cfg.eval.outlier_threshold)
        evaluation.write_rendered(dest / f"view_{i:03d}.rayr", view)
        evaluation.write_pgm(dest / f"view_{i:03d}.pgm", view.depth, view.valid)
        print(f"view {i}: {view.seconds:.3f} s, evaluations {view.eval_count}, "
              f"intersecting pixels {int(view.valid.sum())}")
        views.append(view)
    n = evaluation.export_pointcloud(views, dest / "points.ply")
    print(f"wrote {len(views)} views and {n} points to {dest}")


def cmd_eval(run: Run, args):
    sphere = run.sphere()
    scene = run.cfg.build_scene()
    test = run.load_scans("test")
    if args.rasters:
        paths = sorted(Path(args.rasters).glob("*.rayr"))
        if len(paths) != len(test):
            raise ShapeMismatch(f"{len(paths)} rasters for {len(test)} test scans")
        views = [evaluation.read_rendered(p) for p in paths]
        for v, s in zip(views, test):
            if v.distance.shape != s.depth.shape:
                raise ShapeMismatch(f"raster {v.distance.shape} vs scan {s.depth.shape}")
            g = dataset.ScanGeometry.build(s, sphere)
            v.points = g.p_in + np.nan_to_num(v.distance)[..., None] * g.m
        params = None
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --rasters")
        params, _ = nn.read_checkpoint(args.checkpoint)
        views = None
    classifier = pairs = None
    if (run.ckpt / CLASSIFIER_FILE).exists():
        classifier = _load_classifier(run)
        pairs = dataset.build_visibility_pairs(test, sphere, run.cfg.classifier.epsilon,
                                               rng_seed=run.cfg.subseed("eval-pairs"))
    report = evaluation.evaluate(params, test, sphere, scene, classifier, pairs,
                                 run.cfg.eval.n_points, run.cfg.subseed("eval"),
                                 run.cfg.eval.outlier_threshold, views=views)
    dest = run.root / "eval"
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "metrics.txt").write_text(report.to_text())
    print(f"ADE {report.ade:.4f} cm | CD {report.cd_mean:.4f} / {report.cd_median:.4f} (x1e-3) | "
          f"accuracy {report.accuracy:.2f}% | F1 {report.f1:.2f}%")


SWEEPS = {
    "no-classifier": ("M", [20, 0]),
    "M": ("M", [10, 20, 40]),
    "noise": ("noise_var", [0.0, 0.1, 0.5, 1.0]),
    "sparsity": ("sparsity", [0.01, 0.05, 0.1, 1.0]),
    "loss": ("loss", ["l1", "l2"]),
}


def _sweep_label(key, value):
    if key == "M" and value == 0:
        return "w/o classifier"
    return f"{key}={value}"


def run_sweep(run: Run, sweep: str, values=None):
    """Train one distance field per sweep value on shared data; returns rows
    of ``(label, ade, cd_mean, cd_median)``."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose one of {', '.join(SWEEPS)}")
    key, default_values = SWEEPS[sweep]
    values = default_values if values is None else values
    sphere = run.sphere()
    scene = run.cfg.build_scene()
    train = run.load_scans("train")
    test = run.load_scans("test")
    needs_cls = any((v if key == "M" else run.cfg.distance.M) > 0 for v in values)
    classifier = None
    if needs_cls:
        path = run.ckpt / CLASSIFIER_FILE
        classifier = _load_classifier(run) if path.exists() else _train_classifier(run, train, sphere)
    rows = []
    for value in values:
        dcfg = DistanceConfig(**run.cfg.distance.__dict__)
        if key == "sparsity":
            store = dataset.convert_scans(train, sphere, value, run.cfg.subseed("sparsity"))
        else:
            setattr(dcfg, key, value)
            store = dataset.read_store(run.data / "train.rays")
        tag = f"ablate_{sweep}_{value}"
        res = _train_distance(run, dcfg, classifier if dcfg.M > 0 else None, store, tag=tag)
        report = evaluation.evaluate(res.params, test, sphere, scene, n_points=run.cfg.eval.n_points,
                                     rng_seed=run.cfg.subseed("eval"),
                                     outlier_threshold=run.cfg.eval.outlier_threshold)
        rows.append((_sweep_label(key, value), report.ade, report.cd_mean, report.cd_median))
        print(f"  {rows[-1][0]}: ADE {report.ade:.4f} cm", flush=True)
    return rows


def format_table(sweep, rows):
    lines = [f"ablation: {sweep}", f"{'setting':<18} {'ADE (cm)':>10} {'CD mean / median (x1e-3)':>28}"]
    for label, a, m, med in rows:
        lines.append(f"{label:<18} {a:>10.4f} {m:>15.4f} / {med:<10.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(run: Run, args):
    if not args.sweep:
        raise ConfigError("ablate needs --sweep")
    rows = run_sweep(run, args.sweep)
    table = format_table(args.sweep, rows)
    (run.root / f"ablate_{args.sweep}.txt").write_text(table)
    print(table, end="")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "ablate": cmd_ablate}


def build_parser():
    p = _Parser(prog="raydf", description="Ray-surface distance fields with multi-view consistency.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML config file (defaults when omitted)")
    p.add_argument("--seed", type=int, help="global seed, overrides the config")
    p.add_argument("--out", help="output directory, overrides the config")
    p.add_argument("--stage", choices=["classifier", "distance", "both"], default="both")
    p.add_argument("--checkpoint", help="weights file (render/eval) or classifier weights (train)")
    p.add_argument("--sweep", choices=sorted(SWEEPS))
    p.add_argument("--rasters", help="eval: directory of RAYR rasters instead of a checkpoint")
    p.add_argument("--views", type=int, default=None, help="render: number of test poses")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, seed=args.seed, out=args.out)
        run = Run(cfg)
        run.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(run.root / ".lock"), timeout=0):
            run.write_config()
            COMMANDS[args.command](run, args)
            run.write_manifest()
    except Timeout:
        print(f"raydf: another process is writing to {cfg.out}", file=sys.stderr)
        return EXIT_DATA
    except RayDFError as e:
        print(f"raydf: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"raydf: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
