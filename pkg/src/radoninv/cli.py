"""Command-line pipeline: phantom -> project -> osem -> masks -> train -> reconstruct -> eval.

Every subcommand reads the same key = value run config and writes under one
run directory (``--run-dir`` or ``$RADONINV_RUN_DIR``), recording each
artifact in ``manifest.csv``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import statistics
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import artifacts
from .baseline import EmConfig, fbp_batch, osem_batch
from .core import (GeometryError, ImageGeometry, Sinogram, SinogramGeometry, TensorFormatError,
                   read_tensor, write_tensor)
from .evalmetrics import (MetricError, UndefinedFwhmError, evaluate_volume, line_profile_fwhm,
                          place_vois, write_metrics, write_profile)
from .inversion import NonFiniteGradientError, SchedulerConfig, learning_rate
from .maskgen import (DegenerateThresholdError, DivergenceError, MaskRefineConfig,
                      count_parameters, learned_masks, load_masks, projection_masks,
                      save_masks, tile_patches, train_dense_layer)
from .objective import LossConfig, ScaleCountError
from .phantom import InvalidSpecError, PhantomSpec, apply_poisson, generate_phantom, thin_counts
from .projector import ProjectorConfig, check_compatible, get_projector
from .trainer import (Dataset, TrainConfig, TrainingDivergedError, load_checkpoint, load_layer,
                      make_seed, new_layer, reconstruct, save_checkpoint, save_layer,
                      split_ids, train, write_history)

log = logging.getLogger("radoninv")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# -- run configuration -------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # geometry
    image_size: int = 64
    pixel_size: float = 1.0
    fov_radius: float | None = None
    num_angles: int = 100
    num_bins: int = 64
    bin_spacing: float = 1.0
    sampling_step: float = 0.5
    # phantoms and measurements
    n_phantoms: int = 500
    num_ellipses: tuple = (2, 6)
    intensity: tuple = (0.5, 2.0)
    axes: tuple = (2.0, 10.0)
    center_jitter: tuple = (0.0, 20.0)
    rotation: tuple = (0.0, math.pi)
    background_intensity: tuple | None = (0.5, 1.5)
    background_radius: tuple = (0.7, 0.9)
    count_density: float = 200000.0
    split: tuple = (0.8, 0.1, 0.1)
    thinning: float = 1.0
    # classical baselines
    em_iterations: int = 8
    em_subsets: int = 4
    em_post_sigma: float = 1.0
    fbp_filter: str = "ramp"
    # masks
    patch_size: int = 16
    mask_method: str = "projection"
    mask_buffer: int = 0
    refine_sigma: float = 4.0
    refine_disk: int = 8
    atlas_pairs: int = 200
    atlas_epochs: int = 150
    atlas_lr: float = 0.01
    # training
    epochs: int = 200
    samples_per_epoch: int = 512
    batch_size: int = 16
    sinogram_scale: float = 5.0
    image_scale: float = 1.0
    init: str = "zero"
    checkpoint_every: int = 0
    eta_min: float = 0.5e-5
    eta_max: float = 9.0e-5
    lr_period: int = 1000
    lr_decay: float = 0.99995
    ms_ssim_scales: int = 3
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    alpha_window: int = 100
    # evaluation
    voi_count: int = 3
    voi_radius: int = 5
    profile_samples: int = 64

    @classmethod
    def parse(cls, lines) -> RunConfig:
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for number, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {number}: expected key = value")
            if key not in known:
                raise ConfigError(f"line {number}: unknown key {key!r}")
            values[key] = _convert(key, value, getattr(defaults, key))
        try:
            cfg = dataclasses.replace(defaults, **values)
            cfg.validate()
        except (ValueError, InvalidSpecError, GeometryError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        if path is None:
            return cls()
        try:
            return cls.parse(Path(path).read_text().splitlines())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, tuple):
                text = ", ".join(repr(x) for x in v)
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        self.image_geometry()
        self.sinogram_geometry()
        self.phantom_spec()
        self.em_config()
        self.train_config()
        if self.fbp_filter not in ("ramp", "hann"):
            raise ValueError("fbp_filter must be ramp or hann")
        if self.mask_method not in ("projection", "learned"):
            raise ValueError("mask_method must be projection or learned")
        if self.patch_size < 1 or self.mask_buffer < 0:
            raise ValueError("patch_size must be >= 1 and mask_buffer >= 0")
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split needs three fractions summing to 1")
        if self.n_phantoms < 3 or self.count_density <= 0:
            raise ValueError("need n_phantoms >= 3 and a positive count_density")
        if min(self.voi_count, self.voi_radius, self.atlas_pairs, self.atlas_epochs) < 1:
            raise ValueError("VOI and atlas settings must be positive")
        if self.profile_samples < 16:
            raise ValueError("profile_samples must be >= 16")

    def image_geometry(self) -> ImageGeometry:
        return ImageGeometry.square(self.image_size, self.pixel_size, self.fov_radius)

    def sinogram_geometry(self) -> SinogramGeometry:
        return SinogramGeometry(self.num_angles, self.num_bins, self.bin_spacing)

    def projector_config(self) -> ProjectorConfig:
        return ProjectorConfig(sampling_step=self.sampling_step)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(tuple(int(v) for v in self.num_ellipses), self.intensity, self.axes,
                           self.center_jitter, self.rotation, self.background_intensity,
                           self.background_radius)

    def em_config(self) -> EmConfig:
        return EmConfig(self.em_iterations, self.em_subsets, self.em_post_sigma)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.ms_ssim_scales, self.ssim_window, self.ssim_sigma, self.k1,
                          self.k2, self.alpha_window)

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(self.eta_min, self.eta_max, self.lr_period, self.lr_decay)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.samples_per_epoch, self.batch_size,
                           self.sinogram_scale, self.image_scale, self.seed, self.thinning,
                           self.init, self.scheduler_config(), self.loss_config())


def _convert(key, text, default):
    try:
        if text.lower() in ("none", "auto") and key in ("fov_radius", "background_intensity"):
            return None
        if isinstance(default, tuple) or key == "background_intensity":
            parts = [p.strip() for p in text.split(",")]
            width = 3 if key == "split" else 2
            if len(parts) == 1 and width == 2:
                parts = parts * 2
            if len(parts) != width:
                raise ConfigError(f"{key}: expected {width} comma-separated values")
            cast = int if key == "num_ellipses" else float
            return tuple(cast(p) for p in parts)
        if key == "fov_radius":
            return float(text)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


# -- run directory -----------------------------------------------------------

class Run:
    def __init__(self, run_dir, cfg: RunConfig, command: str):
        self.dir = Path(run_dir)
        self.cfg = cfg
        self.command = command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = artifacts.Manifest(self.dir)

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, path, timed: bool = False) -> None:
        self.manifest.record(path, self.command, timed)

    def record_tree(self, directory) -> None:
        for p in sorted(Path(directory).rglob("*")):
            if p.is_file():
                self.record(p)

    def write_tensor(self, rel, values) -> Path:
        path = self.path(rel)
        write_tensor(path, values)
        self.record(path)
        return path

    def read_tensor(self, rel) -> np.ndarray:
        path = self.dir / rel
        if not path.exists():
            raise DataError(f"{path} not found; run the subcommand that produces it first")
        return read_tensor(path)[1]

    def preview(self, rel, image) -> None:
        path = self.path(rel)
        artifacts.write_pgm16(path, image)
        self.record(path)
        self.record(Path(str(path) + ".window.txt"))

    def finish(self) -> None:
        config_path = self.path("config.txt")
        config_path.write_text(self.cfg.dump())
        self.record(config_path)
        self.manifest.save()


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                          for v in row])


# -- subcommands -------------------------------------------------------------

def cmd_phantom(run: Run, args) -> None:
    cfg = run.cfg
    geom = cfg.image_geometry()
    n = args.count or cfg.n_phantoms
    spec = cfg.phantom_spec()
    phantoms = np.stack([generate_phantom(spec, geom, make_seed(cfg.seed, i, 1)).values
                         for i in range(n)])
    run.write_tensor("data/phantoms.dpt", phantoms)
    run.preview("previews/phantom_0000.pgm", phantoms[0])
    log.info("wrote %d phantoms", n)


def cmd_project(run: Run, args) -> None:
    cfg = run.cfg
    igeom, sgeom = cfg.image_geometry(), cfg.sinogram_geometry()
    phantoms = run.read_tensor("data/phantoms.dpt").astype(np.float64)
    if phantoms.shape[1:] != igeom.shape:
        raise DataError(f"phantoms are {phantoms.shape[1:]}, config says {igeom.shape}")
    check_compatible(igeom, sgeom)
    clean = get_projector(igeom, sgeom, cfg.projector_config()).forward(phantoms)
    full, inputs = [], []
    for i, sino in enumerate(clean):
        counts = apply_poisson(Sinogram(sgeom, sino), cfg.count_density,
                               make_seed(cfg.seed, i, 2))
        full.append(counts.values)
        if cfg.thinning < 1:
            counts = thin_counts(counts, cfg.thinning, make_seed(cfg.seed, i, 3))
        inputs.append(counts.values)
    n = len(full)
    split = split_ids(n, cfg.split, cfg.seed)
    data = Dataset(igeom, sgeom, phantoms.astype(np.float32),
                   np.stack(full).astype(np.float32),
                   (np.stack(inputs) / cfg.sinogram_scale).astype(np.float32),
                   np.zeros((n, *igeom.shape), np.float32), split, cfg.sinogram_scale,
                   cfg.image_scale, cfg.thinning)
    data.save(run.path("data"))
    for name in ("full_counts.dpt", "inputs.dpt", "dataset.csv", "split.csv"):
        run.record(run.dir / "data" / name)
    run.preview("previews/sinogram_0000.pgm", inputs[0])


def _load_dataset(run: Run) -> Dataset:
    d = run.dir / "data"
    for name in ("dataset.csv", "split.csv", "phantoms.dpt", "full_counts.dpt", "inputs.dpt",
                 "targets.dpt"):
        if not (d / name).exists():
            raise DataError(f"{d / name} not found; run phantom, project and osem first")
    data = Dataset.load(d)
    if data.igeom != run.cfg.image_geometry() or data.sgeom != run.cfg.sinogram_geometry():
        raise DataError("stored dataset geometry differs from the run config")
    return data


def cmd_osem(run: Run, args) -> None:
    """OSEM of the full counts (the training target) or of the network inputs."""
    cfg = run.cfg
    igeom, sgeom = cfg.image_geometry(), cfg.sinogram_geometry()
    if args.source == "full":
        counts = run.read_tensor("data/full_counts.dpt")
    else:
        counts = run.read_tensor("data/inputs.dpt").astype(np.float64) * cfg.sinogram_scale
    images = osem_batch(counts, igeom, sgeom, cfg.em_config(), cfg.projector_config())
    if args.source == "full":
        run.write_tensor("data/targets.dpt", images / cfg.image_scale)
    name = args.name or ("osem_full" if args.source == "full" else "osem_input")
    run.write_tensor(f"recon/{name}.dpt", images)
    run.preview(f"previews/{name}_0000.pgm", images[0])


def cmd_fbp(run: Run, args) -> None:
    cfg = run.cfg
    counts = run.read_tensor("data/inputs.dpt").astype(np.float64) * cfg.sinogram_scale
    images = fbp_batch(counts, cfg.image_geometry(), cfg.sinogram_geometry(), cfg.fbp_filter,
                       cfg.projector_config())
    run.write_tensor(f"recon/{args.name}.dpt", images)
    run.preview(f"previews/{args.name}_0000.pgm", images[0])


def _atlas_pairs(cfg: RunConfig):
    """Isolated small blobs: each training image lights up one neighbourhood."""
    igeom, sgeom = cfg.image_geometry(), cfg.sinogram_geometry()
    fov = igeom.fov_radius / igeom.pixel_size
    spec = PhantomSpec(num_ellipses=(1, 1), intensity=(1.0, 1.0), axes=(3.0, 4.5),
                       center_jitter=(0.0, fov - 5.0), background_intensity=None)
    proj = get_projector(igeom, sgeom, cfg.projector_config())
    pairs = []
    for i in range(cfg.atlas_pairs):
        x = generate_phantom(spec, igeom, make_seed(cfg.seed, i, 5))
        pairs.append((Sinogram(sgeom, proj.forward(x.values)), x))
    return pairs


def cmd_masks(run: Run, args) -> None:
    cfg = run.cfg
    igeom, sgeom = cfg.image_geometry(), cfg.sinogram_geometry()
    tiling = tile_patches(igeom, cfg.patch_size)
    if cfg.mask_method == "projection":
        masks = projection_masks(tiling, sgeom, cfg.mask_buffer, cfg=cfg.projector_config())
    else:
        atlas = train_dense_layer(_atlas_pairs(cfg), cfg.atlas_epochs, cfg.atlas_lr,
                                  seed=cfg.seed)
        masks = learned_masks(atlas, tiling, MaskRefineConfig(cfg.refine_sigma,
                                                              cfg.refine_disk))
        summed = np.abs(atlas.maps).sum(axis=0)
        run.preview("previews/atlas_sum.pgm", summed)
    save_masks(run.path("masks"), masks, tiling)
    run.record_tree(run.dir / "masks")
    counts = count_parameters(tiling, masks, sgeom=sgeom)
    log.info("%d masks, %d parameters (dense %d)", counts.mask_count, counts.total,
             counts.dense)


TABLE1_COLUMNS = ["network", "patch_size", "input_size", "output_size", "parameters",
                  "masks", "fov_pixels"]
CLINICAL_FOV_PIXELS = 31415


def table1_rows(igeom: ImageGeometry, sgeom: SinogramGeometry, patch_sizes,
                fov_override: int | None = None, buffer: int = 0):
    """Dense row followed by one projection-mask row per patch size."""
    own = int(igeom.fov_mask().sum())
    fov = own if fov_override is None else fov_override
    in_size = f"{sgeom.num_angles} x {sgeom.num_bins}"
    out_size = f"{igeom.height} x {igeom.width}"
    rows = [["dense", f"{igeom.height} x {igeom.width}", in_size, out_size,
             sgeom.size * fov, 1, own]]
    for p in patch_sizes:
        tiling = tile_patches(igeom, p)
        masks = projection_masks(tiling, sgeom, buffer)
        counts = count_parameters(tiling, masks, sgeom=sgeom)
        rows.append(["masked", f"{p} x {p}", in_size, out_size, counts.total,
                     counts.mask_count, own])
    return rows


def cmd_table1(run: Run, args) -> None:
    cfg = run.cfg
    if args.preset == "clinical":
        igeom = ImageGeometry.square(200)
        sgeom = SinogramGeometry(200, 168, 200 / 168)
        own = int(igeom.fov_mask().sum())
        override = CLINICAL_FOV_PIXELS if own != CLINICAL_FOV_PIXELS else None
    else:
        igeom, sgeom = cfg.image_geometry(), cfg.sinogram_geometry()
        override = None
    sizes = [int(s) for s in args.patch_sizes.split(",") if s.strip()]
    rows = table1_rows(igeom, sgeom, sizes, override, cfg.mask_buffer)
    path = run.path("table1.csv")
    _write_csv(path, TABLE1_COLUMNS, rows)
    run.record(path)
    for row in rows:
        print(",".join(str(v) for v in row))


def _layer_and_state(run: Run, data: Dataset, tcfg: TrainConfig, resume: bool):
    ckpt = run.dir / "train" / "checkpoint"
    if resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        log.info("resuming at iteration %d", state.iteration)
        return state.layer, state
    if not (run.dir / "masks" / "masks.csv").exists():
        raise DataError("no masks found; run the masks subcommand first")
    masks = load_masks(run.dir / "masks")
    tiling = tile_patches(data.igeom, run.cfg.patch_size)
    if len(masks) != len(tiling.patches) or masks[0].geometry != data.sgeom:
        raise DataError("stored masks do not match the configured tiling/geometry")
    return new_layer(tiling, masks, tcfg), None


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    data = _load_dataset(run)
    tcfg = cfg.train_config()
    layer, state = _layer_and_state(run, data, tcfg, args.resume)
    ipe = tcfg.iterations_per_epoch
    chunk = cfg.checkpoint_every * ipe if cfg.checkpoint_every > 0 else tcfg.total_iterations
    end = tcfg.total_iterations if args.stop_at is None else min(args.stop_at,
                                                                 tcfg.total_iterations)
    while True:
        current = state.iteration if state is not None else 0
        target = min(end, (current // chunk + 1) * chunk)
        state = train(layer, data, tcfg, state, stop_at=target)
        save_checkpoint(run.path("train", "checkpoint"), state)
        if state.iteration >= end:
            break
    run.record_tree(run.dir / "train" / "checkpoint")
    save_layer(run.path("train", "best"), state.best_layer())
    run.record_tree(run.dir / "train" / "best")
    history = run.path("train", "history.csv")
    write_history(history, state.history)
    run.record(history)
    summary = run.path("train", "summary.csv")
    _write_csv(summary, ["key", "value"], [["iterations", state.iteration],
                                            ["best_iteration", state.best_iteration],
                                            ["best_val_ms_ssim_loss", state.best_val]])
    run.record(summary)
    rows = [r for r in state.history if r[6] != ""]
    artifacts.write_svg_plot(run.path("train", "loss.svg"),
                             [("train ms-ssim loss", [r[0] for r in rows], [r[4] for r in rows]),
                              ("val ms-ssim loss", [r[0] for r in rows], [r[7] for r in rows])],
                             "training", "iteration", "loss")
    run.record(run.dir / "train" / "loss.svg")


def _trained_layer(run: Run, which: str = "best"):
    d = run.dir / "train" / which
    if not (d / "manifest.csv").exists():
        raise DataError(f"{d} has no trained layer; run train first")
    return load_layer(d)


def cmd_reconstruct(run: Run, args) -> None:
    cfg = run.cfg
    layer = _trained_layer(run)
    inputs = run.read_tensor("data/inputs.dpt")
    images, timing = reconstruct(layer, inputs)
    images = images.astype(np.float64) * cfg.image_scale
    run.write_tensor(f"recon/{args.name}.dpt", images)
    run.preview(f"previews/{args.name}_0000.pgm", images[0])
    path = run.path("recon", f"{args.name}_timing.csv")
    _write_csv(path, ["slices", "total_seconds", "per_slice_seconds"],
               [[len(images), timing.total_seconds, timing.per_slice_seconds]])
    run.record(path, timed=True)


def _profile_segment(ref, length: int = 24):
    r, c = np.unravel_index(int(np.argmax(ref)), ref.shape)
    half = length // 2
    c0, c1 = max(0, c - half), min(ref.shape[1] - 1, c + half)
    return (float(r), float(c0)), (float(r), float(c1))


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    igeom = cfg.image_geometry()
    loss_cfg = cfg.loss_config()
    if args.test or args.ref:
        if not (args.test and args.ref):
            raise ConfigError("--test and --ref go together")
        volumes = {"test": _read_external(args.test)}
        ref_all = _read_external(args.ref)
        ids = list(range(ref_all.shape[0]))
    else:
        ref_all = run.read_tensor("data/targets.dpt").astype(np.float64) * cfg.image_scale
        data_split = Dataset.load(run.dir / "data").split
        ids = list(data_split.test) or list(range(ref_all.shape[0]))
        volumes = {}
        for path in sorted((run.dir / "recon").glob("*.dpt")):
            volumes[path.stem] = read_tensor(path)[1].astype(np.float64)
        for name, extra in (e.split("=", 1) for e in args.extra):
            volumes[name] = _read_external(extra)
        if not volumes:
            raise DataError("no reconstructions under recon/; run osem or reconstruct first")
    for name, vol in volumes.items():
        if vol.shape != ref_all.shape:
            raise DataError(f"{name}: shape {vol.shape} differs from reference {ref_all.shape}")
    reports, fwhm_rows = [], []
    for i in ids:
        ref = ref_all[i]
        try:
            vois = place_vois(ref, igeom, cfg.voi_count, cfg.voi_radius)
        except MetricError as exc:
            log.warning("volume %d: %s", i, exc)
            continue
        p0, p1 = _profile_segment(ref)
        for name, vol in volumes.items():
            reports.append(evaluate_volume(i, name, vol[i], ref, vois, loss_cfg))
            try:
                prof = line_profile_fwhm(vol[i], p0, p1, cfg.profile_samples, igeom.pixel_size)
                fwhm = prof.fwhm
            except UndefinedFwhmError:
                prof, fwhm = None, math.nan
            fwhm_rows.append([i, name, fwhm])
            if i == ids[0] and prof is not None:
                path = run.path("eval", f"profile_{name}_{i:04d}.csv")
                write_profile(path, prof)
                run.record(path)
    if not reports:
        raise MetricError("no reference volume admits VOI placement; nothing was evaluated")
    path = run.path("eval", "metrics.csv")
    write_metrics(path, reports)
    run.record(path)
    path = run.path("eval", "fwhm.csv")
    _write_csv(path, ["volume", "method", "fwhm"], fwhm_rows)
    run.record(path)
    by_method = {}
    for rep in reports:
        by_method.setdefault(rep.method, []).append(rep)
    for method, reps in by_method.items():
        print(f"{method}: ms_ssim {np.mean([r.ms_ssim for r in reps]):.4f} "
              f"mae {np.mean([r.mae_nonzero for r in reps]):.4f} "
              f"bias {np.mean([r.bias_percent for r in reps]):+.2f}% "
              f"snr {np.nanmean([r.snr for r in reps]):.2f}")


def _read_external(path):
    try:
        values = read_tensor(path)[1].astype(np.float64)
    except FileNotFoundError:
        raise DataError(f"{path} not found") from None
    return values[None] if values.ndim == 2 else values


def cmd_lrplot(run: Run, args) -> None:
    if args.iters < 0:
        raise ConfigError("--iters must be >= 0")
    sched = run.cfg.scheduler_config()
    ks = list(range(args.iters))
    etas = [learning_rate(k, sched) for k in ks]
    path = run.path("lr_curve.csv")
    _write_csv(path, ["iteration", "eta"], zip(ks, etas))
    run.record(path)
    svg = run.path("lr_curve.svg")
    artifacts.write_svg_plot(svg, [("eta", ks, etas)], "learning-rate schedule", "iteration",
                             "eta")
    run.record(svg)


def _median_time(fn, repeats: int = 5) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cmd_bench(run: Run, args) -> None:
    cfg = run.cfg
    igeom, sgeom = cfg.image_geometry(), cfg.sinogram_geometry()
    layer = _trained_layer(run)
    inputs = run.read_tensor("data/inputs.dpt")[:args.slices]
    counts = inputs.astype(np.float64) * cfg.sinogram_scale
    n = len(inputs)
    em, pcfg = cfg.em_config(), cfg.projector_config()
    # warm the caches so only steady-state work is timed
    reconstruct(layer, inputs[:1])
    osem_batch(counts[:1], igeom, sgeom, em, pcfg)
    fbp_batch(counts[:1], igeom, sgeom, cfg.fbp_filter, pcfg)
    timings = {
        "layer": _median_time(lambda: reconstruct(layer, inputs)) / n,
        "osem": _median_time(lambda: osem_batch(counts, igeom, sgeom, em, pcfg)) / n,
        "fbp": _median_time(lambda: fbp_batch(counts, igeom, sgeom, cfg.fbp_filter, pcfg)) / n,
    }
    path = run.path("bench.csv")
    _write_csv(path, ["method", "median_seconds_per_slice", "ratio_to_layer"],
               [[k, v, v / timings["layer"]] for k, v in timings.items()])
    run.record(path, timed=True)
    for k, v in timings.items():
        print(f"{k}: {v * 1e3:.3f} ms/slice ({v / timings['layer']:.1f}x layer)")


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radoninv", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value run config (defaults if omitted)")
    parser.add_argument("--run-dir", default=os.environ.get("RADONINV_RUN_DIR", "run"),
                        help="output directory (env RADONINV_RUN_DIR)")
    parser.add_argument("--threads", type=int, default=_env_int("RADONINV_THREADS"),
                        help="cap on BLAS worker threads (env RADONINV_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate random ellipse phantoms")
    p.add_argument("--count", type=int, help="override n_phantoms")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="forward project, add Poisson noise, optional thinning")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("osem", help="OSEM reconstruction (targets from full counts)")
    p.add_argument("--source", choices=["full", "inputs"], default="full")
    p.add_argument("--name", help="output name under recon/")
    p.set_defaults(func=cmd_osem)

    p = sub.add_parser("fbp", help="filtered back projection of the network inputs")
    p.add_argument("--name", default="fbp")
    p.set_defaults(func=cmd_fbp)

    p = sub.add_parser("masks", help="per-patch sinogram masks")
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("table1", help="parameter counts versus patch size")
    p.add_argument("--preset", choices=["config", "clinical"], default="clinical")
    p.add_argument("--patch-sizes", default="60,40,30,20,10",
                   help="comma-separated patch sizes; empty for the dense row only")
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("train", help="train the inversion layer")
    p.add_argument("--resume", action="store_true", help="continue from train/checkpoint")
    p.add_argument("--stop-at", type=int, help="stop after this many total iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="apply the best trained layer to the inputs")
    p.add_argument("--name", default="net")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="metrics of recon/* against the OSEM targets")
    p.add_argument("--test", help="tensor file to evaluate instead of recon/*")
    p.add_argument("--ref", help="reference tensor file used with --test")
    p.add_argument("--extra", action="append", default=[], metavar="NAME=PATH",
                   help="additional reconstruction to include")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lrplot", help="learning-rate schedule curve")
    p.add_argument("--iters", type=int, default=10000)
    p.set_defaults(func=cmd_lrplot)

    p = sub.add_parser("bench", help="median-of-5 timing: layer vs OSEM vs FBP")
    p.add_argument("--slices", type=int, default=16)
    p.set_defaults(func=cmd_bench)
    return parser


def _env_int(name):
    value = os.environ.get(name)
    try:
        return int(value) if value else None
    except ValueError:
        return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        run = Run(args.run_dir, cfg, args.command)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                args.func(run, args)
        else:
            args.func(run, args)
        run.finish()
    except (ConfigError, InvalidSpecError, ScaleCountError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GeometryError, TensorFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, NonFiniteGradientError, DivergenceError,
            DegenerateThresholdError, MetricError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
