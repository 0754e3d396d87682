"""Dataset synthesis, the training loop, checkpoints and timed reconstruction."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import TARGET_RECIPE, EmConfig, osem_batch
from .core import (GeometryError, ImageGeometry, Sinogram, SinogramGeometry, make_rng,
                   read_tensor, write_tensor)
from .inversion import AdamState, InversionLayer, SchedulerConfig, adam_step, learning_rate
from .maskgen import load_masks, save_masks, tile_patches
from .objective import AlphaBalancer, LossConfig, balanced_loss, mae_loss, ms_ssim_loss
from .phantom import PhantomSpec, apply_poisson, generate_phantom, thin_counts
from .projector import DEFAULT_CONFIG, ProjectorConfig, get_projector

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["iteration", "epoch", "eta", "mae", "ms_ssim", "alpha", "val_mae",
                   "val_ms_ssim"]


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration, eta):
        super().__init__(f"non-finite loss at iteration {iteration} (eta={eta:.3e})")
        self.iteration = iteration
        self.eta = eta


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    samples_per_epoch: int = 512
    batch_size: int = 16
    sinogram_scale: float = 5.0
    image_scale: float = 1.0
    seed: int = 0
    thinning: float = 1.0
    init: str = "zero"
    scheduler: SchedulerConfig = SchedulerConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if min(self.epochs, self.samples_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, samples_per_epoch and batch_size must be >= 1")
        if self.sinogram_scale <= 0 or self.image_scale <= 0:
            raise ValueError("scale divisors must be positive")
        if not 0 < self.thinning <= 1:
            raise ValueError("thinning fraction must lie in (0, 1]")
        if self.init not in ("zero", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def iterations_per_epoch(self) -> int:
        return math.ceil(self.samples_per_epoch / self.batch_size)

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("splits must be pairwise disjoint")


def split_ids(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1):
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    order = make_rng(seed, 0xD5).permutation(n).tolist()
    return DatasetSplit(tuple(sorted(order[:n_train])),
                        tuple(sorted(order[n_train:n_train + n_val])),
                        tuple(sorted(order[n_train + n_val:])))


@dataclass
class Dataset:
    """Scaled network inputs/targets plus the raw material they came from.

    ``inputs`` are (possibly thinned) counts divided by ``sinogram_scale``;
    ``targets`` are OSEM reconstructions of the full-count data divided by
    ``image_scale``.
    """

    igeom: ImageGeometry
    sgeom: SinogramGeometry
    phantoms: np.ndarray
    full_counts: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    split: DatasetSplit
    sinogram_scale: float
    image_scale: float
    thinning: float = 1.0

    def __len__(self):
        return self.inputs.shape[0]

    def raw_inputs(self) -> np.ndarray:
        return self.inputs.astype(np.float64) * self.sinogram_scale

    def raw_targets(self) -> np.ndarray:
        return self.targets.astype(np.float64) * self.image_scale

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "phantoms.dpt", self.phantoms)
        write_tensor(d / "full_counts.dpt", self.full_counts)
        write_tensor(d / "inputs.dpt", self.inputs)
        write_tensor(d / "targets.dpt", self.targets)
        with open(d / "dataset.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["key", "value"])
            for key, value in [("image_size", self.igeom.width),
                               ("pixel_size", repr(self.igeom.pixel_size)),
                               ("fov_radius", repr(self.igeom.fov_radius)),
                               ("num_angles", self.sgeom.num_angles),
                               ("num_bins", self.sgeom.num_bins),
                               ("bin_spacing", repr(self.sgeom.bin_spacing)),
                               ("sinogram_scale", repr(self.sinogram_scale)),
                               ("image_scale", repr(self.image_scale)),
                               ("thinning", repr(self.thinning))]:
                out.writerow([key, value])
        with open(d / "split.csv", "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["phantom_id", "split"])
            for name in ("train", "validation", "test"):
                for i in getattr(self.split, name):
                    out.writerow([i, name])

    @classmethod
    def load(cls, directory) -> Dataset:
        d = Path(directory)
        with open(d / "dataset.csv", newline="") as fh:
            meta = {row["key"]: row["value"] for row in csv.DictReader(fh)}
        igeom = ImageGeometry.square(int(meta["image_size"]), float(meta["pixel_size"]),
                                     float(meta["fov_radius"]))
        sgeom = SinogramGeometry(int(meta["num_angles"]), int(meta["num_bins"]),
                                 float(meta["bin_spacing"]))
        groups = {"train": [], "validation": [], "test": []}
        with open(d / "split.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                groups[row["split"]].append(int(row["phantom_id"]))
        return cls(igeom, sgeom, read_tensor(d / "phantoms.dpt")[1],
                   read_tensor(d / "full_counts.dpt")[1], read_tensor(d / "inputs.dpt")[1],
                   read_tensor(d / "targets.dpt")[1],
                   DatasetSplit(*(tuple(groups[k]) for k in ("train", "validation", "test"))),
                   float(meta["sinogram_scale"]), float(meta["image_scale"]),
                   float(meta["thinning"]))


def build_dataset(n_phantoms: int, spec: PhantomSpec, count_density: float,
                  split_fractions=(0.8, 0.1, 0.1), seed: int = 0, *,
                  igeom: ImageGeometry = ImageGeometry.square(64),
                  sgeom: SinogramGeometry = SinogramGeometry(100, 64),
                  thinning: float = 1.0, sinogram_scale: float = 5.0,
                  image_scale: float = 1.0, em: EmConfig = TARGET_RECIPE,
                  projector_cfg: ProjectorConfig = DEFAULT_CONFIG,
                  noiseless: bool = False, directory=None) -> Dataset:
    """Phantom -> projection -> Poisson -> [thinning] inputs; OSEM of full counts as targets.

    ``noiseless`` replaces the Poisson draw by its expectation, for overfit
    sanity runs.
    """
    if n_phantoms < 3:
        raise ValueError("need at least three phantoms for a train/validation/test split")
    proj = get_projector(igeom, sgeom, projector_cfg)
    phantoms = np.stack([generate_phantom(spec, igeom, make_seed(seed, i, 1)).values
                         for i in range(n_phantoms)])
    clean = proj.forward(phantoms)
    full, noisy_inputs = [], []
    for i in range(n_phantoms):
        if noiseless:
            counts = Sinogram(sgeom, clean[i] * (count_density / clean[i].sum()))
        else:
            counts = apply_poisson(Sinogram(sgeom, clean[i]), count_density,
                                   make_seed(seed, i, 2))
        full.append(counts.values)
        if thinning < 1 and noiseless:
            counts = Sinogram(sgeom, counts.values * thinning)
        elif thinning < 1:
            counts = thin_counts(counts, thinning, make_seed(seed, i, 3))
        noisy_inputs.append(counts.values)
    full = np.stack(full)
    targets = osem_batch(full, igeom, sgeom, em, projector_cfg)
    ds = Dataset(igeom, sgeom, phantoms.astype(np.float32), full.astype(np.float32),
                 (np.stack(noisy_inputs) / sinogram_scale).astype(np.float32),
                 (targets / image_scale).astype(np.float32),
                 split_ids(n_phantoms, split_fractions, seed), sinogram_scale, image_scale,
                 thinning)
    if directory is not None:
        ds.save(directory)
    return ds


def make_seed(seed: int, *stream: int) -> int:
    """Derive an independent 63-bit seed for one item/stream."""
    return int(make_rng(seed, *stream).integers(0, 2 ** 63 - 1))


# -- training ---------------------------------------------------------------

@dataclass
class TrainingState:
    layer: InversionLayer
    adam: AdamState
    balancer: AlphaBalancer
    iteration: int = 0
    best_val: float = math.inf
    best_iteration: int = -1
    best_weights: list | None = None
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, layer: InversionLayer, cfg: TrainConfig) -> TrainingState:
        return cls(layer, AdamState.zeros_like(layer.weights),
                   AlphaBalancer(cfg.loss.alpha_window))

    def best_layer(self) -> InversionLayer:
        if self.best_weights is None:
            return self.layer.copy()
        return InversionLayer(self.layer.tiling, self.layer.masks,
                              [w.copy() for w in self.best_weights], self.layer.dtype)


def new_layer(tiling, masks, cfg: TrainConfig = TrainConfig()) -> InversionLayer:
    """Untrained layer; ``cfg.init`` picks zero weights or the uniform draw."""
    if cfg.init == "uniform":
        return InversionLayer.initialized(tiling, masks, cfg.seed)
    return InversionLayer(tiling, masks)


def predict(layer: InversionLayer, inputs) -> np.ndarray:
    return layer.forward(inputs).astype(np.float64)


def evaluate(layer: InversionLayer, inputs, targets, cfg: LossConfig = LossConfig()):
    """(MAE, mean per-image MS-SSIM loss) with the layer frozen."""
    if len(inputs) == 0:
        return math.nan, math.nan
    pred = predict(layer, inputs)
    targets = np.asarray(targets, dtype=np.float64)
    ssim = np.mean([ms_ssim_loss(p, t, cfg) for p, t in zip(pred, targets)])
    return mae_loss(pred, targets), float(ssim)


def train(layer: InversionLayer, dataset: Dataset, cfg: TrainConfig = TrainConfig(),
          state: TrainingState | None = None, stop_at: int | None = None,
          history_path=None) -> TrainingState:
    """Run (or continue) the training loop up to ``stop_at`` total iterations.

    Batches are drawn with replacement from the training split using a
    generator seeded by (seed, iteration), so an interrupted and resumed run
    follows the same trajectory as an uninterrupted one.
    """
    if layer.sgeom != dataset.sgeom or layer.geometry != dataset.igeom:
        raise GeometryError("layer masks/tiling do not match the dataset geometry")
    if state is None:
        state = TrainingState.fresh(layer, cfg)
    elif state.layer is not layer:
        raise ValueError("state belongs to a different layer")
    train_ids = np.asarray(dataset.split.train)
    val_ids = np.asarray(dataset.split.validation)
    if train_ids.size == 0:
        raise ValueError("empty training split")
    end = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
    ipe = cfg.iterations_per_epoch
    inputs, targets = dataset.inputs, dataset.targets

    while state.iteration < end:
        k = state.iteration
        eta = learning_rate(k, cfg.scheduler)
        batch = train_ids[make_rng(cfg.seed, 7, k).integers(0, train_ids.size, cfg.batch_size)]
        s = inputs[batch]
        pred = layer.forward(s).astype(np.float64)
        loss, parts = balanced_loss(pred, targets[batch], state.balancer, cfg.loss,
                                    with_grad=True)
        if not math.isfinite(loss):
            raise TrainingDivergedError(k, eta)
        grads = layer.backward(s, parts["grad"])
        adam_step(state.adam, layer.weights, grads, eta)
        state.iteration += 1
        row = [k, k // ipe, eta, parts["mae"], parts["ms_ssim"], parts["alpha"], "", ""]
        if state.iteration % ipe == 0 and val_ids.size:
            val_mae, val_ssim = evaluate(layer, inputs[val_ids], targets[val_ids], cfg.loss)
            row[6:] = [val_mae, val_ssim]
            if val_ssim < state.best_val:
                state.best_val = val_ssim
                state.best_iteration = state.iteration
                state.best_weights = [w.copy() for w in layer.weights]
            log.info("epoch %d: train mae %.4g ms-ssim %.4g | val mae %.4g ms-ssim %.4g",
                     k // ipe, parts["mae"], parts["ms_ssim"], val_mae, val_ssim)
        state.history.append(row)
    if history_path is not None:
        write_history(history_path, state.history)
    return state


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_history(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(HISTORY_COLUMNS)
        for row in rows:
            out.writerow([_fmt(v) for v in row])


def read_history(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            parsed = [int(row[0]), int(row[1])] + [float(v) for v in row[2:6]]
            parsed += [float(v) if v else "" for v in row[6:]]
            rows.append(parsed)
    return rows


# -- checkpoints ----------------------------------------------------------

def save_layer(directory, layer: InversionLayer) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_masks(d, layer.masks, layer.tiling)
    g = layer.geometry
    with open(d / "manifest.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["patch_id", "rows", "cols", "file", "image_size", "pixel_size",
                      "fov_radius", "patch_size"])
        for k, w in enumerate(layer.weights):
            name = f"weights_{k:04d}.dpt"
            write_tensor(d / name, w)
            out.writerow([k, w.shape[0], w.shape[1], name, g.width, repr(g.pixel_size),
                          repr(g.fov_radius), layer.tiling.patch_size])


def load_layer(directory) -> InversionLayer:
    d = Path(directory)
    with open(d / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise GeometryError(f"{d}: empty layer manifest")
    first = rows[0]
    igeom = ImageGeometry.square(int(first["image_size"]), float(first["pixel_size"]),
                                 float(first["fov_radius"]))
    tiling = tile_patches(igeom, int(first["patch_size"]))
    masks = load_masks(d)
    weights = []
    for row in rows:
        dims, w = read_tensor(d / row["file"])
        if dims != (int(row["rows"]), int(row["cols"])):
            raise GeometryError(f"{row['file']}: shape {dims} disagrees with manifest")
        weights.append(w)
    return InversionLayer(tiling, masks, weights)


def save_checkpoint(directory, state: TrainingState) -> None:
    """Weights, Adam moments, balancer window, best snapshot and counters."""
    d = Path(directory)
    save_layer(d / "layer", state.layer)
    for k, (m, v) in enumerate(zip(state.adam.m, state.adam.v)):
        write_tensor(d / "layer" / f"adam_m_{k:04d}.dpt", m)
        write_tensor(d / "layer" / f"adam_v_{k:04d}.dpt", v)
    if state.best_weights is not None:
        best = InversionLayer(state.layer.tiling, state.layer.masks, state.best_weights)
        save_layer(d / "best", best)
    with open(d / "state.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["key", "value"])
        out.writerow(["iteration", state.iteration])
        out.writerow(["adam_t", state.adam.t])
        out.writerow(["best_val", repr(state.best_val)])
        out.writerow(["best_iteration", state.best_iteration])
        out.writerow(["alpha_window", state.balancer.window])
    with open(d / "balancer.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["mae", "ms_ssim"])
        for m, s in state.balancer.history:
            out.writerow([repr(m), repr(s)])
    write_history(d / "history.csv", state.history)


def load_checkpoint(directory) -> TrainingState:
    d = Path(directory)
    layer = load_layer(d / "layer")
    with open(d / "state.csv", newline="") as fh:
        meta = {row["key"]: row["value"] for row in csv.DictReader(fh)}
    n = len(layer.weights)
    adam = AdamState([read_tensor(d / "layer" / f"adam_m_{k:04d}.dpt")[1] for k in range(n)],
                     [read_tensor(d / "layer" / f"adam_v_{k:04d}.dpt")[1] for k in range(n)],
                     t=int(meta["adam_t"]))
    with open(d / "balancer.csv", newline="") as fh:
        window = [(float(r["mae"]), float(r["ms_ssim"])) for r in csv.DictReader(fh)]
    best = load_layer(d / "best").weights if (d / "best").exists() else None
    return TrainingState(layer, adam, AlphaBalancer(int(meta["alpha_window"]), window),
                         int(meta["iteration"]), float(meta["best_val"]),
                         int(meta["best_iteration"]), best, read_history(d / "history.csv"))


# -- reconstruction ---------------------------------------------------------

@dataclass
class ReconstructionTiming:
    total_seconds: float
    per_slice_seconds: float
    slices_per_second: float


def reconstruct(layer: InversionLayer, sinograms, batch_size: int = 16):
    """Batched forward passes over ``(n, A, B)`` sinograms with wall-clock timing."""
    sinograms = np.asarray(sinograms)
    if sinograms.ndim == 2:
        sinograms = sinograms[None]
    if sinograms.shape[-2:] != layer.sgeom.shape:
        raise GeometryError("sinograms do not match the layer's sinogram geometry")
    n = sinograms.shape[0]
    start = time.perf_counter()
    parts = [layer.forward(sinograms[i:i + batch_size]) for i in range(0, n, batch_size)]
    images = np.concatenate(parts) if parts else np.zeros((0, *layer.geometry.shape))
    elapsed = time.perf_counter() - start
    per = elapsed / max(n, 1)
    return images, ReconstructionTiming(elapsed, per, (1 / per) if per > 0 else math.inf)
