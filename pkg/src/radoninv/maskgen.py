"""Patch tiling and per-patch sinogram masks.

Two routes produce masks: refining the weight maps of a trained dense
sinogram-to-image layer, and forward projecting each patch's (optionally
dilated) bounding box.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .core import (GeometryError, ImageGeometry, SinogramGeometry, fov_flat_indices,
                   make_rng, read_tensor, write_tensor)
from .projector import DEFAULT_CONFIG, ProjectorConfig, check_compatible, system_matrix_block


class DegenerateThresholdError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, iteration):
        super().__init__(f"dense layer training diverged at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class Patch:
    patch_id: int
    pixels: tuple[tuple[int, int], ...]
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (inclusive)

    def flat_indices(self, geom: ImageGeometry) -> np.ndarray:
        return np.array([r * geom.width + c for r, c in self.pixels], dtype=np.int64)


@dataclass(frozen=True)
class PatchTiling:
    geometry: ImageGeometry
    patch_size: int
    patches: tuple[Patch, ...]

    def __len__(self):
        return len(self.patches)

    def patch(self, patch_id: int) -> Patch:
        return self.patches[patch_id]


def tile_patches(igeom: ImageGeometry, patch_size: int) -> PatchTiling:
    """Row-major square tiles of the grid, clipped to the FOV; empty tiles dropped."""
    if not 1 <= patch_size <= igeom.width:
        raise ValueError("patch_size must lie in [1, width]")
    inside = igeom.fov_mask()
    patches = []
    for r0 in range(0, igeom.height, patch_size):
        for c0 in range(0, igeom.width, patch_size):
            block = inside[r0:r0 + patch_size, c0:c0 + patch_size]
            rr, cc = np.nonzero(block)
            if rr.size == 0:
                continue
            rr = rr + r0
            cc = cc + c0
            bbox = (int(rr.min()), int(cc.min()), int(rr.max()), int(cc.max()))
            patches.append(Patch(len(patches), tuple(zip(rr.tolist(), cc.tolist())), bbox))
    return PatchTiling(igeom, patch_size, tuple(patches))


@dataclass(frozen=True)
class SinogramMask:
    patch_id: int
    geometry: SinogramGeometry
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.geometry.shape:
            raise GeometryError("mask shape does not match sinogram geometry")
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "_bins", np.flatnonzero(mask))

    @property
    def surviving_bins(self) -> np.ndarray:
        return self._bins

    @classmethod
    def full(cls, patch_id: int, geometry: SinogramGeometry) -> SinogramMask:
        return cls(patch_id, geometry, np.ones(geometry.shape, dtype=bool))


@dataclass(frozen=True)
class ActivationAtlas:
    """Per-FOV-pixel weight maps of a dense sinogram-to-image layer."""

    igeom: ImageGeometry
    sgeom: SinogramGeometry
    pixels: np.ndarray  # flat pixel indices, row-major FOV order
    maps: np.ndarray = field(repr=False)  # (num_pixels, num_angles, num_bins)

    def map_for(self, flat_index: int) -> np.ndarray:
        k = np.searchsorted(self.pixels, flat_index)
        if k >= len(self.pixels) or self.pixels[k] != flat_index:
            raise KeyError(f"pixel {flat_index} is not covered by the atlas")
        return self.maps[k]


# -- learned-activation route ----------------------------------------------

def train_dense_layer(pairs, epochs: int, lr: float, batch_size: int = 16,
                      seed: int = 0, history: list | None = None) -> ActivationAtlas:
    """Fit one linear map from sinogram bins to FOV pixels by mini-batch descent on MAE.

    Weights start at zero so every nonzero entry of the atlas is learned.
    ``history``, if given, receives the mean training loss of every epoch.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one training pair")
    sgeom = pairs[0][0].geometry
    igeom = pairs[0][1].geometry
    for s, x in pairs:
        if s.geometry != sgeom or x.geometry != igeom:
            raise GeometryError("training pairs disagree on geometry")
    pix = fov_flat_indices(igeom)
    S = np.stack([s.values.ravel() for s, _ in pairs])
    X = np.stack([x.values.ravel()[pix] for _, x in pairs])
    weights = np.zeros((len(pix), sgeom.size))
    n = len(pairs)
    batch_size = min(batch_size, n)
    it = 0
    for epoch in range(epochs):
        order = make_rng(seed, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            residual = S[idx] @ weights.T - X[idx]
            loss = np.abs(residual).mean()
            if not np.isfinite(loss):
                raise DivergenceError(it)
            total += loss * len(idx)
            grad = np.sign(residual).T @ S[idx] / residual.size
            weights -= lr * grad
            it += 1
        if history is not None:
            history.append(total / n)
    if not np.all(np.isfinite(weights)):
        raise DivergenceError(it)
    return ActivationAtlas(igeom, sgeom, pix, weights.reshape(len(pix), *sgeom.shape))


@dataclass(frozen=True)
class MaskRefineConfig:
    gaussian_sigma: float = 4.0
    disk_radius: int = 8

    def __post_init__(self):
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if self.disk_radius < 1:
            raise ValueError("disk_radius must be >= 1")


def disk_footprint(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return r[:, None] ** 2 + r[None, :] ** 2 <= radius ** 2


def li_threshold(values, tol: float = 1e-6, max_iter: int = 100) -> float:
    """Li's iterative minimum cross-entropy threshold.

    Iterates t <- (mu_above - mu_below) / (ln mu_above - ln mu_below) from the
    mean on max-normalised data.  A zero lower-class mean is replaced by machine epsilon.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or v.min() == v.max():
        raise DegenerateThresholdError("threshold needs at least two distinct values")
    if v.min() < 0:
        raise ValueError("values must be non-negative")
    scale = v.max()
    v = v / scale
    eps = np.finfo(np.float64).eps
    t = v.mean()
    for _ in range(max_iter):
        above = v > t
        mu_a = max(v[above].mean(), eps)
        mu_b = max(v[~above].mean(), eps)
        t_next = (mu_a - mu_b) / (math.log(mu_a) - math.log(mu_b))
        done = abs(t_next - t) < tol
        t = t_next
        if done:
            break
    return float(t * scale)


def summed_activation(atlas: ActivationAtlas, tiling: PatchTiling, patch_id: int) -> np.ndarray:
    patch = tiling.patch(patch_id)
    rows = np.searchsorted(atlas.pixels, patch.flat_indices(tiling.geometry))
    if np.any(rows >= len(atlas.pixels)) or np.any(
            atlas.pixels[np.minimum(rows, len(atlas.pixels) - 1)] !=
            patch.flat_indices(tiling.geometry)):
        raise GeometryError("atlas does not cover every pixel of the patch")
    return np.abs(atlas.maps[rows]).sum(axis=0)


def refine_activation(summed: np.ndarray, cfg: MaskRefineConfig = MaskRefineConfig()) -> np.ndarray:
    """Smooth, open and close a summed activation image (before thresholding)."""
    footprint = disk_footprint(cfg.disk_radius)
    smooth = ndimage.gaussian_filter(np.asarray(summed, dtype=np.float64), cfg.gaussian_sigma)
    opened = ndimage.grey_opening(smooth, footprint=footprint)
    return ndimage.grey_closing(opened, footprint=footprint)


def refine_mask(atlas: ActivationAtlas, tiling: PatchTiling, patch_id: int,
                cfg: MaskRefineConfig = MaskRefineConfig()) -> SinogramMask:
    refined = refine_activation(summed_activation(atlas, tiling, patch_id), cfg)
    refined = np.maximum(refined, 0.0)
    try:
        t = li_threshold(refined)
    except DegenerateThresholdError as exc:
        raise DegenerateThresholdError(f"patch {patch_id}: {exc}") from None
    return SinogramMask(patch_id, atlas.sgeom, refined > t)


def learned_masks(atlas, tiling, cfg: MaskRefineConfig = MaskRefineConfig()) -> list[SinogramMask]:
    return [refine_mask(atlas, tiling, p.patch_id, cfg) for p in tiling.patches]


# -- projection route -------------------------------------------------------

def _box_indicators(tiling: PatchTiling, buffer: int, patch_ids) -> sp.csc_matrix:
    g = tiling.geometry
    cols, rows = [], []
    for k, pid in enumerate(patch_ids):
        r0, c0, r1, c1 = tiling.patch(pid).bbox
        r0, c0 = max(r0 - buffer, 0), max(c0 - buffer, 0)
        r1, c1 = min(r1 + buffer, g.height - 1), min(c1 + buffer, g.width - 1)
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        flat = (rr * g.width + cc).ravel()
        rows.append(flat)
        cols.append(np.full(flat.size, k))
    rows = np.concatenate(rows)
    data = np.ones(rows.size, dtype=np.int32)
    return sp.csc_matrix((data, (rows, np.concatenate(cols))),
                         shape=(g.num_pixels, len(patch_ids)))


def projection_masks(tiling: PatchTiling, sgeom: SinogramGeometry, buffer: int = 0,
                     patch_ids=None, cfg: ProjectorConfig = DEFAULT_CONFIG,
                     angles_per_block: int = 20) -> list[SinogramMask]:
    """Masks of bins with nonzero projection of each patch's dilated bounding box.

    Works view block by view block, so the full system matrix is never held.
    """
    if buffer < 0:
        raise ValueError("buffer must be >= 0")
    check_compatible(tiling.geometry, sgeom)
    if patch_ids is None:
        patch_ids = [p.patch_id for p in tiling.patches]
    boxes = _box_indicators(tiling, buffer, patch_ids)
    hits = np.zeros((sgeom.num_angles, sgeom.num_bins, len(patch_ids)), dtype=bool)
    for a0 in range(0, sgeom.num_angles, angles_per_block):
        views = range(a0, min(a0 + angles_per_block, sgeom.num_angles))
        block = system_matrix_block(tiling.geometry, sgeom, cfg, views)
        pattern = sp.csr_matrix((np.ones(block.nnz, dtype=np.int32), block.indices,
                                 block.indptr), shape=block.shape)
        touched = (pattern @ boxes).toarray() > 0
        hits[a0:a0 + len(views)] = touched.reshape(len(views), sgeom.num_bins, -1)
    return [SinogramMask(pid, sgeom, hits[..., k]) for k, pid in enumerate(patch_ids)]


def project_mask(tiling: PatchTiling, patch_id: int, sgeom: SinogramGeometry,
                 buffer: int = 0, cfg: ProjectorConfig = DEFAULT_CONFIG) -> SinogramMask:
    return projection_masks(tiling, sgeom, buffer, [patch_id], cfg)[0]


# -- accounting and persistence ---------------------------------------------

@dataclass(frozen=True)
class ParameterCount:
    per_patch: tuple[int, ...]
    total: int
    dense: int
    mask_count: int
    fov_pixels: int


def count_parameters(tiling: PatchTiling, masks, fov_pixel_count: int | None = None,
                     sgeom: SinogramGeometry | None = None) -> ParameterCount:
    """Weights of the masked layer (no biases) next to the single dense layer.

    ``fov_pixel_count`` overrides the tiling's own FOV count in the dense figure.
    """
    masks = list(masks)
    if len(masks) != len(tiling.patches):
        raise GeometryError("need one mask per patch")
    if sgeom is None:
        if not masks:
            raise ValueError("sinogram geometry needed when there are no masks")
        sgeom = masks[0].geometry
    per_patch = tuple(len(m.surviving_bins) * len(p.pixels)
                      for p, m in zip(tiling.patches, masks))
    n_fov = fov_pixel_count if fov_pixel_count is not None else \
        sum(len(p.pixels) for p in tiling.patches)
    return ParameterCount(per_patch, sum(per_patch), sgeom.size * n_fov, len(masks), n_fov)


def save_masks(directory, masks: list[SinogramMask], tiling: PatchTiling) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max((len(m.surviving_bins) for m in masks), default=0)
    table = np.full((len(masks), width), -1.0)
    for k, m in enumerate(masks):
        table[k, :len(m.surviving_bins)] = m.surviving_bins
    write_tensor(directory / "masks.dpt", table)
    with open(directory / "masks.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["patch_id", "bins", "parameters", "num_angles", "num_bins",
                      "bin_spacing", "patch_size"])
        for m, p in zip(masks, tiling.patches):
            out.writerow([m.patch_id, len(m.surviving_bins),
                          len(m.surviving_bins) * len(p.pixels), m.geometry.num_angles,
                          m.geometry.num_bins, repr(m.geometry.bin_spacing), tiling.patch_size])


def load_masks(directory) -> list[SinogramMask]:
    directory = Path(directory)
    _, table = read_tensor(directory / "masks.dpt")
    with open(directory / "masks.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != table.shape[0]:
        raise GeometryError("mask manifest and mask tensor disagree")
    masks = []
    for k, row in enumerate(rows):
        sgeom = SinogramGeometry(int(row["num_angles"]), int(row["num_bins"]),
                                 float(row["bin_spacing"]))
        bins = table[k][table[k] >= 0].astype(np.int64)
        if len(bins) != int(row["bins"]):
            raise GeometryError(f"patch {row['patch_id']}: bin count mismatch")
        flat = np.zeros(sgeom.size, dtype=bool)
        flat[bins] = True
        masks.append(SinogramMask(int(row["patch_id"]), sgeom, flat.reshape(sgeom.shape)))
    return masks
