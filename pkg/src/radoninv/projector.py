"""Ray-driven parallel-beam Radon transform and its matched adjoint.

The system matrix is assembled once per (image geometry, sinogram geometry,
config) from bilinear samples taken every ``sampling_step`` pixels along each
ray.  Back projection applies the transpose of the very same matrix, so the
pair is adjoint to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .core import GeometryError, ImageGeometry, ImageGrid, Sinogram, SinogramGeometry


@dataclass(frozen=True)
class ProjectorConfig:
    sampling_step: float = 0.5
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not 0 < self.sampling_step <= 1:
            raise ValueError("sampling_step must lie in (0, 1]")
        if self.interpolation != "bilinear":
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")


DEFAULT_CONFIG = ProjectorConfig()


def check_compatible(igeom: ImageGeometry, sgeom: SinogramGeometry) -> None:
    if sgeom.radial_extent < 2 * igeom.fov_radius * (1 - 1e-9):
        raise GeometryError(
            f"sinogram radial extent {sgeom.radial_extent} does not cover "
            f"FOV diameter {2 * igeom.fov_radius}")


def _angle_block(igeom, sgeom, cfg, angle_index):
    """COO triplets (bin, pixel, weight) for one view."""
    theta = angle_index * math.pi / sgeom.num_angles
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ps = igeom.pixel_size
    step = cfg.sampling_step * ps
    half_diag = math.hypot(igeom.width, igeom.height) / 2 * ps
    n_half = int(math.ceil(half_diag / step))
    t = np.arange(-n_half, n_half + 1) * step
    s = sgeom.offsets()

    x = s[:, None] * cos_t - t[None, :] * sin_t
    y = s[:, None] * sin_t + t[None, :] * cos_t
    col = x / ps + (igeom.width - 1) / 2
    row = (igeom.height - 1) / 2 - y / ps
    inside = (col > -1) & (col < igeom.width) & (row > -1) & (row < igeom.height)
    bins = np.broadcast_to(np.arange(sgeom.num_bins)[:, None], inside.shape)[inside]
    col, row = col[inside], row[inside]

    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    out_b, out_p, out_w = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < igeom.height) & (cc >= 0) & (cc < igeom.width) & (w > 0)
        out_b.append(bins[ok] + angle_index * sgeom.num_bins)
        out_p.append(rr[ok] * igeom.width + cc[ok])
        out_w.append(w[ok] * step)
    return np.concatenate(out_b), np.concatenate(out_p), np.concatenate(out_w)


def system_matrix_block(igeom: ImageGeometry, sgeom: SinogramGeometry,
                        cfg: ProjectorConfig, angle_indices) -> sp.csr_matrix:
    """Rows of the system matrix for the given views, in the order given."""
    angle_indices = list(angle_indices)
    rows, cols, vals = [], [], []
    for k, a in enumerate(angle_indices):
        b, p, w = _angle_block(igeom, sgeom, cfg, a)
        rows.append(b - a * sgeom.num_bins + k * sgeom.num_bins)
        cols.append(p)
        vals.append(w)
    shape = (len(angle_indices) * sgeom.num_bins, igeom.num_pixels)
    if not rows:
        return sp.csr_matrix(shape)
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=shape).tocsr()
    m.sum_duplicates()
    return m


@lru_cache(maxsize=8)
def system_matrix(igeom: ImageGeometry, sgeom: SinogramGeometry,
                  cfg: ProjectorConfig = DEFAULT_CONFIG) -> sp.csr_matrix:
    check_compatible(igeom, sgeom)
    return system_matrix_block(igeom, sgeom, cfg, range(sgeom.num_angles))


class Projector:
    """Matched forward/adjoint pair over stacked arrays.

    ``forward`` maps (..., H, W) -> (..., num_angles, num_bins) and ``adjoint``
    maps back; leading dimensions are treated as a batch.
    """

    def __init__(self, igeom: ImageGeometry, sgeom: SinogramGeometry,
                 cfg: ProjectorConfig = DEFAULT_CONFIG):
        self.igeom = igeom
        self.sgeom = sgeom
        self.cfg = cfg
        self.matrix = system_matrix(igeom, sgeom, cfg)
        self._matrix_t = self.matrix.T.tocsr()

    def forward(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        lead = images.shape[:-2]
        flat = images.reshape(-1, self.igeom.num_pixels)
        out = (self.matrix @ flat.T).T
        return out.reshape(*lead, *self.sgeom.shape)

    def adjoint(self, sinograms: np.ndarray) -> np.ndarray:
        sinograms = np.asarray(sinograms, dtype=np.float64)
        lead = sinograms.shape[:-2]
        flat = sinograms.reshape(-1, self.sgeom.size)
        out = (self._matrix_t @ flat.T).T
        return out.reshape(*lead, *self.igeom.shape)


@lru_cache(maxsize=8)
def get_projector(igeom: ImageGeometry, sgeom: SinogramGeometry,
                  cfg: ProjectorConfig = DEFAULT_CONFIG) -> Projector:
    return Projector(igeom, sgeom, cfg)


def forward_project(img: ImageGrid, sgeom: SinogramGeometry,
                    cfg: ProjectorConfig = DEFAULT_CONFIG) -> Sinogram:
    proj = get_projector(img.geometry, sgeom, cfg)
    return Sinogram(sgeom, proj.forward(img.values))


def back_project(s: Sinogram, igeom: ImageGeometry,
                 cfg: ProjectorConfig = DEFAULT_CONFIG) -> ImageGrid:
    proj = get_projector(igeom, s.geometry, cfg)
    return ImageGrid(igeom, proj.adjoint(s.values))
