"""Classical reconstructions: ordered-subsets EM and filtered back projection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .core import GeometryError, ImageGeometry, ImageGrid, Sinogram, SinogramGeometry
from .projector import DEFAULT_CONFIG, ProjectorConfig, get_projector, check_compatible


@dataclass(frozen=True)
class EmConfig:
    iterations: int = 8
    subsets: int = 4
    post_filter_sigma: float = 1.0

    def __post_init__(self):
        if self.iterations < 0 or self.subsets < 1:
            raise ValueError("iterations must be >= 0 and subsets >= 1")
        if self.post_filter_sigma < 0:
            raise ValueError("post_filter_sigma must be >= 0")


TARGET_RECIPE = EmConfig(iterations=8, subsets=4, post_filter_sigma=1.0)


def subset_angles(num_angles: int, subsets: int) -> list[np.ndarray]:
    """Interleaved view groups: subset k holds views k, k+S, k+2S, ..."""
    if subsets > num_angles:
        raise ValueError("more subsets than views")
    return [np.arange(k, num_angles, subsets) for k in range(subsets)]


class _SubsetOperators:
    def __init__(self, igeom, sgeom, cfg, subsets):
        proj = get_projector(igeom, sgeom, cfg)
        self.groups = subset_angles(sgeom.num_angles, subsets)
        nb = sgeom.num_bins
        self.rows = [(g[:, None] * nb + np.arange(nb)[None, :]).ravel() for g in self.groups]
        self.blocks = [proj.matrix[r] for r in self.rows]
        self.blocks_t = [b.T.tocsr() for b in self.blocks]
        self.sensitivity = [np.asarray(bt.sum(axis=1)).ravel() for bt in self.blocks_t]


@lru_cache(maxsize=8)
def _subset_operators(igeom, sgeom, cfg, subsets):
    return _SubsetOperators(igeom, sgeom, cfg, subsets)


def _ratio(measured, expected):
    out = np.zeros_like(expected)
    np.divide(measured, expected, out=out, where=expected > 0)
    return out


def em_iterations(sinograms: np.ndarray, igeom: ImageGeometry, sgeom: SinogramGeometry,
                  iterations: int, subsets: int, cfg: ProjectorConfig = DEFAULT_CONFIG,
                  init: np.ndarray | None = None, callback=None) -> np.ndarray:
    """Run OSEM on a stack of flattened sinograms ``(n, bins)``; returns ``(n, pixels)``.

    ``callback(iteration, estimate)`` is called after every full iteration.
    """
    ops = _subset_operators(igeom, sgeom, cfg, subsets)
    y = np.atleast_2d(np.asarray(sinograms, dtype=np.float64))
    fov = igeom.fov_mask().ravel()
    if init is None:
        x = np.zeros((y.shape[0], igeom.num_pixels))
        x[:, fov] = 1.0
    else:
        x = np.array(np.atleast_2d(init), dtype=np.float64)
        x[:, ~fov] = 0.0
    for it in range(iterations):
        for rows, block, block_t, sens in zip(ops.rows, ops.blocks, ops.blocks_t,
                                               ops.sensitivity):
            expected = (block @ x.T).T
            back = (block_t @ _ratio(y[:, rows], expected).T).T
            # zero-sensitivity pixels are frozen at zero
            update = np.zeros_like(back)
            np.divide(back, sens, out=update, where=sens > 0)
            x *= update
        if callback is not None:
            callback(it, x)
    return x


def osem_reconstruct(s: Sinogram, igeom: ImageGeometry, cfg: EmConfig = TARGET_RECIPE,
                     projector_cfg: ProjectorConfig = DEFAULT_CONFIG) -> ImageGrid:
    return ImageGrid(igeom, osem_batch(s.values[None], igeom, s.geometry, cfg, projector_cfg)[0])


def osem_batch(sinograms: np.ndarray, igeom: ImageGeometry, sgeom: SinogramGeometry,
               cfg: EmConfig = TARGET_RECIPE,
               projector_cfg: ProjectorConfig = DEFAULT_CONFIG) -> np.ndarray:
    """OSEM on ``(n, num_angles, num_bins)`` counts; returns ``(n, H, W)``."""
    sinograms = np.asarray(sinograms, dtype=np.float64)
    if sinograms.shape[1:] != sgeom.shape:
        raise GeometryError("sinogram shape does not match geometry")
    if np.any(sinograms < 0):
        raise ValueError("OSEM needs non-negative data")
    check_compatible(igeom, sgeom)
    n = sinograms.shape[0]
    x = em_iterations(sinograms.reshape(n, -1), igeom, sgeom, cfg.iterations, cfg.subsets,
                      projector_cfg)
    x = x.reshape(n, *igeom.shape)
    if cfg.post_filter_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(0, cfg.post_filter_sigma, cfg.post_filter_sigma),
                                    mode="constant")
        x[:, ~igeom.fov_mask()] = 0.0
        np.maximum(x, 0.0, out=x)
    return x


def poisson_log_likelihood(y: np.ndarray, expected: np.ndarray) -> float:
    """Sum of y log(e) - e, dropping the data-only term; bins with e = 0 need y = 0."""
    y = np.ravel(y)
    e = np.ravel(expected)
    pos = e > 0
    return float(np.sum(y[pos] * np.log(e[pos])) - np.sum(e))


# -- FBP ------------------------------------------------------------------

def ramp_filter_response(num_bins: int, bin_spacing: float, window: str = "ramp") -> tuple[np.ndarray, int]:
    """Frequency response of the band-limited ramp on a zero-padded grid.

    Built from the spatial-domain ramp kernel (h[0] = 1/4d^2, h[odd n] =
    -1/(n pi d)^2) so the DC term is not lost to discretization.
    """
    size = max(64, 2 ** int(math.ceil(math.log2(2 * num_bins))))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 0.25 / bin_spacing ** 2
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * bin_spacing) ** 2
    response = np.real(np.fft.fft(h)) * bin_spacing
    if window == "hann":
        freq = np.fft.fftfreq(size)
        response = response * (0.5 + 0.5 * np.cos(2 * np.pi * freq))
    elif window != "ramp":
        raise ValueError(f"unknown filter {window!r}")
    return response, size


def fbp_reconstruct(s: Sinogram, igeom: ImageGeometry, filter: str = "ramp",
                    projector_cfg: ProjectorConfig = DEFAULT_CONFIG) -> ImageGrid:
    return ImageGrid(igeom, fbp_batch(s.values[None], igeom, s.geometry, filter,
                                      projector_cfg)[0])


def fbp_batch(sinograms: np.ndarray, igeom: ImageGeometry, sgeom: SinogramGeometry,
              filter: str = "ramp", projector_cfg: ProjectorConfig = DEFAULT_CONFIG) -> np.ndarray:
    sinograms = np.asarray(sinograms, dtype=np.float64)
    if sinograms.shape[1:] != sgeom.shape:
        raise GeometryError("sinogram shape does not match geometry")
    proj = get_projector(igeom, sgeom, projector_cfg)
    response, size = ramp_filter_response(sgeom.num_bins, sgeom.bin_spacing, filter)
    spectrum = np.fft.fft(sinograms, n=size, axis=-1)
    filtered = np.real(np.fft.ifft(spectrum * response, axis=-1))[..., :sgeom.num_bins]
    # the matched adjoint carries a pixel_size^2 / bin_spacing weight per view
    scale = math.pi / sgeom.num_angles * sgeom.bin_spacing / igeom.pixel_size ** 2
    images = proj.adjoint(filtered) * scale
    images[:, ~igeom.fov_mask()] = 0.0
    return images
