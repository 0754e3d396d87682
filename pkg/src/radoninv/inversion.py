"""Patch-wise masked linear Radon inversion layer, Adam and the cyclic schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import GeometryError, ImageGrid, Sinogram, make_rng
from .maskgen import PatchTiling, SinogramMask


BLOCK = 16


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, patch_id):
        super().__init__(f"non-finite gradient in patch {patch_id}")
        self.patch_id = patch_id


class InversionLayer:
    """Independent dense maps from each patch's surviving bins to its pixels.

    ``weights[p]`` has shape ``(len(pixels[p]), len(bins[p]))``; there are no
    biases, so a zero sinogram always maps to a zero image.
    """

    def __init__(self, tiling: PatchTiling, masks: list[SinogramMask], weights=None,
                 dtype=np.float32):
        if len(masks) != len(tiling.patches):
            raise GeometryError("need exactly one mask per patch")
        self.tiling = tiling
        self.masks = masks
        self.sgeom = masks[0].geometry if masks else None
        self.dtype = np.dtype(dtype)
        self.pixels = [patch.flat_indices(tiling.geometry) for patch in tiling.patches]
        self.bins = [m.surviving_bins for m in masks]
        for patch, mask in zip(tiling.patches, masks):
            if patch.patch_id != mask.patch_id:
                raise GeometryError("mask order does not follow tiling order")
            if mask.geometry != self.sgeom:
                raise GeometryError("masks disagree on sinogram geometry")
        if weights is None:
            weights = [np.zeros((len(p), len(b)), dtype=self.dtype)
                       for p, b in zip(self.pixels, self.bins)]
        self.weights = [np.ascontiguousarray(w, dtype=self.dtype) for w in weights]
        for w, p, b in zip(self.weights, self.pixels, self.bins):
            if w.shape != (len(p), len(b)):
                raise GeometryError(f"weight shape {w.shape} != {(len(p), len(b))}")

    @classmethod
    def initialized(cls, tiling, masks, seed: int, dtype=np.float32) -> InversionLayer:
        """Uniform init with half-width 1/sqrt(surviving bins), one stream per patch."""
        weights = []
        for k, mask in enumerate(masks):
            n_pix = len(tiling.patches[k].pixels)
            n_bins = len(mask.surviving_bins)
            bound = 1.0 / math.sqrt(max(n_bins, 1))
            weights.append(make_rng(seed, k).uniform(-bound, bound, size=(n_pix, n_bins)))
        return cls(tiling, masks, weights, dtype)

    @property
    def geometry(self):
        return self.tiling.geometry

    @property
    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights)

    def flops(self) -> int:
        return 2 * self.num_parameters

    def copy(self) -> InversionLayer:
        return InversionLayer(self.tiling, self.masks, [w.copy() for w in self.weights],
                              self.dtype)

    def _flatten(self, sinograms):
        s = np.asarray(sinograms)
        if s.shape[-2:] != self.sgeom.shape:
            raise GeometryError(f"sinogram shape {s.shape[-2:]} != mask geometry "
                                f"{self.sgeom.shape}")
        return s.reshape(-1, self.sgeom.size).astype(self.dtype, copy=False)

    def forward(self, sinograms) -> np.ndarray:
        """``(..., A, B)`` sinograms to ``(n, H, W)`` images.

        Slices go through the matrix products in zero-padded blocks of
        ``BLOCK`` rows: BLAS results then do not depend on batch composition,
        so a slice reconstructs bit-identically alone or inside a batch.
        """
        flat = self._flatten(sinograms)
        n = flat.shape[0]
        out = np.zeros((n, self.geometry.num_pixels), dtype=self.dtype)
        for start in range(0, n, BLOCK):
            chunk = flat[start:start + BLOCK]
            if chunk.shape[0] < BLOCK:
                chunk = np.concatenate(
                    [chunk, np.zeros((BLOCK - chunk.shape[0], chunk.shape[1]), self.dtype)])
            rows = min(BLOCK, n - start)
            for w, pix, bins in zip(self.weights, self.pixels, self.bins):
                out[start:start + rows, pix] = (chunk[:, bins] @ w.T)[:rows]
        return out.reshape(-1, *self.geometry.shape)

    def backward(self, sinograms, upstream) -> list[np.ndarray]:
        """Weight gradients for a loss whose image gradient is ``upstream``."""
        flat = self._flatten(sinograms)
        up = np.asarray(upstream, dtype=self.dtype).reshape(flat.shape[0], -1)
        if up.shape[1] != self.geometry.num_pixels:
            raise GeometryError("upstream gradient does not match image geometry")
        return [up[:, pix].T @ flat[:, bins] for pix, bins in zip(self.pixels, self.bins)]


def layer_forward(layer: InversionLayer, s: Sinogram) -> ImageGrid:
    if s.geometry != layer.sgeom:
        raise GeometryError("sinogram geometry does not match the layer masks")
    return ImageGrid(layer.geometry, layer.forward(s.values)[0].astype(np.float64))


def layer_backward(layer: InversionLayer, s: Sinogram, upstream_gradient) -> list[np.ndarray]:
    if s.geometry != layer.sgeom:
        raise GeometryError("sinogram geometry does not match the layer masks")
    up = np.asarray(getattr(upstream_gradient, "values", upstream_gradient))
    if up.shape != layer.geometry.shape:
        raise GeometryError("upstream gradient must be image shaped")
    return layer.backward(s.values, up[None])


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights, **kwargs) -> AdamState:
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights],
                   **kwargs)


@numba.njit(cache=True)
def _adam_kernel(w, g, m, v, beta1, beta2, step, eps):
    w = w.ravel()
    g = g.ravel()
    m = m.ravel()
    v = v.ravel()
    for i in range(w.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        w[i] -= step[0] * mi / (math.sqrt(vi) * step[1] + eps)


def adam_step(state: AdamState, weights: list[np.ndarray], gradients: list[np.ndarray],
              lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``weights`` and ``state``.

    Written as lr/(1 - b1^t) * m / (sqrt(v / (1 - b2^t)) + eps).
    """
    for k, g in enumerate(gradients):
        if g.shape != weights[k].shape:
            raise GeometryError(f"gradient shape mismatch in patch {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(k)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for w, g, m, v in zip(weights, gradients, state.m, state.v):
        dtype = w.dtype.type
        step = np.array([lr / corr1, 1.0 / math.sqrt(corr2)], dtype=w.dtype)
        _adam_kernel(w, np.ascontiguousarray(g, dtype=w.dtype), m, v,
                     dtype(b1), dtype(b2), step, dtype(state.eps))


# -- learning-rate schedule -------------------------------------------------

@dataclass(frozen=True)
class SchedulerConfig:
    eta_min: float = 0.5e-5
    eta_max: float = 9.0e-5
    period: int = 1000
    decay: float = 0.99995

    def __post_init__(self):
        if not 0 < self.eta_min <= self.eta_max:
            raise ValueError("need 0 < eta_min <= eta_max")
        if self.period < 1 or not 0 < self.decay <= 1:
            raise ValueError("period must be >= 1 and decay in (0, 1]")


def triangle_wave(k: int, period: int = 1000) -> float:
    ratio = k / period
    return 2.0 * abs(ratio - math.floor(ratio + 0.5))


def learning_rate(k: int, cfg: SchedulerConfig = SchedulerConfig()) -> float:
    """Triangular cycle between the bounds, amplitude decaying with the iteration."""
    if k < 0:
        raise ValueError("iteration must be non-negative")
    return triangle_wave(k, cfg.period) * (cfg.eta_max - cfg.eta_min) * cfg.decay ** k + cfg.eta_min
