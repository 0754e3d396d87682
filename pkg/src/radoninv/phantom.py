"""Random ellipse phantoms and count-statistics helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .core import ImageGeometry, ImageGrid, Sinogram, make_rng


class InvalidSpecError(ValueError):
    pass


Range = tuple[float, float]


@dataclass(frozen=True)
class PhantomSpec:
    """Ranges for randomly drawn ellipses.

    Axes and center jitter are in pixels; ``rotation`` is in radians.  The
    center jitter bounds the distance of an ellipse center from the image
    center.  ``background_intensity`` of ``None`` disables the background disk.
    """

    num_ellipses: tuple[int, int] = (2, 6)
    intensity: Range = (0.5, 2.0)
    axes: Range = (2.0, 10.0)
    center_jitter: Range = (0.0, 20.0)
    rotation: Range = (0.0, math.pi)
    background_intensity: Range | None = (0.5, 1.5)
    background_radius: Range = (0.7, 0.9)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lo, hi = value
            if lo > hi:
                raise InvalidSpecError(f"{f.name}: empty range {value}")
        if self.num_ellipses[0] < 0:
            raise InvalidSpecError("num_ellipses must be non-negative")
        if self.intensity[0] < 0:
            raise InvalidSpecError("intensities must be non-negative")
        if self.axes[0] <= 0 or self.center_jitter[0] < 0:
            raise InvalidSpecError("axes must be positive and jitter non-negative")
        if self.background_intensity is not None and self.background_intensity[0] < 0:
            raise InvalidSpecError("background intensity must be non-negative")
        if not 0 < self.background_radius[1] <= 1:
            raise InvalidSpecError("background_radius is a fraction of the FOV radius")

    @classmethod
    def from_lines(cls, lines) -> PhantomSpec:
        """Parse ``key = lo, hi`` lines; ``background_intensity = none`` disables it."""
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for raw in lines:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in names:
                raise InvalidSpecError(f"unknown phantom key {key!r}")
            if value.lower() == "none":
                kwargs[key] = None
                continue
            parts = [p.strip() for p in value.split(",")]
            if len(parts) == 1:
                parts = parts * 2
            if len(parts) != 2:
                raise InvalidSpecError(f"{key}: expected 'lo, hi'")
            cast = int if key == "num_ellipses" else float
            try:
                kwargs[key] = (cast(parts[0]), cast(parts[1]))
            except ValueError as exc:
                raise InvalidSpecError(f"{key}: {exc}") from None
        return cls(**kwargs)


def ellipse_mask(geom: ImageGeometry, cx, cy, a, b, phi) -> np.ndarray:
    """Pixel centers inside the ellipse (all lengths in pixels, y up)."""
    x, y = geom.pixel_centers()
    x = x / geom.pixel_size - cx
    y = y / geom.pixel_size - cy
    c, s = math.cos(phi), math.sin(phi)
    u = x * c + y * s
    v = -x * s + y * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, geom: ImageGeometry, seed: int) -> ImageGrid:
    fov = geom.fov_radius / geom.pixel_size
    # half a pixel of clearance keeps every covered pixel center strictly inside the FOV
    room = fov - spec.axes[0] - 0.5
    if spec.num_ellipses[1] > 0 and room < spec.center_jitter[0]:
        raise InvalidSpecError("ellipses of the requested size cannot fit inside the FOV")

    rng = make_rng(seed)
    img = np.zeros(geom.shape)
    if spec.background_intensity is not None:
        radius = rng.uniform(*spec.background_radius) * fov
        level = rng.uniform(*spec.background_intensity)
        img += level * ellipse_mask(geom, 0.0, 0.0, radius, radius, 0.0)

    n = int(rng.integers(spec.num_ellipses[0], spec.num_ellipses[1] + 1))
    for _ in range(n):
        a, b = rng.uniform(*spec.axes, size=2)
        limit = fov - max(a, b) - 0.5
        if limit < spec.center_jitter[0]:
            a = b = min(a, b)
            limit = fov - a - 0.5
        r = rng.uniform(spec.center_jitter[0], min(spec.center_jitter[1], limit))
        psi = rng.uniform(0, 2 * math.pi)
        phi = rng.uniform(*spec.rotation)
        level = rng.uniform(*spec.intensity)
        img += level * ellipse_mask(geom, r * math.cos(psi), r * math.sin(psi), a, b, phi)

    img[~geom.fov_mask()] = 0.0
    return ImageGrid(geom, img)


def apply_poisson(s: Sinogram, mean_total_counts: float, seed: int) -> Sinogram:
    """Poisson realization of ``s`` rescaled to an expected total of ``mean_total_counts``."""
    if mean_total_counts <= 0:
        raise ValueError("mean_total_counts must be positive")
    values = np.asarray(s.values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("sinogram must be non-negative")
    total = values.sum()
    if total <= 0:
        raise ValueError("cannot scale an all-zero sinogram to a count level")
    means = values * (mean_total_counts / total)
    counts = make_rng(seed).poisson(means)
    return type(s)(s.geometry, counts.astype(np.float64))


def thin_counts(s: Sinogram, fraction: float, seed: int) -> Sinogram:
    """Binomial thinning: each count survives independently with ``fraction``."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    values = np.asarray(s.values)
    counts = np.rint(values)
    if np.any(values < 0) or np.any(counts != values):
        raise ValueError("thinning needs a non-negative integer count sinogram")
    if fraction == 1:
        return type(s)(s.geometry, values.copy())
    kept = make_rng(seed).binomial(counts.astype(np.int64), fraction)
    return type(s)(s.geometry, kept.astype(np.float64))
