"""Quantitative image metrics: VOI SNR and bias, masked MAE, line-profile FWHM."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ImageGeometry
from .maskgen import disk_footprint
from .objective import LossConfig, ms_ssim_similarity


class MetricError(ValueError):
    pass


class UndefinedFwhmError(MetricError):
    pass


@dataclass(frozen=True)
class VOI:
    center: tuple[int, int]
    radius: int = 5

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("VOI radius must be >= 1")

    def mask(self, shape) -> np.ndarray:
        rows, cols = np.ogrid[:shape[0], :shape[1]]
        r0, c0 = self.center
        return (rows - r0) ** 2 + (cols - c0) ** 2 <= self.radius ** 2

    def inside(self, geom: ImageGeometry) -> bool:
        m = self.mask(geom.shape)
        return bool(m.sum() == (m & geom.fov_mask()).sum())


def _voi_values(img, voi: VOI) -> np.ndarray:
    img = np.asarray(getattr(img, "values", img), dtype=np.float64)
    values = img[voi.mask(img.shape)]
    if values.size < 2:
        raise MetricError(f"VOI at {voi.center} has fewer than two pixels")
    return values


def snr_voi(img, vois) -> float:
    """Mean over VOIs of mean / sample standard deviation.

    A VOI with zero spread is skipped with a warning; if none remain the
    SNR is undefined.
    """
    vois = list(vois)
    if not vois:
        raise MetricError("need at least one VOI")
    ratios = []
    for voi in vois:
        values = _voi_values(img, voi)
        sd = values.std(ddof=1)
        if sd == 0:
            warnings.warn(f"VOI at {voi.center} has zero standard deviation; skipped")
            continue
        ratios.append(values.mean() / sd)
    if not ratios:
        raise MetricError("every VOI has zero standard deviation")
    return float(np.mean(ratios))


def bias_voi(test_img, ref_img, vois) -> float:
    """Average over VOIs of the percent difference of VOI means."""
    vois = list(vois)
    if not vois:
        raise MetricError("need at least one VOI")
    out = []
    for voi in vois:
        ref_mean = _voi_values(ref_img, voi).mean()
        if ref_mean == 0:
            raise MetricError(f"reference mean is zero in VOI at {voi.center}")
        out.append(100.0 * (_voi_values(test_img, voi).mean() - ref_mean) / ref_mean)
    return float(np.mean(out))


def mae_nonzero(test_img, ref_img) -> float:
    test = np.asarray(getattr(test_img, "values", test_img), dtype=np.float64)
    ref = np.asarray(getattr(ref_img, "values", ref_img), dtype=np.float64)
    if test.shape != ref.shape:
        raise MetricError(f"shape mismatch {test.shape} vs {ref.shape}")
    keep = ref != 0
    if not keep.any():
        raise MetricError("reference image is all zero")
    return float(np.abs(test[keep] - ref[keep]).mean())


def place_vois(ref_img, geom: ImageGeometry, count: int = 3, radius: int = 5,
               min_fraction: float = 0.2) -> list[VOI]:
    """Greedy non-overlapping disks at the lowest local coefficient of variation.

    Candidates must lie fully inside the FOV and have a local mean of at
    least ``min_fraction`` of the image maximum, so flat zero regions are
    never chosen.
    """
    img = np.asarray(getattr(ref_img, "values", ref_img), dtype=np.float64)
    foot = disk_footprint(radius).astype(np.float64)
    foot /= foot.sum()
    mean = ndimage.correlate(img, foot, mode="constant")
    sq = ndimage.correlate(img * img, foot, mode="constant")
    sd = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    outside = ~geom.fov_mask()
    fully_inside = ndimage.correlate(outside.astype(np.float64), foot, mode="constant",
                                     cval=1.0) == 0
    ok = fully_inside & (mean >= min_fraction * img.max()) & (mean > 0)
    cov = np.full(img.shape, np.inf)
    cov[ok] = sd[ok] / mean[ok]
    chosen: list[VOI] = []
    for flat in np.argsort(cov, axis=None, kind="stable"):
        if not np.isfinite(cov.flat[flat]) or len(chosen) == count:
            break
        r, c = divmod(int(flat), img.shape[1])
        if all((r - v.center[0]) ** 2 + (c - v.center[1]) ** 2 > (2 * radius) ** 2
               for v in chosen):
            chosen.append(VOI((r, c), radius))
    if len(chosen) < count:
        raise MetricError(f"only {len(chosen)} of {count} VOIs could be placed")
    return chosen


# -- line profiles ------------------------------------------------------------

@dataclass(frozen=True)
class LineProfile:
    distance: np.ndarray
    values: np.ndarray
    fwhm: float


def _crossing(x0, x1, y0, y1, level):
    if y1 == y0:
        return x0
    return x0 + (level - y0) * (x1 - x0) / (y1 - y0)


def fwhm_of(distance, values) -> float:
    """Width at half height above the profile minimum around the global peak."""
    d = np.asarray(distance, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    peak = int(np.argmax(v))
    base = v.min()
    if v[peak] <= base:
        raise UndefinedFwhmError("flat profile")
    half = base + 0.5 * (v[peak] - base)
    left = np.flatnonzero(v[:peak + 1] < half)
    right = np.flatnonzero(v[peak:] < half)
    if left.size == 0 or right.size == 0:
        raise UndefinedFwhmError("profile does not fall below half maximum on both sides")
    i = left[-1]
    j = peak + right[0]
    x_left = _crossing(d[i], d[i + 1], v[i], v[i + 1], half)
    x_right = _crossing(d[j - 1], d[j], v[j - 1], v[j], half)
    return float(x_right - x_left)


def line_profile_fwhm(img, p0, p1, samples: int = 64, pixel_size: float = 1.0) -> LineProfile:
    """Bilinear profile from ``p0`` to ``p1`` (row, col) and its FWHM in length units."""
    arr = np.asarray(getattr(img, "values", img), dtype=np.float64)
    if samples < 16:
        raise ValueError("need at least 16 samples")
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    for p in (p0, p1):
        if not (0 <= p[0] <= arr.shape[0] - 1 and 0 <= p[1] <= arr.shape[1] - 1):
            raise ValueError(f"segment end {tuple(p)} lies outside the image")
    t = np.linspace(0.0, 1.0, samples)
    pts = p0[:, None] + (p1 - p0)[:, None] * t[None, :]
    values = ndimage.map_coordinates(arr, pts, order=1)
    distance = t * np.hypot(*(p1 - p0)) * pixel_size
    return LineProfile(distance, values, fwhm_of(distance, values))


# -- reports -----------------------------------------------------------------

METRIC_COLUMNS = ["volume", "method", "snr", "bias_percent", "mae_nonzero", "ms_ssim"]


@dataclass
class MetricReport:
    volume: int
    method: str
    snr: float
    bias_percent: float
    mae_nonzero: float
    ms_ssim: float
    fwhm: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.volume, self.method, self.snr, self.bias_percent, self.mae_nonzero,
                self.ms_ssim]


def evaluate_volume(volume: int, method: str, img, ref, vois,
                    loss_cfg: LossConfig = LossConfig()) -> MetricReport:
    img = np.asarray(getattr(img, "values", img), dtype=np.float64)
    ref = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            snr = snr_voi(img, vois)
        except MetricError:
            snr = math.nan
    return MetricReport(volume, method, snr, bias_voi(img, ref, vois), mae_nonzero(img, ref),
                        float(ms_ssim_similarity(img, ref, loss_cfg)))


def write_metrics(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for rep in reports:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in rep.row()])


def read_metrics(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        return [MetricReport(int(r["volume"]), r["method"], float(r["snr"]),
                             float(r["bias_percent"]), float(r["mae_nonzero"]),
                             float(r["ms_ssim"]))
                for r in csv.DictReader(fh)]


def write_profile(path, profile: LineProfile) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance", "value"])
        for d, v in zip(profile.distance, profile.values):
            w.writerow([repr(float(d)), repr(float(v))])
