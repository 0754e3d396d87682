"""MAE, multi-scale SSIM and the windowed balancing of the two.

Both losses come with analytic gradients with respect to the prediction so
training needs no autodiff framework.  MS-SSIM uses "valid" Gaussian
filtering; the gradient path applies the transposed (full) correlation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ScaleCountError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    scales: int = 3
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    alpha_window: int = 100

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("need at least one scale")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("stability constants must be positive")
        if self.alpha_window < 1:
            raise ValueError("alpha window must be >= 1")

    @property
    def min_side(self) -> int:
        return self.window_size * 2 ** (self.scales - 1)


def mae_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def mae_grad(pred, target) -> np.ndarray:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sign(diff) / diff.size


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable valid correlation over the last two axes."""
    out = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(out, g.size, axis=-2) @ g


def _filter_valid_adjoint(grad, g):
    k = g.size - 1
    pad = [(0, 0)] * (grad.ndim - 2) + [(k, k), (k, k)]
    return _filter_valid(np.pad(grad, pad), g[::-1])


def _pool(img):
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    x = img[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _pool_adjoint(grad, shape):
    out = np.zeros(shape)
    up = 0.25 * np.repeat(np.repeat(grad, 2, axis=-2), 2, axis=-1)
    out[..., :up.shape[-2], :up.shape[-1]] = up
    return out


def _scale_terms(a, b, g, c1, c2, luminance):
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa, sbb, sab = _filter_valid(a * a, g), _filter_valid(b * b, g), _filter_valid(a * b, g)
    var_a = saa - mu_a * mu_a
    var_b = sbb - mu_b * mu_b
    cov = sab - mu_a * mu_b
    num_cs = 2 * cov + c2
    den_cs = var_a + var_b + c2
    cs = num_cs / den_cs
    cache = dict(mu_a=mu_a, mu_b=mu_b, num_cs=num_cs, den_cs=den_cs, cs=cs)
    if luminance:
        num_l = 2 * mu_a * mu_b + c1
        den_l = mu_a * mu_a + mu_b * mu_b + c1
        lum = num_l / den_l
        cache.update(num_l=num_l, den_l=den_l, lum=lum)
        return (lum * cs).mean(axis=(-2, -1)), cache
    return cs.mean(axis=(-2, -1)), cache


def _scale_grad(a, b, g, cache, upstream, luminance):
    """Gradient of mean(term map) w.r.t. ``a`` times per-image ``upstream``."""
    n = cache["cs"].shape[-2] * cache["cs"].shape[-1]
    up = upstream[..., None, None] / n
    mu_a, mu_b = cache["mu_a"], cache["mu_b"]
    cs, den_cs = cache["cs"], cache["den_cs"]
    if luminance:
        lum = cache["lum"]
        d_cs = up * lum
        d_lum = up * cs
        d_mu_a = d_lum * (2 * mu_b - 2 * mu_a * lum) / cache["den_l"]
    else:
        d_cs = up
        d_mu_a = 0.0
    d_cov = d_cs * 2 / den_cs
    d_var = -d_cs * cs / den_cs
    # cov = sab - mu_a mu_b ; var_a = saa - mu_a^2
    d_mu_a = d_mu_a - d_cov * mu_b - 2 * d_var * mu_a
    return (_filter_valid_adjoint(d_mu_a, g)
            + 2 * a * _filter_valid_adjoint(d_var, g)
            + b * _filter_valid_adjoint(d_cov, g))


def _check_sizes(pred, target, cfg):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if min(pred.shape[-2:]) < cfg.min_side:
        raise ScaleCountError(
            f"images of side {min(pred.shape[-2:])} cannot support {cfg.scales} scales "
            f"with a {cfg.window_size}-pixel window (need {cfg.min_side})")


def _dynamic_range(target, dynamic_range):
    if dynamic_range is not None:
        return float(dynamic_range)
    peak = float(np.max(target))
    return peak if peak > 0 else 1.0


def ms_ssim_similarity(pred, target, cfg: LossConfig = LossConfig(), dynamic_range=None,
                       with_grad: bool = False):
    """Per-image MS-SSIM similarity for ``(..., H, W)`` stacks.

    Luminance enters at the coarsest scale only.  ``dynamic_range`` defaults
    to the maximum of ``target``.  With ``with_grad`` also returns
    d(similarity)/d(pred), per image.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_sizes(pred, target, cfg)
    L = _dynamic_range(target, dynamic_range)
    c1, c2 = (cfg.k1 * L) ** 2, (cfg.k2 * L) ** 2
    g = gaussian_window(cfg.window_size, cfg.window_sigma)
    preds, targets, terms, caches = [pred], [target], [], []
    for j in range(cfg.scales):
        coarsest = j == cfg.scales - 1
        term, cache = _scale_terms(preds[-1], targets[-1], g, c1, c2, coarsest)
        terms.append(term)
        caches.append(cache)
        if not coarsest:
            preds.append(_pool(preds[-1]))
            targets.append(_pool(targets[-1]))
    sim = np.prod(terms, axis=0)
    if not with_grad:
        return sim
    grad = None
    for j in reversed(range(cfg.scales)):
        others = np.prod([t for i, t in enumerate(terms) if i != j], axis=0)
        gj = _scale_grad(preds[j], targets[j], g, caches[j], np.asarray(others),
                         j == cfg.scales - 1)
        grad = gj if grad is None else gj + grad
        if j > 0:
            grad = _pool_adjoint(grad, preds[j - 1].shape)
    return sim, grad


def ms_ssim_loss(pred, target, cfg: LossConfig = LossConfig(), dynamic_range=None) -> float:
    """1 - MS-SSIM, averaged over any leading batch dimensions."""
    return float(np.mean(1.0 - ms_ssim_similarity(pred, target, cfg, dynamic_range)))


def ms_ssim_loss_grad(pred, target, cfg: LossConfig = LossConfig(), dynamic_range=None):
    sim, grad = ms_ssim_similarity(pred, target, cfg, dynamic_range, with_grad=True)
    count = sim.size
    return float(np.mean(1.0 - sim)), -grad / count


class AlphaBalancer:
    """Running window of raw MAE and MS-SSIM losses setting the mixing weight.

    alpha = sum(MAE) / (sum(MAE) + sum(MS-SSIM)) over the previous ``window``
    iterations; the current iteration is not part of its own window.
    """

    def __init__(self, window: int = 100, history=()):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._mae = deque(maxlen=window)
        self._ssim = deque(maxlen=window)
        for m, s in history:
            self.push(m, s)

    @property
    def history(self) -> list[tuple[float, float]]:
        return list(zip(self._mae, self._ssim))

    def alpha(self) -> float:
        if not self._mae:
            return 0.5
        mae_sum = sum(self._mae)
        ssim_sum = sum(self._ssim)
        if mae_sum + ssim_sum == 0:
            return 0.5
        return mae_sum / (mae_sum + ssim_sum)

    def push(self, mae: float, ssim: float) -> None:
        self._mae.append(float(mae))
        self._ssim.append(float(ssim))


def balanced_loss(pred, target, balancer: AlphaBalancer, cfg: LossConfig = LossConfig(),
                  with_grad: bool = False):
    """(1 - alpha) MAE + alpha MS-SSIM with alpha from the balancer window.

    Returns ``(loss, parts)`` where ``parts`` holds mae, ms_ssim and alpha
    (and ``grad`` when requested); the balancer then records this step.
    """
    alpha = balancer.alpha()
    mae = mae_loss(pred, target)
    if with_grad:
        ssim, g_ssim = ms_ssim_loss_grad(pred, target, cfg)
    else:
        ssim = ms_ssim_loss(pred, target, cfg)
    loss = (1 - alpha) * mae + alpha * ssim
    parts = dict(mae=mae, ms_ssim=ssim, alpha=alpha)
    if with_grad:
        parts["grad"] = (1 - alpha) * mae_grad(pred, target) + alpha * g_ssim
    balancer.push(mae, ssim)
    return loss, parts
