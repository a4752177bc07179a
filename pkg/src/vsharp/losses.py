"""Training losses and evaluation metrics.

All functions take the reference first (``v``, ground truth) and the
estimate second (``w``), accept :class:`~vsharp.autodiff.Tensor` or numpy
input, and reduce over the whole array, so a batch is treated as one
concatenated sample.  Image-domain functions expect real ``(..., H, W)``
arrays; k-space functions expect the 2-channel complex layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import Tensor

SSIM_WINDOW = 7
SSIM_C1 = 0.01
SSIM_C2 = 0.03
LOG_SIZE = 15
LOG_SIGMA = 2.5


def _t(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(np.asarray(a))


def _as_batch(a: Tensor) -> Tensor:
    """Reshape ``(..., H, W)`` to ``(N, 1, H, W)`` for filtering."""
    return ad.reshape(a, (-1, 1) + a.shape[-2:])


def l1(v, w) -> Tensor:
    """Sum of absolute differences."""
    return ad.sum(ad.abs(ad.sub(_t(v), _t(w))))


def _box(v: Tensor, size: int) -> Tensor:
    kernel = np.full((1, 1, size, size), 1.0 / size**2, dtype=v.dtype)
    return ad.conv2d(v, Tensor(kernel))


def ssim(v, w, window: int = SSIM_WINDOW, normalize: bool = True) -> Tensor:
    """Mean SSIM over all dense ``window x window`` patches.

    Constants 0.01 and 0.03 enter the formula as they are, with both images
    first divided by the maximum absolute value of ``v``.  Patch statistics
    use population (1/N) moments.
    """
    v, w = _t(v), _t(w)
    if v.shape != w.shape:
        raise ValueError(f"ssim shape mismatch {v.shape} vs {w.shape}")
    if normalize:
        if np.any(v.data):
            peak = ad.max_abs(v)
            v, w = v / peak, w / peak
    vb, wb = _as_batch(v), _as_batch(w)
    mu_v, mu_w = _box(vb, window), _box(wb, window)
    var_v = _box(vb * vb, window) - mu_v * mu_v
    var_w = _box(wb * wb, window) - mu_w * mu_w
    cov = _box(vb * wb, window) - mu_v * mu_w
    num = (2 * mu_v * mu_w + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_v * mu_v + mu_w * mu_w + SSIM_C1) * (var_v + var_w + SSIM_C2)
    return ad.mean(num / den)


def ssim_loss(v, w, window: int = SSIM_WINDOW) -> Tensor:
    return 1 - ssim(v, w, window)


@lru_cache(maxsize=8)
def log_kernel(size: int = LOG_SIZE, sigma: float = LOG_SIGMA) -> np.ndarray:
    """Laplacian-of-Gaussian sampled on an integer grid, shifted to zero sum."""
    half = size // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    r2 = (x * x + y * y) / (2 * sigma**2)
    k = -(1.0 / (np.pi * sigma**4)) * (1 - r2) * np.exp(-r2)
    return k - k.mean()


def laplacian_of_gaussian(v) -> Tensor:
    v = _t(v)
    k = log_kernel().astype(v.dtype)[None, None]
    return ad.conv2d(_as_batch(v), Tensor(k), padding=LOG_SIZE // 2)


def hfen(v, w, order: int = 1) -> Tensor:
    """``||LoG(v) - LoG(w)||_p / ||LoG(v)||_p`` with ``p = order`` in {1, 2}."""
    if order not in (1, 2):
        raise ValueError(f"HFEN order must be 1 or 2, got {order}")
    lv, lw = laplacian_of_gaussian(v), laplacian_of_gaussian(w)
    diff = ad.sub(lv, lw)
    if order == 1:
        return ad.sum(ad.abs(diff)) / ad.sum(ad.abs(lv))
    return ad.sqrt(ad.sum(diff * diff)) / ad.sqrt(ad.sum(lv * lv))


def _modulus(a: Tensor, complex_input: bool) -> Tensor:
    return ad.cabs(a) if complex_input else ad.abs(a)


def nmse(v, w) -> Tensor:
    """``||v - w||_2^2 / ||v||_2^2``; complex inputs use the 2-channel layout."""
    v, w = _t(v), _t(w)
    d = ad.sub(v, w)
    return ad.sum(d * d) / ad.sum(v * v)


def nmae(v, w, complex_input: bool = True) -> Tensor:
    """``||v - w||_1 / ||v||_1``; for complex data the 1-norm sums moduli."""
    v, w = _t(v), _t(w)
    return ad.sum(_modulus(ad.sub(v, w), complex_input)) / ad.sum(_modulus(v, complex_input))


def psnr(v, w) -> float:
    """Peak signal-to-noise ratio in dB with the peak taken from ``v``."""
    v = np.asarray(getattr(v, "data", v), dtype=np.float64)
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    mse = np.mean((v - w) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(np.max(np.abs(v)) ** 2 / mse))


def step_weights(T: int) -> np.ndarray:
    """``w_t = 10**((t - T)/(T - 1))`` for t = 1..T; a single step gets weight 1."""
    if T < 1:
        raise ValueError("need at least one step")
    if T == 1:
        return np.ones(1)
    t = np.arange(1, T + 1)
    return 10.0 ** ((t - T) / (T - 1))


def image_loss(x_gt, x_t) -> dict:
    return {
        "l1": l1(x_gt, x_t),
        "ssim_loss": ssim_loss(x_gt, x_t),
        "hfen1": hfen(x_gt, x_t, 1),
        "hfen2": hfen(x_gt, x_t, 2),
    }


def kspace_loss(y_gt, y_t) -> dict:
    return {"nmse": nmse(y_gt, y_t), "nmae": nmae(y_gt, y_t)}


@dataclass
class LossReport:
    total: Tensor
    weights: np.ndarray
    terms: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"total": float(self.total.data)}
        for name in self.terms[0] if self.terms else ():
            out[name] = float(np.dot(self.weights, [step[name] for step in self.terms]))
        return out


def weighted_multistep_loss(x_gt, xs, y_gt, ys) -> LossReport:
    """``sum_t w_t [L_X(x, |x^t|) + L_Y(y, y^t)]``.

    ``x_gt`` is a real magnitude image, ``xs`` complex per-step predictions
    (compared through their magnitude), ``y_gt``/``ys`` complex k-space.
    """
    if len(xs) != len(ys) or not xs:
        raise ValueError(f"need matching non-empty predictions, got {len(xs)} images and {len(ys)} k-spaces")
    weights = step_weights(len(xs))
    x_gt, y_gt = _t(x_gt), _t(y_gt)
    total = None
    terms = []
    for wt, x_t, y_t in zip(weights, xs, ys):
        parts = {**image_loss(x_gt, ad.cabs(_t(x_t))), **kspace_loss(y_gt, _t(y_t))}
        step_total = None
        for value in parts.values():
            step_total = value if step_total is None else step_total + value
        weighted = step_total * float(wt)
        total = weighted if total is None else total + weighted
        terms.append({k: float(v.data) for k, v in parts.items()})
    return LossReport(total, weights, terms)


def evaluate(v, w) -> dict:
    """SSIM / pSNR / NMSE of a real magnitude estimate against a reference."""
    return {
        "ssim": float(ssim(v, w).data),
        "psnr": psnr(v, w),
        "nmse": float(nmse(v, w).data),
    }
