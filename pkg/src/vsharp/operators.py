"""Parallel-MRI measurement operators.

Shapes follow the package-wide complex convention (axis ``-3`` is the
real/imaginary pair):

* image ``x``: ``(..., 2, H, W)``
* coil images / k-space ``y``: ``(..., n_c, 2, H, W)``
* sensitivities ``C``: ``(..., n_c, 2, H, W)``
* mask ``M``: ``(H, W)`` or ``(B, H, W)``, binary

The mask is applied multiplicatively (zero filling), so the forward and
adjoint operators keep fixed domain and codomain shapes.
"""

from __future__ import annotations

from typing import Union

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import Tensor

Array = Union[Tensor, np.ndarray]


def as_ctensor(value: Array, dtype=None) -> Tensor:
    """Wrap an array as a tensor, unpacking numpy complex dtypes to the 2-channel layout."""
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if np.iscomplexobj(arr):
        return Tensor(ad.from_complex(arr, dtype))
    return Tensor(arr, dtype=dtype)


def _check_coils(x: Tensor, C: Tensor) -> None:
    if C.ndim < 4 or C.shape[-3] != 2:
        raise ValueError(f"sensitivities must be (..., n_c, 2, H, W), got {C.shape}")
    if x.shape[-3:] != C.shape[-3:]:
        raise ValueError(f"image shape {x.shape} does not match sensitivities {C.shape}")


def _mask_view(mask: Array, ndim: int) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.ndim == 2:
        return m
    # (B, H, W) -> (B, 1, 1, H, W) to broadcast over coil and complex axes
    return m.reshape(m.shape[:-2] + (1,) * (ndim - m.ndim) + m.shape[-2:])


def expand(x: Array, C: Array) -> Tensor:
    """Coil encoding: one image to per-coil images ``C_k * x``."""
    x, C = as_ctensor(x), as_ctensor(C)
    _check_coils(x, C)
    xk = ad.reshape(x, x.shape[:-3] + (1,) + x.shape[-3:])
    return ad.cmul(xk, C)


def reduce(z: Array, C: Array) -> Tensor:
    """Coil combination ``sum_k conj(C_k) * z_k``; adjoint of :func:`expand`."""
    z, C = as_ctensor(z), as_ctensor(C)
    if z.shape[-4:] != C.shape[-4:]:
        raise ValueError(f"coil images {z.shape} do not match sensitivities {C.shape}")
    return ad.sum(ad.cmul(z, C, conj_b=True), axis=-4)


def apply_mask(y: Array, mask: Array) -> Tensor:
    y = as_ctensor(y)
    m = _mask_view(mask, y.ndim)
    if m.shape[-2:] != y.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match k-space {y.shape}")
    return ad.mul(y, m.astype(y.dtype, copy=False))


def forward_A(x: Array, C: Array, mask: Array) -> Tensor:
    """``M . F . E_C``: image to masked multi-coil k-space."""
    return apply_mask(ad.fft2c(expand(x, C)), mask)


def adjoint_A(y: Array, C: Array, mask: Array) -> Tensor:
    """``R_C . F^-1 . M``: masked multi-coil k-space to image."""
    return reduce(ad.ifft2c(apply_mask(y, mask)), C)


def normal_A(x: Array, C: Array, mask: Array) -> Tensor:
    """``A* A x``; the mask is idempotent so it is applied once."""
    return reduce(ad.ifft2c(apply_mask(ad.fft2c(expand(x, C)), mask)), C)


def predict_kspace(x: Array, C: Array) -> Tensor:
    """Full (unmasked) k-space ``F . E_C`` of a predicted image."""
    return ad.fft2c(expand(x, C))


def rss(y_full: Array) -> Tensor:
    """Root-sum-of-squares of the inverse-transformed coil images."""
    y = as_ctensor(y_full)
    if y.ndim < 4:
        raise ValueError(f"k-space must be (..., n_c, 2, H, W), got {y.shape}")
    mag = ad.cabs(ad.ifft2c(y))
    return ad.sqrt(ad.sum(mag * mag, axis=-3))


def sensitivity_norm(C: np.ndarray) -> np.ndarray:
    """Per-pixel ``sum_k |C_k|^2`` of a ``(..., n_c, 2, H, W)`` array."""
    return np.sum(C * C, axis=(-4, -3))


def normalize_sensitivities(C: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale maps so ``sum_k |C_k|^2`` is 1 wherever it was nonzero and 0 elsewhere."""
    norm = np.sqrt(sensitivity_norm(C))
    scale = np.where(norm > eps, 1.0 / np.where(norm > eps, norm, 1.0), 0.0)
    return (C * scale[..., None, None, :, :]).astype(C.dtype, copy=False)
