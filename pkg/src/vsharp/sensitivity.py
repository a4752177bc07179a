"""Coil-sensitivity estimation from ACS data and learned refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import Tensor
from vsharp.masks import SamplingMask
from vsharp.operators import as_ctensor

RSS_EPS = 1e-9


@dataclass
class AcsEstimate:
    """Initial maps ``(..., n_c, 2, H, W)`` built from ACS k-space only.

    ``support`` marks pixels where the low-pass RSS exceeded the guard; maps
    are zero elsewhere.
    """

    maps: np.ndarray
    support: np.ndarray
    acs: np.ndarray


def _acs_grid(mask: Union[SamplingMask, np.ndarray, list]) -> np.ndarray:
    if isinstance(mask, SamplingMask):
        return mask.acs
    if isinstance(mask, (list, tuple)):
        return np.stack([m.acs if isinstance(m, SamplingMask) else np.asarray(m) for m in mask])
    return np.asarray(mask)


def estimate_acs(y_masked, mask, eps: float = RSS_EPS) -> AcsEstimate:
    """Low-resolution coil images from the ACS block, divided by their RSS.

    ``mask`` is a :class:`SamplingMask`, a list of them (one per batch item),
    or a boolean ACS grid ``(H, W)`` / ``(B, H, W)``.
    """
    y = as_ctensor(y_masked).data
    acs = _acs_grid(mask).astype(bool)
    if not acs.any():
        raise ValueError("sampling mask has an empty ACS region")
    if acs.ndim == 3:
        acs = acs[:, None]
    coil = ad.to_complex(y) * acs
    low = ad.ifft2c_array(coil)
    rss = np.sqrt(np.sum(np.abs(low) ** 2, axis=-3, keepdims=True))
    support = rss > eps
    maps = np.where(support, low / np.where(support, rss, 1.0), 0)
    return AcsEstimate(ad.from_complex(maps, y.dtype), support[..., 0, :, :], acs)


def normalize(C: Tensor, eps: float = 1e-12) -> Tensor:
    """Differentiable rescale to ``sum_k |C_k|^2 = 1`` on the nonzero support."""
    norm = ad.sqrt(ad.sum(C * C, axis=(-4, -3), keepdims=True))
    keep = (norm.data > eps).astype(C.dtype)
    return C * keep / (norm + (1 - keep))


def refine(cs: AcsEstimate, s_net: Callable[[Tensor], Tensor]) -> Tensor:
    """Apply ``s_net`` coil by coil with shared weights, then renormalize.

    ``s_net`` maps ``(N, 2, H, W)`` to ``(N, 2, H, W)``; pixels outside the
    estimate's support stay zero.
    """
    maps = Tensor(cs.maps)
    shape = maps.shape
    if len(shape) < 4 or shape[-3] != 2:
        raise ValueError(f"sensitivity maps must be (..., n_c, 2, H, W), got {shape}")
    flat = ad.reshape(maps, (-1, 2) + shape[-2:])
    out = s_net(flat)
    if out.shape != flat.shape:
        raise ValueError(f"refinement network changed shape {flat.shape} -> {out.shape}")
    support = cs.support[..., None, None, :, :].astype(maps.dtype)
    return normalize(ad.reshape(out, shape) * support)
