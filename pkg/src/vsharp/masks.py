"""Retrospective Cartesian undersampling masks with fully-sampled ACS regions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

__all__ = [
    "MaskError",
    "SamplingMask",
    "equispaced_mask",
    "full_mask",
    "make_mask",
    "poisson_disc_mask",
]


class MaskError(ValueError):
    """The requested mask cannot be generated."""


@dataclass
class SamplingMask:
    """A binary k-space selection with its autocalibration region.

    Attributes
    ----------
    grid : np.ndarray
        ``(H, W)`` uint8 array, 1 where k-space is acquired.
    acs : np.ndarray
        ``(H, W)`` bool array marking the fully-sampled calibration region.
    acs_fraction, requested_accel : float
        Generation parameters.
    kind : str
        ``"equispaced"``, ``"poisson"`` or ``"full"``.
    seed : int
    params : dict
        Generator-specific extras (Poisson radius profile).
    """

    grid: np.ndarray
    acs: np.ndarray
    acs_fraction: float
    requested_accel: float
    kind: str = "equispaced"
    seed: int = 0
    params: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def achieved_accel(self) -> float:
        return self.grid.size / max(int(self.grid.sum()), 1)

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "acs_fraction": self.acs_fraction,
            "requested_accel": self.requested_accel,
            "achieved_accel": self.achieved_accel,
            **self.params,
        }


def full_mask(H: int, W: int) -> SamplingMask:
    ones = np.ones((H, W), dtype=np.uint8)
    return SamplingMask(ones, ones.astype(bool), 1.0, 1.0, kind="full")


def _check_args(H: int, W: int, accel: float, acs_fraction: float) -> None:
    if H < 1 or W < 1:
        raise MaskError(f"mask size must be positive, got {H}x{W}")
    if accel < 1:
        raise MaskError(f"acceleration must be >= 1, got {accel}")
    if not 0 < acs_fraction < 1:
        raise MaskError(f"acs_fraction must lie in (0, 1), got {acs_fraction}")


def equispaced_mask(H: int, W: int, accel: float, acs_fraction: float, seed: int = 0) -> SamplingMask:
    """Vertical rectilinear equispaced mask.

    Whole columns are acquired: ``ceil(acs_fraction * W)`` central ACS
    columns plus equally spaced columns, with a seeded random offset, so that
    the total column count is ``round(W / accel)``.
    """
    _check_args(H, W, accel, acs_fraction)
    if acs_fraction * W >= W / accel and accel > 1:
        raise MaskError(f"ACS fraction {acs_fraction} already exceeds the 1/{accel} sampling budget")
    n_acs = math.ceil(acs_fraction * W)
    n_target = max(round(W / accel), n_acs)
    n_extra = n_target - n_acs

    cols = np.zeros(W, dtype=bool)
    start = W // 2 - n_acs // 2
    cols[start : start + n_acs] = True
    acs_cols = cols.copy()

    rng = np.random.default_rng(seed)
    if n_extra > 0:
        # equal spacing over the non-ACS columns gives an exact line count
        free = np.flatnonzero(~cols)
        step = free.size / n_extra
        offset = rng.uniform(0, step)
        cols[free[np.floor(offset + step * np.arange(n_extra)).astype(int)]] = True

    grid = np.broadcast_to(cols, (H, W)).astype(np.uint8)
    acs = np.broadcast_to(acs_cols, (H, W)).copy()
    return SamplingMask(grid, acs, acs_fraction, accel, kind="equispaced", seed=seed)


def _acs_rectangle(H: int, W: int, acs_fraction: float) -> np.ndarray:
    side = math.sqrt(acs_fraction)
    h, w = max(1, math.ceil(side * H)), max(1, math.ceil(side * W))
    acs = np.zeros((H, W), dtype=bool)
    r0, c0 = H // 2 - h // 2, W // 2 - w // 2
    acs[r0 : r0 + h, c0 : c0 + w] = True
    return acs


@numba.njit(cache=True)
def _bridson(H, W, r0, alpha, acs, seed, k):
    np.random.seed(seed)
    occ = np.zeros((H, W), dtype=np.uint8)
    cy, cx = H // 2, W // 2
    dmax = math.sqrt(max(cy, H - 1 - cy) ** 2 + max(cx, W - 1 - cx) ** 2)
    if dmax == 0:
        dmax = 1.0
    py = np.empty(H * W, dtype=np.int64)
    px = np.empty(H * W, dtype=np.int64)
    active = np.empty(H * W, dtype=np.int64)
    n_points = 0
    n_active = 0

    # seed point: first random non-ACS pixel
    for _ in range(10 * H * W):
        y = np.random.randint(0, H)
        x = np.random.randint(0, W)
        if not acs[y, x]:
            occ[y, x] = 1
            py[0], px[0] = y, x
            active[0] = 0
            n_points, n_active = 1, 1
            break

    while n_active > 0:
        slot = np.random.randint(0, n_active)
        p = active[slot]
        y, x = py[p], px[p]
        r = r0 * (1.0 + alpha * math.sqrt((y - cy) ** 2 + (x - cx) ** 2) / dmax)
        found = False
        for _ in range(k):
            rr = r * (1.0 + np.random.random())
            th = 2.0 * math.pi * np.random.random()
            ny = int(round(y + rr * math.sin(th)))
            nx = int(round(x + rr * math.cos(th)))
            if ny < 0 or ny >= H or nx < 0 or nx >= W or acs[ny, nx] or occ[ny, nx]:
                continue
            rc = r0 * (1.0 + alpha * math.sqrt((ny - cy) ** 2 + (nx - cx) ** 2) / dmax)
            reach = int(math.ceil(rc))
            ok = True
            for yy in range(max(0, ny - reach), min(H, ny + reach + 1)):
                for xx in range(max(0, nx - reach), min(W, nx + reach + 1)):
                    if occ[yy, xx] and (yy - ny) ** 2 + (xx - nx) ** 2 < rc * rc:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                occ[ny, nx] = 1
                py[n_points], px[n_points] = ny, nx
                active[n_active] = n_points
                n_points += 1
                n_active += 1
                found = True
                break
        if not found:
            n_active -= 1
            active[slot] = active[n_active]
    return occ


def poisson_radius(H: int, W: int, r0: float, alpha: float) -> np.ndarray:
    """Exclusion radius at every pixel: ``r0 * (1 + alpha * d / d_max)``."""
    cy, cx = H // 2, W // 2
    yy, xx = np.mgrid[:H, :W]
    d = np.hypot(yy - cy, xx - cx)
    dmax = max(math.hypot(max(cy, H - 1 - cy), max(cx, W - 1 - cx)), 1.0)
    return r0 * (1 + alpha * d / dmax)


def poisson_disc_mask(
    H: int,
    W: int,
    accel: float,
    acs_fraction: float,
    seed: int = 0,
    r0: float = 0.5,
    candidates: int = 30,
    max_iter: int = 60,
    tol: float = 0.05,
) -> SamplingMask:
    """Variable-density Poisson-disc mask with a centred rectangular ACS block.

    The exclusion radius grows linearly with distance from the k-space
    centre; its slope ``alpha`` is found by bisection so that the achieved
    acceleration lands within ``tol`` of ``accel`` (never worse than 10%).
    The ACS block covers ``acs_fraction`` of the area.  With the default
    sub-pixel ``r0`` the innermost disc (where the radius stays below one
    pixel) is fully sampled and density falls off smoothly outside it.
    """
    _check_args(H, W, accel, acs_fraction)
    acs = _acs_rectangle(H, W, acs_fraction)
    if acs.sum() * accel >= H * W and accel > 1:
        raise MaskError(f"ACS fraction {acs_fraction} already exceeds the 1/{accel} sampling budget")

    def build(alpha: float) -> np.ndarray:
        occ = _bridson(H, W, float(r0), float(alpha), acs, int(seed) % (2**32), int(candidates))
        return (occ.astype(bool) | acs).astype(np.uint8)

    def accel_of(grid: np.ndarray) -> float:
        return grid.size / grid.sum()

    lo, hi = 0.0, 1.0
    grid_lo = build(lo)
    best_alpha, best = lo, grid_lo
    if accel_of(grid_lo) < accel and abs(accel_of(grid_lo) / accel - 1) > tol:
        for _ in range(max_iter):
            grid_hi = build(hi)
            if accel_of(grid_hi) >= accel:
                break
            lo, hi = hi, 2 * hi
        else:
            raise MaskError(f"could not bracket acceleration {accel} for a {H}x{W} Poisson mask")
        best_alpha, best = hi, grid_hi
        for _ in range(max_iter):
            if abs(accel_of(best) / accel - 1) <= tol:
                break
            mid = 0.5 * (lo + hi)
            grid_mid = build(mid)
            if abs(accel_of(grid_mid) / accel - 1) < abs(accel_of(best) / accel - 1):
                best_alpha, best = mid, grid_mid
            if accel_of(grid_mid) < accel:
                lo = mid
            else:
                hi = mid
    if abs(accel_of(best) / accel - 1) > 0.1:
        raise MaskError(f"Poisson bisection reached {accel_of(best):.3f}, requested {accel} (+-10%)")
    return SamplingMask(
        best,
        acs,
        acs_fraction,
        accel,
        kind="poisson",
        seed=seed,
        params={"r0": float(r0), "alpha": float(best_alpha)},
    )


def make_mask(kind: str, H: int, W: int, accel: float, acs_fraction: Optional[float] = None, seed: int = 0):
    """Dispatch by name; ``acs_fraction`` defaults to the 4x/8x/16x pairing 8%/4%/2%."""
    if acs_fraction is None:
        acs_fraction = default_acs_fraction(accel)
    if kind == "equispaced":
        return equispaced_mask(H, W, accel, acs_fraction, seed)
    if kind == "poisson":
        return poisson_disc_mask(H, W, accel, acs_fraction, seed)
    if kind == "full":
        return full_mask(H, W)
    raise MaskError(f"unknown mask kind {kind!r}")


def default_acs_fraction(accel: float) -> float:
    return {4: 0.08, 8: 0.04, 16: 0.02}.get(int(round(accel)), min(0.32 / accel, 0.08))
