"""z-step regularizers behind one calling convention.

Every denoiser is called as ``denoiser(z, x, u_over_rho, rho)`` with complex
images ``(B, 2, H, W)`` and a positive scalar penalty, and returns the next
auxiliary image of the same shape.  The classical proximal maps solve the
z-subproblem exactly and serve as verification references; :class:`UNet`
is the learned option.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import Tensor
from vsharp.nn import Conv2d, Module

__all__ = [
    "IdentityDenoiser",
    "ProxQuadratic",
    "Residual",
    "SoftThreshold",
    "UNet",
    "UNetDenoiser",
    "build_denoiser",
    "prox_quadratic",
    "soft_threshold",
    "unet_parameter_count",
]


def prox_quadratic(z, x, u_over_rho, lam, rho) -> Tensor:
    """Exact minimiser of ``lam*||z||^2 + rho/2*||x - z + u/rho||^2``."""
    if np.any(np.asarray(getattr(lam, "data", lam)) < 0):
        raise ValueError("lambda must be non-negative")
    v = ad.add(x, u_over_rho)
    return ad.div(ad.mul(v, rho), ad.add(ad.mul(rho, 1.0), 2.0 * lam))


def soft_threshold(z, x, u_over_rho, lam, rho) -> Tensor:
    """Exact minimiser of ``lam*||z||_1 + rho/2*||x - z + u/rho||^2``.

    Complex soft-thresholding: magnitudes shrink by ``lam/rho``, phase kept.
    """
    v = ad.add(x, u_over_rho)
    mag = ad.cabs(v)
    shrunk = ad.relu(ad.sub(mag, ad.div(lam, rho)))
    safe = np.where(mag.data > 0, 0.0, 1.0).astype(v.dtype)
    scale = ad.div(shrunk, ad.add(mag, safe))
    return ad.mul(v, ad.reshape(scale, scale.shape[:-2] + (1,) + scale.shape[-2:]))


class IdentityDenoiser:
    """Returns ``z`` unchanged."""

    kind = "identity"

    def __call__(self, z, x, u_over_rho, rho):
        return z

    def spec(self) -> dict:
        return {"kind": self.kind}


class ProxQuadratic:
    kind = "prox-quadratic"

    def __init__(self, lam: float):
        self.lam = lam

    def __call__(self, z, x, u_over_rho, rho):
        return prox_quadratic(z, x, u_over_rho, self.lam, rho)

    def regularizer(self, z: np.ndarray) -> float:
        return float(np.sum(z * z))

    def spec(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam}


class SoftThreshold:
    kind = "soft-threshold"

    def __init__(self, lam: float):
        self.lam = lam

    def __call__(self, z, x, u_over_rho, rho):
        return soft_threshold(z, x, u_over_rho, self.lam, rho)

    def regularizer(self, z: np.ndarray) -> float:
        return float(np.sum(np.abs(ad.to_complex(z))))

    def spec(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam}


class UNet(Module):
    """Plain 2D U-Net: two 3x3 conv+ReLU per level, average-pool down,
    bilinear up, concatenated skips and a final 1x1 projection.

    Inputs whose spatial size is not a multiple of ``2**(scales-1)`` are
    edge-replicated up to one and cropped back afterwards.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        scales: int = 2,
        filters: int = 8,
        seed: int = 0,
        dtype=np.float32,
    ):
        if scales < 1:
            raise ValueError("a U-Net needs at least one scale")
        rng = np.random.default_rng(seed)
        self.scales = scales
        self.filters = filters
        self.in_channels = in_channels
        self.out_channels = out_channels

        def conv(cin, cout, k=3):
            return Conv2d(cin, cout, k, padding=k // 2, rng=rng, dtype=dtype)

        widths = [filters * 2**i for i in range(scales)]
        self.down = []
        cin = in_channels
        for w in widths:
            self.down.append([conv(cin, w), conv(w, w)])
            cin = w
        self.up = []
        for i in reversed(range(scales - 1)):
            w = widths[i]
            self.up.append([conv(widths[i + 1], w), conv(2 * w, w), conv(w, w)])
        self.head = conv(widths[0], out_channels, k=1)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        m = 2 ** (self.scales - 1)
        ph, pw = (-H) % m, (-W) % m
        if ph or pw:
            x = ad.replication_pad2d(x, (0, pw, 0, ph))

        skips = []
        for level, (c1, c2) in enumerate(self.down):
            if level:
                x = ad.avg_pool2d(x)
            x = ad.relu(c2(ad.relu(c1(x))))
            skips.append(x)
        skips.pop()
        for c_up, c1, c2 in self.up:
            x = ad.relu(c_up(ad.upsample_bilinear2d(x)))
            x = ad.concat([skips.pop(), x], axis=1)
            x = ad.relu(c2(ad.relu(c1(x))))
        out = self.head(x)
        if ph or pw:
            out = out[..., :H, :W]
        return out

    def spec(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "scales": self.scales,
            "filters": self.filters,
        }


def unet_parameter_count(in_channels: int, out_channels: int, scales: int, filters: int) -> int:
    """Closed-form parameter count of :class:`UNet` (weights plus biases)."""

    def conv(cin, cout, k=3):
        return cin * cout * k * k + cout

    widths = [filters * 2**i for i in range(scales)]
    total, cin = 0, in_channels
    for w in widths:
        total += conv(cin, w) + conv(w, w)
        cin = w
    for i in range(scales - 1):
        w = widths[i]
        total += conv(widths[i + 1], w) + conv(2 * w, w) + conv(w, w)
    return total + conv(widths[0], out_channels, k=1)


class Residual(Module):
    """``x[:, :k] + net(x)`` where ``k`` is the network's output width."""

    def __init__(self, net: Module):
        self.net = net

    def forward(self, x: Tensor) -> Tensor:
        out = self.net(x)
        k = out.shape[1]
        base = x if x.shape[1] == k else x[:, :k]
        return base + out


class UNetDenoiser(Module):
    """Learned z-step: ``[z, x, u/rho]`` stacked into 6 channels, 2 channels out.

    With ``residual`` the network predicts a correction added to ``z``.
    """

    kind = "unet"

    def __init__(self, unet: Optional[UNet] = None, residual: bool = True, **unet_kwargs):
        self.unet = unet if unet is not None else UNet(6, 2, **unet_kwargs)
        if self.unet.in_channels != 6 or self.unet.out_channels != 2:
            raise ValueError("z-step U-Net must map 6 channels to 2")
        self.residual = residual

    def forward(self, z, x, u_over_rho, rho=None) -> Tensor:
        if not (z.shape == x.shape == u_over_rho.shape):
            raise ValueError(f"denoiser inputs differ in shape: {z.shape}, {x.shape}, {u_over_rho.shape}")
        out = self.unet(ad.concat([z, x, u_over_rho], axis=1))
        return z + out if self.residual else out

    def spec(self) -> dict:
        return {"kind": self.kind, "residual": self.residual, **self.unet.spec()}


def build_denoiser(spec: dict, seed: int = 0, dtype=np.float32):
    kind = spec.get("kind", "unet")
    if kind == "identity":
        return IdentityDenoiser()
    if kind == "prox-quadratic":
        return ProxQuadratic(float(spec["lambda"]))
    if kind == "soft-threshold":
        return SoftThreshold(float(spec["lambda"]))
    if kind == "unet":
        unet = UNet(6, 2, scales=int(spec.get("scales", 2)), filters=int(spec.get("filters", 8)), seed=seed, dtype=dtype)
        return UNetDenoiser(unet, residual=bool(spec.get("residual", True)))
    raise ValueError(f"unknown denoiser kind {kind!r}")
