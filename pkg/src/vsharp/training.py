"""Desk-scale training: synthetic phantoms, Adam, warmup + step decay."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import Tape, Tensor, backward
from vsharp.losses import evaluate, weighted_multistep_loss
from vsharp.masks import SamplingMask, make_mask
from vsharp.operators import adjoint_A, normalize_sensitivities, predict_kspace, rss
from vsharp.solver import DivergenceError, VSharpNet

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or a diverging solver."""


# -- synthetic data -----------------------------------------------------------


@dataclass
class PhantomSample:
    """One simulated acquisition.

    ``x_gt`` and ``C`` use the 2-channel complex layout; ``y_full`` is
    ``F(E_C(x_gt)) + noise`` and ``y_tilde`` its masked copy.
    """

    x_gt: np.ndarray
    C: np.ndarray
    y_full: np.ndarray
    mask: SamplingMask
    y_tilde: np.ndarray

    @property
    def target(self) -> np.ndarray:
        """RSS of the fully-sampled k-space, the training ground truth."""
        return rss(self.y_full).data


def _ellipse(yy, xx, cy, cx, ay, ax, angle):
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1


def phantom_image(rng: np.random.Generator, H: int, W: int, smooth_phase: bool = False) -> np.ndarray:
    """Piecewise-smooth ellipse phantom, peak magnitude 1, complex ``(H, W)``."""
    yy, xx = np.mgrid[-1 : 1 : H * 1j, -1 : 1 : W * 1j]
    ay, ax = rng.uniform(0.7, 0.9), rng.uniform(0.6, 0.85)
    img = np.zeros((H, W))
    head = _ellipse(yy, xx, 0, 0, ay, ax, rng.uniform(-0.3, 0.3))
    img[head] = rng.uniform(0.5, 0.8)
    img[_ellipse(yy, xx, 0, 0, 0.92 * ay, 0.92 * ax, 0)] -= rng.uniform(0.1, 0.3)
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(-0.5, 0.5) * ay, rng.uniform(-0.5, 0.5) * ax
        region = _ellipse(yy, xx, cy, cx, rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35), rng.uniform(0, np.pi))
        img[region & head] += rng.uniform(-0.3, 0.4)
    img = np.clip(img, 0, None)
    bias = 1 + rng.uniform(-0.2, 0.2) * yy + rng.uniform(-0.2, 0.2) * xx
    img = img * bias
    img /= img.max()
    if smooth_phase:
        phase = np.pi * (rng.uniform(-0.5, 0.5) * yy + rng.uniform(-0.5, 0.5) * xx + rng.uniform(-0.3, 0.3) * yy * xx)
        return img * np.exp(1j * phase)
    return img.astype(complex)


def coil_maps(rng: np.random.Generator, n_c: int, H: int, W: int) -> np.ndarray:
    """Smooth complex sensitivities ``(n_c, H, W)`` normalized to ``sum |C_k|^2 = 1``."""
    yy, xx = np.mgrid[-1 : 1 : H * 1j, -1 : 1 : W * 1j]
    maps = []
    start = rng.uniform(0, 2 * np.pi)
    for k in range(n_c):
        theta = start + 2 * np.pi * k / n_c + rng.uniform(-0.2, 0.2)
        cy, cx = 1.3 * math.sin(theta), 1.3 * math.cos(theta)
        width = rng.uniform(0.9, 1.3)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        phase = rng.uniform(-np.pi, np.pi) + np.pi * (rng.uniform(-0.3, 0.3) * yy + rng.uniform(-0.3, 0.3) * xx)
        maps.append(mag * np.exp(1j * phase))
    maps = np.stack(maps)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


def make_phantom(
    seed: int,
    H: int = 64,
    W: int = 64,
    n_c: int = 4,
    noise_sigma: float = 0.0,
    accel: float = 4,
    mask_kind: str = "equispaced",
    acs_fraction: Optional[float] = None,
    mask: Optional[SamplingMask] = None,
    smooth_phase: bool = False,
    dtype=np.float32,
) -> PhantomSample:
    rng = np.random.default_rng(seed)
    x = phantom_image(rng, H, W, smooth_phase)
    C = coil_maps(rng, n_c, H, W)
    y_full = ad.fft2c_array(C * x)
    if noise_sigma > 0:
        y_full = y_full + noise_sigma * (rng.standard_normal(y_full.shape) + 1j * rng.standard_normal(y_full.shape))
    if mask is None:
        mask = make_mask(mask_kind, H, W, accel, acs_fraction, seed=int(rng.integers(2**31)))
    y_tilde = y_full * mask.grid
    return PhantomSample(
        ad.from_complex(x, dtype),
        normalize_sensitivities(ad.from_complex(C, dtype)),
        ad.from_complex(y_full, dtype),
        mask,
        ad.from_complex(y_tilde, dtype),
    )


@dataclass
class Batch:
    y_tilde: np.ndarray
    y_full: np.ndarray
    grid: np.ndarray
    acs: np.ndarray
    target: np.ndarray
    C: np.ndarray

    @classmethod
    def of(cls, samples: Sequence[PhantomSample]) -> "Batch":
        return cls(
            np.stack([s.y_tilde for s in samples]),
            np.stack([s.y_full for s in samples]),
            np.stack([s.mask.grid for s in samples]),
            np.stack([s.mask.acs for s in samples]),
            np.stack([s.target for s in samples]),
            np.stack([s.C for s in samples]),
        )


# -- optimisation -------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.002
    warmup_iters: int = 100
    decay_every: int = 1000
    decay_factor: float = 0.2
    batch: int = 2
    iters: int = 2000
    seed: int = 0
    accel_set: list = field(default_factory=lambda: [4])
    H: int = 64
    W: int = 64
    n_c: int = 4
    noise_sigma: float = 0.0
    mask_kind: str = "equispaced"
    val_size: int = 8
    eval_every: int = 100
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.iters < 0 or self.decay_every < 1 or self.warmup_iters < 0:
            raise ValueError("lr, batch, decay_every must be positive and iters, warmup_iters non-negative")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if not self.accel_set:
            raise ValueError("accel_set must not be empty")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then step decay."""
    if it < cfg.warmup_iters:
        return cfg.lr * it / cfg.warmup_iters
    return cfg.lr * cfg.decay_factor ** ((it - cfg.warmup_iters) // cfg.decay_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """In-place Adam update of each parameter's ``data``; ``None`` grads count as zero."""
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1 - b1**state.t, 1 - b2**state.t
    for p, g in zip(params, grads):
        key = id(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(key, np.zeros_like(p.data))
        v = state.v.get(key, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key], state.v[key] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- loop ---------------------------------------------------------------------


def validation_set(cfg: TrainConfig, offset: int = 10**6) -> list[PhantomSample]:
    """Held-out phantoms; seeds are disjoint from the training stream."""
    accel = cfg.accel_set[0]
    return [
        make_phantom(cfg.seed + offset + i, cfg.H, cfg.W, cfg.n_c, cfg.noise_sigma, accel, cfg.mask_kind)
        for i in range(cfg.val_size)
    ]


def _dtype(model: VSharpNet):
    return np.dtype(model.config.dtype)


def evaluate_model(model: VSharpNet, samples: Sequence[PhantomSample], reduced_blocks=None) -> dict:
    """Mean SSIM / pSNR / NMSE of the final block and of the zero-filled ``x^0``."""
    rows = []
    for s in samples:
        y = s.y_tilde[None].astype(_dtype(model))
        xs, C = model(y, s.mask.grid[None], s.mask.acs[None], reduced_blocks)
        x0 = adjoint_A(y, C, s.mask.grid[None])
        final = evaluate(s.target, ad.cabs(xs[-1]).data[0])
        zero = evaluate(s.target, ad.cabs(x0).data[0])
        rows.append({**final, **{f"{k}_x0": v for k, v in zero.items()}})
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


@dataclass
class TrainResult:
    history: list
    best_state: dict
    best_ssim: float
    final_metrics: dict


def _grad_norms(model: VSharpNet) -> dict:
    return {n: float(np.linalg.norm(p.grad)) for n, p in model.named_parameters() if p.grad is not None}


def train(model: VSharpNet, cfg: TrainConfig, out_dir: Optional[Path] = None, val: Optional[list] = None) -> TrainResult:
    """Optimise ``model`` on freshly simulated phantoms.

    Every ``eval_every`` iterations the held-out set is scored; the best
    state by SSIM of the final block is kept (and saved under ``out_dir``).
    """
    from vsharp.io import save_checkpoint

    params = model.parameters()
    state = AdamState()
    val = val if val is not None else validation_set(cfg)
    rng = np.random.default_rng(cfg.seed)
    dtype = _dtype(model)
    history, best_state, best_ssim = [], model.state_dict(), -np.inf
    window_losses, pending_loss = [], float("nan")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for it in range(cfg.iters + 1):
        if val and (it % cfg.eval_every == 0 or it == cfg.iters):
            metrics = evaluate_model(model, val)
            row = {"iter": it, "lr": lr_schedule(it, cfg), "train_loss": pending_loss, **metrics}
            history.append(row)
            logger.info("iter %d: %s", it, json.dumps(row))
            if metrics["ssim"] > best_ssim:
                best_ssim, best_state = metrics["ssim"], model.state_dict()
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", model, {"iter": it, "metrics": metrics})
        if it == cfg.iters:
            break

        lr = lr_schedule(it, cfg)
        samples = [
            make_phantom(
                int(rng.integers(2**31)),
                cfg.H,
                cfg.W,
                cfg.n_c,
                cfg.noise_sigma,
                float(rng.choice(cfg.accel_set)),
                cfg.mask_kind,
                dtype=dtype,
            )
            for _ in range(cfg.batch)
        ]
        batch = Batch.of(samples)
        try:
            with Tape() as tape:
                xs, C = model(batch.y_tilde, batch.grid, batch.acs)
                ys = [predict_kspace(x, C) for x in xs]
                report = weighted_multistep_loss(batch.target, xs, batch.y_full, ys)
            loss = float(report.total.data)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at iter {it} (lr={lr:.3g})")
            backward(tape, report.total)
        except (DivergenceError, FloatingPointError) as exc:
            raise TrainingError(f"iter {it} (lr={lr:.3g}): {exc}; grad norms {_grad_norms(model)}") from exc
        grad_norm = clip_grad_norm(params, cfg.clip_norm)
        if not np.isfinite(grad_norm):
            raise TrainingError(f"non-finite gradient at iter {it} (lr={lr:.3g}): {_grad_norms(model)}")
        adam_step(params, [p.grad for p in params], state, lr)
        model.zero_grad()
        window_losses.append(loss)
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iters:
            pending_loss = float(np.mean(window_losses))
            window_losses = []

    final = history[-1] if history else {}
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model, {"iter": cfg.iters})
        write_history(out_dir / "history.csv", history)
        (out_dir / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return TrainResult(history, best_state, float(best_ssim), final)


def write_history(path: Path, history: list) -> None:
    keys = list(dict.fromkeys(k for row in history for k in row))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)
