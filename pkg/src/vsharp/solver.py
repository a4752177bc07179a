"""Unrolled half-quadratic-splitting ADMM reconstruction.

One block ``t`` performs

* z-step: ``z = R_t(z, x, u / rho_t)``
* x-step: ``Tx`` gradient steps on ``1/2||A x - y||^2 + rho_t/2 ||x - z + u/rho_t||^2``
  starting from the current ``x`` (data consistency via gradient descent)
* u-step: ``u = u + rho_t (x - z)``

after initialising ``x = z = A*(y)`` and ``u = G(x)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import Parameter, Tensor
from vsharp.denoisers import Residual, UNet, UNetDenoiser, build_denoiser
from vsharp.nn import Conv2d, Module
from vsharp.operators import adjoint_A, as_ctensor, forward_A, normal_A
from vsharp.sensitivity import estimate_acs, refine

__all__ = [
    "DivergenceError",
    "LagrangeInitializer",
    "MRIOperator",
    "ObjectiveReport",
    "SolverConfig",
    "SolverState",
    "VSharpNet",
    "closed_form_x",
    "dcgd_x_step",
    "dense_matrix",
    "init_state",
    "objective_report",
    "positive",
    "reconstruct",
    "u_step",
    "z_step",
]

DEFAULT_REDUCED_BLOCKS = (1, 2, 6, 10, 11, 12)
POSITIVE_FLOOR = 1e-4


class DivergenceError(FloatingPointError):
    """The gradient-descent x-step blew up."""


@dataclass
class MRIOperator:
    """``A = M F E_C`` bound to one set of sensitivities and a mask."""

    C: Tensor
    mask: np.ndarray

    def forward(self, x) -> Tensor:
        return forward_A(x, self.C, self.mask)

    def adjoint(self, y) -> Tensor:
        return adjoint_A(y, self.C, self.mask)

    def normal(self, x) -> Tensor:
        return normal_A(x, self.C, self.mask)


@dataclass
class SolverState:
    x: Tensor
    z: Tensor
    u: Tensor
    t: int = 0

    def __post_init__(self):
        if not (self.x.shape == self.z.shape == self.u.shape):
            raise ValueError(f"state shapes differ: {self.x.shape}, {self.z.shape}, {self.u.shape}")


@dataclass
class SolverConfig:
    """Effective (already positive) penalties and step sizes plus block components.

    ``rho`` has one entry per block, ``eta`` one per x-step iteration.
    ``reduced_blocks`` lists 1-based block indices to run, ascending.
    """

    T: int
    Tx: int
    rho: Tensor
    eta: Tensor
    denoisers: Sequence[Callable]
    lagrange_init: Optional[Callable] = None
    reduced_blocks: Optional[tuple] = None
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.T < 1 or self.Tx < 0:
            raise ValueError(f"need T >= 1 and Tx >= 0, got T={self.T}, Tx={self.Tx}")
        self.rho = ad.as_tensor(self.rho)
        self.eta = ad.as_tensor(self.eta)
        if self.rho.shape != (self.T,):
            raise ValueError(f"rho must have shape ({self.T},), got {self.rho.shape}")
        if self.eta.shape[0] < self.Tx:
            raise ValueError(f"eta has {self.eta.shape[0]} entries, Tx={self.Tx}")
        if np.any(self.rho.data <= 0) or np.any(self.eta.data[: self.Tx] <= 0):
            raise ValueError("rho and eta must be positive")
        if len(self.denoisers) != self.T:
            raise ValueError(f"need {self.T} denoisers, got {len(self.denoisers)}")
        if self.reduced_blocks is not None:
            blocks = tuple(int(b) for b in self.reduced_blocks)
            if list(blocks) != sorted(set(blocks)) or not blocks or blocks[0] < 1 or blocks[-1] > self.T:
                raise ValueError(f"reduced_blocks must be an ascending subset of 1..{self.T}, got {blocks}")
            self.reduced_blocks = blocks

    @property
    def blocks(self) -> tuple:
        return self.reduced_blocks if self.reduced_blocks is not None else tuple(range(1, self.T + 1))


def positive(raw: Tensor) -> Tensor:
    """Map raw values to strictly positive ones: ``softplus(raw) + 1e-4``."""
    return ad.softplus(raw) + POSITIVE_FLOOR


def init_state(y_tilde, C, mask, cfg: SolverConfig) -> SolverState:
    """``x = z = A*(y)``; ``u = G(x)`` or zero without an initializer."""
    x0 = adjoint_A(y_tilde, C, mask)
    u0 = cfg.lagrange_init(x0) if cfg.lagrange_init is not None else Tensor(np.zeros_like(x0.data))
    if u0.shape != x0.shape:
        raise ValueError(f"Lagrange initializer returned {u0.shape}, expected {x0.shape}")
    return SolverState(x0, x0, u0, 0)


def z_step(state: SolverState, denoiser: Callable, rho_t) -> Tensor:
    return denoiser(state.z, state.x, ad.div(state.u, rho_t), rho_t)


def dcgd_x_step(
    state: SolverState,
    z_next: Tensor,
    rho_t,
    eta,
    op: MRIOperator,
    y_tilde,
    Tx: Optional[int] = None,
    divergence_factor: float = 1e6,
) -> Tensor:
    """Tx steps of gradient descent on the x-subproblem, starting at ``state.x``."""
    eta = ad.as_tensor(eta)
    Tx = eta.shape[0] if Tx is None else Tx
    y_tilde = as_ctensor(y_tilde)
    w = state.x
    offset = ad.sub(ad.div(state.u, rho_t), z_next)
    atb = op.adjoint(y_tilde)
    limit = divergence_factor * max(float(np.linalg.norm(w.data)), 1.0)
    for s in range(Tx):
        grad = ad.sub(op.normal(w), atb) + ad.mul(rho_t, ad.add(w, offset))
        w = ad.sub(w, ad.mul(eta[s], grad))
        norm = float(np.linalg.norm(w.data))
        if not np.isfinite(norm) or norm > limit:
            raise DivergenceError(
                f"DCGD diverged at step {s + 1}/{Tx}: |w|={norm:.3e} exceeds {limit:.3e} "
                f"(rho={float(np.asarray(getattr(rho_t, 'data', rho_t))):.4g}, eta={float(eta.data[s]):.4g})"
            )
    return w


def u_step(u: Tensor, x_next: Tensor, z_next: Tensor, rho_t) -> Tensor:
    return ad.add(u, ad.mul(rho_t, ad.sub(x_next, z_next)))


def reconstruct(y_tilde, C, mask, cfg: SolverConfig, return_state: bool = False):
    """Run the configured blocks and return ``[x^1, ..., x^T]`` (one per block run)."""
    y_tilde = as_ctensor(y_tilde)
    C = as_ctensor(C)
    op = MRIOperator(C, mask)
    state = init_state(y_tilde, C, mask, cfg)
    outputs = []
    for t in cfg.blocks:
        rho_t = cfg.rho[t - 1]
        z = z_step(state, cfg.denoisers[t - 1], rho_t)
        x = dcgd_x_step(state, z, rho_t, cfg.eta, op, y_tilde, cfg.Tx, cfg.divergence_factor)
        u = u_step(state.u, x, z, rho_t)
        state = SolverState(x, z, u, t)
        outputs.append(x)
    return (outputs, state) if return_state else outputs


# -- dense oracles (small problems only) -------------------------------------


def dense_matrix(op: MRIOperator, shape: tuple) -> np.ndarray:
    """Assemble ``A`` as a complex ``(m, n)`` matrix by probing unit images."""
    H, W = shape
    n = H * W
    dtype = op.C.dtype
    cols = []
    for j in range(n):
        e = np.zeros((2, H, W), dtype=dtype)
        e[0].flat[j] = 1
        cols.append(ad.to_complex(op.forward(Tensor(e)).data).ravel())
    return np.stack(cols, axis=1)


def closed_form_x(z_next: np.ndarray, u: np.ndarray, rho_t: float, A_dense: np.ndarray, y_tilde: np.ndarray) -> np.ndarray:
    """``(A*A + rho I)^-1 (A* y + rho z - u)`` on flattened complex vectors."""
    n = A_dense.shape[1]
    lhs = A_dense.conj().T @ A_dense + rho_t * np.eye(n)
    rhs = A_dense.conj().T @ y_tilde.ravel() + rho_t * z_next.ravel() - u.ravel()
    return np.linalg.solve(lhs, rhs)


@dataclass
class ObjectiveReport:
    data_fidelity: float
    penalty: float
    regularization: float
    inner: float
    lagrangian: float


def objective_report(state: SolverState, op: MRIOperator, y_tilde, rho: float, lam: float = 0.0, regularizer=None):
    """Terms of the augmented Lagrangian at ``state``.

    ``penalty`` is the scaled form ``rho/2 ||x - z + u/rho||^2``; the
    Lagrangian itself is ``1/2||Ax-y||^2 + lam R(z) + Re<u, x-z> + rho/2||x-z||^2``.
    """
    y = as_ctensor(y_tilde).data
    x, z, u = state.x.data, state.z.data, state.u.data
    resid = op.forward(state.x).data - y
    fidelity = 0.5 * float(np.sum(resid**2))
    diff = x - z
    penalty = 0.5 * rho * float(np.sum((diff + u / rho) ** 2))
    reg = lam * regularizer(z) if regularizer is not None else 0.0
    inner = float(np.sum(u * diff))
    lagr = fidelity + reg + inner + 0.5 * rho * float(np.sum(diff**2))
    return ObjectiveReport(fidelity, penalty, reg, inner, lagr)


# -- learned components -------------------------------------------------------


class LagrangeInitializer(Module):
    """Maps ``x^0`` to ``u^0``.

    Four layers of replication padding + dilated 3x3 convolution + ReLU,
    then 1x1 convolutions with ReLU between them; the last 1x1 projection is
    linear so the multipliers can take either sign.
    """

    def __init__(self, channels: int = 8, dilations=(1, 2, 4, 8), hidden_1x1: int = 1, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dilations = tuple(dilations)
        self.channels = channels
        self.dilated = []
        cin = 2
        for d in self.dilations:
            self.dilated.append(Conv2d(cin, channels, 3, dilation=d, rng=rng, dtype=dtype))
            cin = channels
        self.pointwise = [Conv2d(channels, channels, 1, rng=rng, dtype=dtype) for _ in range(hidden_1x1)]
        self.out = Conv2d(channels, 2, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for conv, d in zip(self.dilated, self.dilations):
            x = ad.relu(conv(ad.replication_pad2d(x, d)))
        for conv in self.pointwise:
            x = ad.relu(conv(x))
        return self.out(x)

    def spec(self) -> dict:
        return {"channels": self.channels, "dilations": list(self.dilations), "hidden_1x1": len(self.pointwise)}


@dataclass
class ModelConfig:
    T: int = 3
    Tx: int = 4
    scales: int = 2
    filters: int = 8
    sens_scales: int = 2
    sens_filters: int = 4
    lagrange_channels: int = 8
    lagrange_dilations: tuple = (1, 2, 4, 8)
    share_denoisers: bool = False
    residual: bool = True
    reduced_blocks: Optional[tuple] = None
    seed: int = 0
    dtype: str = "float32"
    init_bounds: tuple = (0.1, 2.0)
    extra: dict = field(default_factory=dict)

    @classmethod
    def reference(cls) -> "ModelConfig":
        """The full-size configuration (12 blocks, 10 x-steps, 4-scale U-Nets)."""
        return cls(T=12, Tx=10, scales=4, filters=32, sens_scales=4, sens_filters=16)

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["lagrange_dilations"] = list(self.lagrange_dilations)
        d["init_bounds"] = list(self.init_bounds)
        d["reduced_blocks"] = list(self.reduced_blocks) if self.reduced_blocks is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("lagrange_dilations", "init_bounds", "reduced_blocks"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        extra = dict(d.pop("extra", None) or {})
        known = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__}
        return cls(**known, extra={**extra, **d})


class VSharpNet(Module):
    """End-to-end learned reconstruction: ACS sensitivity estimate and refinement,
    Lagrange-multiplier initializer, per-block U-Net denoisers and trainable
    ``rho`` / ``eta`` (kept positive through :func:`positive`).
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        cfg = config if config is not None else ModelConfig()
        self.config = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        lo, hi = cfg.init_bounds
        self.rho_raw = Parameter(ad.truncated_normal_init((cfg.T,), lo, hi, rng), dtype=dtype)
        self.eta_raw = Parameter(ad.truncated_normal_init((cfg.Tx,), lo, hi, rng), dtype=dtype)
        self.sens_net = Residual(UNet(2, 2, cfg.sens_scales, cfg.sens_filters, seed=cfg.seed + 1, dtype=dtype))
        self.lagrange = LagrangeInitializer(
            cfg.lagrange_channels, cfg.lagrange_dilations, seed=cfg.seed + 2, dtype=dtype
        )
        n_nets = 1 if cfg.share_denoisers else cfg.T
        self.denoisers = [
            UNetDenoiser(UNet(6, 2, cfg.scales, cfg.filters, seed=cfg.seed + 10 + t, dtype=dtype), residual=cfg.residual)
            for t in range(n_nets)
        ]
        self.assign_names()

    def block_denoisers(self) -> list:
        return self.denoisers * self.config.T if self.config.share_denoisers else list(self.denoisers)

    def solver_config(self, reduced_blocks=None) -> SolverConfig:
        cfg = self.config
        blocks = reduced_blocks if reduced_blocks is not None else cfg.reduced_blocks
        return SolverConfig(
            T=cfg.T,
            Tx=cfg.Tx,
            rho=positive(self.rho_raw),
            eta=positive(self.eta_raw),
            denoisers=self.block_denoisers(),
            lagrange_init=self.lagrange,
            reduced_blocks=blocks,
        )

    def sensitivities(self, y_tilde, mask) -> Tensor:
        return refine(estimate_acs(y_tilde, mask), self.sens_net)

    def forward(self, y_tilde, grid, acs=None, reduced_blocks=None):
        """Reconstruct from masked k-space ``(B, n_c, 2, H, W)``.

        ``grid`` is the sampling grid ``(B, H, W)`` (or ``(H, W)``), ``acs``
        the calibration region (defaults to ``grid``).  Returns the per-block
        images and the refined sensitivities.
        """
        y_tilde = as_ctensor(y_tilde)
        acs = grid if acs is None else acs
        C = self.sensitivities(y_tilde, acs)
        xs = reconstruct(y_tilde, C, grid, self.solver_config(reduced_blocks))
        return xs, C


def timed_reconstruct(model: VSharpNet, y_tilde, grid, acs=None, reduced_blocks=None):
    start = time.perf_counter()
    xs, C = model(y_tilde, grid, acs, reduced_blocks)
    return xs, C, time.perf_counter() - start


def classical_config(T: int, Tx: int, rho: float, eta: float, denoiser_spec: dict) -> SolverConfig:
    """Fixed-parameter solver with a classical (or identity) z-step, no multiplier network."""
    den = build_denoiser(denoiser_spec)
    return SolverConfig(T, Tx, np.full(T, float(rho)), np.full(max(Tx, 1), float(eta)), [den] * T)
