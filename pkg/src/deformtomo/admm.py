"""Joint ADMM reconstruction: tomography, projection deformation and TV.

The scheme alternates, once per outer iteration,

1. ``u``      — a few Dai-Yuan CG steps on the tomography sub-problem,
2. ``f, ψ₁``  — optical flow between the data and ψ₁, then CG on ψ₁,
3. ``ψ₂``     — isotropic soft-thresholding of ``∇u + λ₂/ρ₂``,
4. ``λ₁, λ₂`` — dual ascent,
5. ``ρ₁, ρ₂`` — residual-balancing penalty update.

Units: the solver works with the projector scaled by ``1/c`` and the data
divided by the same ``c = sqrt(N_theta * N_s)`` (``SolverConfig.normalize``).
This leaves the reconstructed volume unchanged but brings ``‖𝒳‖`` close to
``‖∇‖`` so that equal initial penalties are sensible. Every function taking a
projection stack ``d`` together with an :class:`AdmmState` expects ``d`` in
the state's units, see :meth:`AdmmState.to_state_units`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import ScanGeometry
from .optical_flow import FlowParams, estimate_flow, estimate_shift, window_schedule
from .projector import div, get_projector, grad
from .warp import FlowWarp

__all__ = [
    "NumericalAbort",
    "SolverConfig",
    "AdmmState",
    "ScaledProjector",
    "new_state",
    "lagrangian_value",
    "tomo_objective",
    "tomo_subproblem_gradient",
    "cg_dai_yuan",
    "solve_tomo",
    "solve_deformation",
    "prox_tv",
    "dual_update",
    "penalty_update",
    "binning_factors",
    "level_iterations",
    "reconstruct",
    "cg_least_squares",
    "lcurve",
    "lcurve_corner",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lagrangian", "fidelity", "tv", "rho1", "rho2", "mean_flow")
_FINEST_UNBINNED = 128


class NumericalAbort(FloatingPointError):
    """A solver variable became NaN or infinite."""

    def __init__(self, iteration: int, variable: str):
        super().__init__(f"non-finite values in {variable} at iteration {iteration}")
        self.iteration = iteration
        self.variable = variable


@dataclass(frozen=True)
class SolverConfig:
    n_admm: int = 32
    n_inner_cg: int = 4
    alpha: float = 0.0
    use_flow: bool = True
    dense_flow: bool = True
    binning_levels: object = "auto"  # "auto" or binning factors coarse -> fine, e.g. (4, 2, 1)
    window_decrement: float = 2.0
    projector: str = "fourier"
    adjoint_warp: str = "exact"
    soft_threshold_factor2: bool = False
    rho1_init: float = 0.5
    rho2_init: float = 0.5
    flow_params: FlowParams = FlowParams()
    min_window: int | None = 8
    dtype: str = "float32"
    normalize: bool = True

    def __post_init__(self):
        if self.n_admm < 1:
            raise ValueError("n_admm must be >= 1")
        if self.n_inner_cg < 1:
            raise ValueError("n_inner_cg must be >= 1")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.projector not in ("direct", "fourier"):
            raise ValueError("projector must be 'direct' or 'fourier'")
        if self.adjoint_warp not in ("exact", "negated-flow"):
            raise ValueError("adjoint_warp must be 'exact' or 'negated-flow'")
        if not (self.rho1_init > 0 and self.rho2_init > 0):
            raise ValueError("initial penalties must be positive")
        if not self.window_decrement > 0:
            raise ValueError("window_decrement must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.binning_levels != "auto":
            factors = [int(b) for b in self.binning_levels]
            ok = factors and factors[-1] == 1 and all(a == 2 * b for a, b in zip(factors, factors[1:]))
            if not ok:
                raise ValueError("binning_levels must halve from level to level and end at 1")

    @property
    def baseline(self) -> bool:
        """Flow off and no TV: the iteration is plain least-squares CG."""
        return not self.use_flow and self.alpha == 0

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "flow_params"}
        if out["binning_levels"] != "auto":
            out["binning_levels"] = [int(b) for b in out["binning_levels"]]
        out["flow_params"] = dict(vars(self.flow_params))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "flow_params" in d:
            d["flow_params"] = FlowParams(**d["flow_params"])
        if isinstance(d.get("binning_levels"), list):
            d["binning_levels"] = tuple(d["binning_levels"])
        return cls(**d)


class ScaledProjector:
    """Projector multiplied by ``1/scale`` (the adjoint scales identically)."""

    def __init__(self, base, scale: float = 1.0):
        self.base = base
        self.scale = float(scale)
        self.n_angles = len(base.angles)
        self.n = base.n

    def forward(self, u):
        p = self.base.forward(u)
        return p if self.scale == 1 else p * p.dtype.type(1 / self.scale)

    def adjoint(self, p):
        u = self.base.adjoint(p)
        return u if self.scale == 1 else u * u.dtype.type(1 / self.scale)


@dataclass
class AdmmState:
    u: np.ndarray
    psi1: np.ndarray
    psi2: np.ndarray | None
    lambda1: np.ndarray
    lambda2: np.ndarray | None
    flow: np.ndarray
    rho1: float
    rho2: float
    projector: object
    data_scale: float = 1.0
    iteration: int = 0
    lagrangian_history: list = field(default_factory=list)
    prev_Xu: np.ndarray | None = None
    prev_grad_u: np.ndarray | None = None
    xu: np.ndarray | None = None  # cached 𝒳u for the current u

    def __post_init__(self):
        if not (self.rho1 > 0 and self.rho2 > 0):
            raise ValueError("penalties must be positive")
        stack = (self.projector.n_angles, self.u.shape[0], self.u.shape[-1])
        for name in ("psi1", "lambda1"):
            if getattr(self, name).shape != stack:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {stack}")
        if self.flow.shape != stack + (2,):
            raise ValueError(f"flow shape {self.flow.shape} != {stack + (2,)}")
        for name in ("psi2", "lambda2"):
            v = getattr(self, name)
            if v is not None and v.shape != (3,) + self.u.shape:
                raise ValueError(f"{name} shape {v.shape} != {(3,) + self.u.shape}")

    @property
    def tv_enabled(self) -> bool:
        return self.psi2 is not None

    def to_state_units(self, d: np.ndarray) -> np.ndarray:
        return d if self.data_scale == 1 else (d / self.data_scale).astype(self.u.dtype)

    def projection(self) -> np.ndarray:
        """𝒳u for the current ``u`` (cached)."""
        if self.xu is None:
            self.xu = self.projector.forward(self.u)
        return self.xu

    def check_finite(self):
        for name in ("u", "psi1", "psi2", "lambda1", "lambda2", "flow"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise NumericalAbort(self.iteration, name)
        for name in ("rho1", "rho2"):
            if not math.isfinite(getattr(self, name)):
                raise NumericalAbort(self.iteration, name)


def new_state(
    projector,
    n_z: int,
    tv: bool = True,
    rho1: float = 0.5,
    rho2: float = 0.5,
    dtype=np.float32,
    data_scale: float = 1.0,
) -> AdmmState:
    """All-zero state for a projector; ``tv=False`` disables the ψ₂ path."""
    n, n_a = projector.n, projector.n_angles
    vol = (n_z, n, n)
    stack = (n_a, n_z, n)
    return AdmmState(
        u=np.zeros(vol, dtype),
        psi1=np.zeros(stack, dtype),
        psi2=np.zeros((3,) + vol, dtype) if tv else None,
        lambda1=np.zeros(stack, dtype),
        lambda2=np.zeros((3,) + vol, dtype) if tv else None,
        flow=np.zeros(stack + (2,), np.float32),
        rho1=float(rho1),
        rho2=float(rho2),
        projector=projector,
        data_scale=float(data_scale),
    )


_DOT_CHUNK = 4096


def _dot(a, b) -> float:
    """Inner product with float64 accumulation across chunks of float32 sums."""
    a, b = a.ravel(), b.ravel()
    if a.dtype == np.float64 or a.size <= _DOT_CHUNK:
        return float(np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)))
    k = a.size // _DOT_CHUNK * _DOT_CHUNK
    head = np.einsum("ij,ij->i", a[:k].reshape(-1, _DOT_CHUNK), b[:k].reshape(-1, _DOT_CHUNK))
    tail = np.dot(a[k:].astype(np.float64), b[k:].astype(np.float64))
    return float(head.sum(dtype=np.float64) + tail)


def _sq(a) -> float:
    return _dot(a, a)


def _tv_norm(w) -> float:
    return float(np.sqrt((w.astype(np.float64) ** 2).sum(0)).sum())


def _warp_for(flow: np.ndarray, dtype) -> FlowWarp | None:
    return FlowWarp(flow, dtype) if np.any(flow) else None


def _lagrangian_terms(s: AdmmState, d: np.ndarray, alpha: float, warp: FlowWarp | None = None):
    if d.shape != s.psi1.shape:
        raise ValueError(f"data shape {d.shape} != stack shape {s.psi1.shape}")
    if warp is None:
        warp = _warp_for(s.flow, s.psi1.dtype)
    dpsi = s.psi1 if warp is None else warp.apply(s.psi1)
    fidelity = 0.5 * _sq(dpsi - d)
    r1 = s.projection() - s.psi1
    value = fidelity + _dot(s.lambda1, r1) + 0.5 * s.rho1 * _sq(r1)
    tv = 0.0
    if s.tv_enabled:
        r2 = grad(s.u) - s.psi2
        tv = _tv_norm(s.psi2)
        value += alpha * tv + _dot(s.lambda2, r2) + 0.5 * s.rho2 * _sq(r2)
    return value, fidelity, tv


def lagrangian_value(s: AdmmState, d: np.ndarray, alpha: float) -> float:
    """Augmented Lagrangian of the current state.

    ``½‖D_f ψ₁ − d‖² + λ₁ᵀ(𝒳u − ψ₁) + ρ₁/2‖𝒳u − ψ₁‖²
    + α‖ψ₂‖₁ + λ₂ᵀ(∇u − ψ₂) + ρ₂/2‖∇u − ψ₂‖²``, where ``‖ψ₂‖₁`` sums the
    per-voxel magnitudes. The ψ₂ terms are absent when TV is disabled.
    """
    return _lagrangian_terms(s, d, alpha)[0]


# --------------------------------------------------------------------------
# conjugate gradients


def cg_dai_yuan(objective, x0: np.ndarray, n_iter: int) -> np.ndarray:
    """Dai-Yuan nonlinear CG with exact line search on a quadratic.

    ``objective`` provides ``gradient(x)`` and ``apply(eta)`` (the Hessian
    times ``eta``); an optional ``on_step(gamma, eta, a_eta)`` is told about
    every accepted step so callers can update cached products. The gradient
    is updated by the recurrence ``g + γ A η``, so each iteration costs one
    Hessian product.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    on_step = getattr(objective, "on_step", None)
    x = np.array(x0, copy=True)
    g = objective.gradient(x)
    eta = -g
    tiny = np.finfo(x.dtype if x.dtype.kind == "f" else np.float64).eps
    for m in range(n_iter):
        gg = _sq(g)
        if gg == 0:
            break
        a_eta = objective.apply(eta)
        curv = _dot(eta, a_eta)
        if curv <= tiny * _sq(eta) * 1e-3 or _dot(g, eta) >= 0:
            # lost descent or curvature: restart along steepest descent
            eta = -g
            a_eta = objective.apply(eta)
            curv = _dot(eta, a_eta)
            if curv <= 0:
                break
        gamma = -_dot(g, eta) / curv
        x += x.dtype.type(gamma) * eta
        if on_step is not None:
            on_step(gamma, eta, a_eta)
        g_new = g + g.dtype.type(gamma) * a_eta
        if m + 1 < n_iter:
            y_eta = _dot(g_new - g, eta)
            if y_eta <= tiny * math.sqrt(gg * _sq(eta)):
                eta = -g_new
            else:
                beta = _sq(g_new) / y_eta
                eta = -g_new + g.dtype.type(beta) * eta
        g = g_new
    return x


class _TomoObjective:
    """F(u) = λ₁ᵀ(𝒳u − ψ₁) + ρ₁/2‖𝒳u − ψ₁‖² + λ₂ᵀ(∇u − ψ₂) + ρ₂/2‖∇u − ψ₂‖²."""

    def __init__(self, s: AdmmState):
        self.s = s
        self.xu = s.projection().copy()
        self._x_eta = None

    def gradient(self, u):
        s = self.s
        xu = self.xu if np.array_equal(u, s.u) else s.projector.forward(u)
        t = s.projector.adjoint(s.rho1 * (xu - s.psi1) + s.lambda1)
        if s.tv_enabled:
            t -= div(s.rho2 * (grad(u) - s.psi2) + s.lambda2)
        return t

    def apply(self, eta):
        s = self.s
        self._x_eta = s.projector.forward(eta)
        out = s.projector.adjoint(self._x_eta) * eta.dtype.type(s.rho1)
        if s.tv_enabled:
            out -= div(grad(eta)) * eta.dtype.type(s.rho2)
        return out

    def on_step(self, gamma, eta, a_eta):
        self.xu += self.xu.dtype.type(gamma) * self._x_eta

    def value(self, u) -> float:
        s = self.s
        r1 = s.projector.forward(u) - s.psi1
        v = _dot(s.lambda1, r1) + 0.5 * s.rho1 * _sq(r1)
        if s.tv_enabled:
            r2 = grad(u) - s.psi2
            v += _dot(s.lambda2, r2) + 0.5 * s.rho2 * _sq(r2)
        return v


def tomo_objective(s: AdmmState) -> _TomoObjective:
    """Tomography sub-problem objective bound to a state (for CG or checks)."""
    return _TomoObjective(s)


def tomo_subproblem_gradient(u: np.ndarray, s: AdmmState) -> np.ndarray:
    """``ρ₁ 𝒳ᵀ(𝒳u − ψ₁ + λ₁/ρ₁) − ρ₂ div(∇u − ψ₂ + λ₂/ρ₂)``."""
    if not (s.rho1 > 0 and s.rho2 > 0):
        raise ValueError("penalties must be positive")
    if u.shape != s.u.shape:
        raise ValueError(f"volume shape {u.shape} != {s.u.shape}")
    return _TomoObjective(s).gradient(u)


def solve_tomo(s: AdmmState, n_inner: int) -> np.ndarray:
    """Run ``n_inner`` CG steps on the tomography sub-problem from the current u.

    Updates ``s.u`` and the cached projection ``s.xu`` in place and returns u.
    """
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    obj = _TomoObjective(s)
    s.u = cg_dai_yuan(obj, s.u, n_inner)
    s.xu = obj.xu
    return s.u


class _Psi1Objective:
    """½‖D_f ψ − d‖² + ρ₁/2‖𝒳u − ψ + λ₁/ρ₁‖² in ψ."""

    def __init__(self, s: AdmmState, d: np.ndarray, warp: FlowWarp | None, adjoint_warp: FlowWarp | None):
        self.s, self.d, self.warp, self.adj = s, d, warp, adjoint_warp
        self.target = s.projection() + s.lambda1 / s.lambda1.dtype.type(s.rho1)

    def _dtd(self, p):
        if self.warp is None:
            return p.copy()
        return self.adj.adjoint(self.warp.apply(p)) if self.adj is self.warp else self.adj.apply(self.warp.apply(p))

    def _dt(self, p):
        if self.warp is None:
            return p.copy()
        return self.adj.adjoint(p) if self.adj is self.warp else self.adj.apply(p)

    def gradient(self, psi):
        dpsi = psi if self.warp is None else self.warp.apply(psi)
        return self._dt(dpsi - self.d) + psi.dtype.type(self.s.rho1) * (psi - self.target)

    def apply(self, eta):
        return self._dtd(eta) + eta.dtype.type(self.s.rho1) * eta


def solve_deformation(
    s: AdmmState,
    d: np.ndarray,
    params: FlowParams,
    n_inner: int,
    adjoint_warp: str = "exact",
    estimate: bool = True,
):
    """Flow estimation followed by ``n_inner`` CG steps on ψ₁.

    The flow is estimated between ``d`` and ψ₁, warm-started from the current
    flow (``params.dense`` selects dense flow or one shift per projection).
    ``estimate=False`` keeps the flow fixed. Returns ``(flow, psi1)`` and
    stores both in the state.
    """
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    if d.shape != s.psi1.shape:
        raise ValueError(f"data shape {d.shape} != stack shape {s.psi1.shape}")
    if estimate and np.any(s.psi1):
        fn = estimate_flow if params.dense else estimate_shift
        initial = s.flow if np.any(s.flow) else None
        s.flow = fn(d, s.psi1, params, initial=initial)
    warp = _warp_for(s.flow, s.psi1.dtype)
    if warp is None or adjoint_warp == "exact":
        adj = warp
    else:
        adj = FlowWarp(-s.flow, s.psi1.dtype)
    s.psi1 = cg_dai_yuan(_Psi1Objective(s, d, warp, adj), s.psi1, n_inner)
    return s.flow, s.psi1


def prox_tv(z: np.ndarray, threshold: float) -> np.ndarray:
    """Isotropic soft-thresholding of a ``(3, ...)`` vector field.

    Each 3-vector ``v`` becomes ``v/|v| * max(0, |v| - threshold)``.
    """
    if not threshold >= 0:
        raise ValueError("threshold must be >= 0")
    if z.shape[0] != 3:
        raise ValueError(f"expected a (3, ...) vector field, got {z.shape}")
    mag = np.sqrt((z.astype(np.float64) ** 2).sum(0))
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(mag > threshold, 1 - threshold / mag, 0.0)
    return (z * scale).astype(z.dtype, copy=False)


def _update_psi2(s: AdmmState, alpha: float, factor2: bool):
    k = 2.0 if factor2 else 1.0
    gu = grad(s.u)
    s.psi2 = prox_tv(gu + s.lambda2 * s.u.dtype.type(k / s.rho2), k * alpha / s.rho2)
    return gu


def dual_update(s: AdmmState, grad_u: np.ndarray | None = None) -> AdmmState:
    """``λ₁ += ρ₁(𝒳u − ψ₁)``; ``λ₂ += ρ₂(∇u − ψ₂)`` when TV is enabled."""
    dt = s.lambda1.dtype.type
    s.lambda1 = s.lambda1 + dt(s.rho1) * (s.projection() - s.psi1)
    if s.tv_enabled:
        gu = grad(s.u) if grad_u is None else grad_u
        s.lambda2 = s.lambda2 + dt(s.rho2) * (gu - s.psi2)
    return s


def _balance(rho: float, primal: float, dual: float) -> float:
    if primal > 10 * dual:
        return 2 * rho
    if dual > 10 * primal:
        return rho / 2
    return rho


def penalty_update(s: AdmmState, grad_u: np.ndarray | None = None) -> AdmmState:
    """Residual balancing of ρ₁, ρ₂; a no-op until a previous iterate exists.

    ρ doubles when ``‖ψ − Au‖²`` exceeds ten times ``‖ρ(Au^k − Au^{k-1})‖²``,
    halves in the opposite case and is kept otherwise (``A`` is 𝒳 or ∇).
    The current 𝒳u and ∇u become the new previous iterates.
    """
    xu = s.projection()
    gu = None
    if s.tv_enabled:
        gu = grad(s.u) if grad_u is None else grad_u
    if s.prev_Xu is not None:
        rho1 = _balance(s.rho1, _sq(s.psi1 - xu), s.rho1**2 * _sq(xu - s.prev_Xu))
        rho2 = s.rho2
        if s.tv_enabled and s.prev_grad_u is not None:
            rho2 = _balance(s.rho2, _sq(s.psi2 - gu), s.rho2**2 * _sq(gu - s.prev_grad_u))
        s.rho1, s.rho2 = rho1, rho2
    s.prev_Xu = xu.copy()
    s.prev_grad_u = None if gu is None else gu.copy()
    return s


# --------------------------------------------------------------------------
# multi-resolution driver


def binning_factors(cfg: SolverConfig, n_s: int, n_z: int) -> list[int]:
    """Binning factor of every level, coarse to fine."""
    if cfg.binning_levels == "auto":
        levels = max(1, math.ceil(math.log2(min(n_s, n_z) / _FINEST_UNBINNED)))
        factors = [2 ** (levels - 1 - i) for i in range(levels)]
    else:
        factors = [int(b) for b in cfg.binning_levels]
    top = factors[0]
    if n_s % top or n_z % top:
        raise ValueError(f"projection size {n_z}x{n_s} is not divisible by binning factor {top}")
    return factors


def level_iterations(n_admm: int, n_levels: int) -> list[int]:
    """Split the outer iterations 2^(L-1) : ... : 2 : 1 from coarse to fine.

    >>> level_iterations(168, 3)
    [96, 48, 24]
    """
    weights = [2 ** (n_levels - 1 - i) for i in range(n_levels)]
    total = sum(weights)
    counts = [n_admm * w // total for w in weights]
    counts[0] += n_admm - sum(counts)
    return counts


def _bin_stack(d: np.ndarray, b: int) -> np.ndarray:
    if b == 1:
        return d
    n_a, n_z, n_s = d.shape
    blocks = d.reshape(n_a, n_z // b, b, n_s // b, b).mean(axis=(2, 4), dtype=np.float64)
    # line integrals shrink with the voxel size
    return (blocks / b).astype(d.dtype)


def _zoom2(a: np.ndarray, axes) -> np.ndarray:
    factors = [2 if i in axes else 1 for i in range(a.ndim)]
    return ndimage.zoom(a, factors, order=1, mode="nearest", grid_mode=True).astype(a.dtype, copy=False)


def _upsample_state(s: AdmmState, projector, data_scale: float) -> AdmmState:
    """Carry a coarse state to the twice finer grid."""
    stack_scale = s.u.dtype.type(2 * s.data_scale / data_scale)
    out = AdmmState(
        u=_zoom2(s.u, (0, 1, 2)),
        psi1=_zoom2(s.psi1, (1, 2)) * stack_scale,
        psi2=None if s.psi2 is None else _zoom2(s.psi2, (1, 2, 3)) / 2,
        lambda1=_zoom2(s.lambda1, (1, 2)) * stack_scale,
        lambda2=None if s.lambda2 is None else _zoom2(s.lambda2, (1, 2, 3)) / 2,
        flow=_zoom2(s.flow, (1, 2)) * np.float32(2),
        rho1=s.rho1,
        rho2=s.rho2,
        projector=projector,
        data_scale=data_scale,
        iteration=s.iteration,
        lagrangian_history=s.lagrangian_history,
    )
    return out


def _level_setup(d, g, cfg, b, dtype):
    db = _bin_stack(d, b)
    n_a, n_z, n_s = db.shape
    base = get_projector(cfg.projector, g.with_size(n_s, n_z), n_s)
    scale = math.sqrt(n_a * n_s) if cfg.normalize else 1.0
    projector = ScaledProjector(base, scale)
    return db.astype(dtype) / dtype(scale), projector, scale


def _open_log(log_file):
    if log_file is None:
        return None, None
    if isinstance(log_file, (str, bytes)) or hasattr(log_file, "__fspath__"):
        fh = open(log_file, "w", newline="")
        return fh, True
    return log_file, False


def reconstruct(
    d: np.ndarray,
    g: ScanGeometry,
    cfg: SolverConfig = SolverConfig(),
    log_file=None,
    callback: Callable[[AdmmState], None] | None = None,
):
    """Joint reconstruction from a projection stack ``(N_theta, N_z, N_s)``.

    Returns ``(u, flow, state)``. ``log_file`` (path or text stream) receives
    one CSV row per outer iteration with the columns :data:`LOG_COLUMNS`.
    With flow off and ``alpha == 0`` the iteration is plain least-squares CG
    (``n_admm * n_inner_cg`` steps on the finest grid).
    """
    d = np.asarray(d)
    if d.ndim != 3 or d.shape[0] != g.n_angles_total:
        raise ValueError(f"data shape {d.shape} does not match {g.n_angles_total} angles")
    if not np.all(np.isfinite(d)):
        raise ValueError("data contains NaN or Inf")
    dtype = np.dtype(cfg.dtype).type
    fh, own = _open_log(log_file)
    writer = None
    if fh is not None:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        if cfg.baseline:
            state = _reconstruct_baseline(d, g, cfg, dtype, writer, callback)
        else:
            state = _reconstruct_admm(d, g, cfg, dtype, writer, callback)
    finally:
        if own:
            fh.close()
    return state.u, state.flow, state


def _log_row(writer, s: AdmmState, lag, fidelity, tv):
    if writer is None:
        return
    mean_flow = float(np.sqrt((s.flow.astype(np.float64) ** 2).sum(-1)).mean())
    writer.writerow(
        [s.iteration, f"{lag:.9g}", f"{fidelity:.9g}", f"{tv:.9g}", f"{s.rho1:.9g}", f"{s.rho2:.9g}", f"{mean_flow:.6g}"]
    )


def _reconstruct_baseline(d, g, cfg, dtype, writer, callback):
    dl, projector, scale = _level_setup(d, g, cfg, 1, dtype)
    s = new_state(projector, d.shape[1], tv=False, rho1=cfg.rho1_init, rho2=cfg.rho2_init, dtype=dtype, data_scale=scale)
    obj = _LeastSquares(projector, dl)
    s.lagrangian_history.append(0.5 * _sq(dl))

    def step(gamma, eta, a_eta):
        obj.on_step(gamma, eta, a_eta)
        s.iteration += 1
        fidelity = 0.5 * _sq(obj.xu - dl)
        s.lagrangian_history.append(fidelity)
        _log_row(writer, s, fidelity, fidelity, 0.0)
        if not math.isfinite(fidelity):
            raise NumericalAbort(s.iteration, "u")

    obj_step = _StepHook(obj, step)
    s.u = cg_dai_yuan(obj_step, s.u, cfg.n_admm * cfg.n_inner_cg)
    s.xu = obj.xu
    s.psi1 = obj.xu.copy()
    s.check_finite()
    if callback is not None:
        callback(s)
    return s


class _StepHook:
    def __init__(self, obj, hook):
        self.obj, self.on_step = obj, hook

    def gradient(self, x):
        return self.obj.gradient(x)

    def apply(self, eta):
        return self.obj.apply(eta)


class _LeastSquares:
    """½‖𝒳u − d‖² with a cached 𝒳u."""

    def __init__(self, projector, d, u0=None):
        self.projector, self.d = projector, d
        self.xu = np.zeros_like(d) if u0 is None or not np.any(u0) else projector.forward(u0)
        self._x_eta = None

    def gradient(self, u):
        return self.projector.adjoint(self.xu - self.d)

    def apply(self, eta):
        self._x_eta = self.projector.forward(eta)
        return self.projector.adjoint(self._x_eta)

    def on_step(self, gamma, eta, a_eta):
        self.xu += self.xu.dtype.type(gamma) * self._x_eta


def cg_least_squares(
    d: np.ndarray,
    g: ScanGeometry,
    n_iter: int,
    projector: str = "fourier",
    dtype=np.float32,
    normalize: bool = True,
):
    """Plain Dai-Yuan CG on ``½‖𝒳u − d‖²`` from zero (the CG baseline).

    ``normalize`` applies the solver's unit convention (projector and data
    divided by ``sqrt(N_theta * N_s)``). The minimiser and, in exact
    arithmetic, every iterate are unchanged; in floating point CG is
    sensitive enough to the scaling that iterates of differently scaled runs
    drift apart at the 1e-5 level, so comparisons with :func:`reconstruct`
    should use the same setting as ``SolverConfig.normalize``.
    """
    n_a, n_z, n_s = d.shape
    proj = get_projector(projector, g.with_size(n_s, n_z), n_s)
    dtype = np.dtype(dtype).type
    scale = math.sqrt(n_a * n_s) if normalize else 1.0
    dd = np.asarray(d).astype(dtype) / dtype(scale)
    u0 = np.zeros((n_z, n_s, n_s), dtype)
    return cg_dai_yuan(_LeastSquares(ScaledProjector(proj, scale), dd), u0, n_iter)


def _reconstruct_admm(d, g, cfg, dtype, writer, callback):
    n_z, n_s = d.shape[1:]
    factors = binning_factors(cfg, n_s, n_z)
    counts = level_iterations(cfg.n_admm, len(factors))
    tv = cfg.alpha > 0
    s = None
    for b, n_level in zip(factors, counts):
        dl, projector, scale = _level_setup(d, g, cfg, b, dtype)
        if s is None:
            s = new_state(projector, dl.shape[1], tv=tv, rho1=cfg.rho1_init, rho2=cfg.rho2_init, dtype=dtype, data_scale=scale)
            s.lagrangian_history.append(_lagrangian_terms(s, dl, cfg.alpha)[0])
        else:
            s = _upsample_state(s, projector, scale)
        if n_level == 0:
            continue
        windows = window_schedule(min(dl.shape[1:]), n_level, cfg.window_decrement, cfg.min_window)
        for w in windows:
            params = replace(cfg.flow_params, dense=cfg.dense_flow).with_window(w)
            _admm_iteration(s, dl, cfg, params)
            lag, fidelity, tv_val = _lagrangian_terms(s, dl, cfg.alpha)
            if not math.isfinite(lag):
                raise NumericalAbort(s.iteration, "lagrangian")
            s.lagrangian_history.append(lag)
            _log_row(writer, s, lag, fidelity, tv_val)
            log.debug("iteration %d: L=%.6g rho=(%.3g, %.3g)", s.iteration, lag, s.rho1, s.rho2)
            if callback is not None:
                callback(s)
    return s


def _admm_iteration(s: AdmmState, d: np.ndarray, cfg: SolverConfig, params: FlowParams):
    s.iteration += 1
    solve_tomo(s, cfg.n_inner_cg)
    _check(s, "u")
    solve_deformation(s, d, params, cfg.n_inner_cg, cfg.adjoint_warp, estimate=cfg.use_flow)
    _check(s, "flow", "psi1")
    gu = None
    if s.tv_enabled:
        gu = _update_psi2(s, cfg.alpha, cfg.soft_threshold_factor2)
        _check(s, "psi2")
    dual_update(s, gu)
    _check(s, "lambda1", "lambda2")
    penalty_update(s, gu)


def _check(s: AdmmState, *names):
    for name in names:
        v = getattr(s, name)
        if v is not None and not np.all(np.isfinite(v)):
            raise NumericalAbort(s.iteration, name)


# --------------------------------------------------------------------------
# L-curve


def lcurve(d: np.ndarray, g: ScanGeometry, cfg: SolverConfig, alphas: Sequence[float]):
    """Reconstruct for each α and return ``(α, ½‖D_f 𝒳u − d‖², ‖∇u‖₁)`` points.

    Fidelity is in the units of ``d``. Pair with :func:`lcurve_corner`.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alphas must be nonempty")
    if any(a < 0 for a in alphas) or alphas != sorted(alphas):
        raise ValueError("alphas must be non-negative and sorted")
    points = []
    for a in alphas:
        u, flow, s = reconstruct(d, g, replace(cfg, alpha=a))
        xu = s.projector.forward(u)
        warp = _warp_for(flow, xu.dtype)
        dxu = xu if warp is None else warp.apply(xu)
        fidelity = 0.5 * _sq(dxu * xu.dtype.type(s.data_scale) - d)
        points.append((a, fidelity, _tv_norm(grad(u))))
    return points


def lcurve_corner(points) -> float:
    """α at the point of maximum curvature of the log-log L-curve.

    Curvature of each interior vertex is the Menger curvature of it and its
    two neighbours; with fewer than three points the middle α is returned.
    """
    if not points:
        raise ValueError("no L-curve points")
    if len(points) < 3:
        return points[len(points) // 2][0]
    tiny = 1e-300
    x = np.log10(np.maximum([p[1] for p in points], tiny))
    y = np.log10(np.maximum([p[2] for p in points], tiny))
    best, best_k = 1, -np.inf
    for i in range(1, len(points) - 1):
        a = np.array([x[i - 1], y[i - 1]])
        b = np.array([x[i], y[i]])
        c = np.array([x[i + 1], y[i + 1]])
        ab, bc, ca = np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c)
        area2 = abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
        k = 2 * area2 / (ab * bc * ca) if ab * bc * ca > 0 else 0.0
        if k > best_k:
            best, best_k = i, k
    return points[best][0]

