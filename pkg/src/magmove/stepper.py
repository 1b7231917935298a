"""Minimizing-movements time stepping.

Each step minimizes

    F_k(eta, M) = E(eta, M) + dt R(eta_{k-1}, (eta - eta_{k-1})/dt, (M - M_{k-1})/dt)
                  - int rho f_k(eta_{k-1}) . (eta - eta_{k-1}) + mu M . Hext_k(eta) dX

jointly over the free deformation nodes and all magnetization nodes with a
limited-memory BFGS iteration whose backtracking treats the infinite energy
of non-orientation-preserving trial states as a rejection.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import strayfield as sf
from .dissipation import dissipation_rate, grad_dissipation
from .energy import EnergyBreakdown, MaterialParams, evaluate
from .grid import ContractViolation, GridSpec, Snapshot, TrajectoryStore, hessian
from .kinematics import boundary_injectivity_margin, build_kinematics, ciarlet_necas_residual

log = logging.getLogger(__name__)

STATUSES = ("accepted", "self-contact", "energy-blowup", "solver-failure")


# -- data -------------------------------------------------------------------------

@dataclass
class SpaceTimeField:
    """Vector field g(t, x) with an optional spatial Jacobian ``jac(t, x)[p, c, a] = d g_c / d x_a``."""

    func: Callable[[float, np.ndarray], np.ndarray]
    jac: Callable[[float, np.ndarray], np.ndarray] | None = None
    name: str = "custom"

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.func(t, x), float), x.shape).copy()

    def jacobian(self, t: float, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        if self.jac is not None:
            return np.broadcast_to(np.asarray(self.jac(t, x), float), x.shape + (x.shape[1],)).copy()
        out = np.empty(x.shape + (x.shape[1],))
        for a in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[a] = eps
            out[..., a] = (self(t, x + e) - self(t, x - e)) / (2 * eps)
        return out

    @classmethod
    def zero(cls, d: int) -> "SpaceTimeField":
        return cls(lambda t, x: np.zeros_like(x), lambda t, x: np.zeros(x.shape + (d,)), name="zero")

    def is_zero(self) -> bool:
        return self.name == "zero"


@dataclass
class DataProviders:
    eta0: np.ndarray
    M0: np.ndarray
    f: SpaceTimeField | None = None
    Hext: SpaceTimeField | None = None
    dirichlet: Callable[[float, np.ndarray], np.ndarray] | None = None  # moving P data; default: frozen eta0

    def __post_init__(self):
        d = self.eta0.shape[1]
        self.f = self.f or SpaceTimeField.zero(d)
        self.Hext = self.Hext or SpaceTimeField.zero(d)


@dataclass
class StepConfig:
    dt: float = 1e-2
    T_end: float = 0.1
    kappa: float | None = None  # mollifier half-width, default dt
    gtol: float = 1e-7
    max_iter: int = 2000
    history: int = 10
    E_max: float = 1e6
    inertial: bool = False
    delay: float | None = None  # time delay of the inertial term, default dt
    seed: int = 0
    contact_tol: float = 0.0
    cn_spacing: float | None = None
    descent_rtol: float = 1e-10

    def __post_init__(self):
        if not (self.dt > 0 and self.T_end >= 0):
            raise ContractViolation("dt must be positive and T_end nonnegative")
        if not (self.gtol > 0 and self.max_iter > 0):
            raise ContractViolation("solver tolerances must be positive")

    @property
    def steps(self) -> int:
        return int(math.ceil(self.T_end / self.dt - 1e-12))

    @property
    def horizon(self) -> float:
        return self.steps * self.dt


_GL33 = np.polynomial.legendre.leggauss(33)
_GL5 = np.polynomial.legendre.leggauss(5)


def _bump(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    inside = np.abs(r) < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def mollify_force(f: SpaceTimeField, t: float, kappa: float, T: float, x: np.ndarray) -> np.ndarray:
    """Time-mollified force at positions ``x``.

    The window [t + xi - kappa, t + xi + kappa] with xi = kappa (T - 2t)/T stays
    inside [0, T]; the weights are a normalized C-infinity bump.
    """
    if not (0 <= t <= T * (1 + 1e-12)) or kappa <= 0:
        raise ValueError(f"t={t} outside [0, {T}] or kappa <= 0")
    nodes, wts = _GL33
    theta = _bump(nodes) * wts
    theta /= theta.sum()
    centre = t + kappa * (T - 2 * t) / T if T > 0 else t
    out = np.zeros(x.shape)
    for r, c in zip(nodes, theta):
        out += c * f(centre - kappa * r, x)
    return out


def clement_Hext(H: SpaceTimeField, k: int, dt: float, x: np.ndarray, jacobian: bool = False):
    """Interval mean (1/dt) int_{(k-1)dt}^{k dt} H(s, x) ds by 5-point Gauss quadrature."""
    if k < 1:
        raise ValueError("k must be at least 1")
    nodes, wts = _GL5
    ts = (k - 0.5) * dt + 0.5 * dt * nodes
    val = sum(0.5 * c * H(s, x) for s, c in zip(ts, wts))
    if not jacobian:
        return val
    jac = sum(0.5 * c * H.jacobian(s, x) for s, c in zip(ts, wts))
    return val, jac


# -- incremental functional ------------------------------------------------------------

@dataclass
class FunctionalValue:
    value: float
    energy: EnergyBreakdown
    dissipation: float
    work: float  # body-force work  int rho f . (eta - eta_prev)
    zeeman: float  # int mu M . Hext(eta)
    kinetic: float = 0.0
    grad_eta: np.ndarray | None = None
    grad_M: np.ndarray | None = None
    parts: dict | None = None  # separate gradient contributions, for residual normalization


class IncrementalFunctional:
    """F_k for fixed previous state and step data."""

    def __init__(self, spec: GridSpec, params: MaterialParams, config: StepConfig, eta_prev: np.ndarray,
                 M_prev: np.ndarray, k: int, data: DataProviders, stray_grid: GridSpec | None = None,
                 eta_prev2: np.ndarray | None = None):
        self.spec, self.params, self.config = spec, params, config
        self.eta_prev, self.M_prev, self.k = eta_prev, M_prev, k
        self.data = data
        self.state_prev = build_kinematics(eta_prev, spec)
        if not self.state_prev.orientation_preserving:
            raise ContractViolation("previous state is not admissible")
        dt = config.dt
        if params.stray:
            self.stray_grid = stray_grid or sf.stray_grid_for(
                eta_prev, params.stray_spacing or float(spec.h.min()), params.stray_pad)
        else:
            self.stray_grid = None
        T = max(config.horizon, dt)
        kappa = config.kappa or dt
        t = k * dt
        self.force = None
        if not data.f.is_zero():
            self.force = params.rho * mollify_force(data.f, min(t, T), kappa, T, eta_prev)
        self.has_field = not data.Hext.is_zero()
        self.v_prev = None
        if config.inertial:
            self.v_prev = np.zeros_like(eta_prev) if eta_prev2 is None else (eta_prev - eta_prev2) / dt

    def field(self, eta: np.ndarray, jacobian: bool = False):
        return clement_Hext(self.data.Hext, self.k, self.config.dt, eta, jacobian)

    def evaluate(self, eta: np.ndarray, M: np.ndarray, want_grad: bool = False, parts: bool = False) -> FunctionalValue:
        spec, p, dt = self.spec, self.params, self.config.dt
        w = spec.weights
        try:
            ev = evaluate(eta, M, p, spec, want_grad=want_grad, stray_grid=self.stray_grid)
        except sf.PaddingError:
            ev = None
        if ev is None or ev.breakdown.infinite:
            return FunctionalValue(math.inf, EnergyBreakdown.sentinel(), math.inf, 0.0, 0.0)
        deta = (eta - self.eta_prev) / dt
        dM = (M - self.M_prev) / dt
        R = dissipation_rate(self.eta_prev, deta, dM, spec, p, self.state_prev)
        work = 0.0 if self.force is None else float(np.sum(w[:, None] * self.force * (eta - self.eta_prev)))
        zeeman, Hk, dHk = 0.0, None, None
        if self.has_field:
            if want_grad:
                Hk, dHk = self.field(eta, jacobian=True)
            else:
                Hk = self.field(eta)
            zeeman = p.mu * float(np.sum(w[:, None] * M * Hk))
        kinetic = 0.0
        if self.v_prev is not None:
            h = self.config.delay or dt
            rel = deta - self.v_prev
            kinetic = p.rho * dt / (2 * h) * float(np.sum(w[:, None] * rel * rel))
        value = ev.breakdown.total + dt * R - work - zeeman + kinetic
        out = FunctionalValue(value, ev.breakdown, R, work, zeeman, kinetic)
        if want_grad:
            gR_eta, gR_M = grad_dissipation(self.eta_prev, deta, dM, spec, p, self.state_prev)
            g_eta = ev.grad_eta + gR_eta
            g_M = ev.grad_M + gR_M
            force_eta = np.zeros_like(eta)
            field_eta, field_M = np.zeros_like(eta), np.zeros_like(M)
            if self.force is not None:
                force_eta = w[:, None] * self.force
            if self.has_field:
                field_eta = p.mu * w[:, None] * np.einsum("nca,nc->na", dHk, M)
                field_M = p.mu * w[:, None] * Hk
            g_eta = g_eta - force_eta - field_eta
            g_M = g_M - field_M
            kin = np.zeros_like(eta)
            if self.v_prev is not None:
                h = self.config.delay or dt
                kin = p.rho / h * w[:, None] * (deta - self.v_prev)
                g_eta = g_eta + kin
            free = spec.free_mask
            g_eta[~free] = 0.0
            out.grad_eta, out.grad_M = g_eta, g_M
            if parts:
                out.parts = {
                    "energy": (ev.grad_eta, ev.grad_M),
                    "dissipation": (gR_eta, gR_M),
                    "forcing": (-(force_eta + field_eta), -field_M),
                    "kinetic": (kin, np.zeros_like(M)),
                }
        return out

    def __call__(self, eta, M) -> float:
        return self.evaluate(eta, M).value

    def preconditioner(self, eta: np.ndarray, M: np.ndarray):
        """Sparse SPD approximation of the Hessian, factorized per block.

        Deformation block: dissipation, W and Hessian-regularization
        stiffness (cross-component coupling dropped).  Magnetization block:
        dissipation, anisotropy, saturation and exchange stiffness.  Returns
        the factorizations of the two scalar blocks.
        """
        spec, p, dt = self.spec, self.params, self.config.dt
        w = spec.weights
        d = spec.d
        st = build_kinematics(eta, spec)
        if not st.orientation_preserving:
            st = self.state_prev
        D = spec.first_derivatives
        C = st.Finv @ np.swapaxes(st.Finv, 1, 2)
        J = st.J

        def stiffness(coef):  # sum_jk D_j^T diag(coef[:, j, k]) D_k
            out = None
            for j in range(d):
                for k in range(d):
                    term = D[j].T @ sp.diags(coef[:, j, k]) @ D[k]
                    out = term if out is None else out + term
            return out

        C_prev = self.state_prev.Finv @ np.swapaxes(self.state_prev.Finv, 1, 2)
        c_eta = (2 * p.nu / dt * w * self.state_prev.J)[:, None, None] * C_prev
        c_eta = c_eta + (p.mu_e * w)[:, None, None] * np.eye(d)
        c_eta = c_eta + (p.a * (p.a + 1) * w * J ** (-p.a))[:, None, None] * C
        K_eta = stiffness(c_eta)
        T = hessian(eta, spec)
        Tn = np.sqrt(np.einsum("nijk,nijk->n", T, T))
        ch = w * ((p.q - 1) * Tn ** (p.q - 2) if p.q > 2 else np.ones_like(Tn))
        for (a, b), Dab in spec.second_derivatives.items():
            K_eta = K_eta + (1 if a == b else 2) * (Dab.T @ sp.diags(ch) @ Dab)
        if self.v_prev is not None:
            K_eta = K_eta + sp.diags(p.rho / ((self.config.delay or dt) * dt) * w)
        free = spec.free_mask
        K_eta = K_eta.tocsr()[free][:, free]
        K_eta = K_eta + 1e-10 * K_eta.diagonal().max() * sp.identity(K_eta.shape[0])
        m2 = np.einsum("ni,ni->n", M, M)
        s = m2 / J**2 - 1.0
        diag_M = w / (self.state_prev.J * dt) + 2 * p.K * w
        diag_M = diag_M + w / (p.beta**2 * J) * (np.maximum(s, 0.0) + 2 * m2 / J**2 / d)
        if p.stray:
            diag_M = diag_M + 0.5 * p.mu * w
        K_M = sp.diags(diag_M)
        if p.A > 0:
            Jinv = sp.diags(1.0 / J)
            K_M = K_M + Jinv @ stiffness((2 * p.A * w * J)[:, None, None] * C) @ Jinv
        return spla.splu(K_eta.tocsc()), spla.splu(sp.csc_matrix(K_M))


def assemble_functional(prev: tuple[np.ndarray, np.ndarray], k: int, data: DataProviders, params: MaterialParams,
                        config: StepConfig, spec: GridSpec, **kw) -> IncrementalFunctional:
    return IncrementalFunctional(spec, params, config, prev[0], prev[1], k, data, **kw)


# -- quasi-Newton solver --------------------------------------------------------------------

@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    gnorm: float
    iterations: int
    converged: bool
    message: str


def lbfgs(fg: Callable[[np.ndarray, bool], tuple[float, np.ndarray | None]], x0: np.ndarray, metric: np.ndarray,
          gtol: float, max_iter: int, history: int = 10, step_scale: float = 1.0, c1: float = 1e-4,
          max_halvings: int = 60, precond: Callable[[np.ndarray], np.ndarray] | None = None) -> LBFGSResult:
    """Limited-memory BFGS in the inner product weighted by ``metric``.

    ``fg(x, grad)`` returns the value and, if ``grad``, the gradient; infinite
    values mark inadmissible points.  The backtracking halves the step until
    the trial is finite and satisfies Armijo; once differences drop to rounding
    level a trial is also accepted when it does not raise the value by more
    than that level and the directional derivative has shrunk.  ``precond``
    applies an approximate inverse Hessian used as the initial matrix.
    """
    if precond is None:
        def precond(v):
            return v / metric * step_scale / max(dual(g), 1e-300)
    x = x0.copy()
    f, g = fg(x, True)
    if not np.isfinite(f):
        return LBFGSResult(x, f, g, math.inf, 0, False, "infinite initial value")
    pairs: deque = deque(maxlen=history)
    it = 0

    def dual(v):
        return float(np.sqrt(np.sum(v * v / metric)))

    while True:
        gnorm = dual(g)
        if gnorm <= gtol:
            return LBFGSResult(x, f, g, gnorm, it, True, "converged")
        if it >= max_iter:
            return LBFGSResult(x, f, g, gnorm, it, False, "iteration limit")
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            q -= a * y
            alphas.append(a)
        if pairs:
            s, y, _ = pairs[-1]
            gamma = (s @ y) / (y @ precond(y))
        else:
            gamma = 1.0
        r = gamma * precond(q)
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * (y @ r)
            r += s * (a - b)
        p = -r
        slope = g @ p
        if not slope < 0:
            pairs.clear()
            p = -precond(g)
            slope = g @ p
        alpha = 1.0
        noise = 1e-14 * max(abs(f), 1.0) * 8
        accepted = False
        for _ in range(max_halvings):
            xt = x + alpha * p
            ft, _ = fg(xt, False)
            if np.isfinite(ft):
                if ft <= f + c1 * alpha * slope:
                    accepted = True
                elif ft <= f + noise and abs(ft - f) <= 2 * noise:
                    _, gt = fg(xt, True)
                    if abs(gt @ p) <= 0.9 * abs(slope):
                        accepted = True
                if accepted:
                    break
            alpha *= 0.5
        if not accepted:
            return LBFGSResult(x, f, g, gnorm, it, False, "line search failed")
        ft, gt = fg(xt, True)
        s, y = xt - x, gt - g
        sy = s @ y
        if sy > 1e-300 * max(1.0, s @ s):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = xt, ft, gt
        it += 1


# -- steps and runs ----------------------------------------------------------------------------

@dataclass
class StepResult:
    eta: np.ndarray
    M: np.ndarray
    value: float
    value_init: float
    energy: EnergyBreakdown
    dissipation: float
    residual_eta: float
    residual_M: float
    iterations: int
    status: str
    min_det: float = math.nan
    cn_residual: float = math.nan
    cn_tolerance: float = math.nan
    margin: float = math.nan
    work: float = 0.0
    zeeman: float = 0.0
    message: str = ""


def _pack(eta, M, free):
    return np.concatenate([eta[free].ravel(), M.ravel()])


def minimize_step(functional: IncrementalFunctional, init: tuple[np.ndarray, np.ndarray],
                  config: StepConfig) -> StepResult:
    """Minimize one incremental functional from ``init`` and classify the outcome."""
    spec = functional.spec
    d = spec.d
    free = spec.free_mask
    eta0, M0 = init
    nf = int(free.sum()) * d
    w = spec.weights
    metric = np.concatenate([np.repeat(w[free], d), np.repeat(w, d)])

    def unpack(x):
        eta = eta0.copy()
        eta[free] = x[:nf].reshape(-1, d)
        return eta, x[nf:].reshape(-1, d)

    cache = {}

    def fg(x, grad):
        eta, M = unpack(x)
        val = functional.evaluate(eta, M, want_grad=grad)
        cache["last"] = val
        if not grad:
            return val.value, None
        if not np.isfinite(val.value):
            return val.value, None
        return val.value, _pack(val.grad_eta, val.grad_M, free)

    x0 = _pack(eta0, M0, free)
    f_init = functional.evaluate(eta0, M0).value
    lu_eta, lu_M = functional.preconditioner(eta0, M0)

    def precond(v):
        a = v[:nf].reshape(-1, d)
        b = v[nf:].reshape(-1, d)
        return np.concatenate([lu_eta.solve(a).ravel(), lu_M.solve(b).ravel()])

    res = lbfgs(fg, x0, metric, config.gtol, config.max_iter, config.history,
                step_scale=0.1 * float(spec.h.min()), precond=precond)
    eta, M = unpack(res.x)
    final = functional.evaluate(eta, M, want_grad=True)
    g_eta, g_M = final.grad_eta, final.grad_M
    r_eta = float(np.sqrt(np.sum(g_eta[free] ** 2 / w[free, None]))) if final.grad_eta is not None else math.inf
    r_M = float(np.sqrt(np.sum(g_M**2 / w[:, None]))) if final.grad_M is not None else math.inf
    out = StepResult(eta, M, final.value, f_init, final.energy, final.dissipation, r_eta, r_M, res.iterations,
                     "accepted", work=final.work, zeeman=final.zeeman, message=res.message)
    if not res.converged:
        out.status = "solver-failure"
        return out
    if final.energy.total > config.E_max:
        out.status = "energy-blowup"
        return out
    state = build_kinematics(eta, spec)
    out.min_det = state.min_det
    cn = ciarlet_necas_residual(eta, spec, state, config.cn_spacing)
    out.cn_residual, out.cn_tolerance = cn.residual, cn.tolerance
    out.margin, margin_ok = boundary_injectivity_margin(eta, spec)
    if not cn.ok or not margin_ok or out.margin <= config.contact_tol or state.min_det <= 0:
        out.status = "self-contact"
    return out


def harmonic_extension(spec: GridSpec, boundary_shift: np.ndarray) -> np.ndarray:
    """Extend a displacement prescribed on P to all nodes with the grid graph Laplacian."""
    n = spec.n
    lap = None
    for a in range(spec.d):
        e = np.ones(n[a])
        L1 = sp.diags([-e[1:], np.r_[1, 2 * np.ones(n[a] - 2), 1], -e[1:]], [-1, 0, 1])
        term = None
        for b in range(spec.d):
            m = L1 if b == a else sp.identity(n[b])
            term = m if term is None else sp.kron(term, m)
        lap = term if lap is None else lap + term
    lap = lap.tocsr()
    P = ~spec.free_mask
    out = np.zeros_like(boundary_shift)
    out[P] = boundary_shift[P]
    if (~P).any():
        A = lap[~P][:, ~P].tocsc()
        rhs = -lap[~P][:, P] @ boundary_shift[P]
        out[~P] = spla.spsolve(A, rhs).reshape(-1, spec.d) if spec.d > 1 else spla.spsolve(A, rhs)
    return out


@dataclass
class RunContext:
    """Inputs of a run, kept with the trajectory for post-hoc diagnostics."""

    data: DataProviders
    params: MaterialParams
    config: StepConfig


def run_evolution(data: DataProviders, params: MaterialParams, config: StepConfig, spec: GridSpec,
                  callback: Callable[[int, StepResult], None] | None = None) -> TrajectoryStore:
    """Iterate the minimizing-movements scheme from k = 1 until T_end or a stopping event."""
    params.validate(spec.d)
    eta, M = data.eta0.copy(), data.M0.copy()
    store = TrajectoryStore(config.dt, spec, meta={"status": "accepted", "steps": [],
                                                   "context": RunContext(data, params, config)})
    # one stray grid for as long as it stays admissible, so energies of consecutive steps are comparable
    stray_grid = sf.stray_grid_for(eta, params.stray_spacing or float(spec.h.min()), params.stray_pad) \
        if params.stray else None
    E0 = evaluate(eta, M, params, spec, stray_grid=stray_grid).breakdown
    if E0.infinite:
        raise ContractViolation("initial energy is infinite")
    st0 = build_kinematics(eta, spec)
    cn0 = ciarlet_necas_residual(eta, spec, st0, config.cn_spacing)
    margin0, margin_ok = boundary_injectivity_margin(eta, spec)
    if not (cn0.ok and margin_ok):
        raise ContractViolation("initial deformation fails the injectivity checks")
    info0 = {"k": 0, "min_det": st0.min_det, "cn_residual": cn0.residual, "cn_tolerance": cn0.tolerance,
             "margin": margin0}
    store.append(Snapshot(0.0, eta.copy(), M.copy(), E0, 0.0, "accepted", info0))
    eta_prev2 = None
    for k in range(1, config.steps + 1):
        t = k * config.dt
        init_eta = eta.copy()
        if data.dirichlet is not None:
            target = eta.copy()
            P = ~spec.free_mask
            target[P] = data.dirichlet(t, spec.coords[P])
            init_eta = eta + harmonic_extension(spec, target - eta)
        rebuilt = False
        if params.stray and not (sf.stray_grid_ok(eta, stray_grid, params.stray_pad)
                                 and sf.stray_grid_ok(init_eta, stray_grid, params.stray_pad)):
            stray_grid = sf.stray_grid_for(np.concatenate([eta, init_eta]),
                                           params.stray_spacing or float(spec.h.min()), params.stray_pad)
            rebuilt = True
        fun = IncrementalFunctional(spec, params, config, eta, M, k, data, stray_grid, eta_prev2)
        res = minimize_step(fun, (init_eta, M), config)
        if res.status == "accepted" and params.stray and not sf.stray_grid_ok(res.eta, stray_grid, params.stray_pad):
            grid_new = sf.stray_grid_for(np.concatenate([eta, res.eta]),
                                         params.stray_spacing or float(spec.h.min()), params.stray_pad)
            fun = IncrementalFunctional(spec, params, config, eta, M, k, data, grid_new, eta_prev2)
            res = minimize_step(fun, (res.eta, res.M), config)
            stray_grid, rebuilt = grid_new, True
        base = fun.evaluate(eta, M).value if data.dirichlet is None else res.value_init
        info = {"k": k, "value": res.value, "base": base, "iterations": res.iterations,
                "residual_eta": res.residual_eta, "residual_M": res.residual_M, "status": res.status,
                "min_det": res.min_det, "cn_residual": res.cn_residual, "cn_tolerance": res.cn_tolerance,
                "margin": res.margin, "work": res.work, "zeeman": res.zeeman,
                "zeeman_base": fun.evaluate(eta, M).zeeman, "message": res.message,
                "stray_grid_rebuilt": rebuilt, "stray_grid": stray_grid}
        if res.status == "accepted" and res.value > base + config.descent_rtol * abs(res.value):
            res.status = "solver-failure"
            info["status"] = res.status
            info["message"] = "descent inequality violated"
        store.meta["steps"].append(info)
        if callback is not None:
            callback(k, res)
        if res.status != "accepted":
            store.meta["status"] = res.status
            store.meta["failed_step"] = k
            log.info("step %d terminated with status %s (%s)", k, res.status, res.message)
            break
        eta_prev2 = eta
        eta, M = res.eta, res.M
        store.append(Snapshot(t, eta.copy(), M.copy(), res.energy, res.dissipation, res.status, info))
    return store
