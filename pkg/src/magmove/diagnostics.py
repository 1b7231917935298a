"""Post-hoc verification of a computed trajectory.

Budget and Gronwall comparisons, Euler-Lagrange pairings against a fixed
bank of compactly supported test fields, time-step refinement studies and
weak-form checks of the affine interpolants.  Abstract constants are
replaced by quantities realized along the run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .energy import MaterialParams
from .grid import GridSpec, TrajectoryStore, gradient, interpolant_eval
from .kinematics import (background_grid, build_kinematics, eulerian_velocity, eulerian_weights, locate,
                         material_derivative, push_forward, push_forward_magnetization)
from .stepper import IncrementalFunctional, RunContext, SpaceTimeField, clement_Hext


class DiagnosticFailure(AssertionError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


def _context(trajectory: TrajectoryStore, context: RunContext | None) -> RunContext:
    ctx = context or trajectory.meta.get("context")
    if ctx is None:
        raise ValueError("trajectory carries no run context; pass one explicitly")
    return ctx


# -- energy budget --------------------------------------------------------------------

@dataclass
class BudgetReport:
    lhs: np.ndarray  # E_k + dt sum_{l<=k} R_l
    energy: np.ndarray
    forcing: np.ndarray  # cumulative forcing increments
    bound: np.ndarray  # E_0 + forcing
    envelope: float | None = None
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {"lhs": self.lhs.tolist(), "energy": self.energy.tolist(), "forcing": self.forcing.tolist(),
                "bound": self.bound.tolist(), "envelope": self.envelope, "violations": self.violations}


def energy_budget_report(trajectory: TrajectoryStore, rtol: float = 1e-10, atol: float = 1e-8,
                         envelope: float | None = None, strict: bool = False) -> BudgetReport:
    """Telescoped budget E_k + dt sum R <= E_0 + sum of forcing increments.

    Forcing increments per step are the body-force work plus the change of
    the Zeeman pairing, as booked by the stepper.  With ``envelope`` the
    left-hand side is also compared with that value.
    """
    snaps = trajectory.snapshots
    if not snaps:
        raise ValueError("empty trajectory")
    dt = trajectory.dt
    E = np.array([s.energy.total for s in snaps])
    R = np.array([0.0] + [s.dissipation for s in snaps[1:]])
    inc = np.array([0.0] + [s.info.get("work", 0.0) + s.info.get("zeeman", 0.0) - s.info.get("zeeman_base", 0.0)
                            for s in snaps[1:]])
    lhs = E + dt * np.cumsum(R)
    forcing = np.cumsum(inc)
    bound = E[0] + forcing
    rep = BudgetReport(lhs, E, forcing, bound, envelope)
    scale = max(abs(E[0]), 1.0)
    for k in range(1, len(snaps)):
        if lhs[k] > bound[k] + rtol * scale * k + atol:
            rep.violations.append({"step": k, "kind": "budget", "excess": float(lhs[k] - bound[k])})
        if envelope is not None and lhs[k] > envelope:
            rep.violations.append({"step": k, "kind": "envelope", "excess": float(lhs[k] - envelope)})
    if strict and rep.violations:
        v = rep.violations[0]
        raise DiagnosticFailure(f"{v['kind']} exceeded by {v['excess']:.3e}", v["step"])
    return rep


def gronwall_envelope(params: MaterialParams, c2: float, c3: float, f_sup: float, T: float,
                      volume: float = 1.0) -> float:
    """[c2 + T |Omega_0| (rho ||f||_inf)^2 / (2 nu c3)] exp(max(1, 8 beta^2) T)."""
    rate = max(1.0, 8.0 * params.beta**2)
    growth = 0.0 if f_sup == 0 else T * volume * (params.rho * f_sup) ** 2 / (2 * params.nu * c3)
    return (c2 + growth) * math.exp(rate * T)


@dataclass
class RealizedConstants:
    c2: float
    c3: float
    f_sup: float
    T: float
    volume: float


def realized_constants(trajectory: TrajectoryStore, context: RunContext | None = None,
                       samples: int = 16) -> RealizedConstants:
    """Surrogates for the envelope's constants measured along the run.

    c2 bounds the initial energy plus the accumulated Zeeman input; c3 is the
    smallest det F / |F|_2^2 (the coercivity of the dissipation in the
    reference geometry); ||f||_inf is sampled at the realized positions.
    """
    ctx = _context(trajectory, context)
    spec = trajectory.grid
    E0 = trajectory[0].energy.total
    zee = np.cumsum([0.0] + [s.info.get("zeeman", 0.0) - s.info.get("zeeman_base", 0.0)
                             for s in trajectory.snapshots[1:]])
    c2 = 2.0 * (abs(E0) + max(0.0, float(zee.max())))
    c3 = math.inf
    for s in trajectory.snapshots:
        st = build_kinematics(s.eta, spec)
        smax = np.linalg.norm(st.F, ord=2, axis=(1, 2))
        c3 = min(c3, float(np.min(st.J / smax**2)))
    f_sup = 0.0
    if not ctx.data.f.is_zero():
        T = max(trajectory.t_end, trajectory.dt)
        for t in np.linspace(0.0, T, samples):
            for s in trajectory.snapshots[:: max(1, len(trajectory) // samples)]:
                f_sup = max(f_sup, float(np.abs(np.linalg.norm(ctx.data.f(t, s.eta), axis=1)).max()))
    return RealizedConstants(c2, c3, f_sup, trajectory.t_end, spec.volume)


def envelope_for(trajectory: TrajectoryStore, context: RunContext | None = None) -> float:
    ctx = _context(trajectory, context)
    rc = realized_constants(trajectory, ctx)
    return gronwall_envelope(ctx.params, rc.c2, rc.c3, rc.f_sup, rc.T, rc.volume)


# -- test bank ----------------------------------------------------------------------------

BANK_SCALES = (0.45, 0.3, 0.2)


def _bump1(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass
class BumpBank:
    """Vector fields phi_j(x) e_j: tensor bumps compactly supported in a box."""

    centres: np.ndarray  # (B, d), in units of the box
    radii: np.ndarray  # (B,)
    directions: np.ndarray  # (B, d)
    lo: np.ndarray
    size: np.ndarray

    def __len__(self) -> int:
        return len(self.radii)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """(B, P, d) values at points ``x``."""
        u = (x - self.lo) / self.size
        out = np.empty((len(self), len(x), x.shape[1]))
        for j in range(len(self)):
            phi = np.prod(_bump1((u - self.centres[j]) / self.radii[j]), axis=1)
            out[j] = phi[:, None] * self.directions[j]
        return out


def bump_bank(d: int, lo=None, size=None, seed: int = 0, per_scale: int = 9) -> BumpBank:
    """27 bump fields at three scales with seeded centres and directions, supported inside the box."""
    rng = np.random.default_rng(seed)
    lo = np.zeros(d) if lo is None else np.asarray(lo, float)
    size = np.ones(d) if size is None else np.asarray(size, float)
    centres, radii = [], []
    for r in BANK_SCALES:
        centres.append(rng.uniform(r, 1 - r, (per_scale, d)))
        radii += [r] * per_scale
    dirs = rng.standard_normal((len(radii), d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return BumpBank(np.concatenate(centres), np.array(radii), dirs, lo, size)


# -- Euler-Lagrange residuals -----------------------------------------------------------------

@dataclass
class ELReport:
    motion: np.ndarray  # max normalized defect per step
    magnetic: np.ndarray
    bound: float | None = None

    @property
    def max_motion(self) -> float:
        return float(self.motion.max()) if self.motion.size else 0.0

    @property
    def max_magnetic(self) -> float:
        return float(self.magnetic.max()) if self.magnetic.size else 0.0

    @property
    def ok(self) -> bool:
        return self.bound is None or max(self.max_motion, self.max_magnetic) <= self.bound


def _normalized(parts: dict, idx: int, chi: np.ndarray) -> float:
    pair = [float(np.sum(g[idx] * chi)) for g in (v for v in parts.values())]
    den = sum(abs(p) for p in pair)
    return abs(sum(pair)) / den if den > 0 else 0.0


def step_functional(trajectory: TrajectoryStore, k: int, context: RunContext | None = None) -> IncrementalFunctional:
    """Rebuild the incremental functional minimized at step ``k``."""
    ctx = _context(trajectory, context)
    prev = trajectory[k - 1]
    prev2 = trajectory[k - 2].eta if k >= 2 else None
    grid = trajectory[k].info.get("stray_grid") if k < len(trajectory) else None
    return IncrementalFunctional(trajectory.grid, ctx.params, ctx.config, prev.eta, prev.M, k, ctx.data,
                                 stray_grid=grid, eta_prev2=prev2)


def el_residuals(trajectory: TrajectoryStore, context: RunContext | None = None, bank: BumpBank | None = None,
                 bound: float | None = None) -> ELReport:
    """Pair each step's discrete Euler-Lagrange gradients with the test bank.

    The defect |<sum of terms, chi>| / sum |<term, chi>| is scale free; its
    maximum over the bank is reported per step.
    """
    spec = trajectory.grid
    bank = bank or bump_bank(spec.d, spec.origin, spec.extent)
    chis = bank.evaluate(spec.coords)
    mot, mag = [], []
    for k in range(1, len(trajectory)):
        fun = step_functional(trajectory, k, context)
        snap = trajectory[k]
        val = fun.evaluate(snap.eta, snap.M, want_grad=True, parts=True)
        pe = {key: v[0] for key, v in val.parts.items()}
        pm = {key: v[1] for key, v in val.parts.items()}
        free = spec.free_mask
        mot.append(max(_normalized(pe, free, chi[free]) for chi in chis))
        mag.append(max(_normalized(pm, slice(None), chi) for chi in chis))
    rep = ELReport(np.array(mot), np.array(mag), bound)
    if bound is not None and not rep.ok:
        worst = int(np.argmax(np.maximum(rep.motion, rep.magnetic))) + 1
        raise DiagnosticFailure(f"Euler-Lagrange defect above {bound:.1e}", worst)
    return rep


# -- refinement -------------------------------------------------------------------------------

@dataclass
class RefinementTable:
    dts: list
    discrepancies: list  # between consecutive levels
    ratios: list
    holder: list  # fitted C in ||eta(t1) - eta(t2)|| <= C sqrt|t1 - t2| per level
    monotone: bool
    trajectories: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {"dts": self.dts, "discrepancies": self.discrepancies, "ratios": self.ratios,
                "holder": self.holder, "monotone": self.monotone}


def _l2(spec: GridSpec, a: np.ndarray) -> float:
    return float(np.sqrt(spec.weights @ np.sum(a * a, axis=1)))


def trajectory_discrepancy(coarse: TrajectoryStore, fine: TrajectoryStore) -> float:
    """sup over the fine time nodes of the L2 distance of the affine interpolants of (eta, M)."""
    spec = fine.grid
    T = min(coarse.t_end, fine.t_end)
    worst = 0.0
    for t in fine.times[fine.times <= T * (1 + 1e-12)]:
        ea, ma = interpolant_eval(coarse, min(t, coarse.t_end))
        eb, mb = interpolant_eval(fine, t)
        worst = max(worst, math.hypot(_l2(spec, ea - eb), _l2(spec, ma - mb)))
    return worst


def holder_constant(trajectory: TrajectoryStore) -> float:
    """Largest ||eta(t1) - eta(t2)||_L2 / sqrt|t1 - t2| over stored snapshot pairs."""
    spec = trajectory.grid
    best = 0.0
    snaps = trajectory.snapshots
    for i in range(len(snaps)):
        for j in range(i + 1, len(snaps)):
            gap = snaps[j].t - snaps[i].t
            best = max(best, _l2(spec, snaps[j].eta - snaps[i].eta) / math.sqrt(gap))
    return best


def refinement_study(runner: Callable[[float], TrajectoryStore], dt: float, levels: int = 3) -> RefinementTable:
    """Run ``runner`` with dt, dt/2, ... and compare consecutive levels."""
    if levels < 3:
        raise ValueError("a refinement study needs at least three levels")
    dts = [dt / 2**l for l in range(levels)]
    trajs = [runner(h) for h in dts]
    disc = [trajectory_discrepancy(trajs[l], trajs[l + 1]) for l in range(levels - 1)]
    ratios = [disc[l] / disc[l + 1] if disc[l + 1] > 0 else math.inf for l in range(levels - 2)]
    holder = [holder_constant(t) for t in trajs]
    monotone = all(disc[l + 1] < disc[l] for l in range(levels - 2)) or all(x == 0 for x in disc)
    return RefinementTable(dts, disc, ratios, holder, monotone, trajs)


# -- weak forms -------------------------------------------------------------------------------

@dataclass
class WeakReport:
    motion: np.ndarray
    magnetic: np.ndarray
    initial_C1: np.ndarray  # ||eta(t) - eta0||_C1 per snapshot
    initial_L2: np.ndarray  # ||M(t) - M0||_L2 per snapshot

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("motion", "magnetic", "initial_C1", "initial_L2")}


def weak_residual_check(trajectory: TrajectoryStore, context: RunContext | None = None,
                        bank: BumpBank | None = None, bg_spacing: float | None = None,
                        eulerian: bool = True) -> WeakReport:
    """Weak-form defects of the interpolants and initial-condition attainment.

    Motion: the Lagrangian momentum balance paired with the bank (the
    deformation part of the Euler-Lagrange pairing).  Magnetic: the Eulerian
    balance  D_t M + M div v + (driving force density) = 0  on a background
    grid, with the transport terms computed from the pushed-forward fields.
    """
    ctx = _context(trajectory, context)
    spec = trajectory.grid
    bank = bank or bump_bank(spec.d, spec.origin, spec.extent)
    el = el_residuals(trajectory, ctx, bank)
    mag = []
    if eulerian:
        dt = trajectory.dt
        hb = bg_spacing or float(spec.h.min())
        for k in range(1, len(trajectory)):
            a, b = trajectory[k - 1], trajectory[k]
            bg = background_grid(np.concatenate([a.eta, b.eta]), hb)
            loc_b, loc_a = locate(b.eta, spec, bg), locate(a.eta, spec, bg)
            st_b = build_kinematics(b.eta, spec)
            Mb = push_forward_magnetization(b.M, b.eta, spec, bg, st_b, loc_b)
            Ma = push_forward_magnetization(a.M, a.eta, spec, bg, None, loc_a)
            v = eulerian_velocity(b.eta, (b.eta - a.eta) / dt, spec, bg, st_b, loc_b)
            DtM = material_derivative(Mb.values, Ma.values, v.values, dt, bg, Mb.inside)
            fun = step_functional(trajectory, k, ctx)
            val = fun.evaluate(b.eta, b.M, want_grad=True, parts=True)
            drive = sum(val.parts[key][1] for key in ("energy", "forcing"))
            w = spec.weights
            dens = push_forward(drive / (w * fun.state_prev.J)[:, None], b.eta, spec, bg, loc_b)
            wq = eulerian_weights(b.eta, spec, bg, loc_b)
            ok = Mb.inside & Ma.inside
            chis = bank.evaluate(bg.coords)
            worst = 0.0
            for chi in chis:
                p1 = float(wq[ok] @ np.sum(DtM[ok] * chi[ok], axis=1))
                p2 = float(wq[ok] @ np.sum(dens.values[ok] * chi[ok], axis=1))
                den = abs(p1) + abs(p2)
                worst = max(worst, abs(p1 + p2) / den if den > 0 else 0.0)
            mag.append(worst)
    snaps = trajectory.snapshots
    e0, m0 = snaps[0].eta, snaps[0].M
    g0 = gradient(e0, spec)
    c1 = np.array([float(np.abs(s.eta - e0).max() + np.abs(gradient(s.eta, spec) - g0).max()) for s in snaps])
    l2 = np.array([_l2(spec, s.M - m0) for s in snaps])
    return WeakReport(el.motion, np.array(mag), c1, l2)


# -- external field discretization ----------------------------------------------------------------

def hext_difference_quotient(H: SpaceTimeField, dt: float, steps: int, x: np.ndarray, weights: np.ndarray,
                             fine: int = 64) -> tuple[float, float]:
    """Both sides of  dt sum_k ||(H^k - H^{k-1})/dt||^{4/3} <= int_0^T ||d_t H||^{4/3} dt.

    H^k are the interval means used by the stepper, the spatial norm is the
    weighted L2 norm at the fixed points ``x``, and the right side uses
    Gauss-Legendre quadrature with ``fine`` nodes per step and a central
    difference for d_t H.
    """
    p = 4.0 / 3.0

    def norm(v):
        return float(np.sqrt(weights @ np.sum(v * v, axis=1)))

    Hk = [clement_Hext(H, k, dt, x) for k in range(1, steps + 1)]
    lhs = dt * sum(norm((Hk[k] - Hk[k - 1]) / dt) ** p for k in range(1, steps))
    nodes, wts = np.polynomial.legendre.leggauss(fine)
    eps = 1e-5 * dt
    rhs = 0.0
    for k in range(steps):
        for s, c in zip((k + 0.5 + 0.5 * nodes) * dt, wts):
            rhs += 0.5 * dt * c * norm((H(s + eps, x) - H(s - eps, x)) / (2 * eps)) ** p
    return lhs, rhs


# -- finite-difference audit --------------------------------------------------------------------

FD_STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


def smooth_state(spec: GridSpec, seed: int = 0, amplitude: float = 0.03, modes: int = 3):
    """Seeded smooth deformation near the identity (fixed on P) and magnetization near unit length."""
    rng = np.random.default_rng(seed)
    X = spec.coords
    u = (X - np.array(spec.origin)) / np.array(spec.extent)

    def field():
        out = np.zeros_like(X)
        for _ in range(modes):
            k = rng.integers(1, 3, spec.d)
            ph = rng.uniform(0, 2 * np.pi, spec.d)
            amp = rng.standard_normal(spec.d)
            out += amp * np.prod(np.sin(np.pi * k * u + ph), axis=1)[:, None]
        return out / modes

    eta = X + amplitude * field() * (~spec.dirichlet)[:, None]
    M = np.eye(spec.d)[-1] + 0.2 * field()
    return eta, M


@dataclass
class GradientCheck:
    errors: dict  # name -> best relative error over FD_STEPS
    tol: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    @property
    def ok(self) -> bool:
        return self.worst <= self.tol


def _best_fd(fun: Callable[[float], float], analytic: float) -> float:
    best = math.inf
    for h in FD_STEPS:
        fd = (fun(h) - fun(-h)) / (2 * h)
        best = min(best, abs(fd - analytic) / max(abs(analytic), 1e-300))
    return best


def gradient_check(spec: GridSpec, params: MaterialParams, seed: int = 0, tol: float = 1e-6,
                   stray_grid: GridSpec | None = None) -> GradientCheck:
    """Directional derivatives of the energy and dissipation versus central differences.

    Directions are seeded smooth fields (deformation directions vanish on P);
    the reported error is the best over the step sweep ``FD_STEPS``.
    """
    from . import strayfield as sf
    from .dissipation import dissipation_rate, grad_dissipation
    from .energy import evaluate

    eta, M = smooth_state(spec, seed)
    d_eta, d_M = smooth_state(spec, seed + 10_000)
    d_eta = (d_eta - spec.coords) / 0.03 * (~spec.dirichlet)[:, None]
    d_M = d_M - np.eye(spec.d)[-1]
    if params.stray and stray_grid is None:
        stray_grid = sf.stray_grid_for(eta, params.stray_spacing or float(spec.h.min()), params.stray_pad, slack=0.3)
    ev = evaluate(eta, M, params, spec, want_grad=True, stray_grid=stray_grid)
    errors = {}
    for name, ga, de, dm in (("energy_eta", ev.grad_eta, d_eta, 0 * d_M), ("energy_M", ev.grad_M, 0 * d_eta, d_M)):
        analytic = float(np.sum(ga * (de if name.endswith("eta") else dm)))
        errors[name] = _best_fd(lambda h: evaluate(eta + h * de, M + h * dm, params, spec,
                                                   stray_grid=stray_grid).breakdown.total, analytic)
    rng = np.random.default_rng(seed + 20_000)
    r_eta = rng.standard_normal(eta.shape) * (~spec.dirichlet)[:, None]
    r_M = rng.standard_normal(M.shape)
    g_eta, g_M = grad_dissipation(eta, r_eta, r_M, spec, params)
    analytic = float(np.sum(g_eta * d_eta) + np.sum(g_M * d_M))
    errors["dissipation"] = _best_fd(lambda h: dissipation_rate(eta, r_eta + h * d_eta, r_M + h * d_M, spec, params),
                                     analytic)
    return GradientCheck(errors, tol)
