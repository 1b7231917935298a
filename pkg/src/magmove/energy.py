"""Stored energy of the magnetoelastic body and its analytic first variations.

The Lagrangian energy is evaluated nodally with the trapezoidal weights of
the reference grid.  Gradients are exact derivatives of this discrete energy:
pointwise derivatives are pushed back through the transposed difference
operators, so they agree with finite differences up to rounding.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Protocol

import numpy as np

from .grid import ContractViolation, GridSpec, gradient, gradient_adjoint, hessian, hessian_adjoint
from .kinematics import (KinematicState, build_kinematics, det, eulerian_weights, locate, masked_gradient,
                         push_forward, sample)
from . import strayfield as sf


class ParameterError(ContractViolation):
    def __init__(self, key: str, symbol: str, message: str):
        super().__init__(f"{key} ({symbol}): {message}")
        self.key = key
        self.symbol = symbol


# -- constitutive plug-ins ------------------------------------------------------------

class StoredEnergy(Protocol):
    def value(self, F: np.ndarray) -> np.ndarray: ...
    def derivative(self, F: np.ndarray) -> np.ndarray: ...


class Anisotropy(Protocol):
    def value(self, F: np.ndarray, M: np.ndarray) -> np.ndarray: ...
    def derivatives(self, F: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class QuadraticW:
    """W(F) = mu_e/2 |F|^2."""

    mu_e: float = 1.0

    def value(self, F):
        return 0.5 * self.mu_e * np.einsum("...ij,...ij->...", F, F)

    def derivative(self, F):
        return self.mu_e * F


@dataclass(frozen=True)
class EasyAxis:
    """Psi(F, M) = K |M - F a|^2 for a unit easy axis a."""

    K: float = 0.0
    axis: tuple[float, ...] = (0.0, 0.0, 1.0)

    def _res(self, F, M):
        return M - F @ np.asarray(self.axis)

    def value(self, F, M):
        r = self._res(F, M)
        return self.K * np.einsum("...i,...i->...", r, r)

    def derivatives(self, F, M):
        r = self._res(F, M)
        dM = 2 * self.K * r
        dF = -2 * self.K * r[..., :, None] * np.asarray(self.axis)[None, :]
        return dF, dM


# -- parameters --------------------------------------------------------------------------

# key -> model symbol, used in error messages and configuration documentation
SYMBOLS = {
    "a": "a, determinant penalty exponent",
    "q": "q, Hessian regularization exponent",
    "A": "A, exchange stiffness",
    "beta": "beta, saturation penalty scale",
    "nu": "nu, viscosity",
    "mu": "mu, magnetic permeability",
    "rho": "rho, mass density",
    "mu_e": "mu_e, coefficient of W(F) = mu_e/2 |F|^2",
    "K": "K, anisotropy coefficient of Psi(F, M) = K |M - F a_hat|^2",
    "easy_axis": "a_hat, easy axis",
    "p1": "p1, coercivity exponent of W",
    "p2": "p2, growth exponent in F",
    "p3": "p3, growth exponent of Psi in M",
    "p4": "p4, growth exponent of D_M Psi in M",
    "stray": "stray field toggle",
    "c_det": "c_det, determinant monitor floor",
    "override": "override of the exponent constraints",
    "stray_spacing": "h_bg, background spacing of the stray-field grid",
    "stray_pad": "padding factor of the stray-field grid",
}


@dataclass(frozen=True)
class MaterialParams:
    a: float = 13.0
    q: float = 4.0
    A: float = 1e-2
    beta: float = 0.5
    nu: float = 1.0
    mu: float = 1.0
    rho: float = 1.0
    mu_e: float = 1.0
    K: float = 0.5
    easy_axis: tuple[float, ...] | None = None
    p1: float = 2.0
    p2: float = 2.0
    p3: float = 2.0
    p4: float = 1.0
    stray: bool = True
    c_det: float = 1e-6
    override: bool = False
    stray_spacing: float | None = None  # default: finest reference spacing
    stray_pad: float = 2.0
    W: StoredEnergy | None = field(default=None, compare=False)
    psi: Anisotropy | None = field(default=None, compare=False)

    def validate(self, d: int = 3) -> "MaterialParams":
        for key in ("beta", "nu", "mu", "rho", "mu_e"):
            if not getattr(self, key) > 0:
                raise ParameterError(key, SYMBOLS[key], "must be positive")
        if not (self.A > 0 or (self.override and self.A == 0)):
            raise ParameterError("A", SYMBOLS["A"], "must be positive (zero only under override)")
        if self.K < 0:
            raise ParameterError("K", SYMBOLS["K"], "must be nonnegative")
        if self.q < 2:
            raise ParameterError("q", SYMBOLS["q"], "must be at least 2")
        if self.stray_pad < 2:
            raise ParameterError("stray_pad", SYMBOLS["stray_pad"], "padding below 2x aliases the stray field")
        ok_q = self.q > 3
        ok_a = ok_q and self.a > 3 * self.q / (self.q - 3)
        if not (ok_q and ok_a):
            msg = "requires q > 3 and a > 3q/(q-3)"
            if not self.override:
                key = "q" if not ok_q else "a"
                raise ParameterError(key, SYMBOLS[key], msg + f" (got a={self.a}, q={self.q})")
            warnings.warn(f"exponent hypothesis violated under override: {msg} (a={self.a}, q={self.q})",
                          stacklevel=2)
        if self.p1 < 2:
            raise ParameterError("p1", SYMBOLS["p1"], "must be at least 2")
        if self.p3 >= 6:
            raise ParameterError("p3", SYMBOLS["p3"], "must be below 6")
        if self.p4 >= 5:
            raise ParameterError("p4", SYMBOLS["p4"], "must be below 5")
        ax = self.axis(d)
        if not np.isclose(np.linalg.norm(ax), 1.0, atol=1e-12):
            raise ParameterError("easy_axis", SYMBOLS["easy_axis"], "must have unit length")
        return self

    def axis(self, d: int) -> np.ndarray:
        if self.easy_axis is None:
            return np.eye(d)[-1]
        ax = np.asarray(self.easy_axis, float)
        if ax.shape != (d,):
            raise ParameterError("easy_axis", SYMBOLS["easy_axis"], f"needs {d} components")
        return ax

    def stored_energy(self) -> StoredEnergy:
        return self.W if self.W is not None else QuadraticW(self.mu_e)

    def anisotropy(self, d: int) -> Anisotropy:
        return self.psi if self.psi is not None else EasyAxis(self.K, tuple(self.axis(d)))

    def replace(self, **changes) -> "MaterialParams":
        return replace(self, **changes)


# -- breakdown ----------------------------------------------------------------------

PARTS = ("W", "det_penalty", "hessian", "anisotropy", "stray", "exchange", "saturation")


@dataclass
class EnergyBreakdown:
    W: float = 0.0
    det_penalty: float = 0.0
    hessian: float = 0.0
    anisotropy: float = 0.0
    stray: float = 0.0
    exchange: float = 0.0
    saturation: float = 0.0
    total: float = 0.0
    infinite: bool = False

    @classmethod
    def sentinel(cls) -> "EnergyBreakdown":
        inf = math.inf
        return cls(*([inf] * (len(PARTS) + 1)), infinite=True)

    def finalize(self) -> "EnergyBreakdown":
        total = 0.0
        for p in PARTS:
            total += getattr(self, p)
        self.total = total
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def elastic(self) -> float:
        return self.W + self.det_penalty + self.hessian


@dataclass
class EnergyEvaluation:
    breakdown: EnergyBreakdown
    grad_eta: np.ndarray | None = None
    grad_M: np.ndarray | None = None
    state: KinematicState | None = None
    stray: sf.StrayFieldSolution | None = None
    H_at_nodes: np.ndarray | None = None


def default_stray_grid(eta: np.ndarray, spec: GridSpec, params: MaterialParams) -> GridSpec:
    h = params.stray_spacing or float(spec.h.min())
    return sf.stray_grid_for(eta, h, params.stray_pad)


def stray_term(eta: np.ndarray, M: np.ndarray, spec: GridSpec, params: MaterialParams, bg: GridSpec,
               want_grad: bool = False):
    """Stray energy -mu/2 sum_i w_i M_i . H(eta_i) and its derivatives.

    Moments w_i M_i sit at eta(X_i); spreading and sampling share one kernel so
    the energy equals mu/2 int |H|^2 on the padded grid exactly.
    """
    w = spec.weights
    if want_grad:
        idx, k, dk = sf.transfer_weights(bg, eta, "cubic", derivatives=True)
    else:
        idx, k = sf.transfer_weights(bg, eta, "cubic")
    Mbg = sf.spread(bg, idx, k, w[:, None] * M)
    sol = sf.solve_stray_field(Mbg, bg, params.mu, check_padding=True)
    Hn = sf.gather(sol.H, idx, k)
    energy = -0.5 * params.mu * float(np.sum(w[:, None] * M * Hn))
    if not want_grad:
        return energy, sol, Hn, None, None
    dH = sf.gather_gradient(sol.H, idx, dk)  # (N, c, a)
    g_eta = -params.mu * w[:, None] * np.einsum("nca,nc->na", dH, M)
    g_M = -params.mu * w[:, None] * Hn
    return energy, sol, Hn, g_eta, g_M


def evaluate(eta: np.ndarray, M: np.ndarray, params: MaterialParams, spec: GridSpec,
             want_grad: bool = False, stray_grid: GridSpec | None = None, parts: str = "all") -> EnergyEvaluation:
    """Energy breakdown and, optionally, gradients with respect to eta and M.

    ``parts`` selects ``"all"``, ``"elastic"`` or ``"magnetic"``.  Gradients are
    returned for all nodes; callers restrict to free nodes.
    """
    eta = np.asarray(eta, float)
    M = np.asarray(M, float)
    N, d = spec.num_nodes, spec.d
    if eta.shape != (N, d) or M.shape != (N, d):
        raise ContractViolation(f"eta and M must have shape {(N, d)}")
    state = build_kinematics(eta, spec)
    if not state.orientation_preserving or not np.all(np.isfinite(state.J)):
        return EnergyEvaluation(EnergyBreakdown.sentinel(), state=state)
    w = spec.weights
    F, J, cof, Finv = state.F, state.J, state.cof, state.Finv
    FinvT = np.swapaxes(Finv, -1, -2)
    out = EnergyBreakdown()
    PF = np.zeros((N, d, d))  # weighted nodal stress dE/dF
    gM = np.zeros((N, d))
    g_eta = np.zeros((N, d))
    do_el = parts in ("all", "elastic")
    do_mag = parts in ("all", "magnetic")

    with np.errstate(over="ignore"):
        if do_el:
            Wf = params.stored_energy()
            out.W = float(w @ Wf.value(F))
            Jpow = J ** (-params.a)
            out.det_penalty = float(w @ Jpow)
            T = hessian(eta, spec)
            Tn = np.sqrt(np.einsum("nijk,nijk->n", T, T))
            out.hessian = float(w @ (Tn ** params.q)) / params.q
            if want_grad:
                PF += w[:, None, None] * Wf.derivative(F)
                PF += (w * (-params.a) * Jpow)[:, None, None] * FinvT
                coef = np.where(Tn > 0, Tn, 1.0) ** (params.q - 2) if params.q != 2 else np.ones_like(Tn)
                g_eta += hessian_adjoint((w * coef)[:, None, None, None] * T, spec)

        if do_mag:
            psi = params.anisotropy(d)
            out.anisotropy = float(w @ psi.value(F, M))
            u = M / J[:, None]
            G = gradient(u, spec)
            B = G @ Finv
            B2 = np.einsum("nij,nij->n", B, B)
            out.exchange = params.A * float(w @ (J * B2))
            m2 = np.einsum("ni,ni->n", M, M)
            s = m2 / J**2 - 1.0
            c_sat = 1.0 / (4.0 * params.beta**2)
            out.saturation = c_sat * float(w @ (s**2 * J))
            if want_grad:
                dF, dM = psi.derivatives(F, M)
                PF += w[:, None, None] * dF
                gM += w[:, None] * dM
                A = params.A
                PG = (2 * A * w * J)[:, None, None] * (B @ FinvT)
                PF += (A * w * B2)[:, None, None] * cof
                PF -= (2 * A * w * J)[:, None, None] * (np.swapaxes(B, 1, 2) @ B @ FinvT)
                gu = gradient_adjoint(PG, spec)
                gM += gu / J[:, None]
                PF += (-np.einsum("ni,ni->n", gu, u) / J)[:, None, None] * cof
                dJ = c_sat * (s**2 - 4.0 * s * m2 / J**2)
                PF += (w * dJ)[:, None, None] * cof
                gM += (w * s / (params.beta**2 * J))[:, None] * M
            if params.stray:
                bg = stray_grid or default_stray_grid(eta, spec, params)
                e, sol, Hn, ge, gm = stray_term(eta, M, spec, params, bg, want_grad)
                out.stray = e
                if want_grad:
                    g_eta += ge
                    gM += gm
            else:
                sol, Hn = None, None
        else:
            sol, Hn = None, None

    out.finalize()
    if not np.isfinite(out.total):
        return EnergyEvaluation(EnergyBreakdown.sentinel(), state=state)
    ev = EnergyEvaluation(out, state=state, stray=sol, H_at_nodes=Hn)
    if want_grad:
        ev.grad_eta = g_eta + gradient_adjoint(PF, spec)
        ev.grad_M = gM
    return ev


# -- public operations --------------------------------------------------------------

def elastic_energy(eta, spec: GridSpec, params: MaterialParams) -> EnergyBreakdown:
    return evaluate(eta, np.zeros_like(eta), params, spec, parts="elastic").breakdown


def magnetic_energy(eta, M, spec: GridSpec, params: MaterialParams, stray_grid: GridSpec | None = None) -> EnergyBreakdown:
    return evaluate(eta, M, params, spec, parts="magnetic", stray_grid=stray_grid).breakdown


def total_energy(eta, M, spec: GridSpec, params: MaterialParams, stray_grid: GridSpec | None = None) -> EnergyBreakdown:
    return evaluate(eta, M, params, spec, stray_grid=stray_grid).breakdown


def grad_energy_deformation(eta, M, spec: GridSpec, params: MaterialParams, stray_grid=None) -> np.ndarray:
    """dE/d eta at every node, zero on Dirichlet nodes; NaN-free only for admissible eta."""
    ev = evaluate(eta, M, params, spec, want_grad=True, stray_grid=stray_grid)
    if ev.breakdown.infinite:
        raise ContractViolation("energy is infinite at this deformation")
    g = ev.grad_eta.copy()
    g[~spec.free_mask] = 0.0
    return g


def grad_energy_magnetization(eta, M, spec: GridSpec, params: MaterialParams, stray_grid=None) -> np.ndarray:
    ev = evaluate(eta, M, params, spec, want_grad=True, stray_grid=stray_grid)
    if ev.breakdown.infinite:
        raise ContractViolation("energy is infinite at this deformation")
    return ev.grad_M


# -- Eulerian form -----------------------------------------------------------------------

def eulerian_energy(eta: np.ndarray, M: "object", spec: GridSpec, params: MaterialParams,
                    bg: GridSpec | None = None, located=None) -> EnergyBreakdown:
    """Energy integrated over eta(Omega_0) on a background grid.

    Deformation quantities are the nodal Lagrangian ones composed with the
    inverse map; the magnetization is the Eulerian field ``M`` (an
    :class:`~magmove.kinematics.EulerianField` on ``bg``) and its gradient is
    taken on the background grid.  Cross-check only.
    """
    state = build_kinematics(eta, spec)
    if not state.orientation_preserving:
        return EnergyBreakdown.sentinel()
    bg = M.grid if bg is None else bg
    X, inside = located if located is not None else locate(eta, spec, bg)
    wq = eulerian_weights(eta, spec, bg, (X, inside))
    sel = wq > 0
    Xs = np.clip(X[sel], np.array(spec.origin), np.array(spec.origin) + np.array(spec.extent))
    F = sample(state.F, spec, Xs)
    T = sample(hessian(eta, spec), spec, Xs)
    J = det(F)
    ws = wq[sel]
    Wf = params.stored_energy()
    psi = params.anisotropy(spec.d)
    Me = M.values
    Ms = Me[sel]
    out = EnergyBreakdown()
    out.W = float(ws @ (Wf.value(F) / J))
    out.det_penalty = float(ws @ J ** (-(params.a + 1)))
    Tn = np.sqrt(np.einsum("nijk,nijk->n", T, T))
    out.hessian = float(ws @ (Tn**params.q / J)) / params.q
    out.anisotropy = float(ws @ (psi.value(F, J[:, None] * Ms) / J))
    gM = masked_gradient(Me, M.inside, bg)[sel]
    out.exchange = params.A * float(ws @ np.einsum("nij,nij->n", gM, gM))
    out.saturation = float(ws @ ((np.einsum("ni,ni->n", Ms, Ms) - 1.0) ** 2)) / (4 * params.beta**2)
    if params.stray:
        sol = sf.solve_stray_field(Me, bg, params.mu)
        out.stray = -0.5 * params.mu * float(wq @ np.einsum("ni,ni->n", Me, sol.H))
    return out.finalize()


# -- growth hypotheses ---------------------------------------------------------------------

@dataclass
class GrowthReport:
    passed: bool
    ratios: dict
    witness: dict | None = None


def growth_audit(params: MaterialParams, samples: int = 2000, d: int = 3, seed: int = 0,
                 c_lower: float = 1e-2, c_upper: float = 1e2) -> GrowthReport:
    """Check the coercivity and growth bounds of W and Psi on random samples.

    Inequalities (c_lower, c_upper declared):
      W >= 0, Psi >= 0;
      W(F) >= c_lower (|F|^p1 - 1);
      |W| + |W'| <= c_upper (1 + |F|^p2);
      |Psi| + |Psi_F| <= c_upper (1 + |F|^p2 + |M|^p3);
      |Psi_M| <= c_upper (1 + |F|^p2 + |M|^p4).
    Magnitudes are sampled log-uniformly over 1e-3..1e3.
    """
    rng = np.random.default_rng(seed)
    Wf = params.stored_energy()
    psi = params.anisotropy(d)

    def rand(shape):
        x = rng.standard_normal((samples,) + shape)
        x /= np.linalg.norm(x.reshape(samples, -1), axis=1).reshape((samples,) + (1,) * len(shape))
        return x * 10 ** rng.uniform(-3, 3, (samples,) + (1,) * len(shape))

    F, M = rand((d, d)), rand((d,))
    nF = np.linalg.norm(F.reshape(samples, -1), axis=1)
    nM = np.linalg.norm(M, axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        W = Wf.value(F)
        dW = np.linalg.norm(Wf.derivative(F).reshape(samples, -1), axis=1)
        P = psi.value(F, M)
        PF, PM = psi.derivatives(F, M)
        PF = np.linalg.norm(PF.reshape(samples, -1), axis=1)
        PM = np.linalg.norm(PM, axis=1)
        checks = {
            "W_nonnegative": (W >= 0, W),
            "psi_nonnegative": (P >= 0, P),
            "W_coercive": (W >= c_lower * (nF**params.p1 - 1), W / np.maximum(nF**params.p1 - 1, 1e-300)),
            "W_growth": (np.abs(W) + dW <= c_upper * (1 + nF**params.p2), (np.abs(W) + dW) / (1 + nF**params.p2)),
            "psi_growth": (np.abs(P) + PF <= c_upper * (1 + nF**params.p2 + nM**params.p3),
                           (np.abs(P) + PF) / (1 + nF**params.p2 + nM**params.p3)),
            "psi_M_growth": (PM <= c_upper * (1 + nF**params.p2 + nM**params.p4),
                             PM / (1 + nF**params.p2 + nM**params.p4)),
        }
    ratios, witness = {}, None
    for name, (ok, ratio) in checks.items():
        ok = ok & np.isfinite(ratio)
        if name == "W_coercive":
            big = nF**params.p1 > 2
            ratios[name] = float(np.nanmin(np.where(big, ratio, np.inf)))
        elif name.endswith("nonnegative"):
            ratios[name] = float(np.nanmin(ratio))
        else:
            ratios[name] = float(np.nanmax(np.where(np.isfinite(ratio), ratio, np.inf)))
        if witness is None and not ok.all():
            i = int(np.flatnonzero(~ok)[0])
            witness = {"inequality": name, "F": F[i].tolist(), "M": M[i].tolist()}
    return GrowthReport(witness is None, ratios, witness)
