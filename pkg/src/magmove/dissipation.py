"""Viscous and magnetic dissipation potentials.

The Lagrangian potential is always evaluated in the geometry of a reference
state (the previous time step), which makes it a quadratic form in the rates.
"""
from __future__ import annotations

import numpy as np

from .energy import MaterialParams
from .grid import ContractViolation, GridSpec, gradient, gradient_adjoint
from .kinematics import EulerianField, KinematicState, build_kinematics, eulerian_weights, masked_gradient


def _reference(eta_ref: np.ndarray, spec: GridSpec, state: KinematicState | None) -> KinematicState:
    state = state or build_kinematics(eta_ref, spec)
    if not state.orientation_preserving:
        raise ContractViolation(f"reference state not orientation preserving (min det {state.min_det:.3e})")
    return state


def dissipation_rate(eta_ref: np.ndarray, deta: np.ndarray, dM: np.ndarray, spec: GridSpec,
                     params: MaterialParams, state: KinematicState | None = None) -> float:
    """int nu |grad(deta) F^-1|^2 det F + 1/2 |dM|^2 / det F  in the reference geometry."""
    state = _reference(eta_ref, spec, state)
    L = gradient(deta, spec) @ state.Finv
    visc = params.nu * np.einsum("nij,nij->n", L, L) * state.J
    mag = 0.5 * np.einsum("ni,ni->n", dM, dM) / state.J
    return float(spec.weights @ visc + spec.weights @ mag)


def grad_dissipation(eta_ref: np.ndarray, deta: np.ndarray, dM: np.ndarray, spec: GridSpec,
                     params: MaterialParams, state: KinematicState | None = None):
    """Gradients of :func:`dissipation_rate` with respect to (deta, dM)."""
    state = _reference(eta_ref, spec, state)
    w = spec.weights
    L = gradient(deta, spec) @ state.Finv
    P = (2 * params.nu * w * state.J)[:, None, None] * (L @ np.swapaxes(state.Finv, 1, 2))
    g_eta = gradient_adjoint(P, spec)
    g_M = (w / state.J)[:, None] * dM
    return g_eta, g_M


def eulerian_dissipation(eta: np.ndarray, v: EulerianField, DtM: np.ndarray, spec: GridSpec,
                         params: MaterialParams, located=None) -> float:
    """int over eta(Omega_0) of nu |grad_x v|^2 + 1/2 |D_t M|^2 on the background grid of ``v``."""
    bg = v.grid
    if np.shape(DtM) != (bg.num_nodes, bg.d):
        raise ContractViolation("DtM must live on the velocity's background grid")
    wq = eulerian_weights(eta, spec, bg, located if located is not None else (v.X, v.inside))
    gv = masked_gradient(v.values, v.inside, bg)
    dens = params.nu * np.einsum("nij,nij->n", gv, gv) + 0.5 * np.einsum("ni,ni->n", DtM, DtM)
    return float(wq @ dens)
