"""Structured tensor-product grids, finite-difference operators and quadrature.

Fields are plain numpy arrays whose leading axis runs over grid nodes in
row-major order (last coordinate fastest).  A vector field has shape
``(N, d)``, a tensor field ``(N, d, d)`` and a third-order field
``(N, d, d, d)``.  Derivative operators are assembled once per grid as sparse
matrices so that adjoints (needed for exact discrete gradients) are simply
transposes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ContractViolation(ValueError):
    """Raised when an argument does not conform to the documented shape or range."""


class UnsupportedGrid(ContractViolation):
    pass


def _first_derivative_1d(n: int, h: float) -> sp.csr_matrix:
    D = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        D[i, i - 1] = -0.5 / h
        D[i, i + 1] = 0.5 / h
    D[0, 0:3] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
    D[n - 1, n - 3:n] = np.array([1.0, -4.0, 3.0]) / (2 * h)
    return D.tocsr()


def _second_derivative_1d(n: int, h: float) -> sp.csr_matrix:
    D = sp.lil_matrix((n, n))
    for i in range(n):
        c = min(max(i, 1), n - 2)  # boundary rows reuse the neighbouring stencil
        D[i, c - 1:c + 2] = np.array([1.0, -2.0, 1.0]) / h**2
    return D.tocsr()


def _trapezoid_1d(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Uniform node grid on the box ``origin + [0, extent]``.

    ``dirichlet`` is a boolean mask over nodes marking the P part of the
    boundary; it must only select boundary nodes.  Every other boundary node
    belongs to N.  Background (Eulerian) grids reuse this class with an empty
    Dirichlet set.
    """

    n: tuple[int, ...]
    extent: tuple[float, ...]
    origin: tuple[float, ...] = None
    dirichlet: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = tuple(int(k) for k in self.n)
        extent = tuple(float(e) for e in self.extent)
        if len(n) not in (2, 3) or len(extent) != len(n):
            raise UnsupportedGrid(f"dimension must be 2 or 3, got n={n}")
        if min(n) < 3:
            raise UnsupportedGrid(f"need at least 3 nodes per axis, got {n}")
        if min(extent) <= 0:
            raise ContractViolation("extent must be positive")
        origin = (0.0,) * len(n) if self.origin is None else tuple(float(o) for o in self.origin)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "origin", origin)
        if self.dirichlet is not None:
            mask = np.asarray(self.dirichlet, dtype=bool).reshape(-1)
            if mask.size != self.num_nodes:
                raise ContractViolation("dirichlet mask has wrong length")
            if np.any(mask & ~self.boundary_mask):
                raise ContractViolation("dirichlet mask selects interior nodes")
            mask.setflags(write=False)
            object.__setattr__(self, "dirichlet", mask)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def unit(cls, d: int, n: int | Sequence[int], dirichlet: str | Callable = "bottom") -> "GridSpec":
        """Unit square/cube with P chosen by name or predicate on node coordinates.

        ``"bottom"`` is the face X_d = 0, ``"all"`` the whole boundary,
        ``"none"`` leaves P empty (only for tests of unconstrained variations).
        """
        n = (n,) * d if np.isscalar(n) else tuple(n)
        g = cls(n, (1.0,) * d)
        return g.with_dirichlet(dirichlet)

    def with_dirichlet(self, rule: str | Callable | np.ndarray) -> "GridSpec":
        X = self.coords
        b = self.boundary_mask
        if isinstance(rule, np.ndarray):
            mask = rule.astype(bool)
        elif rule == "bottom":
            mask = np.isclose(X[:, -1], self.origin[-1])
        elif rule == "all":
            mask = b.copy()
        elif rule == "none":
            mask = np.zeros(self.num_nodes, bool)
        elif rule == "top-bottom":
            lo, hi = self.origin[-1], self.origin[-1] + self.extent[-1]
            mask = np.isclose(X[:, -1], lo) | np.isclose(X[:, -1], hi)
        elif callable(rule):
            mask = np.asarray(rule(X), dtype=bool) & b
        else:
            raise ContractViolation(f"unknown Dirichlet rule {rule!r}")
        return GridSpec(self.n, self.extent, self.origin, mask)

    # -- basic geometry -------------------------------------------------------
    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.n))

    @property
    def h(self) -> np.ndarray:
        return np.array([e / (k - 1) for e, k in zip(self.extent, self.n)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [o + np.linspace(0.0, e, k) for o, e, k in zip(self.origin, self.extent, self.n)]

    @cached_property
    def coords(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.n).reshape(self.d, -1)
        b = np.zeros(self.num_nodes, bool)
        for a in range(self.d):
            b |= (idx[a] == 0) | (idx[a] == self.n[a] - 1)
        return b

    @property
    def free_mask(self) -> np.ndarray:
        """Nodes whose deformation is an unknown (everything outside P)."""
        if self.dirichlet is None:
            return np.ones(self.num_nodes, bool)
        return ~self.dirichlet

    def shaped(self, values: np.ndarray) -> np.ndarray:
        """View a node-major array as ``n + component shape``."""
        return values.reshape(self.n + values.shape[1:])

    # -- operators ------------------------------------------------------------
    def _kron_axis(self, mats: dict[int, sp.spmatrix]) -> sp.csr_matrix:
        out = None
        for a in range(self.d):
            m = mats.get(a, sp.identity(self.n[a], format="csr"))
            out = m if out is None else sp.kron(out, m, format="csr")
        return out.tocsr()

    @cached_property
    def first_derivatives(self) -> list[sp.csr_matrix]:
        h = self.h
        return [self._kron_axis({a: _first_derivative_1d(self.n[a], h[a])}) for a in range(self.d)]

    @cached_property
    def second_derivatives(self) -> dict[tuple[int, int], sp.csr_matrix]:
        """Operators for each unordered pair (a <= b)."""
        h = self.h
        D1 = [_first_derivative_1d(self.n[a], h[a]) for a in range(self.d)]
        ops = {}
        for a in range(self.d):
            for b in range(a, self.d):
                if a == b:
                    ops[a, b] = self._kron_axis({a: _second_derivative_1d(self.n[a], h[a])})
                else:
                    ops[a, b] = self._kron_axis({a: D1[a], b: D1[b]})
        return ops

    @cached_property
    def weights(self) -> np.ndarray:
        h = self.h
        w = np.ones(1)
        for a in range(self.d):
            w = np.kron(w, _trapezoid_1d(self.n[a], h[a]))
        w.setflags(write=False)
        return w

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def metadata(self) -> dict:
        meta = {"d": self.d, "n": list(self.n), "extent": list(self.extent), "origin": list(self.origin)}
        if self.d == 2:
            meta["note"] = "two-dimensional reduction used as a testing device"
        return meta


def _check_nodal(values: np.ndarray, spec: GridSpec, what: str = "field") -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim < 1 or values.shape[0] != spec.num_nodes:
        raise ContractViolation(f"{what} has {values.shape[0] if values.ndim else 0} rows, grid has {spec.num_nodes} nodes")
    return values


def gradient(field: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Nodal gradient; ``out[n, i, j] = d field_i / d X_j``.

    A scalar field of shape ``(N,)`` yields ``(N, d)``.
    """
    field = _check_nodal(field, spec)
    scalar = field.ndim == 1
    f = field[:, None] if scalar else field.reshape(spec.num_nodes, -1)
    out = np.stack([D @ f for D in spec.first_derivatives], axis=-1)
    if scalar:
        return out[:, 0, :]
    return out.reshape(field.shape + (spec.d,))


def gradient_adjoint(stress: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Transpose of :func:`gradient`: maps ``(N, m, d)`` back to ``(N, m)``."""
    out = np.zeros(stress.shape[:-1])
    for j, D in enumerate(spec.first_derivatives):
        out += D.T @ stress[..., j]
    return out


def hessian(field: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Second differences; ``out[n, i, j, k] = d^2 field_i / dX_j dX_k``."""
    field = _check_nodal(field, spec)
    d = spec.d
    out = np.empty(field.shape + (d, d))
    for (a, b), D in spec.second_derivatives.items():
        out[..., a, b] = D @ field
        out[..., b, a] = out[..., a, b]
    return out


def hessian_adjoint(stress: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Transpose of :func:`hessian` for ``(N, m, d, d)`` inputs."""
    out = np.zeros(stress.shape[:-2])
    for (a, b), D in spec.second_derivatives.items():
        s = stress[..., a, b] if a == b else stress[..., a, b] + stress[..., b, a]
        out += D.T @ s
    return out


def integrate(field: np.ndarray, spec: GridSpec) -> float | np.ndarray:
    """Trapezoidal product rule over the grid."""
    field = _check_nodal(field, spec)
    return spec.weights @ field


@dataclass
class Snapshot:
    t: float
    eta: np.ndarray
    M: np.ndarray
    energy: object = None  # EnergyBreakdown
    dissipation: float = 0.0
    status: str = "accepted"
    info: dict = field(default_factory=dict)


@dataclass
class TrajectoryStore:
    """Uniformly spaced snapshots; snapshot 0 is the initial datum."""

    dt: float
    grid: GridSpec
    snapshots: list[Snapshot] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, snap: Snapshot) -> None:
        k = len(self.snapshots)
        if not np.isclose(snap.t, k * self.dt, rtol=0, atol=1e-12 * max(1.0, k * self.dt)):
            raise ContractViolation(f"snapshot time {snap.t} does not match k*dt = {k * self.dt}")
        self.snapshots.append(snap)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, k: int) -> Snapshot:
        return self.snapshots[k]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def t_end(self) -> float:
        return self.snapshots[-1].t


INTERPOLANT_MODES = ("affine", "constant-right", "constant-left")


def interpolant_eval(store: TrajectoryStore, t: float, mode: str = "affine") -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the piecewise affine or piecewise constant interpolants at ``t``."""
    if mode not in INTERPOLANT_MODES:
        raise ContractViolation(f"unknown interpolant mode {mode!r}")
    if not store.snapshots:
        raise ContractViolation("empty trajectory")
    T = store.t_end
    if t < 0 or t > T * (1 + 1e-14) + 1e-300:
        raise IndexError(f"t={t} outside [0, {T}]")
    dt = store.dt
    s = t / dt
    k = int(np.ceil(s - 1e-12))  # t in ((k-1)dt, k dt]
    k = min(max(k, 0), len(store) - 1)
    if k == 0:
        snap = store[0]
        return snap.eta.copy(), snap.M.copy()
    if mode == "constant-right":
        snap = store[k]
        return snap.eta.copy(), snap.M.copy()
    if mode == "constant-left":
        snap = store[k - 1]
        return snap.eta.copy(), snap.M.copy()
    lam = min(max(s - (k - 1), 0.0), 1.0)
    a, b = store[k - 1], store[k]
    if lam == 1.0:
        return b.eta.copy(), b.M.copy()
    return (1 - lam) * a.eta + lam * b.eta, (1 - lam) * a.M + lam * b.M
