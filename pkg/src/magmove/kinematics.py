"""Nodal kinematics, the Lagrangian/Eulerian dictionary and admissibility checks.

Eulerian quantities live on a background :class:`~magmove.grid.GridSpec`.
The inverse deformation is never stored; points are mapped back by Newton
iteration on the piecewise multilinear interpolant of the nodal deformation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .grid import ContractViolation, GridSpec, gradient


class AdmissibilityError(ContractViolation):
    """The deformation is not orientation preserving or not injective."""


# -- pointwise matrix algebra ------------------------------------------------------

def det(F: np.ndarray) -> np.ndarray:
    if F.shape[-1] == 2:
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    return (F[..., 0, 0] * (F[..., 1, 1] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 1])
            - F[..., 0, 1] * (F[..., 1, 0] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 0])
            + F[..., 0, 2] * (F[..., 1, 0] * F[..., 2, 1] - F[..., 1, 1] * F[..., 2, 0]))


def cofactor(F: np.ndarray) -> np.ndarray:
    """Cofactor matrix; equals det(F) F^{-T} for invertible F."""
    if F.shape[-1] == 2:
        C = np.empty_like(F)
        C[..., 0, 0] = F[..., 1, 1]
        C[..., 0, 1] = -F[..., 1, 0]
        C[..., 1, 0] = -F[..., 0, 1]
        C[..., 1, 1] = F[..., 0, 0]
        return C
    c0, c1, c2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=-1)


@dataclass(frozen=True)
class KinematicState:
    F: np.ndarray
    J: np.ndarray
    cof: np.ndarray
    Finv: np.ndarray
    min_det: float

    @property
    def orientation_preserving(self) -> bool:
        return bool(self.min_det > 0)


def build_kinematics(eta: np.ndarray, spec: GridSpec) -> KinematicState:
    F = gradient(eta, spec)
    J = det(F)
    cof = cofactor(F)
    with np.errstate(divide="ignore", invalid="ignore"):
        Finv = np.swapaxes(cof, -1, -2) / J[:, None, None]
    return KinematicState(F, J, cof, Finv, float(J.min()))


# -- multilinear interpolation ------------------------------------------------------

def _corner_offsets(d: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=d)))


def multilinear_basis(grid: GridSpec, points: np.ndarray, derivatives: bool = False):
    """Flat node indices and weights of the cell containing each point.

    Points outside the grid use the nearest boundary cell, i.e. the multilinear
    polynomial is extended.  Returns ``(idx, w[, dw])`` with shapes ``(P, 2^d)``
    and ``(P, 2^d, d)``; ``dw`` is the derivative with respect to the point.
    """
    points = np.atleast_2d(points)
    d = grid.d
    h = grid.h
    n = np.array(grid.n)
    s = (points - np.array(grid.origin)) / h
    c = np.clip(np.floor(s).astype(int), 0, n - 2)
    xi = s - c
    off = _corner_offsets(d)  # (C, d)
    strides = np.array([int(np.prod(n[a + 1:])) for a in range(d)])
    idx = (c[:, None, :] + off[None]) @ strides
    f = np.where(off[None] == 1, xi[:, None, :], 1.0 - xi[:, None, :])  # (P, C, d)
    w = np.prod(f, axis=-1)
    if not derivatives:
        return idx, w
    sign = np.where(off == 1, 1.0, -1.0)
    dw = np.empty(w.shape + (d,))
    for a in range(d):
        others = np.prod(np.delete(f, a, axis=-1), axis=-1)
        dw[..., a] = sign[None, :, a] * others / h[a]
    return idx, w, dw


def sample(values: np.ndarray, grid: GridSpec, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a nodal field at arbitrary points."""
    idx, w = multilinear_basis(grid, points)
    v = values[idx]
    return np.einsum("pc,pc...->p...", w, v)


def sample_masked(values: np.ndarray, mask: np.ndarray, grid: GridSpec, points: np.ndarray) -> np.ndarray:
    """Like :func:`sample` but only nodes in ``mask`` contribute (weights renormalized)."""
    idx, w = multilinear_basis(grid, points)
    w = w * mask[idx]
    tot = w.sum(axis=1)
    w = np.divide(w, tot[:, None], out=np.zeros_like(w), where=tot[:, None] > 0)
    return np.einsum("pc,pc...->p...", w, values[idx])


# -- inverse deformation ---------------------------------------------------------

def invert_deformation(eta: np.ndarray, spec: GridSpec, x: np.ndarray, X0: np.ndarray | None = None,
                       maxit: int = 20, tol: float = 1e-12):
    """Reference points X with eta_h(X) = x for the multilinear interpolant eta_h.

    Newton iteration starting from the nearest deformed node; the cell is
    re-selected every iteration.  Returns ``(X, inside)`` where ``inside``
    marks converged points that lie in the reference box.
    """
    x = np.atleast_2d(np.asarray(x, float))
    h = spec.h
    if X0 is None:
        _, nearest = cKDTree(eta).query(x)
        X = spec.coords[nearest].copy()
    else:
        X = np.array(X0, float, copy=True)
    scale = max(1.0, float(np.abs(eta).max()))
    atol = tol * float(h.min()) * scale
    active = np.ones(len(x), bool)
    res = np.full(len(x), np.inf)
    for _ in range(maxit):
        if not active.any():
            break
        Xa = X[active]
        idx, w, dw = multilinear_basis(spec, Xa, derivatives=True)
        E = eta[idx]  # (P, C, d)
        r = x[active] - np.einsum("pc,pci->pi", w, E)
        res[active] = np.abs(r).max(axis=1)
        jac = np.einsum("pca,pci->pia", dw, E)
        with np.errstate(all="ignore"):
            step = np.linalg.solve(jac, r[..., None])[..., 0]
        step = np.where(np.isfinite(step), step, 0.0)
        step = np.clip(step, -h, h)
        X[active] = Xa + step
        done = res[active] <= atol
        act_idx = np.flatnonzero(active)
        active[act_idx[done]] = False
    if active.any():  # final residual for points still iterating
        idx, w = multilinear_basis(spec, X[active])
        res[active] = np.abs(x[active] - np.einsum("pc,pci->pi", w, eta[idx])).max(axis=1)
    converged = res <= 1e3 * atol
    lo = np.array(spec.origin) - 1e-9 * h
    hi = np.array(spec.origin) + np.array(spec.extent) + 1e-9 * h
    inside = converged & np.all((X >= lo) & (X <= hi), axis=1)
    return X, inside


def background_grid(points: np.ndarray, spacing: float, pad: float = 1.0, margin: int = 2) -> GridSpec:
    """Axis-aligned grid with the given spacing covering ``pad`` times the bounding box.

    The origin is snapped to multiples of ``spacing`` so that small motions of
    the body leave the grid unchanged.
    """
    lo, hi = points.min(axis=0), points.max(axis=0)
    centre, half = 0.5 * (lo + hi), 0.5 * pad * (hi - lo) + margin * spacing
    start = np.floor((centre - half) / spacing) * spacing
    stop = np.ceil((centre + half) / spacing) * spacing
    n = np.round((stop - start) / spacing).astype(int) + 1
    n = np.maximum(n, 3)
    return GridSpec(tuple(n), tuple((n - 1) * spacing), tuple(start))


# -- Eulerian fields -----------------------------------------------------------------

@dataclass
class EulerianField:
    """Nodal values on a background grid; ``inside`` marks nodes in eta(Omega_0)."""

    grid: GridSpec
    values: np.ndarray
    inside: np.ndarray
    X: np.ndarray | None = None  # reference preimages of the background nodes
    source: tuple | None = None  # (reference values, eta, spec) the field was pushed forward from

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Values at arbitrary points; through the inverse map when the source is known."""
        x = np.atleast_2d(np.asarray(x, float))
        out = sample_masked(self.values, self.inside, self.grid, x)
        if self.source is not None:
            vals, eta, spec = self.source
            X, ok = invert_deformation(eta, spec, x)
            if ok.any():
                out[ok] = sample(vals, spec, X[ok])
        return out


def _require_admissible(state: KinematicState) -> None:
    if not state.orientation_preserving:
        raise AdmissibilityError(f"deformation not orientation preserving (min det = {state.min_det:.3e})")


def locate(eta: np.ndarray, spec: GridSpec, bg: GridSpec):
    """Preimages of all background nodes and the mask of those inside the body."""
    x = bg.coords
    lo, hi = eta.min(axis=0), eta.max(axis=0)
    slack = 2 * float(spec.h.max()) * max(1.0, float(np.abs(eta).max()))
    near = np.all((x >= lo - slack) & (x <= hi + slack), axis=1)
    X = np.full(x.shape, np.nan)
    inside = np.zeros(len(x), bool)
    if near.any():
        Xn, ins = invert_deformation(eta, spec, x[near])
        X[near] = Xn
        inside[near] = ins
    return X, inside


def push_forward(values: np.ndarray, eta: np.ndarray, spec: GridSpec, bg: GridSpec, located=None) -> EulerianField:
    """Transport a nodal reference field to the background grid, zero outside the body."""
    X, inside = located if located is not None else locate(eta, spec, bg)
    out = np.zeros((bg.num_nodes,) + values.shape[1:])
    if inside.any():
        out[inside] = sample(values, spec, X[inside])
    return EulerianField(bg, out, inside, X, (values, eta, spec))


def push_forward_magnetization(M: np.ndarray, eta: np.ndarray, spec: GridSpec, bg: GridSpec,
                               state: KinematicState | None = None, located=None) -> EulerianField:
    """Eulerian magnetization with M_lagr(X) = det(grad eta(X)) M(eta(X))."""
    state = state or build_kinematics(eta, spec)
    _require_admissible(state)
    return push_forward(M / state.J[:, None], eta, spec, bg, located)


def pull_back_magnetization(field: EulerianField, eta: np.ndarray, spec: GridSpec,
                            state: KinematicState | None = None) -> np.ndarray:
    """Lagrangian magnetization det(grad eta) M(eta) sampled at the reference nodes."""
    state = state or build_kinematics(eta, spec)
    _require_admissible(state)
    return state.J[:, None] * field(eta)


def eulerian_velocity(eta: np.ndarray, deta: np.ndarray, spec: GridSpec, bg: GridSpec,
                      state: KinematicState | None = None, located=None) -> EulerianField:
    """Eulerian velocity v with v(eta(X)) = d_t eta(X)."""
    state = state or build_kinematics(eta, spec)
    _require_admissible(state)
    return push_forward(deta, eta, spec, bg, located)


def material_derivative(M_new: np.ndarray, M_old: np.ndarray, v: np.ndarray, dt: float, bg: GridSpec,
                        inside: np.ndarray | None = None) -> np.ndarray:
    """Extended material derivative (M_new - M_old)/dt + (v.grad)M + (div v) M on ``bg``.

    With ``inside`` the spatial derivatives only use nodes of the current body.
    """
    for name, arr in (("M_new", M_new), ("M_old", M_old), ("v", v)):
        if np.shape(arr) != (bg.num_nodes, bg.d):
            raise ContractViolation(f"{name} does not live on the background grid")
    if inside is None:
        gM, gv = gradient(M_new, bg), gradient(v, bg)
    else:
        gM, gv = masked_gradient(M_new, inside, bg), masked_gradient(v, inside, bg)
    div = np.trace(gv, axis1=1, axis2=2)
    return (M_new - M_old) / dt + np.einsum("nij,nj->ni", gM, v) + div[:, None] * M_new


def masked_gradient(values: np.ndarray, inside: np.ndarray, bg: GridSpec) -> np.ndarray:
    """Gradient using only nodes inside the body.

    Central differences where both neighbours are inside, second-order
    one-sided stencils otherwise, first order as a last resort.  With every
    node inside this coincides with :func:`magmove.grid.gradient`.
    """
    f = bg.shaped(values)
    m = bg.shaped(inside)
    h = bg.h
    out = np.zeros(f.shape + (bg.d,))
    extra = (slice(None),) * (f.ndim - bg.d)

    def shift(arr, a, k, fill):
        res = np.full_like(arr, fill)
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        if k > 0:
            src[a], dst[a] = slice(k, None), slice(None, -k)
        else:
            src[a], dst[a] = slice(None, k), slice(-k, None)
        res[tuple(dst)] = arr[tuple(src)]
        return res

    for a in range(bg.d):
        fp, fm = shift(f, a, 1, 0.0), shift(f, a, -1, 0.0)
        fpp, fmm = shift(f, a, 2, 0.0), shift(f, a, -2, 0.0)
        mp, mm = shift(m, a, 1, False), shift(m, a, -1, False)
        mpp, mmm = shift(m, a, 2, False), shift(m, a, -2, False)
        g = np.zeros_like(f)
        rules = [
            (mp & mm, 0.5 * (fp - fm) / h[a]),
            (mp & mpp, (-3 * f + 4 * fp - fpp) / (2 * h[a])),
            (mm & mmm, (3 * f - 4 * fm + fmm) / (2 * h[a])),
            (mp, (fp - f) / h[a]),
            (mm, (f - fm) / h[a]),
        ]
        done = np.zeros_like(m)
        for cond, val in rules:
            sel = cond & ~done & m
            g[sel] = val[sel]
            done |= sel
        out[..., a] = g
    return out.reshape((bg.num_nodes,) + values.shape[1:] + (bg.d,))


def volume_fractions(eta: np.ndarray, spec: GridSpec, bg: GridSpec, inside: np.ndarray,
                     X: np.ndarray | None = None, sub: int = 4) -> np.ndarray:
    """Fraction of each background node's dual cell covered by the body.

    Nodes whose 3^d neighbourhood is entirely inside (outside) get 1 (0);
    the rest are resolved with ``sub^d`` midpoint samples.  For a body whose
    faces lie on background grid planes this reproduces trapezoidal weights.
    """
    m = bg.shaped(inside)
    mixed = np.zeros_like(m)
    for off in itertools.product((-1, 0, 1), repeat=bg.d):
        sl_src, sl_dst = [], []
        for a, o in enumerate(off):
            if o > 0:
                sl_src.append(slice(o, None)); sl_dst.append(slice(None, -o))
            elif o < 0:
                sl_src.append(slice(None, o)); sl_dst.append(slice(-o, None))
            else:
                sl_src.append(slice(None)); sl_dst.append(slice(None))
        nb = np.zeros_like(m)  # neighbours beyond the grid count as outside
        nb[tuple(sl_dst)] = m[tuple(sl_src)]
        mixed |= nb != m
    frac = inside.astype(float)
    cand = np.flatnonzero(mixed.reshape(-1))
    if cand.size:
        h = bg.h
        offs = (np.arange(sub) + 0.5) / sub - 0.5
        grid_off = np.stack(np.meshgrid(*([offs] * bg.d), indexing="ij"), axis=-1).reshape(-1, bg.d) * h
        pts = (bg.coords[cand][:, None, :] + grid_off[None]).reshape(-1, bg.d)
        X0 = None
        if X is not None:
            base = X[cand]
            base = np.where(np.isfinite(base), base, np.nan)
            if np.isfinite(base).all():
                X0 = np.repeat(base, len(grid_off), axis=0)
        _, ins = invert_deformation(eta, spec, pts, X0=X0)
        frac[cand] = ins.reshape(len(cand), -1).mean(axis=1)
    return frac


def eulerian_weights(eta: np.ndarray, spec: GridSpec, bg: GridSpec, located=None) -> np.ndarray:
    X, inside = located if located is not None else locate(eta, spec, bg)
    return volume_fractions(eta, spec, bg, inside, X) * bg.cell_volume


# -- admissibility ------------------------------------------------------------------

def _surface_area(eta: np.ndarray, spec: GridSpec) -> float:
    """Area (length in 2D) of the deformed boundary of the nodal interpolant."""
    E = spec.shaped(eta)
    d = spec.d
    total = 0.0
    for a in range(d):
        for end in (0, -1):
            face = np.take(E, end, axis=a)  # (n..., d) of dimension d-1
            if d == 2:
                total += np.linalg.norm(np.diff(face, axis=0), axis=-1).sum()
            else:
                p00, p11 = face[:-1, :-1], face[1:, 1:]
                p10, p01 = face[1:, :-1], face[:-1, 1:]
                total += 0.5 * np.linalg.norm(np.cross(p11 - p00, p01 - p10), axis=-1).sum()
    return float(total)


def _cell_coefficients(eta: np.ndarray, spec: GridSpec, cells: np.ndarray):
    """Monomial coefficients of each cell's multilinear map x(xi) = sum_S a_S prod_{b in S} xi_b."""
    d = spec.d
    n = np.array(spec.n)
    off = _corner_offsets(d)
    strides = np.array([int(np.prod(n[a + 1:])) for a in range(d)])
    P = eta[(cells[:, None, :] + off[None]) @ strides]  # (Q, C, d)
    subsets = [tuple(np.flatnonzero(o)) for o in off]
    coef = {}
    for S, o in zip(subsets, off):
        # Moebius inversion over the corners contained in S
        acc = 0.0
        for c, oc in enumerate(off):
            if np.all(oc <= o):
                acc = acc + (-1) ** int(o.sum() - oc.sum()) * P[:, c]
        coef[S] = acc
    return coef


def _solve_small(jac: np.ndarray, r: np.ndarray) -> np.ndarray:
    d = r.shape[1]
    if d == 2:
        a, b, c, e = jac[:, 0, 0], jac[:, 0, 1], jac[:, 1, 0], jac[:, 1, 1]
        det_ = a * e - b * c
        return np.stack([e * r[:, 0] - b * r[:, 1], a * r[:, 1] - c * r[:, 0]], axis=1) / det_[:, None]
    if d == 3:
        c0, c1, c2 = jac[:, :, 0], jac[:, :, 1], jac[:, :, 2]
        det_ = np.einsum("qi,qi->q", c0, np.cross(c1, c2))
        out = np.stack([np.einsum("qi,qi->q", r, np.cross(c1, c2)),
                        np.einsum("qi,qi->q", c0, np.cross(r, c2)),
                        np.einsum("qi,qi->q", c0, np.cross(c1, r))], axis=1)
        return out / det_[:, None]
    return np.linalg.solve(jac, r[..., None])[..., 0]


def _cover(x, qi, xc, Jinv, eps, evaluate_map, hb) -> np.ndarray:
    """Which points x lie in the deformed cell qi (affine screening, then Newton)."""
    xi = 0.5 + np.einsum("qij,qj->qi", Jinv[qi], x - xc[qi])
    e = eps[qi][:, None]
    inside = np.all((xi >= e) & (xi <= 1 - e), axis=1)
    outside = np.any((xi < -e) | (xi > 1 + e), axis=1)
    hit = inside.copy()
    active = np.flatnonzero(~inside & ~outside)
    xi = np.where(np.isfinite(xi), xi, 0.5)
    rtol = 1e-10 * hb
    for it in range(25):
        if active.size == 0:
            break
        val, jac = evaluate_map(xi[active], qi[active])
        r = x[active] - val
        conv = np.abs(r).max(axis=1) <= rtol
        xa = xi[active]
        hit[active[conv]] = np.all((xa[conv] >= -1e-10) & (xa[conv] <= 1 + 1e-10), axis=1)
        keep = ~conv
        with np.errstate(all="ignore"):
            step = _solve_small(jac[keep], r[keep])
        step = np.clip(np.where(np.isfinite(step), step, 0.0), -1.0, 1.0)
        active = active[keep]
        xi[active] += step
        if it >= 1:
            small = np.abs(step).max(axis=1) < 0.05
            far = np.any((xi[active] < -0.2) | (xi[active] > 1.2), axis=1)
            active = active[~(small & far)]
    return hit


def rasterized_volume(eta: np.ndarray, spec: GridSpec, spacing: float | None = None) -> tuple[float, float]:
    """Measure of eta(Omega_0) by counting covered background cells.

    Every background cell whose centre lies in at least one deformed cell is
    counted once.  Returns ``(volume, spacing)``.
    """
    d = spec.d
    hb = float(spacing or spec.h.min() / 4)
    lo = eta.min(axis=0)
    nb = np.ceil((eta.max(axis=0) - lo) / hb).astype(int) + 2
    start = lo - hb
    E = spec.shaped(eta)
    n = np.array(spec.n)
    off = _corner_offsets(d)
    cells = np.stack(np.meshgrid(*[np.arange(k - 1) for k in n], indexing="ij"), axis=-1).reshape(-1, d)
    corners = np.stack([E[tuple((cells + o).T)] for o in off], axis=1)  # (Q, C, d)
    clo = np.maximum(np.floor((corners.min(axis=1) - start) / hb - 0.5).astype(int), 0)
    chi = np.minimum(np.ceil((corners.max(axis=1) - start) / hb - 0.5).astype(int), nb - 1)
    ext = np.maximum(chi - clo + 1, 0)
    counts = np.prod(ext, axis=1)
    coef = _cell_coefficients(eta, spec, cells)
    subsets = list(coef)
    A = np.stack([coef[S] for S in subsets])  # (S, Q, d)

    def evaluate_map(xi, q):
        a = A[:, q]
        val = np.zeros((len(q), d))
        jac = np.zeros((len(q), d, d))
        for i, S in enumerate(subsets):
            mono = np.ones(len(q))
            for b in S:
                mono = mono * xi[:, b]
            val += a[i] * mono[:, None]
            for c in S:
                rest = np.ones(len(q))
                for b in S:
                    if b != c:
                        rest = rest * xi[:, b]
                jac[:, :, c] += a[i] * rest[:, None]
        return val, jac

    # Affine screening about each cell centre: the multilinear remainder is
    # bounded by the sum of the higher-order coefficients, which bounds the
    # error of the affine preimage; only ambiguous points get Newton.
    xc, Jc = evaluate_map(np.full((len(cells), d), 0.5), np.arange(len(cells)))
    with np.errstate(all="ignore"):
        Jinv = np.linalg.inv(Jc)
        nonlin = np.zeros(len(cells))
        for i, S in enumerate(subsets):
            if len(S) >= 2:
                nonlin += np.linalg.norm(A[i], axis=1)
        eps = np.linalg.norm(Jinv, ord=2, axis=(1, 2)) * nonlin
    eps = np.where(np.isfinite(eps), np.maximum(eps, 1e-9), np.inf)
    Jinv = np.where(np.isfinite(Jinv), Jinv, 0.0)

    hits = []
    budget = 1 << 20
    c0 = 0
    csum = np.cumsum(counts)
    while c0 < len(cells):
        base = csum[c0 - 1] if c0 else 0
        c1 = max(int(np.searchsorted(csum, base + budget, side="right")), c0 + 1)
        qi = np.repeat(np.arange(c0, c1), counts[c0:c1])
        c0 = c1
        if qi.size == 0:
            continue
        first = np.cumsum(counts[qi[0]:qi[-1] + 1]) - counts[qi[0]:qi[-1] + 1]
        local = np.arange(qi.size) - first[qi - qi[0]]
        ids = np.empty((qi.size, d), int)
        rem = local
        for a in range(d - 1, -1, -1):
            e = ext[qi, a]
            ids[:, a] = clo[qi, a] + rem % e
            rem = rem // e
        x = start + (ids + 0.5) * hb
        hits.append(np.ravel_multi_index(ids[_cover(x, qi, xc, Jinv, eps, evaluate_map, hb)].T, tuple(nb)))
    if not hits:
        return 0.0, hb
    flat = np.concatenate(hits)
    return float(np.unique(flat).size * hb**d), hb


@dataclass
class VolumeCheck:
    residual: float
    tolerance: float
    image_volume: float
    det_integral: float

    @property
    def ok(self) -> bool:
        return self.residual <= self.tolerance


def ciarlet_necas_residual(eta: np.ndarray, spec: GridSpec, state: KinematicState | None = None,
                           spacing: float | None = None) -> VolumeCheck:
    """| vol(eta(Omega_0)) - int det grad eta | with a rasterization tolerance."""
    state = state or build_kinematics(eta, spec)
    vol, hb = rasterized_volume(eta, spec, spacing)
    integral = float(spec.weights @ state.J)
    tol = 0.5 * hb * _surface_area(eta, spec)
    return VolumeCheck(abs(vol - integral), tol, vol, integral)


def boundary_injectivity_margin(eta: np.ndarray, spec: GridSpec, delta: float | None = None,
                                chunk: int = 512) -> tuple[float, bool]:
    """Smallest image distance between boundary nodes at least ``delta`` apart."""
    delta = 4 * float(spec.h.min()) if delta is None else float(delta)
    b = np.flatnonzero(spec.boundary_mask)
    X, Y = spec.coords[b], eta[b]
    best = np.inf
    for s in range(0, len(b), chunk):
        dX = np.linalg.norm(X[s:s + chunk, None] - X[None], axis=-1)
        dY = np.linalg.norm(Y[s:s + chunk, None] - Y[None], axis=-1)
        far = dX >= delta * (1 - 1e-12)
        if far.any():
            best = min(best, float(dY[far].min()))
    return best, bool(best > 1e-10 * (1.0 + float(np.abs(Y).max())))


def det_monitor(trajectory, c_det: float = 1e-6) -> tuple[float, bool]:
    """Smallest nodal det grad eta over all snapshots and whether it clears ``c_det``."""
    spec = trajectory.grid
    m = min(build_kinematics(s.eta, spec).min_det for s in trajectory.snapshots)
    return m, bool(m > c_det)
