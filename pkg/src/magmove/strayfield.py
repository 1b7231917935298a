"""Demagnetizing field on a zero-padded background grid.

The weak Poisson problem  int grad(phi).grad(psi) = int M.grad(psi)  is solved
spectrally: H = -grad(phi) is the L2-orthogonal projection of -M onto
gradient fields, Ĥ(k) = -k (k.M̂(k)) / |k|^2.  Because the discrete operator
is an exact orthogonal projection, the energy identity
-int M.H = int |H|^2, linearity, self-adjointness and ||H|| <= ||M|| hold to
rounding error.  Periodic images are controlled by zero padding.

Magnetic moments of material points (w_i M_i at eta(X_i)) are transferred to
the background grid with tensor cubic B-splines, which makes the stray energy
a twice continuously differentiable function of the deformation.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .grid import ContractViolation, GridSpec
from .kinematics import sample


class PaddingError(ContractViolation):
    """Padded grid too small for the magnetization support (aliasing risk)."""


class SolverDefect(RuntimeError):
    pass


def fft_workers() -> int:
    try:
        return max(1, int(os.environ.get("MAGMOVE_THREADS", "1")))
    except ValueError:
        return 1


# -- particle/grid transfer ----------------------------------------------------------

KERNELS = {"cubic": 4, "linear": 2}


def _kernel_1d(r: np.ndarray, kind: str):
    a = np.abs(r)
    if kind == "linear":
        val = np.clip(1.0 - a, 0.0, None)
        der = np.where(a < 1.0, -np.sign(r), 0.0)
        return val, der
    val = np.where(a < 1.0, 2.0 / 3.0 - a**2 + 0.5 * a**3,
                   np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0))
    der = np.where(a < 1.0, -2.0 * a + 1.5 * a**2,
                   np.where(a < 2.0, -0.5 * (2.0 - a) ** 2, 0.0)) * np.sign(r)
    return val, der


def transfer_weights(bg: GridSpec, points: np.ndarray, kernel: str = "cubic", derivatives: bool = False):
    """Node indices and tensor-product kernel weights for each point.

    Weights form a partition of unity and reproduce linear functions.
    ``dw`` is the derivative with respect to the point position.
    """
    d = bg.d
    width = KERNELS[kernel]
    h = bg.h
    n = np.array(bg.n)
    s = (points - np.array(bg.origin)) / h
    base = np.floor(s).astype(int) - (width // 2 - 1)
    if np.any(base < 0) or np.any(base + width - 1 > n - 1):
        raise PaddingError("points too close to the edge of the background grid")
    offs = np.arange(width)
    vals, ders = [], []
    for a in range(d):
        r = s[:, a:a + 1] - (base[:, a:a + 1] + offs[None])
        v, dv = _kernel_1d(r, kernel)
        vals.append(v)
        ders.append(dv / h[a])  # d/dy of B((y - x_g)/h)
    strides = np.array([int(np.prod(n[a + 1:])) for a in range(d)])
    grids = np.meshgrid(*([offs] * d), indexing="ij")
    combo = np.stack([g.reshape(-1) for g in grids], axis=1)  # (K, d)
    idx = (base[:, None, :] + combo[None]) @ strides
    w = np.ones(idx.shape)
    for a in range(d):
        w = w * vals[a][:, combo[:, a]]
    if not derivatives:
        return idx, w
    dw = np.empty(w.shape + (d,))
    for a in range(d):
        t = ders[a][:, combo[:, a]]
        for b in range(d):
            if b != a:
                t = t * vals[b][:, combo[:, b]]
        dw[..., a] = t
    return idx, w, dw


def spread(bg: GridSpec, idx: np.ndarray, w: np.ndarray, moments: np.ndarray) -> np.ndarray:
    """Magnetization density on ``bg`` from point moments."""
    out = np.empty((bg.num_nodes, moments.shape[1]))
    flat = idx.reshape(-1)
    for c in range(moments.shape[1]):
        out[:, c] = np.bincount(flat, weights=(w * moments[:, c:c + 1]).reshape(-1), minlength=bg.num_nodes)
    return out / bg.cell_volume


def gather(field: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("pk,pkc->pc", w, field[idx])


def gather_gradient(field: np.ndarray, idx: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """``out[p, c, a]`` = d/dy_a of the interpolated component c at point p."""
    return np.einsum("pka,pkc->pca", dw, field[idx])


# -- spectral solve -------------------------------------------------------------------

@lru_cache(maxsize=16)
def _wavevectors(shape: tuple[int, ...], spacing: tuple[float, ...]):
    d = len(shape)
    freqs = [2 * np.pi * sfft.fftfreq(shape[a], spacing[a]) for a in range(d - 1)]
    freqs.append(2 * np.pi * sfft.rfftfreq(shape[-1], spacing[-1]))
    K = np.meshgrid(*freqs, indexing="ij")
    k2 = sum(k**2 for k in K)
    keep = k2 > 0
    for a in range(d):  # drop Nyquist planes so the projector stays real-symmetric
        if shape[a] % 2 == 0:
            sl = [slice(None)] * d
            sl[a] = shape[a] // 2
            keep[tuple(sl)] = False
    inv = np.where(keep, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    out = tuple(k.copy() for k in K) + (inv,)
    for arr in out:
        arr.setflags(write=False)
    return out


def _check_padding(M: np.ndarray, bg: GridSpec) -> None:
    support = np.any(M != 0, axis=1)
    if not support.any():
        return
    x = bg.coords[support]
    size = x.max(axis=0) - x.min(axis=0) + bg.h
    if np.any(2 * size > np.array(bg.extent) + bg.h * (1 + 1e-9)):
        raise PaddingError(f"support {size} needs a padded grid of at least twice its size, got {bg.extent}")


@dataclass
class StrayFieldSolution:
    phi: np.ndarray
    H: np.ndarray
    energy: float
    grid: GridSpec
    mu: float = 1.0


def project(M: np.ndarray, bg: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (H, phi) for magnetization samples ``M`` of shape (N_bg, d)."""
    d = bg.d
    shape = bg.n
    *K, inv = _wavevectors(shape, tuple(bg.h))
    axes = tuple(range(d))
    workers = fft_workers()
    Mh = sfft.rfftn(M.reshape(shape + (d,)), axes=axes, workers=workers)
    kM = sum(K[a] * Mh[..., a] for a in range(d))
    Hh = np.stack([-K[a] * kM * inv for a in range(d)], axis=-1)
    H = sfft.irfftn(Hh, s=shape, axes=axes, workers=workers)
    phi = sfft.irfftn(-1j * kM * inv, s=shape, axes=axes, workers=workers)
    return H.reshape(-1, d), phi.reshape(-1)


def solve_stray_field(M: np.ndarray, bg: GridSpec, mu: float = 1.0, check_padding: bool = True) -> StrayFieldSolution:
    """Free-space magnetostatics Delta phi = div M, H = -grad phi, on a padded grid."""
    M = np.asarray(M, float)
    if M.shape != (bg.num_nodes, bg.d):
        raise ContractViolation(f"M must have shape {(bg.num_nodes, bg.d)}, got {M.shape}")
    if check_padding:
        _check_padding(M, bg)
    H, phi = project(M, bg)
    energy = 0.5 * mu * bg.cell_volume * float(np.sum(H * H))
    return StrayFieldSolution(phi, H, energy, bg, mu)


def stray_energy_identity(M: np.ndarray, sol: StrayFieldSolution) -> tuple[float, float]:
    """Both sides of -mu/2 int M.H = mu/2 int |H|^2 with the grid quadrature."""
    v = sol.grid.cell_volume
    lhs = -0.5 * sol.mu * v * float(np.sum(M * sol.H))
    rhs = 0.5 * sol.mu * v * float(np.sum(sol.H * sol.H))
    return lhs, rhs


def stability_check(M: np.ndarray, sol: StrayFieldSolution, limit: float = 1.05) -> float:
    """||H|| / ||M|| in L2; the projection is a contraction."""
    nM = float(np.sqrt(np.sum(M * M)))
    if nM == 0.0:
        return 0.0
    ratio = float(np.sqrt(np.sum(sol.H * sol.H))) / nM
    if ratio > limit:
        raise SolverDefect(f"stray field amplification {ratio:.4f} exceeds {limit}")
    return ratio


def pullback_stray(sol: StrayFieldSolution, eta: np.ndarray) -> np.ndarray:
    """H(eta(X)) at the reference nodes by multilinear interpolation."""
    return sample(sol.H, sol.grid, eta)


def stray_grid_for(eta: np.ndarray, spacing: float, pad: float = 2.0, kernel: str = "cubic",
                   slack: float = 0.1) -> GridSpec:
    """Padded background grid for the moments located at ``eta``.

    The extent is at least ``pad`` times the spread support plus ``slack``
    (relative) so that moderate motion during one step stays admissible.
    """
    lo, hi = eta.min(axis=0), eta.max(axis=0)
    reach = KERNELS[kernel] // 2 * spacing
    size = (hi - lo) + 2 * reach
    centre = 0.5 * (lo + hi)
    half = 0.5 * pad * size * (1 + slack) + 2 * spacing
    n = np.ceil(2 * half / spacing).astype(int) + 1
    n = np.array([sfft.next_fast_len(int(k)) for k in n])
    start = np.floor((centre - 0.5 * (n - 1) * spacing) / spacing) * spacing
    return GridSpec(tuple(int(k) for k in n), tuple((n - 1) * spacing), tuple(start))


def stray_grid_ok(eta: np.ndarray, bg: GridSpec, pad: float = 2.0, kernel: str = "cubic") -> bool:
    """Whether ``bg`` still satisfies the padding requirement for moments at ``eta``."""
    h = bg.h
    reach = KERNELS[kernel] // 2 * h
    lo, hi = eta.min(axis=0) - reach, eta.max(axis=0) + reach
    o = np.array(bg.origin)
    e = np.array(bg.extent)
    inside = np.all(lo >= o + h) and np.all(hi <= o + e - h)
    return bool(inside and np.all(pad * (hi - lo + h) <= e + h * (1 + 1e-9)))
