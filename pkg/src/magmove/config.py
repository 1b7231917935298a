"""Run configuration: JSON with sections grid / material / data / step / output.

Every key maps to a model symbol (see ``KEY_DOCS``); schema errors name both.
Field data are given as named analytic presets or sampled-field files.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .energy import SYMBOLS, MaterialParams, ParameterError
from .grid import ContractViolation, GridSpec
from .kinematics import sample
from .stepper import DataProviders, SpaceTimeField, StepConfig

SCHEMA_VERSION = 1


class ConfigError(ContractViolation):
    def __init__(self, key: str, symbol: str, message: str):
        super().__init__(f"{key} ({symbol}): {message}")
        self.key = key
        self.symbol = symbol


KEY_DOCS = {
    "version": "schema version",
    "grid.d": "d, spatial dimension",
    "grid.n": "nodes per axis of the reference grid on Omega_0 = [0,1]^d",
    "grid.dirichlet": "P, Dirichlet part of the boundary (bottom, top-bottom, all, none)",
    "data.f": "f(t, x), body force in the current configuration",
    "data.Hext": "H_ext(t, x), external magnetic field",
    "data.eta0": "eta_0, initial deformation",
    "data.M0": "M_0, initial Lagrangian magnetization",
    "data.dirichlet": "gamma(t), time-dependent Dirichlet data on P",
    "step.dt": "dt, time step",
    "step.T_end": "T, final time",
    "step.kappa": "kappa, mollifier half-width",
    "step.gtol": "inner solver tolerance on the gradient dual norm",
    "step.max_iter": "inner solver iteration cap",
    "step.history": "quasi-Newton memory",
    "step.E_max": "E_max, energy blow-up threshold",
    "step.inertial": "time-delayed inertial term toggle",
    "step.delay": "h, delay of the inertial term",
    "step.seed": "random seed",
    "step.contact_tol": "boundary injectivity margin floor",
    "step.cn_spacing": "rasterization spacing of the global injectivity check",
    "step.descent_rtol": "relative allowance of the descent assertion",
    "output.stride": "snapshot stride s",
    "output.directory": "output directory",
}
KEY_DOCS.update({f"material.{k}": v for k, v in SYMBOLS.items()})


def _err(key: str, message: str) -> ConfigError:
    return ConfigError(key, KEY_DOCS.get(key, "unknown key"), message)


# -- field presets ---------------------------------------------------------------------------

def _time_profile(spec: dict, key: str):
    kind = spec.get("profile", "constant")
    omega = float(spec.get("omega", 1.0))
    if kind == "constant":
        return lambda t: 1.0
    if kind == "ramp":
        return lambda t: t
    if kind == "sine":
        return lambda t: np.sin(omega * t)
    raise _err(key, f"unknown time profile {kind!r}")


def field_preset(spec: dict | None, d: int, key: str = "data.Hext", base: Path | None = None) -> SpaceTimeField:
    """Build a space-time vector field from a preset description."""
    if spec is None or spec.get("type", "zero") == "zero":
        return SpaceTimeField.zero(d)
    kind = spec["type"]
    prof = _time_profile(spec, key)
    if kind == "uniform":
        v = _vector(spec.get("value"), d, key)
        return SpaceTimeField(lambda t, x: prof(t) * np.broadcast_to(v, x.shape),
                              lambda t, x: np.zeros(x.shape + (d,)), name="uniform")
    if kind == "linear":
        v = _vector(spec.get("value", [0.0] * d), d, key)
        G = np.asarray(spec.get("gradient", np.zeros((d, d))), float)
        if G.shape != (d, d):
            raise _err(key, f"gradient must be {d}x{d}")
        return SpaceTimeField(lambda t, x: prof(t) * (v + x @ G.T),
                              lambda t, x: prof(t) * np.broadcast_to(G, x.shape + (d,)), name="linear")
    if kind == "gaussian":
        amp = _vector(spec.get("value"), d, key)
        c = _vector(spec.get("centre", [0.5] * d), d, key)
        w = float(spec.get("width", 0.5))

        def g(t, x):
            return prof(t) * np.exp(-np.sum((x - c) ** 2, axis=1) / w**2)[:, None] * amp

        def jac(t, x):
            e = prof(t) * np.exp(-np.sum((x - c) ** 2, axis=1) / w**2)
            return (e[:, None, None] * amp[None, :, None]) * (-2 * (x - c) / w**2)[:, None, :]

        return SpaceTimeField(g, jac, name="gaussian")
    if kind == "file":
        from .io import read_field
        path = _resolve(spec.get("path"), base, key)
        values = read_field(path)
        n = values.shape[:-1]
        grid = GridSpec(tuple(n), tuple(spec.get("extent", [1.0] * d)), tuple(spec.get("origin", [0.0] * d)))
        flat = values.reshape(-1, d)
        return SpaceTimeField(lambda t, x: prof(t) * sample(flat, grid, x), name="file")
    raise _err(key, f"unknown preset {kind!r}")


def _vector(v, d: int, key: str) -> np.ndarray:
    if v is None:
        raise _err(key, "missing 'value'")
    a = np.asarray(v, float)
    if a.shape != (d,):
        raise _err(key, f"needs {d} components")
    return a


def _resolve(p, base: Path | None, key: str) -> Path:
    if not p:
        raise _err(key, "missing 'path'")
    path = Path(p)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise _err(key, f"file {path} does not exist")
    return path


def initial_deformation(spec: dict | None, grid: GridSpec, base: Path | None = None) -> np.ndarray:
    spec = spec or {"type": "identity"}
    X = grid.coords
    kind = spec.get("type", "identity")
    if kind == "identity":
        return X.copy()
    if kind == "affine":
        d = grid.d
        if "matrix" in spec:
            A = np.asarray(spec["matrix"], float)
        else:
            A = float(spec.get("stretch", 1.0)) * np.eye(d)
            A[0, d - 1] += float(spec.get("shear", 0.0))
        if A.shape != (d, d) or np.linalg.det(A) <= 0:
            raise _err("data.eta0", "affine matrix must be d x d with positive determinant")
        return X @ A.T + np.asarray(spec.get("shift", np.zeros(d)), float)
    if kind == "file":
        from .io import read_field
        eta = read_field(_resolve(spec.get("path"), base, "data.eta0")).reshape(-1, grid.d)
        if eta.shape != X.shape:
            raise _err("data.eta0", f"file holds {eta.shape}, grid needs {X.shape}")
        return eta
    raise _err("data.eta0", f"unknown preset {kind!r}")


def initial_magnetization(spec: dict | None, grid: GridSpec, base: Path | None = None) -> np.ndarray:
    spec = spec or {"type": "constant", "value": list(np.eye(grid.d)[-1])}
    kind = spec.get("type", "constant")
    if kind == "constant":
        return np.tile(_vector(spec.get("value"), grid.d, "data.M0"), (grid.num_nodes, 1))
    if kind == "file":
        from .io import read_field
        M = read_field(_resolve(spec.get("path"), base, "data.M0")).reshape(-1, grid.d)
        if M.shape != (grid.num_nodes, grid.d):
            raise _err("data.M0", f"file holds {M.shape}")
        return M
    raise _err("data.M0", f"unknown preset {kind!r}")


def dirichlet_preset(spec: dict | None, grid: GridSpec):
    if spec is None or spec.get("type", "fixed") == "fixed":
        return None
    if spec["type"] == "compress":
        rate = float(spec.get("rate", 1.0))

        def gamma(t, X):
            out = X.copy()
            out[:, -1] = X[:, -1] * (1.0 - rate * t)
            return out

        return gamma
    raise _err("data.dirichlet", f"unknown preset {spec['type']!r}")


# -- run configuration -----------------------------------------------------------------------

@dataclass
class OutputConfig:
    stride: int = 1
    directory: str = "magmove-out"


@dataclass
class RunConfig:
    grid: GridSpec
    params: MaterialParams
    data: DataProviders
    step: StepConfig
    output: OutputConfig = field(default_factory=OutputConfig)
    source: dict = field(default_factory=dict)


_SECTIONS = {"version", "grid", "material", "data", "step", "output"}


def _check_keys(section: str, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            raise _err(f"{section}.{key}", "unknown key")


def parse_config(doc: dict, base: Path | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise _err("version", "configuration must be a JSON object")
    for key in doc:
        if key not in _SECTIONS:
            raise _err(key, "unknown section")
    if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise _err("version", f"expected {SCHEMA_VERSION}, got {doc.get('version')}")
    g = doc.get("grid", {})
    _check_keys("grid", g, ("d", "n", "dirichlet"))
    d = g.get("d", 3)
    if d not in (2, 3):
        raise _err("grid.d", "must be 2 or 3")
    n = g.get("n", 9)
    if not (isinstance(n, int) and n >= 3) and not (isinstance(n, list) and len(n) == d and min(n) >= 3):
        raise _err("grid.n", "needs an integer >= 3 or one per axis")
    try:
        grid = GridSpec.unit(d, n, dirichlet=g.get("dirichlet", "bottom"))
    except (ContractViolation, ValueError) as exc:
        raise _err("grid.dirichlet", str(exc)) from exc

    m = dict(doc.get("material", {}))
    names = {f.name for f in fields(MaterialParams)} - {"W", "psi"}
    _check_keys("material", m, names)
    if "easy_axis" in m and m["easy_axis"] is not None:
        m["easy_axis"] = tuple(m["easy_axis"])
    if m.get("beta") in ("inf", "Infinity"):
        m["beta"] = float("inf")
    try:
        params = MaterialParams(**m)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            params.validate(d)
        for w in caught:
            warnings.warn(str(w.message), stacklevel=2)
    except ParameterError as exc:
        raise ConfigError(f"material.{exc.key}", exc.symbol, str(exc)) from exc

    dsec = doc.get("data", {})
    _check_keys("data", dsec, ("f", "Hext", "eta0", "M0", "dirichlet"))
    data = DataProviders(initial_deformation(dsec.get("eta0"), grid, base),
                         initial_magnetization(dsec.get("M0"), grid, base),
                         field_preset(dsec.get("f"), d, "data.f", base),
                         field_preset(dsec.get("Hext"), d, "data.Hext", base),
                         dirichlet_preset(dsec.get("dirichlet"), grid))

    s = doc.get("step", {})
    _check_keys("step", s, {f.name for f in fields(StepConfig)})
    try:
        step = StepConfig(**s)
    except (ContractViolation, TypeError) as exc:
        raise _err("step.dt", str(exc)) from exc

    o = doc.get("output", {})
    _check_keys("output", o, ("stride", "directory"))
    out = OutputConfig(**o)
    if out.stride < 1:
        raise _err("output.stride", "must be at least 1")
    return RunConfig(grid, params, data, step, out, doc)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise _err("version", f"invalid JSON: {exc}") from exc
    return parse_config(doc, path.parent)
