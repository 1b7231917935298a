import warnings

import numpy as np
import pytest

from magmove.energy import (SYMBOLS, MaterialParams, ParameterError, elastic_energy, evaluate, eulerian_energy,
                            grad_energy_deformation, grad_energy_magnetization, growth_audit, magnetic_energy)
from magmove.grid import ContractViolation, GridSpec
from magmove.kinematics import push_forward_magnetization
from magmove.strayfield import stray_grid_for

NO_STRAY = MaterialParams(stray=False)


def _unit(d, n=5):
    g = GridSpec.unit(d, n)
    return g, g.coords.copy(), np.tile(np.eye(d)[-1], (g.num_nodes, 1))


@pytest.mark.parametrize("d", [2, 3])
def test_reference_state_breakdown(d):
    g, eta, M = _unit(d)
    e = evaluate(eta, M, NO_STRAY, g).breakdown
    assert e.W == pytest.approx(0.5 * d)
    assert e.det_penalty == pytest.approx(1.0)
    for part in ("hessian", "anisotropy", "exchange", "saturation", "stray"):
        assert getattr(e, part) == pytest.approx(0.0, abs=1e-14)
    assert e.total == pytest.approx(0.5 * d + 1.0)


@pytest.mark.parametrize("s", [0.8, 1.3])
def test_dilation_closed_form(s):
    g, X, M = _unit(3)
    p = NO_STRAY.replace(K=0.0)
    e = evaluate(s * X, s**3 * M, p, g).breakdown
    assert e.W == pytest.approx(1.5 * s**2)
    assert e.det_penalty == pytest.approx(s ** (-3 * p.a))
    assert e.saturation == pytest.approx(0.0, abs=1e-12)
    assert e.exchange == pytest.approx(0.0, abs=1e-12)


def test_saturation_and_anisotropy_values():
    g, X, M = _unit(3)
    e = evaluate(X, 2 * M, NO_STRAY, g).breakdown
    assert e.saturation == pytest.approx((4 - 1) ** 2 / (4 * NO_STRAY.beta**2))
    assert e.anisotropy == pytest.approx(NO_STRAY.K * 1.0)


def test_exchange_of_sine_profile():
    g = GridSpec.unit(3, 33)
    X = g.coords
    M = np.zeros_like(X)
    M[:, 0] = np.sin(np.pi * X[:, 0])
    e = evaluate(X.copy(), M, NO_STRAY.replace(A=1.0), g).breakdown
    assert e.exchange == pytest.approx(np.pi**2 / 2, rel=2e-2)


def test_folded_state_has_infinite_energy():
    g, X, M = _unit(2)
    e = evaluate(X * np.array([-1.0, 1.0]), M, NO_STRAY, g).breakdown
    assert e.infinite and e.total == np.inf
    with pytest.raises(ContractViolation):
        grad_energy_deformation(X * np.array([-1.0, 1.0]), M, g, NO_STRAY)


def test_part_selection():
    g, X, M = _unit(3)
    eta = 1.1 * X
    el = elastic_energy(eta, g, NO_STRAY)
    mag = magnetic_energy(eta, 1.2 * M, g, NO_STRAY)
    tot = evaluate(eta, 1.2 * M, NO_STRAY, g).breakdown
    assert el.total + mag.total == pytest.approx(tot.total)
    assert el.saturation == 0 and mag.W == 0


def _fd(fun, v, h=1e-6):
    return (fun(h) - fun(-h)) / (2 * h)


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("stray", [False, True])
def test_gradients_match_finite_differences(d, stray):
    g = GridSpec.unit(d, 6)
    X = g.coords
    rng = np.random.default_rng(d)
    eta = X + 0.03 * np.sin(np.pi * X[:, ::-1]) * (~g.dirichlet)[:, None]
    M = np.eye(d)[-1] + 0.2 * np.cos(2 * X)
    p = MaterialParams(stray=stray)
    bg = stray_grid_for(eta, 0.2, slack=0.3) if stray else None
    v = rng.standard_normal(X.shape) * (~g.dirichlet)[:, None]
    m = rng.standard_normal(X.shape)
    ge = grad_energy_deformation(eta, M, g, p, bg)
    gm = grad_energy_magnetization(eta, M, g, p, bg)
    E = lambda e, mm: evaluate(e, mm, p, g, stray_grid=bg).breakdown.total
    fe = _fd(lambda h: E(eta + h * v, M), v)
    fm = _fd(lambda h: E(eta, M + h * m), m)
    assert np.sum(ge * v) == pytest.approx(fe, rel=1e-6)
    assert np.sum(gm * m) == pytest.approx(fm, rel=1e-6)
    assert np.all(ge[g.dirichlet] == 0)


def test_shape_contract():
    g, X, M = _unit(3)
    with pytest.raises(ContractViolation):
        evaluate(X[:-1], M, NO_STRAY, g)


def test_eulerian_energy_of_identity():
    g, X, M = _unit(3, 9)
    bg = GridSpec((17,) * 3, (2.0,) * 3, (-0.5,) * 3)
    M = M * 0.9
    Me = push_forward_magnetization(M, X, g, bg)
    lag = evaluate(X, M, NO_STRAY, g).breakdown
    eul = eulerian_energy(X, Me, g, NO_STRAY, bg)
    assert eul.total == pytest.approx(lag.total, rel=1e-10)


@pytest.mark.parametrize("changes, key", [
    ({"q": 3.0}, "q"),
    ({"a": 10.0}, "a"),
    ({"q": 1.5, "override": True}, "q"),
    ({"A": 0.0}, "A"),
    ({"nu": 0.0}, "nu"),
    ({"K": -1.0}, "K"),
    ({"p3": 6.0}, "p3"),
    ({"p4": 5.0}, "p4"),
    ({"p1": 1.0}, "p1"),
    ({"stray_pad": 1.5}, "stray_pad"),
    ({"easy_axis": (1.0, 1.0, 0.0)}, "easy_axis"),
])
def test_validation_names_key_and_symbol(changes, key):
    with pytest.raises(ParameterError) as err:
        MaterialParams(**changes).validate()
    assert err.value.key == key
    assert err.value.symbol == SYMBOLS[key]


def test_override_downgrades_exponent_error_to_warning():
    with pytest.warns(UserWarning):
        MaterialParams(a=0, q=2, A=0, override=True).validate()


def test_defaults_validate_without_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        MaterialParams().validate()
        MaterialParams(easy_axis=(1.0, 0.0)).validate(d=2)


def test_growth_audit_passes_for_defaults():
    rep = growth_audit(MaterialParams())
    assert rep.passed and rep.witness is None


def test_growth_audit_catches_negative_energy():
    class Negative:
        def value(self, F):
            return -np.einsum("...ij,...ij->...", F, F)

        def derivative(self, F):
            return -2 * F

    rep = growth_audit(MaterialParams(W=Negative()))
    assert not rep.passed and rep.witness is not None
