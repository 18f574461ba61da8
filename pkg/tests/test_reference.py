import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import integrate

from crackfield.model import Material
from crackfield.reference import (
    ReferenceError_, SneddonParams, cod_exact, domain_error_table, fit_rate, richardson, tcv_exact,
)


def test_tcv_exact_defaults():
    assert f"{tcv_exact(SneddonParams()):.4e}" == "6.0319e-03"
    assert f"{tcv_exact(SneddonParams(d=3)):.4e}" == "5.1200e-03"


def test_cod_exact_examples():
    assert cod_exact(SneddonParams(), 0.0) == pytest.approx(1.92e-3, rel=1e-12)
    assert cod_exact(SneddonParams(d=3), 0.0) == pytest.approx(4 / math.pi * 9.6e-4, rel=1e-12)
    assert cod_exact(SneddonParams(), 1.0) == 0.0
    assert cod_exact(SneddonParams(), 2.5) == 0.0
    assert cod_exact(SneddonParams(), [0.0, 0.6]).shape == (2,)
    with pytest.raises(ValueError):
        cod_exact(SneddonParams(), -0.1)


def test_params_validation_and_material_bridge():
    with pytest.raises(ValueError):
        SneddonParams(nu=0.5)
    with pytest.raises(ValueError):
        SneddonParams(d=4)
    p = SneddonParams.from_material(Material(p=2e-3, nu=0.3), 3)
    assert (p.p, p.nu, p.d) == (2e-3, 0.3, 3)


@given(st.floats(0.1, 10), st.floats(0.0, 0.9))
def test_homogeneity_in_pressure_and_modulus(s, rho):
    for d in (2, 3):
        a = SneddonParams(d=d)
        b = SneddonParams(p=s * a.p, E=s * a.E, d=d)
        assert tcv_exact(b) == pytest.approx(tcv_exact(a), rel=1e-12)
        assert cod_exact(b, rho) == pytest.approx(cod_exact(a, rho), rel=1e-12)
        c = SneddonParams(p=s * a.p, d=d)
        assert tcv_exact(c) == pytest.approx(s * tcv_exact(a), rel=1e-12)


@given(st.floats(0.2, 3.0), st.floats(0.0, 0.45))
def test_opening_integrates_to_volume(l0, nu):
    p2 = SneddonParams(l0=l0, nu=nu)
    line, _ = integrate.quad(lambda x: 2 * cod_exact(p2, abs(x)), -l0, l0, epsabs=1e-16, epsrel=1e-12)
    assert line == pytest.approx(tcv_exact(p2), rel=1e-10)
    p3 = SneddonParams(l0=l0, nu=nu, d=3)
    disk, _ = integrate.quad(lambda r: 2 * cod_exact(p3, r) * 2 * math.pi * r, 0, l0,
                             epsabs=1e-16, epsrel=1e-12)
    assert disk == pytest.approx(tcv_exact(p3), rel=1e-10)


@given(st.floats(-5, 5), st.floats(0.01, 10), st.floats(0.5, 4), st.sampled_from([2.0, 3.0, 1.5]))
def test_richardson_exact_on_power_laws(limit, C, q, r):
    h = r ** -np.arange(4.0)
    v = limit + C * h**q
    fit = richardson(v, r)
    assert fit.order == pytest.approx(q, rel=1e-6)
    assert fit.limit == pytest.approx(limit, abs=1e-9 * max(1, C))


def test_richardson_rejects_degenerate_sequences():
    with pytest.raises(ReferenceError_):
        richardson([1.0, 2.0])
    with pytest.raises(ReferenceError_):
        richardson([1.0, 1.0, 1.0])
    with pytest.raises(ReferenceError_):
        richardson([1.0, 2.0, 1.5])


@given(st.floats(0.01, 100), st.floats(-3, 3))
def test_fit_rate_exact_on_noiseless_power_laws(C, q):
    assume(abs(q) > 1e-3)
    h = np.geomspace(1e-3, 1, 7)
    assert fit_rate(zip(h, C * h**q)) == pytest.approx(q, abs=1e-10)


def test_fit_rate_drops_nonpositive_pairs():
    assert fit_rate([(1.0, 1.0), (0.5, 0.25), (0.25, 0.0), (-1, 3)]) == pytest.approx(2.0)
    with pytest.raises(ReferenceError_):
        fit_rate([(1.0, 0.0), (0.5, 0.1)])


def test_domain_error_table():
    exact = tcv_exact(SneddonParams())
    t = domain_error_table({5.0: 1.056 * exact, 10.0: 0.985 * exact}, SneddonParams())
    assert t[5.0] == pytest.approx(5.6)
    assert t[10.0] == pytest.approx(1.5)
