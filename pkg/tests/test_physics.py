import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvbath.physics import (CODATA, MAGIC_ANGLE, PhysicalConstants, SensorGeometry, coupling,
                            coupling_general, coupling_magic, dipolar_constant)
from oracles import dipole_coupling_si


def test_dipolar_constant_52_mhz_nm3():
    K = dipolar_constant(CODATA)
    assert K / (2 * math.pi) == pytest.approx(52.0, rel=0.01)
    # direct arithmetic: 1e-7 * (1.76086e11)^2 * 1.0546e-34 m^3/s -> rad nm^3/us
    assert K == pytest.approx(1e-7 * 1.76086e11**2 * 1.0546e-34 * 1e21, rel=1e-4)
    assert K == pytest.approx(327.0, abs=0.5)


def test_dipolar_constant_quadratic_in_gamma():
    doubled = replace(CODATA, gamma_e=2 * CODATA.gamma_e)
    assert dipolar_constant(doubled) == pytest.approx(4 * dipolar_constant(CODATA), rel=1e-14)
    assert CODATA.dipolar_K == dipolar_constant(CODATA)


@pytest.mark.parametrize("field", ["gamma_e", "mu0_over_4pi", "hbar"])
def test_constants_must_be_positive(field):
    with pytest.raises(ValueError):
        PhysicalConstants(**{field: -1.0})


def test_geometry_validation_and_magic_default():
    g = SensorGeometry(5.0)
    assert math.cos(g.tilt_theta) ** 2 == pytest.approx(1 / 3, abs=1e-3)
    assert g.is_magic
    for bad in (0.0, -1.0, math.inf):
        with pytest.raises(ValueError):
            SensorGeometry(bad)
    with pytest.raises(ValueError):
        SensorGeometry(5.0, tilt_theta=math.pi / 2)


def test_coupling_special_points():
    g = SensorGeometry(5.0)
    K = dipolar_constant()
    assert coupling(0.0, 1.234, g) == 0.0
    r = 3.0
    assert coupling(r, math.pi / 2, g) == pytest.approx(-0.5 * K * r * r / (r * r + 25.0) ** 2.5, rel=1e-13)
    with pytest.raises(ValueError):
        coupling(-1.0, 0.0, g)


@pytest.mark.parametrize("tilt", [MAGIC_ANGLE, 0.0, 0.3, 1.2])
@pytest.mark.parametrize("r,alpha,d", [(5.0, 0.0, 5.0), (2.0, 2.1, 3.0), (11.0, 4.0, 1.5)])
def test_coupling_matches_dipole_field_oracle(tilt, r, alpha, d):
    ref = dipole_coupling_si(r, alpha, d, tilt, CODATA.gamma_e, CODATA.mu0_over_4pi, CODATA.hbar)
    assert coupling(r, alpha, SensorGeometry(d, tilt)) == pytest.approx(ref, rel=1e-10)


def test_magic_and_general_paths_agree():
    rng = np.random.default_rng(3)
    K = dipolar_constant()
    r = rng.uniform(0, 50, 1000)
    a = rng.uniform(0, 2 * math.pi, 1000)
    d = rng.uniform(0.5, 30, 1000)
    m = np.array([coupling_magic(r[i], a[i], d[i], K) for i in range(1000)])
    gen = np.array([coupling_general(r[i], a[i], d[i], MAGIC_ANGLE, K) for i in range(1000)])
    scale = 0.5 * K / (r * r + d * d) ** 1.5  # natural size of the coupling
    assert np.max(np.abs(m - gen) / scale) < 1e-10


@given(st.floats(0, 2 * math.pi), st.floats(0.1, 50))
def test_magic_angle_zero_on_axis(alpha, d):
    assert coupling(0.0, alpha, SensorGeometry(d)) == 0.0


@given(st.floats(0.0, 40.0), st.floats(0, 2 * math.pi), st.floats(0.5, 20.0), st.floats(0.1, 10.0),
       st.sampled_from([MAGIC_ANGLE, 0.4]))
def test_coupling_scale_covariance(r, alpha, d, s, tilt):
    base = coupling(r, alpha, SensorGeometry(d, tilt))
    scaled = coupling(s * r, alpha, SensorGeometry(s * d, tilt))
    assert scaled == pytest.approx(base / s**3, rel=1e-9, abs=1e-12 * abs(dipolar_constant()) / (s * d) ** 3)


def test_coupling_vectorised_shape():
    out = coupling(np.linspace(0, 10, 7), np.zeros(7), SensorGeometry(4.0))
    assert out.shape == (7,)
