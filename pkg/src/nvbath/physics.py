"""Physical constants, unit conventions and the sensor--bath dipolar coupling.

Canonical units used throughout the package:

* lengths in nm
* times in µs
* angular frequencies in rad/µs

The sensor sits at the origin a distance ``depth_d`` below the plane of bath
spins.  Bath spins are addressed by polar coordinates ``(r, alpha)`` in that
plane, measured from the point directly above the sensor.  The quantization
axis is tilted by ``tilt_theta`` from the surface normal towards +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PhysicalConstants",
    "CODATA",
    "MAGIC_ANGLE",
    "SensorGeometry",
    "dipolar_constant",
    "coupling",
    "coupling_magic",
    "coupling_general",
]

#: Angle between the surface normal and the quantization axis for which
#: 3cos^2(theta) - 1 = 0 (about 54.7356 degrees).
MAGIC_ANGLE = math.acos(1.0 / math.sqrt(3.0))

# SI -> canonical conversion factors
_M3_TO_NM3 = 1e27
_PER_S_TO_PER_US = 1e-6


@dataclass(frozen=True)
class PhysicalConstants:
    """Fundamental constants in SI units.

    Attributes
    ----------
    gamma_e : electron angular gyromagnetic ratio, rad s^-1 T^-1
    mu0_over_4pi : vacuum permeability divided by 4 pi, T m A^-1
    hbar : reduced Planck constant, J s
    """

    gamma_e: float = 1.76085963023e11
    mu0_over_4pi: float = 1.00000000055e-7
    hbar: float = 1.054571817e-34

    def __post_init__(self) -> None:
        for name in ("gamma_e", "mu0_over_4pi", "hbar"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")

    @property
    def dipolar_K(self) -> float:
        """(mu0/4pi) gamma_e^2 hbar in rad nm^3 / µs."""
        return dipolar_constant(self)


CODATA = PhysicalConstants()


def dipolar_constant(constants: PhysicalConstants = CODATA) -> float:
    """Return K = (mu0/4pi) * gamma_e^2 * hbar in rad nm^3 µs^-1.

    K/(2 pi) is the familiar ~52 MHz nm^3 dipolar scale.
    """
    k_si = constants.mu0_over_4pi * constants.gamma_e**2 * constants.hbar  # rad m^3 / s
    return k_si * _M3_TO_NM3 * _PER_S_TO_PER_US


@dataclass(frozen=True)
class SensorGeometry:
    """Sensor depth below the spin plane and quantization-axis tilt."""

    depth_d: float
    tilt_theta: float = MAGIC_ANGLE

    def __post_init__(self) -> None:
        if not (self.depth_d > 0 and math.isfinite(self.depth_d)):
            raise ValueError(f"depth_d must be > 0, got {self.depth_d!r}")
        if not (0.0 <= self.tilt_theta < math.pi / 2):
            raise ValueError(f"tilt_theta must lie in [0, pi/2), got {self.tilt_theta!r}")

    @property
    def is_magic(self) -> bool:
        return self.tilt_theta == MAGIC_ANGLE


def coupling_magic(r, alpha, depth: float, K: float):
    """Ising coupling for the magic-angle tilt, closed form.

    J = (K/2) (2 r^2 cos^2 a - r^2 - 2 sqrt(2) r d cos a) / (r^2 + d^2)^(5/2)
    """
    r = np.asarray(r, dtype=float)
    c = np.cos(alpha)
    num = 2.0 * r * r * c * c - r * r - 2.0 * math.sqrt(2.0) * r * depth * c
    return 0.5 * K * num / (r * r + depth * depth) ** 2.5


def coupling_general(r, alpha, depth: float, tilt: float, K: float):
    """Ising coupling from the secular dipolar form (3 (u.n)^2 - 1)/|R|^3.

    The unit vector u points from the sensor to the bath spin,
    u = (r cos a, r sin a, -d)/|R| with z pointing into the crystal,
    and n = (sin theta, 0, cos theta) is the quantization axis.
    """
    r = np.asarray(r, dtype=float)
    R2 = r * r + depth * depth
    R = np.sqrt(R2)
    un = (r * np.cos(alpha) * math.sin(tilt) - depth * math.cos(tilt)) / R
    return 0.5 * K * (3.0 * un * un - 1.0) / (R2 * R)


def coupling(r, alpha, geom: SensorGeometry, constants: PhysicalConstants = CODATA):
    """Sensor--bath Ising coupling J(r, alpha) in rad/µs (vectorised).

    Uses the closed magic-angle expression when ``geom.tilt_theta`` is the
    exact magic angle, otherwise the general tensor form.
    """
    if not isinstance(geom, SensorGeometry):
        raise TypeError("geom must be a SensorGeometry")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ValueError("r must be non-negative")
    K = dipolar_constant(constants)
    if geom.is_magic:
        out = coupling_magic(r_arr, alpha, geom.depth_d, K)
    else:
        out = coupling_general(r_arr, alpha, geom.depth_d, geom.tilt_theta, K)
    return out if np.ndim(out) else float(out)
