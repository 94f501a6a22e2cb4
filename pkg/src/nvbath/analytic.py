"""Closed-form and quadrature decay laws, filter functions and noise overlaps.

The configurationally averaged DEER signal of a sensor at depth d below a 2D
Poisson bath of density sigma is

    S(tau) = exp[ sigma d^2 I(beta) ],   beta = K tau / (2 d^3),

with the universal, depth-free exponent

    I(beta) = int_0^inf x dx int_0^2pi da [cos(beta g(x, a)) - 1],
    g(x, a) = (2x^2 cos^2 a - x^2 - 2 sqrt(2) x cos a) / (x^2 + 1)^(5/2).

Writing beta g = A cos 2a + B cos a with A = beta x^2/(x^2+1)^(5/2) and
B = -2 sqrt(2) beta x/(x^2+1)^(5/2), the angular integral is a periodic
integral of bounded bandwidth and is done with a spectrally accurate trapezoid
rule.  The remaining radial integral is oscillatory and handled by composite
Gauss--Legendre panels whose width follows the local oscillation scale.  Beyond the radius
where beta |g| < 1e-3 the integrand is replaced by its exact second-order
expansion, which integrates in closed form.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable

import numpy as np
from scipy import integrate, interpolate, optimize, special

from .physics import CODATA, PhysicalConstants, dipolar_constant

__all__ = [
    "QuadratureError",
    "SpectrumIntegrationError",
    "LONGTIME_COEFF",
    "SHORTTIME_COEFF",
    "beta_of",
    "tau_of",
    "universal_exponent",
    "universal_exponent_fast",
    "gamma_deer_dense",
    "hopping_signal_exact",
    "hopping_signal_fast",
    "hopping_time_at",
    "hopping_signal_shorttime",
    "hopping_signal_longtime",
    "crossover_time",
    "f_t1",
    "finite_t1_signal",
    "DecayKind",
    "DecayModel",
    "FilterKind",
    "FilterSpec",
    "filter_function",
    "filter_cosine_series",
    "chi_from_spectrum",
    "dlnchi_dlnT",
    "coherence_from_spectrum",
    "lorentzian_telegraph_spectrum",
    "spectral_decompose",
    "DEFAULT_PEAK_WEIGHT",
]


class QuadratureError(RuntimeError):
    """Raised when an adaptive quadrature misses its tolerance."""

    def __init__(self, message: str, value: float, achieved_rtol: float):
        super().__init__(f"{message} (achieved relative tolerance {achieved_rtol:.2e})")
        self.value = value
        self.achieved_rtol = achieved_rtol


class SpectrumIntegrationError(QuadratureError):
    """Raised when the noise/filter overlap integral diverges or fails."""


#: Short-time coefficient: I(beta) ~ -(3 pi/16) beta^2 for beta -> 0.
SHORTTIME_COEFF = 3.0 * math.pi / 16.0
#: Long-time coefficient: I(beta) ~ -(9 sqrt(pi) Gamma(11/6)/5) beta^(2/3).
LONGTIME_COEFF = 9.0 * math.sqrt(math.pi) * math.gamma(11.0 / 6.0) / 5.0

_SQ2 = math.sqrt(2.0)


def beta_of(tau, depth: float, constants: PhysicalConstants = CODATA):
    """Dimensionless time beta = K tau / (2 d^3)."""
    return dipolar_constant(constants) * np.asarray(tau, float) / (2.0 * depth**3)


def tau_of(beta, depth: float, constants: PhysicalConstants = CODATA):
    return 2.0 * np.asarray(beta, float) * depth**3 / dipolar_constant(constants)


# ---------------------------------------------------------------------------
# universal exponent I(beta)
# ---------------------------------------------------------------------------

_GL_T, _GL_W = np.polynomial.legendre.leggauss(20)


def _alpha_avg_m1(x: np.ndarray, beta: float, block: int = 2048) -> np.ndarray:
    """(1/2pi) int_0^2pi [cos(beta g(x,a)) - 1] da, vectorised over x.

    The integrand is written as -2 sin^2(beta g/2) (no cancellation) and
    integrated with the periodic trapezoid rule on [0, pi] (it is even in a).
    The rule is spectrally accurate once the node count exceeds the angular
    bandwidth 2|A| + |B| of cos(A cos 2a + B cos a), so the node count is
    chosen per x from that bandwidth plus a safety margin.
    """
    den = (x * x + 1.0) ** 2.5
    A = beta * x * x / den
    B = -2.0 * _SQ2 * beta * x / den
    bw = 2.0 * np.abs(A) + np.abs(B)
    M = (bw + 10.0 * np.cbrt(bw) + 24.0).astype(np.int64)
    order = np.argsort(M, kind="stable")
    out = np.empty_like(x)
    for s in range(0, x.size, block):
        idx = order[s:s + block]
        m = int(M[idx].max())
        al = np.arange(m + 1) * (math.pi / m)
        w = np.full(m + 1, 1.0 / m)
        w[0] = w[-1] = 0.5 / m
        half_phase = 0.5 * (A[idx, None] * np.cos(2.0 * al)[None, :] + B[idx, None] * np.cos(al)[None, :])
        out[idx] = -2.0 * (np.sin(half_phase) ** 2) @ w
    return out


def _x_edges(beta: float, xmax: float, res: float) -> np.ndarray:
    """Panel edges: width tracks the local oscillation wavelength of the integrand."""
    edges = [0.0]
    x = 0.0
    while x < xmax:
        env = 4.0 / (1.0 + x) ** 4  # bound on |d g/dx|
        h = min(0.25 * (1.0 + x), res / (beta * env + 1e-300))
        x = min(x + h, xmax)
        edges.append(x)
    return np.asarray(edges)


def _tail_second_order(beta: float, X: float) -> float:
    """Exact integral over x > X of 2pi x * (-(A^2 + B^2)/4)."""
    U = X * X + 1.0
    return -0.5 * math.pi * beta * beta * (0.25 / U**2 + 1.0 / U**3 - 0.875 / U**4)


def _radial_integral(beta: float, res: float) -> float:
    xmax = max(10.0, (1e3 * beta) ** (1.0 / 3.0))
    e = _x_edges(beta, xmax, res)
    h = 0.5 * np.diff(e)
    c = 0.5 * (e[1:] + e[:-1])
    x = (c[:, None] + h[:, None] * _GL_T[None, :]).ravel()
    w = (h[:, None] * _GL_W[None, :]).ravel()
    core = 2.0 * math.pi * np.sum(w * x * _alpha_avg_m1(x, beta))
    return core + _tail_second_order(beta, xmax)


def universal_exponent(beta: float, rtol: float = 1e-6, max_refine: int = 5) -> float:
    """Universal configurational exponent I(beta) (negative), to relative ``rtol``.

    The estimate is refined by halving all panel widths until two successive
    results agree to ``rtol``; otherwise :class:`QuadratureError` is raised.
    """
    beta = float(beta)
    if not beta >= 0 or not math.isfinite(beta):
        raise ValueError(f"beta must be finite and >= 0, got {beta!r}")
    if beta == 0.0:
        return 0.0
    res = 1.0
    prev = _radial_integral(beta, res)
    achieved = math.inf
    for _ in range(max_refine):
        res *= 0.5
        cur = _radial_integral(beta, res)
        achieved = abs(cur - prev) / max(abs(cur), 1e-300)
        if achieved <= rtol:
            return cur
        prev = cur
    raise QuadratureError(f"I(beta={beta:g}) did not converge", prev, achieved)


# tabulated fast version -------------------------------------------------------

_TABLE_FILE = "universal_exponent.csv"


@lru_cache(maxsize=1)
def _table():
    with resources.files("nvbath.data").joinpath(_TABLE_FILE).open("r") as fh:
        arr = np.loadtxt(fh, delimiter=",", comments="#")
    lb, I = np.log(arr[:, 0]), arr[:, 1]
    # interpolate the ratio to the short-time law: smooth and O(1) everywhere
    ratio = I / (-SHORTTIME_COEFF * arr[:, 0] ** 2)
    spline = interpolate.CubicSpline(lb, np.log(ratio))
    return arr[:, 0], I, spline


def universal_exponent_fast(beta) -> np.ndarray:
    """Interpolated I(beta) from the bundled high-accuracy table (vectorised).

    Relative accuracy is ~1e-8 up to beta = 600, where the table is dense
    enough to resolve the weak period-~4 ripple of I(beta); between 600 and
    5000 the table is logarithmic and the ripple limits accuracy to ~1e-4.
    Below the table the short-time law is used; above it the long-time law
    plus the constant offset observed at the last tabulated point.
    """
    b = np.asarray(beta, float)
    grid, I, spline = _table()
    out = np.empty_like(b)
    lo = b < grid[0]
    hi = b > grid[-1]
    mid = ~(lo | hi)
    out[lo] = -SHORTTIME_COEFF * b[lo] ** 2
    out[mid] = -SHORTTIME_COEFF * b[mid] ** 2 * np.exp(spline(np.log(b[mid])))
    offset = I[-1] + LONGTIME_COEFF * grid[-1] ** (2.0 / 3.0)
    out[hi] = -LONGTIME_COEFF * b[hi] ** (2.0 / 3.0) + offset
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# decay laws
# ---------------------------------------------------------------------------

def gamma_deer_dense(sigma: float, depth: float, constants: PhysicalConstants = CODATA) -> float:
    """Dense-bath Gaussian DEER rate (mu0/4pi) sqrt(3 pi sigma) gamma^2 hbar / (8 d^2)."""
    if not (sigma > 0 and depth > 0):
        raise ValueError("sigma and depth must be positive")
    return dipolar_constant(constants) * math.sqrt(3.0 * math.pi * sigma) / (8.0 * depth**2)


def hopping_signal_exact(sigma: float, depth: float, tau, constants: PhysicalConstants = CODATA,
                         rtol: float = 1e-6):
    """Configurationally averaged DEER signal exp[sigma d^2 I(beta)] (exact quadrature)."""
    if not (sigma >= 0 and depth > 0):
        raise ValueError("sigma must be >= 0 and depth > 0")
    betas = np.atleast_1d(beta_of(tau, depth, constants))
    vals = np.array([universal_exponent(b, rtol=rtol) for b in betas])
    out = np.exp(sigma * depth**2 * vals)
    return out if np.ndim(tau) else float(out[0])


def hopping_signal_fast(sigma: float, depth: float, tau, constants: PhysicalConstants = CODATA):
    """Same as :func:`hopping_signal_exact` but using the tabulated exponent."""
    b = beta_of(tau, depth, constants)
    return np.exp(sigma * depth**2 * universal_exponent_fast(b))


def hopping_time_at(sigma: float, depth: float, level: float, constants: PhysicalConstants = CODATA) -> float:
    """Time at which the configurational average first falls to ``level`` (tabulated exponent)."""
    if not (sigma > 0 and depth > 0 and 0 < level < 1):
        raise ValueError("need sigma > 0, depth > 0 and 0 < level < 1")
    target = math.log(level)

    def g(lt):
        return float(np.log(hopping_signal_fast(sigma, depth, math.exp(lt), constants))) - target

    lo, hi = math.log(tau_of(1e-6, depth, constants)), math.log(tau_of(1.0, depth, constants))
    while g(hi) > 0:
        hi += math.log(4.0)
    return math.exp(optimize.brentq(g, lo, hi, xtol=1e-12))


def hopping_signal_shorttime(sigma: float, depth: float, tau, constants: PhysicalConstants = CODATA):
    """Gaussian short-time form exp[-(3 pi sigma d^2/16) beta^2]."""
    b = beta_of(tau, depth, constants)
    return np.exp(-SHORTTIME_COEFF * sigma * depth**2 * b * b)


def hopping_signal_longtime(sigma: float, tau, constants: PhysicalConstants = CODATA):
    """Depth-free long-time form exp[-(9 sqrt(pi) Gamma(11/6) sigma/5) (K tau/2)^(2/3)]."""
    if not (sigma >= 0):
        raise ValueError("sigma must be >= 0")
    K = dipolar_constant(constants)
    t = np.asarray(tau, float)
    return np.exp(-LONGTIME_COEFF * sigma * (0.5 * K * t) ** (2.0 / 3.0))


def crossover_time(depth: float, constants: PhysicalConstants = CODATA) -> float:
    """tau_c = 2 pi d^3 / K, i.e. beta = pi."""
    if not depth > 0:
        raise ValueError("depth must be positive")
    return 2.0 * math.pi * depth**3 / dipolar_constant(constants)


def f_t1(tau, t1: float):
    """f(tau, T1) = (2 T1^2/tau^2) (tau/T1 - 1 + exp(-tau/T1)), stable for tau << T1."""
    u = np.atleast_1d(np.asarray(tau, float) / t1)
    out = np.empty_like(u)
    small = u < 1e-3
    us = u[small]
    out[small] = 1.0 - us / 3.0 + us * us / 12.0 - us**3 / 60.0
    ub = u[~small]
    out[~small] = 2.0 * (ub + np.expm1(-ub)) / (ub * ub)
    return out if np.ndim(tau) else float(out[0])


def finite_t1_signal(gamma_deer: float, tau, t1: float):
    """exp[-(Gamma tau)^2 f(tau, T1)]."""
    if not (gamma_deer > 0 and t1 > 0):
        raise ValueError("gamma_deer and t1 must be positive")
    t = np.asarray(tau, float)
    return np.exp(-((gamma_deer * t) ** 2) * f_t1(t, t1))


class DecayKind(str, enum.Enum):
    DenseStatic = "DenseStatic"
    HoppingExact = "HoppingExact"
    HoppingShortTime = "HoppingShortTime"
    HoppingLongTime = "HoppingLongTime"
    FiniteT1 = "FiniteT1"


@dataclass(frozen=True)
class DecayModel:
    kind: DecayKind
    sigma: float | None = None
    depth: float | None = None
    gamma_deer: float | None = None
    t1: float | None = None

    def __post_init__(self) -> None:
        for name in ("sigma", "depth", "gamma_deer", "t1"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def __call__(self, tau, constants: PhysicalConstants = CODATA):
        k = DecayKind(self.kind)
        if k is DecayKind.DenseStatic:
            g = gamma_deer_dense(self.sigma, self.depth, constants)
            return np.exp(-((g * np.asarray(tau, float)) ** 2))
        if k is DecayKind.HoppingExact:
            return hopping_signal_exact(self.sigma, self.depth, tau, constants)
        if k is DecayKind.HoppingShortTime:
            return hopping_signal_shorttime(self.sigma, self.depth, tau, constants)
        if k is DecayKind.HoppingLongTime:
            return hopping_signal_longtime(self.sigma, tau, constants)
        g = self.gamma_deer if self.gamma_deer is not None else gamma_deer_dense(self.sigma, self.depth, constants)
        return finite_t1_signal(g, tau, self.t1)


# ---------------------------------------------------------------------------
# filter functions and noise overlap
# ---------------------------------------------------------------------------

class FilterKind(str, enum.Enum):
    Ramsey = "Ramsey"
    SpinEcho = "SpinEcho"
    NPulse = "NPulse"
    DeerDivided = "DeerDivided"


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind
    n_pulses: int = 1

    def __post_init__(self) -> None:
        if FilterKind(self.kind) is FilterKind.NPulse and self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1 for NPulse")

    @property
    def period(self) -> float:
        """Period of F(x) in x."""
        k = FilterKind(self.kind)
        if k is FilterKind.Ramsey:
            return 2.0 * math.pi
        if k is FilterKind.NPulse:
            return 4.0 * math.pi * self.n_pulses
        return 4.0 * math.pi

    @property
    def peak_x(self) -> float:
        """Location of the principal filter peak in x = omega T."""
        k = FilterKind(self.kind)
        if k is FilterKind.NPulse:
            return math.pi * self.n_pulses
        if k is FilterKind.SpinEcho:
            return math.pi
        return 0.0


def _npulse(x, n: int):
    th = x / (2.0 * n)
    c = np.cos(th)
    num = np.sin(0.5 * x) ** 2 if n % 2 == 0 else np.cos(0.5 * x) ** 2
    pref = 8.0 * np.sin(0.5 * th) ** 4
    with np.errstate(divide="ignore", invalid="ignore"):
        out = pref * num / (c * c)
    pole = np.abs(c) < 1e-7
    # removable limit: |sin(N th)/cos th| or |cos(N th)/cos th| -> N,
    # sin^4(th/2) -> 1/4 at cos th = 0
    out = np.where(pole, 2.0 * n * n, out)
    return out


def filter_function(spec: FilterSpec, x):
    """Filter function F(x), x = omega T (vectorised, x >= 0).

    Ramsey 2 sin^2(x/2); SpinEcho 8 sin^4(x/4); DeerDivided = Ramsey - SpinEcho;
    NPulse 8 sin^4(x/4N) sin^2(x/2)/cos^2(x/2N) for even N, with cos^2(x/2)
    replacing sin^2(x/2) for odd N (so that N = 1 is the spin echo).
    """
    x = np.asarray(x, float)
    if np.any(x < 0):
        raise ValueError("x must be >= 0")
    k = FilterKind(spec.kind)
    if k is FilterKind.Ramsey:
        out = 2.0 * np.sin(0.5 * x) ** 2
    elif k is FilterKind.SpinEcho:
        out = 8.0 * np.sin(0.25 * x) ** 4
    elif k is FilterKind.DeerDivided:
        out = 2.0 * np.sin(0.5 * x) ** 2 - 8.0 * np.sin(0.25 * x) ** 4
    else:
        out = _npulse(x, spec.n_pulses)
    return out if out.ndim else float(out)


@lru_cache(maxsize=64)
def filter_cosine_series(spec: FilterSpec) -> tuple[np.ndarray, np.ndarray]:
    """Exact cosine expansion F(x) = sum_k c_k cos(w_k x) (all filters are even trig polynomials)."""
    P = spec.period
    M = 16 * (spec.n_pulses if FilterKind(spec.kind) is FilterKind.NPulse else 1) + 32
    xs = np.arange(M) * P / M
    coef = np.fft.rfft(filter_function(spec, xs)) / M
    c = coef.real.copy()
    c[1:] *= 2.0
    if M % 2 == 0:
        c[-1] *= 0.5
    w = 2.0 * math.pi * np.arange(c.size) / P
    keep = np.abs(c) > 1e-13 * np.max(np.abs(c))
    return w[keep], c[keep]


def _f_over_x2(spec: FilterSpec, x):
    """F(x)/x^2 from the closed forms (products of sines, so no cancellation); limit at x = 0."""
    x = np.asarray(x, float)
    k = FilterKind(spec.kind)
    at0 = 0.5 if k in (FilterKind.Ramsey, FilterKind.DeerDivided) else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > 0, filter_function(spec, np.abs(x)) / (x * x), at0)
    return out


def chi_from_spectrum(spectrum: Callable[[np.ndarray], np.ndarray], spec: FilterSpec, T: float,
                      rtol: float = 1e-6, n_periods: int = 20,
                      omega_scales: tuple[float, ...] = ()) -> float:
    """chi(T) = (1/pi) int_0^inf S(omega) F(omega T)/omega^2 d omega.

    Computed in x = omega T as (T/pi) int S(x/T) F(x)/x^2 dx.  [0, n_periods P]
    is split into panels of at most pi (plus optional spectral feature scales
    ``omega_scales`` converted to x) and integrated adaptively; the remainder is
    done harmonic by harmonic with Fourier-weighted quadrature on [X, inf).
    """
    if not T > 0:
        raise ValueError("T must be positive")
    P = spec.period
    X = n_periods * P
    S = lambda x: float(spectrum(x / T))  # noqa: E731
    pts = set(np.arange(0.0, X + 1e-12, min(0.5 * P, math.pi)).tolist())
    for om in omega_scales:
        for m in (1e-3, 1e-2, 0.1, 1.0, 10.0):
            xv = om * T * m
            if 0 < xv < X:
                pts.add(xv)
    edges = np.array(sorted(pts))
    total = 0.0
    err = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            for a, b in zip(edges[:-1], edges[1:]):
                # absolute floor relative to the running total: panels where the spectrum has
                # decayed to (sub)normal underflow cannot meet a purely relative target
                v, e = integrate.quad(lambda x: S(x) * float(_f_over_x2(spec, x)), a, b,
                                      epsabs=1e-3 * rtol * abs(total), epsrel=0.1 * rtol, limit=200)
                total += v
                err += e
            w, c = filter_cosine_series(spec)
            # |cos| <= 1 bounds every harmonic by the non-oscillatory tail integral; when even
            # that bound is negligible the (ill-conditioned) Fourier quadrature is skipped
            bound, bound_err = integrate.quad(lambda x: S(x) / (x * x), X, np.inf,
                                              epsabs=0.0, epsrel=0.1 * rtol, limit=200)
            if float(np.sum(np.abs(c))) * bound <= 0.01 * rtol * abs(total):
                w, c = w[:0], c[:0]
                err += bound
            for wk, ck in zip(w, c):
                if wk == 0.0:
                    v, e = bound, bound_err
                else:
                    v, e = integrate.quad(lambda x: S(x) / (x * x), X, np.inf, weight="cos", wvar=wk,
                                          epsabs=1e-14 * max(abs(total), 1e-300), limlst=100)
                total += ck * v
                err += abs(ck) * e
        except integrate.IntegrationWarning as exc:
            raise SpectrumIntegrationError(f"overlap integral failed: {exc}", math.nan, math.inf) from exc
    chi = T / math.pi * total
    if not math.isfinite(chi):
        raise SpectrumIntegrationError("overlap integral diverged", chi, math.inf)
    rel = err / max(abs(total), 1e-300)
    if rel > rtol and abs(total) > 0:
        raise SpectrumIntegrationError("overlap integral inaccurate", chi, rel)
    return chi


def dlnchi_dlnT(spectrum, spec: FilterSpec, T: float, h: float = 1e-3, **kw) -> float:
    """Central-difference logarithmic derivative d ln chi / d ln T."""
    kw.setdefault("rtol", 1e-10)
    cp = chi_from_spectrum(spectrum, spec, T * math.exp(h), **kw)
    cm = chi_from_spectrum(spectrum, spec, T * math.exp(-h), **kw)
    return (math.log(cp) - math.log(cm)) / (2.0 * h)


def coherence_from_spectrum(spectrum, spec: FilterSpec, T: float, **kw) -> float:
    return math.exp(-chi_from_spectrum(spectrum, spec, T, **kw))


def lorentzian_telegraph_spectrum(gamma_deer: float, t1: float) -> Callable[[np.ndarray], np.ndarray]:
    """S(omega) = 4 Gamma^2 T1 / (1 + omega^2 T1^2).

    Through the Ramsey filter this reproduces exp[-(Gamma tau)^2 f(tau, T1)],
    the random-telegraph bath with correlation time T1.
    """

    def S(omega):
        om = np.asarray(omega, float)
        return 4.0 * gamma_deer**2 * t1 / (1.0 + (om * t1) ** 2)

    S.omega_scale = 1.0 / t1  # type: ignore[attr-defined]
    return S


#: Weight of the principal harmonic of the N-pulse filter, int_peak F/x^2 dx -> 4/pi.
DEFAULT_PEAK_WEIGHT = 4.0 / math.pi


def spectral_decompose(curves: dict[int, tuple[np.ndarray, np.ndarray]],
                       peak_weight: float = DEFAULT_PEAK_WEIGHT) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Invert chi ~ peak_weight T S(omega_peak)/pi for every pulse number N.

    ``curves`` maps N -> (T, C).  Returns N -> (omega, S) with omega = N pi / T.
    Points with C <= 0 or C > 1 are rejected.
    """
    out = {}
    for n, (T, C) in curves.items():
        T = np.asarray(T, float)
        C = np.asarray(C, float)
        if np.any(C <= 0) or np.any(C > 1):
            raise ValueError(f"N={n}: coherence values must lie in (0, 1]")
        chi = -np.log(C)
        omega = n * math.pi / T
        out[n] = (omega, math.pi * chi / (peak_weight * T))
    return out
