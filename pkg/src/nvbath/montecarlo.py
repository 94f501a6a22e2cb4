"""Monte Carlo DEER signals for static, hopping, finite-T1 and flip-flop baths.

Phase convention: with a perfect bath pi pulse applied together with the
sensor pi pulse, the sign flips cancel and the accumulated DEER phase of a
shot is  phi = int_0^tau h(t) dt  with  h(t) = sum_i J_i I_i(t)  evaluated on
the *unflipped* bath trajectory.  For a frozen bath this is sum_i J_i I_i tau.

Reproducibility: every random number is drawn from a stream that is a pure
function of (seed, model tag, tau index, block index) or (seed, model tag,
configuration index), and partial sums are reduced in a fixed order, so the
output is a pure function of (seed, plan).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .analytic import universal_exponent_fast, beta_of
from .bath import (
    BathParameters,
    ConfigurationBatch,
    SpinConfiguration,
    default_radius,
    make_rng,
    sample_batch,
    sample_configuration,
)
from .physics import CODATA, PhysicalConstants, SensorGeometry, coupling, dipolar_constant

__all__ = [
    "Dynamics",
    "SimulationPlan",
    "SignalCurve",
    "static_exact",
    "simulate_static",
    "simulate_hopping",
    "simulate_static_with_t1",
    "simulate_flipflop",
    "FlipFlopRun",
    "flipflop_rates",
    "DepthDistribution",
    "stationary_signal",
    "stationary_fraction_survey",
    "infer_stationary_fraction",
    "hopping_plan",
]

TAG_STATIC, TAG_HOPPING, TAG_T1, TAG_FLIPFLOP, TAG_SURVEY = 1, 2, 3, 4, 5


class Dynamics(str, enum.Enum):
    Static = "Static"
    Hopping = "Hopping"
    StaticWithT1 = "StaticWithT1"
    FlipFlop = "FlipFlop"


@dataclass(frozen=True)
class SimulationPlan:
    """What to simulate: tau grid (µs), shots per tau, dynamics, bath and sensor."""

    tau_grid: tuple
    shots: int
    dynamics: Dynamics
    bath: BathParameters
    geom: SensorGeometry
    dt: float | None = None
    constants: PhysicalConstants = CODATA
    lateral_offset: tuple = (0.0, 0.0)
    block_size: int = 4096

    def __post_init__(self) -> None:
        tau = np.asarray(self.tau_grid, float)
        object.__setattr__(self, "tau_grid", tuple(float(t) for t in tau))
        object.__setattr__(self, "dynamics", Dynamics(self.dynamics))
        if tau.ndim != 1 or tau.size == 0:
            raise ValueError("tau_grid must be a non-empty 1D sequence")
        if not (np.all(tau > 0) and np.all(np.diff(tau) > 0)):
            raise ValueError("tau_grid must be strictly increasing and positive")
        if int(self.shots) < 1:
            raise ValueError("shots must be >= 1")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    @property
    def tau(self) -> np.ndarray:
        return np.asarray(self.tau_grid)

    def to_dict(self) -> dict:
        return {
            "tau_grid": list(self.tau_grid),
            "shots": int(self.shots),
            "dynamics": self.dynamics.value,
            "bath": self.bath.to_dict(),
            "depth_d": self.geom.depth_d,
            "tilt_theta": self.geom.tilt_theta,
            "dt": self.dt,
            "lateral_offset": list(self.lateral_offset),
        }


@dataclass
class SignalCurve:
    """S(tau) with per-point standard errors."""

    tau: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tau = np.asarray(self.tau, float)
        self.value = np.asarray(self.value, float)
        self.stderr = np.asarray(self.stderr, float)
        if not (self.tau.shape == self.value.shape == self.stderr.shape):
            raise ValueError("tau, value and stderr must have equal length")
        if np.any(self.stderr < 0):
            raise ValueError("stderr must be non-negative")

    def __len__(self) -> int:
        return self.tau.size

    def select(self, mask) -> "SignalCurve":
        return SignalCurve(self.tau[mask], self.value[mask], self.stderr[mask], dict(self.meta))

    def to_csv(self, path) -> None:
        from .dataio import save_curve

        save_curve(self, path)

    def to_json(self) -> str:
        import json

        return json.dumps({"tau": self.tau.tolist(), "value": self.value.tolist(),
                           "stderr": self.stderr.tolist(), "meta": self.meta}, sort_keys=True)


def hopping_plan(depth: float, sigma: float, tau, shots: int, **kw) -> SimulationPlan:
    """Convenience constructor using the adaptive default disk radius."""
    bath = BathParameters(sigma=sigma, radius_R=kw.pop("radius_R", default_radius(depth, sigma)))
    return SimulationPlan(tuple(np.asarray(tau, float)), shots, Dynamics.Hopping, bath,
                          SensorGeometry(depth, **({"tilt_theta": kw.pop("tilt_theta")} if "tilt_theta" in kw else {})),
                          **kw)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _relative_polar(r, alpha, offset):
    if offset == (0.0, 0.0) or offset == [0.0, 0.0]:
        return r, alpha
    x = r * np.cos(alpha) - offset[0]
    y = r * np.sin(alpha) - offset[1]
    return np.hypot(x, y), np.arctan2(y, x)


def _config_couplings(config: SpinConfiguration, plan: SimulationPlan) -> np.ndarray:
    r, a = _relative_polar(config.r, config.alpha, tuple(plan.lateral_offset))
    return np.atleast_1d(coupling(r, a, plan.geom, plan.constants)) if len(config) else np.zeros(0)


def _blocks(shots: int, size: int):
    for start in range(0, shots, size):
        yield start // size, min(size, shots - start)


class _Accumulator:
    """Fixed-order accumulation of mean and variance of per-shot cos(phase)."""

    def __init__(self, n_tau: int):
        self.s1 = np.zeros(n_tau)
        self.s2 = np.zeros(n_tau)
        self.n = np.zeros(n_tau, dtype=np.int64)

    def add(self, i: int, c: np.ndarray) -> None:
        self.s1[i] += math.fsum(c)
        self.s2[i] += math.fsum(c * c)
        self.n[i] += c.size

    def curve(self, tau, meta) -> SignalCurve:
        n = self.n.astype(float)
        mean = self.s1 / n
        var = np.where(n > 1, (self.s2 - n * mean * mean) / np.maximum(n - 1, 1), np.inf)
        stderr = np.sqrt(np.maximum(var, 0.0) / n)
        return SignalCurve(np.asarray(tau, float), np.clip(mean, -1.0, 1.0), stderr, meta)


def _random_signs(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.integers(0, 2, size=shape, dtype=np.int8) * 2 - 1).astype(float)


# ---------------------------------------------------------------------------
# static bath
# ---------------------------------------------------------------------------

def static_exact(config: SpinConfiguration, plan: SimulationPlan) -> SignalCurve:
    """Exact average over independent +-1 states: prod_i cos(J_i tau)."""
    J = _config_couplings(config, plan)
    tau = plan.tau
    val = np.prod(np.cos(np.outer(tau, J)), axis=1) if J.size else np.ones_like(tau)
    return SignalCurve(tau, val, np.zeros_like(tau), {"model": "static_exact"})


def simulate_static(config: SpinConfiguration, plan: SimulationPlan, seed: int) -> SignalCurve:
    """Average cos(sum_i J_i I_i tau) over random +-1 states (fresh states per shot)."""
    J = _config_couplings(config, plan)
    tau = plan.tau
    acc = _Accumulator(tau.size)
    for i, t in enumerate(tau):
        for b, nb in _blocks(plan.shots, plan.block_size):
            rng = make_rng(seed, TAG_STATIC, i, b)
            if J.size:
                ph = (_random_signs(rng, (nb, J.size)) @ J) * t
                acc.add(i, np.cos(ph))
            else:
                acc.add(i, np.ones(nb))
    return acc.curve(tau, {"model": "static", "seed": int(seed), "n_spins": int(J.size)})


# ---------------------------------------------------------------------------
# hopping bath (fresh configuration each shot)
# ---------------------------------------------------------------------------

def _batch_couplings(batch: ConfigurationBatch, plan: SimulationPlan) -> np.ndarray:
    r, a = _relative_polar(batch.r, batch.alpha, tuple(plan.lateral_offset))
    return np.asarray(coupling(r, a, plan.geom, plan.constants), float).reshape(-1)


def simulate_hopping(plan: SimulationPlan, seed: int) -> SignalCurve:
    """Configurational average: positions and states redrawn every shot.

    Each tau uses its own independent shots.
    """
    tau = plan.tau
    acc = _Accumulator(tau.size)
    for i, t in enumerate(tau):
        for b, nb in _blocks(plan.shots, plan.block_size):
            rng = make_rng(seed, TAG_HOPPING, i, b)
            batch = sample_batch(plan.bath, nb, rng)
            if batch.r.size == 0:
                acc.add(i, np.ones(nb))
                continue
            J = _batch_couplings(batch, plan)
            s = _random_signs(rng, J.size)
            h = np.bincount(batch.owner, weights=J * s, minlength=nb)
            acc.add(i, np.cos(h * t))
    return acc.curve(tau, {"model": "hopping", "seed": int(seed), "plan": plan.to_dict()})


# ---------------------------------------------------------------------------
# static positions, telegraph (T1) spin flips
# ---------------------------------------------------------------------------

def _telegraph_integrals(rng: np.random.Generator, n: int, tau: float, rate: float) -> np.ndarray:
    """int_0^tau I(t) dt for n independent +-1 telegraph processes flipping at ``rate``.

    Exact event-time sampling: the flip count is Poisson(rate tau) and, given
    the count, the flip times are uniform order statistics.
    """
    I0 = _random_signs(rng, n)
    if not (rate > 0) or math.isinf(1.0 / rate):
        return I0 * tau
    counts = rng.poisson(rate * tau, size=n)
    total = int(counts.sum())
    if total == 0:
        return I0 * tau
    owner = np.repeat(np.arange(n), counts)
    times = tau * rng.random(total)
    order = np.lexsort((times, owner))
    times = times[order]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(total) - np.repeat(starts, counts)
    sign = np.where(rank % 2 == 0, 1.0, -1.0)
    # int_0^tau I dt = I0 [ (-1)^n tau + 2 sum_j (-1)^(j-1) t_j ]
    inner = np.bincount(owner, weights=2.0 * sign * times, minlength=n)
    return I0 * (np.where(counts % 2 == 0, 1.0, -1.0) * tau + inner)


def simulate_static_with_t1(config: SpinConfiguration, plan: SimulationPlan, t1: float, seed: int) -> SignalCurve:
    """Fixed positions; each spin is a telegraph process flipping at rate 1/(2 T1)."""
    if not t1 > 0:
        raise ValueError("t1 must be positive")
    J = _config_couplings(config, plan)
    tau = plan.tau
    rate = 0.0 if math.isinf(t1) else 1.0 / (2.0 * t1)
    acc = _Accumulator(tau.size)
    for i, t in enumerate(tau):
        for b, nb in _blocks(plan.shots, plan.block_size):
            rng = make_rng(seed, TAG_T1, i, b)
            if J.size == 0:
                acc.add(i, np.ones(nb))
                continue
            integ = _telegraph_integrals(rng, nb * J.size, t, rate).reshape(nb, J.size)
            acc.add(i, np.cos(integ @ J))
    return acc.curve(tau, {"model": "static_t1", "seed": int(seed), "t1": t1})


# ---------------------------------------------------------------------------
# incoherent flip-flops between static spins
# ---------------------------------------------------------------------------

def flipflop_rates(config: SpinConfiguration, geom: SensorGeometry, gamma: float,
                   constants: PhysicalConstants = CODATA):
    """Pairwise exchange rates omega_ij^2/gamma with omega_ij = K |1 - 3cos^2 theta_ij| / r_ij^3.

    Returns (i, j, rate) arrays over all pairs i < j.
    """
    K = dipolar_constant(constants)
    xy = config.xy
    n = len(config)
    ii, jj = np.triu_indices(n, 1)
    d = xy[jj] - xy[ii]
    rij = np.hypot(d[:, 0], d[:, 1])
    cos_t = d[:, 0] * math.sin(geom.tilt_theta) / rij
    omega = K * np.abs(1.0 - 3.0 * cos_t * cos_t) / rij**3
    return ii, jj, omega * omega / gamma


@numba.njit(cache=True)
def _ff_events(J, pi, pj, cum, n_pairs, taus, shots, seed):
    np.random.seed(seed)
    n = J.size
    nt = taus.size
    s1 = np.zeros(nt)
    s2 = np.zeros(nt)
    state = np.empty(n)
    lam = cum[-1] if cum.size else 0.0
    for _ in range(shots):
        h = 0.0
        for k in range(n):
            state[k] = 1.0 if np.random.random() < 0.5 else -1.0
            h += J[k] * state[k]
        t = 0.0
        phase = 0.0
        ti = 0
        while ti < nt:
            tnext = t + np.random.exponential(1.0 / lam) if lam > 0 else np.inf
            while ti < nt and taus[ti] <= tnext:
                c = math.cos(phase + h * (taus[ti] - t))
                s1[ti] += c
                s2[ti] += c * c
                ti += 1
            if ti >= nt:
                break
            phase += h * (tnext - t)
            t = tnext
            e = np.searchsorted(cum, np.random.random() * lam, side="right")
            if e >= cum.size:
                e = cum.size - 1
            if e < n_pairs:
                a = pi[e]
                b = pj[e]
                if state[a] != state[b]:
                    h += 2.0 * (J[a] * state[b] + J[b] * state[a])  # after swap minus before
                    tmp = state[a]
                    state[a] = state[b]
                    state[b] = tmp
            else:
                k = e - n_pairs
                h -= 2.0 * J[k] * state[k]
                state[k] = -state[k]
    return s1, s2


@numba.njit(cache=True)
def _ff_stepped(J, pi, pj, p_pair, p_flip, dt, n_steps_at, shots, seed):
    np.random.seed(seed)
    n = J.size
    nt = n_steps_at.size
    s1 = np.zeros(nt)
    s2 = np.zeros(nt)
    state = np.empty(n)
    total_steps = n_steps_at[-1] if nt else 0
    for _ in range(shots):
        h = 0.0
        for k in range(n):
            state[k] = 1.0 if np.random.random() < 0.5 else -1.0
            h += J[k] * state[k]
        phase = 0.0
        ti = 0
        for step in range(total_steps + 1):
            while ti < nt and n_steps_at[ti] == step:
                c = math.cos(phase)
                s1[ti] += c
                s2[ti] += c * c
                ti += 1
            if step == total_steps:
                break
            phase += h * dt
            for e in range(pi.size):
                if np.random.random() < p_pair[e]:
                    a = pi[e]
                    b = pj[e]
                    if state[a] != state[b]:
                        h += 2.0 * (J[a] * state[b] + J[b] * state[a])
                        tmp = state[a]
                        state[a] = state[b]
                        state[b] = tmp
            for k in range(n):
                if np.random.random() < p_flip:
                    h -= 2.0 * J[k] * state[k]
                    state[k] = -state[k]
    return s1, s2


@dataclass
class FlipFlopRun:
    configs: list
    curves: list
    capped_pairs: list


def _stream_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1, dtype=np.uint32)[0])


def simulate_flipflop(plan: SimulationPlan, seed: int, n_configs: int = 100,
                      rate_cap: float | None = None) -> FlipFlopRun:
    """Incoherent flip-flop + T1 dynamics on ~100 fixed random configurations.

    With ``plan.dt`` set, the stepped Bernoulli scheme with p_ij = w_ij dt is
    used and every probability must be < 1.  Otherwise the same Markov jump
    process is simulated exactly with event-driven (Gillespie) sampling; pair
    rates beyond the motional-narrowing scale max(1000/µs, 100 dJ^2 tau_max)
    are capped there (see ``capped_pairs``).  Every shot's trajectory is
    sampled at all tau of the grid.
    """
    bath = plan.bath
    if bath.disorder_gamma is None or not bath.disorder_gamma > 0:
        raise ValueError("flip-flop dynamics needs bath.disorder_gamma > 0")
    tau = plan.tau
    t1 = bath.t1_bath
    p_rate = 0.0 if math.isinf(t1) else 1.0 / (2.0 * t1)
    configs, curves, capped = [], [], []
    for c in range(n_configs):
        cfg = sample_configuration(bath, make_rng(seed, TAG_FLIPFLOP, c, 0))
        J = _config_couplings(cfg, plan)
        ii, jj, w = flipflop_rates(cfg, plan.geom, bath.disorder_gamma, plan.constants)
        s = _stream_seed(seed, TAG_FLIPFLOP, c, 1)
        if plan.dt is not None:
            p = w * plan.dt
            if p.size and p.max() >= 1.0:
                raise ValueError(f"dt={plan.dt} gives a pair probability {p.max():.3g} >= 1")
            if p_rate * plan.dt >= 1.0:
                raise ValueError("dt too large for the T1 flip probability")
            steps = np.rint(tau / plan.dt).astype(np.int64)
            s1, s2 = _ff_stepped(J, ii.astype(np.int64), jj.astype(np.int64), p, p_rate * plan.dt,
                                 plan.dt, steps, int(plan.shots), s)
            ncap = 0
        else:
            dj2 = (J[ii] - J[jj]) ** 2 if w.size else w
            cap = np.maximum(1000.0, 100.0 * dj2 * tau[-1]) if rate_cap is None else np.full(w.size, rate_cap)
            ncap = int(np.sum(w > cap))
            w = np.minimum(w, cap)
            rates = np.concatenate([w, np.full(J.size, p_rate)])
            cum = np.cumsum(rates)
            s1, s2 = _ff_events(J, ii.astype(np.int64), jj.astype(np.int64), cum, w.size, tau,
                                int(plan.shots), s)
        n = float(plan.shots)
        mean = s1 / n
        var = (s2 - n * mean * mean) / max(n - 1.0, 1.0)
        curves.append(SignalCurve(tau, np.clip(mean, -1, 1), np.sqrt(np.maximum(var, 0) / n),
                                  {"model": "flipflop", "config": c, "n_spins": len(cfg)}))
        configs.append(cfg)
        capped.append(ncap)
    return FlipFlopRun(configs, curves, capped)


# ---------------------------------------------------------------------------
# stationary + hopping mixture survey
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DepthDistribution:
    """Uniform depth distribution on [low, high] nm."""

    low: float = 5.0
    high: float = 15.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=n)


def stationary_signal(J_stationary: np.ndarray, sigma_hop: float, depth: float, tau: np.ndarray,
                      constants: PhysicalConstants = CODATA) -> np.ndarray:
    """DEER signal with fixed spins J_stationary plus a hopping background of density sigma_hop.

    The fixed spins contribute prod cos(J tau) (state-averaged); the hopping
    spins the configurational factor exp[sigma_hop d^2 I(beta)].
    """
    tau = np.asarray(tau, float)
    hop = np.exp(sigma_hop * depth**2 * universal_exponent_fast(beta_of(tau, depth, constants)))
    if J_stationary.size:
        hop = hop * np.prod(np.cos(np.outer(tau, J_stationary)), axis=1)
    return hop


@dataclass
class SurveyTrials:
    depths: np.ndarray
    J: list
    u: list


def _survey_trials(sigma: float, depths: DepthDistribution, trials: int, seed: int,
                   geom_tilt: float, constants: PhysicalConstants) -> SurveyTrials:
    rng = make_rng(seed, TAG_SURVEY)
    ds = depths.sample(rng, trials)
    Js, us = [], []
    for k, d in enumerate(ds):
        bath = BathParameters(sigma=sigma, radius_R=default_radius(d, sigma))
        r_k = make_rng(seed, TAG_SURVEY, k)
        n = int(r_k.poisson(bath.mean_count))
        r = bath.radius_R * np.sqrt(r_k.random(n))
        a = 2.0 * math.pi * r_k.random(n)
        Js.append(np.asarray(coupling(r, a, SensorGeometry(d, geom_tilt), constants), float).reshape(-1))
        us.append(r_k.random(n))
    return SurveyTrials(ds, Js, us)


def stationary_fraction_survey(fraction: float, sigma: float, depth_distribution: DepthDistribution | None = None,
                               trials: int = 2000, seed: int = 0, tau: np.ndarray | None = None,
                               threshold: float = -0.1, tilt_theta: float | None = None,
                               constants: PhysicalConstants = CODATA, _cache: SurveyTrials | None = None) -> float:
    """Fraction of sensors whose DEER signal dips below ``threshold``.

    Each trial draws a depth and a full-density configuration once; a spin is
    stationary when its private uniform variate is below ``fraction`` (so the
    stationary sets are nested in ``fraction``), and the rest hop.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    from .physics import MAGIC_ANGLE

    dd = depth_distribution or DepthDistribution()
    tau = np.linspace(0.05, 20.0, 400) if tau is None else np.asarray(tau, float)
    tilt = MAGIC_ANGLE if tilt_theta is None else tilt_theta
    tr = _cache or _survey_trials(sigma, dd, trials, seed, tilt, constants)
    strong = 0
    for d, J, u in zip(tr.depths, tr.J, tr.u):
        Js = J[u < fraction]
        if Js.size == 0:
            continue
        S = stationary_signal(Js, (1.0 - fraction) * sigma, d, tau, constants)
        strong += bool(np.min(S) < threshold)
    return strong / len(tr.depths)


def infer_stationary_fraction(target_rate: float, sigma: float, depth_distribution: DepthDistribution | None = None,
                              trials: int = 2000, seed: int = 0, tol: float = 1e-3, **kw) -> float:
    """Smallest stationary fraction whose strongly-coupled rate reaches ``target_rate`` (bisection)."""
    from .physics import MAGIC_ANGLE

    dd = depth_distribution or DepthDistribution()
    cache = _survey_trials(sigma, dd, trials, seed, kw.get("tilt_theta") or MAGIC_ANGLE,
                           kw.get("constants", CODATA))
    rate: Callable[[float], float] = lambda f: stationary_fraction_survey(  # noqa: E731
        f, sigma, dd, trials, seed, _cache=cache, **kw)
    lo, hi = 0.0, 1.0
    if rate(hi) < target_rate:
        return math.inf
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rate(mid) >= target_rate:
            hi = mid
        else:
            lo = mid
    return hi
