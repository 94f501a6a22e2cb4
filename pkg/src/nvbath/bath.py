"""Random 2D surface-spin configurations and their spatial statistics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BathParameters",
    "SpinConfiguration",
    "ConfigurationBatch",
    "default_radius",
    "make_rng",
    "sample_configuration",
    "sample_batch",
    "nn_pdf",
    "nn_mean",
    "nearest_distances",
]

DEFAULT_MAX_SPINS = 2_000_000


def default_radius(depth: float, sigma: float) -> float:
    """Adaptive disk radius max(25 nm, 5 d, 5/(2 sqrt(sigma)))."""
    r = max(25.0, 5.0 * depth)
    if sigma > 0:
        r = max(r, 5.0 / (2.0 * math.sqrt(sigma)))
    return r


@dataclass(frozen=True)
class BathParameters:
    """Surface-spin bath description.

    sigma : areal density (nm^-2)
    radius_R : simulation disk radius (nm)
    t1_bath : spin-lattice time (µs); ``inf`` means no relaxation
    disorder_gamma : on-site disorder (rad/µs); ``None`` disables flip-flops
    stationary_fraction : fraction of spins that never hop
    """

    sigma: float
    radius_R: float
    t1_bath: float = math.inf
    disorder_gamma: float | None = None
    stationary_fraction: float = 0.0
    max_spins: int = DEFAULT_MAX_SPINS

    def __post_init__(self) -> None:
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be >= 0, got {self.sigma!r}")
        if not (self.radius_R > 0 and math.isfinite(self.radius_R)):
            raise ValueError(f"radius_R must be > 0, got {self.radius_R!r}")
        if not (0.0 <= self.stationary_fraction <= 1.0):
            raise ValueError("stationary_fraction must lie in [0, 1]")
        if not self.t1_bath > 0:
            raise ValueError("t1_bath must be > 0")
        if self.disorder_gamma is not None and not self.disorder_gamma > 0:
            raise ValueError("disorder_gamma must be > 0 when given")

    @property
    def mean_count(self) -> float:
        return self.sigma * math.pi * self.radius_R**2

    @classmethod
    def for_depth(cls, sigma: float, depth: float, **kw) -> "BathParameters":
        return cls(sigma=sigma, radius_R=default_radius(depth, sigma), **kw)

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "radius_R": self.radius_R,
            "t1_bath": None if math.isinf(self.t1_bath) else self.t1_bath,
            "disorder_gamma": self.disorder_gamma,
            "stationary_fraction": self.stationary_fraction,
        }


@dataclass(frozen=True)
class SpinConfiguration:
    """A concrete bath realisation (polar positions, +-1 states, stationary flags)."""

    r: np.ndarray
    alpha: np.ndarray
    states: np.ndarray
    stationary_mask: np.ndarray
    radius_R: float = math.inf

    def __post_init__(self) -> None:
        n = len(self.r)
        if not (len(self.alpha) == len(self.states) == len(self.stationary_mask) == n):
            raise ValueError("positions, states and stationary_mask must have equal length")
        if n and np.max(self.r) > self.radius_R:
            raise ValueError("spin outside the simulation disk")
        if n and not np.all(np.abs(self.states) == 1):
            raise ValueError("states must be +-1")

    def __len__(self) -> int:
        return len(self.r)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.r * np.cos(self.alpha), self.r * np.sin(self.alpha)])

    def to_json(self) -> str:
        return json.dumps(
            {
                "radius_R": None if math.isinf(self.radius_R) else self.radius_R,
                "r": self.r.tolist(),
                "alpha": self.alpha.tolist(),
                "states": [int(s) for s in self.states],
                "stationary_mask": [bool(b) for b in self.stationary_mask],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SpinConfiguration":
        d = json.loads(text)
        R = d.get("radius_R")
        return cls(
            r=np.asarray(d["r"], dtype=float),
            alpha=np.asarray(d["alpha"], dtype=float),
            states=np.asarray(d["states"], dtype=np.int8),
            stationary_mask=np.asarray(d["stationary_mask"], dtype=bool),
            radius_R=math.inf if R is None else float(R),
        )

    @classmethod
    def from_xy(cls, x, y, states=None, radius_R: float = math.inf) -> "SpinConfiguration":
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        n = len(x)
        st = np.ones(n, np.int8) if states is None else np.asarray(states, np.int8)
        return cls(np.hypot(x, y), np.arctan2(y, x), st, np.zeros(n, bool), radius_R)


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Counter-style stream: the generator is a pure function of (seed, *keys)."""
    if isinstance(seed, np.random.Generator):
        if keys:
            raise ValueError("keys cannot be combined with an existing Generator")
        return seed
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        base = list(seed.spawn_key)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=base + list(keys))))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def _check_count(params: BathParameters, n: int) -> None:
    if params.mean_count > params.max_spins or n > params.max_spins:
        raise OverflowError(
            f"expected spin count {params.mean_count:.3g} exceeds max_spins={params.max_spins}"
        )


def sample_configuration(params: BathParameters, seed, index: int = 0) -> SpinConfiguration:
    """Draw one Poisson configuration on the disk of radius ``params.radius_R``."""
    _check_count(params, 0)
    rng = make_rng(seed, index) if not isinstance(seed, np.random.Generator) else seed
    n = int(rng.poisson(params.mean_count))
    _check_count(params, n)
    r = params.radius_R * np.sqrt(rng.random(n))
    alpha = 2.0 * math.pi * rng.random(n)
    states = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    stationary = rng.random(n) < params.stationary_fraction
    return SpinConfiguration(r, alpha, states, stationary, params.radius_R)


@dataclass
class ConfigurationBatch:
    """Many configurations stored flat; spins of shot ``k`` are ``owner == k``."""

    counts: np.ndarray
    r: np.ndarray
    alpha: np.ndarray
    owner: np.ndarray = field(repr=False)

    @property
    def n_shots(self) -> int:
        return len(self.counts)


def sample_batch(params: BathParameters, n_shots: int, rng: np.random.Generator) -> ConfigurationBatch:
    """Vectorised draw of ``n_shots`` independent configurations (positions only)."""
    _check_count(params, 0)
    counts = rng.poisson(params.mean_count, size=n_shots)
    total = int(counts.sum())
    r = params.radius_R * np.sqrt(rng.random(total))
    alpha = 2.0 * math.pi * rng.random(total)
    owner = np.repeat(np.arange(n_shots), counts)
    return ConfigurationBatch(counts, r, alpha, owner)


def nn_pdf(r, sigma: float):
    """Nearest-neighbour distance density w(r) = 2 pi sigma r exp(-pi sigma r^2)."""
    r = np.asarray(r, dtype=float)
    return 2.0 * math.pi * sigma * r * np.exp(-math.pi * sigma * r * r)


def nn_mean(sigma: float) -> float:
    """Mean nearest-neighbour distance 1/(2 sqrt(sigma))."""
    return 0.5 / math.sqrt(sigma)


def nearest_distances(batch: ConfigurationBatch, offset: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Distance from the point ``offset`` in the plane to the nearest spin, per shot.

    Empty shots give ``inf``.
    """
    x = batch.r * np.cos(batch.alpha) - offset[0]
    y = batch.r * np.sin(batch.alpha) - offset[1]
    d = np.hypot(x, y)
    out = np.full(batch.n_shots, np.inf)
    np.minimum.at(out, batch.owner, d)
    return out
