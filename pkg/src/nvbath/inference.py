"""Curve fitting, MCMC posteriors, model comparison and log-log diagnostics."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special

from .analytic import beta_of, universal_exponent_fast
from .montecarlo import SignalCurve
from .physics import CODATA, PhysicalConstants

__all__ = [
    "FitError",
    "StretchedExpFit",
    "stretched_exp",
    "fit_stretched",
    "LogLogData",
    "loglog_transform",
    "weighted_line",
    "loglog_slope",
    "HingeFit",
    "fit_hinge",
    "ChainConfig",
    "PosteriorChain",
    "metropolis",
    "split_rhat",
    "BiExpPosterior",
    "biexp",
    "fit_biexp_mcmc",
    "JointModel",
    "JointPosterior",
    "fit_joint",
    "ICResult",
    "ModelComparison",
    "waic",
    "psis_loo",
    "psislw",
    "compare_loglik",
    "model_compare",
    "cutoff_stability",
]


class FitError(RuntimeError):
    def __init__(self, message: str, best_cost: float = math.nan):
        super().__init__(f"{message} (best cost {best_cost:.6g})")
        self.best_cost = best_cost


# ---------------------------------------------------------------------------
# single stretched exponential
# ---------------------------------------------------------------------------

def stretched_exp(tau, a, gamma, n):
    return a * np.exp(-np.power(gamma * np.asarray(tau, float), n))


@dataclass
class StretchedExpFit:
    a: float
    gamma: float
    n: float
    covariance: np.ndarray
    ci68: dict
    chi2: float
    dof: int
    fixed_n: bool = False

    @property
    def stderr(self) -> dict:
        return {k: 0.5 * (hi - lo) for k, (lo, hi) in self.ci68.items()}

    def predict(self, tau):
        return stretched_exp(tau, self.a, self.gamma, self.n)

    def to_dict(self) -> dict:
        return {"a": self.a, "gamma": self.gamma, "n": self.n, "chi2": self.chi2, "dof": self.dof,
                "fixed_n": self.fixed_n, "ci68": {k: list(v) for k, v in self.ci68.items()},
                "covariance": np.asarray(self.covariance).tolist()}


_A_MAX = 1.5
_N_MAX = 4.0


def _sig(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _logit(p):
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p / (1.0 - p))


def _weights(curve: SignalCurve) -> np.ndarray:
    s = np.asarray(curve.stderr, float)
    pos = s[(s > 0) & np.isfinite(s)]
    if pos.size == 0:
        return np.ones_like(s)
    return np.where((s > 0) & np.isfinite(s), s, pos.min())


def fit_stretched(curve: SignalCurve, fix_n: float | None = None, n_min: float = 0.0,
                  fix_a: float | None = None, max_starts: int | None = None) -> StretchedExpFit:
    """Weighted least-squares fit of a exp[-(Gamma tau)^n].

    Parameters are mapped to unconstrained coordinates (a in (0, 1.5],
    Gamma > 0, n in (n_min, 4]) and optimised with Levenberg--Marquardt from a
    grid of starts (8 log-spaced Gamma x n in {0.5, 1, 2}).  ``n_min = 1``
    gives the noise-spectral-density constrained model class.
    """
    tau = np.asarray(curve.tau, float)
    y = np.asarray(curve.value, float)
    w = _weights(curve)
    if tau.size < 5 or not np.all(np.isfinite(y)):
        raise FitError("need >= 5 finite points")
    if fix_n is not None and not (0 < fix_n <= _N_MAX):
        raise ValueError("fix_n must lie in (0, 4]")
    n_lo = float(n_min)

    def unpack(p):
        a = fix_a if fix_a is not None else _A_MAX * _sig(p[0])
        g = math.exp(min(max(p[1], -700.0), 700.0))
        n = fix_n if fix_n is not None else n_lo + (_N_MAX - n_lo) * _sig(p[2])
        return a, g, n

    def resid(p):
        a, g, n = unpack(p)
        return (stretched_exp(tau, a, g, n) - y) / w

    tpos = tau[tau > 0]
    g_grid = np.geomspace(0.3 / tpos.max(), 3.0 / tpos.min(), 8)
    n_starts = [fix_n] if fix_n is not None else [max(v, n_lo + 0.05) for v in (0.5, 1.0, 2.0)]
    starts = [(g, n) for n in n_starts for g in g_grid]
    if max_starts:
        starts = starts[:max_starts]
    best = None
    for g0, n0 in starts:
        p0 = [ _logit(min(max(y[0], 0.05), 1.45) / _A_MAX), math.log(g0)]
        if fix_n is None:
            p0.append(_logit((n0 - n_lo) / (_N_MAX - n_lo)))
        try:
            r = optimize.least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=4000)
        except (ValueError, FloatingPointError, OverflowError):
            continue
        if np.isfinite(r.cost) and (best is None or r.cost < best.cost - 1e-12 * max(best.cost, 1.0)):
            best = r
    if best is None:
        raise FitError("all starts failed")
    a, g, n = unpack(best.x)
    # covariance in natural parameters from the analytic Jacobian
    E = np.exp(-np.power(g * tau, n))
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(tau > 0, np.log(g * tau), 0.0)
        gt_n = np.power(g * tau, n)
    cols, names = [], []
    if fix_a is None:
        cols.append(E / w)
        names.append("a")
    cols.append(-a * E * n * gt_n / g / w)
    names.append("gamma")
    if fix_n is None:
        cols.append(-a * E * gt_n * lg / w)
        names.append("n")
    Jm = np.column_stack(cols)
    try:
        cov_r = np.linalg.pinv(Jm.T @ Jm)
    except np.linalg.LinAlgError:
        cov_r = np.full((len(names), len(names)), np.inf)
    full = {"a": a, "gamma": g, "n": n}
    cov = np.zeros((3, 3))
    idx = {k: i for i, k in enumerate(["a", "gamma", "n"])}
    for i, ki in enumerate(names):
        for j, kj in enumerate(names):
            cov[idx[ki], idx[kj]] = cov_r[i, j]
    ci = {k: (full[k] - math.sqrt(max(cov[idx[k], idx[k]], 0.0)), full[k] + math.sqrt(max(cov[idx[k], idx[k]], 0.0)))
          for k in full}
    chi2 = float(2.0 * best.cost)
    return StretchedExpFit(float(a), float(g), float(n), cov, ci, chi2, int(tau.size - len(names)),
                           fixed_n=fix_n is not None)


# ---------------------------------------------------------------------------
# log-log transform and slope diagnostics
# ---------------------------------------------------------------------------

@dataclass
class LogLogData:
    tau: np.ndarray | None
    g: np.ndarray
    sigma_g: np.ndarray
    kept: np.ndarray
    rejected: dict = field(default_factory=dict)


def loglog_transform(S, sigma_S, cutoff: float = 0.1, tau=None) -> LogLogData:
    """g = log10 ln(1/S), sigma_g = sigma_S / (ln 10 * S * |ln S|).

    Points with S <= cutoff are dropped; points with S >= 1 cannot be
    transformed and are rejected.  Every excluded index is itemised in
    ``rejected`` with its reason.
    """
    S = np.asarray(S, float)
    sS = np.asarray(sigma_S, float)
    rejected = {}
    keep = np.ones(S.size, bool)
    for i, v in enumerate(S):
        if not np.isfinite(v) or v >= 1.0:
            keep[i] = False
            rejected[i] = "S >= 1 (log of non-positive)"
        elif v <= cutoff:
            keep[i] = False
            rejected[i] = f"below cutoff {cutoff}"
    Sk = S[keep]
    lnS = np.log(Sk)
    g = np.log10(-lnS)
    sg = np.abs(sS[keep] / (math.log(10.0) * Sk * lnS))
    t = None if tau is None else np.asarray(tau, float)[keep]
    return LogLogData(t, g, sg, keep, rejected)


def weighted_line(x, y, sy=None):
    """Weighted linear regression y = m x + b; returns (m, b, cov)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    wts = np.ones_like(x) if sy is None else 1.0 / np.asarray(sy, float) ** 2
    A = np.column_stack([x, np.ones_like(x)])
    Aw = A * wts[:, None]
    cov = np.linalg.inv(A.T @ Aw)
    m, b = cov @ (Aw.T @ y)
    return float(m), float(b), cov


def loglog_slope(curve: SignalCurve, tmin: float = 0.0, tmax: float = math.inf,
                 min_snr: float = 0.0):
    """Weighted slope of ln ln(1/S) versus ln tau over [tmin, tmax].

    Points whose ln(1/S) is not resolved (S <= min_snr * stderr or S >= 1) are
    excluded.  Returns (slope, intercept, slope_stderr, n_points_used).
    """
    t, S, sS = curve.tau, curve.value, curve.stderr
    m = (t >= tmin) & (t <= tmax) & (S < 1) & (S > 0) & (S > min_snr * sS)
    if m.sum() < 2:
        raise FitError("fewer than two usable points in window")
    y = np.log(-np.log(S[m]))
    sy = np.abs(sS[m] / (S[m] * np.log(S[m])))
    sy = np.where(sy > 0, sy, np.min(sy[sy > 0]) if np.any(sy > 0) else 1.0)
    k, b, cov = weighted_line(np.log(t[m]), y, sy)
    return k, b, math.sqrt(cov[0, 0]), int(m.sum())


@dataclass
class HingeFit:
    knee: float          # knee location in x units (e.g. ln tau)
    slope_left: float
    slope_right: float
    intercept: float     # y at the knee
    chi2: float
    knee_stderr: float


def _hinge_design(x, k):
    return np.column_stack([np.ones_like(x), np.minimum(x - k, 0.0), np.maximum(x - k, 0.0)])


def fit_hinge(x, y, sy=None, n_grid: int = 400) -> HingeFit:
    """Continuous two-segment (change-point) linear fit; knee by profile least squares."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    w = np.ones_like(x) if sy is None else 1.0 / np.asarray(sy, float) ** 2

    def profile(k):
        A = _hinge_design(x, k)
        Aw = A * w[:, None]
        coef, *_ = np.linalg.lstsq(Aw.T @ A, Aw.T @ y, rcond=None)
        r = y - A @ coef
        return float(np.sum(w * r * r)), coef

    xs = np.sort(x)
    grid = np.linspace(xs[1], xs[-2], n_grid)
    costs = np.array([profile(k)[0] for k in grid])
    i = int(np.argmin(costs))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = optimize.minimize_scalar(lambda k: profile(k)[0], bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    k = float(res.x)
    chi2, coef = profile(k)
    # curvature of the profile gives a knee uncertainty (delta chi2 = 1)
    h = 1e-3 * (xs[-1] - xs[0])
    c2 = (profile(k + h)[0] - 2 * chi2 + profile(k - h)[0]) / h**2
    kse = math.sqrt(2.0 / c2) if c2 > 0 else math.inf
    return HingeFit(k, float(coef[1]), float(coef[2]), float(coef[0]), chi2, kse)


# ---------------------------------------------------------------------------
# MCMC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    n_iter: int = 8000        # per chain, first half is burn-in/adaptation
    seed: int = 0
    adapt_every: int = 100
    thin: int = 1
    init_spread: float = 1.0  # multiples of the proposal scale used to disperse starts


@dataclass
class PosteriorChain:
    names: tuple
    samples: np.ndarray          # (chains, draws, dim), post burn-in
    acceptance: float
    rhat: dict
    converged: bool
    pointwise_loglik: np.ndarray | None = None   # (chains*draws, n_points)

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.flat()[:, self.names.index(name)]

    def mean(self) -> dict:
        return dict(zip(self.names, self.flat().mean(axis=0)))

    def interval(self, name: str, prob: float = 0.68):
        q = 0.5 * (1 - prob)
        return tuple(np.quantile(self[name], [q, 1 - q]))

    def summary(self) -> dict:
        out = {}
        for k in self.names:
            v = self[k]
            out[k] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)),
                      "ci68": [float(x) for x in self.interval(k)], "rhat": float(self.rhat[k])}
        out["_acceptance"] = self.acceptance
        out["_converged"] = self.converged
        return out


def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction for one scalar, chains shape (m, n)."""
    m, n = chains.shape
    h = n // 2
    sp = np.concatenate([chains[:, :h], chains[:, h:2 * h]], axis=0)
    nn = sp.shape[1]
    means = sp.mean(axis=1)
    W = sp.var(axis=1, ddof=1).mean()
    B = nn * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else math.inf
    var_hat = (nn - 1) / nn * W + B / nn
    return float(math.sqrt(var_hat / W))


def metropolis(logpost: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, lower: np.ndarray,
               upper: np.ndarray, prop_cov: np.ndarray, config: ChainConfig,
               rhat_target: float = 1.05) -> tuple[np.ndarray, float, dict, bool]:
    """Vectorised random-walk Metropolis over ``config.n_chains`` chains.

    ``logpost`` maps (chains, dim) -> (chains,).  During the first half the
    proposal covariance is re-estimated from the pooled recent history
    (scaled by 2.38^2/dim) and a global scale is tuned toward ~25%
    acceptance; the second half is a fixed-kernel run that is returned.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 7001])))
    x = np.array(x0, float)
    C, d = x.shape
    lp = logpost(x)
    if not np.all(np.isfinite(lp)):
        raise FitError("initial points have zero posterior density")
    burn = config.n_iter // 2
    cov = np.array(prop_cov, float)
    scale = 2.38**2 / d
    try:
        L = np.linalg.cholesky(cov * scale)
    except np.linalg.LinAlgError:
        L = np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-300) * scale))
    hist = []
    keep = []
    acc_win = 0
    n_acc = 0
    n_prop = 0
    for it in range(config.n_iter):
        prop = x + (L @ rng.standard_normal((d, C))).T
        inside = np.all((prop >= lower) & (prop <= upper), axis=1)
        lpp = np.full(C, -np.inf)
        if inside.any():
            lpp[inside] = logpost(prop[inside])
        accept = np.log(rng.random(C)) < (lpp - lp)
        x = np.where(accept[:, None], prop, x)
        lp = np.where(accept, lpp, lp)
        if it < burn:
            hist.append(x.copy())
            acc_win += int(accept.sum())
            if (it + 1) % config.adapt_every == 0:
                rate = acc_win / (config.adapt_every * C)
                acc_win = 0
                scale *= math.exp(rate - 0.25)
                recent = np.concatenate(hist[len(hist) // 2:], axis=0)
                if recent.shape[0] > 2 * d:
                    emp = np.cov(recent.T)
                    emp = emp + 1e-12 * np.diag(np.maximum(np.diag(emp), 1e-300))
                    cov = emp
                try:
                    L = np.linalg.cholesky(cov * scale)
                except np.linalg.LinAlgError:
                    L = np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-300) * scale))
        else:
            n_acc += int(accept.sum())
            n_prop += C
            if (it - burn) % config.thin == 0:
                keep.append(x.copy())
    samples = np.stack(keep, axis=1)  # (chains, draws, dim)
    rh = {i: split_rhat(samples[:, :, i]) for i in range(d)}
    conv = all(v < rhat_target for v in rh.values())
    return samples, n_acc / max(n_prop, 1), rh, conv


def _dispersed_starts(center, cov, lower, upper, n, rng):
    d = len(center)
    sd = np.sqrt(np.maximum(np.diag(cov), 1e-300))
    out = np.empty((n, d))
    for c in range(n):
        for _ in range(1000):
            cand = center + sd * rng.standard_normal(d)
            if np.all((cand > lower) & (cand < upper)):
                break
        else:
            cand = np.clip(center, lower + 1e-12 * (upper - lower), upper - 1e-12 * (upper - lower))
        out[c] = cand
    return out


def _fisher_cov(resid_fn, p, lower, upper):
    """Gauss-Newton covariance of parameters from a residual function (finite-difference Jacobian)."""
    p = np.asarray(p, float)
    r0 = resid_fn(p)
    J = np.empty((r0.size, p.size))
    for i in range(p.size):
        h = 1e-6 * max(abs(p[i]), 1e-3 * (upper[i] - lower[i]))
        pp = p.copy()
        pp[i] += h
        J[:, i] = (resid_fn(pp) - r0) / h
    cov = np.linalg.pinv(J.T @ J)
    cov = 0.5 * (cov + cov.T)
    span = (upper - lower) / 6.0
    diag = np.clip(np.diag(cov), 1e-12 * span**2, span**2)
    # rescale to the clipped variances and floor the eigenvalues so the matrix is positive definite
    s_old = np.sqrt(np.maximum(np.diag(cov), 1e-300))
    corr = cov / np.outer(s_old, s_old)
    w, V = np.linalg.eigh(0.5 * (corr + corr.T))
    corr = (V * np.maximum(w, 1e-6)) @ V.T
    sd = np.sqrt(diag)
    return corr * np.outer(sd, sd)


def _run_posterior(names, loglik_points: Callable[[np.ndarray], np.ndarray], resid_fn, lower, upper,
                   config: ChainConfig, p_init=None, likelihood: bool = True,
                   keep_pointwise: bool = True, n_lsq_starts: int = 6) -> PosteriorChain:
    """Shared driver: LSQ start -> dispersed chains -> adaptive Metropolis."""
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 7002])))
    d = len(names)
    if likelihood:
        best = None
        inits = [p_init] if p_init is not None else []
        inits += [lower + (upper - lower) * rng.random(d) for _ in range(n_lsq_starts)]
        for p0 in inits:
            p0 = np.clip(np.asarray(p0, float), lower, upper)
            try:
                r = optimize.least_squares(resid_fn, p0, bounds=(lower, upper), method="trf",
                                           x_scale=(upper - lower), max_nfev=2000)
            except ValueError:
                continue
            if best is None or r.cost < best.cost:
                best = r
        center = best.x
        cov = _fisher_cov(resid_fn, center, lower, upper)

        def logpost(X):
            return np.sum(loglik_points(X), axis=1)
    else:
        center = 0.5 * (lower + upper)
        cov = np.diag(((upper - lower) / 6.0) ** 2)

        def logpost(X):
            return np.zeros(X.shape[0])
    x0 = _dispersed_starts(center, cov * config.init_spread**2, lower, upper, config.n_chains, rng)
    samples, acc, rh, conv = metropolis(logpost, x0, lower, upper, cov, config)
    pw = None
    if likelihood and keep_pointwise:
        pw = loglik_points(samples.reshape(-1, d))
    return PosteriorChain(tuple(names), samples, acc, {names[i]: rh[i] for i in range(d)}, conv, pw)


def _gauss_loglik(mu, y, s):
    return -0.5 * ((y - mu) / s) ** 2 - np.log(s) - 0.5 * math.log(2.0 * math.pi)


# bi-exponential --------------------------------------------------------------

def biexp(tau, a, g1, n1, g2, n2):
    t = np.asarray(tau, float)
    return a * np.exp(-np.power(g1 * t, n1)) + (1.0 - a) * np.exp(-np.power(g2 * t, n2))


@dataclass
class BiExpPosterior(PosteriorChain):
    pass


_BIEXP_NAMES = ("a", "gamma1", "n1", "gamma2", "n2")


def _default_biexp_priors(tau):
    tmax = float(np.max(tau))
    tmin = float(np.min(tau[tau > 0]))
    return {"a": (0.0, 1.0), "gamma1": (1e-3 / tmax, 10.0 / tmin), "n1": (0.1, 4.0),
            "gamma2": (1e-3 / tmax, 10.0 / tmin), "n2": (0.1, 4.0)}


def fit_biexp_mcmc(curve: SignalCurve, priors: dict | None = None, chain_config: ChainConfig = ChainConfig(),
                   likelihood: bool = True) -> BiExpPosterior:
    """Posterior of a exp[-(G1 t)^n1] + (1-a) exp[-(G2 t)^n2] under uniform priors.

    Gaussian likelihood with the curve's per-point standard errors.  Samples
    are relabelled so that n2 >= n1 (n2 is the early-time exponent).
    ``likelihood=False`` samples the prior (sanity check of the sampler).
    """
    tau, y, s = curve.tau, curve.value, _weights(curve)
    pri = {**_default_biexp_priors(tau), **(priors or {})}
    lower = np.array([pri[k][0] for k in _BIEXP_NAMES], float)
    upper = np.array([pri[k][1] for k in _BIEXP_NAMES], float)

    def pointwise(X):
        mu = biexp(tau[None, :], X[:, 0:1], X[:, 1:2], X[:, 2:3], X[:, 3:4], X[:, 4:5])
        return _gauss_loglik(mu, y[None, :], s[None, :])

    def resid(p):
        return (biexp(tau, *p) - y) / s

    # start from a stretched fit split into an early (n~2) and late component
    p_init = None
    if likelihood:
        try:
            f = fit_stretched(curve)
            p_init = np.clip([0.5, f.gamma, min(f.n, 1.0), f.gamma, max(f.n, 2.0)],
                             lower + 1e-9 * (upper - lower), upper - 1e-9 * (upper - lower))
        except FitError:
            p_init = None
    post = _run_posterior(_BIEXP_NAMES, pointwise, resid, lower, upper, chain_config, p_init, likelihood)
    smp = post.samples
    swap = smp[..., 2] > smp[..., 4]
    relabeled = smp.copy()
    relabeled[..., 0] = np.where(swap, 1.0 - smp[..., 0], smp[..., 0])
    relabeled[..., 1] = np.where(swap, smp[..., 3], smp[..., 1])
    relabeled[..., 2] = np.where(swap, smp[..., 4], smp[..., 2])
    relabeled[..., 3] = np.where(swap, smp[..., 1], smp[..., 3])
    relabeled[..., 4] = np.where(swap, smp[..., 2], smp[..., 4])
    rh = {k: split_rhat(relabeled[:, :, i]) for i, k in enumerate(_BIEXP_NAMES)}
    return BiExpPosterior(post.names, relabeled, post.acceptance, rh, all(v < 1.05 for v in rh.values()),
                          post.pointwise_loglik)


# joint coherence + DEER -------------------------------------------------------

class JointModel(str, enum.Enum):
    StretchedSingle = "StretchedSingle"
    HoppingExact = "HoppingExact"


@dataclass
class JointPosterior(PosteriorChain):
    model: str = ""


def _default_joint_priors(model: JointModel, n_min: float) -> dict:
    base = {"a": (0.5, 1.2), "T2": (1.0, 2000.0), "c": (0.5, 4.0)}
    if model is JointModel.HoppingExact:
        base.update({"depth": (1.0, 25.0), "sigma": (1e-4, 0.05)})
    else:
        base.update({"gamma": (1e-5, 20.0), "n": (max(n_min, 0.1), 4.0)})
    return base


def joint_model_curves(model: JointModel, X: np.ndarray, tau: np.ndarray,
                       constants: PhysicalConstants = CODATA) -> tuple[np.ndarray, np.ndarray]:
    """Model coherence C(tau) and DEER D(tau) = S(tau) C(tau) for parameter rows X."""
    X = np.atleast_2d(X)
    a, T2, c = X[:, 0:1], X[:, 1:2], X[:, 2:3]
    C = a * np.exp(-np.power(tau[None, :] / T2, c))
    if JointModel(model) is JointModel.HoppingExact:
        d, sg = X[:, 3:4], X[:, 4:5]
        beta = beta_of(tau[None, :], 1.0, constants) / d**3
        S = np.exp(sg * d * d * universal_exponent_fast(beta))
    else:
        S = np.exp(-np.power(X[:, 3:4] * tau[None, :], X[:, 4:5]))
    return C, S * C


def fit_joint(coherence: SignalCurve, deer: SignalCurve, model: JointModel | str,
              priors: dict | None = None, chain_config: ChainConfig = ChainConfig(), n_min: float = 0.0,
              constants: PhysicalConstants = CODATA, keep_pointwise: bool = True) -> JointPosterior:
    """Joint posterior for C(tau) = a exp[-(tau/T2)^c] and D(tau) = S(tau) C(tau).

    ``StretchedSingle``: S = exp[-(Gamma tau)^n] (set ``n_min=1`` for the
    noise-spectral-density class).  ``HoppingExact``: S is the configurational
    average for (depth, sigma), evaluated with the tabulated exact exponent.
    The two curves enter through separate Gaussian likelihoods.
    """
    model = JointModel(model)
    if coherence.tau.shape != deer.tau.shape or not np.allclose(coherence.tau, deer.tau):
        # interpolate coherence onto the DEER grid
        cval = np.interp(deer.tau, coherence.tau, coherence.value)
        cerr = np.interp(deer.tau, coherence.tau, coherence.stderr)
        coherence = SignalCurve(deer.tau, cval, cerr)
    tau = deer.tau
    names = ("a", "T2", "c", "depth", "sigma") if model is JointModel.HoppingExact else ("a", "T2", "c", "gamma", "n")
    pri = {**_default_joint_priors(model, n_min), **(priors or {})}
    lower = np.array([pri[k][0] for k in names], float)
    upper = np.array([pri[k][1] for k in names], float)
    yc, sc = coherence.value, _weights(coherence)
    yd, sd = deer.value, _weights(deer)

    def pointwise(X):
        C, D = joint_model_curves(model, X, tau, constants)
        return np.concatenate([_gauss_loglik(C, yc[None, :], sc[None, :]),
                               _gauss_loglik(D, yd[None, :], sd[None, :])], axis=1)

    def resid(p):
        C, D = joint_model_curves(model, p[None, :], tau, constants)
        return np.concatenate([(C[0] - yc) / sc, (D[0] - yd) / sd])

    T2_0 = min(max(10 * tau.max(), pri["T2"][0]), pri["T2"][1])
    if model is JointModel.HoppingExact:
        p_init = np.array([1.0, T2_0, 2.0, np.sqrt(pri["depth"][0] * pri["depth"][1]), 0.005])
    else:
        # start the surface-spin factor from a stretched fit to the ratio D/C
        ratio = SignalCurve(tau, yd / np.where(np.abs(yc) > 1e-3, yc, 1e-3), sd / np.maximum(np.abs(yc), 1e-3))
        try:
            f = fit_stretched(ratio, n_min=pri["n"][0])
            g0, n0 = f.gamma, f.n
        except FitError:
            g0, n0 = 1.0 / float(np.median(tau)), max(pri["n"][0], 1.0)
        p_init = np.array([min(max(yc[0], pri["a"][0]), pri["a"][1]), T2_0, 2.0,
                           min(max(g0, pri["gamma"][0]), pri["gamma"][1]),
                           min(max(n0, pri["n"][0]), pri["n"][1])])
    post = _run_posterior(names, pointwise, resid, lower, upper, chain_config, p_init,
                          keep_pointwise=keep_pointwise)
    return JointPosterior(post.names, post.samples, post.acceptance, post.rhat, post.converged,
                          post.pointwise_loglik, model=model.value)


# ---------------------------------------------------------------------------
# information criteria
# ---------------------------------------------------------------------------

@dataclass
class ICResult:
    value: float
    se: float
    pointwise: np.ndarray
    p_eff: float = math.nan
    flags: dict = field(default_factory=dict)


def waic(loglik: np.ndarray) -> ICResult:
    """WAIC on the log-score scale (elpd_waic; larger is better)."""
    ll = np.asarray(loglik, float)
    S = ll.shape[0]
    lppd = special.logsumexp(ll, axis=0) - math.log(S)
    p = np.var(ll, axis=0, ddof=1)
    pw = lppd - p
    n = pw.size
    return ICResult(float(pw.sum()), float(math.sqrt(n * np.var(pw))), pw, float(p.sum()),
                    {"p_waic_gt_0.4": np.flatnonzero(p > 0.4).tolist()})


def _gpdfit(x: np.ndarray) -> tuple[float, float]:
    """Generalised Pareto fit (Zhang & Stephens 2009 with weak prior on k); x sorted ascending."""
    prior_bs, prior_k = 3, 10
    n = x.size
    m_est = 30 + int(n**0.5)
    b = 1.0 - np.sqrt(m_est / (np.arange(1, m_est + 1, dtype=float) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    len_scale = n * (np.log(-(b / k)) - k - 1.0)
    weights = 1.0 / np.exp(len_scale - len_scale[:, None]).sum(axis=1)
    real = weights >= 10 * np.finfo(float).eps
    weights, b = weights[real], b[real]
    weights /= weights.sum()
    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def _gpinv(p: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.full_like(p, np.nan)
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psislw(log_weights: np.ndarray, reff: float = 1.0) -> tuple[np.ndarray, float]:
    """Pareto-smoothed importance log-weights for one observation; returns (lw, k_hat)."""
    lw = np.asarray(log_weights, float).copy()
    n = lw.size
    cutoff_ind = -int(np.ceil(min(0.2 * n, 3.0 * math.sqrt(n / reff)))) - 1
    lw -= lw.max()
    order = np.argsort(lw)
    xcut = max(lw[order[cutoff_ind]], math.log(np.finfo(float).tiny))
    tail = np.flatnonzero(lw > xcut)
    k = math.inf
    if tail.size > 4:
        ti = tail[np.argsort(lw[tail])]
        xt = np.exp(lw[ti]) - math.exp(xcut)
        k, sigma = _gpdfit(xt)
        if math.isfinite(k):
            probs = (np.arange(tail.size) + 0.5) / tail.size
            smooth = _gpinv(probs, k, sigma)
            lw[ti] = np.log(smooth + math.exp(xcut))
            lw[lw > 0] = 0.0
    lw -= special.logsumexp(lw)
    return lw, k


def psis_loo(loglik: np.ndarray, k_threshold: float = 0.7) -> ICResult:
    """PSIS-LOO elpd (larger is better).  Falls back to raw importance ratios, flagged, if the tail fit fails."""
    ll = np.asarray(loglik, float)
    S, n = ll.shape
    pw = np.empty(n)
    ks = np.empty(n)
    fallback = []
    for i in range(n):
        lw, k = psislw(-ll[:, i])
        if not np.all(np.isfinite(lw)) or not math.isfinite(k):
            lw = -ll[:, i] - special.logsumexp(-ll[:, i])
            fallback.append(i)
        ks[i] = k
        pw[i] = special.logsumexp(lw + ll[:, i])
    lppd = special.logsumexp(ll, axis=0) - math.log(S)
    return ICResult(float(pw.sum()), float(math.sqrt(n * np.var(pw))), pw, float((lppd - pw).sum()),
                    {"k_hat": ks, "high_k": np.flatnonzero(ks > k_threshold).tolist(), "raw_fallback": fallback})


@dataclass
class ModelComparison:
    waic: dict
    loo: dict
    loglik: dict
    d_waic: float
    d_waic_se: float
    d_loo: float
    d_loo_se: float
    flags: dict = field(default_factory=dict)

    @property
    def preferred(self) -> str:
        return "A" if self.d_waic > 0 else ("B" if self.d_waic < 0 else "tie")

    def significance(self) -> float:
        """Delta elpd_waic in units of its paired standard error."""
        if self.d_waic_se == 0:
            return 0.0 if self.d_waic == 0 else math.copysign(math.inf, self.d_waic)
        return self.d_waic / self.d_waic_se

    def to_dict(self) -> dict:
        return {"waic": self.waic, "loo": self.loo, "loglik": self.loglik, "d_waic": self.d_waic,
                "d_waic_se": self.d_waic_se, "d_loo": self.d_loo, "d_loo_se": self.d_loo_se}


def compare_loglik(ll_a: np.ndarray, ll_b: np.ndarray) -> ModelComparison:
    """WAIC, PSIS-LOO and total log-likelihood for two models on the same data.

    Differences are A - B with standard errors from the pointwise differences.
    """
    wa, wb = waic(ll_a), waic(ll_b)
    la, lb = psis_loo(ll_a), psis_loo(ll_b)
    n = wa.pointwise.size
    dw = wa.pointwise - wb.pointwise
    dl = la.pointwise - lb.pointwise
    tot_a, tot_b = ll_a.sum(axis=1), ll_b.sum(axis=1)
    return ModelComparison(
        waic={"A": (wa.value, wa.se), "B": (wb.value, wb.se)},
        loo={"A": (la.value, la.se), "B": (lb.value, lb.se)},
        loglik={"A": (float(tot_a.mean()), float(tot_a.std(ddof=1))),
                "B": (float(tot_b.mean()), float(tot_b.std(ddof=1)))},
        d_waic=float(dw.sum()), d_waic_se=float(math.sqrt(n * np.var(dw))),
        d_loo=float(dl.sum()), d_loo_se=float(math.sqrt(n * np.var(dl))),
        flags={"loo_high_k_A": la.flags["high_k"], "loo_high_k_B": lb.flags["high_k"],
               "loo_fallback_A": la.flags["raw_fallback"], "loo_fallback_B": lb.flags["raw_fallback"]},
    )


def model_compare(coherence: SignalCurve, deer: SignalCurve, model_a: str | JointModel,
                  model_b: str | JointModel, chain_config: ChainConfig = ChainConfig(),
                  n_min_a: float = 0.0, n_min_b: float = 0.0, **kw) -> ModelComparison:
    """Fit both joint models and compare them (A - B)."""
    pa = fit_joint(coherence, deer, model_a, chain_config=chain_config, n_min=n_min_a, **kw)
    pb = fit_joint(coherence, deer, model_b, chain_config=chain_config, n_min=n_min_b, **kw)
    mc = compare_loglik(pa.pointwise_loglik, pb.pointwise_loglik)
    mc.flags.update({"converged_A": pa.converged, "converged_B": pb.converged})
    return mc


# ---------------------------------------------------------------------------
# cutoff stability
# ---------------------------------------------------------------------------

def cutoff_stability(curve: SignalCurve, cutoffs: Sequence[float],
                     fit: Callable[[SignalCurve], dict] | None = None,
                     selector: np.ndarray | None = None) -> list[dict]:
    """Refit for each cutoff, keeping points before the first drop below the cutoff.

    ``selector`` is the curve used to decide the cutoff (defaults to the
    signal itself; pass the coherence to reproduce a C-based cutoff).  The
    default fit is a free stretched exponential returning n, Gamma and their
    errors.  Each row reports the drift of n relative to the first cutoff in
    units of that fit's error.
    """
    sel = curve.value if selector is None else np.asarray(selector, float)

    def default_fit(c):
        f = fit_stretched(c)
        return {"n": f.n, "n_err": f.stderr["n"], "gamma": f.gamma, "gamma_err": f.stderr["gamma"]}

    fit = fit or default_fit
    rows = []
    for cut in cutoffs:
        below = np.flatnonzero(sel <= cut)
        end = below[0] if below.size else sel.size
        sub = curve.select(np.arange(sel.size) < end)
        row = {"cutoff": float(cut), "n_points": len(sub)}
        try:
            row.update(fit(sub))
        except FitError as exc:
            row["error"] = str(exc)
        rows.append(row)
    ref = rows[0]
    for r in rows:
        if "n" in r and "n" in ref:
            err = math.hypot(ref.get("n_err", 0.0), 0.0) or 1.0
            r["drift_sigma"] = (r["n"] - ref["n"]) / err
    return rows
