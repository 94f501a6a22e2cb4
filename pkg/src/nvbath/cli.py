"""Config-driven sweeps: ``nvbath run`` writes a table bundle, ``nvbath verify`` checks it.

A config is a TOML file, e.g.::

    scenario = "loglog-depth-sweep"
    seed = 11
    shots = 20000
    densities = [0.005]
    depths = {start = 1.0, stop = 10.0, num = 5, spacing = "log"}

    [tau]
    spacing = "log"      # or "linear"
    unit = "tau_c"       # "us", "tau_c" (crossover time) or "tau_10" (time to reach S = 0.1)
    start = 0.05
    stop = 20.0
    num = 30

Every output is a pure function of (config, seed): cells draw from streams
derived from the seed and the cell index, and no timestamps are written, so
re-runs are byte-identical whatever ``--threads`` is.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .analytic import (crossover_time, hopping_signal_fast, hopping_signal_longtime, hopping_time_at)
from .inference import FitError, fit_stretched, loglog_slope
from .montecarlo import hopping_plan, simulate_hopping

__all__ = ["ConfigError", "ExperimentConfig", "FigureBundle", "load_config", "config_hash", "run", "verify", "main"]

MANIFEST_SCHEMA = 1
MANIFEST = "manifest.json"
SCENARIOS = ("exponent-vs-depth", "loglog-density-sweep", "loglog-depth-sweep")
_TAU_UNITS = ("us", "tau_c", "tau_10")
_SCENARIO_TAG = {name: i + 1 for i, name in enumerate(SCENARIOS)}

_DEFAULTS = {
    "exponent-vs-depth": {
        "densities": [0.002, 0.004, 0.006, 0.008],
        "depths": {"start": 1.0, "stop": 40.0, "num": 12, "spacing": "log"},
        "tau": {"spacing": "linear", "unit": "tau_10", "start": 0.025, "stop": 1.0, "num": 40},
        "shots": 20000,
    },
    "loglog-density-sweep": {
        "densities": {"start": 1e-4, "stop": 1e-2, "num": 5, "spacing": "log"},
        "depths": [5.0],
        "tau": {"spacing": "log", "unit": "tau_c", "start": 0.05, "stop": 20.0, "num": 30},
        "shots": 20000,
    },
    "loglog-depth-sweep": {
        "densities": [0.005],
        "depths": {"start": 1.0, "stop": 10.0, "num": 5, "spacing": "log"},
        "tau": {"spacing": "log", "unit": "tau_c", "start": 0.05, "stop": 20.0, "num": 30},
        "shots": 20000,
    },
}

# long-time slope window in units of the crossover time, and the tolerance checked by verify
LATE_WINDOW = (3.0, 10.0)
LATE_SLOPE_TOL = 0.07
MIN_SNR = 5.0


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seed: int
    shots: int
    depths: tuple
    densities: tuple
    tau: dict
    dynamics: str = "hopping"
    out: str | None = None

    def semantic(self) -> dict:
        """Fields that determine the results (output directory excluded)."""
        return {"scenario": self.scenario, "seed": self.seed, "shots": self.shots, "dynamics": self.dynamics,
                "depths": [float(x) for x in self.depths], "densities": [float(x) for x in self.densities],
                "tau": {k: (float(v) if k in ("start", "stop") else v) for k, v in sorted(self.tau.items())}}


@dataclass
class FigureBundle:
    out: Path
    files: list
    failed_cells: list = field(default_factory=list)
    config_hash: str = ""

    @property
    def ok(self) -> bool:
        return not self.failed_cells


def _grid(spec, name) -> tuple:
    if isinstance(spec, (int, float)):
        spec = [spec]
    if isinstance(spec, list):
        vals = [float(v) for v in spec]
    elif isinstance(spec, dict):
        try:
            start, stop, num = float(spec["start"]), float(spec["stop"]), int(spec["num"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: grid spec needs start, stop, num ({exc})") from None
        spacing = spec.get("spacing", "linear")
        if num < 1:
            raise ConfigError(f"{name}: num must be >= 1")
        if spacing == "log":
            if start <= 0 or stop <= 0:
                raise ConfigError(f"{name}: log grid needs positive bounds")
            vals = np.geomspace(start, stop, num).tolist()
        elif spacing == "linear":
            vals = np.linspace(start, stop, num).tolist()
        else:
            raise ConfigError(f"{name}: spacing must be 'linear' or 'log'")
    else:
        raise ConfigError(f"{name}: expected a list or a grid table")
    if not vals:
        raise ConfigError(f"{name}: grid is empty")
    if any(not (math.isfinite(v) and v > 0) for v in vals):
        raise ConfigError(f"{name}: values must be positive and finite")
    return tuple(float(repr_round(v)) for v in vals)


def repr_round(v: float) -> float:
    """Round to 12 significant digits so equivalent grid specs hash identically."""
    return float(f"{v:.12g}")


def _tau_spec(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError("tau: expected a table")
    out = {"spacing": spec.get("spacing", "linear"), "unit": spec.get("unit", "us")}
    if out["spacing"] not in ("linear", "log"):
        raise ConfigError("tau.spacing must be 'linear' or 'log'")
    if out["unit"] not in _TAU_UNITS:
        raise ConfigError(f"tau.unit must be one of {_TAU_UNITS}")
    try:
        out["start"], out["stop"], out["num"] = float(spec["start"]), float(spec["stop"]), int(spec["num"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"tau: needs start, stop, num ({exc})") from None
    if not (0 < out["start"] < out["stop"]) or out["num"] < 5:
        raise ConfigError("tau: need 0 < start < stop and num >= 5")
    unknown = set(spec) - {"spacing", "unit", "start", "stop", "num"}
    if unknown:
        raise ConfigError(f"tau: unknown keys {sorted(unknown)}")
    return out


def config_from_dict(raw: dict, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw = dict(raw)
    scen = raw.pop("scenario", None)
    if scen not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scen!r}")
    d = _DEFAULTS[scen]
    s = raw.pop("seed", None)
    if seed is not None:
        s = seed
    if s is None:
        raise ConfigError("a seed is mandatory (config 'seed' or --seed)")
    if isinstance(s, bool) or not isinstance(s, int) or not (0 <= s < 2**64):
        raise ConfigError("seed must be an integer in [0, 2^64)")
    dyn = raw.pop("dynamics", "hopping")
    if str(dyn).lower() != "hopping":
        raise ConfigError("these scenarios support dynamics = 'hopping' only")
    shots = raw.pop("shots", d["shots"])
    if isinstance(shots, bool) or not isinstance(shots, int) or shots < 2:
        raise ConfigError("shots must be an integer >= 2")
    depths = _grid(raw.pop("depths", d["depths"]), "depths")
    dens = _grid(raw.pop("densities", d["densities"]), "densities")
    tau = _tau_spec(raw.pop("tau", d["tau"]))
    raw_out = raw.pop("out", None)
    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")
    return ExperimentConfig(scen, int(s), int(shots), depths, dens, tau, "hopping", out or raw_out)


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw, seed, out)


def config_hash(cfg: ExperimentConfig | dict) -> str:
    sem = cfg.semantic() if isinstance(cfg, ExperimentConfig) else cfg
    blob = json.dumps(sem, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _cell_seed(cfg: ExperimentConfig, index: int) -> int:
    ss = np.random.SeedSequence([cfg.seed, _SCENARIO_TAG[cfg.scenario], index])
    return int(ss.generate_state(1, np.uint64)[0])


def tau_grid(cfg: ExperimentConfig, sigma: float, depth: float) -> np.ndarray:
    t = cfg.tau
    if t["unit"] == "us":
        scale = 1.0
    elif t["unit"] == "tau_c":
        scale = crossover_time(depth)
    else:
        scale = hopping_time_at(sigma, depth, 0.1)
    if t["spacing"] == "log":
        g = np.geomspace(t["start"], t["stop"], t["num"])
    else:
        g = np.linspace(t["start"], t["stop"], t["num"])
    return g * scale


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _write_table(path: Path, columns, rows) -> None:
    text = ",".join(columns) + "\n" + "".join(",".join(_fmt(v) for v in r) + "\n" for r in rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _read_table(path: Path) -> dict:
    lines = path.read_text().splitlines()
    cols = lines[0].split(",")
    arr = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln], float).reshape(-1, len(cols))
    return {c: arr[:, i] for i, c in enumerate(cols)}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _g(S, sS):
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (S > 0) & (S < 1)
        lnS = np.where(ok, np.log(np.where(ok, S, 0.5)), np.nan)
        g = np.where(ok, np.log10(-lnS), np.nan)
        sg = np.where(ok, np.abs(sS / (math.log(10.0) * S * lnS)), np.nan)
    return g, sg


def _simulate_cell(cfg: ExperimentConfig, index: int, sigma: float, depth: float) -> dict:
    tau = tau_grid(cfg, sigma, depth)
    curve = simulate_hopping(hopping_plan(depth, sigma, tau, cfg.shots), _cell_seed(cfg, index))
    out = {"sigma": sigma, "depth": depth, "curve": curve, "tau_c": crossover_time(depth)}
    if cfg.scenario == "exponent-vs-depth":
        # simulated curves start at exactly 1, so the amplitude is fixed
        out["fit"] = fit_stretched(curve, fix_a=1.0)
    else:
        tc = out["tau_c"]
        try:
            out["late"] = loglog_slope(curve, LATE_WINDOW[0] * tc, LATE_WINDOW[1] * tc, min_snr=MIN_SNR)
        except FitError:
            out["late"] = (math.nan, math.nan, math.nan, 0)
        try:
            out["early"] = loglog_slope(curve, 0.0, tc / 5.0, min_snr=MIN_SNR)
        except FitError:
            out["early"] = (math.nan, math.nan, math.nan, 0)
    return out


_FIGURE = {
    "exponent-vs-depth": "stretching exponent versus sensor depth for several densities",
    "loglog-density-sweep": "log-log decay curves at fixed depth across densities",
    "loglog-depth-sweep": "log-log decay curves at fixed density across depths, with the exact overlay",
}


def run(cfg: ExperimentConfig, out: str | os.PathLike | None = None, threads: int = 1) -> FigureBundle:
    """Execute the sweep and write tables + manifest into ``out``."""
    out_dir = Path(out or cfg.out or f"bundle-{cfg.scenario}")
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(i, s, d) for i, (s, d) in enumerate((s, d) for s in cfg.densities for d in cfg.depths)]
    h = config_hash(cfg)

    def work(cell):
        i, s, d = cell
        try:
            return _simulate_cell(cfg, i, s, d)
        except Exception as exc:  # recorded in the manifest, not fatal to the sweep
            return {"sigma": s, "depth": d, "error": f"{type(exc).__name__}: {exc}"}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    failed = [{"sigma": r["sigma"], "depth": r["depth"], "error": r["error"]} for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    files = []

    curve_rows = []
    for r in good:
        c = r["curve"]
        g, sg = _g(c.value, c.stderr)
        for k in range(len(c)):
            curve_rows.append((r["sigma"], r["depth"], c.tau[k], c.tau[k] / r["tau_c"], c.value[k], c.stderr[k],
                               math.log10(c.tau[k]), g[k], sg[k]))
    _write_table(out_dir / "curves.csv",
                 ("sigma", "depth", "tau_us", "tau_over_tau_c", "S", "stderr", "log10_tau", "g", "sg"), curve_rows)
    files.append("curves.csv")

    if cfg.scenario == "exponent-vs-depth":
        rows = []
        for r in good:
            f = r["fit"]
            rows.append((r["sigma"], r["depth"], r["depth"] * 2.0 * math.sqrt(r["sigma"]), f.n, f.stderr["n"],
                         f.gamma, f.stderr["gamma"], f.a, f.chi2, f.dof))
        _write_table(out_dir / "fits.csv", ("sigma", "depth", "depth_over_nn", "n", "n_err", "gamma", "gamma_err",
                                            "a", "chi2", "dof"), rows)
        files.append("fits.csv")
    else:
        rows = []
        for r in good:
            late, early = r["late"], r["early"]
            rows.append((r["sigma"], r["depth"], late[0], late[2], late[3], early[0], early[2], early[3]))
        _write_table(out_dir / "slopes.csv", ("sigma", "depth", "late_slope", "late_slope_err", "late_points",
                                              "early_slope", "early_slope_err", "early_points"), rows)
        files.append("slopes.csv")
        ex_rows = []
        for s in cfg.densities:
            for d in cfg.depths:
                t = tau_grid(cfg, s, d)
                fine = np.geomspace(t[0], t[-1], 200)
                Se = hopping_signal_fast(s, d, fine)
                Sl = hopping_signal_longtime(s, fine)
                for k in range(fine.size):
                    ex_rows.append((s, d, fine[k], math.log10(fine[k]), Se[k], math.log10(-math.log(Se[k])),
                                    Sl[k], math.log10(-math.log(Sl[k]))))
        _write_table(out_dir / "exact.csv", ("sigma", "depth", "tau_us", "log10_tau", "S_exact", "g_exact",
                                             "S_longtime", "g_longtime"), ex_rows)
        files.append("exact.csv")

    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "scenario": cfg.scenario,
        "figure": _FIGURE[cfg.scenario],
        "config": cfg.semantic(),
        "config_hash": h,
        "files": [{"name": n, "config_hash": h, "sha256": _sha256(out_dir / n)} for n in files],
        "failed_cells": failed,
    }
    tmp = out_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, out_dir / MANIFEST)
    return FigureBundle(out_dir, files, failed, h)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _check(name, passed, detail=""):
    return {"check": name, "passed": bool(passed), "detail": detail}


def _verify_slopes(t: dict) -> list:
    out = []
    for i in range(t["sigma"].size):
        s, d, k, ke = t["sigma"][i], t["depth"][i], t["late_slope"][i], t["late_slope_err"][i]
        name = f"late-slope sigma={s:g} depth={d:g}"
        if not math.isfinite(k) or not (ke < LATE_SLOPE_TOL / 2):
            out.append({"check": name, "passed": None, "detail": "skipped: slope not resolved"})
            continue
        out.append(_check(name, abs(k - 2.0 / 3.0) <= LATE_SLOPE_TOL, f"slope {k:.4f} +- {ke:.4f}"))
    return out


def _verify_exponents(t: dict) -> list:
    out = []
    for s in np.unique(t["sigma"]):
        m = t["sigma"] == s
        order = np.argsort(t["depth"][m])
        x, n, ne = t["depth_over_nn"][m][order], t["n"][m][order], t["n_err"][m][order]
        steps = np.diff(n)
        mono = bool(np.all(steps >= -2.0 * np.hypot(ne[1:], ne[:-1]) - 1e-12))
        out.append(_check(f"monotone sigma={s:g}", mono, f"n = {np.round(n, 3).tolist()}"))
        deep = x >= 4.0
        if deep.any():
            out.append(_check(f"deep limit sigma={s:g}", abs(n[deep][-1] - 2.0) <= 0.1, f"n = {n[deep][-1]:.4f}"))
        shallow = x <= 0.2
        if shallow.any():
            out.append(_check(f"shallow limit sigma={s:g}", abs(n[shallow][0] - 2.0 / 3.0) <= 0.1,
                              f"n = {n[shallow][0]:.4f}"))
    return out


def verify(bundle) -> dict:
    """Integrity and scenario checks for a bundle directory; returns a machine-readable report."""
    bdir = Path(bundle)
    checks = []
    mpath = bdir / MANIFEST
    if not mpath.exists():
        return {"status": "fail", "reason": "nothing to verify: no manifest in bundle", "checks": []}
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        return {"status": "fail", "reason": f"unreadable manifest: {exc}", "checks": []}
    if man.get("schema_version") != MANIFEST_SCHEMA:
        return {"status": "fail", "reason": f"manifest schema {man.get('schema_version')!r} unsupported",
                "checks": []}
    if not man.get("files"):
        return {"status": "fail", "reason": "nothing to verify: manifest lists no tables", "checks": []}
    h = config_hash(man.get("config", {}))
    checks.append(_check("config hash", h == man.get("config_hash"), h))
    missing = []
    for f in man["files"]:
        p = bdir / f["name"]
        if not p.exists():
            missing.append(f["name"])
            continue
        ok = f.get("config_hash") == h and _sha256(p) == f.get("sha256")
        checks.append(_check(f"integrity {f['name']}", ok, "" if ok else "config-hash mismatch: table was modified"))
    if missing:
        checks.append(_check("tables present", False, f"missing: {missing}"))
    if man.get("failed_cells"):
        checks.append(_check("all cells succeeded", False, json.dumps(man["failed_cells"])))
    integrity_ok = all(c["passed"] for c in checks)
    if integrity_ok:
        scen = man.get("scenario")
        if scen == "exponent-vs-depth":
            checks += _verify_exponents(_read_table(bdir / "fits.csv"))
        elif scen in ("loglog-density-sweep", "loglog-depth-sweep"):
            checks += _verify_slopes(_read_table(bdir / "slopes.csv"))
    decided = [c for c in checks if c["passed"] is not None]
    status = "pass" if decided and all(c["passed"] for c in decided) else "fail"
    return {"status": status, "scenario": man.get("scenario"), "config_hash": man.get("config_hash"),
            "checks": checks}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvbath", description="Surface spin-bath sweeps and bundle verification.")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a scenario from a TOML config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--verify", action="store_true", help="verify the bundle after writing it")
    v = sub.add_parser("verify", help="verify a bundle directory")
    v.add_argument("bundle")
    v.add_argument("--report", default=None, help="also write the JSON report to this file")
    return p


def _emit(report: dict, path) -> None:
    text = json.dumps(report, sort_keys=True, indent=1)
    print(text)
    if path:
        Path(path).write_text(text + "\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.cmd == "run":
        try:
            cfg = load_config(args.config, seed=args.seed, out=args.out)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if args.threads < 1:
            print("config error: --threads must be >= 1", file=sys.stderr)
            return 2
        bundle = run(cfg, threads=args.threads)
        print(f"wrote {len(bundle.files)} tables to {bundle.out} (config {bundle.config_hash[:12]})")
        for f in bundle.failed_cells:
            print(f"failed cell sigma={f['sigma']} depth={f['depth']}: {f['error']}", file=sys.stderr)
        if args.verify:
            rep = verify(bundle.out)
            _emit(rep, None)
            return 0 if rep["status"] == "pass" else 1
        return 0 if bundle.ok else 1
    rep = verify(args.bundle)
    _emit(rep, args.report)
    return 0 if rep["status"] == "pass" else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
