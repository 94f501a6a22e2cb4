"""Photon-count DEER datasets: normalisation, error propagation and curve files.

Files are plain CSV with a JSON sidecar (``<name>.json``) holding the schema
version, column list and free-form metadata (sample id, depth, surface
condition, ...).  Floats are written with ``repr`` so a save/load round trip
is bit-identical.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .montecarlo import SignalCurve

__all__ = [
    "SCHEMA_VERSION",
    "CHANNELS",
    "RAW_COLUMNS",
    "NORMALIZED_COLUMNS",
    "CURVE_COLUMNS",
    "SchemaError",
    "RawDeerDataset",
    "NormalizedCurves",
    "normalize",
    "save_raw",
    "load_raw",
    "save_normalized",
    "load_normalized",
    "save_curve",
    "load_curve",
    "sidecar_path",
]

SCHEMA_VERSION = 1
CHANNELS = ("bright", "dark", "sig0", "sig1", "deer0", "deer1")
RAW_COLUMNS = ("tau_us",) + CHANNELS
VAR_COLUMNS = tuple(f"var_{c}" for c in CHANNELS)
NORMALIZED_COLUMNS = ("tau_us", "C", "sC", "D", "sD", "S", "sS")
CURVE_COLUMNS = ("tau_us", "value", "stderr")

# Column orders written by earlier ad-hoc exports; recognised so the error can say what to do.
_LEGACY_RAW_ORDERS = {
    ("tau_us", "sig0", "sig1", "deer0", "deer1", "bright", "dark"): "signals-first",
    ("tau_us", "bright", "dark", "sig0", "deer0", "sig1", "deer1"): "projection-interleaved",
}


class SchemaError(ValueError):
    """Malformed or incompatible curve file."""


@dataclass
class RawDeerDataset:
    """Per-tau photon counts of the six DEER channels and their variances.

    Missing variances default to the counts themselves (shot noise); the
    channels that were defaulted are listed in ``variance_defaulted``.
    """

    tau: np.ndarray
    counts: dict
    variances: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    variance_defaulted: tuple = ()

    def __post_init__(self) -> None:
        self.tau = np.asarray(self.tau, float)
        missing = [c for c in CHANNELS if c not in self.counts]
        if missing:
            raise ValueError(f"missing count channels: {missing}")
        counts = {}
        for c in CHANNELS:
            v = np.asarray(self.counts[c], float)
            if v.shape != self.tau.shape:
                raise ValueError(f"channel {c} has shape {v.shape}, expected {self.tau.shape}")
            if np.any(~np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"channel {c} has negative or non-finite counts")
            counts[c] = v
        self.counts = counts
        var = {}
        defaulted = list(self.variance_defaulted)
        for c in CHANNELS:
            if c in self.variances and self.variances[c] is not None:
                v = np.asarray(self.variances[c], float)
                if v.shape != self.tau.shape or np.any(v < 0):
                    raise ValueError(f"variance of {c} must be non-negative with shape {self.tau.shape}")
                var[c] = v
            else:
                var[c] = counts[c].copy()
                if c not in defaulted:
                    defaulted.append(c)
        self.variances = var
        self.variance_defaulted = tuple(defaulted)

    def __len__(self) -> int:
        return self.tau.size

    def scaled(self, k: float) -> "RawDeerDataset":
        """Counts scaled by k, variances by k^2 (exact homogeneity check)."""
        return RawDeerDataset(self.tau, {c: k * v for c, v in self.counts.items()},
                              {c: k * k * v for c, v in self.variances.items()}, dict(self.metadata))


@dataclass
class NormalizedCurves:
    tau: np.ndarray
    C: np.ndarray
    sC: np.ndarray
    D: np.ndarray
    sD: np.ndarray
    S: np.ndarray
    sS: np.ndarray
    excluded: dict = field(default_factory=dict)   # original index -> reason
    metadata: dict = field(default_factory=dict)

    def coherence(self) -> SignalCurve:
        return SignalCurve(self.tau, self.C, self.sC, dict(self.metadata))

    def deer(self) -> SignalCurve:
        return SignalCurve(self.tau, self.D, self.sD, dict(self.metadata))

    def signal(self) -> SignalCurve:
        return SignalCurve(self.tau, self.S, self.sS, dict(self.metadata))


def normalize(raw: RawDeerDataset, cutoff: float = 0.1, cutoff_on: str = "C",
              s_error: str = "correlated") -> NormalizedCurves:
    """Coherence C, DEER D and their ratio S = D/C with quotient-rule errors.

    C = (sig0 - sig1)/(bright - dark), D = (deer0 - deer1)/(bright - dark).
    The C and D errors treat every channel as independent.  For S,
    ``s_error="independent"`` adds the D and C quotient-rule terms in
    quadrature; the default ``"correlated"`` also subtracts the C--D
    covariance induced by the shared references, which cancel in D/C.  Points with zero
    reference contrast, or whose C (``cutoff_on="C"``) or D (``"D"``) is not
    above ``cutoff``, are excluded and itemised in ``excluded``.
    """
    if s_error not in ("correlated", "independent"):
        raise ValueError("s_error must be 'correlated' or 'independent'")
    if cutoff_on not in ("C", "D"):
        raise ValueError("cutoff_on must be 'C' or 'D'")
    n, v = raw.counts, raw.variances
    den = n["bright"] - n["dark"]
    excluded = {}
    ok = np.ones(len(raw), bool)
    for i in np.flatnonzero(den == 0):
        excluded[int(i)] = "degenerate reference contrast (bright == dark)"
        ok[i] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        num_c = n["sig0"] - n["sig1"]
        num_d = n["deer0"] - n["deer1"]
        C = num_c / den
        D = num_d / den
        var_ref = v["bright"] + v["dark"]
        vC = (v["sig0"] + v["sig1"]) / den**2 + (num_c / den**2) ** 2 * var_ref
        vD = (v["deer0"] + v["deer1"]) / den**2 + (num_d / den**2) ** 2 * var_ref
        S = D / C
        vS = vD / C**2 + vC * D**2 / C**4
        if s_error == "correlated":
            cov_cd = num_c * num_d / den**4 * var_ref
            vS = np.maximum(vS - 2.0 * D / C**3 * cov_cd, 0.0)
    gate = C if cutoff_on == "C" else D
    for i in np.flatnonzero(ok & ~(gate > cutoff)):
        excluded[int(i)] = f"{cutoff_on} = {gate[i]:.6g} not above cutoff {cutoff}"
        ok[i] = False
    meta = dict(raw.metadata)
    meta.update({"cutoff": cutoff, "cutoff_on": cutoff_on, "s_error": s_error,
                 "variance_defaulted": list(raw.variance_defaulted)})
    return NormalizedCurves(raw.tau[ok], C[ok], np.sqrt(vC[ok]), D[ok], np.sqrt(vD[ok]), S[ok], np.sqrt(vS[ok]),
                            dict(sorted(excluded.items())), meta)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write(path, columns, data, kind, metadata, extra=None) -> None:
    path = Path(path)
    lines = [",".join(columns)]
    for row in zip(*data):
        lines.append(",".join(_fmt(x) for x in row))
    _atomic_write(path, "\n".join(lines) + "\n")
    side = {"schema_version": SCHEMA_VERSION, "kind": kind, "columns": list(columns),
            "metadata": _jsonable(metadata)}
    if extra:
        side.update(extra)
    _atomic_write(sidecar_path(path), json.dumps(side, sort_keys=True, indent=1) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _read(path, kind: str | None):
    path = Path(path)
    side = {}
    sp = sidecar_path(path)
    if sp.exists():
        side = json.loads(sp.read_text())
        ver = side.get("schema_version")
        if ver != SCHEMA_VERSION:
            raise SchemaError(f"{sp}: schema version {ver!r} is not supported (expected {SCHEMA_VERSION})")
        if kind is not None and side.get("kind") not in (None, kind):
            raise SchemaError(f"{sp}: file holds {side.get('kind')!r} data, expected {kind!r}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        try:
            body.append([float(c) for c in row])
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: non-numeric field ({exc})") from None
    arr = np.array(body, float).reshape(-1, len(header))
    return header, arr, side


def _check_header(path, header, expected, legacy=None):
    if tuple(header) == tuple(expected):
        return
    if set(header) == set(expected):
        name = (legacy or {}).get(tuple(header), "non-canonical")
        raise SchemaError(
            f"{path}: columns are in a {name} order {header}; "
            f"rewrite the header and columns in the order {list(expected)}")
    raise SchemaError(f"{path}: expected columns {list(expected)}, found {header}")


def save_raw(raw: RawDeerDataset, path, include_variance: bool = True) -> None:
    cols = list(RAW_COLUMNS)
    data = [raw.tau] + [raw.counts[c] for c in CHANNELS]
    if include_variance:
        cols += list(VAR_COLUMNS)
        data += [raw.variances[c] for c in CHANNELS]
    _write(path, cols, data, "raw", raw.metadata, {"variance_defaulted": list(raw.variance_defaulted)})


def load_raw(path) -> RawDeerDataset:
    """Read a raw count file; absent ``var_*`` columns default to shot noise and are flagged."""
    header, arr, side = _read(path, "raw")
    base = header[: len(RAW_COLUMNS)]
    _check_header(path, base, RAW_COLUMNS, _LEGACY_RAW_ORDERS)
    rest = header[len(RAW_COLUMNS):]
    unknown = [h for h in rest if h not in VAR_COLUMNS]
    if unknown:
        raise SchemaError(f"{path}: unknown columns {unknown}")
    counts = {c: arr[:, RAW_COLUMNS.index(c)] for c in CHANNELS}
    variances = {}
    for c in CHANNELS:
        key = f"var_{c}"
        if key in header:
            variances[c] = arr[:, header.index(key)]
    flagged = [c for c in side.get("variance_defaulted", []) if c in variances]
    return RawDeerDataset(arr[:, 0], counts, variances, side.get("metadata", {}), tuple(flagged))


def save_normalized(curves: NormalizedCurves, path) -> None:
    data = [curves.tau, curves.C, curves.sC, curves.D, curves.sD, curves.S, curves.sS]
    _write(path, NORMALIZED_COLUMNS, data, "normalized", curves.metadata,
           {"excluded": {str(k): v for k, v in curves.excluded.items()}})


def load_normalized(path) -> NormalizedCurves:
    header, arr, side = _read(path, "normalized")
    _check_header(path, header, NORMALIZED_COLUMNS)
    if np.any(arr[:, [2, 4, 6]] < 0):
        raise SchemaError(f"{path}: negative uncertainty")
    excl = {int(k): v for k, v in side.get("excluded", {}).items()}
    return NormalizedCurves(*(arr[:, i] for i in range(7)), excluded=excl, metadata=side.get("metadata", {}))


def save_curve(curve: SignalCurve, path) -> None:
    _write(path, CURVE_COLUMNS, [curve.tau, curve.value, curve.stderr], "curve", curve.meta)


def load_curve(path) -> SignalCurve:
    header, arr, side = _read(path, "curve")
    _check_header(path, header, CURVE_COLUMNS)
    if np.any(arr[:, 2] < 0):
        raise SchemaError(f"{path}: negative stderr")
    return SignalCurve(arr[:, 0], arr[:, 1], arr[:, 2], side.get("metadata", {}))
