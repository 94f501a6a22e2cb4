import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvbath.dataio import (CHANNELS, RawDeerDataset, SchemaError, load_curve, load_normalized, load_raw,
                           normalize, save_curve, save_normalized, save_raw, sidecar_path)
from nvbath.montecarlo import SignalCurve


def counts_for(C, S, bright=1e4, dark=7e3):
    D = C * S
    half = 0.5 * (bright - dark)
    mid = 0.5 * (bright + dark)
    return {"bright": bright, "dark": dark, "sig0": mid + C * half, "sig1": mid - C * half,
            "deer0": mid + D * half, "deer1": mid - D * half}


def make_raw(C, S, **kw):
    C, S = np.atleast_1d(C), np.atleast_1d(S)
    rows = [counts_for(c, s, **kw) for c, s in zip(C, S)]
    return RawDeerDataset(np.arange(1, C.size + 1, dtype=float), {k: [r[k] for r in rows] for k in CHANNELS},
                          metadata={"sample_id": "A", "depth_nm": 5.3, "surface": "as-grown"})


def test_full_contrast_gives_unit_coherence():
    raw = RawDeerDataset([1.0], {"bright": [900.0], "dark": [600.0], "sig0": [900.0], "sig1": [600.0],
                                 "deer0": [800.0], "deer1": [700.0]})
    out = normalize(raw)
    assert out.C[0] == 1.0
    assert out.S[0] == pytest.approx(1 / 3)


def test_equal_deer_and_coherence():
    raw = make_raw([0.8], [1.0])
    out = normalize(raw, s_error="independent")
    assert out.S[0] == 1.0
    expect = math.sqrt((out.sD[0] / out.C[0]) ** 2 + (out.sC[0] * out.D[0] / out.C[0] ** 2) ** 2)
    assert out.sS[0] == pytest.approx(expect, rel=1e-14)
    assert out.sS[0] > out.sD[0] / out.C[0]


def test_coherence_error_formula():
    raw = make_raw([0.6], [0.5])
    n, v = raw.counts, raw.variances
    den = n["bright"][0] - n["dark"][0]
    vC = (v["sig0"][0] + v["sig1"][0]) / den**2 + ((n["sig0"][0] - n["sig1"][0]) / den**2) ** 2 * (
        v["bright"][0] + v["dark"][0])
    assert normalize(raw).sC[0] == pytest.approx(math.sqrt(vC), rel=1e-14)


def _resampled_sigma_S(mu, rng, draws=10_000):
    x = {k: rng.poisson(v, draws).astype(float) for k, v in mu.items()}
    return np.std((x["deer0"] - x["deer1"]) / (x["sig0"] - x["sig1"]), ddof=1)


@pytest.mark.parametrize("bright,dark", [(400.0, 100.0), (1e4, 7e3), (1e5, 7e4)])
@pytest.mark.parametrize("S", [0.2, 0.6, 1.0])
def test_sigma_S_matches_poisson_resampling(bright, dark, S):
    C = 0.9 if bright < 1e3 else 0.5
    mu = counts_for(C, S, bright, dark)
    raw = RawDeerDataset([1.0], {k: [v] for k, v in mu.items()})
    sS = normalize(raw).sS[0]
    ref = _resampled_sigma_S(mu, np.random.default_rng(7))
    assert sS == pytest.approx(ref, rel=0.10)


def test_cutoff_and_itemised_exclusions():
    raw = make_raw([0.9, 0.5, 0.08, 0.3], [0.9, 0.1, 0.9, 0.2])
    raw.counts["dark"][3] = raw.counts["bright"][3]
    out = normalize(raw, cutoff=0.1)
    assert list(out.tau) == [1.0, 2.0]
    assert set(out.excluded) == {2, 3}
    assert "degenerate" in out.excluded[3]
    outD = normalize(make_raw([0.9, 0.5, 0.08], [0.9, 0.1, 0.9]), cutoff=0.1, cutoff_on="D")
    assert list(outD.tau) == [1.0]
    assert set(outD.excluded) == {1, 2}


@given(st.floats(0.2, 1.0), st.floats(0.1, 1.0), st.floats(0.1, 100.0))
def test_normalize_homogeneous(C, S, k):
    raw = make_raw([C], [S])
    a, b = normalize(raw, cutoff=0.0), normalize(raw.scaled(k), cutoff=0.0)
    for f in ("C", "D", "S"):
        assert getattr(b, f)[0] == pytest.approx(getattr(a, f)[0], rel=1e-12)
    # counts x k with variances x k^2 leave the relative errors unchanged
    assert b.sS[0] == pytest.approx(a.sS[0], rel=1e-10)


def test_missing_variance_defaults_and_flags(tmp_path):
    p = tmp_path / "raw.csv"
    p.write_text("tau_us,bright,dark,sig0,sig1,deer0,deer1\n1.0,1000,700,950,750,900,800\n")
    raw = load_raw(p)
    assert set(raw.variance_defaulted) == set(CHANNELS)
    assert raw.variances["bright"][0] == 1000.0
    r2 = RawDeerDataset([1.0], {c: [100.0] for c in CHANNELS}, {"bright": [4.0]})
    assert "bright" not in r2.variance_defaulted and "dark" in r2.variance_defaulted


def test_raw_round_trip(tmp_path):
    raw = make_raw(np.linspace(0.9, 0.2, 6), np.linspace(1, 0.3, 6))
    raw.variances["sig0"] = raw.variances["sig0"] * 1.1
    p = tmp_path / "nv2_deer.csv"
    save_raw(raw, p)
    back = load_raw(p)
    assert back.tau.tobytes() == raw.tau.tobytes()
    for c in CHANNELS:
        assert back.counts[c].tobytes() == raw.counts[c].tobytes()
        assert back.variances[c].tobytes() == raw.variances[c].tobytes()
    assert back.metadata == raw.metadata


def test_normalized_and_curve_round_trip(tmp_path):
    out = normalize(make_raw(np.linspace(0.9, 0.05, 8), np.linspace(1, 0.1, 8) / 1.0001))
    p = tmp_path / "norm.csv"
    save_normalized(out, p)
    back = load_normalized(p)
    for f in ("tau", "C", "sC", "D", "sD", "S", "sS"):
        assert getattr(back, f).tobytes() == getattr(out, f).tobytes()
    assert back.excluded == out.excluded and back.metadata == out.metadata
    c = SignalCurve(np.array([0.1, 0.2, 1 / 3]), np.array([0.99, 0.5, -0.1]), np.array([1e-3, 2e-3, math.pi]),
                    {"depth": 5.0})
    q = tmp_path / "curve.csv"
    c.to_csv(q)
    b2 = load_curve(q)
    assert b2.tau.tobytes() == c.tau.tobytes() and b2.value.tobytes() == c.value.tobytes()
    assert b2.stderr.tobytes() == c.stderr.tobytes() and b2.meta == c.meta


def test_legacy_column_order_rejected(tmp_path):
    p = tmp_path / "legacy.csv"
    p.write_text("tau_us,sig0,sig1,deer0,deer1,bright,dark\n1.0,950,750,900,800,1000,700\n")
    with pytest.raises(SchemaError) as exc:
        load_raw(p)
    msg = str(exc.value)
    assert "signals-first" in msg and "tau_us, bright" not in msg and "'bright', 'dark', 'sig0'" in msg


def test_schema_and_malformed_rows(tmp_path):
    c = SignalCurve([1.0, 2.0], [0.5, 0.4], [0.1, 0.1])
    p = tmp_path / "c.csv"
    save_curve(c, p)
    side = json.loads(sidecar_path(p).read_text())
    side["schema_version"] = 99
    sidecar_path(p).write_text(json.dumps(side))
    with pytest.raises(SchemaError, match="schema version"):
        load_curve(p)
    q = tmp_path / "bad.csv"
    q.write_text("tau_us,value,stderr\n1.0,0.5\n")
    with pytest.raises(SchemaError, match=":2:"):
        load_curve(q)
    q.write_text("tau_us,value,stderr\n1.0,abc,0.1\n")
    with pytest.raises(SchemaError, match="non-numeric"):
        load_curve(q)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        RawDeerDataset([1.0], {c: [-1.0 if c == "sig0" else 5.0] for c in CHANNELS})
