import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sail import cli
from sail.errors import ValidationError
from sail.io import (MAGIC, TRACE_HEADER, fmt, read_csv, read_field, read_traces, write_csv,
                     write_field, write_traces)


def write_cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


# -- file formats ---------------------------------------------------------------------------


def test_saif_roundtrip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.arange(5.0)}
    p = write_field(tmp_path / "x.saif", arrays, {"note": "hi"})
    header, back = read_field(p)
    assert header["note"] == "hi"
    assert all(np.array_equal(arrays[k], back[k]) for k in arrays)
    raw = p.read_bytes()
    assert raw[:4] == MAGIC and struct.unpack_from("<I", raw, 4)[0] == 1


def test_saif_bad_magic(tmp_path):
    p = tmp_path / "bad.saif"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValidationError, match="magic"):
        read_field(p)


@settings(max_examples=100)
@given(x=st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_roundtrips(x):
    assert float(fmt(x)) == x


def test_csv_roundtrip(tmp_path, rng):
    rows = rng.standard_normal((5, 3))
    write_csv(tmp_path / "r.csv", ["a", "b", "c"], rows)
    header, back = read_csv(tmp_path / "r.csv")
    assert header == ["a", "b", "c"] and np.array_equal(back, rows)


def test_trace_csv_roundtrip(tmp_path, g17):
    from conftest import standard_source
    from sail.forward import extract_traces, simulate_coupled
    traj = simulate_coupled(g17, None, standard_source(g17), None, 4.6, 1 / 32, "forward_only")
    tr = extract_traces(traj)
    p = write_traces(tmp_path / "t.csv", tr)
    assert p.read_text().splitlines()[0] == ",".join(TRACE_HEADER)
    back = read_traces(p, g17.hs)
    assert np.array_equal(back.utt, tr.utt) and np.array_equal(back.times, tr.times)


# -- configuration ---------------------------------------------------------------------------


def test_minimal_config_defaults(tmp_path):
    cfg = cli.load_config(write_cfg(tmp_path, {"task": "verify-geometry"}))
    assert cfg["time"]["T"] == 4.6 and cfg["time"]["sigma"] == 0.5 and cfg["time"]["kappa"] == 1.0


def test_short_horizon_rejected(tmp_path):
    with pytest.raises(ValidationError, match="time threshold"):
        cli.load_config(write_cfg(tmp_path, {"time": {"T": 4.0}}), "verify-geometry")


@pytest.mark.parametrize("obj", [{"foo": 1}, {"time": {"foo": 1}}, {"source": {"R": {"foo": 1}}},
                                 {"task": "simulate", "options": {"foo": 1}}])
def test_unknown_keys_rejected(tmp_path, obj):
    with pytest.raises(ValidationError, match="unknown key"):
        cli.load_config(write_cfg(tmp_path, obj), "simulate")


def test_doc_key_allowed(tmp_path):
    cli.load_config(write_cfg(tmp_path, {"_doc": "x", "time": {"_doc": "y"}}), "simulate")


def test_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "time": {\n  "T": 4.6,\n }\n}')
    with pytest.raises(ValidationError, match="line 4"):
        cli.load_config(p, "simulate")


def test_missing_config_file(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "none.json")]) == 2


def test_invert_missing_observation_exit_2(tmp_path):
    p = write_cfg(tmp_path, {"options": {"observation": str(tmp_path / "missing.csv")}})
    assert cli.main(["invert", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("obj", [{"geometry": {"nx": 17, "ny": 9}}, {"time": {"sigma": 1.0}},
                                 {"time": {"mode": "sideways"}}, {"potential": {"family": "x"}}])
def test_preconditions_checked_before_compute(tmp_path, obj):
    with pytest.raises(ValidationError):
        cli.load_config(write_cfg(tmp_path, obj), "simulate")


# -- runs ------------------------------------------------------------------------------------


def test_verify_geometry_outputs(tmp_path):
    p = write_cfg(tmp_path, {"geometry": {"nx": 17, "ny": 17}})
    assert cli.main(["verify-geometry", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "o"
    params = json.loads((out / "params.json").read_text())
    assert set(params) == {"extent", "nx", "ny", "x0", "T", "c", "delta", "sigma", "t0", "t1",
                           "k", "alpha", "tau_grid"}
    side = json.loads((out / "region_mask.json").read_text())
    assert (out / "region_mask.bin").stat().st_size == int(np.prod(side["shape"]))
    man = json.loads((out / "manifest.json").read_text())
    listed = {o["path"] for o in man["outputs"]}
    assert {"params.json", "region_mask.bin", "summary.json", "assumptions.json"} <= listed
    assert man["passed"] is True


def test_overwrite_protection(tmp_path):
    p = write_cfg(tmp_path, {"geometry": {"nx": 9, "ny": 9}})
    args = ["verify-geometry", "--config", str(p), "--out", str(tmp_path / "o")]
    assert cli.main(args) == 0
    assert cli.main(args) == 2
    assert cli.main(args + ["--force"]) == 0


def test_carleman_csv_header(tmp_path):
    p = write_cfg(tmp_path, {"geometry": {"nx": 17, "ny": 17}, "options": {"dt": 1 / 64}})
    assert cli.main(["carleman-check", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    first = (tmp_path / "o" / "carleman.csv").read_text().splitlines()[0]
    assert first == ("tau,grad_term,qsigma_term,bt_1,bt_2,bt_3,bt_4,bt_5,rhs_f,rhs_lot,"
                     "rhs_endpoint,margin")


def test_emit_reports(tmp_path):
    cli.emit_reports({}, tmp_path / "e")
    s = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert s["count"] == 0 and s["passed"] is True
    with pytest.raises(ValidationError, match="--force"):
        cli.emit_reports({"a": {"passed": False}}, tmp_path / "e")
    cli.emit_reports({"a": {"passed": False}}, tmp_path / "e", force=True)
    assert json.loads((tmp_path / "e" / "summary.json").read_text())["passed"] is False


def test_invariant_failure_exit_4(tmp_path):
    p = write_cfg(tmp_path, {"geometry": {"nx": 17, "ny": 17},
                             "options": {"initial": "incompatible"}})
    assert cli.main(["domain-check", "--config", str(p), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "manifest.json").exists()


def test_invert_roundtrip_through_trace_file(tmp_path):
    base = {"geometry": {"nx": 9, "ny": 9}, "time": {"dt": 1 / 64}}
    sim = write_cfg(tmp_path, dict(base, options={"with_source": True}), "sim.json")
    assert cli.main(["simulate", "--config", str(sim), "--out", str(tmp_path / "s")]) == 0
    inv = write_cfg(tmp_path, dict(base, options={"observation": str(tmp_path / "s" / "traces.csv")}),
                    "inv.json")
    assert cli.main(["invert", "--config", str(inv), "--out", str(tmp_path / "i")]) == 0
    header, data = read_csv(tmp_path / "i" / "sweep.csv")
    assert header == ["alpha", "residual", "rel_error"]
    res = json.loads((tmp_path / "i" / "inversion.json").read_text())
    assert res["injectivity"]["full_rank"]


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SAIL_THREADS", "1")
    p = write_cfg(tmp_path, {"geometry": {"nx": 9, "ny": 9}})
    assert cli.main(["verify-geometry", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["verify-geometry", "--config", str(p), "--out", str(tmp_path / "p"),
                     "--threads", "2"]) == 0


def test_repeat_runs_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    p = write_cfg(tmp_path, {"geometry": {"nx": 9, "ny": 9}, "time": {"dt": 1 / 64},
                             "options": {"initial": "compatible"}})
    for d in ("a", "b"):
        assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path / d)]) == 0
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert names == sorted(f.name for f in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
