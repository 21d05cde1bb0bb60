import copy
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from tbcal.cli import main
from tbcal.errors import ConfigError, DataError
from tbcal.frontend import CurrentTrace
from tbcal.pipeline import config_hash, load_config, run_config_from_dict
from tbcal.traceio import load_trace, read_trace, read_trace_csv, write_trace, write_trace_csv

from conftest import smoke_dict


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(smoke_dict()))
    return p


def _write(tmp_path, d, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return p


def _report(capsys):
    return json.loads(capsys.readouterr().out)


def test_validate_prints_hash(cfg_path, capsys):
    assert main(["validate-config", str(cfg_path)]) == 0
    doc = _report(capsys)
    assert len(doc["config_hash"]) == 64
    assert doc["config"]["source"]["coherence_time"] == pytest.approx(2e-12)


def test_exit_codes(tmp_path, cfg_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("source: [\n")
    assert main(["validate-config", str(bad)]) == 3
    assert "bad.yaml:2" in capsys.readouterr().err
    d = smoke_dict()
    d["source"] = {"mode": "spontaneous", "gain": 1.5, "coherence_time": 1e-9}
    assert main(["simulate", str(_write(tmp_path, d)), "--out", str(tmp_path / "x")]) == 5
    junk = tmp_path / "junk.tbc"
    junk.write_bytes(b"TBCAL\x09\x00" + b"\x00" * 40)
    assert main(["calibrate", str(junk), str(junk), "--tau-max", "5e-8", "--n-segments", "4"]) == 4
    assert main(["sweep", str(cfg_path), "--durations", "1e-3"]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_field_precise_errors(tmp_path):
    d = smoke_dict()
    d["detectors"][1]["pulse"] = {"kind": "triangle", "width": 1e-8}
    with pytest.raises(ConfigError, match=r"detectors\[1\]\.pulse"):
        load_config(_write(tmp_path, d))
    d = smoke_dict()
    d["acquisition"]["dt"] = 5e-9
    with pytest.raises(ConfigError, match="acquisition.dt"):
        load_config(_write(tmp_path, d))
    d = smoke_dict()
    d["acquisition"]["bogus"] = 1
    with pytest.raises(ConfigError, match="bogus"):
        load_config(_write(tmp_path, d))


def _shuffled(d, rng):
    if isinstance(d, dict):
        keys = list(d)
        rng.shuffle(keys)
        return {k: _shuffled(d[k], rng) for k in keys}
    if isinstance(d, list):
        return [_shuffled(x, rng) for x in d]
    return d


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_config_hash_ignores_key_order(seed):
    d = smoke_dict()
    e = _shuffled(copy.deepcopy(d), np.random.default_rng(seed))
    assert config_hash(d) == config_hash(e)
    assert run_config_from_dict(d).config_hash == run_config_from_dict(e).config_hash


def test_simulate_is_deterministic_and_headers_match(tmp_path, cfg_path, capsys):
    for out in ("a", "b"):
        assert main(["simulate", str(cfg_path), "--out", str(tmp_path / out), "--events"]) == 0
    for name in ("trace_D1.tbc", "trace_D2.tbc", "events.tbe"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    tr = read_trace(tmp_path / "a" / "trace_D1.tbc")
    run = load_config(cfg_path)
    assert tr.dt == run.acquisition.dt
    assert tr.samples.size == round(run.acquisition.duration / run.acquisition.dt)
    assert tr.meta["detector"] == "D1"
    assert tr.meta["config_hash"] == run.config_hash and tr.meta["seed"] == run.seed


def test_calibrate_end_to_end(tmp_path, cfg_path, capsys):
    main(["simulate", str(cfg_path), "--out", str(tmp_path / "s")])
    capsys.readouterr()
    t1, t2 = (str(tmp_path / "s" / f"trace_{n}.tbc") for n in ("D1", "D2"))
    with pytest.warns(UserWarning, match="background subtraction skipped"):
        assert main(["calibrate", t1, t2, "--config", str(cfg_path), "--out", str(tmp_path / "c")]) == 0
    doc = _report(capsys)
    integ, ratio = doc["reports"]
    assert integ["estimator"] == "IntegratedSPDC"
    assert abs(integ["eta_q"] - 0.6) < 3 * integ["eta_q_stderr"]
    assert "background_subtraction_skipped" in ratio["flags"]
    assert doc["config_hash"] == load_config(cfg_path).config_hash
    for f in ("report.json", "cross.csv", "cross.json", "auto1.csv", "auto1.json"):
        assert (tmp_path / "c" / f).exists()
    # the same inputs give a byte-identical report
    with pytest.warns(UserWarning):
        main(["calibrate", t1, t2, "--config", str(cfg_path), "--out", str(tmp_path / "d")])
    assert (tmp_path / "c" / "report.json").read_bytes() == (tmp_path / "d" / "report.json").read_bytes()


def test_csv_ingestion_matches_binary(tmp_path, cfg_path, capsys):
    d = smoke_dict()
    d["acquisition"].update(duration=2e-4, n_segments=2)
    d["estimators"] = [{"name": "IntegratedSPDC"}]
    cfg = _write(tmp_path, d)
    main(["simulate", str(cfg), "--out", str(tmp_path / "s")])
    paths = [tmp_path / "s" / f"trace_{n}.tbc" for n in ("D1", "D2")]
    csvs = []
    for p in paths:
        c = p.with_suffix(".csv")
        write_trace_csv(c, read_trace(p))
        csvs.append(str(c))
    capsys.readouterr()
    main(["calibrate", *map(str, paths), "--config", str(cfg), "--out", str(tmp_path / "b")])
    a = _report(capsys)["reports"][0]
    main(["calibrate", *csvs, "--config", str(cfg), "--out", str(tmp_path / "c")])
    b = _report(capsys)["reports"][0]
    assert a["eta_q"] == b["eta_q"] and a["stat_uncertainty"] == b["stat_uncertainty"]


def test_calibrate_with_unpumped_and_plain_options(tmp_path, capsys):
    d = smoke_dict()
    d["unpumped_run"] = True
    for det in d["detectors"]:
        det.update(dark_rate=1e7, amplifier_noise_rms=1e4)
    cfg = _write(tmp_path, d)
    main(["simulate", str(cfg), "--out", str(tmp_path / "s")])
    capsys.readouterr()
    s = tmp_path / "s"
    rc = main(["calibrate", str(s / "trace_D1.tbc"), str(s / "trace_D2.tbc"),
               "--unpumped", str(s / "unpumped_D1.tbc"), str(s / "unpumped_D2.tbc"),
               "--estimator", "RatioSPDC", "--M", "1", "--q1-mean", "1",
               "--tau-max", "5e-8", "--n-segments", "10", "--out", str(tmp_path / "c")])
    assert rc == 0
    rep = _report(capsys)["reports"][0]
    assert abs(rep["eta_q"] - 0.6) < 3 * rep["eta_q_stderr"]
    assert "background_subtraction_skipped" not in rep["flags"]


def test_calibrate_rejects_mismatched_dt(tmp_path):
    a = CurrentTrace(1e-9, np.zeros(100_000), meta={"detector": "A"})
    b = CurrentTrace(2e-9, np.zeros(100_000), meta={"detector": "B"})
    write_trace(tmp_path / "a.tbc", a)
    write_trace(tmp_path / "b.tbc", b)
    assert main(["calibrate", str(tmp_path / "a.tbc"), str(tmp_path / "b.tbc"),
                 "--tau-max", "5e-8", "--n-segments", "4"]) == 4


def test_output_dir_override(tmp_path, cfg_path, monkeypatch, capsys):
    monkeypatch.setenv("TBCAL_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["simulate", str(cfg_path)]) == 0
    assert (tmp_path / "env" / "trace_D1.tbc").exists()


def test_predict_dump(tmp_path, cfg_path, capsys):
    assert main(["predict", str(cfg_path), "--lags-csv", str(tmp_path / "p.csv")]) == 0
    doc = _report(capsys)
    assert doc["regime"] == "II"
    assert doc["prediction"]["integral_cross"] == pytest.approx(0.24 * 5e8 * 1.001)
    table = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert table.shape == (101, 4)


def test_sweep_output_independent_of_threads(tmp_path, capsys):
    d = smoke_dict()
    d["acquisition"].update(duration=1e-5, n_segments=2)
    d["estimators"] = [{"name": "IntegratedSPDC"}]
    cfg = _write(tmp_path, d)
    args = ["sweep", str(cfg), "--durations", "1e-5", "2e-5", "5e-5", "1e-4", "--repetitions", "30"]
    with pytest.warns(UserWarning):
        assert main(args + ["--csv", str(tmp_path / "one.csv")]) == 0
    assert main(["--threads", "2"] + args + ["--csv", str(tmp_path / "two.csv")]) == 0
    one, two = (tmp_path / "one.csv").read_text(), (tmp_path / "two.csv").read_text()
    assert one == two
    footer = json.loads(one.splitlines()[-1][2:])
    assert {"slope_fit", "sigma_at_1s", "config_hash"} <= set(footer)


# -- trace files --------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 500), seed=st.integers(0, 2**31), t0=st.floats(-1, 1),
       dt=st.floats(1e-12, 1e-3))
def test_trace_round_trip_bit_exact(tmp_path_factory, n, seed, t0, dt):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) * 10.0 ** rng.integers(-300, 300, size=n)
    tr = CurrentTrace(dt, x, t0, {"detector": "D9", "seed": seed, "note": "ü"})
    p = tmp_path_factory.mktemp("rt") / "t.tbc"
    write_trace(p, tr)
    back = read_trace(p)
    assert back.samples.tobytes() == x.astype("<f8").tobytes()
    assert (back.dt, back.t0) == (dt, t0)
    assert {k: back.meta[k] for k in tr.meta} == tr.meta


def test_csv_trace_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=1000)
    tr = CurrentTrace(1e-9, x, 0.0, {"detector": "D1"})
    write_trace_csv(tmp_path / "t.csv", tr)
    back = load_trace(tmp_path / "t.csv")
    assert np.array_equal(back.samples, x) and back.dt == 1e-9


def test_plain_csv_infers_dt(tmp_path):
    t = np.arange(50) * 2e-9
    np.savetxt(tmp_path / "p.csv", np.column_stack([t, np.ones(50)]), delimiter=",",
               header="time,value", comments="")
    assert read_trace_csv(tmp_path / "p.csv").dt == pytest.approx(2e-9)
    t[10] += 1e-9
    np.savetxt(tmp_path / "q.csv", np.column_stack([t, np.ones(50)]), delimiter=",",
               header="time,value", comments="")
    with pytest.raises(DataError):
        read_trace_csv(tmp_path / "q.csv")


def test_trace_format_errors(tmp_path):
    tr = CurrentTrace(1e-9, np.ones(10), meta={"detector": "D"})
    p = tmp_path / "t.tbc"
    write_trace(p, tr)
    raw = p.read_bytes()
    (tmp_path / "v.tbc").write_bytes(raw[:5] + b"\x02\x00" + raw[7:])
    with pytest.raises(DataError, match="version"):
        read_trace(tmp_path / "v.tbc")
    (tmp_path / "s.tbc").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="declares"):
        read_trace(tmp_path / "s.tbc")
