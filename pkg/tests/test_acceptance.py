"""Acceptance criteria 1-9, one PASS/FAIL line each.

The Monte Carlo criteria are expensive on a single core (about half an hour
in total); set ``TBCAL_CACHE`` to reuse repetitions between runs. Criteria 2,
3 and 6 reuse the criterion-1 seeds so their comparisons are paired.
"""

import math
import warnings

import numpy as np
import pytest

from tbcal import experiments as E
from tbcal.cli import main
from tbcal.errors import WindowTooShort
from tbcal.oracle import run_uncertainty_sweep
from tbcal.traceio import read_trace, write_trace

from conftest import ACCEPTANCE_LINES, smoke_dict

pytestmark = pytest.mark.slow

N_REP = 30
N_NOISY = 20
V = 1e-3
SWEEP_T = [2.5e-4, 5e-4, 1e-3, 2.5e-3]


def report(capsys, n, checks):
    """Print one line for criterion ``n`` and fail on any failed check."""
    ok = all(c for c, _ in checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: " + "; ".join(d if c else f"{d} [failed]" for c, d in checks)
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def _paired(a, b):
    return E.mean_and_stderr(np.asarray(a) - np.asarray(b))


@pytest.fixture(scope="module")
def c1():
    return E.repeat(E.criterion1_run(), N_REP)


@pytest.fixture(scope="module")
def sweep():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowTooShort)
        return run_uncertainty_sweep(E.sweep_run(), SWEEP_T, N_REP)


def test_criterion_1_recovery(c1, capsys):
    est = E.estimates(c1)
    m, se = E.mean_and_stderr(est)
    sd = est.std(ddof=1)
    stat = float(np.median([s["reports"][0]["stderr"] for s in c1]))
    report(capsys, 1, [
        (abs(m - 0.6) <= 3 * sd, f"mean {m:.5f} vs 0.6 +- 3*{sd:.2e} (sigma_emp, n={est.size})"),
        (abs(m - 0.6 * (1 + V)) <= 3 * se, f"mean vs exact 0.6(1+V) z={(m - 0.6 * (1 + V)) / se:.2f}"),
        (0.5 < stat / sd < 2, f"median reported stderr / sigma_emp {stat / sd:.2f}"),
    ])


def test_criterion_2_excess_noise_invariance(c1, capsys):
    c2 = E.repeat(E.exponential_gain_run(), N_REP)
    d, se = _paired(E.estimates(c2), E.estimates(c1))
    report(capsys, 2, [(abs(d) < 3 * se, f"paired change {d:.2e} +- {se:.2e} (z={d / se:.2f})")])


def test_criterion_3_pulse_shape_invariance(c1, capsys):
    c3 = E.repeat(E.gaussian_pulse_run(), N_REP)
    d, se = _paired(E.estimates(c3), E.estimates(c1))
    report(capsys, 3, [(abs(d) < 3 * se, f"paired change {d:.2e} +- {se:.2e} (z={d / se:.2f})")])


def test_criterion_4_estimator_consistency(c1, capsys):
    mi, si = E.mean_and_stderr(E.estimates(c1, 0))
    mr, sr = E.mean_and_stderr(E.estimates(c1, 1))
    comb = math.hypot(si, sr)
    ms = E.repeat(E.misspecified_gain_run(), 10)
    good, bad = E.estimates(ms, 0), E.estimates(ms, 1)
    mg, sg = E.mean_and_stderr(good)
    mb, sb = E.mean_and_stderr(bad)
    report(capsys, 4, [
        (abs(mi - mr) < 3 * comb, f"integrated {mi:.5f} vs ratio {mr:.5f} (z={(mi - mr) / comb:.2f})"),
        (abs(mg - 0.6) < 3 * sg, f"ratio with true M=2: {mg:.4f} +- {sg:.4f}"),
        (abs(mb - 0.3) < 3 * sb and np.allclose(bad / good, 0.5, rtol=1e-12),
         f"M misspecified as 1: {mb:.4f} (factor {mb / mg:.4f})"),
    ])


def test_criterion_5_stimulated_source(capsys):
    window = 1e-4
    run = E.stimulated_run(duration=0.01, gain=0.01, seed_flux=1e8)
    cov = E.windowed_count_covariances(run, window, 200)
    m, se = E.mean_and_stderr(cov)
    expect = 2 * 0.01 * 1e8 * window
    checks = [(abs(m - expect) < 5 * se, f"count covariance {m:.1f} vs 2V*phi*w={expect:.0f} (z={(m - expect) / se:.2f})")]
    for eta2 in (0.3, 0.6, 0.9):
        est = E.estimates(E.repeat(E.stimulated_run(eta2=eta2), 10))
        me, see = E.mean_and_stderr(est)
        checks.append((abs(me - eta2) < 3 * see, f"eta2={eta2}: {me:.4f} +- {see:.4f}"))
    report(capsys, 5, checks)


def test_criterion_6_noise_immunity(c1, capsys):
    noisy = E.repeat(E.noisy_run(), N_NOISY)
    clean = c1[:N_NOISY]
    d, se = _paired([s["cross_integral"] for s in noisy], [s["cross_integral"] for s in clean])
    raw, rse = E.mean_and_stderr(E.estimates(noisy, 1, raw=True))
    sub, sse = E.mean_and_stderr(E.estimates(noisy, 1))
    integ, ise = E.mean_and_stderr(E.estimates(noisy, 0))
    report(capsys, 6, [
        (abs(d) < 5 * se, f"cross integral change z={d / se:.2f}"),
        (abs(raw - 0.6) > 5 * rse, f"unsubtracted ratio {raw:.4f} biased (z={(raw - 0.6) / rse:.0f})"),
        (abs(sub - 0.6) < 3 * sse, f"subtracted ratio {sub:.4f} +- {sse:.4f}"),
        (abs(integ - 0.6) < 3 * ise, f"subtracted integrated {integ:.4f} +- {ise:.4f}"),
    ])


def test_criterion_7_uncertainty_scaling(c1, sweep, capsys):
    ratios = [r["sigma_empirical"] / r["sigma_predicted"] for r in sweep.rows]
    sd1 = E.estimates(c1).std(ddof=1) / 0.6
    at_1s = sd1 * (1.0 / 0.1) ** sweep.slope
    report(capsys, 7, [
        (abs(sweep.slope + 0.5) <= 0.1, f"slope {sweep.slope:.3f} +- {sweep.slope_stderr:.3f}"),
        (all(0.5 <= r <= 2 for r in ratios), "sigma_emp/sigma_pred " + ",".join(f"{r:.2f}" for r in ratios)),
        (at_1s < 1e-3, f"criterion-1 config extrapolated to 1 s: {at_1s:.2e}"),
    ])


@pytest.mark.xfail(strict=True, reason="empirical sigma does not depend on the flux; see README")
def test_doubling_flux_scales_uncertainty_by_sqrt2(sweep):
    base = next(r for r in sweep.rows if r["T"] == 1e-3)["sigma_empirical"]
    run = E.sweep_run(mean_flux=2e10, seed=E.BASE_SEED + 6)
    doubled = E.estimates(E.repeat(run, N_REP)).std(ddof=1) / 0.6
    assert doubled / base == pytest.approx(math.sqrt(2), rel=0.2)


def test_criterion_8_oracle_agreement(capsys):
    checks = []
    for name, run in (("spontaneous", E.smoke_spontaneous()), ("stimulated", E.smoke_stimulated())):
        z = E.oracle_comparison(run, 50)
        worst = max(float(np.abs(v).max()) for v in z.values())
        checks.append((worst < 5, f"{name} max |z| {worst:.2f} over all lags and means"))
    report(capsys, 8, checks)


@pytest.mark.filterwarnings("ignore:no unpumped traces")
def test_criterion_9_determinism_and_io(tmp_path, capsys):
    import yaml

    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(smoke_dict()))
    for out in ("a", "b"):
        assert main(["simulate", str(cfg), "--out", str(tmp_path / out), "--events"]) == 0
    # the manifest records its own output directory; compare the data files
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix in (".tbc", ".tbe"))
    same_sim = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    traces = [str(tmp_path / "a" / f"trace_{d}.tbc") for d in ("D1", "D2")]
    for out in ("c", "d"):
        assert main(["calibrate", *traces, "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    same_cal = (tmp_path / "c" / "report.json").read_bytes() == (tmp_path / "d" / "report.json").read_bytes()
    tr = read_trace(traces[0])
    write_trace(tmp_path / "copy.tbc", tr)
    back = read_trace(tmp_path / "copy.tbc")
    exact = back.dt == tr.dt and np.array_equal(back.samples.view(np.uint64), tr.samples.view(np.uint64))
    run = E.criterion1_run(duration=2e-3)
    same_summary = E.summarize(run, 5) == E.summarize(run, 5)
    report(capsys, 9, [
        (same_sim, f"simulate byte-identical ({len(files)} files)"),
        (same_cal, "calibrate report byte-identical"),
        (exact, "trace round trip bit-exact"),
        (same_summary, "pipeline deterministic for a fixed seed"),
    ])
