import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as sp_integrate

from tbcal.errors import ConfigError, RegimeUnsupported
from tbcal.frontend import PULSE_KINDS, DetectorModel, GainDistribution, PulseShape
from tbcal.oracle import (
    predict,
    predicted_relative_uncertainty,
    pulse_overlap,
    run_uncertainty_sweep,
    sampled_pulse_overlap,
)
from tbcal.pipeline import Acquisition
from tbcal.source import SourceConfig

from conftest import small_run

PAIRS = [(a, b) for a in PULSE_KINDS for b in PULSE_KINDS]


def _numeric_overlap(f1, f2, tau):
    lo1, hi1 = f1.support()
    lo2, hi2 = f2.support()
    lo, hi = max(lo1, lo2 - tau), min(hi1, hi2 - tau)
    if math.isinf(hi):
        hi = lo + 60 * max(f1.width, f2.width)
    if hi <= lo:
        return 0.0
    w = min(f1.width, f2.width)
    val, _ = sp_integrate.quad(lambda t: float(f1.pdf(t) * f2.pdf(t + tau)), lo, hi,
                               epsabs=1e-10 / w, epsrel=1e-10, limit=400)
    return val


@settings(max_examples=40, deadline=None)
@given(pair=st.sampled_from(PAIRS), r=st.floats(0.3, 3.0), x=st.floats(-4, 4))
def test_overlap_matches_numeric_convolution(pair, r, x):
    f1, f2 = PulseShape(pair[0], 1e-8), PulseShape(pair[1], 1e-8 * r)
    tau = x * 1e-8
    if any(abs(tau - k) < 1e-12 for k in (0, f1.width, -f1.width, f2.width, -f2.width)):
        return
    expect = _numeric_overlap(f1, f2, tau)
    got = float(pulse_overlap(f1, f2, tau))
    assert got == pytest.approx(expect, rel=1e-6, abs=1e-6 / 1e-8)


@pytest.mark.parametrize("k1,k2", PAIRS)
def test_overlap_has_unit_integral(k1, k2):
    f1, f2 = PulseShape(k1, 1e-8), PulseShape(k2, 2e-8)
    kinks = sorted({0.0, 1e-8, -1e-8, 2e-8, -2e-8, 1e-8 - 2e-8, 2e-8 - 1e-8})
    edges = [-1e-6] + kinks + [1e-6]
    total = sum(sp_integrate.quad(lambda t: float(pulse_overlap(f1, f2, t)), a, b,
                                  epsabs=1e-14, epsrel=1e-12, limit=200)[0]
                for a, b in zip(edges[:-1], edges[1:]))
    assert total == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("k1,k2", PAIRS)
def test_sampled_overlap_sums_to_one(k1, k2):
    f1, f2 = PulseShape(k1, 1e-8), PulseShape(k2, 1e-8)
    dt = 1e-9
    lags = np.arange(-300, 301) * dt
    assert sampled_pulse_overlap(f1, f2, lags, dt).sum() * dt == pytest.approx(1.0, abs=1e-9)


def test_sampled_rectangular_peak():
    f = PulseShape("rectangular", 1e-8)
    val = sampled_pulse_overlap(f, f, 0.0, 1e-9)[0]
    assert val == pytest.approx(1e8 * (1 - 0.1 / 3), rel=1e-9)


def _dets(eta1=0.4, eta2=0.6, **kw):
    return (DetectorModel(eta=eta1, pulse=PulseShape("rectangular", 1e-8), **kw),
            DetectorModel(eta=eta2, pulse=PulseShape("gaussian", 1e-8), **kw))


def test_zero_gain_predicts_nothing():
    p = predict(SourceConfig(gain=0.0, coherence_time=1e-12), *_dets())
    lags = np.linspace(-5e-8, 5e-8, 11)
    for f in (p.cross, p.auto1, p.auto2):
        assert not np.any(f(lags))
    assert p.mean_i1 == 0 and p.mean_i2 == 0


def test_stimulated_direct_substitution():
    src = SourceConfig(mode="stimulated", gain=1e-3, seed_flux=1e12)
    p = predict(src, *_dets(1.0, 1.0))
    assert p.mean_i1 == pytest.approx(1e9)
    assert p.mean_i2 == pytest.approx(1.001e12)
    assert p.integral_cross == pytest.approx(2e9)


@pytest.mark.parametrize("src", [
    SourceConfig(gain=1e-3, mean_flux=5e8),
    SourceConfig(mode="stimulated", gain=1e-2, seed_flux=1e9),
])
@pytest.mark.parametrize("k2", PULSE_KINDS)
def test_integral_of_cross_matches_closed_form(src, k2):
    d1 = DetectorModel(eta=0.4, pulse=PulseShape("exponential", 1e-8))
    d2 = DetectorModel(eta=0.6, pulse=PulseShape(k2, 2e-8))
    p = predict(src, d1, d2)
    edges = [-1e-6, -2e-8, -1e-8, 0.0, 1e-8, 2e-8, 1e-6]
    total = sum(sp_integrate.quad(lambda t: float(p.cross(t)), a, b, epsabs=0, epsrel=1e-12,
                                  limit=200)[0]
                for a, b in zip(edges[:-1], edges[1:]))
    assert total == pytest.approx(p.integral_cross, rel=1e-9)


def test_reductions():
    lags = np.linspace(-5e-8, 5e-8, 11)
    zero_phi = predict(SourceConfig(mode="stimulated", gain=1e-2, seed_flux=0.0), *_dets())
    zero_eta = predict(SourceConfig(gain=1e-3, mean_flux=1e9), *_dets(0.0, 0.0))
    for p in (zero_phi, zero_eta):
        assert not np.any(p.cross(lags)) and not np.any(p.auto1(lags)) and not np.any(p.auto2(lags))


def test_regime_guards():
    with pytest.raises(RegimeUnsupported):
        predict(SourceConfig(gain=0.5, coherence_time=1e-12), *_dets())
    with pytest.raises(RegimeUnsupported):
        predict(SourceConfig(mode="stimulated", gain=0.02, seed_flux=1e9), *_dets())


def test_leading_order_forms():
    src = SourceConfig(mode="stimulated", gain=1e-2, seed_flux=1e9)
    d1, d2 = _dets(gain=GainDistribution("exponential", 1.0))
    exact, lead = predict(src, d1, d2), predict(src, d1, d2, leading_order=True)
    assert lead.coef_auto2 == pytest.approx(0.6 * 2 * 1.01 * 1e9)
    assert exact.coef_auto2 - lead.coef_auto2 == pytest.approx(2 * 1e-2 * 1e9 * 0.36)
    assert exact.coef_cross == lead.coef_cross


def test_noise_terms_enter_autos_only():
    src = SourceConfig(gain=1e-3, mean_flux=5e8)
    quiet = predict(src, *_dets(), dt=1e-9)
    noisy = predict(src, *_dets(dark_rate=1e6, amplifier_noise_rms=1e3), dt=1e-9)
    assert noisy.coef_cross == quiet.coef_cross
    assert noisy.coef_auto1 == pytest.approx(quiet.coef_auto1 + 1e6)
    # lag 0 gains the dark shot noise plus the white density rms^2 / dt
    shape0 = quiet.auto1(0.0) / quiet.coef_auto1
    assert noisy.auto1(0.0) - quiet.auto1(0.0) == pytest.approx(1e6 * shape0 + 1e3**2 / 1e-9)
    assert noisy.mean_i1 == pytest.approx(quiet.mean_i1 + 1e6)


def test_predicted_relative_uncertainty():
    tp = 1e-8
    assert predicted_relative_uncertainty(1 / tp, tp, 1e6 * tp) == pytest.approx(1e-3)
    # criterion-1 operating point at one second
    assert predicted_relative_uncertainty(5e8, 1e-8, 1.0, eta=0.6) < 1e-3
    with pytest.raises(ConfigError):
        predicted_relative_uncertainty(5e8, 1e-8, 1e-8)


def _tiny_run():
    return small_run(acquisition=Acquisition(dt=1e-9, duration=1e-5, n_segments=2, tau_max=5e-8))


@pytest.mark.parametrize("T,reps", [
    ([1e-5], 30),
    ([1e-5, 2e-5, 4e-5, 8e-5], 30),
    ([1e-5, 2e-5, 5e-5, 1e-4], 29),
])
def test_sweep_preconditions(T, reps):
    with pytest.raises(ConfigError):
        run_uncertainty_sweep(_tiny_run(), T, reps)


@pytest.mark.filterwarnings("ignore::tbcal.errors.WindowTooShort")
def test_sweep_identical_seeds_have_zero_scatter(tmp_path):
    res = run_uncertainty_sweep(_tiny_run(), [1e-5, 2e-5, 5e-5, 1e-4], 30, fresh_seeds=False)
    assert all(r["sigma_empirical"] == 0 for r in res.rows)
    assert math.isnan(res.slope)
    text = res.to_csv(tmp_path / "s.csv")
    assert text.splitlines()[0] == "T,sigma_empirical,sigma_predicted,mean_ratio,n_repetitions"
    assert text.splitlines()[-1].startswith("# {")


@pytest.mark.filterwarnings("ignore::tbcal.errors.WindowTooShort")
def test_sweep_fresh_seeds_scatter_and_workers_agree():
    T = [1e-5, 2e-5, 5e-5, 1e-4]
    a = run_uncertainty_sweep(_tiny_run(), T, 30)
    assert all(r["sigma_empirical"] > 0 for r in a.rows)
    assert np.isfinite(a.slope)
    b = run_uncertainty_sweep(_tiny_run(), T, 30, workers=2)
    assert a.estimates == b.estimates
