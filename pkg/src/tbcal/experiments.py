"""Reference experiment configurations and the repetition harness.

Shared by the acceptance tests and the scripts in ``scripts/``. Every
repetition of a configuration uses ``repetition_seed(run.seed, r)``, so two
configurations with the same ``seed`` see the same photon realisations and
can be compared pairwise.

Set ``TBCAL_CACHE`` to a directory to keep per-repetition summaries between
sessions; entries are keyed by config hash, seed and software version.
"""

import json
import math
import os
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibrator import INTEGRATED_SPDC, INTEGRATED_STIMULATED, RATIO_SPDC, CalibrationReport
from .correlator import integrate, pool
from .errors import WindowTooShort
from .frontend import DetectorModel, GainDistribution, PulseShape
from .oracle import predict
from .pipeline import Acquisition, RunConfig, acquire, calibrate, repetition_seed
from .source import SourceConfig, generate

TAU_P = 1e-8
DT = 1e-9
BASE_SEED = 2024


def _det(name, eta, pulse="rectangular", gain=None, **noise):
    return DetectorModel(eta=eta, pulse=PulseShape(pulse, TAU_P),
                         gain=gain or GainDistribution(), name=name, **noise)


def criterion1_run(duration=0.1, **kw):
    """Regime II spontaneous run: F = 5e8 /s, V = 1e-3, tau_p = 10 ns."""
    d = dict(
        source=SourceConfig(gain=1e-3, mean_flux=5e8),
        detector1=_det("D1", 0.4),
        detector2=_det("D2", 0.6),
        acquisition=Acquisition(dt=DT, duration=duration, n_segments=50, tau_max=5 * TAU_P),
        seed=BASE_SEED,
        estimators=[{"name": INTEGRATED_SPDC}, {"name": RATIO_SPDC, "M": 1.0, "q1_mean": 1.0}],
    )
    d.update(kw)
    return RunConfig(**d)


def exponential_gain_run(**kw):
    """Criterion 1 with avalanche-like gain (M = 2, same mean) on detector 2."""
    return criterion1_run(detector2=_det("D2", 0.6, gain=GainDistribution("exponential", 1.0)),
                          estimators=[{"name": INTEGRATED_SPDC}], **kw)


def gaussian_pulse_run(**kw):
    """Criterion 1 with a Gaussian pulse of equal width on detector 2."""
    return criterion1_run(detector2=_det("D2", 0.6, pulse="gaussian"),
                          estimators=[{"name": INTEGRATED_SPDC}], **kw)


def misspecified_gain_run(duration=0.02, **kw):
    """Exponential gain on detector 1 (M = 2); ratio estimator with M = 2 and M = 1."""
    return criterion1_run(
        duration=duration,
        detector1=_det("D1", 0.4, gain=GainDistribution("exponential", 1.0)),
        estimators=[{"name": RATIO_SPDC, "M": 2.0, "q1_mean": 1.0},
                    {"name": RATIO_SPDC, "M": 1.0, "q1_mean": 1.0},
                    {"name": INTEGRATED_SPDC}],
        seed=BASE_SEED + 1, **kw)


def amplifier_rms_for(run, factor=10.0):
    """Amplifier densities giving ``factor`` times the per-sample signal shot-noise RMS."""
    pred = predict(run.source, run.detector1, run.detector2, dt=run.acquisition.dt,
                   include_noise=False)
    dt = run.acquisition.dt
    return tuple(factor * math.sqrt(float(a(np.zeros(1))[0]) * dt) for a in (pred.auto1, pred.auto2))


def noisy_run(dark_rate=1e6, background_flux=1e7, amplifier_factor=10.0, **kw):
    """Criterion 1 plus dark counts, background light and amplifier noise on both detectors."""
    base = criterion1_run(**kw)
    rms1, rms2 = amplifier_rms_for(base, amplifier_factor)
    noise = dict(dark_rate=dark_rate, background_flux=background_flux)
    return base.with_(detector1=replace(base.detector1, amplifier_noise_rms=rms1, **noise),
                      detector2=replace(base.detector2, amplifier_noise_rms=rms2, **noise),
                      unpumped_run=True)


def stimulated_run(eta2=0.6, duration=0.01, seed_flux=1e9, gain=0.01, **kw):
    d = dict(
        source=SourceConfig(mode="stimulated", gain=gain, seed_flux=seed_flux),
        detector1=_det("D1", 0.4),
        detector2=_det("D2", eta2),
        acquisition=Acquisition(dt=DT, duration=duration, n_segments=50, tau_max=5 * TAU_P),
        seed=BASE_SEED + 2,
        estimators=[{"name": INTEGRATED_STIMULATED}],
    )
    d.update(kw)
    return RunConfig(**d)


def sweep_run(mean_flux=1e10, **kw):
    """Uncertainty-sweep base: criterion 1 detectors at a higher flux."""
    d = dict(source=SourceConfig(gain=1e-3, mean_flux=mean_flux),
             acquisition=Acquisition(dt=DT, duration=1e-3, n_segments=20, tau_max=5 * TAU_P),
             estimators=[{"name": INTEGRATED_SPDC}], seed=BASE_SEED + 3)
    d.update(kw)
    return criterion1_run(**d)


def smoke_spontaneous(duration=2e-3):
    """Mixed pulse shapes and gain statistics, spontaneous source."""
    return RunConfig(
        source=SourceConfig(gain=1e-3, mean_flux=5e8),
        detector1=_det("D1", 0.4, gain=GainDistribution("exponential", 1.0)),
        detector2=_det("D2", 0.6, pulse="gaussian", gain=GainDistribution("gamma", 1.0, 4.0)),
        acquisition=Acquisition(dt=DT, duration=duration, n_segments=20, tau_max=5 * TAU_P),
        seed=BASE_SEED + 4,
    )


def smoke_stimulated(duration=2e-3):
    """Mixed pulse shapes, seeded source at the largest supported gain."""
    return RunConfig(
        source=SourceConfig(mode="stimulated", gain=0.01, seed_flux=1e9),
        detector1=_det("D1", 0.6, pulse="exponential"),
        detector2=_det("D2", 0.6, gain=GainDistribution("exponential", 1.0)),
        acquisition=Acquisition(dt=DT, duration=duration, n_segments=20, tau_max=5 * TAU_P),
        seed=BASE_SEED + 5,
        estimators=[{"name": INTEGRATED_STIMULATED}],
    )


# -- repetition harness -------------------------------------------------------


def _report_summary(rep):
    if isinstance(rep, CalibrationReport):
        return {"estimator": rep.estimator, "eta_q": rep.eta_q, "stat": rep.stat_uncertainty,
                "stderr": rep.eta_q_stderr, "flags": list(rep.flags)}
    return dict(rep)


def summarize(run, seed):
    """Run the pipeline once and keep the numbers the experiments need."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowTooShort)
        pumped = acquire(run, seed)
        unpumped = acquire(run, seed, pumped=False) if run.unpumped_run else None
        reports = calibrate(run, pumped, unpumped)
        raw = calibrate(run, pumped) if unpumped is not None else reports
        value, err = integrate(pumped.cross, warn=False)
    return {
        "seed": int(seed),
        "reports": [_report_summary(r) for r in reports],
        "raw_reports": [_report_summary(r) for r in raw],
        "cross_integral": value,
        "cross_integral_stderr": err,
        "mean_i1": pumped.means[0],
        "mean_i2": pumped.means[1],
    }


def _cache_file(run, seed):
    root = os.environ.get("TBCAL_CACHE")
    if not root:
        return None
    path = Path(root) / __version__ / run.config_hash[:20]
    path.mkdir(parents=True, exist_ok=True)
    return path / f"{seed}.json"


def repeat(run, n, progress=None):
    """``summarize`` for repetitions ``0..n-1`` of ``run``."""
    out = []
    for r in range(n):
        seed = repetition_seed(run.seed, r)
        cached = _cache_file(run, seed)
        if cached is not None and cached.exists():
            out.append(json.loads(cached.read_text()))
        else:
            s = summarize(run, seed)
            if cached is not None:
                cached.write_text(json.dumps(s))
            out.append(s)
        if progress is not None:
            progress(r + 1, n)
    return out


def estimates(summaries, index=0, raw=False):
    key = "raw_reports" if raw else "reports"
    return np.array([s[key][index]["eta_q"] for s in summaries])


def mean_and_stderr(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def windowed_count_covariances(run, window, n):
    """Per-repetition sample covariance of arm photon counts in windows of ``window``."""
    covs = []
    for r in range(n):
        src = replace(run.source, rng_seed=repetition_seed(run.seed, r))
        c1, c2 = generate(src).windowed_counts(window)
        covs.append(float(np.cov(c1, c2, ddof=1)[0, 1]))
    return np.array(covs)


def oracle_comparison(run, n):
    """Pooled Monte Carlo covariances of ``n`` repetitions against the prediction.

    Returns ``{name: z}`` with per-lag z-scores for cross, auto1 and auto2.
    """
    results = [acquire(run, repetition_seed(run.seed, r), autos=(1, 2)) for r in range(n)]
    pred = predict(run.source, run.detector1, run.detector2, dt=run.acquisition.dt)
    out = {}
    for name in ("cross", "auto1", "auto2"):
        rec = pool([getattr(x, name) for x in results])
        out[name] = (rec.values - getattr(pred, name)(rec.lags)) / rec.stderr
    means = np.array([x.means for x in results])
    m, se = means.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(n)
    out["means"] = (m - np.array([pred.mean_i1, pred.mean_i2])) / se
    return out
