"""Closed-form predictions and the Monte Carlo uncertainty harness.

Notation: ``F12(tau) = int f1(t) f2(t + tau) dt`` is the overlap of the two
pulse shapes, which is the density of ``Y - X`` for ``X ~ f1``, ``Y ~ f2``.
It has unit integral. Boxcar sampling with step ``dt`` turns it into
``F12_dt(tau) = int F12(tau - v) L(v) dv`` where ``L`` is the unit-area
triangle of half-width ``dt``.

Spontaneous source (flux F, gain V, bunching term Im = V F)::

    <i_k>   = eta_k <q_k> F
    C12(t)  = eta1 eta2 <q1> <q2> (F + Im) F12(t)
    C11(t)  = [eta1 <q1^2> F + eta1^2 <q1>^2 Im] F11(t)

Seeded source (seed flux phi)::

    <i1> = eta1 <q1> V phi          <i2> = eta2 <q2> (1 + V) phi
    C12(t) = 2 eta1 eta2 <q1> <q2> V phi F12(t)
    C11(t) = eta1 <q1^2> V phi F11(t)
    C22(t) = [eta2 <q2^2> (1 + V) + 2 V eta2^2 <q2>^2] phi F22(t)

With ``leading_order=True`` the auto-covariances use the customary forms
``eta1 <q1^2> (F + eta1 Im)`` and ``eta2 <q2^2> (1 + V) phi``, which drop
terms of relative order ``V (M - 1)`` and ``2 V eta2 / M2`` respectively.
"""

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate as sp_integrate
from scipy import stats

from . import rng as rngmod
from .calibrator import GAIN_THRESHOLD, CalibrationReport
from .errors import ConfigError, RegimeUnsupported
from .frontend import EXPONENTIAL, GAUSSIAN, RECTANGULAR
from .source import SPONTANEOUS, STIMULATED_MAX_GAIN

# -- pulse overlaps -----------------------------------------------------------


def pulse_overlap(f1, f2, tau):
    """``F12(tau) = int f1(t) f2(t + tau) dt`` for two :class:`PulseShape`."""
    tau = np.asarray(tau, dtype=float)
    k1, k2 = f1.kind, f2.kind
    if k1 == RECTANGULAR:
        a = f1.width
        return (f2.cdf(tau + a) - f2.cdf(tau)) / a
    if k2 == RECTANGULAR:
        b = f2.width
        return (f1.cdf(b - tau) - f1.cdf(-tau)) / b
    if k1 == EXPONENTIAL and k2 == EXPONENTIAL:
        t1, t2 = f1.width, f2.width
        pos = np.exp(-np.abs(tau) / t2)
        neg = np.exp(-np.abs(tau) / t1)
        return np.where(tau >= 0, pos, neg) / (t1 + t2)
    if k1 == GAUSSIAN and k2 == GAUSSIAN:
        return stats.norm.pdf(tau, scale=math.hypot(f1.sigma, f2.sigma))
    if k1 == EXPONENTIAL and k2 == GAUSSIAN:
        s = f2.sigma
        return stats.exponnorm.pdf(-tau, f1.width / s, scale=s)
    # Gaussian then exponential
    s = f1.sigma
    return stats.exponnorm.pdf(tau, f2.width / s, scale=s)


def _kinks(f1, f2):
    pts = {0.0}
    w = [f.width for f in (f1, f2) if f.kind != GAUSSIAN]
    for x in w:
        pts.update((x, -x))
    if len(w) == 2:
        pts.update((w[0] - w[1], w[1] - w[0]))
    return sorted(pts)


def sampled_pulse_overlap(f1, f2, tau, dt):
    """``F12`` as seen by boxcar samples of step ``dt`` (lags ``tau``)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    kinks = _kinks(f1, f2)
    out = np.empty(tau.shape)
    tol = 1e-12 / min(f1.width, f2.width)

    def integrand(v, t):
        return float(pulse_overlap(f1, f2, t - v)) * (1 - abs(v) / dt) / dt

    for i, t in enumerate(tau.flat):
        # the overlap is smooth between its kinks and so is the triangle
        pts = [t - k for k in kinks if -dt < t - k < dt]
        edges = [-dt]
        for e in sorted({0.0, dt, *pts}):
            if e - edges[-1] > 1e-9 * dt:
                edges.append(e)
        edges[-1] = dt
        out.flat[i] = sum(
            sp_integrate.quad(integrand, lo, hi, args=(t,), epsabs=tol, epsrel=1e-10, limit=200)[0]
            for lo, hi in zip(edges[:-1], edges[1:])
            if hi > lo
        )
    return out


# -- predictions --------------------------------------------------------------


@dataclass
class AnalyticPrediction:
    """Predicted means and covariances of one detector pair.

    ``cross``, ``auto1`` and ``auto2`` are callables of the lag in seconds.
    ``coef_*`` multiply the pulse overlap; ``white*`` is the two-sided
    density of amplifier noise, which appears only at lag 0 of a sampled
    record (as ``white / dt``). Noise-event and amplifier terms are included
    in the auto-covariances and means when ``include_noise`` was set.
    """

    mode: str
    mean_i1: float
    mean_i2: float
    coef_cross: float
    coef_auto1: float
    coef_auto2: float
    white1: float
    white2: float
    d1: object = field(repr=False)
    d2: object = field(repr=False)
    dt: float | None = None
    leading_order: bool = False

    def _overlap(self, f1, f2, tau):
        if self.dt is None:
            return pulse_overlap(f1, f2, tau)
        return sampled_pulse_overlap(f1, f2, tau, self.dt)

    def _white(self, level, tau):
        tau = np.asarray(tau, dtype=float)
        if self.dt is None or level == 0:
            return np.zeros(tau.shape)
        return np.where(np.abs(tau) < 0.5 * self.dt, level / self.dt, 0.0)

    def cross(self, tau):
        if self.coef_cross == 0:
            return np.zeros(np.shape(tau))
        return self.coef_cross * self._overlap(self.d1.pulse, self.d2.pulse, tau)

    def auto1(self, tau):
        base = 0 if self.coef_auto1 == 0 else self.coef_auto1 * self._overlap(self.d1.pulse, self.d1.pulse, tau)
        return base + self._white(self.white1, tau)

    def auto2(self, tau):
        base = 0 if self.coef_auto2 == 0 else self.coef_auto2 * self._overlap(self.d2.pulse, self.d2.pulse, tau)
        return base + self._white(self.white2, tau)

    @property
    def integral_cross(self):
        return self.coef_cross

    @property
    def integral_auto1(self):
        return self.coef_auto1 + self.white1

    @property
    def integral_auto2(self):
        return self.coef_auto2 + self.white2

    def to_dict(self):
        return {
            "mode": self.mode,
            "mean_i1": self.mean_i1,
            "mean_i2": self.mean_i2,
            "integral_cross": self.integral_cross,
            "integral_auto1": self.integral_auto1,
            "integral_auto2": self.integral_auto2,
            "coef_cross": self.coef_cross,
            "coef_auto1": self.coef_auto1,
            "coef_auto2": self.coef_auto2,
            "white1": self.white1,
            "white2": self.white2,
            "dt": self.dt,
            "leading_order": self.leading_order,
        }


def _spontaneous_terms(F, V, d1, d2, leading_order):
    Im = V * F
    g1, g2 = d1.gain, d2.gain
    e1, e2 = d1.eta, d2.eta
    cross = e1 * e2 * g1.mean * g2.mean * (F + Im)
    if leading_order:
        a1 = e1 * g1.second_moment * (F + e1 * Im)
        a2 = e2 * g2.second_moment * (F + e2 * Im)
    else:
        a1 = e1 * g1.second_moment * F + e1**2 * g1.mean**2 * Im
        a2 = e2 * g2.second_moment * F + e2**2 * g2.mean**2 * Im
    return e1 * g1.mean * F, e2 * g2.mean * F, cross, a1, a2


def predict(source, d1, d2, dt=None, *, leading_order=False, include_noise=True,
            gain_threshold=GAIN_THRESHOLD):
    """Analytic means and covariances for ``source`` seen by ``d1`` and ``d2``.

    With ``dt`` the covariances are those of boxcar samples of that step,
    directly comparable with a correlator record.
    """
    V = source.gain
    if source.mode == SPONTANEOUS:
        if V >= gain_threshold:
            raise RegimeUnsupported(f"spontaneous gain V = {V} is outside regime II")
        m1, m2, c, a1, a2 = _spontaneous_terms(source.mean_flux, V, d1, d2, leading_order)
    else:
        if V > STIMULATED_MAX_GAIN:
            raise RegimeUnsupported(f"stimulated gain V = {V} exceeds {STIMULATED_MAX_GAIN}")
        phi = source.seed_flux
        g1, g2 = d1.gain, d2.gain
        e1, e2 = d1.eta, d2.eta
        m1 = e1 * g1.mean * V * phi
        m2 = e2 * g2.mean * (1 + V) * phi
        c = 2 * e1 * e2 * g1.mean * g2.mean * V * phi
        a1 = e1 * g1.second_moment * V * phi
        a2 = e2 * g2.second_moment * (1 + V) * phi
        if not leading_order:
            a2 += 2 * V * phi * e2**2 * g2.mean**2
        if source.spontaneous_background:
            extra = _spontaneous_terms(source.mean_flux, V, d1, d2, leading_order)
            m1, m2, c, a1, a2 = (x + y for x, y in zip((m1, m2, c, a1, a2), extra))
    w1 = w2 = 0.0
    if include_noise:
        m1 += d1.noise_event_rate * d1.gain.mean
        m2 += d2.noise_event_rate * d2.gain.mean
        a1 += d1.noise_event_rate * d1.gain.second_moment
        a2 += d2.noise_event_rate * d2.gain.second_moment
        w1 = d1.amplifier_noise_rms**2
        w2 = d2.amplifier_noise_rms**2
    return AnalyticPrediction(
        mode=source.mode, mean_i1=m1, mean_i2=m2, coef_cross=c, coef_auto1=a1, coef_auto2=a2,
        white1=w1, white2=w2, d1=d1, d2=d2, dt=dt, leading_order=leading_order,
    )


def predicted_relative_uncertainty(F, tau_p, T, eta=1.0):
    """``sqrt(<N>) * sqrt(tau_p / T)`` with ``<N> = eta F tau_p`` detected
    photons per response time."""
    if F < 0 or tau_p <= 0 or not 0 <= eta <= 1:
        raise ConfigError("need F >= 0, tau_p > 0 and eta in [0, 1]")
    if T <= tau_p:
        raise ConfigError(f"measurement time T = {T!r} s must exceed tau_p = {tau_p!r} s")
    return math.sqrt(eta * F * tau_p) * math.sqrt(tau_p / T)


# -- uncertainty sweep ----------------------------------------------------------

MIN_SWEEP_POINTS = 4
MIN_SWEEP_DECADES = 1.0
MIN_REPETITIONS = 30


@dataclass
class SweepResult:
    rows: list
    slope: float
    slope_stderr: float
    intercept: float
    config_hash: str = ""
    estimates: dict = field(default_factory=dict, repr=False)

    @property
    def sigma_at_1s(self):
        """Fitted relative uncertainty extrapolated to T = 1 s."""
        return math.exp(self.intercept)

    def footer(self):
        return {
            "slope_fit": self.slope,
            "slope_stderr": self.slope_stderr,
            "intercept": self.intercept,
            "sigma_at_1s": self.sigma_at_1s,
            "config_hash": self.config_hash,
        }

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["T", "sigma_empirical", "sigma_predicted", "mean_ratio", "n_repetitions"])
        for r in self.rows:
            w.writerow([repr(float(r["T"])), repr(r["sigma_empirical"]), repr(r["sigma_predicted"]),
                        repr(r["mean_ratio"]), r["n_repetitions"]])
        buf.write("# " + json.dumps(self.footer(), sort_keys=True) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _sweep_job(args):
    from .pipeline import simulate_and_calibrate, true_eta_q

    run, seed = args
    reports, _, _ = simulate_and_calibrate(run, seed)
    rep = reports[0]
    if not isinstance(rep, CalibrationReport):
        raise RegimeUnsupported(f"estimator failed: {rep}")
    return rep.eta_q / true_eta_q(run)


def _predicted_for(run, T):
    src, d2 = run.source, run.detector2
    flux = src.mean_flux if src.mode == SPONTANEOUS else (1 + src.gain) * src.seed_flux
    return predicted_relative_uncertainty(flux, d2.pulse.width, T, d2.eta)


def run_uncertainty_sweep(base, T_values, repetitions, *, seed=None, fresh_seeds=True,
                          workers=1, progress=None):
    """Empirical spread of eta_hat / eta versus measurement time.

    Each ``T`` reuses ``base`` with only the acquisition duration changed and
    repeats the full pipeline ``repetitions`` times; the first configured
    estimator is used. Repetition seeds derive from ``seed`` (default
    ``base.seed``), ``T`` index and repetition index; with
    ``fresh_seeds=False`` every repetition reuses ``seed``.
    """
    T_values = sorted(float(t) for t in T_values)
    if len(T_values) < MIN_SWEEP_POINTS:
        raise ConfigError(f"sweep needs at least {MIN_SWEEP_POINTS} T values, got {len(T_values)}")
    if len(set(T_values)) != len(T_values):
        raise ConfigError("sweep T values must be distinct")
    if math.log10(T_values[-1] / T_values[0]) < MIN_SWEEP_DECADES * (1 - 1e-9):
        raise ConfigError("sweep T values must span at least one decade")
    if repetitions < MIN_REPETITIONS:
        raise ConfigError(f"sweep needs at least {MIN_REPETITIONS} repetitions, got {repetitions}")
    seed = base.seed if seed is None else int(seed)
    runs = [base.with_(acquisition=replace(base.acquisition, duration=T)) for T in T_values]
    jobs = []
    for i, run in enumerate(runs):
        for r in range(repetitions):
            s = rngmod.derive_seed(seed, rngmod.REPETITION, i, r) if fresh_seeds else seed
            jobs.append((run, s))
    if workers > 1:
        import multiprocessing

        with ProcessPoolExecutor(workers, mp_context=multiprocessing.get_context("spawn")) as ex:
            ratios = list(ex.map(_sweep_job, jobs))
    else:
        ratios = []
        for j in jobs:
            ratios.append(_sweep_job(j))
            if progress is not None:
                progress(len(ratios), len(jobs))
    ratios = np.asarray(ratios).reshape(len(runs), repetitions)
    rows = []
    for T, run, vals in zip(T_values, runs, ratios):
        rows.append({
            "T": T,
            # shifted data: identical estimates give exactly zero spread
            "sigma_empirical": float((vals - vals[0]).std(ddof=1)),
            "sigma_predicted": _predicted_for(run, T),
            "mean_ratio": float(vals.mean()),
            "n_repetitions": repetitions,
        })
    sig = np.array([r["sigma_empirical"] for r in rows])
    if np.all(sig > 0):
        fit = stats.linregress(np.log(T_values), np.log(sig))
        slope, err, icpt = float(fit.slope), float(fit.stderr), float(fit.intercept)
    else:
        slope = err = icpt = float("nan")
    return SweepResult(rows=rows, slope=slope, slope_stderr=err, intercept=icpt,
                       config_hash=base.config_hash,
                       estimates={T: v.tolist() for T, v in zip(T_values, ratios)})
