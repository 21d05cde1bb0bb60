"""Quantum-efficiency estimators built on current correlation records.

All estimators return the charge produced per incident photon at detector 2,
``eta2 * <q2>``, in the charge units of the traces.

ratio_spdc / ratio_stimulated
    ``factor * M * <q1> * C12(tau) / C11(tau)``; needs the excess noise
    factor ``M`` of detector 1 and equal pulse shapes.
integrated_spdc / integrated_stimulated
    ``factor * (integral of C12) / <i1>``; needs neither ``M`` nor the pulse
    shapes.

``factor`` is 1 for spontaneous and 1/2 for stimulated down-conversion,
where the amplified seed makes the cross-covariance twice as large.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .correlator import CorrelationRecord, integrate
from .errors import DataError, DegenerateDenominator, RegimeUnsupported

RATIO_SPDC = "RatioSPDC"
INTEGRATED_SPDC = "IntegratedSPDC"
RATIO_STIMULATED = "RatioStimulated"
INTEGRATED_STIMULATED = "IntegratedStimulated"
ESTIMATORS = (RATIO_SPDC, INTEGRATED_SPDC, RATIO_STIMULATED, INTEGRATED_STIMULATED)

OVERLAP_THRESHOLD = 0.1
GAIN_THRESHOLD = 0.01
# relative uncertainty of the crystal optical-loss measurement
CRYSTAL_LOSS_UNCERTAINTY = 2e-3


def classify_regime(flux, tau_p, gain, overlap_threshold=OVERLAP_THRESHOLD,
                    gain_threshold=GAIN_THRESHOLD):
    """Operating regime: "III" if gain >= gain_threshold, "I" if pulses rarely
    overlap (flux * tau_p <= overlap_threshold), otherwise "II"."""
    if min(flux, tau_p, gain) < 0:
        raise ValueError("regime inputs must be non-negative")
    if gain >= gain_threshold:
        return "III"
    if flux * tau_p <= overlap_threshold:
        return "I"
    return "II"


@dataclass
class CalibrationReport:
    estimator: str
    eta_q: float
    stat_uncertainty: float
    regime: str = "II"
    eta: float | None = None
    systematic_terms: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    variants: dict = field(default_factory=dict)

    @property
    def eta_q_stderr(self):
        return abs(self.eta_q) * self.stat_uncertainty

    @property
    def total_uncertainty(self):
        """Root-sum-square of the statistical and all systematic terms."""
        return math.sqrt(self.stat_uncertainty**2 + sum(v**2 for _, v in self.systematic_terms))

    def to_dict(self):
        d = asdict(self)
        d["systematic_terms"] = [list(t) for t in self.systematic_terms]
        d["total_uncertainty"] = self.total_uncertainty
        d["eta_q_stderr"] = self.eta_q_stderr
        d["software_version"] = __version__
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable, **kw)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _finish(estimator, eta_q, rel, *, regime, q2_mean, loss_correction, loss_uncertainty,
            inputs, flags=None, variants=None):
    if regime == "III":
        raise RegimeUnsupported("no estimator is defined in regime III")
    flags = list(flags or [])
    if regime is None:
        regime = "II"
        flags.append("regime_assumed")
    eta_q = eta_q * (1 + loss_correction)
    systematic = [("crystal_optical_loss", float(loss_uncertainty))]
    eta = None
    if q2_mean is not None:
        candidate = eta_q / q2_mean
        if 0 < candidate <= 1:
            eta = candidate
        else:
            flags.append("eta_outside_unit_interval")
    if not rel > 0:
        # an exactly noise-free input still carries rounding error
        rel = np.finfo(float).eps
    return CalibrationReport(
        estimator=estimator,
        eta_q=float(eta_q),
        stat_uncertainty=float(rel),
        regime=regime,
        eta=None if eta is None else float(eta),
        systematic_terms=systematic,
        inputs=inputs,
        flags=flags,
        variants=variants or {},
    )


def _block_cov(x, y):
    """Covariance of the means of two per-block series."""
    if x is None or y is None or len(x) != len(y) or len(x) < 2:
        return 0.0
    return float(np.cov(x, y, ddof=1)[0, 1] / len(x))


def _ratio(num, s_num, den, s_den, cov):
    r = num / den
    var = (s_num**2 + r**2 * s_den**2 - 2 * r * cov) / den**2
    return r, math.sqrt(max(var, 0.0))


def _ratio_estimate(cross, auto1, M, q1_mean, tau_eval, factor, tau_avg):
    i_c = cross.index(tau_eval)
    i_a = auto1.index(tau_eval)
    c, sc = cross.values[i_c], cross.stderr[i_c]
    a, sa = auto1.values[i_a], auto1.stderr[i_a]
    if not a > 2 * sa:
        raise DegenerateDenominator(
            f"auto-covariance at lag {tau_eval:g} s ({a:.4g} +- {sa:.4g}) is consistent with zero"
        )
    cov = _block_cov(
        None if cross.block_values is None else cross.block_values[:, i_c],
        None if auto1.block_values is None else auto1.block_values[:, i_a],
    )
    r, sr = _ratio(c, sc, a, sa, cov)
    scale = factor * M * q1_mean
    est = scale * r
    rel = abs(sr / r) if r != 0 else math.inf
    variants = {}
    if tau_avg is not None:
        sym = auto1.symmetric()
        sel_c = np.abs(cross.lags) <= tau_avg * (1 + 1e-9)
        sel_a = np.abs(sym.lags) <= tau_avg * (1 + 1e-9)
        if sel_c.sum() != sel_a.sum():
            raise DataError("cross and auto lag grids differ")
        num = cross.values[sel_c].sum()
        den = sym.values[sel_a].sum()
        bc = None if cross.block_values is None else cross.block_values[:, sel_c].sum(axis=1)
        ba = None if sym.block_values is None else sym.block_values[:, sel_a].sum(axis=1)
        s_num = bc.std(ddof=1) / math.sqrt(bc.size) if bc is not None else math.sqrt((cross.stderr[sel_c] ** 2).sum())
        s_den = math.sqrt((sym.stderr[sel_a] ** 2).sum()) if ba is None or auto1.meta.get("background_subtracted") \
            else ba.std(ddof=1) / math.sqrt(ba.size)
        if den > 2 * s_den:
            rv, srv = _ratio(num, s_num, den, s_den, _block_cov(bc, ba))
            variants["lag_averaged"] = {
                "eta_q": float(scale * rv),
                "stat_uncertainty": float(abs(srv / rv)) if rv else math.inf,
                "tau_avg": float(tau_avg),
            }
    return est, rel, variants


def estimate_ratio_spdc(cross, auto1, M, q1_mean, tau_eval=0.0, *, tau_avg=None, regime=None,
                        q2_mean=None, loss_correction=0.0,
                        loss_uncertainty=CRYSTAL_LOSS_UNCERTAINTY):
    """``eta2 <q2> = M <q1> C12(tau) / C11(tau)``.

    ``auto1`` should already be background-subtracted (see
    :func:`subtract_background`). With ``tau_avg`` the ratio of lag sums over
    ``|tau| <= tau_avg`` is reported as the ``lag_averaged`` variant.
    """
    est, rel, variants = _ratio_estimate(cross, auto1, M, q1_mean, tau_eval, 1.0, tau_avg)
    flags = [] if auto1.meta.get("background_subtracted") else ["auto_not_background_subtracted"]
    return _finish(RATIO_SPDC, est, rel, regime=regime, q2_mean=q2_mean,
                   loss_correction=loss_correction, loss_uncertainty=loss_uncertainty,
                   inputs={"M": M, "q1_mean": q1_mean, "tau_eval": tau_eval,
                           "cross": cross.meta, "auto1": auto1.meta},
                   flags=flags, variants=variants)


def estimate_ratio_stimulated(cross, auto1, M, q1_mean, tau_eval=0.0, *, tau_avg=None,
                              regime=None, q2_mean=None, loss_correction=0.0,
                              loss_uncertainty=CRYSTAL_LOSS_UNCERTAINTY):
    """``eta2 <q2> = (1/2) M <q1> C12(tau) / C11(tau)`` for a seeded source."""
    est, rel, variants = _ratio_estimate(cross, auto1, M, q1_mean, tau_eval, 0.5, tau_avg)
    flags = [] if auto1.meta.get("background_subtracted") else ["auto_not_background_subtracted"]
    return _finish(RATIO_STIMULATED, est, rel, regime=regime, q2_mean=q2_mean,
                   loss_correction=loss_correction, loss_uncertainty=loss_uncertainty,
                   inputs={"M": M, "q1_mean": q1_mean, "tau_eval": tau_eval,
                           "cross": cross.meta, "auto1": auto1.meta},
                   flags=flags, variants=variants)


def _integrated(estimator, factor, cross, mean_i1, mean_i1_stderr, regime, q2_mean,
                loss_correction, loss_uncertainty):
    if not mean_i1 > 0:
        raise DegenerateDenominator(f"mean current of detector 1 is {mean_i1!r}")
    value, err = integrate(cross)
    flags = [] if cross.meta.get("window_decayed", True) else ["window_too_short"]
    est = factor * value / mean_i1
    rel = math.hypot(err / value, mean_i1_stderr / mean_i1) if value != 0 else math.inf
    return _finish(estimator, est, rel, regime=regime, q2_mean=q2_mean,
                   loss_correction=loss_correction, loss_uncertainty=loss_uncertainty,
                   inputs={"mean_i1": mean_i1, "integral": value, "integral_stderr": err,
                           "cross": cross.meta},
                   flags=flags)


def estimate_integrated_spdc(cross, mean_i1, *, mean_i1_stderr=0.0, regime=None, q2_mean=None,
                             loss_correction=0.0, loss_uncertainty=CRYSTAL_LOSS_UNCERTAINTY):
    """``eta2 <q2> = (integral of C12 over tau) / <i1>``.

    ``mean_i1`` must be the photocurrent of detector 1 with dark and background
    current removed.
    """
    return _integrated(INTEGRATED_SPDC, 1.0, cross, mean_i1, mean_i1_stderr, regime, q2_mean,
                       loss_correction, loss_uncertainty)


def estimate_integrated_stimulated(cross, mean_i1, *, mean_i1_stderr=0.0, regime=None,
                                   q2_mean=None, loss_correction=0.0,
                                   loss_uncertainty=CRYSTAL_LOSS_UNCERTAINTY):
    """``eta2 <q2> = (1/2) (integral of C12 over tau) / <i1>`` for a seeded source."""
    return _integrated(INTEGRATED_STIMULATED, 0.5, cross, mean_i1, mean_i1_stderr, regime,
                       q2_mean, loss_correction, loss_uncertainty)


def subtract_background(auto_pumped, auto_unpumped):
    """Pumped minus unpumped covariance, errors added in quadrature.

    The result's ``means`` are the pumped means minus the unpumped ones, i.e.
    the signal photocurrents.
    """
    p, u = auto_pumped, auto_unpumped
    if p.kind != u.kind or p.lags.shape != u.lags.shape or not math.isclose(p.dt, u.dt, rel_tol=1e-12) \
            or not np.allclose(p.lags, u.lags, rtol=0, atol=1e-6 * p.dt):
        raise DataError("pumped and unpumped records have different lag grids")
    blocks = None if p.block_values is None else p.block_values - u.values
    meta = dict(p.meta)
    meta["background_subtracted"] = True
    meta["unpumped_integral_var"] = integrate(u, warn=False)[1] ** 2
    return CorrelationRecord(
        lags=p.lags.copy(),
        values=p.values - u.values,
        stderr=np.hypot(p.stderr, u.stderr),
        n_segments=p.n_segments,
        means=tuple(a - b for a, b in zip(p.means, u.means)),
        dt=p.dt,
        kind=p.kind,
        block_values=blocks,
        block_means=p.block_means,
        meta=meta,
    )
