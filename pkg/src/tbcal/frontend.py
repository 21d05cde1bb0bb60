"""Analog detector front-end: photon events to sampled photocurrent.

A detection event at time ``t_n`` contributes ``q_n * f(t - t_n)`` to the
current, where ``f`` has unit area and ``q_n`` is a random charge. Samples are
boxcar averages: sample ``m`` is the charge collected in
``[t0 + m*dt, t0 + (m+1)*dt)`` divided by ``dt``, so charge is conserved
exactly for any event phase.

Pulse widths follow one convention for every shape: ``width`` is the inverse
of the peak height, so all shapes reach ``1/width`` at their maximum.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, signal, special

from . import _kernels
from . import rng as rngmod
from .errors import ConfigError

RECTANGULAR = "rectangular"
EXPONENTIAL = "exponential"
GAUSSIAN = "gaussian"
PULSE_KINDS = (RECTANGULAR, EXPONENTIAL, GAUSSIAN)

DETERMINISTIC = "deterministic"
EXPONENTIAL_GAIN = "exponential"
GAMMA = "gamma"
GAIN_KINDS = (DETERMINISTIC, EXPONENTIAL_GAIN, GAMMA)

# Gaussian pulses are cut at this many standard deviations (tail mass ~1e-15).
GAUSS_CUTOFF = 8.0
# Minimum samples per pulse width.
MIN_SAMPLES_PER_WIDTH = 10
NOISE_CHUNK = 1 << 20
_AREA_RTOL = 1e-9


@dataclass(frozen=True)
class PulseShape:
    kind: str = RECTANGULAR
    width: float = 1e-8

    def __post_init__(self):
        if self.kind not in PULSE_KINDS:
            raise ConfigError(f"pulse.kind: expected one of {PULSE_KINDS}, got {self.kind!r}")
        if not self.width > 0 or not np.isfinite(self.width):
            raise ConfigError(f"pulse.width must be > 0, got {self.width!r}")
        area = self.numerical_area()
        if abs(area - 1) > _AREA_RTOL:
            raise ConfigError(f"pulse {self.kind} area {area!r} is not 1")

    @property
    def sigma(self):
        """Standard deviation of the Gaussian shape."""
        return self.width / math.sqrt(2 * math.pi)

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        w = self.width
        if self.kind == RECTANGULAR:
            return np.where((t >= 0) & (t < w), 1 / w, 0.0)
        if self.kind == EXPONENTIAL:
            return np.where(t >= 0, np.exp(-np.maximum(t, 0) / w) / w, 0.0)
        s = self.sigma
        return np.exp(-0.5 * (t / s) ** 2) / (s * math.sqrt(2 * math.pi))

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        w = self.width
        if self.kind == RECTANGULAR:
            return np.clip(t / w, 0.0, 1.0)
        if self.kind == EXPONENTIAL:
            return -np.expm1(-np.maximum(t, 0) / w)
        return special.ndtr(t / self.sigma)

    def support(self):
        """Interval outside of which the pulse is (numerically) zero."""
        if self.kind == RECTANGULAR:
            return 0.0, self.width
        if self.kind == EXPONENTIAL:
            return 0.0, math.inf
        return -GAUSS_CUTOFF * self.sigma, GAUSS_CUTOFF * self.sigma

    def numerical_area(self):
        """Area by adaptive quadrature, in units of the width."""
        w = self.width
        lo, hi = self.support()
        if self.kind == GAUSSIAN:
            lo, hi = -math.inf, math.inf
        pts = None if math.isinf(hi) or math.isinf(lo) else [lo / w, hi / w]
        val, _ = integrate.quad(lambda x: float(self.pdf(x * w)) * w, lo / w, hi / w,
                                points=pts, epsabs=0, epsrel=1e-12, limit=200)
        return val

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GainDistribution:
    """Charge per detection event, in charge units.

    ``gamma`` uses ``shape`` k; its excess noise factor is ``1 + 1/k``.
    """

    kind: str = DETERMINISTIC
    mean: float = 1.0
    shape: float | None = None

    def __post_init__(self):
        if self.kind not in GAIN_KINDS:
            raise ConfigError(f"gain.kind: expected one of {GAIN_KINDS}, got {self.kind!r}")
        if not self.mean > 0 or not np.isfinite(self.mean):
            raise ConfigError(f"gain.mean must be > 0, got {self.mean!r}")
        if self.kind == GAMMA and not (self.shape is not None and self.shape > 0):
            raise ConfigError("gain.shape must be > 0 for the gamma distribution")

    @property
    def excess_noise(self):
        """M = <q^2> / <q>^2."""
        if self.kind == DETERMINISTIC:
            return 1.0
        if self.kind == EXPONENTIAL_GAIN:
            return 2.0
        return 1.0 + 1.0 / self.shape

    @property
    def second_moment(self):
        return self.excess_noise * self.mean**2

    def sample(self, rng, n):
        if self.kind == DETERMINISTIC:
            return np.full(n, float(self.mean))
        if self.kind == EXPONENTIAL_GAIN:
            return rng.exponential(self.mean, n)
        return rng.gamma(self.shape, self.mean / self.shape, n)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DetectorModel:
    """One analog detector.

    ``amplifier_noise_rms`` is a white-noise density in
    charge-units/s per sqrt(Hz); per sample it becomes ``rms / sqrt(dt)``.
    """

    eta: float = 1.0
    pulse: PulseShape = field(default_factory=PulseShape)
    gain: GainDistribution = field(default_factory=GainDistribution)
    dark_rate: float = 0.0
    amplifier_noise_rms: float = 0.0
    background_flux: float = 0.0
    name: str = "D"

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ConfigError(f"detector {self.name}: eta must lie in [0, 1], got {self.eta!r}")
        for attr in ("dark_rate", "amplifier_noise_rms", "background_flux"):
            v = getattr(self, attr)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"detector {self.name}: {attr} must be >= 0, got {v!r}")

    @property
    def noise_event_rate(self):
        """Rate of dark plus detected background events."""
        return self.dark_rate + self.eta * self.background_flux

    @property
    def has_noise(self):
        return self.noise_event_rate > 0 or self.amplifier_noise_rms > 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("pulse"), dict):
            d["pulse"] = PulseShape(**d["pulse"])
        if isinstance(d.get("gain"), dict):
            d["gain"] = GainDistribution(**d["gain"])
        return cls(**d)


@dataclass
class CurrentTrace:
    dt: float
    samples: np.ndarray
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def duration(self):
        return self.samples.size * self.dt

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.samples.size)

    def mean(self):
        return float(np.mean(self.samples))


def thin(events, eta, rng):
    """Keep each event independently with probability ``eta``, preserving order."""
    if not 0 <= eta <= 1:
        raise ConfigError(f"eta must lie in [0, 1], got {eta!r}")
    events = np.asarray(events)
    if eta == 1:
        return events.copy()
    if eta == 0:
        return events[:0].copy()
    return events[rng.random(events.size) < eta]


def mean_current_prediction(det, flux, include_noise=False):
    """Mean photocurrent ``eta <q> F``; optionally plus dark and background."""
    if flux < 0:
        raise ConfigError("flux must be >= 0")
    rate = det.eta * flux
    if include_noise:
        rate += det.noise_event_rate
    return rate * det.gain.mean


def check_sampling(det, dt):
    if not dt > 0:
        raise ConfigError(f"dt must be > 0, got {dt!r}")
    if dt > det.pulse.width / MIN_SAMPLES_PER_WIDTH * (1 + 1e-9):
        raise ConfigError(
            f"detector {det.name}: dt = {dt:.3g} s exceeds pulse width / {MIN_SAMPLES_PER_WIDTH}"
            f" = {det.pulse.width / MIN_SAMPLES_PER_WIDTH:.3g} s"
        )


class _GaussianKernel:
    """Sampled Gaussian pulse as a polynomial in the event's sub-sample phase.

    For an event at ``(j + u) * dt`` the contribution to sample ``j + k`` is
    ``sum_p basis[p, k - kmin] * u**p``. Interpolating at Chebyshev nodes keeps
    the sum over ``k`` exactly ``1/dt`` for every ``u``.
    """

    def __init__(self, pulse, dt, degree=3):
        s = pulse.sigma
        reach = math.ceil(GAUSS_CUTOFF * s / dt) + 1
        self.kmin = -reach
        k = np.arange(-reach, reach + 1)
        nodes = 0.5 - 0.5 * np.cos(np.pi * (np.arange(degree + 1) + 0.5) / (degree + 1))
        values = np.array([
            (pulse.cdf((k + 1 - u) * dt) - pulse.cdf((k - u) * dt)) / dt for u in nodes
        ])
        vander = np.vander(nodes, degree + 1, increasing=True)
        self.basis = np.linalg.solve(vander, values)
        self.degree = degree

    @property
    def length(self):
        return self.basis.shape[1]


class TraceSynthesizer:
    """Streaming photocurrent synthesis for one detector.

    Photon events (already thinned) are ``push``-ed with their charges, then
    ``render(n)`` emits the next ``n`` samples. Every event whose pulse starts
    before the end of a rendered window must have been pushed before that
    window is rendered; ``lookahead`` says how far past the window end, in
    seconds, pushed events must reach. Dark/background events and amplifier
    noise are drawn internally from substreams keyed by absolute sample
    position, so the output does not depend on how rendering is chunked.
    """

    def __init__(self, det, dt, *, seed=0, detector_index=0, t0=0.0, noise=True):
        check_sampling(det, dt)
        self.det = det
        self.dt = float(dt)
        self.t0 = float(t0)
        self.seed = int(seed)
        self.index = int(detector_index)
        self.noise = noise
        self.pos = 0
        kind = det.pulse.kind
        if kind == GAUSSIAN:
            self._kernel = _GaussianKernel(det.pulse, self.dt)
            self._lead = -self._kernel.kmin
        else:
            self._kernel = None
            self._lead = 0
        lo, hi = det.pulse.support()
        self._reach = (min(hi, 50 * det.pulse.width) - lo) / self.dt + 2
        self._ratio = math.exp(-self.dt / det.pulse.width) if kind == EXPONENTIAL else None
        self._carry = np.zeros(0)
        self._level = 0.0
        self._pending = (np.empty(0), np.empty(0))
        self._noise_chunks_done = 0
        self._noise_pending = (np.empty(0), np.empty(0))
        self._amp_chunk = (-1, None)

    @property
    def lookahead(self):
        return (self._lead + 1) * self.dt

    def push(self, times, charges):
        """Queue photon events (seconds) with their charges."""
        times = np.asarray(times, dtype=np.float64)
        charges = np.asarray(charges, dtype=np.float64)
        if times.shape != charges.shape:
            raise ValueError("times and charges differ in shape")
        t, q = self._pending
        self._pending = (np.concatenate([t, (times - self.t0) / self.dt]), np.concatenate([q, charges]))

    def _noise_events(self, upto):
        """Dark/background events whose pulses start before sample ``upto``."""
        rate = self.det.noise_event_rate if self.noise else 0.0
        if rate <= 0:
            return
        pos, q = [self._noise_pending[0]], [self._noise_pending[1]]
        while self._noise_chunks_done * NOISE_CHUNK < upto:
            c = self._noise_chunks_done
            rng = rngmod.substream(self.seed, rngmod.NOISE_EVENTS, self.index, c)
            n = rng.poisson(rate * NOISE_CHUNK * self.dt)
            pos.append((c + rng.random(n)) * NOISE_CHUNK + self._lead)
            q.append(self.det.gain.sample(rng, n))
            self._noise_chunks_done += 1
        self._noise_pending = (np.concatenate(pos), np.concatenate(q))

    def _amplifier(self, start, n):
        out = np.empty(n)
        done = 0
        while done < n:
            c, off = divmod(start + done, NOISE_CHUNK)
            if self._amp_chunk[0] != c:
                rng = rngmod.substream(self.seed, rngmod.AMPLIFIER, self.index, c)
                self._amp_chunk = (c, rng.standard_normal(NOISE_CHUNK))
            take = min(n - done, NOISE_CHUNK - off)
            out[done:done + take] = self._amp_chunk[1][off:off + take]
            done += take
        return out * (self.det.amplifier_noise_rms / math.sqrt(self.dt))

    @staticmethod
    def _split(pending, limit):
        p, q = pending
        now = p < limit
        return (p[now], q[now]), (p[~now], q[~now])

    def render(self, n):
        """Return the next ``n`` samples."""
        start, end = self.pos, self.pos + n
        (p, q), self._pending = self._split(self._pending, end + self._lead)
        self._noise_events(end)
        if self._noise_pending[0].size:
            (pn, qn), self._noise_pending = self._split(self._noise_pending, end + self._lead)
            p, q = np.concatenate([p, pn]), np.concatenate([q, qn])
        p = p - start
        pre = 0
        if p.size and p.min() < self._lead - 1e-6:
            if start > 0:
                raise RuntimeError("event pushed after its window was rendered")
            # events before the trace start: render their tails from a virtual
            # earlier start, dropping pulses that end before t0
            keep = p > -self._reach
            p, q = p[keep], q[keep]
            if p.size:
                pre = max(0, int(math.ceil(self._lead - p.min())))
                p = p + pre
        p = np.maximum(p, self._lead)
        kind = self.det.pulse.kind
        if kind == RECTANGULAR:
            out = self._render_rect(p, q, n + pre)
        elif kind == EXPONENTIAL:
            out = self._render_exp(p, q, n + pre)
        else:
            out = self._render_gauss(p, q, n + pre)
        out = out[pre:]
        if self.noise and self.det.amplifier_noise_rms > 0:
            out += self._amplifier(start, n)
        self.pos = end
        return out

    def _take_carry(self, size):
        buf = np.zeros(size)
        buf[: self._carry.size] = self._carry
        return buf

    def _render_rect(self, p, q, n):
        # rectangle = (step at p - step at p + L) / width; a sampled step at x
        # puts (1 - frac x) in bin floor(x) and frac x in the next bin
        L = self.det.pulse.width / self.dt
        size = n + int(math.ceil(L)) + 3
        steps = self._take_carry(size)
        _kernels.deposit_steps(steps, p, q, L)
        out = np.empty(n)
        self._level = _kernels.integrate_steps(steps, n, self._level, 1.0 / self.det.pulse.width, out)
        self._carry = steps[n:]
        return out

    def _render_exp(self, p, q, n):
        r = self._ratio
        j = np.floor(p)
        u = p - j
        j = j.astype(np.int64)
        tail = np.exp(-(1 - u) * self.dt / self.det.pulse.width)
        direct = np.bincount(j, q * (1 - tail), minlength=n)
        feed = np.bincount(j, q * tail, minlength=n)
        # z[m]: charge still to be delivered at the start of sample m
        y, _ = signal.lfilter([1.0], [1.0, -r], feed, zi=[r * self._level])
        z = np.concatenate([[self._level], y[:-1]])
        self._level = y[-1] if n else self._level
        return (direct + z * (1 - r)) / self.dt

    def _render_gauss(self, p, q, n):
        k = self._kernel
        j = np.floor(p)
        u = p - j
        first = j.astype(np.int64) + k.kmin
        size = n + k.length - 1
        full = self._take_carry(size)
        _kernels.deposit_poly(full, first, u, q, k.basis)
        self._carry = full[n:]
        return full[:n]


def synthesize_trace(events, det, dt, duration, rng=None, *, charges=None, seed=None,
                     t0=0.0, detector_index=0, noise=True, meta=None):
    """Sampled photocurrent for detected ``events`` over ``[t0, t0 + duration)``.

    ``charges`` defaults to draws from the detector gain distribution using
    ``rng``. Dark/background events and amplifier noise use substreams of
    ``seed`` (taken from ``rng`` when not given).
    """
    check_sampling(det, dt)
    if not duration > 0:
        raise ConfigError(f"duration must be > 0, got {duration!r}")
    n = int(round(duration / dt))
    if n < 1:
        raise ConfigError("duration shorter than one sample")
    events = np.asarray(events, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(seed)
    if charges is None:
        charges = det.gain.sample(rng, events.size)
    if seed is None:
        seed = int(rng.integers(2**62))
    syn = TraceSynthesizer(det, dt, seed=seed, detector_index=detector_index, t0=t0, noise=noise)
    syn.push(events, charges)
    samples = syn.render(n)
    info = {"detector": det.name, "pulse_width": det.pulse.width, "seed": seed}
    info.update(meta or {})
    return CurrentTrace(dt=float(dt), samples=samples, t0=float(t0), meta=info)
