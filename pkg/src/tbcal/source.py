"""Correlated photon streams from a down-conversion source.

Two modes are supported:

spontaneous
    The time axis is cut into slots one coherence time wide; each slot holds
    a Bose-Einstein distributed number of pairs with mean ``gain`` (photons
    per mode). The per-arm flux is therefore ``gain / coherence_time``.
stimulated
    A Poisson seed beam of rate ``seed_flux`` enters arm 2. Each seed photon
    triggers, with probability ``gain``, one photon in arm 1 plus one extra
    photon in arm 2.

Streams are generated segment by segment from per-segment random substreams,
so a long acquisition can be consumed incrementally with bounded memory and
the realisation does not depend on how it is consumed.
"""

import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from . import rng as rngmod
from .errors import ConfigError, DataError, RegimeUnsupported

SPONTANEOUS = "spontaneous"
STIMULATED = "stimulated"
MODES = (SPONTANEOUS, STIMULATED)

# Largest gain accepted in stimulated mode (the V << 1 condition).
STIMULATED_MAX_GAIN = 0.01
DEFAULT_COHERENCE_TIME = 1e-13
# Expected number of emitted events per generated segment.
SEGMENT_EVENTS = 1 << 18
_CONSISTENCY_RTOL = 1e-6
_MAX_SLOTS = 1 << 62


@dataclass(frozen=True)
class SourceConfig:
    """Source parameters.

    Any two of ``gain``, ``mean_flux`` and ``coherence_time`` fix the third
    through ``mean_flux * coherence_time == gain`` (one temporal mode per
    coherence time). Supplying all three requires them to agree to 1e-6.
    """

    mode: str = SPONTANEOUS
    gain: float = 1e-3
    mean_flux: float | None = None
    coherence_time: float | None = None
    seed_flux: float = 0.0
    duration: float = 1e-3
    rng_seed: int = 0
    spontaneous_background: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"source.mode: expected one of {MODES}, got {self.mode!r}")
        for name in ("gain", "seed_flux"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"source.{name} must be finite and >= 0, got {value!r}")
        if not self.duration > 0 or not np.isfinite(self.duration):
            raise ConfigError(f"source.duration must be > 0, got {self.duration!r}")
        if self.mean_flux is not None and (self.mean_flux < 0 or not np.isfinite(self.mean_flux)):
            raise ConfigError(f"source.mean_flux must be finite and >= 0, got {self.mean_flux!r}")
        if self.coherence_time is not None and not self.coherence_time > 0:
            raise ConfigError(f"source.coherence_time must be > 0, got {self.coherence_time!r}")

        V, F, tau = self.gain, self.mean_flux, self.coherence_time
        if F is not None and tau is not None:
            scale = max(V, F * tau)
            if scale > 0 and abs(F * tau - V) > _CONSISTENCY_RTOL * scale:
                raise ConfigError(
                    f"source: mean_flux*coherence_time = {F * tau:.6g} disagrees with gain = {V:.6g}"
                )
        elif tau is not None:
            object.__setattr__(self, "mean_flux", V / tau)
        elif F is not None:
            if F > 0:
                object.__setattr__(self, "coherence_time", V / F)
            elif V > 0:
                raise ConfigError("source: mean_flux = 0 with gain > 0 leaves coherence_time undefined")
            else:
                object.__setattr__(self, "coherence_time", DEFAULT_COHERENCE_TIME)
        elif self.mode == STIMULATED:
            object.__setattr__(self, "coherence_time", DEFAULT_COHERENCE_TIME)
            object.__setattr__(self, "mean_flux", V / DEFAULT_COHERENCE_TIME)
        else:
            raise ConfigError("source: give mean_flux or coherence_time together with gain")
        if not self.coherence_time > 0:
            raise ConfigError("source: derived coherence_time is not positive")

    @property
    def n_slots(self):
        n = math.floor(self.duration / self.coherence_time * (1 + 1e-12))
        if n >= _MAX_SLOTS:
            raise ConfigError(
                f"source: duration/coherence_time = {n:.3g} slots overflows the slot counter"
            )
        return n

    def to_dict(self):
        return asdict(self)


@dataclass
class Segment:
    """Events emitted in ``[start, stop)``; all later segments start at ``stop``.

    ``links[i]`` is the index in ``arm2`` of the partner of ``arm1[i]`` (-1 when
    absent). Times are not necessarily sorted.
    """

    index: int
    start: float
    stop: float
    arm1: np.ndarray
    arm2: np.ndarray
    links: np.ndarray


@dataclass
class PairEventStream:
    """Photon arrival times (seconds) for both arms before detection."""

    arm1_times: np.ndarray
    arm2_times: np.ndarray
    pair_links: np.ndarray
    duration: float
    coherence_time: float
    mode: str = SPONTANEOUS
    meta: dict = field(default_factory=dict)

    def windowed_counts(self, window):
        """Photon counts per arm in consecutive windows of length ``window``."""
        n = int(self.duration // window)
        if n < 1:
            raise ConfigError("window longer than the stream")
        edges = n * window
        c1 = np.bincount((self.arm1_times[self.arm1_times < edges] // window).astype(np.int64), minlength=n)
        c2 = np.bincount((self.arm2_times[self.arm2_times < edges] // window).astype(np.int64), minlength=n)
        return c1[:n], c2[:n]

    def check(self):
        """Raise ``DataError`` if a structural invariant is violated."""
        for name, t in (("arm1", self.arm1_times), ("arm2", self.arm2_times)):
            if t.size and (t[0] < 0 or t[-1] >= self.duration):
                raise DataError(f"{name} has times outside [0, duration)")
            if np.any(np.diff(t) < 0):
                raise DataError(f"{name} is not sorted")
        linked = self.pair_links >= 0
        dt = np.abs(self.arm1_times[linked] - self.arm2_times[self.pair_links[linked]])
        if dt.size and dt.max() > self.coherence_time * (1 + 1e-9):
            raise DataError("linked pair separated by more than one coherence time")


def _sorted_segment(seg):
    o1 = np.argsort(seg.arm1, kind="stable")
    o2 = np.argsort(seg.arm2, kind="stable")
    inverse2 = np.empty_like(o2)
    inverse2[o2] = np.arange(o2.size)
    links = seg.links[o1]
    linked = links >= 0
    links[linked] = inverse2[links[linked]]
    return Segment(seg.index, seg.start, seg.stop, seg.arm1[o1], seg.arm2[o2], links)


def _spontaneous_pairs(rng, first_slot, n_slots, V, tau, limit):
    """Pairs from ``n_slots`` consecutive slots starting at ``first_slot``."""
    return _kernels.spontaneous_pairs(rng, int(first_slot), int(n_slots), float(V), float(tau),
                                      float(limit))


class _Plan:
    """Deterministic segmentation of a source realisation."""

    def __init__(self, cfg):
        self.cfg = cfg
        if cfg.mode == SPONTANEOUS:
            V = cfg.gain
            self.total_slots = cfg.n_slots
            if V == 0 or self.total_slots == 0:
                self.slots_per_segment = 1
                self.n_segments = 0
            else:
                p = V / (1 + V)
                self.slots_per_segment = max(1, math.ceil(SEGMENT_EVENTS / p))
                self.n_segments = -(-self.total_slots // self.slots_per_segment)
        else:
            self.seg_duration = min(cfg.duration, SEGMENT_EVENTS / cfg.seed_flux)
            self.n_segments = max(1, math.ceil(cfg.duration / self.seg_duration * (1 - 1e-12)))

    def bounds(self, k):
        cfg = self.cfg
        if cfg.mode == SPONTANEOUS:
            lo = k * self.slots_per_segment
            hi = min(self.total_slots, lo + self.slots_per_segment)
            start = lo * cfg.coherence_time
            stop = cfg.duration if k == self.n_segments - 1 else hi * cfg.coherence_time
            return lo, hi, start, stop
        start = k * self.seg_duration
        stop = cfg.duration if k == self.n_segments - 1 else (k + 1) * self.seg_duration
        return None, None, start, stop


def _spontaneous_segment(cfg, plan, k):
    rng = rngmod.substream(cfg.rng_seed, rngmod.SOURCE, k)
    lo, hi, start, stop = plan.bounds(k)
    t1, t2 = _spontaneous_pairs(rng, lo, hi - lo, cfg.gain, cfg.coherence_time, cfg.duration)
    return Segment(k, start, stop, t1, t2, np.arange(t1.size, dtype=np.int64))


def _stimulated_segment(cfg, plan, k):
    rng = rngmod.substream(cfg.rng_seed, rngmod.SOURCE, k)
    _, _, start, stop = plan.bounds(k)
    tau, V, T = cfg.coherence_time, cfg.gain, cfg.duration
    n = rng.poisson(cfg.seed_flux * (stop - start))
    seeds = start + np.sort(rng.random(n)) * (stop - start)
    triggered = seeds[rng.random(n) < V]
    t1 = triggered + rng.random(triggered.size) * tau
    extra = triggered + rng.random(triggered.size) * tau
    inside = (t1 < T) & (extra < T)
    t1, extra = t1[inside], extra[inside]
    arm1 = t1
    arm2 = np.concatenate([seeds, extra])
    links = np.arange(n, n + extra.size, dtype=np.int64)
    if cfg.spontaneous_background and V > 0:
        brng = rngmod.substream(cfg.rng_seed, rngmod.SOURCE_BACKGROUND, k)
        first = math.ceil(start / tau)
        last = min(cfg.n_slots, math.floor(stop / tau)) if k < plan.n_segments - 1 else cfg.n_slots
        b1, b2 = _spontaneous_pairs(brng, first, max(0, last - first), V, tau, T)
        links = np.concatenate([links, arm2.size + np.arange(b1.size, dtype=np.int64)])
        arm1 = np.concatenate([arm1, b1])
        arm2 = np.concatenate([arm2, b2])
    return Segment(k, start, stop, arm1, arm2, links)


def _check_generation(cfg):
    if cfg.mode == SPONTANEOUS:
        if cfg.gain >= 1:
            raise RegimeUnsupported(
                f"spontaneous gain V = {cfg.gain} >= 1: multimode regime is not supported"
            )
        cfg.n_slots  # overflow check
    else:
        if cfg.gain > STIMULATED_MAX_GAIN:
            raise RegimeUnsupported(
                f"stimulated gain V = {cfg.gain} exceeds {STIMULATED_MAX_GAIN} (V << 1 required)"
            )
        if not cfg.seed_flux > 0:
            raise ConfigError("stimulated mode needs seed_flux > 0")
        if cfg.spontaneous_background:
            cfg.n_slots


def iter_segments(cfg, sort=False):
    """Yield the :class:`Segment` objects of one realisation in time order."""
    _check_generation(cfg)
    plan = _Plan(cfg)
    make = _spontaneous_segment if cfg.mode == SPONTANEOUS else _stimulated_segment
    for k in range(plan.n_segments):
        seg = make(cfg, plan, k)
        yield _sorted_segment(seg) if sort else seg


def _collect(cfg):
    arm1, arm2, links, offset = [], [], [], 0
    for seg in iter_segments(cfg, sort=True):
        arm1.append(seg.arm1)
        arm2.append(seg.arm2)
        ln = seg.links.copy()
        ln[ln >= 0] += offset
        links.append(ln)
        offset += seg.arm2.size
    cat = lambda xs, dtype: np.concatenate(xs) if xs else np.empty(0, dtype=dtype)
    return PairEventStream(
        arm1_times=cat(arm1, np.float64),
        arm2_times=cat(arm2, np.float64),
        pair_links=cat(links, np.int64),
        duration=cfg.duration,
        coherence_time=cfg.coherence_time,
        mode=cfg.mode,
        meta={"rng_seed": cfg.rng_seed},
    )


def generate_spontaneous(cfg):
    if cfg.mode != SPONTANEOUS:
        raise ConfigError("generate_spontaneous needs mode = spontaneous")
    return _collect(cfg)


def generate_stimulated(cfg):
    if cfg.mode != STIMULATED:
        raise ConfigError("generate_stimulated needs mode = stimulated")
    return _collect(cfg)


def generate(cfg):
    return generate_spontaneous(cfg) if cfg.mode == SPONTANEOUS else generate_stimulated(cfg)


# -- event files ------------------------------------------------------------
#
# little-endian: b"TBEVT" | u16 version | f64 coherence_time | f64 duration |
# u8 mode (0 spontaneous, 1 stimulated) | u64 n1 | f64[n1] arm1 |
# u64 n2 | f64[n2] arm2 | i64[n1] pair links

EVENT_MAGIC = b"TBEVT"
EVENT_VERSION = 1
_EVENT_HEADER = struct.Struct("<5sHddB")


def write_events(path, stream):
    with open(path, "wb") as fh:
        fh.write(_EVENT_HEADER.pack(EVENT_MAGIC, EVENT_VERSION, stream.coherence_time,
                                    stream.duration, MODES.index(stream.mode)))
        for arr in (stream.arm1_times, stream.arm2_times):
            fh.write(struct.pack("<Q", arr.size))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(stream.pair_links, dtype="<i8").tobytes())


def read_events(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _EVENT_HEADER.size or raw[:5] != EVENT_MAGIC:
        raise DataError(f"{path}: not an event file")
    magic, version, tau, duration, mode = _EVENT_HEADER.unpack_from(raw)
    if version != EVENT_VERSION:
        raise DataError(f"{path}: unsupported event file version {version}")
    pos = _EVENT_HEADER.size
    arms = []
    try:
        for _ in range(2):
            (n,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            arms.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64))
            pos += 8 * n
        links = np.frombuffer(raw, dtype="<i8", count=arms[0].size, offset=pos).astype(np.int64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated event file") from exc
    return PairEventStream(arms[0], arms[1], links, duration, tau, MODES[mode])
