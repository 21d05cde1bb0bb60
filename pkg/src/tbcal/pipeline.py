"""Run configuration and the streaming acquisition pipeline.

One acquisition is: source segments -> per-arm thinning and charges ->
streaming trace synthesis -> block covariance accumulators. Nothing longer
than one correlation block is held in memory, so a 0.1 s trace at 1 ns
sampling runs in constant memory.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace


from . import rng as rngmod
from .calibrator import (
    ESTIMATORS,
    INTEGRATED_SPDC,
    INTEGRATED_STIMULATED,
    RATIO_SPDC,
    RATIO_STIMULATED,
    classify_regime,
    estimate_integrated_spdc,
    estimate_integrated_stimulated,
    estimate_ratio_spdc,
    estimate_ratio_stimulated,
    subtract_background,
)
from .correlator import AUTO, CROSS, MIN_DURATION_FACTOR, MIN_WINDOW_WIDTHS, CovarianceAccumulator
from .errors import ConfigError, TBCalError
from .frontend import DETERMINISTIC, DetectorModel, GainDistribution, PulseShape, TraceSynthesizer, check_sampling, thin
from .source import SPONTANEOUS, STIMULATED, SourceConfig, iter_segments

RATIO_ESTIMATORS = (RATIO_SPDC, RATIO_STIMULATED)
_MODE_OF = {
    RATIO_SPDC: SPONTANEOUS,
    INTEGRATED_SPDC: SPONTANEOUS,
    RATIO_STIMULATED: STIMULATED,
    INTEGRATED_STIMULATED: STIMULATED,
}


@dataclass(frozen=True)
class Acquisition:
    dt: float = 1e-9
    duration: float = 1e-3
    n_segments: int = 20
    tau_max: float = 5e-8

    def __post_init__(self):
        for name in ("dt", "duration", "tau_max"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"acquisition.{name} must be > 0, got {v!r}")
        if not isinstance(self.n_segments, int) or self.n_segments < 2:
            raise ConfigError(f"acquisition.n_segments must be an integer >= 2, got {self.n_segments!r}")

    @property
    def max_lag(self):
        return int(round(self.tau_max / self.dt))

    @property
    def block_samples(self):
        return int(round(self.duration / self.dt)) // self.n_segments


@dataclass
class RunConfig:
    """Everything needed to reproduce one simulated calibration run.

    ``source.duration`` and ``source.rng_seed`` are always taken from
    ``acquisition.duration`` and ``seed``.
    """

    source: SourceConfig
    detector1: DetectorModel
    detector2: DetectorModel
    acquisition: Acquisition = field(default_factory=Acquisition)
    seed: int = 0
    estimators: list = field(default_factory=lambda: [{"name": INTEGRATED_SPDC}])
    unpumped_run: bool = False
    output: dict = field(default_factory=lambda: {"directory": "out"})

    def __post_init__(self):
        self.source = replace(self.source, duration=self.acquisition.duration, rng_seed=int(self.seed))
        self.validate()

    def validate(self):
        acq = self.acquisition
        for i, det in enumerate((self.detector1, self.detector2), start=1):
            try:
                check_sampling(det, acq.dt)
            except ConfigError as exc:
                raise ConfigError(f"acquisition.dt: {exc}") from None
        widest = max(self.detector1.pulse.width, self.detector2.pulse.width)
        if acq.tau_max < MIN_WINDOW_WIDTHS * widest * (1 - 1e-9):
            raise ConfigError(
                f"acquisition.tau_max = {acq.tau_max:.3g} s must be >= {MIN_WINDOW_WIDTHS} pulse widths"
                f" ({MIN_WINDOW_WIDTHS * widest:.3g} s)"
            )
        need = MIN_DURATION_FACTOR * acq.n_segments * acq.tau_max
        if acq.duration < need * (1 - 1e-9):
            raise ConfigError(
                f"acquisition.duration = {acq.duration:.3g} s must be >= {MIN_DURATION_FACTOR}"
                f" * n_segments * tau_max = {need:.3g} s"
            )
        if acq.block_samples <= acq.max_lag:
            raise ConfigError("acquisition: blocks are shorter than the lag window")
        for i, est in enumerate(self.estimators):
            name = est.get("name") if isinstance(est, dict) else None
            if name not in ESTIMATORS:
                raise ConfigError(f"estimators[{i}].name: expected one of {ESTIMATORS}, got {name!r}")
            if _MODE_OF[name] != self.source.mode:
                raise ConfigError(
                    f"estimators[{i}].name: {name} needs a {_MODE_OF[name]} source, got {self.source.mode}"
                )
            unknown = set(est) - {"name", "M", "q1_mean", "tau_eval", "tau_avg", "loss_correction",
                                  "loss_uncertainty"}
            if unknown:
                raise ConfigError(f"estimators[{i}]: unknown keys {sorted(unknown)}")

    @property
    def needs_auto(self):
        return any(e["name"] in RATIO_ESTIMATORS for e in self.estimators)

    def to_dict(self):
        src = asdict(self.source)
        src.pop("duration")
        src.pop("rng_seed")
        return {
            "seed": int(self.seed),
            "source": src,
            "detectors": [self.detector1.to_dict(), self.detector2.to_dict()],
            "acquisition": asdict(self.acquisition),
            "estimators": [dict(e) for e in self.estimators],
            "unpumped_run": bool(self.unpumped_run),
            "output": dict(self.output),
        }

    @property
    def config_hash(self):
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return run_config_from_dict(d)

    def with_(self, **changes):
        """Copy with top-level fields replaced (validation re-runs)."""
        return replace(self, **changes)


def config_hash(d):
    """sha256 of the canonical JSON form; key order does not matter."""
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(canon.encode()).hexdigest()


def _build(path, cls, d, allowed=None):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(d).__name__}")
    if allowed is not None:
        unknown = set(d) - set(allowed)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


_SOURCE_KEYS = ("mode", "gain", "mean_flux", "coherence_time", "seed_flux", "spontaneous_background")
_DETECTOR_KEYS = ("eta", "pulse", "gain", "dark_rate", "amplifier_noise_rms", "background_flux", "name")
_TOP_KEYS = ("seed", "source", "detectors", "acquisition", "estimators", "unpumped_run", "output")


def run_config_from_dict(d):
    """Build a :class:`RunConfig` from the nested mapping of a config file.

    Errors name the offending field, e.g. ``detectors[1].pulse.width``.
    """
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = set(d) - set(_TOP_KEYS)
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    for key in ("source", "detectors", "acquisition"):
        if key not in d:
            raise ConfigError(f"config: missing section {key!r}")
    source = _build("source", SourceConfig, d["source"], _SOURCE_KEYS)
    dets = d["detectors"]
    if not isinstance(dets, list) or len(dets) != 2:
        raise ConfigError("detectors: expected a list of exactly two detectors")
    models = []
    for i, det in enumerate(dets):
        path = f"detectors[{i}]"
        if not isinstance(det, dict):
            raise ConfigError(f"{path}: expected a mapping")
        det = dict(det)
        det.setdefault("name", f"D{i + 1}")
        unknown = set(det) - set(_DETECTOR_KEYS)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        if "pulse" in det:
            det["pulse"] = _build(f"{path}.pulse", PulseShape, det["pulse"], ("kind", "width"))
        if "gain" in det:
            det["gain"] = _build(f"{path}.gain", GainDistribution, det["gain"], ("kind", "mean", "shape"))
        models.append(_build(path, DetectorModel, det))
    acq = _build("acquisition", Acquisition, d["acquisition"], ("dt", "duration", "n_segments", "tau_max"))
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    kw = {}
    if "estimators" in d:
        if not isinstance(d["estimators"], list):
            raise ConfigError("estimators: expected a list")
        kw["estimators"] = [e if isinstance(e, dict) else {"name": e} for e in d["estimators"]]
    elif source.mode == STIMULATED:
        kw["estimators"] = [{"name": INTEGRATED_STIMULATED}]
    if "unpumped_run" in d:
        kw["unpumped_run"] = bool(d["unpumped_run"])
    if "output" in d:
        kw["output"] = dict(d["output"])
    return RunConfig(source=source, detector1=models[0], detector2=models[1], acquisition=acq,
                     seed=seed, **kw)


def _yaml_loader():
    import re

    import yaml

    class Loader(yaml.SafeLoader):
        pass

    # YAML 1.1 reads "5e8" as a string; accept exponents without a dot
    Loader.add_implicit_resolver(
        "tag:yaml.org,2002:float",
        re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
        list("-+0123456789."),
    )
    return Loader


def load_config(path):
    """Read a YAML run configuration; parse errors report the line."""
    import yaml

    try:
        with open(path) as fh:
            data = yaml.load(fh, Loader=_yaml_loader())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}:{mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: {getattr(exc, 'problem', exc)}") from None
    try:
        return run_config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def repetition_seed(seed, r):
    return rngmod.derive_seed(seed, rngmod.REPETITION, r)


# -- streaming acquisition --------------------------------------------------


def iter_blocks(run, seed=None, *, pumped=True, block_samples=None, n_samples=None, noise=True):
    """Yield ``(x1, x2)`` sample blocks of both detectors.

    Defaults to the correlation blocks of ``run.acquisition``; otherwise
    blocks of ``block_samples`` up to ``n_samples`` in total (the last block
    may be shorter). With ``pumped=False`` the source is off and only dark,
    background and amplifier noise remain; those use a seed derived from
    ``seed`` so pumped and unpumped runs are independent.
    """
    seed = run.seed if seed is None else int(seed)
    acq = run.acquisition
    if block_samples is None:
        block_samples = acq.block_samples
        n_samples = block_samples * acq.n_segments
    elif n_samples is None:
        n_samples = int(round(acq.duration / acq.dt))
    dets = (run.detector1, run.detector2)
    noise_seed = seed if pumped else rngmod.derive_seed(seed, rngmod.UNPUMPED)
    syn = [TraceSynthesizer(det, acq.dt, seed=noise_seed, detector_index=k, noise=noise)
           for k, det in enumerate(dets)]
    lookahead = max(s.lookahead for s in syn)
    segments = iter_segments(replace(run.source, rng_seed=seed)) if pumped else iter(())
    horizon = 0.0 if pumped else math.inf
    done = 0
    while done < n_samples:
        size = min(block_samples, n_samples - done)
        need = (done + size) * acq.dt + lookahead
        while horizon < need:
            seg = next(segments, None)
            if seg is None:
                horizon = math.inf
                break
            for k, (det, arm) in enumerate(zip(dets, (seg.arm1, seg.arm2))):
                kept = thin(arm, det.eta, rngmod.substream(seed, rngmod.THIN, k, seg.index))
                q = det.gain.sample(rngmod.substream(seed, rngmod.CHARGE, k, seg.index), kept.size)
                syn[k].push(kept, q)
            horizon = seg.stop
        done += size
        yield syn[0].render(size), syn[1].render(size)


def write_traces(run, paths, seed=None, *, pumped=True, block_samples=1 << 21):
    """Simulate the full acquisition and write both detector traces to ``paths``."""
    from .traceio import TraceWriter

    seed = run.seed if seed is None else int(seed)
    acq = run.acquisition
    n = int(round(acq.duration / acq.dt))
    writers = []
    for k, (det, path) in enumerate(zip((run.detector1, run.detector2), paths)):
        meta = {"detector": det.name, "pulse_width": det.pulse.width, "seed": seed,
                "config_hash": run.config_hash, "pumped": pumped}
        writers.append(TraceWriter(path, acq.dt, n, 0.0, det.name, meta=meta))
    try:
        for x1, x2 in iter_blocks(run, seed, pumped=pumped, block_samples=block_samples, n_samples=n):
            writers[0].write(x1)
            writers[1].write(x2)
    except BaseException:
        for w in writers:
            w.abort()
        raise
    for w in writers:
        w.close()


@dataclass
class AcquisitionResult:
    cross: object
    auto1: object = None
    auto2: object = None
    seed: int = 0
    pumped: bool = True

    @property
    def means(self):
        return self.cross.means

    @property
    def mean_stderr(self):
        bm = self.cross.block_means
        return tuple(float(x) for x in bm.std(axis=0, ddof=1) / math.sqrt(bm.shape[0]))


def acquire(run, seed=None, *, pumped=True, autos=None, noise=True):
    """Simulate one acquisition and return its correlation records.

    ``autos`` lists which auto-covariances to compute (1 and/or 2); default
    is detector 1 when a ratio estimator is configured.
    """
    seed = run.seed if seed is None else int(seed)
    if autos is None:
        autos = (1,) if run.needs_auto else ()
    acq = run.acquisition
    meta = {"config_hash": run.config_hash, "seed": seed, "pumped": pumped}
    cross = CovarianceAccumulator(acq.dt, acq.max_lag, CROSS, meta)
    auto = {k: CovarianceAccumulator(acq.dt, acq.max_lag, AUTO, dict(meta, detector=k)) for k in autos}
    for x1, x2 in iter_blocks(run, seed, pumped=pumped, noise=noise):
        cross.add(x1, x2)
        for k, a in auto.items():
            a.add(x1 if k == 1 else x2)
    return AcquisitionResult(
        cross=cross.record(),
        auto1=auto[1].record() if 1 in auto else None,
        auto2=auto[2].record() if 2 in auto else None,
        seed=seed,
        pumped=pumped,
    )


def run_regime(run):
    """Regime of the configured operating point.

    The gain threshold only concerns spontaneous emission; a seeded source is
    classified by pulse overlap alone.
    """
    src = run.source
    width = max(run.detector1.pulse.width, run.detector2.pulse.width)
    if src.mode == SPONTANEOUS:
        return classify_regime(src.mean_flux, width, src.gain)
    return classify_regime((1 + src.gain) * src.seed_flux, width, 0.0)


def calibrate(run, pumped, unpumped=None):
    """Apply the configured estimators to acquisition results.

    ``unpumped`` (an :class:`AcquisitionResult` without signal) supplies the
    background auto-covariance and the dark/background mean current.
    Returns a list of reports, with a ``{"estimator", "error"}`` dict in place
    of any estimator that could not be evaluated.
    """
    regime = run_regime(run)
    q2 = run.detector2.gain.mean if run.detector2.gain.kind == DETERMINISTIC else None
    mean_i1 = pumped.means[0]
    mean_err = pumped.mean_stderr[0]
    flags = []
    if unpumped is not None:
        mean_i1 -= unpumped.means[0]
        mean_err = math.hypot(mean_err, unpumped.mean_stderr[0])
    elif run.detector1.noise_event_rate > 0:
        flags.append("mean_current_not_background_subtracted")
    out = []
    for est in run.estimators:
        name = est["name"]
        common = dict(regime=regime, q2_mean=q2,
                      loss_correction=est.get("loss_correction", 0.0))
        if "loss_uncertainty" in est:
            common["loss_uncertainty"] = est["loss_uncertainty"]
        try:
            if name in RATIO_ESTIMATORS:
                auto1 = pumped.auto1
                extra = []
                if unpumped is not None and unpumped.auto1 is not None:
                    auto1 = subtract_background(auto1, unpumped.auto1)
                elif run.detector1.has_noise:
                    extra.append("background_subtraction_skipped")
                fn = estimate_ratio_spdc if name == RATIO_SPDC else estimate_ratio_stimulated
                rep = fn(pumped.cross, auto1,
                         est.get("M", run.detector1.gain.excess_noise),
                         est.get("q1_mean", run.detector1.gain.mean),
                         est.get("tau_eval", 0.0),
                         tau_avg=est.get("tau_avg", run.detector1.pulse.width), **common)
                rep.flags.extend(extra)
            else:
                fn = estimate_integrated_spdc if name == INTEGRATED_SPDC else estimate_integrated_stimulated
                rep = fn(pumped.cross, mean_i1, mean_i1_stderr=mean_err, **common)
                rep.flags.extend(flags)
        except TBCalError as exc:
            out.append({"estimator": name, "error": type(exc).__name__, "message": str(exc)})
            continue
        rep.inputs["config_hash"] = run.config_hash
        rep.inputs["seed"] = pumped.seed
        out.append(rep)
    return out


def simulate_and_calibrate(run, seed=None):
    """Full pipeline for one seed: acquisition(s) plus the configured estimators."""
    seed = run.seed if seed is None else int(seed)
    pumped = acquire(run, seed)
    unpumped = acquire(run, seed, pumped=False) if run.unpumped_run else None
    return calibrate(run, pumped, unpumped), pumped, unpumped


def true_eta_q(run):
    """Configured eta2 * <q2>, the quantity every estimator targets."""
    return run.detector2.eta * run.detector2.gain.mean
