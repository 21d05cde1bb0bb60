"""Block-averaged auto- and cross-covariance of sampled currents.

A trace pair is cut into equal blocks. Within each block both signals are
centred on their own block mean and the biased (1/N) lag products are
accumulated; the record holds the mean over blocks and the standard error
from the block scatter. Per-block values are kept so derived quantities
(lag integrals, ratios) get their errors from the same scatter.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, WindowTooShort

CROSS = "cross"
AUTO = "auto"
# tau_max must cover this many pulse widths
MIN_WINDOW_WIDTHS = 5
# duration >= this many * n_segments * tau_max
MIN_DURATION_FACTOR = 20


def direct_lag_sums(a, b, max_lag):
    """``S[k] = sum_t a[t] b[t+k]`` for ``k = -max_lag..max_lag`` by explicit dots."""
    n = a.size
    out = np.zeros(2 * max_lag + 1)
    for k in range(-max_lag, max_lag + 1):
        if abs(k) >= n:
            continue
        if k >= 0:
            out[k + max_lag] = np.dot(a[: n - k], b[k:])
        else:
            out[k + max_lag] = np.dot(a[-k:], b[: n + k])
    return out


def _row_width(max_lag):
    return 8 * (max_lag // 8 + 1)


def _diagonal_index(m):
    i, j = np.indices((m, m))
    return (j - i + m - 1).ravel()


_DIAG = {}


def _diagonal_sums(G):
    """``out[d + m - 1] = trace(G, d)`` for ``d = -(m-1)..m-1``."""
    m = G.shape[0]
    idx = _DIAG.get(m)
    if idx is None:
        idx = _DIAG[m] = _diagonal_index(m)
    return np.bincount(idx, G.ravel(), minlength=2 * m - 1)


def _matmul_lag_sums(a, b, max_lag, negative=True):
    # Rows of width m > max_lag: a lag-k product pairs either two entries of the
    # same row or an entry with one in the next row, so three small Gram
    # matrices hold every product; lag sums are their diagonal sums.
    m = _row_width(max_lag)
    full = a.size // m
    # whole rows are a view; the partial last row is padded on its own
    A = a[: full * m].reshape(full, m)
    B = A if b is a else b[: full * m].reshape(full, m)
    ta = np.zeros(m)
    ta[: a.size - full * m] = a[full * m:]
    tb = ta if b is a else np.zeros(m)
    if b is not a:
        tb[: b.size - full * m] = b[full * m:]
    same = _diagonal_sums(A.T @ B + np.outer(ta, tb))
    ahead = _diagonal_sums(A[:-1].T @ B[1:] + np.outer(A[-1], tb))
    k = np.arange(max_lag + 1)
    out = np.empty(2 * max_lag + 1)
    # trace(same, k) + trace(ahead, k - m); the latter is empty at k = 0
    out[max_lag:] = same[m - 1 + k]
    out[max_lag + 1:] += ahead[k[1:] - 1]
    if negative:
        behind = _diagonal_sums(A[1:].T @ B[:-1] + np.outer(ta, B[-1]))
        k = k[1:]
        out[max_lag - k] = same[m - 1 - k] + behind[2 * m - 1 - k]
    else:
        out[:max_lag] = out[max_lag + 1:][::-1]
    return out


def _precedes(a, b):
    diff = np.flatnonzero(a != b)
    return diff.size == 0 or a[diff[0]] < b[diff[0]]


def lag_sums(a, b, max_lag):
    """Fast equivalent of :func:`direct_lag_sums`.

    The result for ``(b, a)`` is exactly the lag-reversed result for
    ``(a, b)``: arguments are put in a canonical order before computing.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.size != b.size:
        raise DataError("lag_sums needs equal-length inputs")
    if a.size < 4 * _row_width(max_lag):
        return direct_lag_sums(a, b, max_lag)
    if a is b:
        return _matmul_lag_sums(a, a, max_lag, negative=False)
    if not _precedes(a, b):
        return _matmul_lag_sums(b, a, max_lag)[::-1].copy()
    return _matmul_lag_sums(a, b, max_lag)


@dataclass
class CorrelationRecord:
    """Covariance versus lag, in (charge-units/s)^2.

    ``lags`` are seconds, symmetric about zero for ``kind == "cross"`` and
    non-negative for ``kind == "auto"``. ``values[k]`` estimates
    ``<di_A(t) di_B(t + lags[k])>``.
    """

    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_segments: int
    means: tuple
    dt: float
    kind: str = CROSS
    block_values: np.ndarray | None = None
    block_means: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def max_lag(self):
        return int(round(self.lags[-1] / self.dt))

    def at(self, tau):
        """Value and standard error at the sampled lag nearest ``tau``."""
        i = self.index(tau)
        return float(self.values[i]), float(self.stderr[i])

    def index(self, tau):
        lag = abs(tau) if self.kind == AUTO else tau
        i = int(np.argmin(np.abs(self.lags - lag)))
        if abs(self.lags[i] - lag) > 0.5 * self.dt * (1 + 1e-9):
            raise DataError(f"lag {tau!r} s is outside the record")
        return i

    def symmetric(self):
        """The record on lags ``-K..K`` (auto records are mirrored)."""
        if self.kind == CROSS:
            return self
        mirror = lambda x: np.concatenate([x[..., :0:-1], x], axis=-1)
        return CorrelationRecord(
            lags=np.concatenate([-self.lags[:0:-1], self.lags]),
            values=mirror(self.values),
            stderr=mirror(self.stderr),
            n_segments=self.n_segments,
            means=self.means,
            dt=self.dt,
            kind=CROSS,
            block_values=None if self.block_values is None else mirror(self.block_values),
            block_means=self.block_means,
            meta=dict(self.meta),
        )

    @property
    def integral(self):
        return integrate(self)[0]


def _record_from_blocks(blocks, means, dt, max_lag, kind, meta=None):
    blocks = np.asarray(blocks, dtype=np.float64)
    n = blocks.shape[0]
    values = blocks.mean(axis=0)
    stderr = blocks.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(values.shape, np.inf)
    k = np.arange(-max_lag, max_lag + 1) if kind == CROSS else np.arange(max_lag + 1)
    means = np.asarray(means, dtype=np.float64)
    return CorrelationRecord(
        lags=k * dt,
        values=values,
        stderr=stderr,
        n_segments=n,
        means=tuple(float(x) for x in means.mean(axis=0)),
        dt=float(dt),
        kind=kind,
        block_values=blocks,
        block_means=means,
        meta=dict(meta or {}),
    )


class CovarianceAccumulator:
    """Collects per-block covariances for one pair of channels.

    ``add(a, b)`` takes one block of each channel; ``add(a)`` an
    auto-covariance block.
    """

    def __init__(self, dt, max_lag, kind=CROSS, meta=None):
        self.dt = float(dt)
        self.max_lag = int(max_lag)
        self.kind = kind
        self.meta = dict(meta or {})
        self._blocks = []
        self._means = []

    def add(self, a, b=None):
        a = np.asarray(a, dtype=np.float64)
        ma = a.mean()
        da = a - ma
        if b is None:
            db, mb = da, ma
        else:
            b = np.asarray(b, dtype=np.float64)
            mb = b.mean()
            db = b - mb
        if a.size <= self.max_lag:
            raise DataError("block shorter than the lag window")
        sums = lag_sums(da, db, self.max_lag) / a.size
        if self.kind == AUTO:
            sums = sums[self.max_lag:]
        self._blocks.append(sums)
        self._means.append((ma, mb))

    def __len__(self):
        return len(self._blocks)

    def record(self):
        if not self._blocks:
            raise DataError("no blocks accumulated")
        return _record_from_blocks(self._blocks, self._means, self.dt, self.max_lag, self.kind, self.meta)


def _check_pair(traceA, traceB, tau_max, n_segments):
    if not math.isclose(traceA.dt, traceB.dt, rel_tol=1e-12):
        raise DataError(f"sample steps differ: {traceA.dt!r} vs {traceB.dt!r}")
    if abs(traceA.t0 - traceB.t0) > 1e-6 * traceA.dt:
        raise DataError(f"traces not aligned: t0 {traceA.t0!r} vs {traceB.t0!r}")
    if traceA.samples.size != traceB.samples.size:
        raise DataError("traces differ in length")
    if n_segments < 2:
        raise DataError("need at least 2 segments for error estimates")
    widths = [t.meta.get("pulse_width") for t in (traceA, traceB)]
    widths = [w for w in widths if w]
    if widths and tau_max < MIN_WINDOW_WIDTHS * max(widths) * (1 - 1e-9):
        raise DataError(
            f"tau_max = {tau_max:.3g} s is shorter than {MIN_WINDOW_WIDTHS} pulse widths"
        )
    duration = traceA.samples.size * traceA.dt
    if duration < MIN_DURATION_FACTOR * n_segments * tau_max * (1 - 1e-9):
        raise DataError(
            f"duration {duration:.3g} s < {MIN_DURATION_FACTOR} * n_segments * tau_max"
            f" = {MIN_DURATION_FACTOR * n_segments * tau_max:.3g} s"
        )


def _blocks(x, n_segments):
    size = x.size // n_segments
    for i in range(n_segments):
        yield x[i * size:(i + 1) * size]


def covariance(traceA, traceB, tau_max, n_segments):
    """Cross-covariance record of two aligned traces, lags in ``[-tau_max, tau_max]``.

    Trailing samples beyond ``n_segments`` equal blocks are dropped.
    """
    _check_pair(traceA, traceB, tau_max, n_segments)
    max_lag = int(round(tau_max / traceA.dt))
    same = traceB is traceA
    acc = CovarianceAccumulator(traceA.dt, max_lag, CROSS, meta=_provenance(traceA, traceB))
    for a, b in zip(_blocks(traceA.samples, n_segments), _blocks(traceB.samples, n_segments)):
        acc.add(a, None if same else b)
    return acc.record()


def autocovariance(trace, tau_max, n_segments):
    """Auto-covariance on non-negative lags."""
    _check_pair(trace, trace, tau_max, n_segments)
    max_lag = int(round(tau_max / trace.dt))
    acc = CovarianceAccumulator(trace.dt, max_lag, AUTO, meta=_provenance(trace, trace))
    for a in _blocks(trace.samples, n_segments):
        acc.add(a)
    return acc.record()


def _provenance(a, b):
    keys = ("detector", "config_hash", "seed")
    return {"A": {k: a.meta.get(k) for k in keys}, "B": {k: b.meta.get(k) for k in keys}}


def pool(records):
    """Merge records of independent runs into one with all their blocks."""
    first = records[0]
    for r in records[1:]:
        if r.kind != first.kind or r.lags.shape != first.lags.shape or not math.isclose(r.dt, first.dt):
            raise DataError("records to pool differ in lag grid")
    blocks = np.concatenate([r.block_values for r in records])
    means = np.concatenate([r.block_means for r in records])
    return _record_from_blocks(blocks, means, first.dt, first.max_lag, first.kind, first.meta)


def _trapezoid_weights(record):
    w = np.full(record.lags.size, record.dt)
    if record.kind == CROSS:
        w[0] = w[-1] = 0.5 * record.dt
    else:
        # the mirrored negative half counts twice, lag 0 once
        w *= 2.0
        w[0] = record.dt
        w[-1] = record.dt
    return w


# outer fraction of the lag window tested for decay, and the alarm level
EDGE_FRACTION = 0.1
EDGE_SIGMAS = 3.0


def _edge_excess(record, side):
    """|mean| / stderr of the correlation over the outer band on one side."""
    lags = record.lags if side > 0 else -record.lags
    sel = lags >= (1 - EDGE_FRACTION) * np.abs(record.lags).max() - 1e-9 * record.dt
    mean = record.values[sel].mean()
    if record.block_values is not None and record.block_values.shape[0] > 1:
        band = record.block_values[:, sel].mean(axis=1)
        err = band.std(ddof=1) / math.sqrt(band.size)
    else:
        # lag errors are correlated: the mean error is a safe upper bound
        err = record.stderr[sel].mean()
    return abs(mean) / err if err > 0 else (math.inf if mean != 0 else 0.0)


def integrate(record, warn=True):
    """Trapezoidal integral over ``[-tau_max, tau_max]`` with its standard error.

    The error comes from the scatter of per-block integrals when block values
    are present, otherwise from summing per-lag errors linearly (lag errors
    are strongly correlated, so this is an upper bound).
    """
    w = _trapezoid_weights(record)
    value = float(np.dot(w, record.values))
    if record.block_values is not None and record.block_values.shape[0] > 1:
        per_block = record.block_values @ w
        err = float(per_block.std(ddof=1) / math.sqrt(per_block.size))
    else:
        err = float(np.dot(w, record.stderr))
    # error of a subtracted background record, not in the block scatter
    err = math.sqrt(err**2 + record.meta.get("unpumped_integral_var", 0.0))
    sides = (1,) if record.kind == AUTO else (-1, 1)
    undecayed = any(_edge_excess(record, side) > EDGE_SIGMAS for side in sides)
    record.meta["window_decayed"] = not undecayed
    if undecayed and warn:
        warnings.warn(
            f"correlation not decayed within {EDGE_SIGMAS:g} stderr near "
            f"tau_max = {record.lags[-1]:.3g} s",
            WindowTooShort,
            stacklevel=2,
        )
    return value, err


# -- export -----------------------------------------------------------------


def write_record(record, csv_path, json_path=None, extra=None):
    """CSV of (lag_seconds, value, stderr) plus a JSON sidecar."""
    data = np.column_stack([record.lags, record.values, record.stderr])
    np.savetxt(csv_path, data, delimiter=",", header="lag_seconds,value,stderr", comments="",
               fmt="%.17g")
    if json_path is not None:
        value, err = integrate(record, warn=False)
        side = {
            "kind": record.kind,
            "dt": record.dt,
            "n_segments": record.n_segments,
            "means": list(record.means),
            "integral": value,
            "integral_stderr": err,
            "window_decayed": record.meta.get("window_decayed"),
            "provenance": {k: v for k, v in record.meta.items() if k != "window_decayed"},
        }
        side.update(extra or {})
        with open(json_path, "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True, default=str)


def read_record(csv_path, json_path):
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    with open(json_path) as fh:
        side = json.load(fh)
    return CorrelationRecord(
        lags=data[:, 0],
        values=data[:, 1],
        stderr=data[:, 2],
        n_segments=int(side["n_segments"]),
        means=tuple(side["means"]),
        dt=float(side["dt"]),
        kind=side["kind"],
        meta=side.get("provenance", {}),
    )
