"""Reading tools: turn a simulated waveform into one number the LLM can use.

Every function is pure and deterministic. Results are :class:`Measurement`
objects whose ``str()`` is the single line fed back to the agent::

    ripple 0.00150012 V (window 0.016..0.02)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine.dataset import Dataset

KINDS = ("mean", "ripple", "switching_frequency", "settle_time")
# tool-style aliases accepted by read_feature
_ALIASES = {
    "get_mean_output_voltage": "mean",
    "mean_output_voltage": "mean",
    "average": "mean",
    "get_ripple": "ripple",
    "peak_to_peak": "ripple",
    "get_switching_frequency": "switching_frequency",
    "frequency": "switching_frequency",
    "get_settle_in_time": "settle_time",
    "settle_in_time": "settle_time",
    "settling_time": "settle_time",
}
DRIFT_LIMIT = 0.01
SETTLE_FRACTION = 0.9
MIN_PERIODS = 8


class MeasureError(Exception):
    pass


class TraceTooShort(MeasureError):
    pass


class EmptyWindow(MeasureError):
    pass


class NoPeak(MeasureError):
    pass


class NeverSettles(MeasureError):
    pass


class AmbiguousSteadyState(MeasureError):
    pass


class UnknownKind(MeasureError):
    pass


@dataclass(frozen=True, eq=False)
class Trace:
    name: str
    time: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.time, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "values", v)
        if t.ndim != 1 or t.shape != v.shape:
            raise ValueError("time and values must be 1-D and of equal length")
        if len(t) < 2:
            raise TraceTooShort(f"{self.name}: need at least 2 samples, got {len(t)}")
        if not np.all(np.diff(t) > 0):
            raise ValueError(f"{self.name}: time must be strictly increasing")

    @property
    def unit(self) -> str:
        return "A" if self.name.strip().lower().startswith("i") else "V"

    @classmethod
    def from_dataset(cls, ds: Dataset, signal: str) -> "Trace":
        i = ds.index(signal)
        return cls(ds.variables[i].name, ds.time, ds.columns[i])


@dataclass(frozen=True)
class SteadyWindow:
    t_start: float
    t_end: float
    drift: bool = False

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("window start must precede its end")


@dataclass(frozen=True)
class Measurement:
    kind: str
    value: float
    unit: str
    window: SteadyWindow
    diagnostics: str = ""

    def __str__(self) -> str:
        return (f"{self.kind} {self.value:.6g} {self.unit} "
                f"(window {self.window.t_start:.6g}..{self.window.t_end:.6g})")


def _mean_between(t: np.ndarray, v: np.ndarray, t0: float, t1: float) -> float:
    """Time-weighted (trapezoidal) mean of the piecewise-linear signal on [t0, t1]."""
    inside = (t > t0) & (t < t1)
    tt = np.concatenate(([t0], t[inside], [t1]))
    vv = np.concatenate(([np.interp(t0, t, v)], v[inside], [np.interp(t1, t, v)]))
    area = 0.5 * np.sum((vv[1:] + vv[:-1]) * np.diff(tt))
    return float(area / (t1 - t0))


def _check_window(tr: Trace, w: SteadyWindow) -> None:
    if w.t_start < tr.time[0] - 1e-15 or w.t_end > tr.time[-1] + 1e-15:
        raise EmptyWindow(
            f"window {w.t_start:g}..{w.t_end:g} lies outside the trace "
            f"({tr.time[0]:g}..{tr.time[-1]:g})"
        )


def _samples(tr: Trace, w: SteadyWindow) -> tuple[np.ndarray, np.ndarray]:
    _check_window(tr, w)
    mask = (tr.time >= w.t_start) & (tr.time <= w.t_end)
    if not mask.any():
        raise EmptyWindow(f"no samples of {tr.name} in {w.t_start:g}..{w.t_end:g}")
    return tr.time[mask], tr.values[mask]


def steady_state_window(tr: Trace, frac: float = 0.2) -> SteadyWindow:
    """Last ``frac`` of the record. ``drift`` is set when the mean of the
    window's second half differs from its first half by more than 1%."""
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    t0, t1 = tr.time[0], tr.time[-1]
    start = t1 - frac * (t1 - t0)
    if np.count_nonzero(tr.time >= start) < 2:
        raise TraceTooShort(f"{tr.name}: fewer than 2 samples in the last {frac:.0%} of the record")
    mid = 0.5 * (start + t1)
    whole = _mean_between(tr.time, tr.values, start, t1)
    first = _mean_between(tr.time, tr.values, start, mid)
    second = _mean_between(tr.time, tr.values, mid, t1)
    drift = abs(second - first) > DRIFT_LIMIT * abs(whole)
    return SteadyWindow(float(start), float(t1), bool(drift))


def _note(w: SteadyWindow) -> str:
    return "signal may not be settled (mean drifts >1% across the window)" if w.drift else ""


def get_mean_output_voltage(tr: Trace, w: SteadyWindow) -> Measurement:
    _samples(tr, w)
    value = _mean_between(tr.time, tr.values, w.t_start, w.t_end)
    return Measurement("mean", value, tr.unit, w, _note(w))


def get_ripple(tr: Trace, w: SteadyWindow) -> Measurement:
    _, v = _samples(tr, w)
    return Measurement("ripple", float(v.max() - v.min()), tr.unit, w, _note(w))


def get_switching_frequency(tr: Trace, w: SteadyWindow) -> Measurement:
    """Fundamental frequency from the highest spectral peak.

    The window is resampled onto a uniform power-of-two grid (SPICE output is
    not uniformly spaced), mean-removed, Hann-tapered, and the peak bin is
    refined by a parabola through the log magnitudes of the peak and its two
    neighbours.
    """
    t, _ = _samples(tr, w)
    count = max(len(t), 2)
    n = 1 << (count - 1).bit_length()
    span = w.t_end - w.t_start
    dt = span / n
    grid = w.t_start + dt * np.arange(n)
    x = np.interp(grid, tr.time, tr.values)
    x = x - x.mean()
    spectrum = np.abs(np.fft.rfft(x * np.hanning(n)))
    spectrum[0] = 0.0
    k = int(np.argmax(spectrum))
    scale = max(float(np.max(np.abs(tr.values))), 1e-300)
    if k == 0 or spectrum[k] <= 1e-9 * scale * n:
        raise NoPeak(f"{tr.name}: spectrum is flat after removing the mean")
    offset = 0.0
    if 0 < k < len(spectrum) - 1 and spectrum[k - 1] > 0 and spectrum[k + 1] > 0:
        a, b, c = np.log(spectrum[k - 1: k + 2])
        denom = a - 2 * b + c
        if denom != 0:
            offset = 0.5 * (a - c) / denom
    freq = (k + offset) / (n * dt)
    periods = freq * span
    diag = [_note(w)] if w.drift else []
    if periods < MIN_PERIODS:
        diag.append(f"window holds only {periods:.1f} periods (want >= {MIN_PERIODS})")
    return Measurement("switching_frequency", float(freq), "Hz", w, "; ".join(diag))


def get_settle_in_time(tr: Trace, w: Optional[SteadyWindow] = None) -> Measurement:
    """First time the signal reaches 90% of its steady-state mean."""
    if w is None:
        w = steady_state_window(tr)
    if w.drift:
        raise AmbiguousSteadyState(f"{tr.name}: steady state is ambiguous ({_note(w)})")
    steady = get_mean_output_voltage(tr, w).value
    if abs(steady) <= 1e-12 * max(float(np.max(np.abs(tr.values))), 1e-300):
        raise NeverSettles(f"{tr.name}: steady-state mean is zero")
    threshold = SETTLE_FRACTION * steady
    sign = 1.0 if steady > 0 else -1.0
    reached = sign * tr.values >= sign * threshold
    hits = np.nonzero(reached)[0]
    if hits.size == 0:
        raise NeverSettles(f"{tr.name}: never reaches {threshold:.6g} {tr.unit}")
    i = int(hits[0])
    if i == 0:
        t_hit = float(tr.time[0])
    else:
        v0, v1 = tr.values[i - 1], tr.values[i]
        t0, t1 = tr.time[i - 1], tr.time[i]
        t_hit = float(t0 + (threshold - v0) / (v1 - v0) * (t1 - t0))
    return Measurement("settle_time", t_hit, "s", w,
                       f"threshold {threshold:.6g} {tr.unit} (90% of {steady:.6g})")


def normalize_kind(kind: str) -> str:
    key = kind.strip().lower().replace("-", "_").replace(" ", "_")
    key = _ALIASES.get(key, key)
    if key not in KINDS:
        raise UnknownKind(f"unknown measurement kind {kind!r}; choose one of {', '.join(KINDS)}")
    return key


def read_feature(ds: Dataset, signal: str, kind: str) -> Measurement:
    """Dispatch one reading tool on one signal of a Dataset.

    This is the single entry point shared by the agent's tools and the
    benchmark's verification step.
    """
    kind = normalize_kind(kind)
    tr = Trace.from_dataset(ds, signal)
    if kind == "settle_time":
        return get_settle_in_time(tr)
    w = steady_state_window(tr)
    if kind == "mean":
        return get_mean_output_voltage(tr, w)
    if kind == "ripple":
        return get_ripple(tr, w)
    return get_switching_frequency(tr, w)
