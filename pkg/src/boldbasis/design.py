"""Stimulus schedules and HRF-convolved design matrices.

Each condition contributes one column formed by convolving its box-car
indicator (sampled at TR resolution) with the canonical double-gamma HRF,
optionally followed by a column using the HRF time derivative. All columns
are standardized to mean zero, unit sample variance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, ValidationError

__all__ = [
    "HrfParams",
    "StimulusSchedule",
    "DesignMatrix",
    "double_gamma_hrf",
    "double_gamma_hrf_derivative",
    "build_design",
    "read_events_csv",
]

#: seconds of HRF kernel retained when convolving
HRF_KERNEL_SECONDS = 32.0


@dataclass(frozen=True)
class HrfParams:
    """Shape constants of the double-gamma HRF (SPM-canonical defaults)."""

    peak: float = 6.0
    undershoot: float = 16.0
    ratio: float = 1.0 / 6.0
    peak_disp: float = 1.0
    undershoot_disp: float = 1.0


def _gamma_pdf(t, a, scale):
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos] / scale
    out[pos] = np.exp((a - 1) * np.log(tp) - tp - gammaln(a)) / scale
    return out


def _gamma_pdf_derivative(t, a, scale):
    # d/dt Gamma(t; a, scale) = pdf(t) * ((a-1)/t - 1/scale); finite for a > 2
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = _gamma_pdf(t[pos], a, scale) * ((a - 1) / t[pos] - 1.0 / scale)
    return out


def double_gamma_hrf(t, params: HrfParams = HrfParams()):
    """Canonical double-gamma HRF h(t) = g(t; peak) - ratio * g(t; undershoot).

    ``g`` is a gamma density in t (unit dispersions by default), so h(0) = 0
    and the response peaks near t = 5 s with a later undershoot.

    Raises
    ------
    ValueError
        If any t is negative (the HRF is causal).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("HRF is defined for t >= 0 only")
    val = _gamma_pdf(t, params.peak / params.peak_disp, params.peak_disp)
    val = val - params.ratio * _gamma_pdf(
        t, params.undershoot / params.undershoot_disp, params.undershoot_disp
    )
    return val if val.ndim else float(val)


def double_gamma_hrf_derivative(t, params: HrfParams = HrfParams()):
    """Analytic time derivative of :func:`double_gamma_hrf`."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("HRF is defined for t >= 0 only")
    val = _gamma_pdf_derivative(t, params.peak / params.peak_disp, params.peak_disp)
    val = val - params.ratio * _gamma_pdf_derivative(
        t, params.undershoot / params.undershoot_disp, params.undershoot_disp
    )
    return val if val.ndim else float(val)


@dataclass(frozen=True)
class StimulusSchedule:
    """Experiment timing: named conditions plus (condition, onset, duration) events.

    Onsets and durations are in seconds; ``tr`` is the frame spacing.
    """

    conditions: tuple
    events: tuple
    tr: float

    def __post_init__(self):
        if self.tr <= 0:
            raise ConfigError("tr must be positive")
        conditions = tuple(self.conditions)
        events = tuple((str(c), float(o), float(d)) for c, o, d in self.events)
        for cond, onset, dur in events:
            if cond not in conditions:
                raise ConfigError(f"event references unknown condition '{cond}'")
            if onset < 0 or dur < 0:
                raise ConfigError("onsets and durations must be non-negative")
        object.__setattr__(self, "conditions", conditions)
        object.__setattr__(self, "events", events)

    def indicator(self, condition: str, n_time: int) -> np.ndarray:
        """Box-car sampled at frame times t_i = i * tr."""
        t = np.arange(n_time) * self.tr
        box = np.zeros(n_time)
        for cond, onset, dur in self.events:
            if cond != condition:
                continue
            if onset + dur > n_time * self.tr + 1e-9:
                raise ConfigError(
                    f"event ({cond}, {onset}, {dur}) extends past the last frame"
                )
            box[(t >= onset) & (t < onset + dur)] = 1.0
        return box


@dataclass(frozen=True)
class DesignMatrix:
    """T x P design with per-column (condition, kind) metadata.

    Every column is standardized: mean 0 and unit variance (divisor T - 1).
    """

    values: np.ndarray
    column_meta: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.column_meta):
            raise ValidationError("design shape does not match column metadata")
        mu = values.mean(axis=0)
        var = values.var(axis=0, ddof=1)
        if np.abs(mu).max(initial=0.0) > 1e-10 or np.abs(var - 1).max(initial=0.0) > 1e-10:
            raise ValidationError("design columns must be standardized")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_meta", tuple(self.column_meta))

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]


def _standardize(col: np.ndarray, label: str) -> np.ndarray:
    sd = col.std(ddof=1)
    if sd == 0:
        raise ConfigError(f"column '{label}' is constant and cannot be standardized")
    return (col - col.mean()) / sd


def build_design(
    sched: StimulusSchedule,
    n_time: int,
    include_derivative: bool = False,
    hrf_params: HrfParams = HrfParams(),
    upsample: int = 1,
) -> DesignMatrix:
    """Convolve box-car indicators with the HRF to form the design matrix.

    Column order follows the condition order with the HRF column before its
    derivative column (odd/even layout when derivatives are included).

    Parameters
    ----------
    upsample : int
        Microtime oversampling factor for the convolution grid; 1 keeps the
        box-car at TR resolution.

    Raises
    ------
    ConfigError
        If a condition has no events (its column would be all zero).
    """
    cols = []
    meta = []
    for cond in sched.conditions:
        if not any(ev[0] == cond for ev in sched.events):
            raise ConfigError(f"condition '{cond}' has no events")
        resp = condition_response(sched, cond, n_time, "hrf", hrf_params, upsample)
        cols.append(_standardize(resp, f"{cond}:hrf"))
        meta.append((cond, "hrf"))
        if include_derivative:
            dresp = condition_response(
                sched, cond, n_time, "hrf-derivative", hrf_params, upsample
            )
            cols.append(_standardize(dresp, f"{cond}:hrf-derivative"))
            meta.append((cond, "hrf-derivative"))
    return DesignMatrix(values=np.column_stack(cols), column_meta=tuple(meta))


def condition_response(
    sched: StimulusSchedule,
    condition: str,
    n_time: int,
    kind: str = "hrf",
    hrf_params: HrfParams = HrfParams(),
    upsample: int = 1,
) -> np.ndarray:
    """Unstandardized convolution of one condition's box-car with the HRF.

    This is linear in the event list, which the standardized columns are not.
    """
    if upsample < 1:
        raise ConfigError("upsample must be >= 1")
    if kind not in ("hrf", "hrf-derivative"):
        raise ConfigError(f"unknown response kind '{kind}'")
    dt = sched.tr / upsample
    kernel_t = np.arange(0.0, HRF_KERNEL_SECONDS + dt / 2, dt)
    kernel = (
        double_gamma_hrf(kernel_t, hrf_params)
        if kind == "hrf"
        else double_gamma_hrf_derivative(kernel_t, hrf_params)
    )
    if upsample == 1:
        box = sched.indicator(condition, n_time)
    else:
        fine = StimulusSchedule(sched.conditions, sched.events, tr=dt)
        box = fine.indicator(condition, n_time * upsample)
    resp = np.convolve(box, kernel)[: box.size] * dt
    return resp[::upsample][:n_time]


def read_events_csv(path, tr: float) -> StimulusSchedule:
    """Read a ``condition,onset,duration`` CSV into a schedule.

    The frame spacing is not stored in the file, so the caller supplies it.
    Condition order follows first appearance in the file.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [
                f.strip() for f in reader.fieldnames
            ] != ["condition", "onset", "duration"]:
                raise ConfigError(
                    f"{path}: expected header 'condition,onset,duration'"
                )
            events = []
            order = []
            for row in reader:
                cond = row["condition"].strip()
                if cond not in order:
                    order.append(cond)
                events.append((cond, float(row["onset"]), float(row["duration"])))
    except FileNotFoundError:
        raise ConfigError(f"events file not found: {path}")
    except ValueError as exc:
        raise ConfigError(f"{path}: bad numeric field: {exc}")
    return StimulusSchedule(conditions=tuple(order), events=tuple(events), tr=tr)


def write_events_csv(sched: StimulusSchedule, path) -> None:
    """Write a schedule back to the CSV event format."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "onset", "duration"])
        for cond, onset, dur in sched.events:
            writer.writerow([cond, repr(onset), repr(dur)])
