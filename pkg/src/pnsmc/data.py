"""Data production, ingestion and scoring.

Synthetic records are produced the way the case studies describe: an
excitation is synthesised on a fine grid, the model is integrated with
classical RK4 (input held constant across each step), the measured channel is
decimated to the identification rate and corrupted with white noise scaled to
a fraction of its RMS.  Files are CSV (``t,u,y``) plus a ``.meta.json``
sidecar.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy.signal import decimate

from .models import ModelSpec


class DataError(ValueError):
    """Malformed, inconsistent or non-uniform data."""


class AccuracyWarning(UserWarning):
    """RK4 step-halving check exceeded its tolerance."""


UNIFORM_RTOL = 1e-9


@dataclass
class TimeSeriesDataset:
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    rate_hz: float
    observed: str = "displacement"
    units: str = ""
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (self.t.shape == self.u.shape == self.y.shape) or self.t.ndim != 1:
            raise DataError(
                f"columns must be 1-D and of equal length, got {self.t.shape}, "
                f"{self.u.shape}, {self.y.shape}"
            )
        if not self.rate_hz > 0:
            raise DataError(f"sample rate must be positive, got {self.rate_hz}")
        check_uniform(self.t, self.rate_hz)

    def __len__(self):
        return len(self.t)

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    def slice(self, start: int = 0, stop: Optional[int] = None) -> "TimeSeriesDataset":
        sl = slice(start, stop)
        meta = dict(self.meta)
        if start and "x0" in meta:
            # the initial state is only known for the original start
            meta.pop("x0")
        return TimeSeriesDataset(self.t[sl], self.u[sl], self.y[sl], self.rate_hz,
                                 self.observed, self.units, self.provenance, meta)

    def sidecar(self) -> dict:
        out = {
            "rate_hz": self.rate_hz,
            "observed": self.observed,
            "units": self.units,
            "provenance": self.provenance,
        }
        out.update(self.meta)
        return out


def check_uniform(t, rate_hz: Optional[float] = None) -> None:
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        return
    dt = np.diff(t)
    ref = 1.0 / rate_hz if rate_hz else float(np.median(dt))
    if not ref > 0:
        raise DataError("timestamps must be strictly increasing")
    # absolute slack of a few ulps of the largest timestamp
    tol = UNIFORM_RTOL * ref + 8 * np.finfo(float).eps * np.max(np.abs(t))
    worst = np.max(np.abs(dt - ref))
    if worst > tol:
        i = int(np.argmax(np.abs(dt - ref)))
        raise DataError(
            f"non-uniform sampling: step {i} is {dt[i]!r}, expected {ref!r}"
        )


# -- excitation -----------------------------------------------------------------


@dataclass(frozen=True)
class MultisineSpec:
    """Random-phase multisine on ``n_lines`` equally spaced frequencies.

    ``amplitude`` is the post-ramp peak (``scale="peak"``) or the RMS
    (``scale="rms"``) of the signal.
    """

    f_min: float = 0.5
    f_max: float = 100.0
    n_lines: int = 2000
    amplitude: float = 208.0
    ramp_fraction: float = 0.1
    scale: str = "peak"
    phase_seed: Optional[int] = None

    def validate(self, rate_hz: float) -> None:
        nyq = 0.5 * rate_hz
        if self.n_lines < 1:
            raise ValueError("n_lines must be >= 1")
        if self.n_lines > 1 and not 0 < self.f_min < self.f_max:
            raise ValueError(f"need 0 < f_min < f_max, got {self.f_min}, {self.f_max}")
        if not 0 < self.f_min or not max(self.f_min, self.f_max) < nyq:
            raise ValueError(f"multisine lines must lie in (0, {nyq}) Hz (Nyquist)")
        if not 0 <= self.ramp_fraction < 1:
            raise ValueError("ramp_fraction must be in [0, 1)")
        if self.scale not in ("peak", "rms"):
            raise ValueError("scale must be 'peak' or 'rms'")


def gen_multisine(spec: MultisineSpec, duration: float, rate_hz: float, rng=None,
                  phases=None) -> np.ndarray:
    """Sample the multisine at ``rate_hz`` for ``duration`` seconds."""
    spec.validate(rate_hz)
    n = int(round(duration * rate_hz))
    t = np.arange(n) / rate_hz
    freqs = np.linspace(spec.f_min, spec.f_max, spec.n_lines) if spec.n_lines > 1 \
        else np.array([spec.f_min])
    if phases is None:
        rng = np.random.default_rng(spec.phase_seed if rng is None else rng)
        phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_lines)
    phases = np.asarray(phases, dtype=float)
    sig = np.zeros(n)
    # chunk over lines to bound memory on long, dense signals
    for lo in range(0, len(freqs), 64):
        f = freqs[lo : lo + 64]
        p = phases[lo : lo + 64]
        sig += np.cos(2 * np.pi * t[:, None] * f[None, :] + p[None, :]).sum(axis=1)
    if n == 0:
        return sig
    n_ramp = int(round(spec.ramp_fraction * n))
    body = sig[n_ramp:] if n_ramp < n else sig
    level = np.max(np.abs(body)) if spec.scale == "peak" else np.sqrt(np.mean(body**2))
    if level > 0:
        sig *= spec.amplitude / level
    if n_ramp > 0:
        sig[:n_ramp] *= np.arange(n_ramp) / n_ramp
    return sig


def gen_sine_sweep(f_start: float, f_end: float, sweep_rate: float, amplitude: float,
                   duration: float, rate_hz: float) -> np.ndarray:
    """Linear sine sweep at ``sweep_rate`` Hz/s from ``f_start``, held at ``f_end``."""
    nyq = 0.5 * rate_hz
    if not (0 < f_start < nyq and 0 < f_end < nyq):
        raise ValueError(f"sweep frequencies must lie in (0, {nyq}) Hz")
    n = int(round(duration * rate_hz))
    t = np.arange(n) / rate_hz
    sgn = np.sign(f_end - f_start) or 1.0
    t_end = abs(f_end - f_start) / sweep_rate if sweep_rate > 0 else np.inf
    tc = np.minimum(t, t_end)
    phase = 2 * np.pi * (f_start * tc + 0.5 * sgn * sweep_rate * tc**2)
    phase = phase + 2 * np.pi * f_end * np.maximum(t - t_end, 0.0)
    return amplitude * np.sin(phase)


# -- simulation -----------------------------------------------------------------


@dataclass
class SimulationResult:
    t: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    observed: np.ndarray
    diverged: np.ndarray


def _rk4_core(model, theta, u, h, x1, on_divergence="raise"):
    n = len(u)
    theta = np.asarray(theta, dtype=float)
    x = np.array(np.broadcast_to(np.asarray(x1, dtype=float),
                                 theta.shape[:-1] + (model.d,)), dtype=float)
    states = np.empty((n,) + x.shape)
    derivs = np.empty((n,) + x.shape)
    diverged = np.zeros(x.shape[:-1], dtype=bool)
    f = model.f
    with np.errstate(all="ignore"):
        for i in range(n):
            states[i] = x
            k1 = f(x, u[i], theta)
            derivs[i] = k1
            if i == n - 1:
                break
            k2 = f(x + 0.5 * h * k1, u[i], theta)
            k3 = f(x + 0.5 * h * k2, u[i], theta)
            k4 = f(x + h * k3, u[i], theta)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = ~np.all(np.isfinite(x), axis=-1)
            if np.any(bad & ~diverged):
                if on_divergence == "raise":
                    raise DataError(f"RK4 trajectory became non-finite at step {i + 1}")
                diverged |= bad
                x[bad] = 0.0
    return states, derivs, diverged


def rk4_simulate(model: ModelSpec, theta, u, rate_hz: float, x1, check: bool = True,
                 on_divergence: str = "raise", rtol: float = 1e-8) -> SimulationResult:
    """Classical RK4 with zero-order-hold input sampled at ``rate_hz``.

    ``theta`` may be a batch ``(N, p)``; arrays then carry axes ``(T, N, d)``.
    With ``check`` the run is repeated at half the step under the same held
    input; the Richardson estimate of the remaining error (difference / 15)
    must stay below ``rtol`` relative to the trajectory magnitude, else an
    :class:`AccuracyWarning` is issued.
    """
    u = np.asarray(u, dtype=float)
    h = 1.0 / rate_hz
    states, derivs, diverged = _rk4_core(model, theta, u, h, x1, on_divergence)
    t = np.arange(len(u)) * h
    if check and len(u) >= 2:
        fine, _, div2 = _rk4_core(model, theta, np.repeat(u, 2), 0.5 * h, x1, "mask")
        ok = ~(diverged | div2)
        if np.any(ok):
            change = np.max(np.abs(states - fine[::2])[:, ok], axis=0) / 15.0
            scale = np.max(np.abs(states)[:, ok], axis=0)
            scale = np.where(scale > 0, scale, 1.0)
            worst = float(np.max(change / scale))
            if worst > rtol:
                warnings.warn(
                    f"RK4 at {rate_hz} Hz: estimated step error {worst:.2e} "
                    f"exceeds {rtol:.0e} of the signal scale",
                    AccuracyWarning,
                    stacklevel=2,
                )
    return SimulationResult(t, states, derivs, model.observe(states, derivs), diverged)


def downsample(dataset: TimeSeriesDataset, factor: int, antialias: bool = False) -> TimeSeriesDataset:
    """Keep every ``factor``-th sample, starting with the first.

    Simulated records are band-limited by their excitation, so plain sample
    selection is the default.  ``antialias`` low-pass filters the output
    channel first (zero-phase FIR), for rough experimental records.
    """
    if int(factor) != factor or factor < 1:
        raise DataError(f"decimation factor must be a positive integer, got {factor}")
    factor = int(factor)
    sl = slice(None, None, factor)
    y = dataset.y
    if antialias and factor > 1:
        y = decimate(y, factor, ftype="fir", zero_phase=True)
    else:
        y = y[sl]
    return TimeSeriesDataset(dataset.t[sl], dataset.u[sl], y,
                             dataset.rate_hz / factor, dataset.observed, dataset.units,
                             dataset.provenance, dict(dataset.meta))


def add_noise(signal, fraction: float, rng=None):
    """Add white Gaussian noise with ``std = fraction * RMS(signal)``.

    Returns ``(noisy, std)``.
    """
    if not fraction >= 0:
        raise ValueError("noise fraction must be >= 0")
    signal = np.asarray(signal, dtype=float)
    rng = np.random.default_rng(rng)
    rms = float(np.sqrt(np.mean(signal**2))) if signal.size else 0.0
    std = fraction * rms
    if std == 0.0:
        return signal.copy(), 0.0
    return signal + std * rng.standard_normal(signal.shape), std


def make_excitation(spec: Mapping, duration: float, rate_hz: float, rng) -> np.ndarray:
    """Build an input signal from a config mapping (``kind`` selects the form)."""
    spec = dict(spec)
    kind = spec.pop("kind", "multisine")
    if kind == "multisine":
        ms = MultisineSpec(**spec)
        return gen_multisine(ms, duration, rate_hz, rng)
    if kind == "sine_sweep":
        return gen_sine_sweep(spec["f_start"], spec["f_end"], spec["sweep_rate"],
                              spec["amplitude"], duration, rate_hz)
    if kind == "zero":
        return np.zeros(int(round(duration * rate_hz)))
    raise ValueError(f"unknown excitation kind {kind!r}")


def generate_dataset(model: ModelSpec, theta, excitation: Mapping, duration: float,
                     gen_rate_hz: float, factor: int, noise_fraction: float, rng, x1,
                     hold_input: bool = False, settle: float = 0.0,
                     provenance: str = "", check: bool = True):
    """Simulate, decimate and corrupt one record; returns ``(clean, noisy)``.

    ``hold_input`` synthesises the excitation at the output rate and holds it
    across the fine steps, so re-simulating from the stored input reproduces
    the record exactly.  ``settle`` seconds of (periodic) excitation are
    simulated first and discarded; the state reached is stored as ``x0``.
    """
    rng = np.random.default_rng(rng)
    out_rate = gen_rate_hz / factor
    total = duration + settle
    if hold_input:
        u_out = make_excitation(excitation, total, out_rate, rng)
        u_fine = np.repeat(u_out, factor)
    else:
        u_fine = make_excitation(excitation, total, gen_rate_hz, rng)
    sim = rk4_simulate(model, theta, u_fine, gen_rate_hz, x1, check=check)
    n_settle = int(round(settle * gen_rate_hz))
    n_settle -= n_settle % factor
    sl = slice(n_settle, None, factor)
    x0 = sim.states[n_settle] if len(u_fine) > n_settle else np.asarray(x1, dtype=float)
    y = sim.observed[sl]
    u = u_fine[sl]
    t = np.arange(len(y)) / out_rate
    meta = {
        "model": model.name,
        "theta_true": {n: float(v) for n, v in zip(model.param_names, np.asarray(theta))},
        "x0": [float(v) for v in x0],
        "gen_rate_hz": gen_rate_hz,
    }
    clean = TimeSeriesDataset(t, u, y, out_rate, model.observed, model.unit,
                              provenance or "simulated (RK4, clean)", dict(meta))
    y_noisy, std = add_noise(y, noise_fraction, rng)
    meta.update(noise_std=std, noise_fraction=noise_fraction)
    noisy = TimeSeriesDataset(t, u, y_noisy, out_rate, model.observed, model.unit,
                              provenance or "simulated (RK4, noisy)", meta)
    return clean, noisy


# -- file I/O --------------------------------------------------------------------

SCHEMAS = {
    "generic": {"time": "t", "input": "u", "output": "y", "rate_hz": None,
                "observed": None, "units": None},
    "silverbox": {"time": None, "input": "V1", "output": "V2", "rate_hz": 610.35,
                  "observed": "voltage", "units": "V"},
    "emps": {"time": "t", "input": "force", "output": "position", "rate_hz": 1000.0,
             "observed": "displacement", "units": "m"},
}


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_dataset(dataset: TimeSeriesDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,u,y\n")
        for row in zip(dataset.t, dataset.u, dataset.y):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(dataset.sidecar(), fh, indent=2)
        fh.write("\n")
    return path


def load_dataset(path, schema: str = "generic", columns: Optional[Mapping] = None,
                 rate_hz: Optional[float] = None) -> TimeSeriesDataset:
    """Read a CSV record; ``columns`` overrides the schema's column mapping.

    The sample rate is taken, in order, from ``rate_hz``, the sidecar, the
    schema default, and finally the timestamps.
    """
    path = Path(path)
    if schema not in SCHEMAS:
        raise DataError(f"unknown schema {schema!r}; choose one of {sorted(SCHEMAS)}")
    cfg = dict(SCHEMAS[schema])
    if columns:
        cfg.update({k: v for k, v in columns.items() if k in ("time", "input", "output")})
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (no header)") from None
        rows = [r for r in reader if r]
    cols = {}
    for role in ("time", "input", "output"):
        name = cfg[role]
        if name is None:
            continue
        if name not in header:
            raise DataError(f"{path}: missing column {name!r} ({role}); header is {header}")
        j = header.index(name)
        try:
            cols[role] = np.array([float(r[j]) for r in rows], dtype=float)
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: bad value in column {name!r}: {exc}") from None

    rate = rate_hz or meta.get("rate_hz") or cfg["rate_hz"]
    if "time" in cols:
        t = cols["time"]
        if rate is None:
            if len(t) < 2:
                raise DataError(f"{path}: cannot infer sample rate from fewer than 2 rows")
            rate = 1.0 / float(np.median(np.diff(t)))
    else:
        if rate is None:
            raise DataError(f"{path}: schema {schema!r} has no time column; give rate_hz")
        t = np.arange(len(rows)) / rate
    meta = dict(meta)
    observed = meta.pop("observed", None) or cfg["observed"] or "displacement"
    units = meta.pop("units", None) or cfg["units"] or ""
    provenance = meta.pop("provenance", None) or f"loaded from {path.name} ({schema})"
    meta.pop("rate_hz", None)
    try:
        return TimeSeriesDataset(t, cols["input"], cols["output"], float(rate), observed,
                                 units, provenance, meta)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- scoring ---------------------------------------------------------------------


@dataclass
class RmseReport:
    per_particle: np.ndarray
    unit: str

    @property
    def finite(self) -> np.ndarray:
        return self.per_particle[np.isfinite(self.per_particle)]

    @property
    def n_particles(self) -> int:
        return len(self.per_particle)

    @property
    def n_diverged(self) -> int:
        return int(np.sum(~np.isfinite(self.per_particle)))

    @property
    def min(self) -> float:
        return float(np.min(self.finite)) if self.finite.size else float("inf")

    @property
    def max(self) -> float:
        return float(np.max(self.finite)) if self.finite.size else float("inf")

    @property
    def mean(self) -> float:
        return float(np.mean(self.finite)) if self.finite.size else float("inf")

    def to_dict(self) -> dict:
        return {
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "n_particles": self.n_particles,
            "n_diverged": self.n_diverged,
            "unit": self.unit,
        }


def rmse_per_particle(model: ModelSpec, particles, dataset: TimeSeriesDataset,
                      oversample: int = 1, x1=None, skip: int = 0) -> RmseReport:
    """Simulate every particle over the record and score the measured channel.

    The stored input is held over ``oversample`` RK4 steps per sample.
    ``skip`` leading samples (a transient) are excluded from the RMSE.
    Diverging particles score ``inf`` and are left out of min/max/mean.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    if particles.shape[1] != model.n_params:
        raise ValueError(f"particles have {particles.shape[1]} columns, "
                         f"{model.name} needs {model.n_params}")
    if x1 is None:
        x1 = dataset.meta.get("x0", np.zeros(model.d))
    n = len(dataset)
    if n == 0:
        return RmseReport(np.full(len(particles), np.nan), dataset.units)
    u_fine = np.repeat(dataset.u, oversample)[: (n - 1) * oversample + 1]
    sim = rk4_simulate(model, particles, u_fine, dataset.rate_hz * oversample, x1,
                       check=False, on_divergence="mask")
    pred = sim.observed[::oversample]
    err = pred[skip:] - dataset.y[skip:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        rmse = np.sqrt(np.mean(err**2, axis=0))
    rmse = np.where(sim.diverged | ~np.isfinite(rmse), np.inf, rmse)
    report = RmseReport(rmse, dataset.units)
    if report.n_diverged:
        warnings.warn(f"{report.n_diverged} particle simulations diverged", RuntimeWarning,
                      stacklevel=2)
    return report


def format_rmse_table(columns: Mapping[str, Mapping]) -> str:
    """Render min/max/mean particle RMSE per case in the case-study summary layout.

    ``columns`` maps a case name to a mapping with ``unit``, ``min``, ``max``
    and ``mean`` (an :meth:`RmseReport.to_dict` result works).
    """
    names = list(columns)
    rows = [
        ["Case Study:"] + names,
        ["Unit:"] + [f"RMS ({columns[n]['unit']})" for n in names],
        ["Minimum Particle"] + [f"{columns[n]['min']:.4e}" for n in names],
        ["Maximum Particle"] + [f"{columns[n]['max']:.4e}" for n in names],
        ["Mean Particle"] + [f"{columns[n]['mean']:.4e}" for n in names],
    ]
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows
    )
