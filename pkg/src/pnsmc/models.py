"""Benchmark vector fields, parameter priors and the model registry.

Every right-hand side broadcasts over leading axes, so ``x`` may be a single
state of shape ``(d,)`` or a particle batch ``(N, d)`` with ``theta`` of shape
``(N, p)``.  The unchecked kernels (``ModelSpec.field``) are what the filter
calls in its inner loop; the public ``*_rhs`` functions validate their input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when a vector field is evaluated on non-finite input."""


def _check_finite(x, u, theta):
    for name, arr in (("x", x), ("u", u), ("theta", theta)):
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite value in {name}")


# -- raw kernels -------------------------------------------------------------


def _bouc_wen(x, u, theta, nu=1.0):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    disp, vel, z = x[..., 0], x[..., 1], x[..., 2]
    m, c, k = theta[..., 0], theta[..., 1], theta[..., 2]
    alpha, beta, gamma, delta = theta[..., 3], theta[..., 4], theta[..., 5], theta[..., 6]
    abs_z = np.abs(z)
    acc = (u - c * vel - k * disp - z) / m
    zdot = alpha * vel - beta * (
        gamma * np.abs(vel) * abs_z ** (nu - 1.0) * z + delta * vel * abs_z**nu
    )
    return np.stack(np.broadcast_arrays(vel, acc, zdot), axis=-1)


def _duffing(x, u, theta):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    disp, vel = x[..., 0], x[..., 1]
    m, c, k, k3 = theta[..., 0], theta[..., 1], theta[..., 2], theta[..., 3]
    acc = (u - c * vel - k * disp - k3 * disp**3) / m
    return np.stack(np.broadcast_arrays(vel, acc), axis=-1)


def _emps(x, u, theta):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    vel = x[..., 1]
    mass, fv, fc, offset = theta[..., 0], theta[..., 1], theta[..., 2], theta[..., 3]
    # np.sign(0) == 0, which keeps the rest state an equilibrium
    acc = (u - fv * vel - fc * np.sign(vel) - offset) / mass
    return np.stack(np.broadcast_arrays(vel, acc), axis=-1)


def _linear_oscillator(x, u, theta):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    disp, vel = x[..., 0], x[..., 1]
    m, c, k = theta[..., 0], theta[..., 1], theta[..., 2]
    acc = (u - c * vel - k * disp) / m
    return np.stack(np.broadcast_arrays(vel, acc), axis=-1)


# -- public, validated vector fields ------------------------------------------


def bouc_wen_rhs(x, u, theta, nu=1.0):
    """Bouc-Wen oscillator with state (displacement, velocity, hysteretic force).

    Returns ``(v, (u - c v - k x - z) / m, alpha v - beta (gamma |v| |z|^(nu-1) z
    + delta v |z|^nu))``.
    """
    _check_finite(x, u, theta)
    if nu < 1:
        raise DomainError(f"Bouc-Wen exponent nu must be >= 1, got {nu}")
    return _bouc_wen(x, u, theta, nu)


def duffing_rhs(x, u, theta):
    """Duffing oscillator ``m x'' + c x' + k x + k3 x^3 = u``."""
    _check_finite(x, u, theta)
    return _duffing(x, u, theta)


def emps_rhs(x, u, theta):
    """EMPS drive ``u = M x'' + Fv x' + Fc sign(x') + offset`` with sign(0) = 0."""
    _check_finite(x, u, theta)
    return _emps(x, u, theta)


def linear_oscillator_rhs(x, u, theta):
    _check_finite(x, u, theta)
    return _linear_oscillator(x, u, theta)


# -- model specification ------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """A continuous-time state-space model ``x' = f(x, u, theta)``.

    ``obs_block`` selects which derivative block the measured channel lives in
    (0: the state itself, 1: its time derivative) and ``obs_index`` the
    component within that block.  Acceleration of an oscillator with state
    ``(x, v)`` is therefore ``obs_block=1, obs_index=1``.
    """

    name: str
    d: int
    param_names: tuple[str, ...]
    field: Callable
    obs_block: int = 0
    obs_index: int = 0
    positive: tuple[bool, ...] = ()
    constants: Mapping[str, float] = field(default_factory=dict)
    state_names: tuple[str, ...] = ()
    observed: str = "displacement"
    unit: str = ""

    def __post_init__(self):
        if self.obs_block not in (0, 1):
            raise ValueError(f"obs_block must be 0 or 1, got {self.obs_block}")
        if not 0 <= self.obs_index < self.d:
            raise ValueError(f"obs_index {self.obs_index} out of range for d={self.d}")
        if self.positive and len(self.positive) != len(self.param_names):
            raise ValueError("positive flags must match param_names")

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def f(self, x, u, theta, t=0.0):
        """Unchecked vector field (the filter's inner-loop entry point)."""
        return self.field(x, u, theta, **self.constants)

    def rhs(self, x, u, theta, t=0.0):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_params:
            raise ValueError(
                f"{self.name} expects {self.n_params} parameters, got {theta.shape[-1]}"
            )
        _check_finite(x, u, theta)
        out = self.f(x, u, theta, t)
        if out.shape[-1] != self.d:
            raise ValueError(f"rhs returned dimension {out.shape[-1]}, expected {self.d}")
        return out

    def observe(self, states, derivs):
        """Pick the measured channel out of state / derivative arrays."""
        src = states if self.obs_block == 0 else derivs
        return src[..., self.obs_index]

    def with_observation(self, obs_block: int, obs_index: int, observed: str | None = None,
                         unit: str | None = None) -> "ModelSpec":
        from dataclasses import replace

        return replace(
            self,
            obs_block=obs_block,
            obs_index=obs_index,
            observed=observed or self.observed,
            unit=unit if unit is not None else self.unit,
        )


def bouc_wen(nu: float = 1.0) -> ModelSpec:
    if nu < 1:
        raise ValueError(f"nu must be >= 1, got {nu}")
    return ModelSpec(
        name="bouc_wen",
        d=3,
        param_names=("m", "c", "k", "alpha", "beta", "gamma", "delta"),
        field=_bouc_wen,
        obs_block=1,
        obs_index=1,
        positive=(True, True, True, True, True, False, False),
        constants={"nu": float(nu)},
        state_names=("x", "v", "z"),
        observed="acceleration",
        unit="m/s^2",
    )


def duffing() -> ModelSpec:
    return ModelSpec(
        name="duffing",
        d=2,
        param_names=("m", "c", "k", "k3"),
        field=_duffing,
        obs_block=0,
        obs_index=0,
        positive=(True, True, True, True),
        state_names=("x", "v"),
        observed="displacement",
        unit="m",
    )


def emps() -> ModelSpec:
    return ModelSpec(
        name="emps",
        d=2,
        param_names=("M", "Fv", "Fc", "offset"),
        field=_emps,
        obs_block=0,
        obs_index=0,
        positive=(True, True, True, False),
        state_names=("x", "v"),
        observed="displacement",
        unit="m",
    )


def linear_oscillator() -> ModelSpec:
    return ModelSpec(
        name="linear_oscillator",
        d=2,
        param_names=("m", "c", "k"),
        field=_linear_oscillator,
        obs_block=0,
        obs_index=0,
        positive=(True, True, True),
        state_names=("x", "v"),
        observed="displacement",
        unit="m",
    )


MODELS: dict[str, Callable[..., ModelSpec]] = {
    "bouc_wen": bouc_wen,
    "duffing": duffing,
    "emps": emps,
    "linear_oscillator": linear_oscillator,
}


def get_model(name: str, **constants) -> ModelSpec:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(
            f"unknown model {name!r}; choose one of {sorted(MODELS)}"
        ) from None
    return factory(**constants)


# -- priors -------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian priors, one per parameter.

    ``mean`` and ``variance`` are always the moments of the parameter in
    natural units.  Entries with ``log_space`` set are lognormal with those
    moments, i.e. Gaussian on ``log(theta)``; the sampler and the SMC moves
    work on that log scale.
    """

    names: tuple[str, ...]
    mean: np.ndarray
    variance: np.ndarray
    log_space: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.variance, dtype=float)
        log_space = np.asarray(self.log_space, dtype=bool)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)
        object.__setattr__(self, "log_space", log_space)
        n = len(self.names)
        if not (mean.shape == var.shape == log_space.shape == (n,)):
            raise ValueError("prior mean, variance and space flags must have one entry per name")
        if np.any(~(var > 0)) or not np.all(np.isfinite(var)):
            raise ValueError("prior variances must be strictly positive and finite")
        if np.any(log_space & ~(mean > 0)):
            bad = [nm for nm, f, m in zip(self.names, log_space, mean) if f and not m > 0]
            raise ValueError(f"log-space priors need a positive mean: {bad}")

    @classmethod
    def from_table(cls, table: Mapping[str, Sequence], names: Sequence[str] | None = None):
        """Build from ``{name: (mean, variance, space)}``, space in {natural, log}."""
        names = tuple(names) if names is not None else tuple(table)
        missing = [n for n in names if n not in table]
        if missing:
            raise ValueError(f"prior table is missing parameters {missing}")
        rows = []
        for n in names:
            entry = table[n]
            if isinstance(entry, Mapping):
                mean, var, space = entry["mean"], entry["variance"], entry.get("space", "natural")
            else:
                mean, var, space = entry
            if space not in ("natural", "log"):
                raise ValueError(f"prior space for {n!r} must be 'natural' or 'log', got {space!r}")
            rows.append((float(mean), float(var), space == "log"))
        mean, var, log_space = zip(*rows)
        return cls(names, np.array(mean), np.array(var), np.array(log_space))

    def to_table(self) -> dict:
        return {
            n: {"mean": float(m), "variance": float(v), "space": "log" if f else "natural"}
            for n, m, v, f in zip(self.names, self.mean, self.variance, self.log_space)
        }

    @property
    def n_params(self) -> int:
        return len(self.names)

    @property
    def sampling_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Gaussian mean and variance in sampling space."""
        mu = self.mean.copy()
        var = self.variance.copy()
        lf = self.log_space
        s2 = np.log1p(var[lf] / mu[lf] ** 2)
        mu[lf] = np.log(mu[lf]) - 0.5 * s2
        var[lf] = s2
        return mu, var

    def to_sampling(self, theta):
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.log_space, np.log(np.where(self.log_space, theta, 1.0)), theta)

    def to_natural(self, phi):
        phi = np.asarray(phi, dtype=float)
        with np.errstate(over="ignore"):
            return np.where(self.log_space, np.exp(np.where(self.log_space, phi, 0.0)), phi)

    def sample_sampling(self, n: int, rng: np.random.Generator) -> np.ndarray:
        mu, var = self.sampling_moments
        return mu + np.sqrt(var) * rng.standard_normal((n, self.n_params))

    def logpdf_sampling(self, phi) -> np.ndarray:
        """Log density of the sampling-space Gaussian (the density SMC moves target)."""
        mu, var = self.sampling_moments
        phi = np.asarray(phi, dtype=float)
        r = phi - mu
        return -0.5 * np.sum(np.log(2 * np.pi * var) + r * r / var, axis=-1)


def prior_sample(prior: PriorSpec, n: int, rng_seed=None) -> np.ndarray:
    """Draw ``n`` natural-space parameter vectors, shape ``(n, p)``."""
    rng = np.random.default_rng(rng_seed)
    return prior.to_natural(prior.sample_sampling(n, rng))


def prior_logpdf(prior: PriorSpec, theta) -> np.ndarray:
    """Log density of natural-space ``theta``.

    Log-space entries contribute the lognormal density, i.e. the Gaussian on
    ``log(theta)`` minus ``log(theta)``; non-positive values there give -inf.
    """
    theta = np.asarray(theta, dtype=float)
    lf = prior.log_space
    bad = np.any(lf & ~(theta > 0), axis=-1)
    phi = prior.to_sampling(np.where(lf & ~(theta > 0), 1.0, theta))
    jac = -np.sum(np.where(lf, phi, 0.0), axis=-1)
    out = prior.logpdf_sampling(phi) + jac
    return np.where(bad, -np.inf, out)


# -- defaults -----------------------------------------------------------------

# Published Bouc-Wen priors, natural-space Gaussians.
BOUC_WEN_PRIOR = {
    "m": (2.1, 0.011, "natural"),
    "c": (8.8, 6.97, "natural"),
    "k": (5.9e4, 2.18e8, "natural"),
    "alpha": (4.4e4, 1.74e8, "natural"),
    "beta": (8.6e2, 6.66e4, "natural"),
    "gamma": (0.93, 0.0541, "natural"),
    "delta": (1.3, 0.1056, "natural"),
}

# Ground truth of the public hysteretic benchmark (Noel & Schoukens), delta
# taken positive so that the prior above is a perturbation of it.
BOUC_WEN_TRUTH = {
    "m": 2.0, "c": 10.0, "k": 5.0e4, "alpha": 5.0e4,
    "beta": 1.0e3, "gamma": 0.8, "delta": 1.1,
}

DUFFING_TRUTH = {"m": 1.0, "c": 1.0, "k": 400.0, "k3": 4.0e5}
DUFFING_PRIOR = {
    "m": (1.2, 0.09, "log"),
    "c": (1.5, 0.5, "log"),
    "k": (350.0, 1.0e4, "log"),
    "k3": (5.0e5, 6.0e10, "log"),
}

LINEAR_TRUTH = {"m": 1.0, "c": 0.4, "k": 100.0}
LINEAR_PRIOR = {
    "m": (1.2, 0.09, "log"),
    "c": (0.5, 0.04, "log"),
    "k": (90.0, 400.0, "log"),
}

EMPS_TRUTH = {"M": 95.0, "Fv": 200.0, "Fc": 20.0, "offset": -3.0}
EMPS_PRIOR = {
    "M": (80.0, 900.0, "log"),
    "Fv": (250.0, 1.0e4, "log"),
    "Fc": (25.0, 100.0, "log"),
    "offset": (0.0, 25.0, "natural"),
}

DEFAULT_PRIORS = {
    "bouc_wen": BOUC_WEN_PRIOR,
    "duffing": DUFFING_PRIOR,
    "linear_oscillator": LINEAR_PRIOR,
    "emps": EMPS_PRIOR,
}
DEFAULT_TRUTHS = {
    "bouc_wen": BOUC_WEN_TRUTH,
    "duffing": DUFFING_TRUTH,
    "linear_oscillator": LINEAR_TRUTH,
    "emps": EMPS_TRUTH,
}


def default_prior(name: str) -> PriorSpec:
    model = get_model(name)
    return PriorSpec.from_table(DEFAULT_PRIORS[name], model.param_names)


def validate_prior(model: ModelSpec, prior: PriorSpec) -> None:
    if tuple(prior.names) != tuple(model.param_names):
        raise ValueError(
            f"prior parameters {list(prior.names)} do not match {model.name} "
            f"parameters {list(model.param_names)}"
        )
    if model.positive:
        bad = [n for n, lf, pos in zip(prior.names, prior.log_space, model.positive) if lf and not pos]
        if bad:
            raise ValueError(f"log-space prior on parameters that may be negative: {bad}")


def theta_vector(model: ModelSpec, values: Mapping[str, float]) -> np.ndarray:
    missing = [n for n in model.param_names if n not in values]
    if missing:
        raise ValueError(f"{model.name} parameters missing: {missing}")
    return np.array([float(values[n]) for n in model.param_names])
