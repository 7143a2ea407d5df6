"""Scikit-learn style front end for joint state/parameter identification.

``X`` is the sampled input signal (one column), ``y`` the measured channel.
Fitting runs the particle system; predicting re-simulates the model at the
posterior mean with RK4 under the same held input.
"""
from __future__ import annotations

import numbers
from typing import Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import smc as smc_mod
from .data import rk4_simulate
from .models import PriorSpec, default_prior, get_model, validate_prior
from .odefilter import ODEFilter, SolverConfig


def _as_signal(X, name, allow_nan=False):
    arr = check_array(X, ensure_2d=False, dtype=float, ensure_min_samples=1,
                      ensure_all_finite="allow-nan" if allow_nan else True, input_name=name)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"{name} must have a single column, got shape {arr.shape}")
        arr = arr[:, 0]
    return arr


def weighted_quantile(values, weights, q):
    """Quantiles of a weighted sample (piecewise-linear in the cumulative weight)."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values)
    cw = np.cumsum(np.asarray(weights, dtype=float)[order])
    cw = (cw - 0.5 * np.asarray(weights)[order]) / cw[-1]
    return np.interp(q, cw, values[order])


class PNSMCIdentifier(BaseEstimator, RegressorMixin):
    """Bayesian identification of an ODE model with PN filters inside IBIS.

    Parameters
    ----------
    model : str
        Registered model name (``bouc_wen``, ``duffing``, ``emps``,
        ``linear_oscillator``).
    prior : PriorSpec, mapping or None
        Parameter prior; a mapping is read with :meth:`PriorSpec.from_table`.
        ``None`` selects the model's default table.
    sample_rate : float
        Sampling rate of ``X`` and ``y`` in Hz.
    noise_var : float
        Measurement noise variance of ``y``.
    x0 : array-like or None
        Initial state (zeros when omitted).
    log_sample : sequence of str
        Parameters moved in log coordinates (besides those with a log-space
        prior); useful when the likelihood only pins down products of them.
    random_state : int
        Master seed of all random streams.
    """

    def __init__(self, model="duffing", prior=None, sample_rate=None, noise_var=None,
                 x0=None, model_constants=None, n_particles=256, ess_threshold=0.5,
                 move_count=1, proposal_inflation=1.0, proposal_jitter=1e-10,
                 paper_exact_acceptance=False, log_sample=(), q=1, n_sub=1, R=0.0, calibration="online",
                 gamma=1.0, gamma_min=1e-12, eps_chol=1e-12, sigma0_extra=1e2, threads=1,
                 random_state=0):
        self.model = model
        self.prior = prior
        self.sample_rate = sample_rate
        self.noise_var = noise_var
        self.x0 = x0
        self.model_constants = model_constants
        self.n_particles = n_particles
        self.ess_threshold = ess_threshold
        self.move_count = move_count
        self.proposal_inflation = proposal_inflation
        self.proposal_jitter = proposal_jitter
        self.paper_exact_acceptance = paper_exact_acceptance
        self.log_sample = log_sample
        self.q = q
        self.n_sub = n_sub
        self.R = R
        self.calibration = calibration
        self.gamma = gamma
        self.gamma_min = gamma_min
        self.eps_chol = eps_chol
        self.sigma0_extra = sigma0_extra
        self.threads = threads
        self.random_state = random_state

    # -- construction helpers

    def _model(self):
        return get_model(self.model, **dict(self.model_constants or {}))

    def _prior(self, model) -> PriorSpec:
        if self.prior is None:
            prior = default_prior(model.name)
        elif isinstance(self.prior, PriorSpec):
            prior = self.prior
        elif isinstance(self.prior, Mapping):
            prior = PriorSpec.from_table(self.prior, names=model.param_names)
        else:
            raise TypeError("prior must be a PriorSpec, a mapping or None")
        validate_prior(model, prior)
        return prior

    def _x0(self, model):
        x0 = np.zeros(model.d) if self.x0 is None else np.asarray(self.x0, dtype=float)
        if x0.shape != (model.d,) or not np.all(np.isfinite(x0)):
            raise ValueError(f"x0 must be {model.d} finite values")
        return x0

    def solver_config(self) -> SolverConfig:
        if self.noise_var is None:
            raise ValueError("noise_var is required (measurement noise variance of y)")
        return SolverConfig(q=self.q, n_sub=self.n_sub, R=self.R, R_y=float(self.noise_var),
                            calibration=self.calibration, gamma=self.gamma,
                            gamma_min=self.gamma_min, eps_chol=self.eps_chol,
                            sigma0_extra=self.sigma0_extra)

    def smc_config(self) -> smc_mod.SmcConfig:
        seed = self.random_state
        if not isinstance(seed, numbers.Integral) or isinstance(seed, bool) or seed < 0:
            raise ValueError(f"random_state must be a non-negative integer, got {seed!r}")
        return smc_mod.SmcConfig(
            n_particles=self.n_particles, ess_threshold=self.ess_threshold, seed=int(seed),
            move_count=self.move_count, proposal_inflation=self.proposal_inflation,
            proposal_jitter=self.proposal_jitter,
            paper_exact_acceptance=self.paper_exact_acceptance, threads=self.threads,
            log_sample=tuple(self.log_sample or ()),
        )

    def _dt(self):
        if self.sample_rate is None or not self.sample_rate > 0:
            raise ValueError("sample_rate must be a positive number of Hz")
        return 1.0 / float(self.sample_rate)

    # -- estimator API

    def fit(self, X, y, callback=None):
        u = _as_signal(X, "X")
        y = _as_signal(y, "y", allow_nan=True)
        if len(u) != len(y):
            raise ValueError(f"X and y lengths differ ({len(u)} vs {len(y)})")
        model = self._model()
        prior = self._prior(model)
        x0 = self._x0(model)
        solver = self.solver_config()
        cfg = self.smc_config()
        dt = self._dt()

        flt = ODEFilter(model, solver, u, y, dt, x0)
        driver = smc_mod.IBIS(model, prior, flt, cfg)
        system = driver.run(callback=callback)

        self.model_ = model
        self.prior_ = prior
        self.x0_ = x0
        self.n_samples_ = len(y)
        self.particles_ = system.theta
        self.log_weights_ = system.log_weights.copy()
        self.weights_ = system.weights
        self.log_likelihoods_ = system.loglik.copy()
        self.posterior_mean_ = self.weights_ @ self.particles_
        resid = self.particles_ - self.posterior_mean_
        self.posterior_std_ = np.sqrt(self.weights_ @ resid**2)
        self.diagnostics_ = {k: np.asarray(v) for k, v in driver.trace.items()}
        self.n_rejuvenations_ = driver._n_rejuv
        self.acceptance_rates_ = [
            r for r, f in zip(driver.trace["acceptance_rate"], driver.trace["rejuvenated"]) if f
        ]
        self.log_evidence_ = float(driver.log_evidence)
        self.final_ess_ = smc_mod.ess(system.log_weights)
        self.system_ = system
        return self

    def posterior_interval(self, level=0.95):
        """Central weighted interval per parameter, shape ``(2, p)``."""
        check_is_fitted(self, "particles_")
        lo, hi = 0.5 * (1 - level), 0.5 * (1 + level)
        return np.array([
            weighted_quantile(self.particles_[:, i], self.weights_, [lo, hi])
            for i in range(self.particles_.shape[1])
        ]).T

    def simulate_particles(self, X, theta=None, oversample=1, x0=None):
        """RK4 responses of the observed channel, shape ``(T, N)``.

        ``oversample`` sub-steps each sample of the held input.
        """
        check_is_fitted(self, "particles_")
        u = _as_signal(X, "X")
        theta = self.particles_ if theta is None else np.atleast_2d(theta)
        x0 = self.x0_ if x0 is None else np.asarray(x0, dtype=float)
        k = int(oversample)
        sim = rk4_simulate(self.model_, theta, np.repeat(u, k), float(self.sample_rate) * k, x0,
                           check=False, on_divergence="mask")
        out = sim.observed[::k]
        out[:, sim.diverged] = np.nan
        return out

    def predict(self, X, oversample=1):
        """Response at the posterior mean, shape ``(T,)``."""
        check_is_fitted(self, "posterior_mean_")
        return self.simulate_particles(X, theta=self.posterior_mean_, oversample=oversample)[:, 0]

    def filtered_states(self, X, y, indices):
        """Filtered means and standard deviations for the particles ``indices``.

        Returns arrays of shape ``(T, n, D)``; row ``k`` follows the data update
        at sample ``k``.
        """
        check_is_fitted(self, "particles_")
        u = _as_signal(X, "X")
        y = _as_signal(y, "y", allow_nan=True)
        theta = self.particles_[np.asarray(indices, dtype=int)]
        flt = ODEFilter(self.model_, self.solver_config(), u, y, self._dt(), self.x0_)
        pairs: list = []
        flt.run(theta, means=pairs)
        return np.array([m for m, _ in pairs]), np.array([s for _, s in pairs])
