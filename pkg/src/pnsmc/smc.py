"""Iterated batch importance sampling over model parameters.

Each parameter particle carries its own PN filter, so assimilating a new
observation costs one filter step per particle: the log-weight drops by the
negative log-likelihood increment.  When the effective sample size falls
below ``ess_threshold * N`` the population is resampled (systematically) and
every particle attempts an independent Metropolis-Hastings move towards a
Gaussian fitted to the weighted cloud; a proposal is scored by re-running its
filter over all observations seen so far.

Particles live in a sampling space: log coordinates for parameters with a
log-space prior or listed in ``SmcConfig.log_sample``, natural units
otherwise.  The target is always the posterior of the natural parameters; the
log-Jacobian enters the target density, so the choice of coordinates only
shapes the Gaussian proposal.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .models import ModelSpec, PriorSpec, prior_logpdf, validate_prior
from .odefilter import FilterBatch, ODEFilter, SolverConfig

logger = logging.getLogger(__name__)

_INIT, _REJUVENATE = 0, 1


class SMCAbort(RuntimeError):
    """Every particle failed; carries the diagnostics gathered so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class SmcConfig:
    n_particles: int = 256
    ess_threshold: float = 0.5
    seed: int = 0
    move_count: int = 1
    proposal_inflation: float = 1.0
    proposal_jitter: float = 1e-10
    paper_exact_acceptance: bool = False
    threads: int = 1
    log_sample: tuple = ()

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0 < self.ess_threshold <= 1:
            raise ValueError("ess_threshold must be in (0, 1]")
        if self.move_count < 1:
            raise ValueError("move_count must be >= 1")
        if not self.proposal_inflation >= 1:
            raise ValueError("proposal_inflation must be >= 1")
        if not self.proposal_jitter > 0:
            raise ValueError("proposal_jitter must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


class SamplingSpace:
    """Log coordinates for flagged parameters, natural units for the rest."""

    def __init__(self, log_flags):
        self.log = np.asarray(log_flags, dtype=bool)

    def to_phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.log, np.log(np.where(self.log, theta, 1.0)), theta)

    def to_natural(self, phi):
        phi = np.asarray(phi, dtype=float)
        with np.errstate(over="ignore"):
            return np.where(self.log, np.exp(np.where(self.log, phi, 0.0)), phi)

    def log_jacobian(self, phi):
        """``log |d theta / d phi|``."""
        return np.sum(np.where(self.log, phi, 0.0), axis=-1)


def stream(seed: int, purpose: int, counter: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, counter) slot of the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, counter)))


@dataclass
class ParticleSystem:
    phi: np.ndarray
    log_weights: np.ndarray
    batch: FilterBatch
    space: SamplingSpace

    @property
    def n(self) -> int:
        return len(self.log_weights)

    @property
    def t_current(self) -> int:
        return self.batch.k

    @property
    def theta(self) -> np.ndarray:
        """Particles in natural units."""
        return self.space.to_natural(self.phi)

    @property
    def weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)

    @property
    def loglik(self) -> np.ndarray:
        return self.batch.loglik


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    top = np.max(lw)
    if not np.isfinite(top):
        raise SMCAbort("all particle weights are zero")
    w = np.exp(lw - top)
    return w / w.sum()


def ess(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` from log-weights, stable for tiny weights."""
    lw = np.asarray(log_weights, dtype=float)
    return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))


def systematic_resample(weights, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    n = len(weights) if n is None else n
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(0, len(weights) - 1)


def fit_proposal(phi, log_weights, inflation: float = 1.0, jitter: float = 1e-10):
    """Weighted mean and (population) covariance of the cloud, made positive definite."""
    w = normalized_weights(log_weights)
    phi = np.asarray(phi, dtype=float)
    mean = w @ phi
    r = phi - mean
    cov = (w[:, None] * r).T @ r
    cov = 0.5 * (cov + cov.T) * inflation
    p = cov.shape[0]
    eps = jitter
    for _ in range(8):
        V = cov + eps * np.eye(p)
        try:
            np.linalg.cholesky(V)
            return mean, V
        except np.linalg.LinAlgError:
            eps *= 100.0
    raise np.linalg.LinAlgError("proposal covariance is not positive definite after jitter")


def _gauss_logpdf(x, mean, chol):
    r = np.linalg.solve(chol, (x - mean).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(r * r, axis=-1) + logdet + len(mean) * np.log(2 * np.pi))


class IBIS:
    """Driver binding a model, prior, PN filter and SMC settings together."""

    def __init__(self, model: ModelSpec, prior: PriorSpec, flt: ODEFilter,
                 config: SmcConfig):
        validate_prior(model, prior)
        self.model = model
        self.prior = prior
        unknown = set(config.log_sample) - set(model.param_names)
        if unknown:
            raise ValueError(f"log_sample names unknown parameters {sorted(unknown)}")
        flags = prior.log_space | np.isin(model.param_names, list(config.log_sample))
        if np.any(flags & ~(prior.mean > 0)):
            raise ValueError("log sampling needs a positive prior mean")
        self.space = SamplingSpace(flags)
        self.flt = flt
        self.config = config
        self._n_rejuv = 0
        self.trace: dict[str, list] = {
            "t_index": [], "ess": [], "threshold": [], "rejuvenated": [],
            "acceptance_rate": [], "n_failed": [], "log_evidence": [],
        }
        self.log_evidence = 0.0

    # -- pieces

    def log_support(self, phi) -> np.ndarray:
        """0 inside the model's support, -inf where a positive parameter is not."""
        theta = self.space.to_natural(phi)
        ok = np.all(np.isfinite(theta), axis=-1)
        if self.model.positive:
            pos = np.asarray(self.model.positive)
            ok &= np.all((theta > 0) | ~pos, axis=-1)
        return np.where(ok, 0.0, -np.inf)

    def log_prior(self, phi) -> np.ndarray:
        """Target prior density in sampling coordinates."""
        phi = np.asarray(phi, dtype=float)
        support = self.log_support(phi)
        theta = self.space.to_natural(np.where(np.isfinite(support)[:, None], phi, 0.0))
        lp = prior_logpdf(self.prior, theta) + self.space.log_jacobian(phi)
        return np.where(np.isfinite(support), lp, -np.inf)

    def init(self) -> ParticleSystem:
        cfg = self.config
        rng = stream(cfg.seed, _INIT)
        theta = self.prior.to_natural(self.prior.sample_sampling(cfg.n_particles, rng))
        phi = self.space.to_phi(theta)
        dead = ~np.all(np.isfinite(phi), axis=-1)
        # draws outside the log-sampled support are parked at a finite point, weight 0
        phi[dead] = np.where(self.space.log, 0.0, phi[dead])
        dead |= ~np.isfinite(self.log_support(phi))
        batch = self.flt.init(self.space.to_natural(phi))
        lw = np.full(cfg.n_particles, -np.log(cfg.n_particles))
        lw[dead] = -np.inf
        batch.failed |= dead
        batch.loglik[batch.failed] = -np.inf
        return ParticleSystem(phi, lw, batch, self.space)

    def assimilate(self, system: ParticleSystem) -> np.ndarray:
        """Advance all particle filters by one observation and reweight."""
        inc = self.flt.advance(system.batch, system.theta)
        prev = logsumexp(system.log_weights)
        with np.errstate(invalid="ignore"):
            system.log_weights = system.log_weights + inc
        system.log_weights[~np.isfinite(system.log_weights)] = -np.inf
        if not np.any(np.isfinite(system.log_weights)):
            raise SMCAbort(
                f"all particles failed at observation {system.t_current}",
                trace=self.trace,
            )
        self.log_evidence += logsumexp(system.log_weights) - prev
        return inc

    def _score(self, theta, stop) -> FilterBatch:
        threads = self.config.threads
        n = len(theta)
        if threads == 1 or n < 2 * threads:
            return self.flt.run(theta, stop=stop)
        chunks = np.array_split(np.arange(n), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda ix: self.flt.run(theta[ix], stop=stop), chunks))
        out = self.flt.init(theta)
        for ix, part in zip(chunks, parts):
            out.assign(ix, part)
        out.k = parts[0].k
        return out

    def rejuvenate(self, system: ParticleSystem) -> float:
        """Resample, then move each particle with IMH; returns the acceptance rate."""
        cfg = self.config
        rng = stream(cfg.seed, _REJUVENATE, self._n_rejuv)
        self._n_rejuv += 1
        mean, V = fit_proposal(system.phi, system.log_weights, cfg.proposal_inflation,
                               cfg.proposal_jitter)
        chol = np.linalg.cholesky(V)

        idx = systematic_resample(system.weights, rng)
        system.phi = system.phi[idx]
        system.batch = system.batch.take(idx)
        system.log_weights = np.full(system.n, -np.log(system.n))

        stop = system.t_current + 1
        accepted = 0
        for _ in range(cfg.move_count):
            prop = mean + rng.standard_normal(system.phi.shape) @ chol.T
            log_u = np.log(rng.uniform(size=system.n))
            lp_new = self.log_prior(prop)
            lp_old = self.log_prior(system.phi)
            ll_new = np.full(system.n, -np.inf)
            live = np.isfinite(lp_new)
            new_batch = None
            if np.any(live):
                new_batch = self._score(self.space.to_natural(prop[live]), stop)
                ll_new[live] = new_batch.loglik
            ll_old = system.batch.loglik
            with np.errstate(invalid="ignore"):
                log_alpha = (lp_new + ll_new) - (lp_old + ll_old)
                if not cfg.paper_exact_acceptance:
                    log_alpha += _gauss_logpdf(system.phi, mean, chol)
                    log_alpha -= _gauss_logpdf(prop, mean, chol)
            # a failed current particle is always replaced by a live proposal
            log_alpha = np.where(np.isfinite(ll_new) & ~np.isfinite(ll_old), 0.0, log_alpha)
            log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
            acc = log_u < np.minimum(log_alpha, 0.0)
            if np.any(acc):
                # acceptance needs a finite proposal likelihood, so acc is a subset of live
                system.phi[acc] = prop[acc]
                src = np.searchsorted(np.flatnonzero(live), np.flatnonzero(acc))
                system.batch.assign(np.flatnonzero(acc), new_batch.take(src))
            accepted += int(acc.sum())
        # particles whose filters failed and found no live replacement keep zero weight
        system.log_weights[system.batch.failed] = -np.inf
        if not np.any(np.isfinite(system.log_weights)):
            raise SMCAbort("no live particle after rejuvenation", trace=self.trace)
        return accepted / (system.n * cfg.move_count)

    def _record(self, k, e, rejuv, rate, n_failed):
        tr = self.trace
        tr["t_index"].append(k)
        tr["ess"].append(e)
        tr["threshold"].append(self.config.ess_threshold * self.config.n_particles)
        tr["rejuvenated"].append(int(rejuv))
        tr["acceptance_rate"].append(rate)
        tr["n_failed"].append(n_failed)
        tr["log_evidence"].append(self.log_evidence)

    def step(self, system: ParticleSystem) -> None:
        self.assimilate(system)
        e = ess(system.log_weights)
        rejuv = e < self.config.ess_threshold * system.n
        rate = float("nan")
        if rejuv:
            rate = self.rejuvenate(system)
            logger.debug("t=%d ess=%.1f rejuvenated, acceptance %.3f", system.t_current, e, rate)
        self._record(system.t_current, e, rejuv, rate, int(system.batch.failed.sum()))

    def run(self, stop: Optional[int] = None, system: Optional[ParticleSystem] = None,
            callback=None) -> ParticleSystem:
        system = self.init() if system is None else system
        stop = len(self.flt) if stop is None else stop
        while system.t_current + 1 < stop:
            self.step(system)
            if callback is not None:
                callback(self, system)
        return system


@dataclass
class SmcResult:
    system: ParticleSystem
    trace: dict
    log_evidence: float
    n_rejuvenations: int
    acceptance_rates: list = field(default_factory=list)

    @property
    def final_ess(self) -> float:
        return ess(self.system.log_weights)


def run(model: ModelSpec, prior: PriorSpec, u, y, dt: float, solver: SolverConfig,
        smc: SmcConfig, x1, t0: float = 0.0, stop: Optional[int] = None) -> SmcResult:
    """Full IBIS pass over ``y[:stop]``; returns the weighted posterior and diagnostics."""
    flt = ODEFilter(model, solver, u, y, dt, x1, t0)
    driver = IBIS(model, prior, flt, smc)
    system = driver.run(stop=stop)
    trace = {k: np.asarray(v) for k, v in driver.trace.items()}
    rates = [r for r, f in zip(driver.trace["acceptance_rate"], driver.trace["rejuvenated"]) if f]
    return SmcResult(system, trace, driver.log_evidence, driver._n_rejuv, rates)
