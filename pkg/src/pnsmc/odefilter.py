"""Probabilistic ODE solver: square-root EKF0 over an IWP prior.

Each observation interval is split into ``n_sub`` substeps.  A substep is a
linear prediction under the IWP transition followed by a zeroth-order update
on the pseudo-measurement ``Cdot X - f(C X) = 0``.  At the observation time a
linear Kalman update against the measured channel follows and yields the
log-likelihood increment.  Covariances are carried as right square-root
factors ``S`` with ``Sigma = S.T @ S`` and are only ever touched through QR
factorizations of stacked pre-arrays.

All kernels broadcast over leading axes so the same code filters one
trajectory or a whole particle population at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .iwp import StateLayout, GaussMarkovTransition, unit_process_noise_sqrt, unit_transition
from .models import DomainError, ModelSpec

LOG_2PI = np.log(2.0 * np.pi)


class SolverFailure(RuntimeError):
    """A filter step produced non-finite moments or a singular innovation."""


@dataclass
class GaussianState:
    mean: np.ndarray
    cov_sqrt: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        S = self.cov_sqrt
        return np.swapaxes(S, -1, -2) @ S

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.sum(self.cov_sqrt**2, axis=-2))


@dataclass
class FilterStepRecord:
    """One pseudo-measurement update, optionally closing an observation interval.

    ``v``, ``S_y`` and ``log_lik`` are NaN on substeps without a data update.
    ``residual`` is ``max |Cdot mu_F - f(C mu_P)|`` after the update.
    """

    time_index: int
    substep: int
    z_hat: np.ndarray
    s_breve: np.ndarray
    v: float = np.nan
    S_y: float = np.nan
    log_lik: float = np.nan
    residual: float = np.nan


@dataclass
class SolverConfig:
    """Settings of the PN filter.

    ``gamma`` is the starting diffusion for online calibration, or the value
    used throughout when ``calibration == "fixed"``.  ``sigma0_extra`` is the
    initial variance of derivative blocks above the first (only for q > 1).
    """

    q: int = 1
    n_sub: int = 1
    R: float = 0.0
    R_y: float = 1.0
    calibration: str = "online"
    gamma: float = 1.0
    gamma_min: float = 1e-12
    eps_chol: float = 1e-12
    sigma0_extra: float = 1e2
    pseudo_updates: bool = True

    def __post_init__(self):
        if not 1 <= self.q <= 4:
            raise ValueError(f"q must be in [1, 4], got {self.q}")
        if int(self.n_sub) != self.n_sub or self.n_sub < 1:
            raise ValueError(f"n_sub must be a positive integer, got {self.n_sub}")
        if not self.R >= 0:
            raise ValueError(f"R must be >= 0, got {self.R}")
        if not self.R_y > 0:
            raise ValueError(f"R_y must be > 0, got {self.R_y}")
        if self.calibration not in ("online", "fixed"):
            raise ValueError(f"calibration must be 'online' or 'fixed', got {self.calibration!r}")
        if not np.all(np.asarray(self.gamma) > 0):
            raise ValueError("gamma must be positive")
        if not self.gamma_min > 0:
            raise ValueError("gamma_min must be positive")
        if not self.eps_chol >= 0:
            raise ValueError("eps_chol must be >= 0")
        if not self.sigma0_extra >= 0:
            raise ValueError("sigma0_extra must be >= 0")


# -- square-root kernels -----------------------------------------------------


def _solve_upper_transposed(R11, r):
    """Solve ``R11.T w = r`` for upper-triangular ``R11`` (batched, no raising)."""
    m = r.shape[-1]
    w = np.empty_like(r)
    for i in range(m):
        acc = r[..., i]
        for j in range(i):
            acc = acc - R11[..., j, i] * w[..., j]
        w[..., i] = acc / R11[..., i, i]
    return w


def _sqrt_update(mean, S, idx, r_diag, residual):
    """Kalman update on the selector rows ``idx`` with diagonal noise ``r_diag``.

    Returns the updated mean and factor, plus the upper factor ``R11`` of the
    innovation covariance and the whitened innovation ``w = R11^-T residual``.
    """
    m = len(idx)
    D = S.shape[-1]
    batch = S.shape[:-2]
    pre = np.zeros(batch + (m + D, m + D))
    diag = np.arange(m)
    pre[..., diag, diag] = np.sqrt(r_diag)
    pre[..., m:, :m] = S[..., :, idx]
    pre[..., m:, m:] = S
    post = np.linalg.qr(pre, mode="r")
    R11 = post[..., :m, :m]
    R12 = post[..., :m, m:]
    R22 = post[..., m:, m:]
    w = _solve_upper_transposed(R11, residual)
    mean_f = mean + np.einsum("...ij,...i->...j", R12, w)
    return mean_f, R22, R11, w


def _predict(mean, S, A, Q_sqrt):
    mean_p = mean @ A.T
    SA = S @ A.T
    Q_sqrt = np.broadcast_to(Q_sqrt, SA.shape)
    S_p = np.linalg.qr(np.concatenate([SA, Q_sqrt], axis=-2), mode="r")
    return mean_p, S_p


def _pseudo(mean, S, model, u, theta, t, d, R, eps):
    x = mean[..., :d]
    fx = model.f(x, u, theta, t)
    z_hat = mean[..., d : 2 * d] - fx
    idx = np.arange(d, 2 * d)
    diag_S = np.sum(S[..., :, idx] ** 2, axis=-2)
    # jitter scaled per dimension keeps the interpolation residual ~eps * z_hat
    r = R + eps * diag_S
    mean_f, S_f, R11, _ = _sqrt_update(mean, S, idx, r, -z_hat)
    return mean_f, S_f, z_hat, diag_S, fx


def _data(mean, S, y, obs, R_y):
    idx = np.array([obs])
    resid = (y - mean[..., obs])[..., None]
    mean_f, S_f, R11, w = _sqrt_update(mean, S, idx, np.full(1, R_y), resid)
    S_y = R11[..., 0, 0] ** 2
    v = resid[..., 0]
    loglik = -0.5 * (LOG_2PI + np.log(S_y) + w[..., 0] ** 2)
    return mean_f, S_f, v, S_y, loglik


# -- single-step public API ----------------------------------------------------


def _initial_moments(model, x1, u1, theta, layout, sigma0_extra, jitter):
    d, D = layout.d, layout.dim
    x1 = np.asarray(x1, dtype=float)
    fx = model.f(x1, u1, theta, 0.0)
    batch = np.broadcast_shapes(x1.shape[:-1], fx.shape[:-1])
    mean = np.zeros(batch + (D,))
    mean[..., :d] = x1
    mean[..., d : 2 * d] = fx
    var = np.full(D, jitter, dtype=float)
    var[2 * d :] += sigma0_extra
    S = np.broadcast_to(np.diag(np.sqrt(var)), batch + (D, D)).copy()
    return mean, S


def init_state(model: ModelSpec, x1, u1, theta, layout: StateLayout,
               sigma0_extra: float = 1e2, jitter: float = 1e-12) -> GaussianState:
    """Initial filter moments: ``x1`` and ``f(x1, u1, theta)`` known up to jitter."""
    x1 = np.asarray(x1, dtype=float)
    if not np.all(np.isfinite(x1)):
        raise DomainError("initial state must be finite")
    if layout.q < 1:
        raise ValueError("the ODE filter needs q >= 1")
    mean, S = _initial_moments(model, x1, u1, theta, layout, sigma0_extra, jitter)
    if not np.all(np.isfinite(mean)):
        raise DomainError("vector field is non-finite at the initial state")
    return GaussianState(mean, S)


def predict(state: GaussianState, trans: GaussMarkovTransition) -> GaussianState:
    """``mu <- A mu + xi``; factor of ``A Sigma A^T + Q`` by QR."""
    if state.mean.shape[-1] != trans.A.shape[0]:
        raise ValueError("state and transition dimensions differ")
    mean, S = _predict(state.mean, state.cov_sqrt, trans.A, trans.Q_sqrt)
    return GaussianState(mean + trans.xi, S)


def pseudo_update(state: GaussianState, model: ModelSpec, u, t, theta, layout: StateLayout,
                  R: float = 0.0, gamma=1.0, eps_chol: float = 1e-12):
    """EKF0 update on the ODE residual.

    Returns ``(state, z_hat, s_breve)`` where ``z_hat = Cdot mu - f(C mu)`` and
    ``s_breve = diag(Cdot Sigma Cdot^T) / gamma`` is the innovation scale with
    the diffusion factored out.
    """
    if not np.all(np.isfinite(state.mean)):
        raise SolverFailure("non-finite predicted mean")
    with np.errstate(all="ignore"):
        mean, S, z_hat, diag_S, _ = _pseudo(
            state.mean, state.cov_sqrt, model, u, theta, t, layout.d, R, eps_chol
        )
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(S))):
        raise SolverFailure("pseudo-measurement update failed")
    return GaussianState(mean, S), z_hat, diag_S / np.asarray(gamma, dtype=float)


def data_update(state: GaussianState, y: float, obs_index: int, R_y: float):
    """Scalar Kalman update of flat state component ``obs_index`` against ``y``.

    Returns ``(state, v, S_y)`` with ``v = y - mu[obs_index]`` and
    ``S_y = Sigma[obs_index, obs_index] + R_y``.
    """
    if not R_y > 0:
        raise ValueError("R_y must be positive")
    if not np.isfinite(y):
        raise ValueError("observation must be finite")
    mean, S, v, S_y, _ = _data(state.mean, state.cov_sqrt, y, obs_index, R_y)
    return GaussianState(mean, S), v, S_y


def log_lik_increment(v, S_y):
    """Return ``-phi`` with ``phi = 0.5 log(2 pi S_y) + v^2 / (2 S_y)``."""
    S_y = np.asarray(S_y, dtype=float)
    if np.any(~(S_y > 0)):
        raise ValueError("innovation variance must be positive")
    return -0.5 * (LOG_2PI + np.log(S_y) + np.asarray(v) ** 2 / S_y)


def calibrate_gamma(records, gamma_min: float = 1e-12) -> np.ndarray:
    """Quasi-maximum-likelihood diffusion ``Gamma_ii = mean_t z_i^2 / s_t``.

    Accepts :class:`FilterStepRecord` objects or ``(z_hat, s_breve)`` pairs.
    Records with zero scale are skipped; with nothing usable the floor
    ``gamma_min`` is returned.
    """
    zs, ss = [], []
    for rec in records:
        z, s = (rec.z_hat, rec.s_breve) if isinstance(rec, FilterStepRecord) else rec
        zs.append(np.atleast_1d(np.asarray(z, dtype=float)))
        ss.append(np.atleast_1d(np.asarray(s, dtype=float)))
    if not zs:
        raise ValueError("calibrate_gamma needs at least one record")
    z = np.array(zs)
    s = np.broadcast_to(np.array(ss), z.shape)
    ok = (s > 0) & np.isfinite(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(ok, z**2 / np.where(ok, s, 1.0), 0.0)
    n = ok.sum(axis=0)
    est = np.where(n > 0, terms.sum(axis=0) / np.maximum(n, 1), gamma_min)
    return np.diag(np.maximum(est, gamma_min))


# -- batched engine ---------------------------------------------------------------


@dataclass
class FilterBatch:
    """Filter state of N independent runs sharing one time grid.

    ``k`` is the index of the last assimilated observation (-1 before any).
    ``zsq``/``n_cal`` are the running sums behind the online Gamma estimate.
    """

    mean: np.ndarray
    cov_sqrt: np.ndarray
    loglik: np.ndarray
    zsq: np.ndarray
    n_cal: np.ndarray
    failed: np.ndarray
    k: int = -1

    def __len__(self):
        return self.mean.shape[0]

    def take(self, idx) -> "FilterBatch":
        return FilterBatch(
            self.mean[idx], self.cov_sqrt[idx], self.loglik[idx], self.zsq[idx],
            self.n_cal[idx], self.failed[idx], self.k,
        )

    def assign(self, idx, other: "FilterBatch") -> None:
        """Overwrite runs ``idx`` with the runs of ``other`` (in order)."""
        for name in ("mean", "cov_sqrt", "loglik", "zsq", "n_cal", "failed"):
            getattr(self, name)[idx] = getattr(other, name)

    def copy(self) -> "FilterBatch":
        return self.take(slice(None))

    def state(self, i: int) -> GaussianState:
        return GaussianState(self.mean[i].copy(), self.cov_sqrt[i].copy())


@lru_cache(maxsize=64)
def _transition_parts(h: float, d: int, q: int):
    A = np.kron(unit_transition(h, q), np.eye(d))
    base = np.kron(unit_process_noise_sqrt(h, q), np.eye(d))
    return A, base


class ODEFilter:
    """PN filter of one model over one uniformly sampled record.

    ``u`` and ``y`` are the input and measured channel at the sample times
    ``t_k = t0 + k * dt``; ``y`` may contain NaN to skip data updates.  The
    input is held at ``u_{k-1}`` over ``(t_{k-1}, t_k]``; at ``t_k`` the
    derivative block is shifted to the new input before the data update.
    """

    def __init__(self, model: ModelSpec, config: SolverConfig, u, y, dt: float,
                 x1, t0: float = 0.0):
        self.model = model
        self.config = config
        self.layout = StateLayout(model.d, config.q)
        self.u = np.asarray(u, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.u.shape != self.y.shape or self.u.ndim != 1:
            raise ValueError("u and y must be 1-D arrays of equal length")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self.t0 = float(t0)
        self.x1 = np.asarray(x1, dtype=float)
        if self.x1.shape != (model.d,):
            raise ValueError(f"x1 must have shape ({model.d},)")
        self.h = self.dt / config.n_sub
        self.obs = self.layout.index(model.obs_block, model.obs_index)
        self._A, self._Qbase = _transition_parts(self.h, model.d, config.q)
        self._gamma0 = np.broadcast_to(np.asarray(config.gamma, dtype=float), (model.d,))

    def __len__(self):
        return len(self.y)

    # -- batch life cycle

    def init(self, theta) -> FilterBatch:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        n = theta.shape[0]
        cfg = self.config
        u1 = self.u[0] if len(self.u) else 0.0
        with np.errstate(all="ignore"):
            mean, S = _initial_moments(
                self.model, np.broadcast_to(self.x1, (n, self.model.d)), u1, theta,
                self.layout, cfg.sigma0_extra, cfg.eps_chol,
            )
        batch = FilterBatch(
            mean=mean,
            cov_sqrt=S,
            loglik=np.zeros(n),
            zsq=np.zeros((n, self.model.d)),
            n_cal=np.zeros(n),
            failed=np.zeros(n, dtype=bool),
        )
        self._mark_failures(batch)
        return batch

    def gamma(self, batch: FilterBatch) -> np.ndarray:
        """Per-run diffusion used by the next prediction, shape ``(N, d)``."""
        n = len(batch)
        if self.config.calibration == "fixed":
            return np.broadcast_to(self._gamma0, (n, self.model.d))
        est = batch.zsq / np.maximum(batch.n_cal, 1)[:, None]
        est = np.maximum(est, self.config.gamma_min)
        return np.where((batch.n_cal > 0)[:, None], est, self._gamma0)

    def _mark_failures(self, batch: FilterBatch, extra=None):
        bad = ~np.all(np.isfinite(batch.mean), axis=-1)
        bad |= ~np.all(np.isfinite(batch.cov_sqrt), axis=(-1, -2))
        bad |= np.isnan(batch.loglik)
        if extra is not None:
            bad |= extra
        new = bad & ~batch.failed
        if np.any(bad):
            batch.failed |= bad
            # park failed runs on harmless values so they cannot poison the batch
            batch.mean[bad] = 0.0
            batch.cov_sqrt[bad] = np.eye(self.layout.dim)
            batch.zsq[bad] = 0.0
            batch.n_cal[bad] = 0.0
        batch.loglik[batch.failed] = -np.inf
        return new

    def advance(self, batch: FilterBatch, theta, records: Optional[list] = None) -> np.ndarray:
        """Assimilate observation ``batch.k + 1``; returns the log-likelihood increments.

        ``records``, when given, receives :class:`FilterStepRecord` entries for
        run 0 of the batch (used by the single-trajectory API).
        """
        k = batch.k + 1
        if k >= len(self.y):
            raise IndexError("no observation left to assimilate")
        cfg = self.config
        d = self.model.d
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        inc = np.zeros(len(batch))
        with np.errstate(all="ignore"):
            if k > 0:
                for j in range(1, cfg.n_sub + 1):
                    g = self.gamma(batch)
                    Q_sqrt = self._Qbase * np.tile(np.sqrt(g), self.layout.n_blocks)[:, None, :]
                    mean_p, S_p = _predict(batch.mean, batch.cov_sqrt, self._A, Q_sqrt)
                    if cfg.pseudo_updates:
                        t = self.t0 + (k - 1) * self.dt + j * self.h
                        mean_f, S_f, z_hat, diag_S, fx = _pseudo(
                            mean_p, S_p, self.model, self.u[k - 1], theta, t, d, cfg.R,
                            cfg.eps_chol,
                        )
                        s_breve = diag_S / g
                        ok = s_breve > 0
                        batch.zsq += np.where(ok, z_hat**2 / np.where(ok, s_breve, 1.0), 0.0)
                        batch.n_cal += 1
                        if records is not None:
                            resid = np.max(np.abs(mean_f[0, d : 2 * d] - fx[0]))
                            records.append(FilterStepRecord(k, j, z_hat[0].copy(),
                                                            s_breve[0].copy(), residual=resid))
                        batch.mean, batch.cov_sqrt = mean_f, S_f
                    else:
                        batch.mean, batch.cov_sqrt = mean_p, S_p
                if cfg.pseudo_updates and self.u[k] != self.u[k - 1]:
                    # the held input switches at t_k: the state is continuous, its
                    # derivative jumps by f(x, u_k) - f(x, u_{k-1})
                    x = batch.mean[:, :d]
                    t = self.t0 + k * self.dt
                    jump = (self.model.f(x, self.u[k], theta, t)
                            - self.model.f(x, self.u[k - 1], theta, t))
                    batch.mean = batch.mean.copy()
                    batch.mean[:, d : 2 * d] += jump
            yk = self.y[k]
            if np.isfinite(yk):
                mean, S, v, S_y, ll = _data(batch.mean, batch.cov_sqrt, yk, self.obs, cfg.R_y)
                batch.mean, batch.cov_sqrt = mean, S
                inc = ll
                if records is not None:
                    if records and records[-1].time_index == k:
                        rec = records[-1]
                    else:
                        nan = np.full(d, np.nan)
                        rec = FilterStepRecord(k, 0, nan, nan)
                        records.append(rec)
                    rec.v, rec.S_y, rec.log_lik = float(v[0]), float(S_y[0]), float(ll[0])
            batch.loglik = batch.loglik + inc
            self._mark_failures(batch, extra=~np.isfinite(inc))
        inc = np.where(batch.failed, -np.inf, inc)
        batch.k = k
        return inc

    def run(self, theta, stop: Optional[int] = None, batch: Optional[FilterBatch] = None,
            records: Optional[list] = None, means: Optional[list] = None) -> FilterBatch:
        """Assimilate observations up to and including index ``stop - 1``."""
        stop = len(self.y) if stop is None else stop
        if batch is None:
            batch = self.init(theta)
        while batch.k + 1 < stop:
            self.advance(batch, theta, records=records)
            if means is not None:
                means.append((batch.mean.copy(), np.sqrt(np.sum(batch.cov_sqrt**2, axis=-2))))
            if np.all(batch.failed):
                break
        return batch


@dataclass
class ScoreResult:
    state: GaussianState
    log_lik: float
    records: list
    gamma_trace: np.ndarray
    failed: bool = False
    means: Optional[np.ndarray] = None
    stds: Optional[np.ndarray] = None
    increments: np.ndarray = field(default_factory=lambda: np.zeros(0))


def solve_and_score(model: ModelSpec, theta, u, y, dt: float, config: SolverConfig, x1,
                    t0: float = 0.0, stop: Optional[int] = None,
                    return_states: bool = False) -> ScoreResult:
    """Run the PN filter for one parameter vector over ``y[:stop]``.

    Failures do not raise: the result carries ``failed=True`` and a log
    likelihood of ``-inf`` together with the records gathered so far.
    """
    flt = ODEFilter(model, config, u, y, dt, x1, t0)
    theta = np.asarray(theta, dtype=float)[None, :]
    stop = len(flt) if stop is None else stop
    batch = flt.init(theta)
    records: list = []
    incs, gammas, means, stds = [], [], [], []
    while batch.k + 1 < stop and not batch.failed[0]:
        incs.append(flt.advance(batch, theta, records=records)[0])
        gammas.append(flt.gamma(batch)[0].copy())
        if return_states:
            means.append(batch.mean[0].copy())
            stds.append(np.sqrt(np.sum(batch.cov_sqrt[0] ** 2, axis=0)))
    failed = bool(batch.failed[0])
    increments = np.array(incs)
    log_lik = -np.inf if failed else float(batch.loglik[0])
    D = flt.layout.dim
    return ScoreResult(
        state=batch.state(0),
        log_lik=log_lik,
        records=records,
        gamma_trace=np.array(gammas).reshape(-1, model.d),
        failed=failed,
        means=np.array(means).reshape(-1, D) if return_states else None,
        stds=np.array(stds).reshape(-1, D) if return_states else None,
        increments=increments,
    )


def with_config(config: SolverConfig, **changes) -> SolverConfig:
    return replace(config, **changes)
