"""Reference policies and their local Gaussian approximations.

Per-timestep arrays are indexed by planning step ``t``; a reference built for
horizon ``T`` answers queries for ``t in [0, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .core import DimensionError, KLGameError, NumericalError, Trajectory

COV_FLOOR = 1e-9
_LOG_2PI = np.log(2.0 * np.pi)


class SingularLaplaceError(KLGameError):
    def __init__(self, t: int, message: str = "log-density Hessian is not negative definite"):
        super().__init__(f"{message} at timestep {t}")
        self.t = t


def spd_floor(S: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    w, V = np.linalg.eigh(S)
    if np.all(w >= floor):
        return S
    out = (V * np.maximum(w, floor)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _check_cov(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if np.max(np.abs(cov - np.swapaxes(cov, -1, -2)), initial=0.0) > 1e-10 * max(1.0, np.abs(cov).max()):
        raise NumericalError("covariance is not symmetric")
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if np.linalg.eigvalsh(cov).min() < COV_FLOOR * (1 - 1e-9):
        raise NumericalError(f"covariance eigenvalues must be >= {COV_FLOOR}")
    return cov


def gaussian_log_density(u, mean, cov) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = u - mean
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, d)
    return float(-0.5 * (z @ z) - np.log(np.diag(L)).sum() - 0.5 * u.size * _LOG_2PI)


@runtime_checkable
class StochasticPolicy(Protocol):
    def log_density(self, u, x, t: int) -> float: ...

    def sample(self, x, t: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray: ...


@dataclass(frozen=True)
class GaussianRef:
    """Open-loop Gaussian reference ``N(mean[t], cov[t])``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim == 1:
            mean = mean[:, None]
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None, None]
        T, m = mean.shape
        if cov.shape != (T, m, m):
            raise DimensionError(f"cov has shape {cov.shape}, expected {(T, m, m)}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _check_cov(cov))

    @classmethod
    def constant(cls, mean, cov, horizon: int) -> "GaussianRef":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(np.tile(mean, (horizon, 1)), np.tile(cov, (horizon, 1, 1)))

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    @property
    def control_dim(self) -> int:
        return self.mean.shape[1]

    def mean_at(self, x, t: int) -> np.ndarray:
        return self.mean[t]

    def gains(self, t: int, state_dim: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean as an affine law ``-K x - kappa``."""
        return np.zeros((self.control_dim, state_dim)), -self.mean[t]

    def log_density(self, u, x, t: int) -> float:
        return gaussian_log_density(u, self.mean[t], self.cov[t])

    def sample(self, x, t, rng, size=None):
        return rng.multivariate_normal(self.mean[t], self.cov[t], size=size)


@dataclass(frozen=True)
class FeedbackGaussianRef:
    """State-feedback Gaussian reference ``N(-K[t] x - kappa[t], cov[t])``."""

    K: np.ndarray
    kappa: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        kappa = np.asarray(self.kappa, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if K.ndim != 3:
            raise DimensionError("K must have shape (T, m, n)")
        T, m, _ = K.shape
        kappa = kappa.reshape(T, m)
        if cov.shape != (T, m, m):
            raise DimensionError(f"cov has shape {cov.shape}, expected {(T, m, m)}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "cov", _check_cov(cov))

    @classmethod
    def constant(cls, K, kappa, cov, horizon: int) -> "FeedbackGaussianRef":
        K = np.atleast_2d(np.asarray(K, dtype=float))
        kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(np.tile(K, (horizon, 1, 1)), np.tile(kappa, (horizon, 1)), np.tile(cov, (horizon, 1, 1)))

    @property
    def horizon(self) -> int:
        return self.K.shape[0]

    @property
    def control_dim(self) -> int:
        return self.K.shape[1]

    def mean_at(self, x, t: int) -> np.ndarray:
        return -self.K[t] @ np.asarray(x, dtype=float) - self.kappa[t]

    def gains(self, t: int, state_dim: int) -> tuple[np.ndarray, np.ndarray]:
        return self.K[t], self.kappa[t]

    def log_density(self, u, x, t: int) -> float:
        return gaussian_log_density(u, self.mean_at(x, t), self.cov[t])

    def sample(self, x, t, rng, size=None):
        return rng.multivariate_normal(self.mean_at(x, t), self.cov[t], size=size)


class GMMRef:
    """Mixture ``sum_m w[t, m] pi_m``; components may be any stochastic policy."""

    def __init__(self, modes: Sequence, weights):
        self.modes = list(modes)
        if not self.modes:
            raise ValueError("a mixture needs at least one mode")
        w = np.asarray(weights, dtype=float)
        if w.ndim == 1:
            w = w[None, :]
        if w.shape[1] != len(self.modes):
            raise DimensionError(f"{w.shape[1]} weights for {len(self.modes)} modes")
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("mixture weights must sum to 1 at every timestep")
        self.weights = w

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def weights_at(self, t: int) -> np.ndarray:
        return self.weights[min(t, self.weights.shape[0] - 1)]

    def log_density(self, u, x, t: int) -> float:
        w = self.weights_at(t)
        logs = np.array([mode.log_density(u, x, t) for mode in self.modes])
        with np.errstate(divide="ignore"):
            return float(logsumexp(logs + np.log(w)))

    def sample(self, x, t, rng, size=None):
        w = self.weights_at(t)
        if size is None:
            k = rng.choice(len(self.modes), p=w)
            return self.modes[k].sample(x, t, rng)
        ks = rng.choice(len(self.modes), p=w, size=size)
        return np.stack([self.modes[k].sample(x, t, rng) for k in ks])


def log_density(ref, u, x, t: int) -> float:
    return ref.log_density(u, x, t)


def gaussian_kl(p_mean, p_cov, q_mean, q_cov) -> float:
    """``KL(N(p_mean, p_cov) || N(q_mean, q_cov))`` in closed form."""
    p_mean = np.atleast_1d(np.asarray(p_mean, dtype=float))
    q_mean = np.atleast_1d(np.asarray(q_mean, dtype=float))
    p_cov = np.atleast_2d(np.asarray(p_cov, dtype=float))
    q_cov = np.atleast_2d(np.asarray(q_cov, dtype=float))
    try:
        Lp = np.linalg.cholesky(p_cov)
        Lq = np.linalg.cholesky(q_cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("gaussian_kl needs positive definite covariances") from exc
    n = p_mean.size
    A = np.linalg.solve(Lq, Lp)
    d = np.linalg.solve(Lq, p_mean - q_mean)
    logdet_p = 2.0 * np.log(np.diag(Lp)).sum()
    logdet_q = 2.0 * np.log(np.diag(Lq)).sum()
    kl = 0.5 * (np.sum(A * A) + d @ d - n + logdet_q - logdet_p)
    return float(max(kl, 0.0))


def _fd_grad_hess(f, u: np.ndarray, h: float = 1e-3):
    m = u.size
    hs = h * np.maximum(1.0, np.abs(u))
    f0 = f(u)
    g = np.empty(m)
    H = np.empty((m, m))
    for a in range(m):
        ea = np.zeros(m)
        ea[a] = hs[a]
        fp, fm = f(u + ea), f(u - ea)
        g[a] = (fp - fm) / (2 * hs[a])
        H[a, a] = (fp - 2 * f0 + fm) / hs[a] ** 2
        for b in range(a):
            eb = np.zeros(m)
            eb[b] = hs[b]
            H[a, b] = H[b, a] = (
                f(u + ea + eb) - f(u + ea - eb) - f(u - ea + eb) + f(u - ea - eb)
            ) / (4 * hs[a] * hs[b])
    return f0, g, H


def laplace_mode(logp, u0, t: int = 0, max_steps: int = 50, grad_tol: float = 1e-8):
    """Newton ascent on ``logp`` from ``u0``; returns ``(mode, cov)``."""
    u = np.atleast_1d(np.asarray(u0, dtype=float)).copy()
    f0, g, H = _fd_grad_hess(logp, u)
    for _ in range(max_steps):
        if np.max(np.abs(g)) < grad_tol:
            break
        w, V = np.linalg.eigh(H)
        if np.all(w < 0):
            step = -np.linalg.solve(H, g)
        else:
            # Ascent on the negative-curvature-corrected model.
            step = V @ ((V.T @ g) / np.maximum(np.abs(w), 1e-8))
        alpha = 1.0
        for _ in range(40):
            cand = u + alpha * step
            fc = logp(cand)
            if np.isfinite(fc) and fc >= f0:
                break
            alpha *= 0.5
        else:
            break
        u = cand
        f0, g, H = _fd_grad_hess(logp, u)
    H = 0.5 * (H + H.T)
    w = np.linalg.eigvalsh(H)
    if not np.all(w < 0):
        raise SingularLaplaceError(t)
    return u, spd_floor(np.linalg.inv(-H))


def laplace_fit(policy, nominal: Trajectory, player: int, dims) -> GaussianRef:
    """Gaussian fit per timestep at a mode of ``policy`` found by Newton ascent
    from the nominal control."""
    T = nominal.horizon
    sl = dims.control_slice(player)
    means, covs = [], []
    for t in range(T):
        x_t = nominal.states[t]
        mode, cov = laplace_mode(lambda u: policy.log_density(u, x_t, t), nominal.controls[t, sl], t=t)
        means.append(mode)
        covs.append(cov)
    return GaussianRef(np.array(means), np.array(covs))


def local_gaussian(policy, nominal: Trajectory, player: int, dims):
    """Gaussian/feedback reference to feed the exact solver along ``nominal``.

    Gaussian and feedback-Gaussian references are already in solver form and
    are returned unchanged; anything else is Laplace-approximated.
    """
    if isinstance(policy, (GaussianRef, FeedbackGaussianRef)):
        return policy
    if isinstance(policy, GMMRef) and policy.n_modes == 1:
        return local_gaussian(policy.modes[0], nominal, player, dims)
    return laplace_fit(policy, nominal, player, dims)


def _lqr_tracking_gains(As, Bs, state_weight: float, control_weight: float) -> np.ndarray:
    T, n, _ = As.shape
    m = Bs.shape[2]
    Qw = state_weight * np.eye(n)
    Rw = control_weight * np.eye(m)
    P = Qw.copy()
    K = np.empty((T, m, n))
    for t in range(T - 1, -1, -1):
        A, B = As[t], Bs[t]
        BtP = B.T @ P
        K[t] = np.linalg.solve(Rw + BtP @ B, BtP @ A)
        F = A - B @ K[t]
        P = Qw + K[t].T @ Rw @ K[t] + F.T @ P @ F
        P = 0.5 * (P + P.T)
    return K


def feedback_fit(policy, nominal: Trajectory, player: int, n_samples: int, dynamics,
                 rng: np.random.Generator, tracking_weight: float = 1.0,
                 control_weight: float = 1e-3) -> FeedbackGaussianRef:
    """Fit a time-varying affine-Gaussian reference from samples.

    Controls are sampled at each nominal state; an LQR tracker through the
    linearized dynamics supplies the gains, anchored so that the fitted mean
    equals the sample mean at the nominal states.
    """
    if n_samples < 2:
        raise ValueError("feedback_fit needs n_samples >= 2")
    dims = dynamics.dims
    sl = dims.control_slice(player)
    T = nominal.horizon
    means, covs = [], []
    for t in range(T):
        draws = np.atleast_2d(np.asarray(policy.sample(nominal.states[t], t, rng, size=n_samples), dtype=float))
        draws = draws.reshape(n_samples, -1)
        means.append(draws.mean(axis=0))
        covs.append(np.atleast_2d(np.cov(draws, rowvar=False)))
    means = np.array(means)
    covs = spd_floor(np.array(covs))
    us = nominal.controls.copy()
    us[:, sl] = means
    As, Bj = dynamics.jacobians_batch(nominal.states[:-1], us)
    K = _lqr_tracking_gains(As, Bj[:, :, sl], tracking_weight, control_weight)
    kappa = -means - np.einsum("tmn,tn->tm", K, nominal.states[:-1])
    return FeedbackGaussianRef(K, kappa, covs)


def maxent_reference(control_dim: int, horizon: int, variance: float = 1e6) -> GaussianRef:
    """Uninformative zero-mean reference; KL toward it reduces to entropy
    regularization."""
    return GaussianRef.constant(np.zeros(control_dim), variance * np.eye(control_dim), horizon)
