"""Exact feedback Nash equilibria of KL-regularized LQ-Gaussian games.

Conventions
-----------
Player ``i`` pays, per step, ``1/2 x'Q x + q'x + sum_j (1/2 u_j'R_ij u_j + r_ij'u_j)``
plus ``lam_i * KL(pi_i || ref_i)``. Dynamics are ``x' = A x + sum_j B_j u_j + d``.
References are handled in affine form ``N(-Kref x - kref, Sref)``; an open-loop
reference ``N(mu, Sref)`` is the case ``Kref = 0, kref = -mu``.

The equilibrium policy is ``N(-K x - kappa, Sigma)`` and each player's value
is ``1/2 x'Z x + z'x + const`` (the constant is not tracked).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize

from .core import DimensionError, KLGameError, NumericalError
from .cost import QuadraticStageCost
from .dynamics import LinearGameStage
from .reference import FeedbackGaussianRef, GaussianRef, gaussian_kl

COND_LIMIT = 1e12


class SingularRiccatiError(KLGameError):
    def __init__(self, t: int, cond: float):
        super().__init__(f"coupled Riccati system is singular at timestep {t} (condition {cond:.3g})")
        self.t = t
        self.cond = cond


class UnsupportedError(KLGameError):
    pass


@dataclass(frozen=True)
class KLWeights:
    lam: tuple[float, ...]

    def __post_init__(self):
        lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        if any(not v >= 0 for v in lam):
            raise ValueError("KL weights must be nonnegative")
        object.__setattr__(self, "lam", lam)

    def __len__(self):
        return len(self.lam)

    def __getitem__(self, i):
        return self.lam[i]

    def __iter__(self):
        return iter(self.lam)


def as_weights(lam) -> KLWeights:
    return lam if isinstance(lam, KLWeights) else KLWeights(tuple(np.atleast_1d(lam)))


@dataclass(frozen=True)
class AffineGaussianPolicy:
    """``u_t ~ N(-K[t] x - kappa[t], cov[t])``; ``cov`` is zero when deterministic."""

    K: np.ndarray
    kappa: np.ndarray
    cov: np.ndarray
    deterministic: bool = False

    @property
    def horizon(self) -> int:
        return self.K.shape[0]

    def mean(self, x, t: int) -> np.ndarray:
        return -self.K[t] @ x - self.kappa[t]

    def scaled(self, eps: float) -> "AffineGaussianPolicy":
        return AffineGaussianPolicy(eps * self.K, eps * self.kappa, eps * self.cov, self.deterministic)


@dataclass(frozen=True)
class ValueQuadratic:
    """``Z: (T+1, n, n)``, ``z: (T+1, n)``; index ``T`` holds the terminal value."""

    Z: np.ndarray
    z: np.ndarray
    max_asymmetry: float = 0.0


@dataclass
class AffineLQGame:
    """Stacked arrays for a KL-LQ game over ``T`` steps.

    ``R[i]`` is the block-diagonal ``(T, M, M)`` control weight of player
    ``i`` over the joint control (block ``j`` is ``R_ij``), ``r[i]`` the
    matching ``(T, M)`` linear term.
    """

    A: np.ndarray
    B: np.ndarray
    d: np.ndarray
    Q: list[np.ndarray]
    q: list[np.ndarray]
    R: list[np.ndarray]
    r: list[np.ndarray]
    control_dims: tuple[int, ...]

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    @property
    def n_players(self) -> int:
        return len(self.control_dims)

    def slices(self) -> list[slice]:
        off = np.concatenate([[0], np.cumsum(self.control_dims)])
        return [slice(int(off[i]), int(off[i + 1])) for i in range(len(self.control_dims))]


@dataclass
class AffineRefs:
    """Per-player reference in affine form: ``Kref (T, m, n)``, ``kref (T, m)``,
    ``Sinv (T, m, m)`` (inverse covariance). ``None`` entries mean no reference."""

    Kref: list[np.ndarray | None]
    kref: list[np.ndarray | None]
    Sinv: list[np.ndarray | None]
    cov: list[np.ndarray | None]


def stack_game(stages: Sequence[LinearGameStage], costs: Sequence[Sequence[QuadraticStageCost]]) -> AffineLQGame:
    """Stack per-timestep stages and ``costs[i][t]`` into arrays."""
    T = len(stages)
    if T == 0:
        raise DimensionError("need at least one stage")
    N = len(stages[0].B)
    if len(costs) != N:
        raise DimensionError(f"{len(costs)} cost sequences for {N} players")
    mdims = tuple(b.shape[1] for b in stages[0].B)
    M = sum(mdims)
    off = np.concatenate([[0], np.cumsum(mdims)])
    A = np.stack([s.A for s in stages])
    B = np.stack([s.B_joint for s in stages])
    d = np.stack([s.drift for s in stages])
    Q, q, R, r = [], [], [], []
    for i in range(N):
        if len(costs[i]) != T:
            raise DimensionError(f"player {i} has {len(costs[i])} costs for {T} stages")
        Q.append(np.stack([c.Q for c in costs[i]]))
        q.append(np.stack([c.q for c in costs[i]]))
        Ri = np.zeros((T, M, M))
        ri = np.zeros((T, M))
        for t, c in enumerate(costs[i]):
            c.validate(i)
            for j in range(N):
                sl = slice(off[j], off[j + 1])
                Ri[t, sl, sl] = c.R[j]
                ri[t, sl] = c.r[j]
        R.append(Ri)
        r.append(ri)
    return AffineLQGame(A, B, d, Q, q, R, r, mdims)


def affine_refs(refs, game: AffineLQGame, lam: KLWeights) -> AffineRefs:
    """Convert Gaussian / feedback-Gaussian references into affine form."""
    T = game.horizon
    n = game.A.shape[1]
    Kref, kref, Sinv, cov = [], [], [], []
    for i, m in enumerate(game.control_dims):
        ref = refs[i] if refs is not None else None
        if lam[i] == 0 and ref is None:
            Kref.append(None), kref.append(None), Sinv.append(None), cov.append(None)
            continue
        if ref is None:
            raise ValueError(f"player {i} has lam > 0 but no reference")
        if ref.horizon < T:
            raise DimensionError(f"reference for player {i} covers {ref.horizon} < {T} steps")
        if isinstance(ref, FeedbackGaussianRef):
            Kr, kr = ref.K[:T], ref.kappa[:T]
        elif isinstance(ref, GaussianRef):
            Kr, kr = np.zeros((T, m, n)), -ref.mean[:T]
        else:
            raise TypeError(f"unsupported reference type {type(ref).__name__}")
        if Kr.shape != (T, m, n):
            raise DimensionError(f"reference gains for player {i} have shape {Kr.shape}")
        C = ref.cov[:T]
        Kref.append(Kr)
        kref.append(kr)
        cov.append(C)
        Sinv.append(np.linalg.inv(C))
    return AffineRefs(Kref, kref, Sinv, cov)


def solve_affine(game: AffineLQGame, refs: AffineRefs, lam, terminal=None):
    """Backward recursion shared by both reference variants.

    Returns ``(policies, values)``. ``terminal`` is an optional pair
    ``(Z_T, z_T)`` of per-player terminal value parameters (default zero).
    """
    lam = as_weights(lam)
    T, n = game.horizon, game.A.shape[1]
    N = game.n_players
    if len(lam) != N:
        raise DimensionError(f"{len(lam)} KL weights for {N} players")
    M = sum(game.control_dims)
    sl = game.slices()

    Z = np.zeros((N, T + 1, n, n))
    z = np.zeros((N, T + 1, n))
    if terminal is not None:
        Z[:, T] = np.asarray(terminal[0], dtype=float)
        z[:, T] = np.asarray(terminal[1], dtype=float)
    Ks = [np.zeros((T, m, n)) for m in game.control_dims]
    ks = [np.zeros((T, m)) for m in game.control_dims]
    covs = [np.zeros((T, m, m)) for m in game.control_dims]
    asym = 0.0

    W = []
    for i in range(N):
        if lam[i] > 0:
            W.append(lam[i] * refs.Sinv[i])
        else:
            W.append(None)

    S = np.empty((M, M))
    Y = np.empty((M, n + 1))
    for t in range(T - 1, -1, -1):
        A, B, d = game.A[t], game.B[t], game.d[t]
        for i in range(N):
            Zi, zi = Z[i, t + 1], z[i, t + 1]
            Bi = B[:, sl[i]]
            BiZ = Bi.T @ Zi
            S[sl[i]] = BiZ @ B
            S[sl[i], sl[i]] += game.R[i][t, sl[i], sl[i]]
            Y[sl[i], :n] = BiZ @ A
            Y[sl[i], n] = BiZ @ d + Bi.T @ zi + game.r[i][t, sl[i]]
            if W[i] is not None:
                Wi = W[i][t]
                S[sl[i], sl[i]] += Wi
                Y[sl[i], :n] += Wi @ refs.Kref[i][t]
                Y[sl[i], n] += Wi @ refs.kref[i][t]
        # row equilibration so that very different KL weights do not read as singular
        scale = np.abs(S).max(axis=1)
        if not np.all(scale > 0):
            raise SingularRiccatiError(t, np.inf)
        Ss, Ys = S / scale[:, None], Y / scale[:, None]
        cond = np.linalg.cond(Ss)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise SingularRiccatiError(t, cond)
        sol = np.linalg.solve(Ss, Ys)
        Kall, kall = sol[:, :n], sol[:, n]
        F = A - B @ Kall
        beta_d = d - B @ kall
        for i in range(N):
            Zi, zi = Z[i, t + 1], z[i, t + 1]
            Ki, ki = Kall[sl[i]], kall[sl[i]]
            Ks[i][t], ks[i][t] = Ki, ki
            Rb, rb = game.R[i][t], game.r[i][t]
            ZF = Zi @ F
            Znew = game.Q[i][t] + Kall.T @ Rb @ Kall + F.T @ ZF
            znew = game.q[i][t] + Kall.T @ (Rb @ kall - rb) + F.T @ (zi + Zi @ beta_d)
            if W[i] is not None:
                Wi = W[i][t]
                dK = Ki - refs.Kref[i][t]
                dk = ki - refs.kref[i][t]
                Znew += dK.T @ Wi @ dK
                znew += dK.T @ Wi @ dk
                Bi = B[:, sl[i]]
                H = game.R[i][t, sl[i], sl[i]] + Bi.T @ Zi @ Bi + Wi
                C = lam[i] * np.linalg.inv(H)
                C = 0.5 * (C + C.T)
                try:
                    np.linalg.cholesky(C)
                except np.linalg.LinAlgError as exc:
                    raise NumericalError(f"equilibrium covariance not SPD at t={t}, player {i}") from exc
                covs[i][t] = C
            asym = max(asym, float(np.max(np.abs(Znew - Znew.T))))
            Z[i, t] = 0.5 * (Znew + Znew.T)
            z[i, t] = znew

    policies = [
        AffineGaussianPolicy(Ks[i], ks[i], covs[i], deterministic=W[i] is None) for i in range(N)
    ]
    values = [ValueQuadratic(Z[i], z[i], asym) for i in range(N)]
    return policies, values


def solve_klqg(stages, costs, refs: Sequence[GaussianRef | None], lam, terminal=None):
    """Feedback Nash equilibrium with open-loop Gaussian references.

    ``costs[i][t]`` is player ``i``'s quadratic stage cost at step ``t``.
    Players with ``lam = 0`` may pass ``None`` as reference; their policy
    is deterministic (``cov`` is zero and ``deterministic`` is set).
    """
    lam = as_weights(lam)
    game = stack_game(stages, costs)
    for i, ref in enumerate(refs):
        if ref is not None and not isinstance(ref, GaussianRef):
            raise TypeError("solve_klqg takes open-loop GaussianRef references")
    return solve_affine(game, affine_refs(refs, game, lam), lam, terminal)


def solve_klqg_feedback(stages, costs, refs: Sequence[FeedbackGaussianRef | None], lam, terminal=None):
    """Feedback Nash equilibrium with state-feedback Gaussian references."""
    lam = as_weights(lam)
    game = stack_game(stages, costs)
    for ref in refs:
        if ref is not None and not isinstance(ref, FeedbackGaussianRef):
            raise TypeError("solve_klqg_feedback takes FeedbackGaussianRef references")
    return solve_affine(game, affine_refs(refs, game, lam), lam, terminal)


def riccati_residuals(policies, values, game: AffineLQGame, refs: AffineRefs, lam) -> np.ndarray:
    """Residual norms of the coupled gain equations, shape ``(T, N, 2)``.

    Column 0 is the feedback-gain equation, column 1 the feedforward one.
    """
    lam = as_weights(lam)
    T, n = game.horizon, game.A.shape[1]
    N = game.n_players
    sl = game.slices()
    out = np.zeros((T, N, 2))
    for t in range(T):
        A, B, d = game.A[t], game.B[t], game.d[t]
        for i in range(N):
            Zi, zi = values[i].Z[t + 1], values[i].z[t + 1]
            Bi = B[:, sl[i]]
            lhs_K = (game.R[i][t, sl[i], sl[i]] + Bi.T @ Zi @ Bi) @ policies[i].K[t]
            lhs_k = (game.R[i][t, sl[i], sl[i]] + Bi.T @ Zi @ Bi) @ policies[i].kappa[t]
            rhs_K = Bi.T @ Zi @ A
            rhs_k = Bi.T @ (zi + Zi @ d) + game.r[i][t, sl[i]]
            if lam[i] > 0:
                Wi = lam[i] * refs.Sinv[i][t]
                lhs_K = lhs_K + Wi @ policies[i].K[t]
                lhs_k = lhs_k + Wi @ policies[i].kappa[t]
                rhs_K = rhs_K + Wi @ refs.Kref[i][t]
                rhs_k = rhs_k + Wi @ refs.kref[i][t]
            for j in range(N):
                if j != i:
                    lhs_K = lhs_K + Bi.T @ Zi @ B[:, sl[j]] @ policies[j].K[t]
                    lhs_k = lhs_k + Bi.T @ Zi @ B[:, sl[j]] @ policies[j].kappa[t]
            scale = 1.0 + np.abs(rhs_K).max() + np.abs(lhs_K).max()
            out[t, i, 0] = np.abs(lhs_K - rhs_K).max() / scale
            scale = 1.0 + np.abs(rhs_k).max() + np.abs(lhs_k).max()
            out[t, i, 1] = np.abs(lhs_k - rhs_k).max() / scale
    return out


def stage_expectation(game: AffineLQGame, refs: AffineRefs, lam, values, policies, t: int, player: int,
                      x, mu, cov, noise_cov=None) -> float:
    """Player's one-step expected objective at state ``x`` when it plays
    ``N(mu, cov)`` and everyone else plays their equilibrium policy.

    Sum of expected stage cost, weighted KL to the reference, and expected
    next-step value ``E[1/2 x'Z x + z'x]`` (constant dropped).
    """
    lam = as_weights(lam)
    N = game.n_players
    sl = game.slices()
    n = game.A.shape[1]
    A, B, d = game.A[t], game.B[t], game.d[t]
    x = np.asarray(x, dtype=float)
    means = [policies[j].mean(x, t) for j in range(N)]
    covs = [policies[j].cov[t] for j in range(N)]
    means[player] = np.asarray(mu, dtype=float)
    covs[player] = np.asarray(cov, dtype=float)

    Rb, rb = game.R[player][t], game.r[player][t]
    val = 0.5 * x @ game.Q[player][t] @ x + game.q[player][t] @ x
    for j in range(N):
        Rj = Rb[sl[j], sl[j]]
        val += 0.5 * means[j] @ Rj @ means[j] + rb[sl[j]] @ means[j] + 0.5 * np.trace(Rj @ covs[j])
    if lam[player] > 0:
        ref_mean = -refs.Kref[player][t] @ x - refs.kref[player][t]
        val += lam[player] * gaussian_kl(means[player], covs[player], ref_mean, refs.cov[player][t])
    Zn, zn = values[player].Z[t + 1], values[player].z[t + 1]
    m_next = A @ x + d + sum(B[:, sl[j]] @ means[j] for j in range(N))
    P_next = np.zeros((n, n)) if noise_cov is None else np.asarray(noise_cov, dtype=float).copy()
    for j in range(N):
        P_next += B[:, sl[j]] @ covs[j] @ B[:, sl[j]].T
    val += 0.5 * m_next @ Zn @ m_next + zn @ m_next + 0.5 * np.trace(Zn @ P_next)
    return float(val)


@dataclass(frozen=True)
class StationarityReport:
    mean_residual: float
    cov_residual: float | None

    @property
    def max(self) -> float:
        return max(self.mean_residual, self.cov_residual or 0.0)


def verify_stationarity(policies, values, game: AffineLQGame, refs: AffineRefs, lam, t: int, player: int,
                        states=None, h: float = 1e-5) -> StationarityReport:
    """Finite-difference gradient of the one-step expected objective with
    respect to the player's mean and covariance, at the solved policy.

    Evaluated at each probe state (default: the origin and two seeded random
    states); returns the largest absolute gradient entry.
    """
    lam = as_weights(lam)
    n = game.A.shape[1]
    if states is None:
        rng = np.random.default_rng(12345)
        states = [np.zeros(n), rng.standard_normal(n), rng.standard_normal(n)]
    pol = policies[player]
    m = pol.K.shape[1]
    mean_res = 0.0
    cov_res = None if lam[player] == 0 else 0.0

    def f(x, mu, C):
        return stage_expectation(game, refs, lam, values, policies, t, player, x, mu, C)

    for x in states:
        mu0 = pol.mean(x, t)
        C0 = pol.cov[t]
        for a in range(m):
            e = np.zeros(m)
            e[a] = h
            g = (f(x, mu0 + e, C0) - f(x, mu0 - e, C0)) / (2 * h)
            mean_res = max(mean_res, abs(g))
        if cov_res is not None:
            hc = 1e-4 * float(np.min(np.linalg.eigvalsh(C0)))
            for a in range(m):
                for b in range(a + 1):
                    E = np.zeros((m, m))
                    E[a, b] = E[b, a] = hc
                    g = (f(x, mu0, C0 + E) - f(x, mu0, C0 - E)) / (2 * hc)
                    cov_res = max(cov_res, abs(g))
    return StationarityReport(mean_res, cov_res)


def expected_cost(policies, game: AffineLQGame, refs: AffineRefs, lam, player: int, x0_mean, x0_cov,
                  terminal=None, noise_cov=None) -> float:
    """Closed-form expected total objective of ``player`` under the given
    affine-Gaussian policies, by forward propagation of state moments."""
    lam = as_weights(lam)
    T, n = game.horizon, game.A.shape[1]
    N = game.n_players
    sl = game.slices()
    m = np.asarray(x0_mean, dtype=float).copy()
    P = np.asarray(x0_cov, dtype=float).copy()
    Sd = np.zeros((n, n)) if noise_cov is None else np.asarray(noise_cov, dtype=float)
    total = 0.0
    for t in range(T):
        A, B, d = game.A[t], game.B[t], game.d[t]
        Kall = np.concatenate([p.K[t] for p in policies], axis=0)
        kall = np.concatenate([p.kappa[t] for p in policies], axis=0)
        Call = np.zeros((B.shape[1], B.shape[1]))
        for j in range(N):
            Call[sl[j], sl[j]] = policies[j].cov[t]
        mu_u = -Kall @ m - kall
        P_u = Kall @ P @ Kall.T + Call
        Q, q = game.Q[player][t], game.q[player][t]
        Rb, rb = game.R[player][t], game.r[player][t]
        total += 0.5 * (np.trace(Q @ P) + m @ Q @ m) + q @ m
        total += 0.5 * (np.trace(Rb @ P_u) + mu_u @ Rb @ mu_u) + rb @ mu_u
        if lam[player] > 0:
            pol = policies[player]
            Kd = pol.K[t] - refs.Kref[player][t]
            kd = pol.kappa[t] - refs.kref[player][t]
            Sinv = refs.Sinv[player][t]
            Sref = refs.cov[player][t]
            mean_gap = -Kd @ m - kd
            _, logdet_ref = np.linalg.slogdet(Sref)
            _, logdet_pol = np.linalg.slogdet(pol.cov[t])
            kl = 0.5 * (np.trace(Sinv @ pol.cov[t]) - pol.cov[t].shape[0] + logdet_ref - logdet_pol
                        + mean_gap @ Sinv @ mean_gap + np.trace(Sinv @ Kd @ P @ Kd.T))
            total += lam[player] * kl
        # x' = (A - B Kall) x + (d - B kall) + B noise_u + w
        F = A - B @ Kall
        m = F @ m + d - B @ kall
        P = F @ P @ F.T + B @ Call @ B.T + Sd
    if terminal is not None:
        ZT, zT = terminal[0][player], terminal[1][player]
        total += 0.5 * (np.trace(ZT @ P) + m @ ZT @ m) + zT @ m
    return float(total)


def bellman_optimal_policy_density(Q_fn, ref_mean, ref_cov, lam: float, u, n_nodes: int = 64) -> float:
    """Density at ``u`` of the minimizer ``exp(-Q/lam) ref / normalizer``.

    The normalizer is computed by Gauss-Hermite quadrature centred at the
    mode of the integrand (1-D and 2-D controls only).
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    ref_mean = np.atleast_1d(np.asarray(ref_mean, dtype=float))
    ref_cov = np.atleast_2d(np.asarray(ref_cov, dtype=float))
    k = ref_mean.size
    if k > 2:
        raise UnsupportedError("quadrature normalization supports 1-D and 2-D controls only")
    Sinv = np.linalg.inv(ref_cov)
    _, logdet = np.linalg.slogdet(ref_cov)

    def log_ref(v):
        dv = v - ref_mean
        return -0.5 * dv @ Sinv @ dv - 0.5 * logdet - 0.5 * k * np.log(2 * np.pi)

    def neg_log_integrand(v):
        return float(Q_fn(v)) / lam - log_ref(v)

    res = optimize.minimize(neg_log_integrand, ref_mean, method="BFGS", options={"gtol": 1e-10})
    c = res.x
    hs = 1e-4 * np.maximum(1.0, np.abs(c))
    H = np.empty((k, k))
    f0 = neg_log_integrand(c)
    for a in range(k):
        ea = np.zeros(k)
        ea[a] = hs[a]
        H[a, a] = (neg_log_integrand(c + ea) - 2 * f0 + neg_log_integrand(c - ea)) / hs[a] ** 2
        for b in range(a):
            eb = np.zeros(k)
            eb[b] = hs[b]
            H[a, b] = H[b, a] = (
                neg_log_integrand(c + ea + eb) - neg_log_integrand(c + ea - eb)
                - neg_log_integrand(c - ea + eb) + neg_log_integrand(c - ea - eb)
            ) / (4 * hs[a] * hs[b])
    w_eig, V = np.linalg.eigh(0.5 * (H + H.T))
    w_eig = np.maximum(w_eig, 1e-12)
    L = V / np.sqrt(w_eig)
    nodes, weights = hermgauss(n_nodes)
    grids = np.meshgrid(*([nodes] * k), indexing="ij")
    wgrid = np.prod(np.meshgrid(*([weights] * k), indexing="ij"), axis=0).ravel()
    xi = np.stack([g.ravel() for g in grids], axis=1)
    pts = c + np.sqrt(2.0) * xi @ L.T
    log_vals = np.array([-neg_log_integrand(p) + f0 for p in pts]) + (xi**2).sum(axis=1)
    jac = np.sqrt(2.0) ** k * abs(np.linalg.det(L))
    log_norm = np.log(np.sum(wgrid * np.exp(log_vals)) * jac) - f0
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(np.exp(-neg_log_integrand(u) - log_norm))
