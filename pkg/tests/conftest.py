import numpy as np
import pytest

from klgame.cost import QuadraticStageCost
from klgame.dynamics import LinearGameStage
from klgame.reference import FeedbackGaussianRef, GaussianRef


def random_spd(rng, k, lo=0.2):
    G = rng.standard_normal((k, k))
    return G @ G.T / k + lo * np.eye(k)


class LQCase:
    """A random KL-LQ-Gaussian game with per-timestep stages and costs."""

    def __init__(self, rng, n_players=2, n=4, m=None, T=5, lam=None, feedback=False, affine=True,
                 ref_scale=1.0):
        m = m or [max(1, n // 2)] * n_players
        self.n, self.m, self.T, self.N = n, list(m), T, n_players
        self.stages = []
        for _ in range(T):
            A = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
            B = tuple(0.5 * rng.standard_normal((n, mi)) for mi in m)
            d = 0.1 * rng.standard_normal(n) if affine else np.zeros(n)
            self.stages.append(LinearGameStage(A, B, d))
        self.costs = []
        for i in range(n_players):
            seq = []
            for _ in range(T):
                Q = random_spd(rng, n, 0.1)
                q = 0.1 * rng.standard_normal(n) if affine else np.zeros(n)
                R = tuple(random_spd(rng, mj, 0.5) if j == i else 0.1 * random_spd(rng, mj, 0.0)
                          for j, mj in enumerate(m))
                r = tuple(0.1 * rng.standard_normal(mj) if affine else np.zeros(mj) for mj in m)
                seq.append(QuadraticStageCost(Q, q, R, r))
            self.costs.append(seq)
        self.lam = np.full(n_players, 1.0) if lam is None else np.asarray(lam, dtype=float)
        self.refs = []
        for mi in m:
            covs = np.stack([ref_scale * random_spd(rng, mi, 0.3) for _ in range(T)])
            if feedback:
                K = 0.3 * rng.standard_normal((T, mi, n))
                kap = rng.standard_normal((T, mi))
                self.refs.append(FeedbackGaussianRef(K, kap, covs))
            else:
                self.refs.append(GaussianRef(rng.standard_normal((T, mi)), covs))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def lq_case(rng):
    return LQCase(rng)
