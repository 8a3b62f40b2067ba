import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klgame.cost import QuadraticStageCost
from klgame.dynamics import LinearGameStage
from klgame.klqg import (
    AffineLQGame,
    AffineRefs,
    KLWeights,
    SingularRiccatiError,
    UnsupportedError,
    affine_refs,
    bellman_optimal_policy_density,
    expected_cost,
    riccati_residuals,
    solve_affine,
    solve_klqg,
    solve_klqg_feedback,
    stack_game,
    verify_stationarity,
)
from klgame.reference import FeedbackGaussianRef, GaussianRef

from conftest import LQCase


def solve_case(case, lam=None, refs=None):
    lam = case.lam if lam is None else lam
    refs = case.refs if refs is None else refs
    game = stack_game(case.stages, case.costs)
    arefs = affine_refs(refs, game, KLWeights(lam))
    pols, vals = solve_affine(game, arefs, lam)
    return game, arefs, pols, vals


def scalar_stage(T, A=1.0, B=1.0):
    return [LinearGameStage([[A]], ([[B]],), [0.0]) for _ in range(T)]


def scalar_cost(T, Q=1.0, R=1.0):
    return [[QuadraticStageCost([[Q]], [0.0], ([[R]],), ([0.0],)) for _ in range(T)]]


def test_scalar_lq_example():
    pols, vals = solve_klqg(scalar_stage(2), scalar_cost(2), [None], [0.0])
    np.testing.assert_allclose(pols[0].K[:, 0, 0], [0.5, 0.0])
    np.testing.assert_allclose(vals[0].Z[:, 0, 0], [1.5, 1.0, 0.0])
    assert pols[0].deterministic and not pols[0].cov.any()


def test_covariance_single_step_example():
    ref = GaussianRef.constant([0.0], [[1.0]], 1)
    pols, _ = solve_klqg(scalar_stage(1), scalar_cost(1), [ref], [1.0])
    assert pols[0].cov[0, 0, 0] == pytest.approx(0.5)


def test_large_lambda_recovers_open_loop_reference(rng):
    case = LQCase(rng, n_players=2, n=4, T=4)
    game, arefs, pols, _ = solve_case(case, lam=[1e12, 1e12])
    x = rng.standard_normal(4)
    for i, ref in enumerate(case.refs):
        for t in range(case.T):
            assert np.abs(pols[i].mean(x, t) - ref.mean[t]).max() < 1e-4
            rel = np.abs(pols[i].cov[t] - ref.cov[t]).max() / np.abs(ref.cov[t]).max()
            assert rel < 1e-4


def test_uninformative_reference_gives_max_entropy_covariance(rng):
    case = LQCase(rng, n_players=2, n=4, T=4)
    lam = np.array([0.7, 1.3])
    refs = [GaussianRef.constant(np.zeros(m), 1e6 * np.eye(m), case.T) for m in case.m]
    game, _, pols, vals = solve_case(case, lam, refs)
    for i, s in enumerate(game.slices()):
        for t in range(case.T):
            Bi = game.B[t][:, s]
            H = game.R[i][t, s, s] + Bi.T @ vals[i].Z[t + 1] @ Bi
            target = lam[i] * np.linalg.inv(H)
            assert np.abs(pols[i].cov[t] - target).max() / np.abs(target).max() < 1e-4


def test_feedback_with_zero_gains_matches_open_loop(rng):
    case = LQCase(rng, n_players=2, n=4, T=5)
    fb = [FeedbackGaussianRef(np.zeros((case.T, m, case.n)), -ref.mean, ref.cov) for m, ref in zip(case.m, case.refs)]
    p1, v1 = solve_klqg(case.stages, case.costs, case.refs, case.lam)
    p2, v2 = solve_klqg_feedback(case.stages, case.costs, fb, case.lam)
    for a, b in zip(p1, p2):
        assert np.abs(a.K - b.K).max() < 1e-10
        assert np.abs(a.kappa - b.kappa).max() < 1e-10
        assert np.abs(a.cov - b.cov).max() < 1e-10
    for a, b in zip(v1, v2):
        assert np.abs(a.Z - b.Z).max() < 1e-10


def test_feedback_large_lambda_recovers_reference_gains(rng):
    case = LQCase(rng, n_players=2, n=4, T=4, feedback=True)
    pols, _ = solve_klqg_feedback(case.stages, case.costs, case.refs, [1e12, 1e12])
    for p, ref in zip(pols, case.refs):
        assert np.abs(p.K - ref.K).max() / np.abs(ref.K).max() < 1e-4
        assert np.abs(p.kappa - ref.kappa).max() / np.abs(ref.kappa).max() < 1e-4


@pytest.mark.parametrize("feedback", [False, True])
def test_riccati_residuals(rng, feedback):
    case = LQCase(rng, n_players=2, n=2, m=[1, 2], T=6, feedback=feedback)
    game, arefs, pols, vals = solve_case(case)
    assert riccati_residuals(pols, vals, game, arefs, case.lam).max() < 1e-8


def test_stationarity_of_solution_and_detection_of_perturbation(rng):
    case = LQCase(rng, n_players=2, n=4, T=4)
    game, arefs, pols, vals = solve_case(case)
    for t in range(case.T):
        for i in range(2):
            rep = verify_stationarity(pols, vals, game, arefs, case.lam, t, i)
            assert rep.max < 1e-6
    bad = list(pols)
    K = bad[0].K.copy()
    K[1] += 1e-2 * rng.standard_normal(K[1].shape)
    bad[0] = type(pols[0])(K, pols[0].kappa, pols[0].cov)
    rep = verify_stationarity(bad, vals, game, arefs, case.lam, 1, 0)
    assert rep.max > 1e-4


def test_stationarity_deterministic_path(rng):
    case = LQCase(rng, n_players=2, n=4, T=3)
    game, arefs, pols, vals = solve_case(case, lam=[0.0, 0.0])
    rep = verify_stationarity(pols, vals, game, arefs, [0.0, 0.0], 0, 1)
    assert rep.cov_residual is None
    assert rep.mean_residual < 1e-6


def _gain_gap(a, b):
    return max(max(np.abs(p.K - q.K).max(), np.abs(p.kappa - q.kappa).max()) for p, q in zip(a, b))


def test_small_lambda_converges_to_deterministic_game(rng):
    case = LQCase(rng, n_players=2, n=4, T=5)
    _, _, base, _ = solve_case(case, lam=[0.0, 0.0])
    gaps = [_gain_gap(solve_case(case, lam=[s, s])[2], base) for s in (1e-2, 1e-4, 1e-6)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[-1] < 1e-5


def test_growing_reference_covariance_converges_to_max_entropy_game(rng):
    case = LQCase(rng, n_players=2, n=4, T=5)
    lam = np.array([1.0, 2.0])
    game, _, det, dvals = solve_case(case, lam=[0.0, 0.0])
    maxent_cov = []
    for i, s in enumerate(game.slices()):
        C = np.empty((case.T, case.m[i], case.m[i]))
        for t in range(case.T):
            Bi = game.B[t][:, s]
            C[t] = lam[i] * np.linalg.inv(game.R[i][t, s, s] + Bi.T @ dvals[i].Z[t + 1] @ Bi)
        maxent_cov.append(C)

    def rel_gap(pols):
        out = 0.0
        for p, q, C in zip(pols, det, maxent_cov):
            out = max(out, np.abs(p.K - q.K).max() / np.abs(q.K).max(),
                      np.abs(p.kappa - q.kappa).max() / np.abs(q.kappa).max(),
                      np.abs(p.cov - C).max() / np.abs(C).max())
        return out

    gaps = []
    for var in (1e2, 1e4, 1e6):
        refs = [GaussianRef.constant(np.zeros(m), var * np.eye(m), case.T) for m in case.m]
        gaps.append(rel_gap(solve_case(case, lam, refs)[2]))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[-1] < 1e-4


def test_large_lambda_sweep_approaches_reference(rng):
    case = LQCase(rng, n_players=2, n=4, T=4)
    x = rng.standard_normal(4)

    def gap(lam):
        pols = solve_case(case, lam=[lam, lam])[2]
        return max(np.abs(p.mean(x, t) - r.mean[t]).max() + np.abs(p.cov[t] - r.cov[t]).max()
                   for p, r in zip(pols, case.refs) for t in range(case.T))

    gaps = [gap(v) for v in (1e2, 1e6, 1e12)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_noise_covariance_does_not_change_policy(rng):
    case = LQCase(rng, n_players=2, n=4, T=4)
    noisy = [LinearGameStage(s.A, s.B, s.drift, np.eye(4)) for s in case.stages]
    p1, v1 = solve_klqg(case.stages, case.costs, case.refs, case.lam)
    p2, v2 = solve_klqg(noisy, case.costs, case.refs, case.lam)
    for a, b in zip(p1, p2):
        assert np.array_equal(a.K, b.K) and np.array_equal(a.kappa, b.kappa) and np.array_equal(a.cov, b.cov)
    for a, b in zip(v1, v2):
        assert np.array_equal(a.Z, b.Z) and np.array_equal(a.z, b.z)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_value_symmetry_and_spd_covariance(seed, N):
    case = LQCase(np.random.default_rng(seed), n_players=N, n=3, m=[1] * N, T=6)
    pols, vals = solve_klqg(case.stages, case.costs, case.refs, case.lam)
    assert vals[0].max_asymmetry < 1e-9
    for v in vals:
        assert np.array_equal(v.Z, np.swapaxes(v.Z, 1, 2))
        assert not v.Z[-1].any() and not v.z[-1].any()
    for p in pols:
        assert np.all(np.linalg.eigvalsh(p.cov) > 1e-12)


def test_nash_deviation_never_helps(rng):
    for _ in range(5):
        case = LQCase(rng, n_players=2, n=4, T=4)
        game, arefs, pols, _ = solve_case(case)
        x0, P0 = rng.standard_normal(4), np.eye(4)
        for i in range(2):
            base = expected_cost(pols, game, arefs, case.lam, i, x0, P0)
            for _ in range(10):
                p = pols[i]
                dev = type(p)(p.K + 1e-2 * rng.standard_normal(p.K.shape), p.kappa, p.cov)
                trial = list(pols)
                trial[i] = dev
                assert expected_cost(trial, game, arefs, case.lam, i, x0, P0) >= base - 1e-8


def test_expected_cost_matches_monte_carlo(rng):
    case = LQCase(rng, n_players=2, n=2, m=[1, 1], T=3)
    game, arefs, pols, _ = solve_case(case, lam=[0.0, 0.0])
    x0 = rng.standard_normal(2)
    # deterministic policies and state: the expectation is the plain rollout cost
    x, total = x0.copy(), 0.0
    for t in range(case.T):
        u = np.concatenate([p.mean(x, t) for p in pols])
        c = case.costs[0][t]
        total += c.evaluate(x, [u[:1], u[1:]])
        x = case.stages[t].step(x, u)
    assert expected_cost(pols, game, arefs, [0.0, 0.0], 0, x0, np.zeros((2, 2))) == pytest.approx(total, rel=1e-12)


def test_singular_system_is_reported():
    T, n = 2, 1
    game = AffineLQGame(
        np.ones((T, 1, 1)), np.ones((T, 1, 1)), np.zeros((T, 1)),
        [np.ones((T, 1, 1))], [np.zeros((T, 1))], [np.zeros((T, 1, 1))], [np.zeros((T, 1))], (1,),
    )
    with pytest.raises(SingularRiccatiError) as info:
        solve_affine(game, AffineRefs([None], [None], [None], [None]), [0.0])
    assert info.value.t == T - 1


def test_reference_type_is_checked(rng):
    case = LQCase(rng, n_players=1, n=2, T=2, feedback=True)
    with pytest.raises(TypeError):
        solve_klqg(case.stages, case.costs, case.refs, case.lam)
    with pytest.raises(ValueError):
        KLWeights((-1.0,))


def test_density_with_zero_cost_is_reference():
    for u in (-1.0, 0.2, 2.5):
        d = bellman_optimal_policy_density(lambda v: 0.0, [0.3], [[0.8]], 1.0, [u])
        ref = np.exp(GaussianRef.constant([0.3], [[0.8]], 1).log_density([u], None, 0))
        assert d == pytest.approx(ref, abs=1e-12)


def test_density_for_quadratic_cost_is_completed_square():
    a, b, lam, mu, s = 2.0, -0.4, 0.5, 0.3, 0.8
    prec = a / lam + 1 / s
    mean = (mu / s - b / lam) / prec
    for u in (-1.0, 0.0, 0.7, 2.0):
        d = bellman_optimal_policy_density(lambda v: 0.5 * a * v[0] ** 2 + b * v[0], [mu], [[s]], lam, [u])
        expected = np.sqrt(prec / (2 * np.pi)) * np.exp(-0.5 * prec * (u - mean) ** 2)
        assert d == pytest.approx(expected, abs=1e-10)


def test_density_with_huge_lambda_is_reference():
    ref = GaussianRef.constant([0.0, 0.5], [[1.0, 0.2], [0.2, 0.5]], 1)
    Q = lambda v: v @ v + np.sin(v[0])
    for u in ([0.0, 0.0], [0.5, 1.0]):
        d = bellman_optimal_policy_density(Q, ref.mean[0], ref.cov[0], 1e9, u)
        assert d == pytest.approx(np.exp(ref.log_density(u, None, 0)), abs=1e-8)


def test_density_rejects_high_dimension():
    with pytest.raises(UnsupportedError):
        bellman_optimal_policy_density(lambda v: 0.0, np.zeros(3), np.eye(3), 1.0, np.zeros(3))
