"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the terminal
before asserting, so ``pytest -v -s tests/test_acceptance.py`` or the plain
``pytest -v`` log doubles as the acceptance report.
"""
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid

from klgame.bench import loglog_slope, run_scaling
from klgame.cost import (
    ControlCost,
    LaneCenters,
    LateralAgreement,
    ProximityPenalty,
    QuadraticStageCost,
    RoadBoundary,
    StateTracking,
    TollboothCost,
)
from klgame.core import GameDims
from klgame.dynamics import KinematicBicycle, LinearGameStage, fd_jacobians
from klgame.ilq import Problem, solve
from klgame.klqg import (
    KLWeights,
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
from klgame.reference import FeedbackGaussianRef, GaussianRef, GMMRef, gaussian_kl
from klgame.scenario import mode_rollout_controls, solve_mm
from klgame.sim import ReferenceConfig, ScenarioSpec, build_problem, first_drop_step, run_batch

from conftest import LQCase, random_spd


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def solve_case(case, lam=None, refs=None):
    lam = case.lam if lam is None else np.asarray(lam, dtype=float)
    refs = case.refs if refs is None else refs
    game = stack_game(case.stages, case.costs)
    arefs = affine_refs(refs, game, KLWeights(lam))
    pols, vals = solve_affine(game, arefs, lam)
    return game, arefs, pols, vals


def test_exact_solver_residuals_and_stationarity(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_res = worst_stat = 0.0
    grid = [(N, n, T) for N in (1, 2, 3) for n in (2, 4, 8) for T in (3, 10)]
    for k in range(200):
        N, n, T = grid[k % len(grid)]
        m = [int(v) for v in rng.integers(1, max(2, n // 2) + 1, N)]
        case = LQCase(rng, n_players=N, n=n, m=m, T=T, lam=rng.uniform(0.1, 3.0, N), feedback=bool(k % 2))
        game, arefs, pols, vals = solve_case(case)
        worst_res = max(worst_res, riccati_residuals(pols, vals, game, arefs, case.lam).max())
        for t in range(T):
            for i in range(N):
                worst_stat = max(worst_stat, verify_stationarity(pols, vals, game, arefs, case.lam, t, i).max)
    elapsed = time.perf_counter() - t0
    ok = worst_res < 1e-8 and worst_stat < 1e-6 and elapsed < 60
    report(capsys, 1, ok, f"residual={worst_res:.2e} stationarity={worst_stat:.2e} time={elapsed:.1f}s")


def test_limit_regimes(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    case = LQCase(rng, n_players=2, n=4, T=5)
    x = rng.standard_normal(4)
    game, _, det, dvals = solve_case(case, lam=[0.0, 0.0])

    # growing reference covariance: deterministic gains plus lam * inv(R_ii + B_i' Z B_i)
    lam = np.array([1.0, 2.0])
    refs = [GaussianRef.constant(np.zeros(m), 1e6 * np.eye(m), case.T) for m in case.m]
    wide = solve_case(case, lam, refs)[2]
    maxent_gap = 0.0
    for i, (s, p, q) in enumerate(zip(game.slices(), wide, det)):
        for t in range(case.T):
            Bi = game.B[t][:, s]
            C = lam[i] * np.linalg.inv(game.R[i][t, s, s] + Bi.T @ dvals[i].Z[t + 1] @ Bi)
            maxent_gap = max(maxent_gap,
                             np.abs(p.K[t] - q.K[t]).max() / np.abs(q.K).max(),
                             np.abs(p.kappa[t] - q.kappa[t]).max() / np.abs(q.kappa).max(),
                             np.abs(p.cov[t] - C).max() / np.abs(C).max())

    # huge weight: the policy reproduces the reference moments
    strong = solve_case(case, lam=[1e12, 1e12])[2]
    ref_gap = max(max(np.abs(p.mean(x, t) - r.mean[t]).max() / max(1.0, np.abs(r.mean[t]).max()),
                      np.abs(p.cov[t] - r.cov[t]).max() / np.abs(r.cov[t]).max())
                  for p, r in zip(strong, case.refs) for t in range(case.T))

    # vanishing weight: the deterministic game
    small_gap = max(max(np.abs(p.K - q.K).max(), np.abs(p.kappa - q.kappa).max())
                    for p, q in zip(solve_case(case, lam=[1e-6, 1e-6])[2], det))

    # feedback reference with zero gain follows the open-loop path
    fb = [FeedbackGaussianRef(np.zeros((case.T, m, case.n)), -r.mean, r.cov) for m, r in zip(case.m, case.refs)]
    p_open, _ = solve_klqg(case.stages, case.costs, case.refs, case.lam)
    p_fb, _ = solve_klqg_feedback(case.stages, case.costs, fb, case.lam)
    fb_gap = max(max(np.abs(a.K - b.K).max(), np.abs(a.kappa - b.kappa).max(), np.abs(a.cov - b.cov).max())
                 for a, b in zip(p_open, p_fb))

    elapsed = time.perf_counter() - t0
    ok = maxent_gap < 1e-4 and ref_gap < 1e-4 and small_gap < 1e-5 and fb_gap < 1e-10 and elapsed < 30
    report(capsys, 2, ok, f"maxent={maxent_gap:.2e} reference={ref_gap:.2e} deterministic={small_gap:.2e} "
                          f"zero-gain={fb_gap:.2e} time={elapsed:.1f}s")


def test_closed_form_matches_quadrature_density(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        T = 2
        A, B, d = rng.uniform(0.5, 1.5), rng.uniform(-1.5, 1.5), rng.normal(0, 0.3)
        stages = [LinearGameStage([[A]], ([[B]],), [d]) for _ in range(T)]
        costs = [[QuadraticStageCost([[rng.uniform(0.1, 3)]], [rng.normal()], ([[rng.uniform(0.2, 3)]],),
                                     ([rng.normal()],)) for _ in range(T)]]
        ref = GaussianRef(rng.normal(size=(T, 1)), rng.uniform(0.1, 2.0, (T, 1, 1)))
        lam = float(rng.uniform(0.2, 5.0))
        pols, vals = solve_klqg(stages, costs, [ref], [lam])
        x = float(rng.normal())
        c, s = costs[0][0], stages[0]
        Z, z = vals[0].Z[1], vals[0].z[1]

        def q_fn(u):
            nxt = s.A @ [x] + s.B[0] @ np.atleast_1d(u) + s.drift
            return c.evaluate([x], [u]) + 0.5 * nxt @ Z @ nxt + z @ nxt

        mean = float(pols[0].mean(np.array([x]), 0)[0])
        var = float(pols[0].cov[0, 0, 0])
        sd = np.sqrt(var)
        grid = np.linspace(mean - 12 * sd, mean + 12 * sd, 241)
        closed = np.exp(-0.5 * (grid - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
        quad = np.array([bellman_optimal_policy_density(q_fn, ref.mean[0], ref.cov[0], lam, [u]) for u in grid])
        worst = max(worst, 0.5 * trapezoid(np.abs(closed - quad), grid))
    report(capsys, 3, worst < 1e-6, f"max total variation={worst:.2e}")


def test_unilateral_deviation_never_helps(capsys):
    rng = np.random.default_rng(4)
    worst = -np.inf
    for _ in range(50):
        case = LQCase(rng, n_players=2, n=4, T=4)
        game, arefs, pols, _ = solve_case(case)
        x0, P0 = rng.standard_normal(4), random_spd(rng, 4)
        base = [expected_cost(pols, game, arefs, case.lam, i, x0, P0) for i in range(2)]
        for _ in range(100):
            i = int(rng.integers(2))
            p = pols[i]
            trial = list(pols)
            trial[i] = type(p)(p.K + 1e-2 * rng.standard_normal(p.K.shape), p.kappa, p.cov)
            worst = max(worst, base[i] - expected_cost(trial, game, arefs, case.lam, i, x0, P0))
    report(capsys, 4, worst <= 1e-8, f"largest cost reduction={worst:.2e}")


@pytest.mark.slow
def test_tollbooth_benchmark(capsys):
    spec = ScenarioSpec()
    t0 = time.perf_counter()
    batches = {m: run_batch(spec, m, 100, seed=2024) for m in ("ilqgames", "maxent", "klgame")}
    elapsed = time.perf_counter() - t0
    cr = {m: b.stats["coordinated"]["mean"] for m, b in batches.items()}
    sr = {m: b.stats["safe"]["mean"] for m, b in batches.items()}
    cost = {m: b.stats["time_avg_cost"]["mean"] for m, b in batches.items()}
    plateau = float(np.median([t.stage_costs.sum(axis=1)[-1] for t in batches["ilqgames"].trials]))
    drop = {m: float(np.median([first_drop_step(t.stage_costs, plateau) for t in batches[m].trials]))
            for m in ("maxent", "klgame")}
    ok = (cr["klgame"] >= 0.95 and cr["ilqgames"] <= 0.05 and cr["ilqgames"] < cr["maxent"] < cr["klgame"]
          and sr["klgame"] == 1.0 and sr["ilqgames"] == 1.0
          and cost["klgame"] < cost["maxent"] < cost["ilqgames"] and elapsed < 900)
    detail = " ".join(f"{m}:CR={cr[m]:.2f},SR={sr[m]:.2f},cost={cost[m]:.1f}" for m in batches)
    report(capsys, 5, ok, f"{detail} median-drop-step={drop} time={elapsed:.0f}s")


def test_multimodal_degeneracy_and_branching(capsys):
    spec = ScenarioSpec(reference=ReferenceConfig(kind="gmm", target_lanes=(0, 1), weights=(0.5, 0.5)))
    problem, lam, gmm = build_problem(spec, "mm-klgame")
    x0 = spec.initial_state()
    mode = gmm.modes[1]
    us = mode_rollout_controls(problem, x0, mode, 0)
    mm = solve_mm(problem, x0, GMMRef([mode], [1.0]), lam)
    uni = solve(Problem(problem.dynamics, problem.costs, [mode, None], problem.horizon), x0, us, lam)
    got = mm.tree.branch_trajectory(mm.tree.branches()[0])
    gap = max(np.abs(got.states - uni.nominal.states).max(), np.abs(got.controls - uni.nominal.controls).max())

    two = solve_mm(problem, x0, gmm, lam)
    centers = np.array(spec.cost.lane_centers)
    lanes = sorted(int(np.argmin(np.abs(centers - two.tree.nodes[b[-1]].state[1]))) for b in two.tree.branches())
    ok = gap < 1e-8 and len(set(lanes)) == 2
    report(capsys, 6, ok, f"single-mode gap={gap:.2e} branch lanes={lanes}")


def test_scaling_exponents(capsys):
    kw = dict(repeats=5, iterations=5, halvings=3, state_per_player=32, horizon=10)
    hs, ns = [1, 2, 4, 8], [2, 3, 4, 6]
    by_h = run_scaling([2], hs, **kw)
    by_n = run_scaling(ns, [1], **kw)
    h_slope = loglog_slope(hs, [r.per_iteration for r in by_h])
    n_slope = loglog_slope(ns, [r.per_iteration for r in by_n])
    ok = 0.8 <= h_slope <= 1.2 and n_slope >= 2.0
    report(capsys, 7, ok, f"branch slope={h_slope:.2f} player slope={n_slope:.2f}")


def _fd_grad(f, z, h=1e-6):
    g = np.empty_like(z)
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        g[k] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def _rel(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(a).max())


def test_derivatives_and_kl_estimates(capsys):
    rng = np.random.default_rng(8)
    dyn = KinematicBicycle(2, dt=0.1)
    dims = GameDims(2, 8, (2, 2), 1)
    costs = {
        "lane": LaneCenters(1, (1.85, -1.85), 10.0, 0.5),
        "boundary": RoadBoundary(1, -3.1, 3.1, 100.0),
        "tracking": StateTracking(3, 10.0, 1.0),
        "control": ControlCost(dims, 1, (2.0, 20.0)),
        "proximity": ProximityPenalty((0, 1), (4, 5), 50.0, 2.0),
        "agreement": LateralAgreement(1, 5, 30.0, 3.0),
    }
    players = TollboothCost().build(dims)
    worst = {"jacobian": 0.0, "gradient": 0.0, "hessian": 0.0}
    for _ in range(100):
        x = rng.uniform(-1, 1, 8) * np.array([3, 4, 1, 12, 3, 4, 1, 12])
        x[4:6] = x[0:2] + rng.uniform(-2.5, 2.5, 2)
        u = rng.uniform(-2, 2, 4)
        A, B = dyn.jacobians(x, u)
        Af, Bf = fd_jacobians(dyn.step, x, u)
        worst["jacobian"] = max(worst["jacobian"], _rel(A, Af), _rel(B, Bf))
        for term in costs.values():
            gx, gu, Hxx, Huu = term.derivatives(x, u)
            worst["gradient"] = max(worst["gradient"],
                                    _rel(gx, _fd_grad(lambda v: term.evaluate(v, u), x)),
                                    _rel(gu, _fd_grad(lambda v: term.evaluate(x, v), u)))
            Fx = np.array([_fd_grad(lambda v: term.derivatives(v, u)[0][k], x) for k in range(8)])
            Fu = np.array([_fd_grad(lambda v: term.derivatives(x, v)[1][k], u) for k in range(4)])
            worst["hessian"] = max(worst["hessian"], _rel(Hxx, Fx), _rel(Huu, Fu))
        for pc in players:
            gx, gu, _, _ = pc.raw_derivatives(x, u)
            worst["gradient"] = max(worst["gradient"],
                                    _rel(gx[0], _fd_grad(lambda v: pc.evaluate(v, u), x)),
                                    _rel(gu[0], _fd_grad(lambda v: pc.evaluate(x, v), u)))

    kl_ok = True
    worst_z = 0.0
    for _ in range(10):
        pm, qm = rng.standard_normal(3), rng.standard_normal(3)
        pc_, qc = random_spd(rng, 3), random_spd(rng, 3)
        xs = rng.multivariate_normal(pm, pc_, size=1_000_000)
        diff = _logpdf(xs, pm, pc_) - _logpdf(xs, qm, qc)
        z = abs(diff.mean() - gaussian_kl(pm, pc_, qm, qc)) / (diff.std() / np.sqrt(diff.size))
        worst_z = max(worst_z, z)
        kl_ok &= z < 3
    ok = max(worst.values()) < 1e-4 and kl_ok
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, 8, ok, f"{detail} kl-max-z={worst_z:.2f}")


def _logpdf(x, m, c):
    L = np.linalg.cholesky(c)
    z = np.linalg.solve(L, (x - m).T)
    return -0.5 * (z * z).sum(axis=0) - np.log(np.diag(L)).sum() - 1.5 * np.log(2 * np.pi)
