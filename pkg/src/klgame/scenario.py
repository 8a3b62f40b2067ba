"""Multi-modal solver over a scenario tree.

One player's reference is a Gaussian mixture. The tree branches into one
chain per selected mode (at the root by default). Every non-root node stores
the control applied at its parent to reach it, so an edge ``parent -> child``
is one step of the game. Backward passes solve a one-step KL-LQ game per
edge using the child's value and the child's mode as the local reference;
the parent's own value uses the weight-averaged child values. The equilibrium
policy at a branching node is the mixture of its edge solutions.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DimensionError, KLGameError, NumericalError, Trajectory
from .ilq import LineSearchFailure, LQLConfig, Problem
from .klqg import AffineGaussianPolicy, AffineLQGame, AffineRefs, as_weights, solve_affine
from .reference import FeedbackGaussianRef, GaussianRef, GMMRef, gaussian_kl, laplace_mode


@dataclass
class ScenarioNode:
    index: int
    timestep: int
    mode: int
    parent: int | None
    children: list[int]
    weight: np.ndarray  # per player, among siblings
    state: np.ndarray
    control: np.ndarray | None  # applied at the parent to reach this node


@dataclass
class ScenarioTree:
    nodes: list[ScenarioNode]
    horizon: int
    player: int

    @property
    def root(self) -> ScenarioNode:
        return self.nodes[0]

    def leaves(self) -> list[int]:
        return [n.index for n in self.nodes if not n.children]

    def branches(self) -> list[list[int]]:
        """Root-to-leaf node index paths."""
        out = []
        for leaf in self.leaves():
            path = [leaf]
            while self.nodes[path[-1]].parent is not None:
                path.append(self.nodes[path[-1]].parent)
            out.append(path[::-1])
        return out

    def reach_probability(self, index: int, player: int) -> float:
        p = 1.0
        node = self.nodes[index]
        while node.parent is not None:
            p *= float(node.weight[player])
            node = self.nodes[node.parent]
        return p

    def branch_trajectory(self, branch: Sequence[int]) -> Trajectory:
        states = np.array([self.nodes[k].state for k in branch])
        controls = np.array([self.nodes[k].control for k in branch[1:]])
        return Trajectory(states, controls)

    def validate(self) -> None:
        for node in self.nodes:
            if node.children:
                w = np.sum([self.nodes[c].weight for c in node.children], axis=0)
                if np.any(np.abs(w - 1.0) > 1e-9):
                    raise ValueError(f"children weights of node {node.index} do not sum to 1")
            elif node.timestep != self.horizon:
                raise ValueError(f"leaf {node.index} at timestep {node.timestep}, expected {self.horizon}")

    def copy(self) -> "ScenarioTree":
        return copy.deepcopy(self)

    def by_time(self) -> list[list[int]]:
        levels: list[list[int]] = [[] for _ in range(self.horizon + 1)]
        for node in self.nodes:
            levels[node.timestep].append(node.index)
        return levels


@dataclass
class GMMComponent:
    """One mixture component of a node policy: the edge solution toward
    ``child``. Player ``i`` plays ``N(control_i - K_i (x - origin) - kappa_i, cov_i)``."""

    child: int
    weight: np.ndarray
    origin: np.ndarray
    control: np.ndarray
    policies: list[AffineGaussianPolicy]


@dataclass
class GMMPolicy:
    components: dict[int, list[GMMComponent]]

    def at(self, node: int) -> list[GMMComponent]:
        return self.components[node]


def select_modes(weights: np.ndarray, branching: int, modes: Sequence[int] | None = None) -> tuple[list[int], np.ndarray]:
    """Top-``branching`` modes by weight (ties to the lower index), renormalized."""
    weights = np.asarray(weights, dtype=float)
    if modes is None:
        if not 1 <= branching <= weights.size:
            raise ValueError(f"branching must be in [1, {weights.size}], got {branching}")
        order = sorted(range(weights.size), key=lambda k: (-weights[k], k))
        modes = sorted(order[:branching], key=lambda k: (-weights[k], k))
    else:
        modes = [int(k) for k in modes]
        if any(not 0 <= k < weights.size for k in modes):
            raise ValueError("mode index out of range")
    w = weights[modes]
    if w.sum() <= 0:
        raise ValueError("selected modes have zero total weight")
    return list(modes), w / w.sum()


def mode_rollout_controls(problem: Problem, x0, mode, player: int, base_controls=None) -> np.ndarray:
    """Controls that roll ``mode``'s mean for ``player`` and ``base_controls``
    (default zero) for everyone else."""
    dims = problem.dims
    T = dims.horizon
    us = np.zeros((T, dims.total_control_dim)) if base_controls is None else np.array(base_controls, dtype=float)
    sl = dims.control_slice(player)
    x = np.asarray(x0, dtype=float)
    for t in range(T):
        us[t, sl] = mode.mean_at(x, t) if hasattr(mode, "mean_at") else us[t, sl]
        x = problem.dynamics.step(x, us[t])
    return us


def build_tree(x0, ref: GMMRef, branching: int, horizon: int, branch_schedule: Sequence[int] = (0,),
               problem: Problem | None = None, player: int = 0, initial_controls=None,
               modes: Sequence[int] | None = None, n_players: int | None = None) -> ScenarioTree:
    """Construct the tree and its initial nominals.

    ``initial_controls`` is one ``(T, M)`` array shared by every branch, or a
    list with one array per branch; when omitted each branch rolls out its
    mode's mean for ``player`` and zero for the others. Without ``problem``
    (structure only) all nominal states equal ``x0`` and controls are zero.
    """
    if ref.n_modes < branching:
        raise ValueError(f"branching {branching} exceeds the {ref.n_modes} mixture modes")
    if branching < 1:
        raise ValueError("branching must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    N = problem.dims.n_players if problem is not None else (n_players or player + 1)
    M = problem.dims.total_control_dim if problem is not None else 0
    schedule = set(int(t) for t in branch_schedule)
    root_mode = select_modes(ref.weights_at(0), 1)[0][0]
    nodes = [ScenarioNode(0, 0, root_mode, None, [], np.ones(N), x0.copy(), None)]
    frontier = [0]
    for t in range(horizon):
        new = []
        for p in frontier:
            if t in schedule:
                chosen, w = select_modes(ref.weights_at(t), branching, modes)
            else:
                chosen, w = [nodes[p].mode], np.ones(1)
            for k, wk in zip(chosen, w):
                idx = len(nodes)
                nodes.append(ScenarioNode(idx, t + 1, k, p, [], np.full(N, wk), x0.copy(), np.zeros(M)))
                nodes[p].children.append(idx)
                new.append(idx)
        frontier = new
    tree = ScenarioTree(nodes, horizon, player)
    if problem is not None:
        branches = tree.branches()
        if initial_controls is not None and not isinstance(initial_controls, (list, tuple)):
            initial_controls = [initial_controls] * len(branches)
        for b, path in enumerate(branches):
            if initial_controls is None:
                leaf_mode = ref.modes[nodes[path[-1]].mode]
                us = mode_rollout_controls(problem, x0, leaf_mode, player)
            else:
                us = np.asarray(initial_controls[b], dtype=float)
            x = x0
            for t, k in enumerate(path[1:]):
                if b > 0 and any(k in other for other in branches[:b]):
                    x = nodes[k].state
                    continue
                nodes[k].control = us[t].copy()
                x = problem.dynamics.step(x, us[t])
                if not np.all(np.isfinite(x)):
                    raise NumericalError(f"initial rollout of branch {b} is not finite")
                nodes[k].state = x
    tree.validate()
    return tree


def _local_ref(ref, x, u_i, t):
    """Reference as ``(Kref, kref, cov)`` in deviation coordinates at ``(x, u_i)``."""
    if isinstance(ref, FeedbackGaussianRef):
        K = ref.K[t]
        return K, ref.kappa[t] + K @ x + u_i, ref.cov[t]
    if isinstance(ref, GaussianRef):
        return np.zeros((u_i.size, x.size)), u_i - ref.mean[t], ref.cov[t]
    mode, cov = laplace_mode(lambda u: ref.log_density(u, x, t), u_i, t=t)
    return np.zeros((u_i.size, x.size)), u_i - mode, cov


def _edge_refs(problem: Problem, gmm: GMMRef, tree: ScenarioTree, lam, child: ScenarioNode, x, u):
    dims = problem.dims
    t = child.timestep - 1
    out = []
    for i in range(dims.n_players):
        ref = gmm.modes[child.mode] if i == tree.player else problem.references[i]
        if lam[i] == 0 or ref is None:
            out.append(None)
            continue
        if isinstance(ref, GMMRef) and ref.n_modes == 1:
            ref = ref.modes[0]
        out.append(_local_ref(ref, x, u[dims.control_slice(i)], t))
    return out


@dataclass
class TreeBackward:
    tree: ScenarioTree
    edge_policies: dict[int, list[AffineGaussianPolicy]]
    edge_refs: dict[int, list]
    values: dict[int, tuple[np.ndarray, np.ndarray]]
    policy: GMMPolicy
    gmm: GMMRef


def _edge_arrays(problem: Problem, tree: ScenarioTree):
    edges = [n.index for n in tree.nodes if n.parent is not None]
    xs = np.array([tree.nodes[tree.nodes[c].parent].state for c in edges])
    us = np.array([tree.nodes[c].control for c in edges])
    return edges, xs, us


def mm_backward_pass(tree: ScenarioTree, problem: Problem, gmm: GMMRef, lam) -> TreeBackward:
    """Per-edge KL-LQ solves from the leaves to the root."""
    lam = as_weights(lam)
    dims = problem.dims
    N, n, M = dims.n_players, dims.state_dim, dims.total_control_dim
    edges, xs, us = _edge_arrays(problem, tree)
    row = {c: k for k, c in enumerate(edges)}
    A, B = problem.dynamics.jacobians_batch(xs, us)
    quad = [c.quadraticize_batch(xs, us) for c in problem.costs]
    Rb = []
    for i in range(N):
        R = np.zeros((len(edges), M, M))
        for j, Rij in enumerate(quad[i][2]):
            sl = dims.control_slice(j)
            R[:, sl, sl] = Rij
        Rb.append(R)
    rb = [np.concatenate(quad[i][3], axis=1) for i in range(N)]

    def edge_game(c: int, next_state):
        k = row[c]
        d = problem.dynamics.step(xs[k], us[k]) - next_state
        game = AffineLQGame(
            A[k:k + 1], B[k:k + 1], d[None],
            [quad[i][0][k:k + 1] for i in range(N)], [quad[i][1][k:k + 1] for i in range(N)],
            [Rb[i][k:k + 1] for i in range(N)], [rb[i][k:k + 1] for i in range(N)],
            dims.control_dims,
        )
        return game

    def affine(parts):
        Kr, kr, Sinv, cov = [], [], [], []
        for p in parts:
            if p is None:
                Kr.append(None), kr.append(None), Sinv.append(None), cov.append(None)
            else:
                Kr.append(p[0][None]), kr.append(p[1][None]), cov.append(p[2][None])
                Sinv.append(np.linalg.inv(p[2])[None])
        return AffineRefs(Kr, kr, Sinv, cov)

    leaf_value = (np.zeros((N, n, n)), np.zeros((N, n)))
    values: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    edge_policies: dict[int, list[AffineGaussianPolicy]] = {}
    edge_refs: dict[int, list] = {}
    for level in reversed(tree.by_time()):
        for idx in level:
            node = tree.nodes[idx]
            if not node.children:
                if problem.terminal_cost:
                    Zt, zt = [], []
                    for c in problem.costs:
                        Qi, qi, _, _ = c.quadraticize_batch(node.state[None], np.zeros((1, M)))
                        Zt.append(Qi[0])
                        zt.append(qi[0])
                    values[idx] = (np.array(Zt), np.array(zt))
                else:
                    values[idx] = leaf_value
                continue
            for c in node.children:
                child = tree.nodes[c]
                parts = _edge_refs(problem, gmm, tree, lam, child, node.state, child.control)
                edge_refs[c] = parts
                try:
                    pols, vals = solve_affine(edge_game(c, child.state), affine(parts), lam, values[c])
                except KLGameError as exc:
                    exc.node = c
                    raise
                edge_policies[c] = pols
                if len(node.children) == 1:
                    values[idx] = (np.array([v.Z[0] for v in vals]), np.array([v.z[0] for v in vals]))
            if len(node.children) > 1:
                values[idx] = _branch_value(tree, problem, node, values, edge_game, affine,
                                            lambda c: edge_refs[c], lam)
    comps: dict[int, list[GMMComponent]] = {}
    for node in tree.nodes:
        if node.children:
            comps[node.index] = [
                GMMComponent(c, tree.nodes[c].weight.copy(), node.state.copy(), tree.nodes[c].control.copy(),
                             edge_policies[c])
                for c in node.children
            ]
    return TreeBackward(tree, edge_policies, edge_refs, values, GMMPolicy(comps), gmm)


def _branch_value(tree, problem, node, values, edge_game, affine, refs_of, lam):
    """Value at a branching node from the weight-averaged successor value.

    Children values are re-centred on the highest-weight child's state;
    that child's edge also supplies the linearization and the reference.
    """
    N = problem.dims.n_players
    w_ref = np.array([tree.nodes[c].weight[tree.player] for c in node.children])
    star = node.children[int(np.argmax(w_ref))]
    x_star = tree.nodes[star].state
    n = x_star.size
    Z = np.zeros((N, n, n))
    z = np.zeros((N, n))
    for c in node.children:
        w = tree.nodes[c].weight
        Zc, zc = values[c]
        shift = x_star - tree.nodes[c].state
        for i in range(N):
            Z[i] += w[i] * Zc[i]
            z[i] += w[i] * (zc[i] + Zc[i] @ shift)
    _, vals = solve_affine(edge_game(star, x_star), affine(refs_of(star)), lam, (Z, z))
    return np.array([v.Z[0] for v in vals]), np.array([v.z[0] for v in vals])


def mm_forward_pass(tree: ScenarioTree, backward: TreeBackward, step: float, dynamics) -> ScenarioTree:
    """Roll every edge's scaled mean deviation policy down the tree."""
    if not 0 < step <= 1:
        raise ValueError("step must be in (0, 1]")
    new = tree.copy()
    for level in tree.by_time()[1:]:
        for c in level:
            old = tree.nodes[c]
            p = old.parent
            dx = new.nodes[p].state - tree.nodes[p].state
            pols = backward.edge_policies[c]
            K = np.concatenate([q.K[0] for q in pols], axis=0)
            kap = np.concatenate([q.kappa[0] for q in pols])
            u = old.control - step * (K @ dx + kap)
            x = dynamics.step(new.nodes[p].state, u)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite state at node {c}")
            new.nodes[c].control = u
            new.nodes[c].state = x
    return new


def tree_social_cost(tree: ScenarioTree, problem: Problem, lam, backward: TreeBackward,
                     include_kl: bool = True) -> float:
    """Branch-weighted social cost: each edge's stage costs and KL terms
    weighted by the probability of reaching it."""
    lam = as_weights(lam)
    dims = problem.dims
    edges, xs, us = _edge_arrays(problem, tree)
    stage = sum(c.value(xs, us) for c in problem.costs)
    total = 0.0
    for k, c in enumerate(edges):
        child = tree.nodes[c]
        cost = float(stage[k])
        if include_kl:
            parts = _edge_refs(problem, backward.gmm, tree, lam, child, xs[k], us[k])
            for i, part in enumerate(parts):
                if part is not None:
                    # zero deviation at the nominal itself, so the mean gap is the offset
                    C = part[2]
                    cost += lam[i] * gaussian_kl(np.zeros(C.shape[0]), C, -part[1], C)
        total += tree.reach_probability(c, tree.player) * cost
    if problem.terminal_cost:
        M = dims.total_control_dim
        for leaf in tree.leaves():
            x = tree.nodes[leaf].state[None]
            v = sum(float(c.value(x, np.zeros((1, M)))[0]) for c in problem.costs)
            total += tree.reach_probability(leaf, tree.player) * v
    return total


@dataclass
class MMSolution:
    policy: GMMPolicy
    tree: ScenarioTree
    iterations_used: int
    converged: bool
    social_cost_history: list[float]
    backward: TreeBackward = field(repr=False, default=None)
    last_branch: int = 0
    backward_passes: int = 0

    def __iter__(self):
        return iter((self.policy, self.tree))

    def root_components(self) -> list[GMMComponent]:
        return self.policy.at(0)

    def root_mean_action(self, x) -> np.ndarray:
        """Mean control of the highest-weight root component."""
        comps = self.root_components()
        w = [c.weight[self.tree.player] for c in comps]
        k = int(np.argmax(w))
        self.last_branch = k
        return _component_mean(comps[k], x)

    def sample_root_action(self, x, rng) -> np.ndarray:
        u, chosen = sample_root_action(self.root_components(), x, rng, return_components=True)
        self.last_branch = chosen[self.tree.player]
        return u

    def executed_controls(self) -> np.ndarray:
        """Nominal controls of the branch that was last executed."""
        return self.branch_controls(self.last_branch)

    def branch_controls(self, k: int) -> np.ndarray:
        return self.tree.branch_trajectory(self.tree.branches()[k]).controls

    def all_branch_controls(self) -> list[np.ndarray]:
        return [self.tree.branch_trajectory(b).controls for b in self.tree.branches()]


def _component_mean(comp: GMMComponent, x) -> np.ndarray:
    dx = np.asarray(x, dtype=float) - comp.origin
    du = np.concatenate([-p.K[0] @ dx - p.kappa[0] for p in comp.policies])
    return comp.control + du


def sample_root_action(components: Sequence[GMMComponent], x, rng: np.random.Generator,
                       return_components: bool = False):
    """Each player draws a component by its weights, then a control from it."""
    N = len(components[0].policies)
    parts = []
    chosen = []
    off = 0
    for i in range(N):
        w = np.array([c.weight[i] for c in components], dtype=float)
        k = int(rng.choice(len(components), p=w / w.sum())) if len(components) > 1 else 0
        chosen.append(k)
        comp = components[k]
        p = comp.policies[i]
        m = p.K.shape[1]
        mean = comp.control[off:off + m] - p.K[0] @ (np.asarray(x, dtype=float) - comp.origin) - p.kappa[0]
        if p.deterministic or not np.any(p.cov[0]):
            parts.append(mean)
        else:
            parts.append(rng.multivariate_normal(mean, p.cov[0]))
        off += m
    u = np.concatenate(parts)
    return (u, chosen) if return_components else u


def solve_mm(problem: Problem, x0, ref: GMMRef, lam, config: LQLConfig | None = None, player: int = 0,
             branching: int | None = None, branch_schedule: Sequence[int] = (0,), initial_controls=None,
             modes: Sequence[int] | None = None) -> MMSolution:
    """Iterate tree backward passes and line-searched tree forward passes."""
    config = config or LQLConfig()
    lam = as_weights(lam)
    branching = ref.n_modes if branching is None else branching
    tree = build_tree(x0, ref, branching, problem.horizon, branch_schedule, problem, player,
                      initial_controls, modes)
    history: list[float] = []
    converged = False
    it = 0
    bw = None
    for it in range(1, config.max_iterations + 1):
        bw = mm_backward_pass(tree, problem, ref, lam)
        cur = tree_social_cost(tree, problem, lam, bw, config.include_kl_in_social_cost)
        if not history:
            history.append(cur)
        eps = config.initial_step
        accepted = None
        any_finite = False
        for _ in range(config.linesearch_max_halvings + 1):
            try:
                cand = mm_forward_pass(tree, bw, eps, problem.dynamics)
                c = tree_social_cost(cand, problem, lam, bw, config.include_kl_in_social_cost)
            except NumericalError:
                eps *= 0.5
                continue
            if np.isfinite(c):
                any_finite = True
                if c < cur:
                    accepted = (cand, c)
                    break
            eps *= 0.5
        if accepted is None:
            if not any_finite:
                raise LineSearchFailure(f"no finite tree candidate at iteration {it}")
            if config.fixed_iterations:
                continue
            converged = True
            break
        cand, c = accepted
        change = max(float(np.max(np.abs(a.state - b.state))) for a, b in zip(cand.nodes, tree.nodes))
        tree = cand
        history.append(c)
        if config.fixed_iterations:
            continue
        if change < config.trajectory_tolerance or abs(cur - c) <= config.cost_tolerance * max(1.0, abs(cur)):
            converged = True
            break
    passes = it
    if not config.fixed_iterations:
        bw = mm_backward_pass(tree, problem, ref, lam)
        passes += 1
    return MMSolution(bw.policy, tree, it, converged, history, bw, backward_passes=passes)
