"""The measure-valued MDP on arrays of per-cluster count vectors.

States are exact integer histograms (one count vector per cluster), actions are
integer state-action contingency tables with the state histogram as marginal.
The lifted transition kernel is computed without enumerating joint outcomes:
agents sharing an (x, u) cell transition iid, so each cell contributes a
multinomial count distribution and the cluster's next histogram is their
convolution. Count tuples are the keys everywhere; floating-point measures are
derived views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .combinat import (
    compositions,
    convolve_counts,
    multinomial_pmf,
    num_compositions,
    product_counts,
)
from .model import (
    BudgetExceededError,
    MeasureArray,
    PopulationLayout,
    TeamSpec,
    cost_matrix,
    empirical_counts,
    kernel_tensor,
)
from .exact import (
    DEFAULT_BUDGET,
    ExactSolution,
    _vi_iteration_cap,
    solve_exact_finite,
    solve_exact_infinite,
    vi_threshold,
)


@dataclass(frozen=True)
class EmpiricalState:
    """Per-cluster integer state histograms; hashable and exact."""

    counts: tuple[tuple[int, ...], ...]

    @property
    def cluster_sizes(self) -> tuple[int, ...]:
        return tuple(sum(c) for c in self.counts)

    def measure(self) -> MeasureArray:
        return MeasureArray(tuple(
            np.asarray(c, dtype=float) / max(sum(c), 1) for c in self.counts))

    def key(self) -> str:
        return ";".join(f"{j}:({','.join(map(str, c))})" for j, c in enumerate(self.counts))


@dataclass(frozen=True)
class EmpiricalAction:
    """Per-cluster integer (state, action) contingency tables."""

    joint_counts: tuple[tuple[tuple[int, ...], ...], ...]   # [j][x][u]

    def state_counts(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(sum(row[u] for u in range(len(row))) for row in table)
                     for table in self.joint_counts)

    def key(self) -> str:
        return ";".join(
            f"{j}:({'|'.join(','.join(map(str, row)) for row in table)})"
            for j, table in enumerate(self.joint_counts))


def state_from_joint(spec: TeamSpec, layout: PopulationLayout, x_joint) -> EmpiricalState:
    return EmpiricalState(empirical_counts(spec, layout, x_joint))


def action_from_joint(spec: TeamSpec, layout: PopulationLayout, x_joint, u_joint) -> EmpiricalAction:
    """Joint state-action empirical counts of an ensemble configuration."""
    x = np.asarray(x_joint, dtype=int)
    u = np.asarray(u_joint, dtype=int)
    tables = []
    for j in range(layout.num_clusters):
        sl = layout.cluster_slice(j)
        table = np.zeros((spec.state_sizes[j], spec.action_sizes[j]), dtype=int)
        np.add.at(table, (x[sl], u[sl]), 1)
        tables.append(tuple(tuple(int(v) for v in row) for row in table))
    return EmpiricalAction(tuple(tables))


def enumerate_states(spec: TeamSpec, layout: PopulationLayout,
                     budget: int = DEFAULT_BUDGET) -> tuple[EmpiricalState, ...]:
    """All per-cluster histograms: compositions of N_j over the state support."""
    total = 1
    for j in range(spec.M):
        total *= num_compositions(layout.sizes[j], spec.state_sizes[j])
        if total > budget:
            raise BudgetExceededError(f"count-state enumeration exceeds budget of {budget}")
    per_cluster = [compositions(layout.sizes[j], spec.state_sizes[j]) for j in range(spec.M)]
    out = [EmpiricalState(())]
    for comps in per_cluster:
        out = [EmpiricalState(st.counts + (c,)) for st in out for c in comps]
    return tuple(out)


def enumerate_actions(spec: TeamSpec, mu: EmpiricalState,
                      budget: int = DEFAULT_BUDGET) -> tuple[EmpiricalAction, ...]:
    """All integer contingency tables whose state marginals equal ``mu``."""
    total = 1
    for j, counts in enumerate(mu.counts):
        for c in counts:
            total *= num_compositions(c, spec.action_sizes[j])
            if total > budget:
                raise BudgetExceededError(f"action enumeration exceeds budget of {budget}")
    tables_per_cluster = []
    for j, counts in enumerate(mu.counts):
        rows_options = [compositions(c, spec.action_sizes[j]) for c in counts]
        tables = [()]
        for options in rows_options:
            tables = [t + (row,) for t in tables for row in options]
        tables_per_cluster.append(tables)
    out = [EmpiricalAction(())]
    for tables in tables_per_cluster:
        out = [EmpiricalAction(a.joint_counts + (t,)) for a in out for t in tables]
    return tuple(out)


def _check_compatible(mu: EmpiricalState, theta: EmpiricalAction):
    if theta.state_counts() != mu.counts:
        raise ValueError("action marginals disagree with the state histogram")


def lifted_cost(spec: TeamSpec, mu: EmpiricalState, theta: EmpiricalAction) -> float:
    """Stage cost in measure coordinates; equals the ensemble cost of any representative."""
    _check_compatible(mu, theta)
    measure = mu.measure()
    sizes = mu.cluster_sizes
    total = 0.0
    for j, table in enumerate(theta.joint_counts):
        cm = cost_matrix(spec, j, measure)
        tab = np.asarray(table, dtype=float)
        total += float((cm * tab).sum()) / sizes[j]
    return total


def representative(mu: EmpiricalState, theta: EmpiricalAction) -> tuple[np.ndarray, np.ndarray]:
    """Canonical ensemble configuration: states ascending within each cluster,
    actions assigned by lexicographic unpacking of the contingency tables."""
    _check_compatible(mu, theta)
    xs, us = [], []
    for table in theta.joint_counts:
        for x, row in enumerate(table):
            for u, k in enumerate(row):
                xs.extend([x] * k)
                us.extend([u] * k)
    return np.asarray(xs, dtype=int), np.asarray(us, dtype=int)


def _cluster_transition(spec: TeamSpec, j: int, tensor: np.ndarray, table,
                        cache: dict | None = None) -> dict:
    """Distribution of cluster j's next histogram given its contingency table.

    Convolution over (x, u) cells of multinomial count distributions with the
    cell's transition row.
    """
    n = spec.state_sizes[j]
    dist = {(0,) * n: 1.0}
    for x, row in enumerate(table):
        for u, k in enumerate(row):
            if not k:
                continue
            key = (j, x, u, k)
            cell = cache.get(key) if cache is not None else None
            if cell is None:
                cell = multinomial_pmf(k, tensor[x, u])
                if cache is not None:
                    cache[key] = cell
            dist = convolve_counts(dist, cell)
    return dist


def lifted_kernel(spec: TeamSpec, mu: EmpiricalState, theta: EmpiricalAction) -> dict:
    """Transition law over next count states, as {EmpiricalState: probability}.

    Independent of which representative realizes (mu, theta): the per-cell
    multinomial convolution only sees the counts.
    """
    _check_compatible(mu, theta)
    measure = mu.measure()
    per_cluster = []
    for j, table in enumerate(theta.joint_counts):
        tensor = kernel_tensor(spec, j, measure)
        per_cluster.append(_cluster_transition(spec, j, tensor, table))
    joint = product_counts(per_cluster)
    return {EmpiricalState(key): p for key, p in joint.items()}


@dataclass(frozen=True)
class EmpiricalSolution:
    """Value tables and optimal contingency-table selectors on the count-state space."""

    states: tuple[EmpiricalState, ...]
    values: tuple[np.ndarray, ...]
    selectors: tuple[tuple[EmpiricalAction, ...], ...]
    stationary: bool
    iterations: int = 0
    sup_deltas: tuple[float, ...] = ()

    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.states)}

    def value(self, t: int = 0) -> np.ndarray:
        return self.values[0] if self.stationary else self.values[t]

    def selector(self, t: int = 0) -> tuple[EmpiricalAction, ...]:
        return self.selectors[0] if self.stationary else self.selectors[t]


class _CountDP:
    """Flattened (state, action, transition) arrays for fast Bellman sweeps."""

    def __init__(self, spec: TeamSpec, layout: PopulationLayout, budget: int):
        self.spec = spec
        self.beta = spec.beta
        self.states = enumerate_states(spec, layout, budget)
        index = {s: i for i, s in enumerate(self.states)}
        self.index = index

        costs = []
        action_starts = []
        trans_idx = []
        trans_p = []
        trans_starts = []
        self.actions: list[tuple[EmpiricalAction, ...]] = []
        pos = 0
        cell_cache: dict = {}
        for s in self.states:
            acts = enumerate_actions(spec, s, budget)
            self.actions.append(acts)
            action_starts.append(pos)
            measure = s.measure()
            tensors = [kernel_tensor(spec, j, measure) for j in range(spec.M)]
            cost_mats = [cost_matrix(spec, j, measure) for j in range(spec.M)]
            sizes = s.cluster_sizes
            # per-cell multinomials depend on the state's measure; scope the cache per state
            state_cache: dict = {}
            for theta in acts:
                c = 0.0
                per_cluster = []
                for j, table in enumerate(theta.joint_counts):
                    tab = np.asarray(table, dtype=float)
                    c += float((cost_mats[j] * tab).sum()) / sizes[j]
                    per_cluster.append(
                        _cluster_transition(spec, j, tensors[j], table, state_cache))
                costs.append(c)
                joint = product_counts(per_cluster)
                trans_starts.append(len(trans_idx))
                for key, p in joint.items():
                    trans_idx.append(index[EmpiricalState(key)])
                    trans_p.append(p)
                pos += 1
        cell_cache.clear()
        self.costs = np.asarray(costs)
        self.action_starts = np.asarray(action_starts, dtype=np.int64)
        self.trans_idx = np.asarray(trans_idx, dtype=np.int64)
        self.trans_p = np.asarray(trans_p)
        self.trans_starts = np.asarray(trans_starts, dtype=np.int64)
        self.num_pairs = pos

    def q_values(self, values: np.ndarray | None) -> np.ndarray:
        if values is None:
            return self.costs
        w = self.trans_p * values[self.trans_idx]
        cont = np.add.reduceat(w, self.trans_starts)
        return self.costs + self.beta * cont

    def sweep(self, values: np.ndarray | None):
        q = self.q_values(values)
        new = np.minimum.reduceat(q, self.action_starts)
        return new, q

    def greedy(self, q: np.ndarray) -> tuple[EmpiricalAction, ...]:
        out = []
        bounds = list(self.action_starts) + [self.num_pairs]
        for i in range(len(self.states)):
            seg = q[bounds[i]:bounds[i + 1]]
            out.append(self.actions[i][int(np.argmin(seg))])
        return tuple(out)


def solve_dp(spec: TeamSpec, layout: PopulationLayout, T: int | None = None,
             tol: float = 1e-10, budget: int = DEFAULT_BUDGET) -> EmpiricalSolution:
    """Exact backward recursion (finite T) or value iteration to ``tol`` on count states."""
    dp = _CountDP(spec, layout, budget)
    if T is not None:
        values, selectors = [], []
        nxt = None
        for _ in range(T):
            nxt, q = dp.sweep(nxt)
            values.append(nxt)
            selectors.append(dp.greedy(q))
        values.reverse()
        selectors.reverse()
        return EmpiricalSolution(dp.states, tuple(values), tuple(selectors), stationary=False)
    threshold = vi_threshold(spec.beta, tol)
    cap = _vi_iteration_cap(spec.beta, max(spec.cost_bound(), tol) / (1.0 - spec.beta), threshold)
    values = np.zeros(len(dp.states))
    deltas = []
    q = dp.costs
    for _ in range(cap):
        new, q = dp.sweep(values)
        delta = float(np.max(np.abs(new - values)))
        deltas.append(delta)
        values = new
        if delta <= threshold:
            break
    else:
        raise RuntimeError("count-state value iteration failed to converge within its cap")
    return EmpiricalSolution(dp.states, (values,), (dp.greedy(q),), stationary=True,
                             iterations=len(deltas), sup_deltas=tuple(deltas))


@dataclass(frozen=True)
class EquivalenceReport:
    """Max gap between the joint-state values and the count-state values."""

    max_discrepancy: float
    tolerance: float
    horizon: int | None
    passed: bool


def check_value_equivalence(spec: TeamSpec, layout: PopulationLayout, T: int | None = None,
                            tol: float = 1e-8, budget: int = DEFAULT_BUDGET) -> EquivalenceReport:
    """Compare the joint DP against the count-state DP on every joint state.

    Finite horizons must agree to 1e-9 (both recursions are exact); infinite
    horizons to 2*tol (each side is solved to sup-norm error tol).
    """
    from .exact import JointSpace  # local to avoid cycle at import time

    if T is not None:
        exact_sol = solve_exact_finite(spec, layout, T, budget)
        emp_sol = solve_dp(spec, layout, T=T, budget=budget)
        tolerance = 1e-9
    else:
        exact_sol = solve_exact_infinite(spec, layout, tol, budget)
        emp_sol = solve_dp(spec, layout, tol=tol, budget=budget)
        tolerance = 2.0 * tol
    space = JointSpace(spec, layout)
    digits = space.state_digits()
    index = emp_sol.index()
    mapping = np.asarray([
        index[state_from_joint(spec, layout, digits[s])] for s in range(space.num_states)
    ])
    gap = 0.0
    for t in range(len(exact_sol.values)):
        gap = max(gap, float(np.max(np.abs(
            exact_sol.values[t] - emp_sol.values[t][mapping]))))
    return EquivalenceReport(gap, tolerance, T, gap <= tolerance)
