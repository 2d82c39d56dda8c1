"""Induction of decentralized cluster-symmetric policies from mean-field solutions,
their truncation onto finite populations, and the coupled representative-agent team.

The induced policy is one decision kernel per cluster per step, read off the
greedy mean-field action along the deterministic flow (nearest-grid-point
lookup). Every agent of a cluster carries literally the same kernel object.
Truncated agents keep consuming the mean-field flow, not the realized empirical
measure; a diagnostic variant with empirical feedback exists for comparison
experiments only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exact import (
    CentralizedMarkovPolicy,
    _JointDP,
    _batch_costs,
    _batch_kernels,
    _draw,
    rollout_seeds,
    value_at_initial,
)
from .meanfield import (
    MeanFieldSolution,
    effective_horizon,
    flow,
    mf_stage_cost,
    rollout_flow,
)
from .model import MeasureArray, PopulationLayout, TeamSpec, cost_matrix, kernel_tensor


@dataclass(frozen=True, eq=False)
class DecentralizedPolicy:
    """Per-step, per-cluster decision kernels paired with the flow they were read from."""

    kernels: tuple[tuple[np.ndarray, ...], ...]   # [t][j] -> (n_j, m_j)
    flow: tuple[MeasureArray, ...]                # length horizon + 1
    stationary_tail: bool

    @property
    def horizon(self) -> int:
        return len(self.kernels)

    def kernel(self, t: int, j: int) -> np.ndarray:
        if t >= self.horizon:
            if not self.stationary_tail:
                raise IndexError("finite-horizon policy queried past its schedule")
            t = self.horizon - 1
        return self.kernels[t][j]

    def measure(self, t: int) -> MeasureArray:
        return self.flow[min(t, len(self.flow) - 1)]


def induce_policy(solution: MeanFieldSolution, spec: TeamSpec,
                  nu0: MeasureArray | None = None, T: int | None = None,
                  tail_eps: float = 1e-12) -> DecentralizedPolicy:
    """Roll the flow from nu0 and record the greedy kernels along it."""
    rollout = rollout_flow(spec, solution, nu0, T, tail_eps)
    kernels = tuple(a.kernels for a in rollout.actions)
    return DecentralizedPolicy(kernels, rollout.measures, solution.stationary)


def flow_cost(spec: TeamSpec, policy: DecentralizedPolicy) -> float:
    """Discounted cost of the recorded schedule along its own flow."""
    total = 0.0
    for t in range(policy.horizon):
        mu = policy.flow[t]
        action_cost = 0.0
        for j in range(spec.M):
            w = policy.kernels[t][j] * mu.per_cluster[j][:, None]
            action_cost += float((cost_matrix(spec, j, mu) * w).sum())
        total += (spec.beta ** t) * action_cost
    return total


def propagate_marginals(spec: TeamSpec, policy: DecentralizedPolicy,
                        nu0: MeasureArray | None = None) -> tuple[MeasureArray, ...]:
    """Exact state laws of single representatives under the schedule.

    Propagates each cluster's marginal through its own kernel while feeding the
    *recorded flow* into the transition kernels; by construction of the flow the
    result reproduces it (the consistency identity)."""
    laws = [nu0 if nu0 is not None else spec.nu0]
    for t in range(policy.horizon):
        cur = laws[-1]
        mu_flow = policy.measure(t)
        nxt = []
        for j in range(spec.M):
            tensor = kernel_tensor(spec, j, mu_flow)
            w = policy.kernels[t][j] * cur.per_cluster[j][:, None]
            nxt.append(np.einsum("xu,xun->n", w, tensor))
        laws.append(MeasureArray.from_lists(nxt, path="marginal"))
    return tuple(laws)


def consistency_gap(spec: TeamSpec, policy: DecentralizedPolicy) -> float:
    """max over t and clusters of |propagated representative law - recorded flow|."""
    laws = propagate_marginals(spec, policy)
    gap = 0.0
    for t, law in enumerate(laws):
        ref = policy.measure(t)
        for a, b in zip(law.per_cluster, ref.per_cluster):
            gap = max(gap, float(np.max(np.abs(a - b))))
    return gap


@dataclass(frozen=True, eq=False)
class RepresentativeSystem:
    """One agent per cluster, coupled through the deterministic measure flow."""

    policy: DecentralizedPolicy

    def consistency_gap(self, spec: TeamSpec) -> float:
        return consistency_gap(spec, self.policy)


# ---------------------------------------------------------------------------
# Truncation onto finite populations
# ---------------------------------------------------------------------------

def split_population(M: int, N: int, proportions=None) -> PopulationLayout:
    """Deterministic split of N agents over M clusters (equal by default,
    remainders to low-index clusters)."""
    if N < M:
        raise ValueError("need at least one agent per cluster")
    if proportions is None:
        proportions = [1.0 / M] * M
    raw = [max(1, int(math.floor(N * p))) for p in proportions]
    while sum(raw) > N:
        raw[int(np.argmax(raw))] -= 1
    i = 0
    while sum(raw) < N:
        raw[i % M] += 1
        i += 1
    return PopulationLayout.from_sizes(raw)


def truncate_policy(spec: TeamSpec, layout: PopulationLayout,
                    policy: DecentralizedPolicy, T: int) -> CentralizedMarkovPolicy:
    """Product joint policy of the truncation: every agent applies its cluster kernel.

    Materialized as joint-state x joint-action matrices, so only suitable for
    the exact oracle scale."""
    mats = []
    for t in range(T):
        joint = np.ones((1, 1))
        for j in layout.membership:
            joint = np.kron(joint, policy.kernel(t, j))
        mats.append(joint)
    return CentralizedMarkovPolicy.from_schedule(mats)


def evaluate_truncated_exact(spec: TeamSpec, layout: PopulationLayout,
                             policy: DecentralizedPolicy, tol: float = 1e-11) -> float:
    """Exact expected discounted cost of the truncated policy from nu0.

    The recorded schedule is followed; past it the last kernel repeats, and the
    stationary tail is evaluated iteratively to ``tol`` before backward
    accumulation (the evaluated policy is admissible as such, so optimality
    comparisons remain valid)."""
    dp = _JointDP(spec, layout)
    tail = np.ones((1, 1))
    for j in layout.membership:
        tail = np.kron(tail, policy.kernel(policy.horizon - 1, j))
    from .exact import vi_threshold, _vi_iteration_cap

    values = np.zeros(dp.space.num_states)
    if policy.stationary_tail:
        threshold = vi_threshold(spec.beta, tol)
        cap = _vi_iteration_cap(spec.beta, max(spec.cost_bound(), tol) / (1.0 - spec.beta),
                                threshold)
        for _ in range(cap):
            new = dp.policy_sweep(values, tail)
            delta = float(np.max(np.abs(new - values)))
            values = new
            if delta <= threshold:
                break
        else:
            raise RuntimeError("tail evaluation failed to converge")
    for t in reversed(range(policy.horizon)):
        joint = np.ones((1, 1))
        for j in layout.membership:
            joint = np.kron(joint, policy.kernel(t, j))
        values = dp.policy_sweep(values, joint)
    return value_at_initial(spec, layout, values)


@dataclass(frozen=True)
class TruncationSim:
    costs: np.ndarray
    mean: float
    stderr: float
    measures: tuple[np.ndarray, ...]   # per cluster: (rollouts, T, n_j) realized empiricals


def simulate_truncated(spec: TeamSpec, layout: PopulationLayout, policy: DecentralizedPolicy,
                       T: int, n_rollouts: int, seed: int,
                       feedback_solution: MeanFieldSolution | None = None,
                       chunk: int = 128) -> TruncationSim:
    """Monte Carlo rollouts of the N-agent system under the truncated policy.

    Transitions and stage costs use the realized empirical measures (the true
    system); the policy consumes the recorded mean-field flow unless
    ``feedback_solution`` is given, in which case kernels are looked up at the
    nearest grid point of the realized measures (diagnostic variant).
    """
    N = layout.N
    seeds = rollout_seeds(seed, n_rollouts)
    betas = spec.beta ** np.arange(T)
    nu_rows = [spec.nu0.per_cluster[j] for j in layout.membership]
    nu_cdfs = [np.cumsum(r) for r in nu_rows]
    # flow-indexed kernels and their cdfs are shared by all rollouts
    flow_cdfs = []
    for t in range(T):
        per = []
        for j in range(spec.M):
            per.append(np.cumsum(policy.kernel(t, j), axis=1))
        flow_cdfs.append(per)

    costs = np.empty(n_rollouts)
    measures = [np.empty((n_rollouts, T, spec.state_sizes[j])) for j in range(spec.M)]
    for start in range(0, n_rollouts, chunk):
        idx = range(start, min(start + chunk, n_rollouts))
        C = len(idx)
        u_all = np.stack([np.random.default_rng(seeds[r]).random(N + 2 * N * T) for r in idx])
        digits = np.empty((C, N), dtype=np.int64)
        for i in range(N):
            digits[:, i] = _draw(u_all[:, i], nu_cdfs[i])
        carr = np.arange(C)
        step_costs = np.zeros((C, T))
        for t in range(T):
            block = u_all[:, N + 2 * N * t: N + 2 * N * (t + 1)]
            mus = []
            for j in range(spec.M):
                sl = layout.cluster_slice(j)
                cnt = np.stack([(digits[:, sl] == v).sum(axis=1)
                                for v in range(spec.state_sizes[j])], axis=1)
                mus.append(cnt / layout.sizes[j])
                measures[j][start:start + C, t] = mus[j]
            if feedback_solution is not None:
                kernel_rows = _feedback_kernels(feedback_solution, spec, mus, C)
            ud = np.empty_like(digits)
            for i in range(N):
                j = layout.membership[i]
                if feedback_solution is None:
                    cdf = flow_cdfs[t][j][digits[:, i]]
                else:
                    cdf = kernel_rows[j][carr, digits[:, i]]
                ud[:, i] = _draw(block[:, i], cdf)
            for j in range(spec.M):
                sl = layout.cluster_slice(j)
                cm = _batch_costs(spec, j, mus)
                step_costs[:, t] += cm[carr[:, None], digits[:, sl], ud[:, sl]].sum(axis=1) \
                    / layout.sizes[j]
            tensors = [np.cumsum(_batch_kernels(spec, j, mus), axis=-1) for j in range(spec.M)]
            nxt = np.empty_like(digits)
            for i in range(N):
                cdf = tensors[layout.membership[i]][carr, digits[:, i], ud[:, i]]
                nxt[:, i] = _draw(block[:, N + i], cdf)
            digits = nxt
        costs[start:start + C] = step_costs @ betas
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return TruncationSim(costs, mean, stderr, tuple(measures))


def _feedback_kernels(solution: MeanFieldSolution, spec: TeamSpec, mus, C: int):
    """Per-rollout greedy kernel cdfs at the nearest grid point of realized measures."""
    grid, agrid = solution.grid, solution.action_grid
    rows = []
    for j in range(spec.M):
        pts = grid.cluster_points[j] / grid.K
        d = ((pts[None, :, :] - mus[j][:, None, :]) ** 2).sum(axis=2)
        rows.append(np.argmin(d, axis=1))
    flat = np.ravel_multi_index(tuple(rows), grid.cluster_sizes)
    ids = solution.policy_ids[0][flat]
    cluster_ids = np.stack(np.unravel_index(ids, agrid.cluster_counts), axis=0)
    return [np.cumsum(agrid.candidates[j][cluster_ids[j]], axis=2) for j in range(spec.M)]


# ---------------------------------------------------------------------------
# Representative-agent simulation and cost preservation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RepresentativeStats:
    mc_mean: float
    mc_stderr: float
    exact_cost: float
    flow_gap: float
    matches_exact: bool   # MC estimate within 3 standard errors of the closed form


def representative_cost(spec: TeamSpec, policy: DecentralizedPolicy) -> float:
    """Closed-form cost of the representative team: propagate exact marginals
    along the flow and integrate the stage costs."""
    laws = propagate_marginals(spec, policy)
    total = 0.0
    for t in range(policy.horizon):
        mu_flow = policy.measure(t)
        stage = 0.0
        for j in range(spec.M):
            w = policy.kernels[t][j] * laws[t].per_cluster[j][:, None]
            stage += float((cost_matrix(spec, j, mu_flow) * w).sum())
        total += (spec.beta ** t) * stage
    return total


def simulate_representatives(spec: TeamSpec, system: RepresentativeSystem | DecentralizedPolicy,
                             n_rollouts: int, seed: int,
                             T: int | None = None) -> RepresentativeStats:
    """Monte Carlo for the M coupled representatives; also returns the exact cost
    along the flow, which the estimate must track within noise."""
    policy = system.policy if isinstance(system, RepresentativeSystem) else system
    T = policy.horizon if T is None else min(T, policy.horizon)
    M = spec.M
    seeds = rollout_seeds(seed, n_rollouts)
    betas = spec.beta ** np.arange(T)
    nu_cdfs = [np.cumsum(spec.nu0.per_cluster[j]) for j in range(M)]
    kernel_cdfs = [[np.cumsum(policy.kernel(t, j), axis=1) for j in range(M)] for t in range(T)]
    trans_cdfs = [[np.cumsum(kernel_tensor(spec, j, policy.measure(t)), axis=-1)
                   for j in range(M)] for t in range(T)]
    cost_mats = [[cost_matrix(spec, j, policy.measure(t)) for j in range(M)] for t in range(T)]

    costs = np.empty(n_rollouts)
    chunk = 512
    for start in range(0, n_rollouts, chunk):
        idx = range(start, min(start + chunk, n_rollouts))
        C = len(idx)
        u_all = np.stack([np.random.default_rng(seeds[r]).random(M + 2 * M * T) for r in idx])
        states = np.empty((C, M), dtype=np.int64)
        for j in range(M):
            states[:, j] = _draw(u_all[:, j], nu_cdfs[j])
        step_costs = np.zeros((C, T))
        for t in range(T):
            block = u_all[:, M + 2 * M * t: M + 2 * M * (t + 1)]
            for j in range(M):
                u = _draw(block[:, j], kernel_cdfs[t][j][states[:, j]])
                step_costs[:, t] += cost_mats[t][j][states[:, j], u]
                states[:, j] = _draw(block[:, M + j], trans_cdfs[t][j][states[:, j], u])
        costs[start:start + C] = step_costs @ betas
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    exact = representative_cost(spec, policy)
    gap = consistency_gap(spec, policy)
    matches = abs(mean - exact) <= 3.0 * max(stderr, 1e-15)
    return RepresentativeStats(mean, stderr, exact, gap, matches)


@dataclass(frozen=True)
class CostPreservationRow:
    N: int
    mc_cost: float
    stderr: float
    gap: float


@dataclass(frozen=True)
class CostPreservationReport:
    mean_field_cost: float
    rows: tuple[CostPreservationRow, ...]
    monotone_within_se: bool
    final_gap: float


def check_cost_preservation(spec: TeamSpec, solution: MeanFieldSolution, Ns,
                            n_rollouts: int, seed: int, proportions=None,
                            T: int | None = None) -> CostPreservationReport:
    """Monte Carlo cost of the truncated induced policy across a population sweep,
    compared against the mean-field cost; gaps must not grow along the schedule
    beyond one pooled standard error."""
    policy = induce_policy(solution, spec)
    target = flow_cost(spec, policy)
    horizon = policy.horizon if T is None else T
    rows = []
    for k, N in enumerate(Ns):
        layout = split_population(spec.M, N, proportions)
        sim = simulate_truncated(spec, layout, policy, horizon, n_rollouts, seed + k)
        rows.append(CostPreservationRow(N, sim.mean, sim.stderr, abs(sim.mean - target)))
    monotone = True
    for prev, cur in zip(rows, rows[1:]):
        pooled = math.hypot(prev.stderr, cur.stderr)
        if cur.gap > prev.gap + pooled:
            monotone = False
    return CostPreservationReport(target, tuple(rows), monotone, rows[-1].gap)
