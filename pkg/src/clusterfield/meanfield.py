"""Deterministic mean-field control problem on arrays of cluster marginals.

The state is an array of per-cluster probability vectors; actions are
per-cluster decision kernels pi_j(u|x) (their couplings theta_j = pi_j (x) mu_j
are exactly the factorizable, marginal-consistent action set). Dynamics are the
deterministic flow

    F_j(mu, pi)(x') = sum_{x,u} T_j(x'|x,u,mu) pi_j(u|x) mu_j(x)

Value iteration runs on a product of resolution-K simplex grids; decision
kernels are discretized row-wise on resolution-L simplex grids; off-grid flow
images are evaluated by piecewise-linear barycentric interpolation on the
sort-based Kuhn triangulation of each cluster simplex, combined multilinearly
across clusters. The interpolation is a convex combination, so the discretized
Bellman operator stays a beta-contraction and reproduces affine value
functions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .combinat import compositions, iter_tuples, num_compositions
from .model import (
    BudgetExceededError,
    MeasureArray,
    TeamSpec,
    cost_matrix,
    kernel_tensor,
    simplex_vector,
)
from .exact import _vi_iteration_cap, vi_threshold

GRID_BUDGET = 200_000
CANDIDATE_BUDGET = 2_000_000
_SNAP_ATOL = 1e-9


@dataclass(frozen=True, eq=False)
class KernelAction:
    """Per-cluster row-stochastic decision kernels pi_j(u|x)."""

    kernels: tuple[np.ndarray, ...]

    @classmethod
    def from_rows(cls, mats, *, path: str = "action") -> "KernelAction":
        out = []
        for j, m in enumerate(mats):
            m = np.asarray(m, dtype=float)
            rows = np.stack([simplex_vector(r, path=f"{path}[{j}][{x}]")
                             for x, r in enumerate(m)])
            rows.flags.writeable = False
            out.append(rows)
        return cls(tuple(out))

    def coupling(self, mu: MeasureArray) -> tuple[np.ndarray, ...]:
        """Induced state-action measures theta_j = pi_j (x) mu_j."""
        return tuple(k * m[:, None] for k, m in zip(self.kernels, mu.per_cluster))


class SimplexGrid:
    """Product of per-cluster simplex grids at resolution K with an index bijection."""

    def __init__(self, spec: TeamSpec, K: int, budget: int = GRID_BUDGET):
        if K < 1:
            raise ValueError("grid resolution must be >= 1")
        self.spec = spec
        self.K = K
        total = 1
        for n in spec.state_sizes:
            total *= num_compositions(K, n)
            if total > budget:
                raise BudgetExceededError(f"simplex grid exceeds budget of {budget}")
        self.cluster_points = tuple(
            np.asarray(compositions(K, n), dtype=np.int64) for n in spec.state_sizes)
        self.cluster_sizes = tuple(p.shape[0] for p in self.cluster_points)
        self.size = int(np.prod(self.cluster_sizes))
        self._lookup = []
        for j, pts in enumerate(self.cluster_points):
            codes = self._encode(j, pts)
            order = np.argsort(codes)
            self._lookup.append((codes[order], order))

    def _encode(self, j: int, counts: np.ndarray) -> np.ndarray:
        base = self.K + 1
        weights = base ** np.arange(counts.shape[1])
        return counts @ weights

    def rows_of(self, j: int, counts: np.ndarray) -> np.ndarray:
        """Vectorized per-cluster lookup of count vectors to grid rows."""
        codes_sorted, order = self._lookup[j]
        pos = np.searchsorted(codes_sorted, self._encode(j, counts))
        return order[pos]

    def cluster_indices(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.cluster_sizes))

    def flat_index(self, cluster_rows) -> int:
        return int(np.ravel_multi_index(tuple(cluster_rows), self.cluster_sizes))

    def counts(self, flat: int) -> tuple[tuple[int, ...], ...]:
        rows = self.cluster_indices(flat)
        return tuple(tuple(int(v) for v in self.cluster_points[j][r])
                     for j, r in enumerate(rows))

    def measure(self, flat: int) -> MeasureArray:
        rows = self.cluster_indices(flat)
        return MeasureArray(tuple(
            self.cluster_points[j][r].astype(float) / self.K for j, r in enumerate(rows)))

    def key(self, flat: int) -> str:
        return ";".join(f"{j}:({','.join(map(str, c))})"
                        for j, c in enumerate(self.counts(flat)))

    def nearest_index(self, mu: MeasureArray) -> int:
        """Closest grid point in Euclidean distance; ties to the lowest index.

        The squared distance separates across clusters, so the joint argmin is
        the per-cluster argmin (lowest row on ties), which is also the
        lexicographically smallest joint index.
        """
        rows = []
        for j, pts in enumerate(self.cluster_points):
            d = ((pts / self.K - mu.per_cluster[j][None, :]) ** 2).sum(axis=1)
            rows.append(int(np.argmin(d)))
        return self.flat_index(rows)


def kuhn_weights(K: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric vertices and weights on the Kuhn triangulation of the K-grid.

    ``points``: (B, n) rows on the probability simplex. Returns integer count
    vertices (B, n, n) and weights (B, n) (rows sum to 1). Exact on grid points
    (coordinates within 1e-9 of the lattice are snapped) and for affine
    functions of the measure.
    """
    pts = np.asarray(points, dtype=float)
    B, n = pts.shape
    if n == 1:
        return np.full((B, 1, 1), K, dtype=np.int64), np.ones((B, 1))
    # cumulative tail coordinates map the simplex onto the ordered cube region
    z = K * (1.0 - np.cumsum(pts, axis=1)[:, : n - 1])
    z = np.clip(z, 0.0, float(K))
    snapped = np.rint(z)
    near = np.abs(z - snapped) <= _SNAP_ATOL * max(1.0, K)
    z = np.where(near, snapped, z)
    # cap the base at K-1 so every vertex of the cell stays on the lattice
    # (coordinates exactly at K then carry fractional part 1)
    g = np.minimum(np.floor(z), float(K - 1))
    f = z - g
    order = np.argsort(-f, axis=1, kind="stable")
    d = np.take_along_axis(f, order, axis=1)
    weights = np.empty((B, n))
    weights[:, 0] = 1.0 - d[:, 0]
    if n > 2:
        weights[:, 1: n - 1] = d[:, : n - 2] - d[:, 1: n - 1]
    weights[:, n - 1] = d[:, n - 2]
    lattice = np.empty((B, n, n - 1))
    lattice[:, 0, :] = g
    rows = np.arange(B)
    for m in range(1, n):
        lattice[:, m, :] = lattice[:, m - 1, :]
        lattice[rows, m, order[:, m - 1]] += 1.0
    verts = np.empty((B, n, n), dtype=np.int64)
    lat = np.rint(lattice).astype(np.int64)
    verts[:, :, 0] = K - lat[:, :, 0]
    if n > 2:
        verts[:, :, 1: n - 1] = lat[:, :, : n - 2] - lat[:, :, 1: n - 1]
    verts[:, :, n - 1] = lat[:, :, n - 2]
    return verts, weights


def interpolate(grid: SimplexGrid, values: np.ndarray, mu: MeasureArray) -> float:
    """Piecewise-linear interpolation of a grid table at an arbitrary measure array."""
    table = np.asarray(values).reshape(grid.cluster_sizes)
    idxs, wts = [], []
    for j in range(grid.spec.M):
        verts, w = kuhn_weights(grid.K, mu.per_cluster[j][None, :])
        idxs.append(grid.rows_of(j, verts[0]))
        wts.append(w[0])
    sub = table[np.ix_(*idxs)]
    for w in wts:
        sub = np.tensordot(w, sub, axes=(0, 0))
    return float(sub)


def flow(spec: TeamSpec, mu: MeasureArray, action: KernelAction) -> MeasureArray:
    """Deterministic successor measure array F(mu, action)."""
    out = []
    for j in range(spec.M):
        tensor = kernel_tensor(spec, j, mu)
        w = action.kernels[j] * mu.per_cluster[j][:, None]
        nxt = np.einsum("xu,xun->n", w, tensor)
        out.append(simplex_vector(nxt, path=f"flow[{j}]"))
    return MeasureArray(tuple(out))


def mf_stage_cost(spec: TeamSpec, mu: MeasureArray, action: KernelAction) -> float:
    """Stage cost of the coupled action: sum_j <c_j(.,.,mu), pi_j (x) mu_j>."""
    total = 0.0
    for j in range(spec.M):
        w = action.kernels[j] * mu.per_cluster[j][:, None]
        total += float((cost_matrix(spec, j, mu) * w).sum())
    return total


class ActionGrid:
    """Row-wise simplex discretization of decision kernels at resolution L."""

    def __init__(self, spec: TeamSpec, L: int, budget: int = CANDIDATE_BUDGET):
        if L < 1:
            raise ValueError("action grid resolution must be >= 1")
        self.spec = spec
        self.L = L
        self.rows = tuple(
            np.asarray(compositions(L, m), dtype=float) / L for m in spec.action_sizes)
        self.cluster_counts = []
        total = 1
        for j, n in enumerate(spec.state_sizes):
            k = self.rows[j].shape[0] ** n
            self.cluster_counts.append(k)
            total *= k
            if total > budget:
                raise BudgetExceededError(f"action candidate set exceeds budget of {budget}")
        self.cluster_counts = tuple(self.cluster_counts)
        self.size = total
        self.candidates = []
        for j, n in enumerate(spec.state_sizes):
            R = self.rows[j].shape[0]
            combos = np.asarray(list(iter_tuples((R,) * n)), dtype=np.int64)
            self.candidates.append(self.rows[j][combos])  # (k_j, n_j, m_j)
        self.candidates = tuple(self.candidates)

    def kernel_action(self, cluster_ids, uniform_rows: tuple | None = None) -> KernelAction:
        """Decode per-cluster candidate ids; optionally reset rows of zero-mass states
        to uniform (they are cost-irrelevant and excluded from equality checks)."""
        mats = []
        for j, c in enumerate(cluster_ids):
            m = np.array(self.candidates[j][int(c)])
            if uniform_rows is not None:
                for x in uniform_rows[j]:
                    m[x] = 1.0 / self.spec.action_sizes[j]
            mats.append(m)
        return KernelAction.from_rows(mats)

    def split_flat(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.cluster_counts))


@dataclass(frozen=True, eq=False)
class MeanFieldSolution:
    """Value table(s) on the simplex grid with the greedy kernel policy."""

    grid: SimplexGrid
    action_grid: ActionGrid
    values: tuple[np.ndarray, ...]
    policy_ids: tuple[np.ndarray, ...]
    stationary: bool
    metadata: dict = field(default_factory=dict)

    def value(self, t: int = 0) -> np.ndarray:
        return self.values[0] if self.stationary else self.values[t]

    def value_at(self, mu: MeasureArray, t: int = 0) -> float:
        return interpolate(self.grid, self.value(t), mu)

    def kernel_action(self, flat: int, t: int = 0) -> KernelAction:
        ids = self.policy_ids[0] if self.stationary else self.policy_ids[t]
        cluster_ids = self.action_grid.split_flat(int(ids[flat]))
        counts = self.grid.counts(flat)
        zero_rows = tuple(
            tuple(x for x, c in enumerate(cnt) if c == 0) for cnt in counts)
        return self.action_grid.kernel_action(cluster_ids, zero_rows)

    def greedy_at(self, mu: MeasureArray, t: int = 0) -> KernelAction:
        """Nearest-grid-point policy lookup (ties to the lowest index)."""
        return self.kernel_action(self.grid.nearest_index(mu), t)

    @property
    def horizon(self) -> int | None:
        return None if self.stationary else len(self.values)


class _GridOperator:
    """Precomputed per-grid-point stage costs and interpolation weights.

    For two clusters the stage costs ride along as extra channels of the sparse
    weight matrices, so one Bellman update per grid point is two sparse-dense
    products plus an argmin.
    """

    def __init__(self, spec: TeamSpec, grid: SimplexGrid, agrid: ActionGrid):
        self.spec = spec
        self.grid = grid
        self.agrid = agrid
        self.beta = spec.beta
        M = spec.M
        G = grid.size
        self._stage = []    # per point: per cluster s_j (k_j,)
        self._weights = []  # per point: per cluster csr (k_j, G_j [*aug])
        for flat in range(G):
            mu = grid.measure(flat)
            stages, mats = [], []
            for j in range(M):
                tensor = kernel_tensor(spec, j, mu)
                cmat = cost_matrix(spec, j, mu)
                wmat = agrid.candidates[j] * mu.per_cluster[j][None, :, None]
                s = np.einsum("knm,nm->k", wmat, cmat)
                flows = np.einsum("knm,nmp->kp", wmat, tensor)
                # flow rows sum to 1 exactly up to fp noise; Kuhn handles the drift
                verts, wts = kuhn_weights(grid.K, flows)
                k, n = wts.shape
                rows = np.repeat(np.arange(k), n)
                cols = grid.rows_of(j, verts.reshape(-1, n))
                data = wts.reshape(-1)
                Gj = grid.cluster_sizes[j]
                if M == 2:
                    rows = np.concatenate([rows, np.arange(k), np.arange(k)])
                    cols = np.concatenate([cols, np.full(k, Gj), np.full(k, Gj + 1)])
                    data = np.concatenate([data, s, np.ones(k)])
                    mats.append(sparse.csr_array((data, (rows, cols)), shape=(k, Gj + 2)))
                else:
                    mats.append(sparse.csr_array((data, (rows, cols)), shape=(k, Gj)))
                stages.append(s)
            self._stage.append(stages)
            self._weights.append(mats)

    def sweep(self, values: np.ndarray):
        """One Bellman update over the whole grid; returns (new values, argmin ids)."""
        spec, grid, agrid = self.spec, self.grid, self.agrid
        G = grid.size
        out = np.empty(G)
        ids = np.empty(G, dtype=np.int64)
        if spec.M == 2:
            G1, G2 = grid.cluster_sizes
            vaug = np.zeros((G1 + 2, G2 + 2))
            vaug[:G1, :G2] = self.beta * values.reshape(G1, G2)
            vaug[G1, G2 + 1] = 1.0
            vaug[G1 + 1, G2] = 1.0
            vaug_t = vaug.T
            for flat in range(G):
                w1, w2 = self._weights[flat]
                z = w2 @ vaug_t               # (k2, G1+2)
                q = w1 @ np.ascontiguousarray(z.T)  # (k1, k2)
                a = int(np.argmin(q))
                ids[flat] = a
                out[flat] = q.flat[a]
            return out, ids
        if spec.M == 1:
            for flat in range(G):
                q = self._stage[flat][0] + self.beta * (self._weights[flat][0] @ values)
                a = int(np.argmin(q))
                ids[flat] = a
                out[flat] = q[a]
            return out, ids
        sizes = grid.cluster_sizes
        for flat in range(G):
            x = self.beta * values.reshape(sizes[0], -1)
            for j in range(spec.M):
                y = self._weights[flat][j] @ x.reshape(x.shape[0], -1)
                nxt = sizes[j + 1] if j + 1 < spec.M else None
                x = np.ascontiguousarray(y.T)
                if nxt is not None:
                    x = x.reshape(nxt, -1)
            q = x.reshape(self.agrid.cluster_counts)
            for j, s in enumerate(self._stage[flat]):
                shape = [1] * spec.M
                shape[j] = -1
                q = q + s.reshape(shape)
            a = int(np.argmin(q))
            ids[flat] = a
            out[flat] = q.flat[a]
        return out, ids


def value_iteration(spec: TeamSpec, K: int, L: int, tol: float,
                    grid_budget: int = GRID_BUDGET,
                    candidate_budget: int = CANDIDATE_BUDGET) -> MeanFieldSolution:
    """Value iteration on the simplex grid to the span stopping rule.

    Starts from the zero table (monotone from below for non-negative costs),
    ties in the candidate argmin break to the lowest index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = SimplexGrid(spec, K, grid_budget)
    agrid = ActionGrid(spec, L, candidate_budget)
    op = _GridOperator(spec, grid, agrid)
    threshold = vi_threshold(spec.beta, tol)
    bound = _vi_iteration_cap(spec.beta, max(spec.cost_bound(), tol) / (1.0 - spec.beta),
                              threshold)
    values = np.zeros(grid.size)
    deltas = []
    ids = np.zeros(grid.size, dtype=np.int64)
    for _ in range(bound):
        new, ids = op.sweep(values)
        delta = float(np.max(np.abs(new - values)))
        deltas.append(delta)
        values = new
        if delta <= threshold:
            break
    else:
        raise RuntimeError("mean-field value iteration failed to converge within its cap")
    meta = {
        "grid_resolution": K,
        "action_resolution": L,
        "tol": tol,
        "iterations": len(deltas),
        "iteration_bound": bound,
        "sup_deltas": tuple(deltas),
        "beta": spec.beta,
    }
    return MeanFieldSolution(grid, agrid, (values,), (ids,), True, meta)


def finite_horizon_dp(spec: TeamSpec, K: int, L: int, T: int,
                      grid_budget: int = GRID_BUDGET,
                      candidate_budget: int = CANDIDATE_BUDGET) -> MeanFieldSolution:
    """T backward sweeps on the simplex grid with per-stage greedy policies."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    grid = SimplexGrid(spec, K, grid_budget)
    agrid = ActionGrid(spec, L, candidate_budget)
    op = _GridOperator(spec, grid, agrid)
    values, ids = [], []
    cur = np.zeros(grid.size)
    for _ in range(T):
        cur, sel = op.sweep(cur)
        values.append(cur)
        ids.append(sel)
    values.reverse()
    ids.reverse()
    meta = {"grid_resolution": K, "action_resolution": L, "horizon": T, "beta": spec.beta}
    return MeanFieldSolution(grid, agrid, tuple(values), tuple(ids), False, meta)


def effective_horizon(spec: TeamSpec, tail_eps: float = 1e-12) -> int:
    """Steps until the discounted tail of the stage-cost bound drops below tail_eps."""
    bound = spec.cost_bound() / (1.0 - spec.beta)
    if bound <= tail_eps:
        return 1
    return int(math.ceil(math.log(bound / tail_eps) / math.log(1.0 / spec.beta))) + 1


@dataclass(frozen=True)
class FlowRollout:
    """Deterministic trajectory of the greedy policy with its discounted cost."""

    measures: tuple[MeasureArray, ...]
    actions: tuple[KernelAction, ...]
    stage_costs: tuple[float, ...]
    total_cost: float
    truncated_horizon: int


def rollout_flow(spec: TeamSpec, solution: MeanFieldSolution,
                 nu0: MeasureArray | None = None, T: int | None = None,
                 tail_eps: float = 1e-12) -> FlowRollout:
    """Roll the deterministic flow from nu0 under the solution's greedy policy.

    Infinite-horizon solutions are truncated once the remaining discounted tail
    bound falls below ``tail_eps``.
    """
    mu = nu0 if nu0 is not None else spec.nu0
    if T is None:
        T = solution.horizon if not solution.stationary else effective_horizon(spec, tail_eps)
    elif not solution.stationary and T > solution.horizon:
        raise ValueError("requested horizon exceeds the solution's schedule")
    measures, actions, costs = [], [], []
    total = 0.0
    for t in range(T):
        action = solution.greedy_at(mu, t if not solution.stationary else 0)
        c = mf_stage_cost(spec, mu, action)
        measures.append(mu)
        actions.append(action)
        costs.append(c)
        total += (spec.beta ** t) * c
        mu = flow(spec, mu, action)
    measures.append(mu)
    return FlowRollout(tuple(measures), tuple(actions), tuple(costs), total, T)
