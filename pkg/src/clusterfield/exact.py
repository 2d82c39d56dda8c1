"""Exact solver for the finite centralized team: joint dynamic programming,
policy evaluation, permutation averaging, and seeded trajectory simulation.

Joint states/actions are enumerated in mixed radix with agents in index order
(agent 0 most significant digit) and cluster blocks contiguous, so permutation
action on indices is a digit shuffle. Everything here is brute force by design:
it is the oracle the measure-valued solvers are checked against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    BudgetExceededError,
    MeasureArray,
    PopulationLayout,
    TeamSpec,
    cost_matrix,
    empirical_counts,
    empirical_measure,
    kernel_tensor,
    simplex_vector,
)

DEFAULT_BUDGET = 10**7
PERMUTATION_BUDGET = 100_000


class JointSpace:
    """Bijection between joint state/action tuples and flat indices."""

    def __init__(self, spec: TeamSpec, layout: PopulationLayout):
        if layout.num_clusters != spec.M:
            raise ValueError("layout cluster count differs from instance")
        self.spec = spec
        self.layout = layout
        self.state_radices = tuple(spec.state_sizes[j] for j in layout.membership)
        self.action_radices = tuple(spec.action_sizes[j] for j in layout.membership)
        self.num_states = int(np.prod(self.state_radices, dtype=object))
        self.num_actions = int(np.prod(self.action_radices, dtype=object))

    def state_digits(self) -> np.ndarray:
        return _digit_table(self.state_radices)

    def action_digits(self) -> np.ndarray:
        return _digit_table(self.action_radices)

    def state_index(self, x_joint) -> int:
        return int(np.ravel_multi_index(tuple(np.asarray(x_joint, dtype=int)), self.state_radices))

    def state_tuple(self, index: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(index, self.state_radices))

    def action_index(self, u_joint) -> int:
        return int(np.ravel_multi_index(tuple(np.asarray(u_joint, dtype=int)), self.action_radices))

    def action_tuple(self, index: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(index, self.action_radices))

    def permute_state_indices(self, sigma) -> np.ndarray:
        """Index map s -> index of x^sigma where (x^sigma)_i = x_{sigma(i)}."""
        digits = self.state_digits()[:, np.asarray(sigma, dtype=int)]
        return np.ravel_multi_index(tuple(digits.T), self.state_radices)

    def permute_action_indices(self, sigma) -> np.ndarray:
        digits = self.action_digits()[:, np.asarray(sigma, dtype=int)]
        return np.ravel_multi_index(tuple(digits.T), self.action_radices)


def _digit_table(radices) -> np.ndarray:
    size = int(np.prod(radices, dtype=object))
    out = np.empty((size, len(radices)), dtype=np.int64)
    grids = np.unravel_index(np.arange(size), radices)
    for i, g in enumerate(grids):
        out[:, i] = g
    return out


@dataclass(frozen=True)
class CentralizedMarkovPolicy:
    """Markov policy on joint states: per step (or stationary) a row-stochastic (S, A) matrix."""

    matrices: tuple[np.ndarray, ...]
    stationary: bool

    @classmethod
    def from_matrix(cls, mat) -> "CentralizedMarkovPolicy":
        return cls((_policy_matrix(mat),), True)

    @classmethod
    def from_schedule(cls, mats) -> "CentralizedMarkovPolicy":
        return cls(tuple(_policy_matrix(m) for m in mats), False)

    @classmethod
    def from_selector(cls, selector, num_actions: int) -> "CentralizedMarkovPolicy":
        sel = np.asarray(selector, dtype=int)
        mat = np.zeros((sel.size, num_actions))
        mat[np.arange(sel.size), sel] = 1.0
        return cls.from_matrix(mat)

    def matrix(self, t: int) -> np.ndarray:
        if self.stationary:
            return self.matrices[0]
        return self.matrices[min(t, len(self.matrices) - 1)]

    @property
    def horizon(self) -> int | None:
        return None if self.stationary else len(self.matrices)


def _policy_matrix(mat) -> np.ndarray:
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2:
        raise ValueError("policy matrix must be 2-d")
    rows = np.stack([simplex_vector(r, path=f"policy[{i}]") for i, r in enumerate(m)])
    rows.flags.writeable = False
    return rows


@dataclass(frozen=True)
class ExactSolution:
    """Value tables and optimal deterministic selectors for the joint team DP."""

    values: tuple[np.ndarray, ...]     # per t for finite horizon, single table otherwise
    selectors: tuple[np.ndarray, ...]
    stationary: bool
    iterations: int = 0
    sup_deltas: tuple[float, ...] = ()

    def value(self, t: int = 0) -> np.ndarray:
        return self.values[0] if self.stationary else self.values[t]

    def selector(self, t: int = 0) -> np.ndarray:
        return self.selectors[0] if self.stationary else self.selectors[t]


class _JointDP:
    """Per-state caches for the joint Bellman operator (kernels keyed by count signature)."""

    def __init__(self, spec: TeamSpec, layout: PopulationLayout, budget: int = DEFAULT_BUDGET):
        space = JointSpace(spec, layout)
        if space.num_states * space.num_actions > budget:
            raise BudgetExceededError(
                f"{space.num_states} x {space.num_actions} joint state-action pairs "
                f"exceed the budget of {budget}")
        self.spec = spec
        self.layout = layout
        self.space = space
        self.beta = spec.beta
        digits = space.state_digits()
        membership = layout.membership

        cache: dict[tuple, tuple] = {}
        self.rows: list[list[np.ndarray]] = []
        self.costs: list[np.ndarray] = []
        for s in range(space.num_states):
            xs = digits[s]
            key = empirical_counts(spec, layout, xs)
            if key not in cache:
                mu = MeasureArray(tuple(
                    np.asarray(c, dtype=float) / layout.sizes[j] for j, c in enumerate(key)))
                kernels = [kernel_tensor(spec, j, mu) for j in range(spec.M)]
                cmats = [cost_matrix(spec, j, mu) / layout.sizes[j] for j in range(spec.M)]
                cache[key] = (kernels, cmats)
            kernels, cmats = cache[key]
            self.rows.append([kernels[membership[i]][xs[i]] for i in range(layout.N)])
            acc = np.zeros(())
            for i in range(layout.N):
                acc = acc[..., None] + cmats[membership[i]][xs[i]]
            self.costs.append(np.ascontiguousarray(acc.reshape(-1)))

    def q_values(self, s: int, next_tensor: np.ndarray | None) -> np.ndarray:
        """Q(s, .) over all joint actions; ``next_tensor`` is J reshaped to state radices."""
        q = self.costs[s]
        if next_tensor is None:
            return q
        x = next_tensor
        for mat in self.rows[s]:
            x = np.moveaxis(np.tensordot(mat, x, axes=(1, 0)), 0, -1)
        return q + self.beta * x.reshape(-1)

    def sweep(self, values: np.ndarray | None):
        """One Bellman update; returns (new values, greedy selector)."""
        S = self.space.num_states
        nt = None if values is None else values.reshape(self.space.state_radices)
        out = np.empty(S)
        sel = np.empty(S, dtype=np.int64)
        for s in range(S):
            q = self.q_values(s, nt)
            a = int(np.argmin(q))
            sel[s] = a
            out[s] = q[a]
        return out, sel

    def policy_sweep(self, values: np.ndarray | None, matrix: np.ndarray) -> np.ndarray:
        S = self.space.num_states
        nt = None if values is None else values.reshape(self.space.state_radices)
        out = np.empty(S)
        for s in range(S):
            out[s] = float(matrix[s] @ self.q_values(s, nt))
        return out


def joint_kernel_row(spec: TeamSpec, layout: PopulationLayout, x_joint, u_joint) -> np.ndarray:
    """Product-form transition row over joint next states."""
    x = np.asarray(x_joint, dtype=int)
    u = np.asarray(u_joint, dtype=int)
    if x.shape != (layout.N,) or u.shape != (layout.N,):
        raise ValueError(f"joint arrays must have length {layout.N}")
    mu = empirical_measure(spec, layout, x_joint)
    kernels = [kernel_tensor(spec, j, mu) for j in range(spec.M)]
    row = np.ones(1)
    for i in range(layout.N):
        row = np.kron(row, kernels[layout.membership[i]][x[i], u[i]])
    return row


def solve_exact_finite(spec: TeamSpec, layout: PopulationLayout, T: int,
                       budget: int = DEFAULT_BUDGET) -> ExactSolution:
    """Backward recursion over T stages with exhaustive joint-action minimization."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    dp = _JointDP(spec, layout, budget)
    values: list[np.ndarray] = []
    selectors: list[np.ndarray] = []
    nxt = None
    for _ in range(T):
        nxt, sel = dp.sweep(nxt)
        values.append(nxt)
        selectors.append(sel)
    values.reverse()
    selectors.reverse()
    return ExactSolution(tuple(values), tuple(selectors), stationary=False)


def vi_threshold(beta: float, tol: float) -> float:
    """Stopping threshold on successive sup-norm differences guaranteeing sup error <= tol."""
    return tol * (1.0 - beta) / (2.0 * beta)


def _vi_iteration_cap(beta: float, scale: float, threshold: float) -> int:
    if scale <= threshold:
        return 2
    return int(math.ceil(math.log(scale / threshold) / math.log(1.0 / beta))) + 2


def solve_exact_infinite(spec: TeamSpec, layout: PopulationLayout, tol: float,
                         budget: int = DEFAULT_BUDGET) -> ExactSolution:
    """Value iteration to the span stopping rule; stationary deterministic selector."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    dp = _JointDP(spec, layout, budget)
    threshold = vi_threshold(spec.beta, tol)
    cap = _vi_iteration_cap(spec.beta, max(spec.cost_bound(), tol) / (1.0 - spec.beta), threshold)
    values = np.zeros(dp.space.num_states)
    deltas = []
    sel = np.zeros(dp.space.num_states, dtype=np.int64)
    for _ in range(cap):
        new, sel = dp.sweep(values)
        delta = float(np.max(np.abs(new - values)))
        deltas.append(delta)
        values = new
        if delta <= threshold:
            break
    else:
        raise RuntimeError("value iteration failed to reach its contraction cap")
    return ExactSolution((values,), (sel,), stationary=True,
                         iterations=len(deltas), sup_deltas=tuple(deltas))


def evaluate_policy(spec: TeamSpec, layout: PopulationLayout, policy,
                    T: int | None = None, tol: float = 1e-10,
                    budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Expected discounted cost per starting joint state under ``policy``.

    Finite horizon: exact backward accumulation. Infinite horizon (stationary
    policies only): iterative evaluation to the same stopping rule as value
    iteration, so the sup-norm error is <= tol. A UniformizedPolicy is
    evaluated as the mean of its relabeled components.
    """
    dp = _JointDP(spec, layout, budget)
    if isinstance(policy, UniformizedPolicy):
        comps = [policy.component(spec, layout, i) for i in range(len(policy.perms))]
        return np.mean([_evaluate_markov(dp, c, T, tol) for c in comps], axis=0)
    return _evaluate_markov(dp, policy, T, tol)


def _evaluate_markov(dp: "_JointDP", policy: CentralizedMarkovPolicy,
                     T: int | None, tol: float) -> np.ndarray:
    spec = dp.spec
    if T is not None:
        if not policy.stationary and policy.horizon < T:
            raise ValueError("policy schedule shorter than the requested horizon")
        values = None
        for t in reversed(range(T)):
            values = dp.policy_sweep(values, policy.matrix(t))
        return values
    if not policy.stationary:
        raise ValueError("infinite-horizon evaluation needs a stationary policy")
    threshold = vi_threshold(spec.beta, tol)
    cap = _vi_iteration_cap(spec.beta, max(spec.cost_bound(), tol) / (1.0 - spec.beta), threshold)
    mat = policy.matrix(0)
    values = np.zeros(dp.space.num_states)
    for _ in range(cap):
        new = dp.policy_sweep(values, mat)
        delta = float(np.max(np.abs(new - values)))
        values = new
        if delta <= threshold:
            return values
    raise RuntimeError("policy evaluation failed to converge within its contraction cap")


def initial_distribution(spec: TeamSpec, layout: PopulationLayout) -> np.ndarray:
    """Product law of iid-within-cluster initial states over joint state indices."""
    row = np.ones(1)
    for j in layout.membership:
        row = np.kron(row, spec.nu0.per_cluster[j])
    return row


def value_at_initial(spec: TeamSpec, layout: PopulationLayout, values: np.ndarray) -> float:
    return float(initial_distribution(spec, layout) @ values)


# ---------------------------------------------------------------------------
# Cluster permutations and uniformization
# ---------------------------------------------------------------------------

def permutation_count(layout: PopulationLayout) -> int:
    return int(np.prod([math.factorial(n) for n in layout.sizes], dtype=object))


def cluster_permutations(layout: PopulationLayout, limit: int = PERMUTATION_BUDGET,
                         seed: int | None = None, sample_size: int = 512):
    """Permutations of agents fixing every cluster setwise.

    Returns ``(perms, exhaustive)``: exhaustive mode lists all of them, the
    sampled mode (entered automatically past ``limit``) draws ``sample_size``
    with a mandatory seed.
    """
    total = permutation_count(layout)
    if total <= limit:
        per_block = [
            [list(p) for p in itertools.permutations(range(layout.cluster_slice(j).start,
                                                           layout.cluster_slice(j).stop))]
            for j in range(layout.num_clusters)
        ]
        perms = []
        for combo in itertools.product(*per_block):
            sigma = [i for block in combo for i in block]
            perms.append(sigma)
        return np.asarray(perms, dtype=np.int64), True
    if seed is None:
        raise ValueError("sampled permutation mode needs a seed")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5157)))
    out = np.empty((sample_size, layout.N), dtype=np.int64)
    for r in range(sample_size):
        sigma = np.arange(layout.N)
        for j in range(layout.num_clusters):
            sl = layout.cluster_slice(j)
            sigma[sl] = sl.start + rng.permutation(layout.sizes[j])
        out[r] = sigma
    return out, False


@dataclass(frozen=True)
class UniformizedPolicy:
    """Uniform mixture of the cluster-relabeled copies of a policy.

    Conceptually: draw a cluster permutation uniformly once, then play the
    relabeled policy. Every relabeled copy has exactly the base policy's
    expected cost (kernel, cost, and the iid-within-cluster initial law are all
    permutation-invariant), so the mixture preserves the nu0-averaged cost
    identically while its trajectory law is cluster-exchangeable.

    Stage-kernel averaging alone does not achieve this: mixing rows of
    permuted *states* changes behavior conditional on the realized state and
    can change multi-step costs. The exchangeable policy class is
    history-dependent, and this mixture is its canonical cost-preserving
    member; ``stage_average()`` provides the per-stage averaged Markov kernel
    for symmetry diagnostics.
    """

    base: CentralizedMarkovPolicy
    perms: np.ndarray

    def component(self, spec: TeamSpec, layout: PopulationLayout,
                  index: int) -> CentralizedMarkovPolicy:
        """The relabeled Markov policy for permutation ``index`` (bitwise canonical)."""
        space = JointSpace(spec, layout)
        sigma = self.perms[index]
        ps = space.permute_state_indices(sigma)
        pa = space.permute_action_indices(sigma)
        mats = tuple(m[np.ix_(ps, pa)] for m in self.base.matrices)
        return CentralizedMarkovPolicy(mats, self.base.stationary)

    def stage_average(self, spec: TeamSpec, layout: PopulationLayout) -> CentralizedMarkovPolicy:
        """Orbit-averaged stage kernels: joint (state, action) pairs sharing the
        per-cluster multiset of (x, u) pairs get one common mean value, so the
        stage-kernel symmetry pi(u^sigma|x^sigma) = pi(u|x) holds bitwise.
        Coincides with the base policy whenever that one is already symmetric."""
        space = JointSpace(spec, layout)
        xd = space.state_digits()
        ud = space.action_digits()
        S, A = space.num_states, space.num_actions
        codes = np.empty((S * A, layout.N), dtype=np.int64)
        for j in range(layout.num_clusters):
            sl = layout.cluster_slice(j)
            m = spec.action_sizes[j]
            block = (xd[:, None, sl] * m + ud[None, :, sl]).reshape(S * A, layout.sizes[j])
            codes[:, sl] = np.sort(block, axis=1)
        _, orbit = np.unique(codes, axis=0, return_inverse=True)
        orbit = orbit.ravel()

        def orbit_mean(mat):
            flat = np.asarray(mat).ravel()
            sums = np.bincount(orbit, weights=flat)
            cnts = np.bincount(orbit)
            out = (sums / cnts)[orbit].reshape(S, A)
            out.flags.writeable = False
            return out

        # rows stay probability vectors up to fp noise; skip renormalization so
        # orbit members remain bitwise identical
        mats = tuple(orbit_mean(m) for m in self.base.matrices)
        return CentralizedMarkovPolicy(mats, self.base.stationary)

    def relabeling_closure_gap(self, spec: TeamSpec, layout: PopulationLayout) -> float:
        """Exact exchangeability check of the mixture: permuting any component by
        any group element lands bitwise on another component (tau o sigma)."""
        space = JointSpace(spec, layout)
        lookup = {tuple(p): i for i, p in enumerate(self.perms)}
        gap = 0.0
        for tau in self.perms:
            pst = space.permute_state_indices(tau)
            pat = space.permute_action_indices(tau)
            for i in range(len(self.perms)):
                comp = self.component(spec, layout, i)
                composed = tuple(tau[self.perms[i]])
                other = self.component(spec, layout, lookup[composed])
                for a, b in zip(comp.matrices, other.matrices):
                    gap = max(gap, float(np.max(np.abs(a[np.ix_(pst, pat)] - b))))
        return gap


def uniformize_policy(spec: TeamSpec, layout: PopulationLayout,
                      policy: CentralizedMarkovPolicy,
                      limit: int = PERMUTATION_BUDGET) -> UniformizedPolicy:
    """Uniformize a policy over all cluster permutations (exact mixture).

    Refuses (rather than subsamples) past the permutation budget, since
    exactness is the point of this oracle.
    """
    if permutation_count(layout) > limit:
        raise BudgetExceededError("permutation group too large for exact uniformization")
    perms, _ = cluster_permutations(layout, limit)
    return UniformizedPolicy(policy, perms)


def policy_symmetry_gap(spec: TeamSpec, layout: PopulationLayout,
                        policy: CentralizedMarkovPolicy,
                        limit: int = PERMUTATION_BUDGET) -> float:
    """max over permutations and (x, u) of |pi(u^sigma|x^sigma) - pi(u|x)|."""
    perms, exhaustive = cluster_permutations(layout, limit)
    if not exhaustive:
        raise BudgetExceededError("symmetry check requires the exhaustive permutation mode")
    space = JointSpace(spec, layout)
    gap = 0.0
    for sigma in perms:
        ps = space.permute_state_indices(sigma)
        pa = space.permute_action_indices(sigma)
        for mat in policy.matrices:
            gap = max(gap, float(np.max(np.abs(mat[np.ix_(ps, pa)] - mat))))
    return gap


# ---------------------------------------------------------------------------
# Seeded simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationResult:
    costs: np.ndarray                    # per-rollout discounted total
    mean: float
    stderr: float
    measures: tuple[np.ndarray, ...]     # per cluster: (rollouts, T, n_j)


def _draw(u: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    """Batch inverse-CDF sampling along the last axis."""
    idx = (u[..., None] > cdf).sum(axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def _batch_kernels(spec: TeamSpec, j: int, mus: list[np.ndarray]) -> np.ndarray:
    """Kernel tensors for a batch of measure arrays; shape (batch, n, m, n)."""
    kf = spec.kernels
    batch = mus[0].shape[0]
    base = np.broadcast_to(kf.base[j], (batch,) + kf.base[j].shape)
    eps = float(kf.mix[j])
    if eps == 0.0:
        return base
    inter = np.zeros((batch,) + kf.base[j].shape)
    for l in range(spec.M):
        w = float(kf.neighbor_weights[j][l])
        if w:
            inter += w * np.einsum("ry,xuyn->rxun", mus[l], kf.interaction[j][l])
    return (1.0 - eps) * base + eps * inter


def _batch_costs(spec: TeamSpec, j: int, mus: list[np.ndarray]) -> np.ndarray:
    cf = spec.costs
    batch = mus[0].shape[0]
    out = np.broadcast_to(cf.base[j], (batch,) + cf.base[j].shape).copy()
    for l in range(spec.M):
        k = float(cf.weights[j][l])
        if k:
            out += k * (mus[l] @ cf.interaction[j][l].T)[:, :, None]
    return out


def rollout_seeds(seed: int, n_rollouts: int):
    """Counter-based per-rollout seed sequences derived from the master seed."""
    return [np.random.SeedSequence((seed, r)) for r in range(n_rollouts)]


def simulate(spec: TeamSpec, layout: PopulationLayout, policy: CentralizedMarkovPolicy,
             T: int, n_rollouts: int, seed: int, chunk: int = 256) -> SimulationResult:
    """Monte Carlo rollouts of the joint system under a centralized Markov policy.

    Each rollout consumes only its own substream (one action draw plus one
    transition draw per agent per step), so results are independent of how
    rollouts are batched.
    """
    space = JointSpace(spec, layout)
    xd = space.state_digits()
    N = layout.N
    seeds = rollout_seeds(seed, n_rollouts)
    nu_rows = [spec.nu0.per_cluster[j] for j in layout.membership]
    nu_cdfs = [np.cumsum(r) for r in nu_rows]
    betas = spec.beta ** np.arange(T)

    costs = np.empty(n_rollouts)
    measures = [np.empty((n_rollouts, T, spec.state_sizes[j])) for j in range(spec.M)]
    for start in range(0, n_rollouts, chunk):
        idx = range(start, min(start + chunk, n_rollouts))
        u_all = np.stack([np.random.default_rng(seeds[r]).random((T + 1) * N + T)
                          for r in idx])
        C = len(idx)
        # initial states: one uniform per agent
        digits = np.empty((C, N), dtype=np.int64)
        for i in range(N):
            digits[:, i] = _draw(u_all[:, i], nu_cdfs[i])
        step_costs = np.zeros((C, T))
        for t in range(T):
            block = u_all[:, N + t * (N + 1): N + (t + 1) * (N + 1)]
            s = np.ravel_multi_index(tuple(digits.T), space.state_radices)
            mus = []
            for j in range(spec.M):
                sl = layout.cluster_slice(j)
                cnt = np.stack([(digits[:, sl] == v).sum(axis=1)
                                for v in range(spec.state_sizes[j])], axis=1)
                mus.append(cnt / layout.sizes[j])
                measures[j][start:start + C, t] = mus[j]
            rows = policy.matrix(t)[s]
            a = _draw(block[:, 0], np.cumsum(rows, axis=1))
            ud = np.stack(np.unravel_index(a, space.action_radices), axis=1)
            carr = np.arange(C)
            for j in range(spec.M):
                sl = layout.cluster_slice(j)
                cm = _batch_costs(spec, j, mus)
                step_costs[:, t] += cm[carr[:, None], digits[:, sl], ud[:, sl]].sum(axis=1) \
                    / layout.sizes[j]
            nxt = np.empty_like(digits)
            tensors = [np.cumsum(_batch_kernels(spec, j, mus), axis=-1) for j in range(spec.M)]
            for i in range(N):
                cdf = tensors[layout.membership[i]][carr, digits[:, i], ud[:, i]]
                nxt[:, i] = _draw(block[:, 1 + i], cdf)
            digits = nxt
        costs[start:start + C] = step_costs @ betas
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return SimulationResult(costs, mean, stderr, tuple(measures))
