"""Numerical certification experiments: the with-replacement extension bound for
cluster-exchangeable laws, propagation of chaos under induced policies, and the
value-convergence sandwich for truncated policies.

Exchangeable laws live on finitely many agents per cluster with finite symbol
alphabets. A cluster-exchangeable law is constant on permutation orbits, so it
is determined by its histogram ("signature") probabilities; both the

  * with-replacement sampled law (iid uniform index draws per cluster), and
  * the first-k marginal (sequential draws without replacement)

are computed exactly from the signature probabilities. With k_j = 1 everywhere
the two formulas coincide term by term, so their total variation distance is
exactly zero, as required.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .combinat import compositions, composition_index, num_compositions
from .exact import solve_exact_finite, solve_exact_infinite, value_at_initial
from .induction import (
    DecentralizedPolicy,
    evaluate_truncated_exact,
    flow_cost,
    induce_policy,
    simulate_truncated,
    split_population,
)
from .meanfield import MeanFieldSolution
from .model import PopulationLayout, TeamSpec

_ORBIT_ATOL = 1e-12


def tv_distance(p, q) -> float:
    """Total variation distance between two finite laws on a common support."""
    p = np.asarray(p, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    if p.shape != q.shape:
        raise ValueError("laws must share a common support")
    return 0.5 * float(np.abs(p - q).sum())


class _ShapeTables:
    """Cached per-(cluster sizes, symbol sizes) atom structure."""

    def __init__(self, cluster_sizes, symbol_sizes):
        self.cluster_sizes = cluster_sizes
        self.symbol_sizes = symbol_sizes
        radices = [s for n, s in zip(cluster_sizes, symbol_sizes) for _ in range(n)]
        self.num_atoms = int(np.prod(radices))
        digits = np.empty((self.num_atoms, len(radices)), dtype=np.int8)
        for i, g in enumerate(np.unravel_index(np.arange(self.num_atoms), radices)):
            digits[:, i] = g
        # orbit ids: per-cluster sorted blocks
        sorted_blocks = np.empty_like(digits)
        offset = 0
        sig_ranks = []
        self.sig_sizes = []
        for n, s in zip(cluster_sizes, symbol_sizes):
            block = digits[:, offset:offset + n]
            sorted_blocks[:, offset:offset + n] = np.sort(block, axis=1)
            counts = np.stack([(block == v).sum(axis=1) for v in range(s)], axis=1)
            ranks = _rank_compositions(counts, n, s)
            sig_ranks.append(ranks)
            self.sig_sizes.append(num_compositions(n, s))
            offset += n
        _, orbit = np.unique(sorted_blocks, axis=0, return_inverse=True)
        self.orbit = orbit.ravel().astype(np.int32)
        self.orbit_counts = np.bincount(self.orbit)
        self.sig_flat = np.ravel_multi_index(tuple(sig_ranks), self.sig_sizes).astype(np.int32)


def _rank_compositions(counts: np.ndarray, total: int, parts: int) -> np.ndarray:
    index = composition_index(total, parts)
    table = np.empty(len(index), dtype=np.int64)
    base = total + 1
    codes = np.array([sum(c * base ** i for i, c in enumerate(comp))
                      for comp in compositions(total, parts)])
    order = np.argsort(codes)
    atom_codes = counts @ (base ** np.arange(parts))
    pos = np.searchsorted(codes[order], atom_codes)
    del table
    return order[pos]


_SHAPE_CACHE: dict = {}


def _tables(cluster_sizes, symbol_sizes) -> _ShapeTables:
    key = (tuple(cluster_sizes), tuple(symbol_sizes))
    if key not in _SHAPE_CACHE:
        _SHAPE_CACHE[key] = _ShapeTables(*key)
    return _SHAPE_CACHE[key]


@dataclass(frozen=True, eq=False)
class CExLaw:
    """A cluster-exchangeable law on N_j agents per cluster with finite alphabets.

    ``probs`` is flat over configurations (agents in cluster-block order, first
    agent most significant)."""

    cluster_sizes: tuple[int, ...]
    symbol_sizes: tuple[int, ...]
    probs: np.ndarray

    def __post_init__(self):
        tables = _tables(self.cluster_sizes, self.symbol_sizes)
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size != tables.num_atoms:
            raise ValueError(f"expected {tables.num_atoms} atoms, got {p.size}")
        if abs(float(p.sum()) - 1.0) > _ORBIT_ATOL:
            raise ValueError("probabilities must sum to 1 within 1e-12")
        if p.min() < 0.0:
            raise ValueError("probabilities must be non-negative")
        means = np.bincount(tables.orbit, weights=p) / tables.orbit_counts
        if float(np.max(np.abs(p - means[tables.orbit]))) > _ORBIT_ATOL:
            raise ValueError("law is not cluster-exchangeable within 1e-12")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(s for n, s in zip(self.cluster_sizes, self.symbol_sizes)
                     for _ in range(n))

    def signature_probs(self) -> np.ndarray:
        """Joint histogram probabilities, shaped over per-cluster signature ranks."""
        tables = _tables(self.cluster_sizes, self.symbol_sizes)
        flat = np.bincount(tables.sig_flat, weights=self.probs,
                           minlength=int(np.prod(tables.sig_sizes)))
        return flat.reshape(tables.sig_sizes)


def symmetrize_law(cluster_sizes, symbol_sizes, weights) -> CExLaw:
    """Project an arbitrary law onto the cluster-exchangeable class by orbit averaging."""
    tables = _tables(tuple(cluster_sizes), tuple(symbol_sizes))
    p = np.asarray(weights, dtype=float).reshape(-1)
    if p.size != tables.num_atoms:
        raise ValueError(f"expected {tables.num_atoms} atoms")
    if p.min() < 0 or p.sum() <= 0:
        raise ValueError("weights must be non-negative and not all zero")
    p = p / p.sum()
    means = np.bincount(tables.orbit, weights=p) / tables.orbit_counts
    sym = means[tables.orbit]
    sym /= sym.sum()
    return CExLaw(tuple(cluster_sizes), tuple(symbol_sizes), sym)


def random_cex_law(rng: np.random.Generator, cluster_sizes, symbol_sizes) -> CExLaw:
    tables = _tables(tuple(cluster_sizes), tuple(symbol_sizes))
    return symmetrize_law(cluster_sizes, symbol_sizes, rng.exponential(size=tables.num_atoms))


def first_marginal(law: CExLaw, k) -> np.ndarray:
    """Marginal over the first k_j agents of each cluster, by direct axis summation."""
    k = tuple(int(v) for v in k)
    _check_k(law, k)
    arr = law.probs.reshape(law.shape)
    drop = []
    offset = 0
    for n, kj in zip(law.cluster_sizes, k):
        drop.extend(range(offset + kj, offset + n))
        offset += n
    if drop:
        arr = arr.sum(axis=tuple(drop))
    return arr.reshape(-1)


def _check_k(law: CExLaw, k):
    if len(k) != len(law.cluster_sizes):
        raise ValueError("need one sample count per cluster")
    for kj, n in zip(k, law.cluster_sizes):
        if not (1 <= kj <= n):
            raise ValueError(f"sample counts must satisfy 1 <= k_j <= N_j (got {kj}/{n})")


_AMAT_CACHE: dict = {}


def _sampling_matrices(N: int, s: int, k: int):
    """Per-signature sampling laws over k-symbol configurations for one cluster.

    Returns (with_replacement, without_replacement), both (H, s**k): row h is
    the law of k draws from the histogram h, iid-uniform indices resp. the
    first-k agents of an orbit-uniform arrangement."""
    key = (N, s, k)
    if key in _AMAT_CACHE:
        return _AMAT_CACHE[key]
    sigs = np.asarray(compositions(N, s), dtype=np.int64)   # (H, s)
    H = sigs.shape[0]
    m = sigs / N
    with_rep = np.ones((H, 1))
    for _ in range(k):
        with_rep = (with_rep[:, :, None] * m[:, None, :]).reshape(H, -1)
    without = np.empty((H, s ** k))
    denom = math.perm(N, k)
    cfg_hists = {}
    for cfg in range(s ** k):
        digitos = np.unravel_index(cfg, (s,) * k)
        hist = tuple(int((np.asarray(digitos) == v).sum()) for v in range(s))
        cfg_hists.setdefault(hist, []).append(cfg)
    for hist, cfgs in cfg_hists.items():
        col = np.ones(H)
        for v, c in enumerate(hist):
            for step in range(c):
                col = col * (sigs[:, v] - step)
        col = np.where(col > 0, col, 0.0) / denom
        for cfg in cfgs:
            without[:, cfg] = col
    _AMAT_CACHE[key] = (with_rep, without)
    return with_rep, without


def _contract_signature(sig_probs: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
    x = sig_probs
    for mat in mats:
        x = np.tensordot(mat, x.reshape(x.shape[0], -1) if x.ndim > 1 else x[:, None],
                         axes=(0, 0))
        # x: (cfg_j, rest); cycle so the next cluster's signature axis leads
        x = np.ascontiguousarray(x.T)
    return x.reshape(-1)


def with_replacement_law(law: CExLaw, k) -> np.ndarray:
    """Exact law of k_j iid-uniform-index samples per cluster (with replacement).

    Computed by conditioning on the histogram signature: given the realized
    configuration, the samples are iid from the empirical measures, so the law
    is a signature-weighted mixture of product powers. Algebraically identical
    to summing over all N_j^{k_j} index assignments per cluster.
    """
    k = tuple(int(v) for v in k)
    _check_k(law, k)
    sig = law.signature_probs()
    mats = [_sampling_matrices(n, s, kj)[0]
            for n, s, kj in zip(law.cluster_sizes, law.symbol_sizes, k)]
    return _contract_signature(sig, mats)


def first_marginal_signature(law: CExLaw, k) -> np.ndarray:
    """First-k marginal via the signature (sampling without replacement)."""
    k = tuple(int(v) for v in k)
    _check_k(law, k)
    sig = law.signature_probs()
    mats = [_sampling_matrices(n, s, kj)[1]
            for n, s, kj in zip(law.cluster_sizes, law.symbol_sizes, k)]
    return _contract_signature(sig, mats)


@dataclass(frozen=True)
class BoundCheck:
    cluster_sizes: tuple[int, ...]
    symbol_sizes: tuple[int, ...]
    k: tuple[int, ...]
    tv: float
    bound: float              # closed-form bound 1 - prod_j (1 - k_j(k_j-1)/(2 N_j))
    exact_bound: float        # 1 - prod_j prod_{s<k_j} (1 - s/N_j), valid for all k
    closed_form_valid: bool   # closed form provably dominates the exact bound here
    passed: bool


def replacement_bound(cluster_sizes, k) -> float:
    """Closed-form bound. Its derivation relaxes each cluster's birthday factor to
    1 - k_j(k_j-1)/(2 N_j); with two or more of those negative the product flips
    sign and the closed form stops being an upper bound (see exact_replacement_bound)."""
    prod = 1.0
    for n, kj in zip(cluster_sizes, k):
        prod *= 1.0 - kj * (kj - 1) / (2.0 * n)
    return 1.0 - prod


def exact_replacement_bound(cluster_sizes, k) -> float:
    """One minus the probability that all within-cluster index draws are distinct."""
    prod = 1.0
    for n, kj in zip(cluster_sizes, k):
        for step in range(1, kj):
            prod *= 1.0 - step / n
    return 1.0 - prod


def closed_form_applicable(cluster_sizes, k) -> bool:
    """The closed form is a valid relaxation unless two clusters flip sign."""
    negative = sum(1 for n, kj in zip(cluster_sizes, k) if kj * (kj - 1) > 2 * n)
    return negative <= 1


def check_replacement_bound(law: CExLaw, k) -> BoundCheck:
    """Total variation between the first-k marginal and the with-replacement law,
    against the exchangeable-extension bounds.

    The distance is always checked against the distinct-indices bound; the
    closed form is additionally checked wherever it is a valid relaxation."""
    k = tuple(int(v) for v in k)
    tv = tv_distance(first_marginal_signature(law, k), with_replacement_law(law, k))
    bound = replacement_bound(law.cluster_sizes, k)
    exact = exact_replacement_bound(law.cluster_sizes, k)
    applicable = closed_form_applicable(law.cluster_sizes, k)
    passed = tv <= exact + 1e-12 and (not applicable or tv <= bound + 1e-12)
    return BoundCheck(law.cluster_sizes, law.symbol_sizes, k, tv, bound, exact,
                      applicable, passed)


@dataclass(frozen=True)
class BoundSweep:
    checks: tuple[BoundCheck, ...]
    all_passed: bool
    unit_k_exact: bool         # every k_j = 1 case gave tv exactly 0
    max_exact_excess: float    # max tv - exact_bound over the whole sweep
    max_closed_excess: float   # max tv - bound where the closed form applies


def replacement_bound_sweep(seed: int, n_laws: int = 500, max_cluster_size: int = 6,
                            symbol_choices=(2, 3), cluster_counts=(1, 2)) -> BoundSweep:
    """Randomized sweep over orbit-symmetrized laws and all admissible k arrays."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7438)))
    checks = []
    unit_exact = True
    max_exact = -math.inf
    max_closed = -math.inf
    for _ in range(n_laws):
        M = int(rng.choice(cluster_counts))
        sizes = tuple(int(rng.integers(1, max_cluster_size + 1)) for _ in range(M))
        symbols = tuple(int(rng.choice(symbol_choices)) for _ in range(M))
        law = random_cex_law(rng, sizes, symbols)
        for k in _all_k(sizes):
            chk = check_replacement_bound(law, k)
            checks.append(chk)
            if all(kj == 1 for kj in k) and chk.tv != 0.0:
                unit_exact = False
            max_exact = max(max_exact, chk.tv - chk.exact_bound)
            if chk.closed_form_valid:
                max_closed = max(max_closed, chk.tv - chk.bound)
    return BoundSweep(tuple(checks), all(c.passed for c in checks), unit_exact,
                      max_exact, max_closed)


def _all_k(sizes):
    import itertools
    return itertools.product(*(range(1, n + 1) for n in sizes))


# ---------------------------------------------------------------------------
# Propagation of chaos
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChaosRow:
    N: int
    mean_gap: float
    stderr: float


@dataclass(frozen=True)
class ChaosReport:
    rows: tuple[ChaosRow, ...]
    nonincreasing_within_se: bool
    strictly_decreasing: bool
    final_gap: float


def chaos_experiment(spec: TeamSpec, policy: DecentralizedPolicy, N_schedule, T: int,
                     n_rollouts: int, seed: int, proportions=None) -> ChaosReport:
    """Mean (over rollouts and steps) of the worst-cluster TV distance between the
    realized empirical measures and the deterministic flow, per population size."""
    rows = []
    for idx, N in enumerate(N_schedule):
        layout = split_population(spec.M, int(N), proportions)
        sim = simulate_truncated(spec, layout, policy, T, n_rollouts, seed + idx)
        gaps = np.zeros((n_rollouts, T))
        for t in range(T):
            ref = policy.measure(t)
            per_cluster = np.stack([
                0.5 * np.abs(sim.measures[j][:, t, :] - ref.per_cluster[j][None, :]).sum(axis=1)
                for j in range(spec.M)
            ])
            gaps[:, t] = per_cluster.max(axis=0)
        per_rollout = gaps.mean(axis=1)
        stderr = float(per_rollout.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
        rows.append(ChaosRow(int(N), float(per_rollout.mean()), stderr))
    nonincr = True
    strict = True
    for prev, cur in zip(rows, rows[1:]):
        pooled = math.hypot(prev.stderr, cur.stderr)
        if cur.mean_gap > prev.mean_gap + pooled:
            nonincr = False
        if cur.mean_gap >= prev.mean_gap:
            strict = False
    return ChaosReport(tuple(rows), nonincr, strict, rows[-1].mean_gap)


# ---------------------------------------------------------------------------
# Value convergence sandwich
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueRow:
    N: int
    optimal: float          # exact team optimum from nu0
    truncated: float        # exact cost of the truncated induced policy
    mean_field: float       # cost of the greedy mean-field policy
    left_margin: float      # truncated - optimal (must be >= -1e-9)


@dataclass(frozen=True)
class ValueConvergenceReport:
    rows: tuple[ValueRow, ...]
    sandwich_ok: bool
    gap_shrinks: bool       # optimality gap at the largest N <= gap at the smallest


def value_convergence_experiment(spec: TeamSpec, solution: MeanFieldSolution, Ns,
                                 tol: float = 1e-10, T: int | None = None,
                                 proportions=None) -> ValueConvergenceReport:
    """Exact optimum vs exact truncated-policy cost vs mean-field cost, per N."""
    policy = induce_policy(solution, spec)
    mf = flow_cost(spec, policy)
    rows = []
    for N in Ns:
        layout = split_population(spec.M, int(N), proportions)
        if T is None:
            sol = solve_exact_infinite(spec, layout, tol)
            opt = value_at_initial(spec, layout, sol.values[0])
            trunc = evaluate_truncated_exact(spec, layout, policy, tol=tol)
        else:
            sol = solve_exact_finite(spec, layout, T)
            opt = value_at_initial(spec, layout, sol.values[0])
            trunc = _finite_truncated_cost(spec, layout, policy, T)
        rows.append(ValueRow(int(N), opt, trunc, mf, trunc - opt))
    sandwich = all(r.left_margin >= -1e-9 for r in rows)
    shrinks = rows[-1].left_margin <= rows[0].left_margin + 1e-12
    return ValueConvergenceReport(tuple(rows), sandwich, shrinks)


def _finite_truncated_cost(spec: TeamSpec, layout: PopulationLayout,
                           policy: DecentralizedPolicy, T: int) -> float:
    from .exact import _JointDP

    dp = _JointDP(spec, layout)
    values = None
    for t in reversed(range(T)):
        joint = np.ones((1, 1))
        for j in layout.membership:
            joint = np.kron(joint, policy.kernel(t, j))
        values = dp.policy_sweep(values, joint)
    return value_at_initial(spec, layout, values)
