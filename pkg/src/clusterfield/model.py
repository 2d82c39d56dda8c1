"""Problem instances: clusters, measure-coupled kernels, costs, and the measure algebra.

A team instance couples finitely many symmetric agent clusters. Cluster j has a
finite state space of size ``state_sizes[j]`` and action space of size
``action_sizes[j]``. Per-agent transition kernels and running costs depend on
the array of cluster marginals ``mu = (mu^1, ..., mu^M)`` affinely:

    kernel:  T_j(x'|x,u,mu) = (1-eps_j) A_j[x,u,x']
                              + eps_j * sum_l w_j[l] * sum_y mu^l(y) B_jl[x,u,y,x']
    cost:    c_j(x,u,mu)    = base_j[x,u] + sum_l kappa_jl * sum_y mu^l(y) g_jl[x,y]

Affinity makes both jointly continuous in mu by construction and keeps every
constraint set in the downstream solvers finitely representable.

All containers are immutable after construction (arrays are marked read-only);
operations are pure functions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-9

_NEG_SLACK = PROB_ATOL


class InstanceValidationError(ValueError):
    """An instance violates a structural invariant; names the first bad path."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.reason = message
        super().__init__(f"{path}: {message}")


class BudgetExceededError(RuntimeError):
    """An enumeration or solver budget was exceeded (instance too large)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def simplex_vector(weights, *, path: str = "simplex") -> np.ndarray:
    """Validate and renormalize a probability vector.

    Entries below -1e-9 or a total off 1 by more than 1e-9 are rejected
    (user error); anything inside the tolerance is clipped/renormalized
    (floating-point drift).
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise InstanceValidationError(path, "must be a non-empty 1-d probability vector")
    if not np.all(np.isfinite(w)):
        raise InstanceValidationError(path, "entries must be finite")
    if w.min() < -_NEG_SLACK:
        raise InstanceValidationError(path, f"entry {int(w.argmin())} is negative ({w.min():.3g})")
    total = float(w.sum())
    if abs(total - 1.0) > PROB_ATOL:
        raise InstanceValidationError(path, f"entries sum to {total!r}, expected 1 within {PROB_ATOL}")
    w = np.clip(w, 0.0, None)
    return _freeze(w / w.sum())


def _stochastic_tensor(arr, shape, *, path: str) -> np.ndarray:
    """Validate a tensor whose last axis is a probability vector for every slice."""
    a = np.asarray(arr, dtype=float)
    if a.shape != shape:
        raise InstanceValidationError(path, f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InstanceValidationError(path, "entries must be finite")
    flat = a.reshape(-1, shape[-1])
    for r, row in enumerate(flat):
        if row.min() < -_NEG_SLACK or abs(row.sum() - 1.0) > PROB_ATOL:
            idx = np.unravel_index(r, shape[:-1])
            sub = "".join(f"[{i}]" for i in idx)
            raise InstanceValidationError(f"{path}{sub}", "row is not a probability vector within 1e-9")
    flat = np.clip(flat, 0.0, None)
    flat /= flat.sum(axis=1, keepdims=True)
    return _freeze(flat.reshape(shape))


@dataclass(frozen=True, eq=False)
class MeasureArray:
    """Array of per-cluster probability vectors (the measure coordinate ``mu^{1:M}``)."""

    per_cluster: tuple[np.ndarray, ...]

    @classmethod
    def from_lists(cls, rows, *, path: str = "measure") -> "MeasureArray":
        return cls(tuple(simplex_vector(r, path=f"{path}[{j}]") for j, r in enumerate(rows)))

    @property
    def num_clusters(self) -> int:
        return len(self.per_cluster)

    def concat(self) -> np.ndarray:
        return np.concatenate(self.per_cluster)

    def allclose(self, other: "MeasureArray", atol: float = 1e-12) -> bool:
        return all(
            np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in zip(self.per_cluster, other.per_cluster)
        )

    def tolist(self):
        return [v.tolist() for v in self.per_cluster]


@dataclass(frozen=True, eq=False)
class KernelFamily:
    """Affine-in-measure transition kernels: base tensors, pairwise interaction, mixing."""

    base: tuple[np.ndarray, ...]                     # A_j[x, u, x']
    interaction: tuple[tuple[np.ndarray, ...], ...]  # B_jl[x, u, y, x']
    mix: np.ndarray                                  # eps_j in [0, 1]
    neighbor_weights: tuple[np.ndarray, ...]         # w_j over clusters

    @classmethod
    def validate(cls, base, interaction, mix, neighbor_weights, state_sizes, action_sizes,
                 *, path: str = "kernels") -> "KernelFamily":
        M = len(state_sizes)
        if len(base) != M:
            raise InstanceValidationError(f"{path}.base", f"expected {M} cluster tensors")
        vbase = tuple(
            _stochastic_tensor(base[j], (state_sizes[j], action_sizes[j], state_sizes[j]),
                               path=f"{path}.base[{j}]")
            for j in range(M)
        )
        if len(interaction) != M or any(len(row) != M for row in interaction):
            raise InstanceValidationError(f"{path}.interaction", f"expected {M}x{M} tensors")
        vinter = tuple(
            tuple(
                _stochastic_tensor(
                    interaction[j][l],
                    (state_sizes[j], action_sizes[j], state_sizes[l], state_sizes[j]),
                    path=f"{path}.interaction[{j}][{l}]")
                for l in range(M)
            )
            for j in range(M)
        )
        eps = np.asarray(mix, dtype=float)
        if eps.shape != (M,):
            raise InstanceValidationError(f"{path}.mix", f"expected {M} coupling weights")
        for j in range(M):
            if not (0.0 <= eps[j] <= 1.0):
                raise InstanceValidationError(f"{path}.mix[{j}]", "coupling weight must lie in [0, 1]")
        if len(neighbor_weights) != M:
            raise InstanceValidationError(f"{path}.neighbor_weights", f"expected {M} rows")
        vw = tuple(
            simplex_vector(neighbor_weights[j], path=f"{path}.neighbor_weights[{j}]")
            for j in range(M)
        )
        for j in range(M):
            if vw[j].shape != (M,):
                raise InstanceValidationError(f"{path}.neighbor_weights[{j}]",
                                              f"expected length {M}")
        return cls(vbase, vinter, _freeze(eps), vw)


@dataclass(frozen=True, eq=False)
class CostFamily:
    """Affine-in-measure running costs: base matrices plus weighted pairwise terms."""

    base: tuple[np.ndarray, ...]                     # base_j[x, u] >= 0
    interaction: tuple[tuple[np.ndarray, ...], ...]  # g_jl[x, y] >= 0
    weights: np.ndarray                              # kappa_jl >= 0

    @classmethod
    def validate(cls, base, interaction, weights, state_sizes, action_sizes,
                 *, path: str = "costs") -> "CostFamily":
        M = len(state_sizes)

        def nonneg(arr, shape, p):
            a = np.asarray(arr, dtype=float)
            if a.shape != shape:
                raise InstanceValidationError(p, f"expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise InstanceValidationError(p, "entries must be finite")
            if a.min() < 0.0:
                raise InstanceValidationError(p, "entries must be non-negative")
            return _freeze(a)

        if len(base) != M:
            raise InstanceValidationError(f"{path}.base", f"expected {M} cluster matrices")
        vbase = tuple(
            nonneg(base[j], (state_sizes[j], action_sizes[j]), f"{path}.base[{j}]")
            for j in range(M)
        )
        if len(interaction) != M or any(len(row) != M for row in interaction):
            raise InstanceValidationError(f"{path}.interaction", f"expected {M}x{M} matrices")
        vinter = tuple(
            tuple(
                nonneg(interaction[j][l], (state_sizes[j], state_sizes[l]),
                       f"{path}.interaction[{j}][{l}]")
                for l in range(M)
            )
            for j in range(M)
        )
        vweights = nonneg(weights, (M, M), f"{path}.weights")
        return cls(vbase, vinter, vweights)


@dataclass(frozen=True, eq=False)
class TeamSpec:
    """A full problem instance shared by every solver module."""

    M: int
    state_sizes: tuple[int, ...]
    action_sizes: tuple[int, ...]
    kernels: KernelFamily
    costs: CostFamily
    beta: float
    nu0: MeasureArray
    horizon: int | None = None  # None = infinite

    def __post_init__(self):
        if self.M < 1:
            raise InstanceValidationError("M", "need at least one cluster")
        if len(self.state_sizes) != self.M or any(n < 1 for n in self.state_sizes):
            raise InstanceValidationError("state_sizes", "need a positive size per cluster")
        if len(self.action_sizes) != self.M or any(n < 1 for n in self.action_sizes):
            raise InstanceValidationError("action_sizes", "need a positive size per cluster")
        if not (0.0 < self.beta < 1.0):
            raise InstanceValidationError("beta", "discount must lie strictly inside (0, 1)")
        if self.nu0.num_clusters != self.M:
            raise InstanceValidationError("nu0", f"expected {self.M} cluster marginals")
        for j in range(self.M):
            if self.nu0.per_cluster[j].shape != (self.state_sizes[j],):
                raise InstanceValidationError(f"nu0[{j}]", f"expected length {self.state_sizes[j]}")
        if self.horizon is not None and self.horizon < 1:
            raise InstanceValidationError("horizon", "finite horizon must be >= 1")

    # -- scale bounds ------------------------------------------------------

    def component_cost_max(self, j: int) -> float:
        """sup over (x, u, mu) of c_j; exact because the cost is affine in mu."""
        cf = self.costs
        extra = sum(
            cf.weights[j][l] * cf.interaction[j][l].max(axis=1)
            for l in range(self.M)
        )
        return float((cf.base[j] + np.asarray(extra)[:, None]).max())

    def cost_bound(self) -> float:
        """Upper bound on the per-stage team cost (sum of component sups)."""
        return float(sum(self.component_cost_max(j) for j in range(self.M)))

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "state_sizes": list(self.state_sizes),
            "action_sizes": list(self.action_sizes),
            "kernels": {
                "base": [a.tolist() for a in self.kernels.base],
                "interaction": [[b.tolist() for b in row] for row in self.kernels.interaction],
                "mix": self.kernels.mix.tolist(),
                "neighbor_weights": [w.tolist() for w in self.kernels.neighbor_weights],
            },
            "costs": {
                "base": [c.tolist() for c in self.costs.base],
                "interaction": [[g.tolist() for g in row] for row in self.costs.interaction],
                "weights": self.costs.weights.tolist(),
            },
            "beta": self.beta,
            "nu0": self.nu0.tolist(),
            "horizon": self.horizon,
        }

    def instance_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PopulationLayout:
    """Partition of N agents into non-empty clusters, blocks contiguous in agent order."""

    sizes: tuple[int, ...]
    membership: tuple[int, ...] = field(repr=False, default=())

    def __post_init__(self):
        if not self.sizes or any(n < 1 for n in self.sizes):
            raise InstanceValidationError("layout.sizes", "every cluster must be non-empty")
        expect = tuple(j for j, n in enumerate(self.sizes) for _ in range(n))
        if self.membership == ():
            object.__setattr__(self, "membership", expect)
        elif self.membership != expect:
            raise InstanceValidationError("layout.membership", "inconsistent with sizes")

    @classmethod
    def from_sizes(cls, sizes) -> "PopulationLayout":
        return cls(tuple(int(n) for n in sizes))

    @property
    def N(self) -> int:
        return sum(self.sizes)

    @property
    def num_clusters(self) -> int:
        return len(self.sizes)

    def cluster_slice(self, j: int) -> slice:
        start = sum(self.sizes[:j])
        return slice(start, start + self.sizes[j])


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def kernel_tensor(spec: TeamSpec, j: int, mu: MeasureArray) -> np.ndarray:
    """Evaluated kernel T_j(.|x,u,mu) for all (x,u), shape (n_j, m_j, n_j)."""
    kf = spec.kernels
    eps = float(kf.mix[j])
    if eps == 0.0:
        return kf.base[j]
    inter = np.zeros_like(kf.base[j])
    for l in range(spec.M):
        w = float(kf.neighbor_weights[j][l])
        if w:
            inter += w * np.einsum("xuyn,y->xun", kf.interaction[j][l], mu.per_cluster[l])
    return (1.0 - eps) * kf.base[j] + eps * inter


def cost_matrix(spec: TeamSpec, j: int, mu: MeasureArray) -> np.ndarray:
    """Evaluated cost c_j(x,u,mu) for all (x,u), shape (n_j, m_j)."""
    cf = spec.costs
    out = np.array(cf.base[j])
    for l in range(spec.M):
        k = float(cf.weights[j][l])
        if k:
            out += k * (cf.interaction[j][l] @ mu.per_cluster[l])[:, None]
    return out


def eval_kernel(spec: TeamSpec, j: int, x: int, u: int, mu: MeasureArray) -> np.ndarray:
    """Row T_j(.|x,u,mu); sums to 1 within tolerance by construction."""
    _check_index(spec, j, x, u)
    _check_measure(spec, mu)
    return kernel_tensor(spec, j, mu)[x, u]


def eval_cost(spec: TeamSpec, j: int, x: int, u: int, mu: MeasureArray) -> float:
    """Running cost c_j(x,u,mu) >= 0."""
    _check_index(spec, j, x, u)
    _check_measure(spec, mu)
    return float(cost_matrix(spec, j, mu)[x, u])


def _check_index(spec, j, x, u):
    if not (0 <= j < spec.M):
        raise IndexError(f"cluster index {j} out of range")
    if not (0 <= x < spec.state_sizes[j]):
        raise IndexError(f"state {x} out of range for cluster {j}")
    if not (0 <= u < spec.action_sizes[j]):
        raise IndexError(f"action {u} out of range for cluster {j}")


def _check_measure(spec, mu: MeasureArray):
    if mu.num_clusters != spec.M:
        raise InstanceValidationError("mu", f"expected {spec.M} cluster marginals")
    for j in range(spec.M):
        if mu.per_cluster[j].shape != (spec.state_sizes[j],):
            raise InstanceValidationError(f"mu[{j}]", f"expected length {spec.state_sizes[j]}")


def empirical_counts(spec: TeamSpec, layout: PopulationLayout, x_joint) -> tuple[tuple[int, ...], ...]:
    """Exact per-cluster state histograms as integer count tuples."""
    x = np.asarray(x_joint, dtype=int)
    if x.shape != (layout.N,):
        raise ValueError(f"joint state must have length {layout.N}")
    out = []
    for j in range(layout.num_clusters):
        block = x[layout.cluster_slice(j)]
        if block.size and (block.min() < 0 or block.max() >= spec.state_sizes[j]):
            raise IndexError(f"state out of range in cluster {j}")
        out.append(tuple(int(c) for c in np.bincount(block, minlength=spec.state_sizes[j])))
    return tuple(out)


def empirical_measure(spec: TeamSpec, layout: PopulationLayout, x_joint) -> MeasureArray:
    """Array of normalized per-cluster state histograms (exact counts / N_j)."""
    counts = empirical_counts(spec, layout, x_joint)
    return MeasureArray(tuple(
        _freeze(np.asarray(c, dtype=float) / layout.sizes[j]) for j, c in enumerate(counts)
    ))


def ensemble_cost(spec: TeamSpec, layout: PopulationLayout, x_joint, u_joint) -> float:
    """Stagewise team cost: per-cluster averages of component costs at the realized measures."""
    x = np.asarray(x_joint, dtype=int)
    u = np.asarray(u_joint, dtype=int)
    if x.shape != (layout.N,) or u.shape != (layout.N,):
        raise ValueError(f"joint arrays must have length {layout.N}")
    mu = empirical_measure(spec, layout, x_joint)
    total = 0.0
    for j in range(layout.num_clusters):
        sl = layout.cluster_slice(j)
        cm = cost_matrix(spec, j, mu)
        if u[sl].size and (u[sl].min() < 0 or u[sl].max() >= spec.action_sizes[j]):
            raise IndexError(f"action out of range in cluster {j}")
        total += float(cm[x[sl], u[sl]].sum()) / layout.sizes[j]
    return total


# ---------------------------------------------------------------------------
# JSON ingestion
# ---------------------------------------------------------------------------

_TOP_FIELDS = ("M", "state_sizes", "action_sizes", "kernels", "costs", "beta", "nu0", "horizon")


def spec_from_dict(doc: dict) -> TeamSpec:
    if not isinstance(doc, dict):
        raise InstanceValidationError("$", "instance document must be a JSON object")
    for key in doc:
        if key not in _TOP_FIELDS:
            raise InstanceValidationError(key, "unknown field")
    for key in ("M", "state_sizes", "action_sizes", "kernels", "costs", "beta", "nu0"):
        if key not in doc:
            raise InstanceValidationError(key, "missing required field")
    try:
        M = int(doc["M"])
    except (TypeError, ValueError):
        raise InstanceValidationError("M", "must be an integer") from None
    if M < 1:
        raise InstanceValidationError("M", "need at least one cluster")
    state_sizes = _int_list(doc["state_sizes"], M, "state_sizes")
    action_sizes = _int_list(doc["action_sizes"], M, "action_sizes")
    kdoc = doc["kernels"]
    if not isinstance(kdoc, dict):
        raise InstanceValidationError("kernels", "must be an object")
    for key in kdoc:
        if key not in ("base", "interaction", "mix", "neighbor_weights"):
            raise InstanceValidationError(f"kernels.{key}", "unknown field")
    for key in ("base", "interaction", "mix", "neighbor_weights"):
        if key not in kdoc:
            raise InstanceValidationError(f"kernels.{key}", "missing required field")
    kernels = KernelFamily.validate(kdoc["base"], kdoc["interaction"], kdoc["mix"],
                                    kdoc["neighbor_weights"], state_sizes, action_sizes)
    cdoc = doc["costs"]
    if not isinstance(cdoc, dict):
        raise InstanceValidationError("costs", "must be an object")
    for key in cdoc:
        if key not in ("base", "interaction", "weights"):
            raise InstanceValidationError(f"costs.{key}", "unknown field")
    for key in ("base", "interaction", "weights"):
        if key not in cdoc:
            raise InstanceValidationError(f"costs.{key}", "missing required field")
    costs = CostFamily.validate(cdoc["base"], cdoc["interaction"], cdoc["weights"],
                                state_sizes, action_sizes)
    try:
        beta = float(doc["beta"])
    except (TypeError, ValueError):
        raise InstanceValidationError("beta", "must be a number") from None
    nu0 = MeasureArray.from_lists(doc["nu0"], path="nu0")
    horizon = doc.get("horizon")
    if horizon in (None, "inf"):
        horizon = None
    else:
        try:
            horizon = int(horizon)
        except (TypeError, ValueError):
            raise InstanceValidationError("horizon", 'must be a positive integer, null, or "inf"') from None
    return TeamSpec(M, tuple(state_sizes), tuple(action_sizes), kernels, costs, beta, nu0, horizon)


def _int_list(raw, M, path):
    if not isinstance(raw, (list, tuple)) or len(raw) != M:
        raise InstanceValidationError(path, f"expected a list of {M} integers")
    out = []
    for j, v in enumerate(raw):
        try:
            n = int(v)
        except (TypeError, ValueError):
            raise InstanceValidationError(f"{path}[{j}]", "must be an integer") from None
        if n < 1:
            raise InstanceValidationError(f"{path}[{j}]", "must be >= 1")
        out.append(n)
    return out


def load_instance(path) -> TeamSpec:
    """Read a TeamSpec from a JSON file; malformed documents name the first bad path."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceValidationError("$", f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return spec_from_dict(doc)


def save_instance(spec: TeamSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
