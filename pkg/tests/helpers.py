"""Random instance generation shared across test modules."""

from __future__ import annotations

import numpy as np

from clusterfield.model import TeamSpec, spec_from_dict


def random_spec(rng: np.random.Generator, M: int | None = None,
                state_sizes=None, action_sizes=None, beta: float = 0.9,
                coupled: bool = True, cost_scale: float = 1.0) -> TeamSpec:
    """A fully random instance with affine measure coupling switched on or off."""
    if M is None:
        M = int(rng.integers(1, 3))
    if state_sizes is None:
        state_sizes = [int(rng.integers(2, 4)) for _ in range(M)]
    if action_sizes is None:
        action_sizes = [int(rng.integers(2, 4)) for _ in range(M)]

    def rows(shape, support):
        flat = rng.dirichlet(np.ones(support), size=int(np.prod(shape)))
        return flat.reshape(*shape, support)

    base = [rows((state_sizes[j], action_sizes[j]), state_sizes[j]).tolist()
            for j in range(M)]
    interaction = [
        [rows((state_sizes[j], action_sizes[j], state_sizes[l]), state_sizes[j]).tolist()
         for l in range(M)]
        for j in range(M)
    ]
    mix = (rng.uniform(0.1, 0.9, size=M) if coupled else np.zeros(M)).tolist()
    neighbor = rng.dirichlet(np.ones(M), size=M).tolist()
    cost_base = [(cost_scale * rng.uniform(0, 1, size=(state_sizes[j], action_sizes[j]))).tolist()
                 for j in range(M)]
    cost_inter = [
        [(rng.uniform(0, 1, size=(state_sizes[j], state_sizes[l]))).tolist() for l in range(M)]
        for j in range(M)
    ]
    weights = (rng.uniform(0, 0.8, size=(M, M)) if coupled else np.zeros((M, M))).tolist()
    nu0 = [rng.dirichlet(np.ones(n)).tolist() for n in state_sizes]
    return spec_from_dict({
        "M": M,
        "state_sizes": list(state_sizes),
        "action_sizes": list(action_sizes),
        "kernels": {"base": base, "interaction": interaction, "mix": mix,
                    "neighbor_weights": neighbor},
        "costs": {"base": cost_base, "interaction": cost_inter, "weights": weights},
        "beta": beta,
        "nu0": nu0,
        "horizon": None,
    })


def constant_cost_spec(rng: np.random.Generator, c0: float = 0.7, M: int = 1,
                       beta: float = 0.9, state_sizes=None, action_sizes=None) -> TeamSpec:
    """Random dynamics, constant component cost c0 (so the team stage cost is M*c0)."""
    spec = random_spec(rng, M=M, state_sizes=state_sizes, action_sizes=action_sizes,
                       beta=beta)
    doc = spec.to_dict()
    for j in range(spec.M):
        doc["costs"]["base"][j] = (c0 * np.ones((spec.state_sizes[j],
                                                 spec.action_sizes[j]))).tolist()
    doc["costs"]["weights"] = np.zeros((spec.M, spec.M)).tolist()
    return spec_from_dict(doc)


def identity_kernel_spec(rng: np.random.Generator, M: int = 1, beta: float = 0.9,
                         state_sizes=None) -> TeamSpec:
    """Frozen dynamics (every agent keeps its state), random costs."""
    spec = random_spec(rng, M=M, state_sizes=state_sizes, beta=beta)
    doc = spec.to_dict()
    for j in range(spec.M):
        n, m = spec.state_sizes[j], spec.action_sizes[j]
        eye = np.zeros((n, m, n))
        for x in range(n):
            eye[x, :, x] = 1.0
        doc["kernels"]["base"][j] = eye.tolist()
    doc["kernels"]["mix"] = [0.0] * spec.M
    return spec_from_dict(doc)
