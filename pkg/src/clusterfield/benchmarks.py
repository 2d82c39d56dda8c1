"""Shipped benchmark instances.

Three desk-scale instances exercised by the test suite and the CLI examples:

* ``single-binary``: one cluster, binary states/actions, congestion cost,
  discount 0.9. Small enough for the exact joint solver up to N ~ 10.
* ``two-cluster``: two asymmetrically coupled binary clusters, discount 0.6
  (keeps the exhaustive grid value iteration inside its runtime budget).
* ``decoupled``: two clusters with the measure coupling switched off entirely;
  sanity baseline where all solvers reduce to independent single-agent MDPs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import TeamSpec, save_instance, spec_from_dict


def _pull_tensor(n: int, m: int, ny: int, strength: float) -> list:
    """Interaction tensor whose rows drift toward the neighbor's state (mod n)."""
    out = np.empty((n, m, ny, n))
    for x in range(n):
        for u in range(m):
            for y in range(ny):
                row = np.full(n, (1.0 - strength) / n)
                row[y % n] += strength
                # mild (x, u) dependence keeps the tensor generic
                row = 0.9 * row + 0.1 * np.roll(row, (x + u) % n)
                out[x, u, y] = row / row.sum()
    return out.tolist()


def _uniform_tensor(n: int, m: int, ny: int) -> list:
    return np.full((n, m, ny, n), 1.0 / n).tolist()


def single_binary() -> TeamSpec:
    doc = {
        "M": 1,
        "state_sizes": [2],
        "action_sizes": [2],
        "kernels": {
            "base": [[
                [[0.8, 0.2], [0.25, 0.75]],
                [[0.3, 0.7], [0.85, 0.15]],
            ]],
            "interaction": [[_pull_tensor(2, 2, 2, 0.7)]],
            "mix": [0.35],
            "neighbor_weights": [[1.0]],
        },
        "costs": {
            "base": [[[0.10, 0.45], [0.50, 0.15]]],
            "interaction": [[[[1.0, 0.0], [0.0, 1.0]]]],
            "weights": [[1.5]],
        },
        "beta": 0.9,
        "nu0": [[0.5, 0.5]],
        "horizon": None,
    }
    return spec_from_dict(doc)


def two_cluster() -> TeamSpec:
    doc = {
        "M": 2,
        "state_sizes": [2, 2],
        "action_sizes": [2, 2],
        "kernels": {
            "base": [
                [
                    [[0.85, 0.15], [0.2, 0.8]],
                    [[0.35, 0.65], [0.75, 0.25]],
                ],
                [
                    [[0.7, 0.3], [0.4, 0.6]],
                    [[0.25, 0.75], [0.9, 0.1]],
                ],
            ],
            "interaction": [
                [_pull_tensor(2, 2, 2, 0.65), _pull_tensor(2, 2, 2, 0.8)],
                [_pull_tensor(2, 2, 2, 0.5), _pull_tensor(2, 2, 2, 0.6)],
            ],
            "mix": [0.4, 0.25],
            "neighbor_weights": [[0.3, 0.7], [0.6, 0.4]],
        },
        "costs": {
            "base": [
                [[0.20, 0.50], [0.60, 0.10]],
                [[0.15, 0.40], [0.55, 0.20]],
            ],
            "interaction": [
                [[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]],
                [[[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]],
            ],
            "weights": [[0.5, 0.3], [0.2, 0.4]],
        },
        "beta": 0.6,
        "nu0": [[0.5, 0.5], [0.25, 0.75]],
        "horizon": None,
    }
    return spec_from_dict(doc)


def decoupled() -> TeamSpec:
    doc = {
        "M": 2,
        "state_sizes": [2, 2],
        "action_sizes": [2, 2],
        "kernels": {
            "base": [
                [
                    [[0.9, 0.1], [0.3, 0.7]],
                    [[0.4, 0.6], [0.8, 0.2]],
                ],
                [
                    [[0.6, 0.4], [0.5, 0.5]],
                    [[0.2, 0.8], [0.7, 0.3]],
                ],
            ],
            "interaction": [
                [_uniform_tensor(2, 2, 2), _uniform_tensor(2, 2, 2)],
                [_uniform_tensor(2, 2, 2), _uniform_tensor(2, 2, 2)],
            ],
            "mix": [0.0, 0.0],
            "neighbor_weights": [[1.0, 0.0], [0.0, 1.0]],
        },
        "costs": {
            "base": [
                [[0.0, 0.3], [0.8, 0.2]],
                [[0.25, 0.05], [0.4, 0.6]],
            ],
            "interaction": [
                [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]],
                [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]],
            ],
            "weights": [[0.0, 0.0], [0.0, 0.0]],
        },
        "beta": 0.9,
        "nu0": [[1.0, 0.0], [0.5, 0.5]],
        "horizon": None,
    }
    return spec_from_dict(doc)


BENCHMARKS = {
    "single-binary": single_binary,
    "two-cluster": two_cluster,
    "decoupled": decoupled,
}


def benchmark(name: str) -> TeamSpec:
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None


def write_instances(directory) -> list[Path]:
    """Materialize the shipped benchmarks as JSON instance files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, builder in BENCHMARKS.items():
        path = directory / f"{name}.json"
        save_instance(builder(), path)
        paths.append(path)
    return paths
