"""Composition enumeration and multinomial count distributions.

Shared by the count-state MDP, the simplex grids, and the exchangeable-law
experiments. All enumeration orders are deterministic: compositions are
generated with the first part descending, which makes "lowest index" a
well-defined tie-break everywhere downstream.
"""

from __future__ import annotations

import math
from functools import lru_cache
from itertools import product


def num_compositions(total: int, parts: int) -> int:
    """Number of ways to write ``total`` as an ordered sum of ``parts`` >= 0 terms."""
    if parts <= 0:
        raise ValueError("parts must be positive")
    return math.comb(total + parts - 1, parts - 1)


@lru_cache(maxsize=None)
def compositions(total: int, parts: int) -> tuple[tuple[int, ...], ...]:
    """All compositions of ``total`` into ``parts`` non-negative integers.

    First coordinate descending, recursively: (2,0), (1,1), (0,2).
    """
    if parts <= 0:
        raise ValueError("parts must be positive")
    if parts == 1:
        return ((total,),)
    out = []
    for head in range(total, -1, -1):
        for tail in compositions(total - head, parts - 1):
            out.append((head,) + tail)
    return tuple(out)


@lru_cache(maxsize=None)
def composition_index(total: int, parts: int) -> dict[tuple[int, ...], int]:
    """Rank of each composition in the enumeration order of :func:`compositions`."""
    return {c: i for i, c in enumerate(compositions(total, parts))}


def multinomial_coefficient(counts) -> int:
    total = sum(counts)
    coeff = 1
    rem = total
    for c in counts:
        coeff *= math.comb(rem, c)
        rem -= c
    return coeff


def multinomial_pmf(trials: int, probs) -> dict[tuple[int, ...], float]:
    """Exact pmf of the count vector of ``trials`` iid draws from ``probs``.

    Returned as {composition: probability} over compositions of ``trials``
    into ``len(probs)`` parts; zero-probability atoms are kept so the support
    is exactly the composition set.
    """
    n = len(probs)
    out = {}
    for comp in compositions(trials, n):
        p = float(multinomial_coefficient(comp))
        for c, q in zip(comp, probs):
            if c:
                p *= float(q) ** c
        out[comp] = p
    return out


def convolve_counts(a: dict, b: dict) -> dict:
    """Distribution of the sum of two independent count vectors."""
    out = {}
    for ka, pa in a.items():
        for kb, pb in b.items():
            key = tuple(x + y for x, y in zip(ka, kb))
            out[key] = out.get(key, 0.0) + pa * pb
    return out


def product_counts(per_cluster: list[dict]) -> dict:
    """Product measure over tuples of per-cluster count vectors."""
    out = {(): 1.0}
    for dist in per_cluster:
        nxt = {}
        for key, p in out.items():
            for comp, q in dist.items():
                nxt[key + (comp,)] = p * q
        out = nxt
    return out


def iter_tuples(radices):
    """All mixed-radix digit tuples, most significant digit first."""
    return product(*(range(r) for r in radices))
