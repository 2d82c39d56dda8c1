import json

import numpy as np
import pytest

import clusterfield as cf
from clusterfield.model import (
    InstanceValidationError,
    MeasureArray,
    PopulationLayout,
    cost_matrix,
    empirical_measure,
    ensemble_cost,
    eval_cost,
    eval_kernel,
    kernel_tensor,
    simplex_vector,
    spec_from_dict,
)

from .helpers import random_spec


def _binary_spec(eps, A_row, B_row, n_actions=1):
    """One binary cluster with a single shared interaction row."""
    A = [[list(A_row)] * n_actions, [[0.4, 0.6]] * n_actions]
    B = [[[list(B_row), list(B_row)]] * n_actions, [[list(B_row), list(B_row)]] * n_actions]
    return spec_from_dict({
        "M": 1,
        "state_sizes": [2],
        "action_sizes": [n_actions],
        "kernels": {"base": [A], "interaction": [[B]], "mix": [eps],
                    "neighbor_weights": [[1.0]]},
        "costs": {"base": [[[0.0]] * 2], "interaction": [[[[0.0, 0.0]] * 2]],
                  "weights": [[0.0]]},
        "beta": 0.9,
        "nu0": [[0.5, 0.5]],
    })


class TestSimplexVector:
    def test_renormalizes_within_tolerance(self):
        v = simplex_vector([0.5, 0.5 + 5e-10])
        assert v.sum() == 1.0

    def test_rejects_negative(self):
        with pytest.raises(InstanceValidationError):
            simplex_vector([1.1, -0.1])

    def test_rejects_bad_total(self):
        with pytest.raises(InstanceValidationError):
            simplex_vector([0.5, 0.6])

    def test_immutable(self):
        v = simplex_vector([0.3, 0.7])
        with pytest.raises(ValueError):
            v[0] = 1.0


class TestEvalKernel:
    def test_no_coupling_ignores_measure(self):
        rng = np.random.default_rng(0)
        spec = random_spec(rng, M=2, coupled=False)
        mu1 = MeasureArray.from_lists([rng.dirichlet(np.ones(n)) for n in spec.state_sizes])
        mu2 = MeasureArray.from_lists([rng.dirichlet(np.ones(n)) for n in spec.state_sizes])
        row1 = eval_kernel(spec, 0, 0, 0, mu1)
        row2 = eval_kernel(spec, 0, 0, 0, mu2)
        assert np.array_equal(row1, row2)
        assert np.array_equal(row1, spec.kernels.base[0][0, 0])

    def test_identity_interaction_full_coupling(self):
        # B[x,u,y,:] = point mass at x, eps = 1 -> kernel is a point mass at x
        doc = {
            "M": 1, "state_sizes": [2], "action_sizes": [1],
            "kernels": {
                "base": [[[[0.5, 0.5]], [[0.5, 0.5]]]],
                "interaction": [[[[[[1.0, 0.0], [1.0, 0.0]]], [[[0.0, 1.0], [0.0, 1.0]]]]]],
                "mix": [1.0], "neighbor_weights": [[1.0]],
            },
            "costs": {"base": [[[0.0], [0.0]]], "interaction": [[[[0.0, 0.0], [0.0, 0.0]]]],
                      "weights": [[0.0]]},
            "beta": 0.9, "nu0": [[0.5, 0.5]],
        }
        spec = spec_from_dict(doc)
        mu = MeasureArray.from_lists([[0.3, 0.7]])
        assert np.allclose(eval_kernel(spec, 0, 0, 0, mu), [1.0, 0.0])
        assert np.allclose(eval_kernel(spec, 0, 1, 0, mu), [0.0, 1.0])

    def test_affine_combination_oracle(self):
        # eps=0.5, base row [.7,.3], interaction row [.2,.8] at mu=(.5,.5)
        spec = _binary_spec(0.5, [0.7, 0.3], [0.2, 0.8])
        mu = MeasureArray.from_lists([[0.5, 0.5]])
        row = eval_kernel(spec, 0, 0, 0, mu)
        oracle = 0.5 * np.array([0.7, 0.3]) + 0.5 * np.array([0.2, 0.8])
        assert np.abs(row - oracle).max() < 1e-12

    def test_out_of_range_indices(self):
        spec = _binary_spec(0.5, [0.7, 0.3], [0.2, 0.8])
        mu = MeasureArray.from_lists([[0.5, 0.5]])
        with pytest.raises(IndexError):
            eval_kernel(spec, 0, 2, 0, mu)
        with pytest.raises(IndexError):
            eval_kernel(spec, 1, 0, 0, mu)

    def test_row_stochastic_randomized_sweep(self):
        # >= 1e4 random (j, x, u, mu) tuples across random instances
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(10):
            spec = random_spec(rng)
            for _ in range(40):
                mu = MeasureArray.from_lists(
                    [rng.dirichlet(np.ones(n)) for n in spec.state_sizes])
                for j in range(spec.M):
                    tensor = kernel_tensor(spec, j, mu)
                    assert tensor.min() >= 0
                    assert np.abs(tensor.sum(axis=-1) - 1).max() < 1e-9
                    checked += tensor.shape[0] * tensor.shape[1]
        assert checked >= 10_000

    def test_affine_in_measure(self):
        rng = np.random.default_rng(21)
        spec = random_spec(rng, M=2)
        mus = [MeasureArray.from_lists([rng.dirichlet(np.ones(n)) for n in spec.state_sizes])
               for _ in range(2)]
        for lam in (0.0, 0.25, 0.5, 1.0):
            mix = MeasureArray(tuple(
                lam * a + (1 - lam) * b
                for a, b in zip(mus[0].per_cluster, mus[1].per_cluster)))
            for j in range(spec.M):
                left = kernel_tensor(spec, j, mix)
                right = lam * kernel_tensor(spec, j, mus[0]) \
                    + (1 - lam) * kernel_tensor(spec, j, mus[1])
                assert np.abs(left - right).max() < 1e-9
                cleft = cost_matrix(spec, j, mix)
                cright = lam * cost_matrix(spec, j, mus[0]) \
                    + (1 - lam) * cost_matrix(spec, j, mus[1])
                assert np.abs(cleft - cright).max() < 1e-9


class TestEvalCost:
    def test_no_coupling_returns_base(self):
        rng = np.random.default_rng(3)
        spec = random_spec(rng, M=2, coupled=False)
        mu = MeasureArray.from_lists([rng.dirichlet(np.ones(n)) for n in spec.state_sizes])
        assert eval_cost(spec, 1, 0, 1, mu) == spec.costs.base[1][0, 1]

    def test_unit_interaction_normalization(self):
        doc = {
            "M": 1, "state_sizes": [2], "action_sizes": [1],
            "kernels": {"base": [[[[1.0, 0.0]], [[0.0, 1.0]]]],
                        "interaction": [[[[[[0.5, 0.5], [0.5, 0.5]]],
                                          [[[0.5, 0.5], [0.5, 0.5]]]]]],
                        "mix": [0.0], "neighbor_weights": [[1.0]]},
            "costs": {"base": [[[0.0], [0.0]]],
                      "interaction": [[[[1.0, 1.0], [1.0, 1.0]]]],
                      "weights": [[1.0]]},
            "beta": 0.9, "nu0": [[0.5, 0.5]],
        }
        spec = spec_from_dict(doc)
        mu = MeasureArray.from_lists([[0.2, 0.8]])
        assert abs(eval_cost(spec, 0, 0, 0, mu) - 1.0) < 1e-12

    def test_brute_force_summation_oracle(self):
        rng = np.random.default_rng(11)
        spec = random_spec(rng, M=2)
        mu = MeasureArray.from_lists([rng.dirichlet(np.ones(n)) for n in spec.state_sizes])
        for j in range(spec.M):
            for x in range(spec.state_sizes[j]):
                for u in range(spec.action_sizes[j]):
                    ref = float(spec.costs.base[j][x, u])
                    for l in range(spec.M):
                        for y in range(spec.state_sizes[l]):
                            ref += float(spec.costs.weights[j][l]) \
                                * float(mu.per_cluster[l][y]) \
                                * float(spec.costs.interaction[j][l][x, y])
                    assert abs(eval_cost(spec, j, x, u, mu) - ref) < 1e-12


class TestEnsembleCost:
    def test_one_agent_per_cluster(self):
        rng = np.random.default_rng(5)
        spec = random_spec(rng, M=2)
        layout = PopulationLayout.from_sizes([1, 1])
        x, u = [1, 0], [0, 1]
        mu = empirical_measure(spec, layout, x)
        ref = eval_cost(spec, 0, 1, 0, mu) + eval_cost(spec, 1, 0, 1, mu)
        assert abs(ensemble_cost(spec, layout, x, u) - ref) < 1e-12

    def test_cluster_permutation_invariance(self):
        rng = np.random.default_rng(6)
        spec = random_spec(rng, M=2)
        layout = PopulationLayout.from_sizes([2, 2])
        x = [1, 0, 1, 0]
        u = [0, 1, 1, 0]
        base = ensemble_cost(spec, layout, x, u)
        for sigma in ([1, 0, 2, 3], [0, 1, 3, 2], [1, 0, 3, 2]):
            xs = [x[i] for i in sigma]
            us = [u[i] for i in sigma]
            assert abs(ensemble_cost(spec, layout, xs, us) - base) < 1e-12
            mu1 = empirical_measure(spec, layout, x)
            mu2 = empirical_measure(spec, layout, xs)
            assert mu1.allclose(mu2, atol=0)


class TestEmpiricalMeasure:
    def test_binary_half(self):
        rng = np.random.default_rng(0)
        spec = random_spec(rng, M=1, state_sizes=[2])
        layout = PopulationLayout.from_sizes([4])
        mu = empirical_measure(spec, layout, [0, 0, 1, 1])
        assert np.array_equal(mu.per_cluster[0], [0.5, 0.5])

    def test_point_mass(self):
        rng = np.random.default_rng(0)
        spec = random_spec(rng, M=1, state_sizes=[3])
        layout = PopulationLayout.from_sizes([5])
        mu = empirical_measure(spec, layout, [0] * 5)
        assert np.array_equal(mu.per_cluster[0], [1.0, 0.0, 0.0])


class TestJsonIngestion:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        spec = random_spec(rng, M=2)
        path = tmp_path / "inst.json"
        cf.save_instance(spec, path)
        loaded = cf.load_instance(path)
        assert loaded.instance_hash() == spec.instance_hash()

    def test_unknown_field_rejected(self):
        doc = cf.benchmark("decoupled").to_dict()
        doc["extra"] = 1
        with pytest.raises(InstanceValidationError) as err:
            spec_from_dict(doc)
        assert err.value.path == "extra"

    def test_bad_kernel_row_names_path(self):
        doc = cf.benchmark("decoupled").to_dict()
        doc["kernels"]["base"][0][1][0] = [0.5, 0.6]
        with pytest.raises(InstanceValidationError) as err:
            spec_from_dict(doc)
        assert err.value.path.startswith("kernels.base[0]")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(InstanceValidationError) as err:
            cf.load_instance(path)
        assert "JSON" in str(err.value)

    def test_bad_beta(self):
        doc = cf.benchmark("decoupled").to_dict()
        doc["beta"] = 1.0
        with pytest.raises(InstanceValidationError) as err:
            spec_from_dict(doc)
        assert err.value.path == "beta"

    def test_layout_needs_nonempty_clusters(self):
        with pytest.raises(InstanceValidationError):
            PopulationLayout.from_sizes([2, 0])
