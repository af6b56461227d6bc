import dataclasses
import functools
import gzip
import json
from matplotlib import pyplot
import networkx
import numpy
import os
import pandas
import pathlib
import pytest
import re
import struct
import time

from . import cli
from . import data
from . import export
from . import information
from . import model as bm
from . import persistence
from . import plotting
from . import preprocessing
from . import sampling
from . import structure
from . import tensor
from . import topology
from .sources import idx
from .sources import patterns
from .sources import polytree
from .sources import returns


LONG_TESTS = os.environ.get("ATTREE_LONG_TESTS", "0") == "1"
IDX_IMAGES = os.environ.get("ATTREE_IDX_IMAGES")

MALFORMED_BATCHES = [
    "",
    "x y\n0 1\n",
    "3 2\n0 1 0\n",
    "3 1\n0 1 2\n",
    "3 1\n0 1\n",
    "2 1\n0 1 1\n",
    "0 1\n\n",
    "3\n0 1 0\n",
    "³ 1\n0 0 0\n",
]
MALFORMED_POLYTREES = [
    "3\n0 1 2\nr 0.8\n",
    "3\n0 1\n",
    "3\n0 1\n1 2\n2 0\nr 0.8\n",
    "x\nr 0.8\n",
    "3\nr 2\n",
]


def _random_samples(n, count, seed):
    return numpy.random.default_rng(seed).integers(0, 2, size=(count, n)).astype(numpy.uint8)


def _marginals_from_enumeration(m):
    return bm.exact_probabilities(m) @ bm.all_configurations(m.n)


def _caterpillar(order):
    return functools.reduce(lambda nested, v: (nested, v), order[1:], order[0])


def _tree_from_nesting(n, nesting):
    """ Topology from a nested pair of binary tuples; the two top-level parts are joined by the root edge. """
    edges = []
    ids = iter(range(n, 2 * n))

    def build(part):
        if isinstance(part, int):
            return part
        node = next(ids)
        for child in part:
            edges.append((node, build(child)))
        return node

    a, b = (build(part) for part in nesting)
    edges.append((a, b))
    return topology.TreeTopology.from_edges(n, edges, (a, b))


def _isolates(t, variables):
    return any(frozenset(variables) in topology.bipartition(t, e) for e in t.virtual_bonds())


def _correlated_pairs(repeat=5):
    return data.DataBatch(numpy.array([[x0, x1, x0, x1] for x0 in (0, 1) for x1 in (0, 1)] * repeat))


def _memorized_patterns():
    """ Ten 8-bit patterns and a model that puts equal weight on each of them. """
    batch = patterns.gen_random_patterns(patterns.PatternSpec(total_bits=8, left_random=2, right_random=2), seed=3)
    psi = numpy.zeros(2 ** 8)
    psi[batch.samples.astype(int) @ (1 << numpy.arange(7, -1, -1))] = 1
    return batch, bm.from_wavefunction(topology.make_balanced_tree(8), psi, chi=16)


class TestTensor:
    def test_contract_matches_einsum(self):
        rng = numpy.random.default_rng(1)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 3, 5))
        result = tensor.contract(a, b, [(1, 1), (2, 0)])
        numpy.testing.assert_allclose(result, numpy.einsum("ijk,kjl->il", a, b))

    def test_contract_mismatch(self):
        with pytest.raises(tensor.ShapeMismatchError):
            tensor.contract(numpy.ones((2, 3)), numpy.ones((4, 2)), [(1, 0)])
        with pytest.raises(tensor.ShapeMismatchError):
            tensor.contract(numpy.ones((2, 3)), numpy.ones((3, 2)), [(5, 0)])

    def test_matricize(self):
        t = numpy.arange(24.0).reshape(2, 3, 4)
        matrix, row_shape, col_shape = tensor.matricize(t, [2, 0])
        assert matrix.shape == (8, 3)
        assert row_shape == (4, 2)
        assert col_shape == (3,)
        assert matrix[1 * 2 + 1, 2] == t[1, 2, 1]

    def test_svd_truncate(self):
        m = numpy.random.default_rng(2).standard_normal((6, 5))
        full = numpy.linalg.svd(m, compute_uv=False)
        svd = tensor.svd_truncate(m, 3)
        assert svd.rank == 3
        numpy.testing.assert_allclose(svd.s, full[:3])
        numpy.testing.assert_allclose(svd.u.T @ svd.u, numpy.eye(3), atol=1e-12)
        numpy.testing.assert_allclose(svd.v.T @ svd.v, numpy.eye(3), atol=1e-12)
        numpy.testing.assert_allclose(svd.discarded_weight, numpy.sum(full[3:] ** 2))
        numpy.testing.assert_allclose(numpy.sum((m - svd.reconstruct()) ** 2), svd.discarded_weight)
        largest = svd.u[numpy.argmax(numpy.abs(svd.u), axis=0), numpy.arange(3)]
        assert numpy.all(largest > 0)

    def test_svd_of_zero_keeps_one_triple(self):
        svd = tensor.svd_truncate(numpy.zeros((3, 4)), 2)
        assert svd.rank == 1
        assert svd.s[0] == 0

    def test_svd_drops_numerical_zeros(self):
        m = numpy.outer([1.0, 2.0, 3.0], [1.0, -1.0])
        svd = tensor.svd_truncate(m, 2)
        assert svd.rank == 1

    def test_svd_rejects_non_finite(self):
        with pytest.raises(tensor.NumericalError):
            tensor.svd_truncate(numpy.array([[1.0, numpy.nan]]), 1)


class TestTopology:
    @pytest.mark.parametrize("n", [3, 4, 7, 16])
    def test_constructors_are_valid(self, n):
        for t in [topology.make_tensor_train(n), topology.make_balanced_tree(n), topology.make_random_tree(n, seed=n)]:
            t.validate()
            assert len(t.edges) == 2 * n - 3
            assert len(t.virtual_bonds()) == n - 3

    def test_tensor_train_root(self):
        assert topology.make_tensor_train(3).root_edge == (1, 3)
        t = topology.make_tensor_train(8)
        assert t.root_edge == (10, 11)
        a, b = topology.bipartition(t, t.root_edge)
        assert a == frozenset({0, 1, 2, 3})
        assert b == frozenset({4, 5, 6, 7})

    def test_random_tree_is_seeded(self):
        assert topology.make_random_tree(9, 5).edges == topology.make_random_tree(9, 5).edges

    def test_random_trees_vary(self):
        shapes = {topology.make_random_tree(10, seed).splits() for seed in range(1000)}
        assert len(shapes) > 1
        for seed in range(50):
            t = topology.make_random_tree(32, seed)
            t.validate()
            assert len(t.virtual_bonds()) == 29

    def test_bipartition_matches_components(self):
        t = topology.make_random_tree(16, 8)
        for e in t.edges:
            g = networkx.Graph(t.graph)
            g.remove_edge(*e)
            component = networkx.node_connected_component(g, e[0])
            a, b = topology.bipartition(t, e)
            assert a == frozenset(v for v in component if v < 16)
            assert a | b == frozenset(range(16))
            assert not a & b

    def test_balanced_tree_depth(self):
        t = topology.make_balanced_tree(6)
        g = t.graph
        depths = [min(networkx.shortest_path_length(g, v, r) for r in t.root_edge) for v in t.leaves]
        assert max(depths) - min(depths) <= 1
        g = topology.make_balanced_tree(1024).graph
        lengths = networkx.single_source_shortest_path_length(g, 0)
        far = max(lengths, key=lengths.get)
        assert max(networkx.single_source_shortest_path_length(g, far).values()) <= 20

    def test_repeated_pairings_keep_invariants(self):
        rng = numpy.random.default_rng(4)
        t = topology.make_random_tree(20, 4)
        for iteration in range(1, 201):
            bonds = t.virtual_bonds()
            t = t.with_root(bonds[rng.integers(len(bonds))])
            t = topology.apply_pairing(t, topology.Pairing(rng.integers(3)), iteration=iteration)
            t.validate()
            assert len(t.virtual_bonds()) == 17
            assert t.edge_age[t.root_edge] == iteration

    def test_invalid_topology(self):
        with pytest.raises(ValueError):
            topology.TreeTopology.from_edges(3, [(0, 3), (1, 3), (2, 3), (0, 1)], (0, 3))
        with pytest.raises(ValueError):
            topology.make_tensor_train(2)

    def test_apply_pairing(self):
        t = topology.make_tensor_train(8)
        crossed = topology.apply_pairing(t, topology.Pairing.CROSS, iteration=5)
        crossed.validate()
        assert crossed.edge_age[crossed.root_edge] == 5
        assert topology.bipartition(crossed, crossed.root_edge)[0] == frozenset({3, 4})
        assert crossed.edge_age[(4, 10)] == t.edge_age[(4, 11)]
        back = topology.apply_pairing(crossed, topology.Pairing.CROSS, iteration=6)
        assert back.edges == t.edges

    def test_keep_pairing_only_ages_the_root(self):
        t = topology.make_balanced_tree(6)
        kept = topology.apply_pairing(t, topology.Pairing.KEEP, iteration=3)
        assert kept.edges == t.edges
        assert kept.edge_age[t.root_edge] == 3

    def test_same_structure_ignores_node_ids(self):
        t = topology.make_tensor_train(5)
        relabel = {5: 7, 6: 5, 7: 6}
        edges = [(relabel.get(u, u), relabel.get(v, v)) for u, v in t.edges]
        other = topology.TreeTopology.from_edges(5, edges, (relabel[t.root_edge[0]], relabel[t.root_edge[1]]))
        assert t.same_structure(other)
        assert not t.same_structure(topology.apply_pairing(t, topology.Pairing.TWIST, iteration=1))

    def test_center_distance_ranking(self):
        t = topology.make_tensor_train(8)
        assert topology.tree_center(t) == 10
        ranking = topology.center_distance_ranking(t)
        assert len(ranking) == 8
        assert ranking[3] == 1
        assert ranking[7] == max(ranking.values())
        assert ranking[0] > ranking[3]
        eccentric = topology.center_distance_ranking(t, topology.CenterKind.ECCENTRICITY)
        assert min(eccentric.values()) == 1

    def test_ramp_color(self):
        assert topology.ramp_color(0) == "#0000ff"
        assert topology.ramp_color(1) == "#ff0000"
        assert topology.ramp_color(2) == "#ff0000"

    def test_to_dot(self):
        t = topology.make_tensor_train(3)
        bmi = {e: 0.1 * (i + 1) for i, e in enumerate(t.edges)}
        source = topology.to_dot(t, bmi, labels={0: "first"}, colors={1: "red"})
        assert len(re.findall(r"^\s*\d+ \[", source, re.M)) == 4
        assert len(re.findall(r"bmi=", source)) == 3
        assert "first" in source
        assert "fillcolor=red" in source
        assert "#ff0000" in source and "#0000ff" in source

    def test_to_dot_unknown_edge(self):
        with pytest.raises(KeyError):
            topology.to_dot(topology.make_tensor_train(3), {(0, 1): 0.5})


class TestModel:
    @pytest.mark.parametrize("maker", [topology.make_tensor_train, topology.make_balanced_tree, lambda n: topology.make_random_tree(n, 3)])
    def test_init_model_is_canonical(self, maker):
        m = bm.init_model(maker(7), 3, seed=1)
        m.check_structure()
        assert bm.isometry_error(m) < 1e-10
        numpy.testing.assert_allclose(m.partition_function, 1)
        numpy.testing.assert_allclose(bm.exact_probabilities(m).sum(), 1)

    def test_init_model_rejects_small_chi(self):
        with pytest.raises(ValueError):
            bm.init_model(topology.make_tensor_train(4), 1, seed=0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_from_wavefunction_matches_enumeration(self, seed):
        n = 5
        psi = numpy.random.default_rng(seed).standard_normal(2 ** n)
        m = bm.from_wavefunction(topology.make_random_tree(n, seed), psi, chi=8)
        numpy.testing.assert_allclose(bm.exact_probabilities(m), psi ** 2 / numpy.sum(psi ** 2), atol=1e-12)
        ratio = bm.amplitudes(m, bm.all_configurations(n)) / psi
        numpy.testing.assert_allclose(numpy.abs(ratio), numpy.abs(ratio[0]))

    def test_amplitude_matches_naive_contraction(self):
        t = topology.make_tensor_train(4)
        m = bm.init_model(t, 2, seed=4)
        # chain 4 - 5 with leaves 0, 1 on node 4 and 2, 3 on node 5, root (4, 5)
        T4, (a1, a2) = bm._orient(m, 4, 5)
        T5, (b1, b2) = bm._orient(m, 5, 4)
        assert (a1, a2, b1, b2) == (0, 1, 2, 3)
        psi = numpy.einsum("abk,k,cdk->abcd", T4, m.central_weight, T5).ravel()
        numpy.testing.assert_allclose(bm.amplitudes(m, bm.all_configurations(4)), psi, atol=1e-12)
        numpy.testing.assert_allclose(bm.amplitude(m, [1, 0, 1, 1]), psi[0b1011])

    def test_move_root_preserves_probabilities(self):
        m = bm.init_model(topology.make_random_tree(6, 7), 3, seed=7)
        reference = bm.exact_probabilities(m)
        for e in m.topology.edges:
            moved = bm.move_root_to(m, e)
            assert moved.root_edge == e
            moved.check_structure()
            assert bm.isometry_error(moved) < 1e-9
            numpy.testing.assert_allclose(bm.exact_probabilities(moved), reference, rtol=1e-8, atol=1e-14)

    def test_canonicalize_to_other_root(self):
        m = bm.init_model(topology.make_balanced_tree(6), 4, seed=3)
        target = m.topology.virtual_bonds()[-1]
        moved = bm.canonicalize(m, target)
        assert moved.root_edge == target
        assert bm.isometry_error(moved) < 1e-9
        numpy.testing.assert_allclose(bm.exact_probabilities(moved), bm.exact_probabilities(m), rtol=1e-8, atol=1e-14)

    def test_random_root_walk(self):
        rng = numpy.random.default_rng(6)
        m = bm.init_model(topology.make_random_tree(8, 6), 3, seed=6)
        configs = bm.all_configurations(8)
        for _ in range(20):
            adjacent = [e for e in m.topology.edges if e != m.root_edge and set(e) & set(m.root_edge)]
            m = bm.move_root(m, adjacent[rng.integers(len(adjacent))])
            m.check_structure()
            numpy.testing.assert_allclose(numpy.sum(bm.amplitudes(m, configs) ** 2), m.partition_function, rtol=1e-10)
            numpy.testing.assert_allclose(m.partition_function, 1, rtol=1e-10)

    def test_canonicalize_zero_tensors(self):
        m = bm.init_model(topology.make_balanced_tree(5), 2, seed=0)
        zeroed = dataclasses.replace(m, tensors={ v : numpy.zeros_like(T) for v, T in m.tensors.items() })
        with pytest.raises(bm.DegenerateModelError):
            bm.canonicalize(zeroed)

    def test_uniform_model_gradient_vanishes(self):
        m = bm.product_model(topology.make_balanced_tree(4), 0.5)
        gradient = bm.grad_root_tensor(m, bm.all_configurations(4))
        numpy.testing.assert_allclose(gradient, 0, atol=1e-10)

    def test_memorized_patterns(self):
        batch, m = _memorized_patterns()
        numpy.testing.assert_allclose(bm.nll(m, batch), numpy.log(10))

    def test_product_model(self):
        t = topology.make_balanced_tree(5)
        p_one = numpy.array([0.1, 0.3, 0.5, 0.7, 0.9])
        m = bm.product_model(t, p_one)
        numpy.testing.assert_allclose(_marginals_from_enumeration(m), p_one)
        configs = bm.all_configurations(5)
        expected = numpy.prod(numpy.where(configs == 1, p_one, 1 - p_one), axis=1)
        numpy.testing.assert_allclose(bm.exact_probabilities(m), expected)

    def test_uniform_nll(self):
        m = bm.product_model(topology.make_tensor_train(3), 0.5)
        numpy.testing.assert_allclose(bm.nll(m, _random_samples(3, 10, 0)), numpy.log(8))

    def test_nll_is_infinite_for_zero_amplitude(self):
        m = bm.product_model(topology.make_tensor_train(4), 0.0)
        assert bm.nll(m, numpy.zeros((3, 4), dtype=int)) == pytest.approx(0, abs=1e-12)
        assert bm.nll(m, numpy.array([[0, 1, 0, 0]])) == numpy.inf

    def test_threads_give_the_same_amplitudes(self):
        m = bm.init_model(topology.make_random_tree(8, 1), 3, seed=1)
        samples = _random_samples(8, 50, 1)
        numpy.testing.assert_allclose(bm.amplitudes(m, samples, threads=3), bm.amplitudes(m, samples))

    def test_message_cache_after_move(self):
        m = bm.init_model(topology.make_random_tree(9, 2), 3, seed=2)
        samples = _random_samples(9, 30, 2)
        cache = bm.MessageCache(samples)
        bm.amplitudes(m, samples, cache=cache)
        assert len(cache) > 0
        for e in m.topology.edges[::3]:
            m = bm.move_root_to(m, e)
            numpy.testing.assert_allclose(bm.amplitudes(m, samples, cache=cache), bm.amplitudes(m, samples))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_matches_finite_differences(self, seed):
        m = bm.init_model(topology.make_random_tree(6, seed), 3, seed=seed)
        if not m.topology.is_virtual(m.root_edge):
            m = bm.move_root_to(m, m.topology.virtual_bonds()[0])
        batch = _random_samples(6, 20, seed)
        theta = bm.root_tensor(m).tensor
        gradient = bm.grad_root_tensor(m, batch)
        assert gradient.shape == theta.shape
        numeric = numpy.zeros_like(theta)
        eps = 1e-6
        for index in numpy.ndindex(theta.shape):
            step = numpy.zeros_like(theta)
            step[index] = eps
            numeric[index] = (bm.working_nll(m, batch, theta + step) - bm.working_nll(m, batch, theta - step)) / (2 * eps)
        numpy.testing.assert_allclose(gradient, numeric, rtol=1e-4, atol=1e-6)

    def test_leaf_root_gradient_shape(self):
        m = bm.init_model(topology.make_tensor_train(3), 2, seed=0)
        assert not m.topology.is_virtual(m.root_edge)
        gradient = bm.grad_root_tensor(m, _random_samples(3, 5, 0))
        assert gradient.shape == bm.root_tensor(m).tensor.shape

    def test_zero_amplitude_strict_gradient(self):
        m = bm.product_model(topology.make_balanced_tree(4), 0.0)
        with pytest.raises(bm.ZeroAmplitudeError):
            bm.grad_root_tensor(m, numpy.array([[1, 0, 0, 0]]))

    def test_enumeration_limit(self):
        assert bm.all_configurations(3)[1].tolist() == [0, 0, 1]
        with pytest.raises(bm.EnumerationLimitError):
            bm.all_configurations(17)


class TestSampling:
    def test_deterministic_model(self):
        bits = numpy.array([0, 1, 1, 0, 1])
        m = bm.product_model(topology.make_random_tree(5, 0), bits.astype(float))
        samples = sampling.sample_batch(m, 20, rng=1)
        assert samples.shape == (20, 5)
        assert numpy.all(samples == bits)

    def test_seeded(self):
        m = bm.init_model(topology.make_balanced_tree(6), 2, seed=0)
        numpy.testing.assert_array_equal(sampling.sample_batch(m, 50, 3), sampling.sample_batch(m, 50, 3))
        assert sampling.sample(m, 3).shape == (6,)

    @pytest.mark.parametrize("root_kind", ["virtual", "leaf"])
    def test_distribution_matches_enumeration(self, root_kind):
        m = bm.init_model(topology.make_random_tree(5, 11), 2, seed=11)
        if root_kind == "leaf":
            m = bm.move_root_to(m, [e for e in m.topology.edges if not m.topology.is_virtual(e)][0])
        count = 100000
        samples = sampling.sample_batch(m, count, rng=5)
        codes = samples.astype(int) @ (1 << numpy.arange(m.n - 1, -1, -1))
        empirical = numpy.bincount(codes, minlength=2 ** m.n) / count
        assert 0.5 * numpy.abs(empirical - bm.exact_probabilities(m)).sum() <= 0.02

    @pytest.mark.parametrize("leaf_root", [False, True])
    def test_leaf_marginals(self, leaf_root):
        m = bm.init_model(topology.make_tensor_train(6), 3, seed=9)
        if leaf_root:
            m = bm.move_root_to(m, [e for e in m.topology.edges if 0 in e][0])
        numpy.testing.assert_allclose(sampling.leaf_marginals(m), _marginals_from_enumeration(m), atol=1e-10)


class TestInformation:
    def test_bound_by_bond_dimension(self):
        pairs = 0
        for seed in range(12):
            m = bm.init_model(topology.make_random_tree(6, seed), 2 + seed % 2, seed=seed)
            for e, value in information.bmi_exact_all(m).items():
                assert -1e-12 <= value <= numpy.log(m.bond_dimension(e)) + 1e-9
                assert value <= numpy.log(m.chi) + 1e-9
                pairs += 1
        assert pairs >= 100

    def test_product_model_has_no_information(self):
        m = bm.product_model(topology.make_balanced_tree(5), 0.3)
        for value in information.bmi_exact_all(m).values():
            assert value == pytest.approx(0, abs=1e-10)

    def test_correlated_pairs(self):
        psi = numpy.zeros(16)
        for x0 in (0, 1):
            for x1 in (0, 1):
                psi[int(f"{x0}{x1}{x0}{x1}", 2)] = 0.5
        m = bm.from_wavefunction(topology.make_balanced_tree(4), psi, chi=4)
        assert m.root_edge == (4, 5)
        numpy.testing.assert_allclose(information.bmi_exact(m, m.root_edge), numpy.log(4))
        numpy.testing.assert_allclose(information.bmi_empirical(m, m.root_edge, bm.all_configurations(4)[[0, 5, 10, 15]]), numpy.log(4))

    def test_empirical_matches_exact(self):
        m = bm.init_model(topology.make_balanced_tree(6), 3, seed=4)
        samples = sampling.sample_batch(m, 20000, rng=4)
        pmi = information.pointwise_mutual_information(m, samples)
        error = pmi.std() / numpy.sqrt(len(pmi))
        exact = information.bmi_exact(m, m.root_edge)
        assert abs(information.bmi_empirical(m, m.root_edge, samples) - exact) <= 4 * error + 1e-9

    def test_sampled_estimate(self):
        m = bm.init_model(topology.make_tensor_train(6), 2, seed=8)
        e = m.topology.virtual_bonds()[0]
        exact = information.bmi_exact(m, e)
        assert information.bmi_sampled(m, e, 20000, rng=1) == pytest.approx(exact, abs=0.05)

    def test_empirical_needs_root(self):
        m = bm.init_model(topology.make_tensor_train(6), 2, seed=0)
        other = [e for e in m.topology.edges if e != m.root_edge][0]
        with pytest.raises(ValueError):
            information.bmi_empirical(m, other, _random_samples(6, 5, 0))

    def test_strict_root_pmi(self):
        with pytest.raises(bm.ZeroAmplitudeError):
            information.root_pmi(numpy.array([[1.0, 0.0]]), numpy.array([1.0, 0.0]), numpy.array([[0.0, 1.0]]))
        clamped = information.root_pmi(numpy.array([[1.0, 0.0]]), numpy.array([1.0, 0.0]), numpy.array([[0.0, 1.0]]), strict=False)
        assert numpy.all(numpy.isfinite(clamped))


class TestStructure:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            structure.TrainConfig(chi=1)
        with pytest.raises(ValueError):
            structure.TrainConfig(chi=2, learning_rate=0)
        with pytest.raises(ValueError):
            structure.TrainConfig(chi=2, candidate_updates=0)
        with pytest.raises(ValueError):
            structure.TrainConfig(chi=2, initial_topology="file")
        cfg = structure.TrainConfig(chi=2, refresh="sweep", initial_topology="train")
        assert cfg.refresh == structure.RefreshPolicy.SWEEP
        assert cfg.initial_topology == structure.InitialTopology.TRAIN

    def test_next_target_prefers_stale_bond(self):
        t = topology.make_tensor_train(8)
        ages = { e : 5 for e in t.edges }
        ages[(11, 12)] = 2
        ages[(9, 10)] = 3
        t = dataclasses.replace(t, edge_age=ages)
        assert structure.next_target(t, (10, 11)) == (11, 12)
        assert structure.next_target(t, (10, 11)) == structure.next_target(t, (10, 11))

    def test_next_target_round_robin(self):
        t = topology.make_tensor_train(8)
        current = t.root_edge
        t = dataclasses.replace(t, edge_age={**t.edge_age, current: 1})
        visited = {current}
        for i in range(2, 11):
            current = structure.next_target(t, current)
            assert t.is_virtual(current)
            t = dataclasses.replace(t, edge_age={**t.edge_age, current: i})
            visited.add(current)
        assert visited == set(t.virtual_bonds())

    def test_next_target_covers_random_trees(self):
        for seed in range(20):
            t = topology.make_random_tree(12, seed)
            current = t.virtual_bonds()[0]
            t = dataclasses.replace(t, edge_age={**t.edge_age, current: 1})
            visited = {current}
            for i in range(2, 200):
                current = structure.next_target(t, current)
                assert t.is_virtual(current)
                t = dataclasses.replace(t, edge_age={**t.edge_age, current: i})
                visited.add(current)
            assert visited == set(t.virtual_bonds())

    def test_tiny_amplitudes_are_skipped_in_training(self):
        left = numpy.eye(2)
        right = numpy.eye(2)
        tiny = numpy.diag([1.0, 1e-160])
        gradient, loss = bm.nll_gradient(tiny, left, right, strict=False)
        expected, _ = bm.nll_gradient(numpy.diag([1.0, 0.0]), left, right, strict=False)
        assert numpy.all(numpy.isfinite(gradient))
        numpy.testing.assert_allclose(gradient, expected, atol=1e-12)
        assert numpy.isfinite(loss)
        updated = structure._step(tiny, left, right, 0.1)
        assert numpy.all(numpy.isfinite(updated))
        numpy.testing.assert_allclose(numpy.linalg.norm(updated), 1)

    def test_correlated_pairs_training_survives(self):
        batch = _correlated_pairs()
        for seed in range(5):
            cfg = structure.TrainConfig(
                chi=2, learning_rate=0.1, max_iterations=100, seed=seed,
                initial_topology=structure.InitialTopology.BALANCED,
            )
            m, report = structure.train(batch, cfg)
            assert report.iterations == 100
            assert numpy.all(numpy.isfinite(report.nll_history))
            m.check_structure()
            assert bm.isometry_error(m) < 1e-8
            numpy.testing.assert_allclose(bm.exact_probabilities(m).sum(), 1)

    def test_reconnect_step_keeps_invariants(self):
        m = bm.init_model(topology.make_random_tree(7, 1), 3, seed=2)
        samples = _random_samples(7, 40, 3)
        cfg = structure.TrainConfig(chi=3, learning_rate=0.01)
        cache = bm.MessageCache(samples)
        target = m.topology.virtual_bonds()[0]
        for iteration in range(1, 7):
            m, pairing, bmi = structure.reconnect_step(m, samples, cfg, target, iteration=iteration, cache=cache)
            assert m.root_edge == target
            assert m.topology.edge_age[target] == iteration
            assert isinstance(pairing, topology.Pairing)
            assert bmi >= 0
            m.check_structure()
            m.topology.validate()
            assert bm.isometry_error(m) < 1e-8
            numpy.testing.assert_allclose(m.partition_function, 1)
            numpy.testing.assert_allclose(bm.exact_probabilities(m).sum(), 1)
            numpy.testing.assert_allclose(bm.amplitudes(m, samples, cache=cache), bm.amplitudes(m, samples))
            target = structure.next_target(m, target)

    def test_matching_structure_is_stable(self):
        t = topology.TreeTopology.from_edges(4, [(0, 4), (2, 4), (1, 5), (3, 5), (4, 5)], (4, 5))
        psi = numpy.zeros(16)
        for x0 in (0, 1):
            for x1 in (0, 1):
                psi[int(f"{x0}{x1}{x0}{x1}", 2)] = 0.5
        m = bm.from_wavefunction(t, psi, chi=2)
        samples = bm.all_configurations(4)[[0, 5, 10, 15]]
        cfg = structure.TrainConfig(chi=2)
        cache = bm.MessageCache(samples)
        for iteration in range(1, 101):
            m, pairing, _ = structure.reconnect_step(m, samples, cfg, (4, 5), iteration=iteration, cache=cache)
            assert pairing == topology.Pairing.KEEP
        assert m.topology.same_structure(t)

    def test_reconnect_step_rejects_leaf_edge(self):
        m = bm.init_model(topology.make_tensor_train(8), 2, seed=0)
        with pytest.raises(ValueError):
            structure.reconnect_step(m, _random_samples(8, 5, 0), structure.TrainConfig(chi=2), (0, 8))

    def test_fixed_structure_keeps_topology(self):
        t = topology.make_random_tree(6, 3)
        cfg = structure.TrainConfig(chi=2, learning_rate=0.05, max_iterations=12, structure_fixed=True)
        m, report = structure.train(data.DataBatch(_random_samples(6, 30, 0)), cfg, topology=t)
        assert m.topology.same_structure(t)
        assert set(report.pairing_history) == {topology.Pairing.KEEP}

    def test_correlated_pairs_are_regrouped(self):
        batch = _correlated_pairs()
        successes = 0
        for seed in range(5):
            cfg = structure.TrainConfig(
                chi=2, learning_rate=0.1, max_iterations=100, seed=seed,
                initial_topology=structure.InitialTopology.BALANCED,
            )
            m, _ = structure.train(batch, cfg)
            sides = set(topology.bipartition(m.topology, (4, 5)))
            successes += sides == {frozenset({0, 2}), frozenset({1, 3})}
        assert successes >= 3

    def test_memorizes_a_single_pattern(self):
        batch = data.DataBatch(numpy.array([[1, 0, 1, 1, 0]]))
        cfg = structure.TrainConfig(chi=2, learning_rate=0.1, max_iterations=150, initial_topology="train")
        m, report = structure.train(batch, cfg)
        assert report.iterations == 150
        assert report.nll_history[-1] <= 0.01
        assert bm.nll(m, batch) <= 0.01

    def test_zero_iterations(self):
        batch = data.DataBatch(_random_samples(5, 10, 0))
        m, report = structure.train(batch, structure.TrainConfig(chi=2, max_iterations=0, initial_topology="balanced"))
        assert report.iterations == 0
        assert report.best_model is m
        assert m.topology.same_structure(topology.make_balanced_tree(5))

    def test_report_with_test_data(self, tmp_path):
        full = data.DataBatch(_random_samples(6, 60, 1))
        train, test = preprocessing.split_train_test(full, 0.5, seed=1)
        cfg = structure.TrainConfig(
            chi=2, learning_rate=0.05, max_iterations=7, eval_interval=2, batch_size=10,
            refresh="sweep", snapshot_interval=3, checkpoint_interval=5, checkpoint_path=tmp_path / "ckpt.attb",
        )
        m, report = structure.train(train, cfg, test=test)
        assert len(report.nll_history) == len(report.test_nll_history) == 7
        evaluated = [i for i, v in enumerate(report.test_nll_history, start=1) if not numpy.isnan(v)]
        assert evaluated == [2, 4, 6, 7]
        assert report.best_test_nll == numpy.nanmin(report.test_nll_history)
        assert [i for i, _ in report.structure_snapshots] == [3, 6]
        assert set(report.edge_bmi) <= set(m.topology.edges)
        assert persistence.load_model(tmp_path / "ckpt.attb").n == 6
        df = report.to_dataframe()
        assert list(df.columns) == ["train_nll", "test_nll"]
        assert df.index.name == "iter"

    def test_threaded_test_evaluation(self):
        full = data.DataBatch(_random_samples(6, 40, 2))
        train, test = preprocessing.split_train_test(full, 0.5, seed=2)
        histories = []
        for threads in (1, 3):
            cfg = structure.TrainConfig(chi=2, learning_rate=0.05, max_iterations=4, threads=threads)
            _, report = structure.train(train, cfg, test=test)
            histories.append(report.test_nll_history)
        numpy.testing.assert_allclose(histories[0], histories[1], rtol=1e-10)

    def test_resume_from_file(self, tmp_path):
        batch = data.DataBatch(_random_samples(5, 20, 2))
        start = bm.init_model(topology.make_tensor_train(5), 2, seed=0)
        persistence.save_model(start, tmp_path / "start.attb")
        cfg = structure.TrainConfig(chi=2, max_iterations=3, initial_topology="file", initial_model_path=tmp_path / "start.attb")
        m, report = structure.train(batch, cfg)
        assert report.iterations == 3
        assert max(m.topology.edge_age.values()) == 3

    def test_topology_consistency(self):
        chain = polytree.BayesPolytree(17, tuple((i, i + 1) for i in range(16)), 0.8)
        assert structure.topology_consistency(topology.make_tensor_train(17), chain)
        shuffled = polytree.BayesPolytree(4, ((0, 2), (2, 1), (1, 3)), 0.8)
        straight = polytree.BayesPolytree(4, ((0, 1), (1, 2), (2, 3)), 0.8)
        assert structure.topology_consistency(topology.make_balanced_tree(4), straight)
        assert not structure.topology_consistency(topology.make_balanced_tree(4), shuffled)
        with pytest.raises(ValueError):
            structure.topology_consistency(topology.make_tensor_train(5), straight)

    def test_collision_family_is_one_unit(self):
        collision = polytree.PRESETS["collision"]
        chains = (_caterpillar(list(range(7))), _caterpillar(list(range(14, 7, -1))))
        isolated = _tree_from_nesting(17, (chains, ((7, 15), 16)))
        assert _isolates(isolated, {7, 15, 16})
        assert structure.topology_consistency(isolated, collision)
        torn = _tree_from_nesting(17, ((_caterpillar(list(range(8))), _caterpillar(list(range(14, 7, -1)))), (15, 16)))
        assert not structure.topology_consistency(torn, collision)
        assert not structure.topology_consistency(topology.make_tensor_train(17), collision)

    def test_branching_splits_around_a_hub(self):
        branching = polytree.PRESETS["branching"]
        hub = (_caterpillar([0, 1, 2, 3, 4]), _caterpillar([12, 11, 10, 9]))
        t = _tree_from_nesting(17, (hub, _caterpillar([16, 15, 14, 13, 8, 7, 6, 5])))
        assert structure.topology_consistency(t, branching)
        assert not structure.topology_consistency(topology.make_tensor_train(17), branching)

    @pytest.mark.skipif(not LONG_TESTS, reason="set ATTREE_LONG_TESTS=1")
    def test_random_pattern_convergence(self):
        batch = patterns.gen_random_patterns(patterns.PatternSpec(), seed=0)
        converged = 0
        fixed_higher = 0
        for seed in range(5):
            kwargs = dict(chi=16, learning_rate=0.05, max_iterations=3000, seed=seed, initial_topology="train")
            _, adaptive = structure.train(batch, structure.TrainConfig(**kwargs))
            _, fixed = structure.train(batch, structure.TrainConfig(structure_fixed=True, **kwargs))
            converged += adaptive.nll_history[-1] <= numpy.log(10) + 0.1
            fixed_higher += fixed.nll_history[-1] > adaptive.nll_history[-1]
        assert converged >= 3
        assert fixed_higher >= 3

    @pytest.mark.skipif(not LONG_TESTS, reason="set ATTREE_LONG_TESTS=1")
    @pytest.mark.parametrize("preset", sorted(polytree.PRESETS))
    def test_polytree_recovery(self, preset):
        bn = polytree.PRESETS[preset]
        successes = 0
        for seed in range(5):
            train, test = preprocessing.split_train_test(polytree.sample_polytree(bn, 20000, seed), 0.5, seed)
            cfg = structure.TrainConfig(chi=4, max_iterations=3000, seed=seed, batch_size=1000, refresh="sweep")
            _, report = structure.train(train, cfg, test=test)
            result = report.best_model.topology
            consistent = structure.topology_consistency(result, bn)
            if preset == "collision":
                consistent = consistent and _isolates(result, {7, 15, 16})
            successes += consistent
        assert successes >= 3

    @pytest.mark.skipif(not (LONG_TESTS and IDX_IMAGES), reason="set ATTREE_LONG_TESTS=1 and ATTREE_IDX_IMAGES")
    def test_images_beat_fixed_random_tree(self):
        images = idx.load_idx_binarized(IDX_IMAGES)
        train = images.subset(numpy.arange(1000))
        test = images.subset(numpy.arange(1000, 2000))
        wins = 0
        for seed in range(5):
            kwargs = dict(chi=6, max_iterations=20000, seed=seed, eval_interval=1000, log_interval=1000)
            _, adaptive = structure.train(train, structure.TrainConfig(**kwargs), test=test)
            _, fixed = structure.train(train, structure.TrainConfig(structure_fixed=True, **kwargs), test=test)
            wins += adaptive.best_test_nll <= fixed.best_test_nll - 5
        assert wins >= 3

    @pytest.mark.skipif(not LONG_TESTS, reason="set ATTREE_LONG_TESTS=1")
    def test_step_cost_scales_with_chi(self):
        samples = _random_samples(64, 10, 0)
        medians = {}
        for chi in (8, 16):
            m = bm.init_model(topology.make_balanced_tree(64), chi, seed=0)
            cfg = structure.TrainConfig(chi=chi)
            cache = bm.MessageCache(samples)
            target = m.root_edge
            durations = []
            for iteration in range(1, 101):
                start = time.perf_counter()
                m, _, _ = structure.reconnect_step(m, samples, cfg, target, iteration=iteration, cache=cache)
                durations.append(time.perf_counter() - start)
            medians[chi] = numpy.median(durations)
        assert 16 <= medians[16] / medians[8] <= 64


class TestData:
    def test_batch_roundtrip(self, tmp_path):
        batch = data.DataBatch(_random_samples(7, 4, 0))
        data.write_batch(batch, tmp_path / "b.txt")
        text = (tmp_path / "b.txt").read_text()
        assert text.splitlines()[0] == "7 4"
        numpy.testing.assert_array_equal(data.read_batch(tmp_path / "b.txt").samples, batch.samples)

    @pytest.mark.parametrize("content", MALFORMED_BATCHES)
    def test_malformed_batches(self, tmp_path, content):
        fp = tmp_path / "bad.txt"
        fp.write_text(content, encoding="utf-8")
        with pytest.raises(data.FormatError):
            data.read_batch(fp)

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            data.DataBatch(numpy.array([[0, 2]]))
        with pytest.raises(ValueError):
            data.DataBatch(numpy.zeros((0, 3)))
        with pytest.raises(ValueError):
            data.DataBatch(numpy.zeros((2, 3)), labels=[1])

    def test_unknown_source(self):
        with pytest.raises(KeyError, match="not in the collection"):
            data.generate("weather")

    def test_registered_sources(self):
        data.generate("patterns", total_bits=8, left_random=2, right_random=2, num_patterns=3, seed=0)
        assert {"patterns", "polytree", "idx", "returns"} <= set(data.SUPPORTED_SOURCES)

    @pytest.mark.parametrize("count,sizes", [(3589, (1795, 1794)), (2, (1, 1)), (5, (3, 2))])
    def test_split_sizes(self, count, sizes):
        batch = data.DataBatch(_random_samples(4, count, count))
        train, test = preprocessing.split_train_test(batch, 0.5, seed=0)
        assert (train.count, test.count) == sizes
        merged = numpy.concatenate([train.samples, test.samples])
        numpy.testing.assert_array_equal(
            numpy.unique(merged, axis=0, return_counts=True)[1],
            numpy.unique(batch.samples, axis=0, return_counts=True)[1],
        )

    def test_split_needs_two_rows(self):
        with pytest.raises(ValueError):
            preprocessing.split_train_test(data.DataBatch(numpy.zeros((1, 3))))

    def test_minibatch(self):
        batch = data.DataBatch(_random_samples(4, 100, 0))
        stream = preprocessing.minibatch(batch, 100, seed=0)
        assert next(stream) is batch
        first = [b.samples for _, b in zip(range(3), preprocessing.minibatch(batch, 10, seed=5))]
        second = [b.samples for _, b in zip(range(3), preprocessing.minibatch(batch, 10, seed=5))]
        for a, b in zip(first, second):
            assert a.shape == (10, 4)
            numpy.testing.assert_array_equal(a, b)
        with pytest.raises(ValueError):
            next(preprocessing.minibatch(batch, 101))

    def test_minibatch_rows_are_uniform(self):
        batch = data.DataBatch(numpy.zeros((100, 1)), labels=numpy.arange(100))
        counts = numpy.zeros(100)
        for _, b in zip(range(10000), preprocessing.minibatch(batch, 10, seed=3)):
            assert len(set(b.labels)) == 10
            counts[b.labels] += 1
        sigma = numpy.sqrt(10000 * 0.1 * 0.9)
        assert numpy.all(numpy.abs(counts - 1000) < 4 * sigma)

    def test_permute_variables(self):
        batch = data.DataBatch(_random_samples(6, 20, 0))
        permuted, permutation = preprocessing.permute_variables(batch, seed=1)
        assert sorted(permutation) == list(range(6))
        for j, v in enumerate(permutation):
            numpy.testing.assert_array_equal(permuted.samples[:, j], batch.samples[:, v])


class TestSources:
    @pytest.mark.parametrize("fp_submodule", pathlib.Path(os.path.join(os.path.dirname(__file__), "sources")).glob("*.py"))
    def test_imports(self, fp_submodule):
        import importlib.util
        spec = importlib.util.spec_from_file_location(
            f'attree.sources.{fp_submodule.stem}',
            str(fp_submodule)
        )
        imported_module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(imported_module)

    def test_default_patterns(self):
        batch = patterns.gen_random_patterns(patterns.PatternSpec(), seed=0)
        assert batch.samples.shape == (10, 128)
        assert not batch.samples[:, 32:96].any()
        assert len(numpy.unique(batch.samples, axis=0)) == 10

    def test_patterns_are_distinct(self):
        spec = patterns.PatternSpec(total_bits=6, left_random=2, right_random=1, num_patterns=8)
        for seed in range(50):
            assert len(numpy.unique(patterns.gen_random_patterns(spec, seed).samples, axis=0)) == 8

    def test_single_pattern(self):
        assert patterns.gen_random_patterns(patterns.PatternSpec(num_patterns=1), 0).count == 1

    def test_infeasible_patterns(self):
        with pytest.raises(ValueError):
            patterns.gen_random_patterns(patterns.PatternSpec(total_bits=4, left_random=1, right_random=1, num_patterns=5))
        with pytest.raises(ValueError):
            patterns.PatternSpec(total_bits=4, left_random=3, right_random=3)

    def test_polytree_copy_rate(self):
        bn = polytree.BayesPolytree(2, ((0, 1),), 0.8)
        samples = polytree.sample_polytree(bn, 100000, seed=0).samples
        assert numpy.mean(samples[:, 0] == samples[:, 1]) == pytest.approx(0.8, abs=0.01)
        assert numpy.mean(samples[:, 0]) == pytest.approx(0.5, abs=0.01)

    def test_polytree_chain_telescopes(self):
        bn = polytree.BayesPolytree(3, ((0, 1), (1, 2)), 0.8)
        samples = polytree.sample_polytree(bn, 100000, seed=1).samples
        sigma = numpy.sqrt(0.68 * 0.32 / 100000)
        assert abs(numpy.mean(samples[:, 0] == samples[:, 2]) - 0.68) < 3 * sigma

    def test_polytree_deterministic(self):
        chain = polytree.BayesPolytree(5, tuple((i, i + 1) for i in range(4)), 1.0)
        samples = polytree.sample_polytree(chain, 200, seed=2).samples
        assert numpy.all(samples == samples[:, :1])
        collider = polytree.BayesPolytree(3, ((0, 2), (1, 2)), 1.0)
        samples = polytree.sample_polytree(collider, 200, seed=3).samples
        assert numpy.all(samples[:, 2] == samples[:, 0] ^ samples[:, 1])

    def test_polytree_validation(self):
        with pytest.raises(ValueError):
            polytree.BayesPolytree(3, ((0, 1), (1, 2), (0, 2)), 0.8)
        with pytest.raises(ValueError):
            polytree.BayesPolytree(3, ((0, 1),), 0.5)
        with pytest.raises(ValueError):
            polytree.BayesPolytree(3, ((0, 3),), 0.8)

    def test_presets(self):
        for bn in polytree.PRESETS.values():
            assert bn.n == 17
            assert bn.r == 0.8
        assert polytree.PRESETS["collision"].parents(16) == [7, 15]

    def test_polytree_file(self, tmp_path):
        bn = polytree.PRESETS["branching"]
        polytree.write_polytree(bn, tmp_path / "bn.txt")
        assert polytree.read_polytree(tmp_path / "bn.txt") == bn

    @pytest.mark.parametrize("content", MALFORMED_POLYTREES)
    def test_malformed_polytree(self, tmp_path, content):
        fp = tmp_path / "bn.txt"
        fp.write_text(content)
        with pytest.raises(data.FormatError):
            polytree.read_polytree(fp)

    def _images(self):
        images = numpy.zeros((3, 28, 28), dtype=numpy.uint8)
        images[0, 0, 0] = 127
        images[0, 0, 1] = 128
        images[1] = 255
        return images

    def test_idx_binarized(self, tmp_path):
        idx.write_idx_images(self._images(), tmp_path / "images.idx")
        (tmp_path / "labels.idx").write_bytes(struct.pack(">II", 2049, 3) + bytes([5, 0, 9]))
        batch = idx.load_idx_binarized(tmp_path / "images.idx", tmp_path / "labels.idx")
        assert batch.samples.shape == (3, 1024)
        assert batch.labels.tolist() == [5, 0, 9]
        assert batch.samples[0].sum() == 1
        assert batch.samples[0, 2 * 32 + 3] == 1
        assert batch.samples[0, 2 * 32 + 2] == 0
        assert batch.samples[1].sum() == 784
        assert batch.samples[1, 0] == 0
        assert batch.samples[1, 2 * 32 + 2] == 1
        assert batch.samples[2].sum() == 0

    def test_idx_gzip(self, tmp_path):
        idx.write_idx_images(self._images(), tmp_path / "images.idx")
        (tmp_path / "images.idx.gz").write_bytes(gzip.compress((tmp_path / "images.idx").read_bytes()))
        numpy.testing.assert_array_equal(
            idx.load_idx_binarized(tmp_path / "images.idx.gz").samples,
            idx.load_idx_binarized(tmp_path / "images.idx").samples,
        )

    def test_idx_errors(self, tmp_path):
        fp = tmp_path / "images.idx"
        fp.write_bytes(struct.pack(">4I", 2049, 1, 2, 2) + bytes(4))
        with pytest.raises(data.FormatError, match="magic"):
            idx.load_idx_binarized(fp)
        fp.write_bytes(struct.pack(">4I", 2051, 3, 28, 28) + bytes(100))
        with pytest.raises(data.FormatError):
            idx.load_idx_binarized(fp)
        fp.write_bytes(bytes(6))
        with pytest.raises(data.FormatError):
            idx.load_idx_binarized(fp)
        idx.write_idx_images(self._images(), fp)
        (tmp_path / "labels.idx").write_bytes(struct.pack(">II", 2049, 2) + bytes([1, 2]))
        with pytest.raises(data.FormatError):
            idx.load_idx_binarized(fp, tmp_path / "labels.idx")

    def test_binarize_returns(self):
        numpy.testing.assert_array_equal(returns.binarize_returns([[1.0, 2.0, 3.0]]).samples, [[0, 0, 1]])
        numpy.testing.assert_array_equal(returns.binarize_returns([[0.2, 0.2]]).samples, [[0, 0]])
        matrix = numpy.random.default_rng(0).standard_normal((5, 7))
        expected = [[int(v > sum(row) / len(row)) for v in row] for row in matrix.tolist()]
        numpy.testing.assert_array_equal(returns.binarize_returns(matrix).samples, expected)
        with pytest.raises(ValueError):
            returns.binarize_returns(numpy.zeros((0, 3)))

    def test_returns_csv(self, tmp_path):
        fp = tmp_path / "returns.csv"
        fp.write_text("date,A,B,C\n2020-01-01,1.0,2.0,3.0\n2020-01-02,0.5,0.5,0.5\n")
        df = returns.load_returns_csv(fp)
        assert list(df.columns) == ["A", "B", "C"]
        batch = data.generate("returns", csv_path=fp)
        numpy.testing.assert_array_equal(batch.samples, [[0, 0, 1], [0, 0, 0]])


class TestPersistence:
    @pytest.mark.parametrize("leaf_root", [False, True])
    def test_roundtrip_is_byte_identical(self, tmp_path, leaf_root):
        m = bm.init_model(topology.make_random_tree(7, 4), 3, seed=4)
        if leaf_root:
            m = bm.move_root_to(m, [e for e in m.topology.edges if 2 in e][0])
        persistence.save_model(m, tmp_path / "a.attb")
        loaded = persistence.load_model(tmp_path / "a.attb")
        persistence.save_model(loaded, tmp_path / "b.attb")
        assert (tmp_path / "a.attb").read_bytes() == (tmp_path / "b.attb").read_bytes()
        assert loaded.root_edge == m.root_edge
        assert loaded.topology.edge_age == m.topology.edge_age
        numpy.testing.assert_array_equal(bm.exact_probabilities(loaded), bm.exact_probabilities(m))

    def test_header(self):
        raw = persistence.dumps(bm.init_model(topology.make_tensor_train(4), 2, seed=0))
        assert raw[:4] == b"ATTB"
        assert struct.unpack("<H", raw[4:6])[0] == persistence.FORMAT_VERSION

    @pytest.mark.parametrize("corrupt", [
        lambda raw: b"XXXX" + raw[4:],
        lambda raw: raw[:-3],
        lambda raw: raw + b"\0",
        lambda raw: raw[:4] + struct.pack("<H", 9) + raw[6:],
    ])
    def test_corrupt_files(self, tmp_path, corrupt):
        raw = persistence.dumps(bm.init_model(topology.make_tensor_train(4), 2, seed=0))
        fp = tmp_path / "bad.attb"
        fp.write_bytes(corrupt(raw))
        with pytest.raises(data.FormatError):
            persistence.load_model(fp)


class TestExport:
    def test_report_csv(self, tmp_path):
        report = structure.TrainReport(nll_history=[1.0, 0.5], test_nll_history=[numpy.nan, 0.4])
        export.write_report_csv(report, tmp_path / "report.csv")
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines == ["iter,train_nll,test_nll", "1,1,", "2,0.5,0.4"]

    def test_bmi_csv(self, tmp_path):
        bmi = {(3, 5): 0.25, (0, 4): 0.125}
        export.write_bmi_csv(bmi, tmp_path / "bmi.csv")
        assert (tmp_path / "bmi.csv").read_text().splitlines()[0] == "u,v,bmi"
        assert export.read_bmi_csv(tmp_path / "bmi.csv") == bmi

    def test_labels(self, tmp_path):
        fp = tmp_path / "labels.csv"
        fp.write_text("variable,label,color\n0,AAPL,red\n1,XOM,\n")
        labels, colors = export.read_labels(fp)
        assert labels == {0: "AAPL", 1: "XOM"}
        assert colors == {0: "red"}
        fp.write_text("variable,label\n2,GE\n")
        assert export.read_labels(fp) == ({2: "GE"}, {})
        fp.write_text("index,name\n2,GE\n")
        with pytest.raises(data.FormatError):
            export.read_labels(fp)

    def test_rank_csv(self, tmp_path):
        t = topology.make_balanced_tree(9)
        export.write_rank_csv(topology.center_distance_ranking(t), tmp_path / "rank.csv")
        df = pandas.read_csv(tmp_path / "rank.csv")
        assert list(df.columns) == ["variable", "rank"]
        assert len(df) == 9


class TestCli:
    def _model_file(self, tmp_path, m):
        fp = tmp_path / "model.attb"
        persistence.save_model(m, fp)
        return fp

    def test_gen_patterns(self, tmp_path, capsys):
        assert cli.main(["gen", "patterns", "--seed", "0", "--out", str(tmp_path / "p.txt")]) == 0
        assert capsys.readouterr().out.strip() == "10 128"
        assert data.read_batch(tmp_path / "p.txt").samples.shape == (10, 128)
        assert cli.main(["gen", "patterns", "--num", "1", "--out", str(tmp_path / "one.txt")]) == 0
        assert data.read_batch(tmp_path / "one.txt").count == 1

    def test_gen_infeasible(self, tmp_path):
        args = ["gen", "patterns", "--bits", "4", "--left", "1", "--right", "1", "--num", "5", "--out", str(tmp_path / "p.txt")]
        assert cli.main(args) == 1

    def test_gen_polytree(self, tmp_path):
        assert cli.main(["gen", "polytree", "--preset", "collision", "--count", "100", "--seed", "1", "--out", str(tmp_path / "c.txt")]) == 0
        assert data.read_batch(tmp_path / "c.txt").samples.shape == (100, 17)
        polytree.write_polytree(polytree.BayesPolytree(3, ((0, 1),), 0.9), tmp_path / "bn.txt")
        assert cli.main(["gen", "polytree", "--spec", str(tmp_path / "bn.txt"), "--count", "20", "--out", str(tmp_path / "s.txt")]) == 0
        assert data.read_batch(tmp_path / "s.txt").n == 3
        (tmp_path / "broken.txt").write_text("3\n0 1\n")
        assert cli.main(["gen", "polytree", "--spec", str(tmp_path / "broken.txt"), "--count", "20", "--out", str(tmp_path / "s.txt")]) == 2

    def test_gen_permuted(self, tmp_path):
        assert cli.main(["gen", "patterns", "--bits", "8", "--left", "2", "--right", "2", "--num", "3", "--permute-seed", "1", "--out", str(tmp_path / "p.txt")]) == 0
        perm = pandas.read_csv(tmp_path / "p.txt.perm.csv")
        assert sorted(perm.variable) == list(range(8))

    def test_usage_errors(self, tmp_path):
        assert cli.main(["train", "--data", "x.txt"]) == 1
        assert cli.main(["nonsense"]) == 1
        assert cli.main(["train", "--data", "x.txt", "--chi", "2", "--out-model", "m", "--refresh", "every"]) == 1

    def test_eval_uniform(self, tmp_path, capsys):
        fp = self._model_file(tmp_path, bm.product_model(topology.make_tensor_train(3), 0.5))
        (tmp_path / "d.txt").write_text("3 2\n0 1 0\n1 1 1\n")
        assert cli.main(["eval", "--model", str(fp), "--data", str(tmp_path / "d.txt")]) == 0
        assert capsys.readouterr().out.strip() == "2.079442"

    def test_eval_matches_library(self, tmp_path, capsys):
        m = bm.init_model(topology.make_random_tree(6, 0), 3, seed=0)
        fp = self._model_file(tmp_path, m)
        batch = data.DataBatch(_random_samples(6, 25, 0))
        data.write_batch(batch, tmp_path / "d.txt")
        assert cli.main(["eval", "--model", str(fp), "--data", str(tmp_path / "d.txt"), "--threads", "2"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(bm.nll(m, batch), abs=1e-6)

    def test_eval_errors(self, tmp_path):
        fp = self._model_file(tmp_path, bm.product_model(topology.make_tensor_train(3), 0.5))
        (tmp_path / "d.txt").write_text("2 1\n0 1\n")
        assert cli.main(["eval", "--model", str(fp), "--data", str(tmp_path / "d.txt")]) == 2
        (tmp_path / "bad.txt").write_text("3 2\n0 1 0\n")
        assert cli.main(["eval", "--model", str(fp), "--data", str(tmp_path / "bad.txt")]) == 2
        assert cli.main(["eval", "--model", str(tmp_path / "missing.attb"), "--data", str(tmp_path / "d.txt")]) == 2

    @pytest.mark.parametrize("content", MALFORMED_BATCHES)
    def test_malformed_batch_exit_code(self, tmp_path, content):
        (tmp_path / "bad.txt").write_text(content, encoding="utf-8")
        args = ["split", "--data", str(tmp_path / "bad.txt"), "--out-train", str(tmp_path / "a.txt"), "--out-test", str(tmp_path / "b.txt")]
        assert cli.main(args) == 2

    @pytest.mark.parametrize("content", MALFORMED_POLYTREES)
    def test_malformed_polytree_exit_code(self, tmp_path, content):
        (tmp_path / "bn.txt").write_text(content)
        args = ["gen", "polytree", "--spec", str(tmp_path / "bn.txt"), "--count", "20", "--out", str(tmp_path / "s.txt")]
        assert cli.main(args) == 2

    def test_eval_memorized_patterns(self, tmp_path, capsys):
        batch, m = _memorized_patterns()
        fp = self._model_file(tmp_path, m)
        data.write_batch(batch, tmp_path / "d.txt")
        assert cli.main(["eval", "--model", str(fp), "--data", str(tmp_path / "d.txt")]) == 0
        assert capsys.readouterr().out.strip() == "2.302585"

    def test_train_zero_iterations(self, tmp_path):
        data.write_batch(data.DataBatch(_random_samples(4, 8, 0)), tmp_path / "d.txt")
        args = [
            "train", "--data", str(tmp_path / "d.txt"), "--chi", "2", "--iters", "0", "--init", "train",
            "--out-model", str(tmp_path / "m.attb"), "--out-report", str(tmp_path / "r.csv"),
        ]
        assert cli.main(args) == 0
        assert (tmp_path / "r.csv").read_text().splitlines() == ["iter,train_nll,test_nll"]
        assert persistence.load_model(tmp_path / "m.attb").topology.same_structure(topology.make_tensor_train(4))

    def test_train_and_export(self, tmp_path):
        assert cli.main(["gen", "patterns", "--bits", "6", "--left", "2", "--right", "2", "--num", "4", "--seed", "1", "--out", str(tmp_path / "d.txt")]) == 0
        args = [
            "train", "--data", str(tmp_path / "d.txt"), "--test", str(tmp_path / "d.txt"),
            "--chi", "2", "--lr", "0.05", "--iters", "5", "--seed", "3",
            "--out-model", str(tmp_path / "m.attb"), "--out-report", str(tmp_path / "r.csv"),
            "--out-dot", str(tmp_path / "t.dot"), "--out-bmi", str(tmp_path / "b.csv"),
            "--out-best", str(tmp_path / "best.attb"),
        ]
        assert cli.main(args) == 0
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 6
        assert "bmi=" in (tmp_path / "t.dot").read_text()
        manifest = json.loads((tmp_path / "m.attb.json").read_text())
        assert manifest["config"]["chi"] == 2
        assert manifest["dataset"]["n"] == 6
        assert persistence.load_model(tmp_path / "best.attb").n == 6

        (tmp_path / "labels.csv").write_text("variable,label,color\n0,first,red\n")
        args = [
            "export", "--model", str(tmp_path / "m.attb"), "--dot", str(tmp_path / "e.dot"),
            "--bmi", str(tmp_path / "b.csv"), "--labels", str(tmp_path / "labels.csv"),
            "--rank-csv", str(tmp_path / "rank.csv"),
        ]
        assert cli.main(args) == 0
        dot = (tmp_path / "e.dot").read_text()
        assert "fillcolor=red" in dot
        assert len(pandas.read_csv(tmp_path / "rank.csv")) == 6

    def test_train_snapshots_and_threads(self, tmp_path):
        data.write_batch(data.DataBatch(_random_samples(5, 12, 0)), tmp_path / "d.txt")
        args = [
            "train", "--data", str(tmp_path / "d.txt"), "--test", str(tmp_path / "d.txt"),
            "--chi", "2", "--lr", "0.05", "--iters", "4", "--init", "balanced",
            "--snapshot-interval", "2", "--snapshot-dir", str(tmp_path / "snapshots"), "--threads", "2",
            "--out-model", str(tmp_path / "m.attb"), "--out-report", str(tmp_path / "r.csv"),
        ]
        assert cli.main(args) == 0
        assert sorted(p.name for p in (tmp_path / "snapshots").iterdir()) == ["tree_000002.dot", "tree_000004.dot"]
        assert (tmp_path / "snapshots" / "tree_000002.dot").read_text().startswith("graph iteration_2 {")
        report = pandas.read_csv(tmp_path / "r.csv")
        assert report.test_nll.notna().all()
        assert json.loads((tmp_path / "m.attb.json").read_text())["config"]["threads"] == 2

    def test_export_exact_bmi(self, tmp_path):
        fp = self._model_file(tmp_path, bm.init_model(topology.make_tensor_train(3), 2, seed=0))
        assert cli.main(["export", "--model", str(fp), "--dot", str(tmp_path / "t.dot")]) == 0
        source = (tmp_path / "t.dot").read_text()
        assert len(re.findall(r"^\s*\d+ \[", source, re.M)) == 4
        assert len(re.findall(r"bmi=", source)) == 3

    def test_sample_is_seeded(self, tmp_path):
        fp = self._model_file(tmp_path, bm.init_model(topology.make_balanced_tree(5), 2, seed=0))
        for name in ["a.txt", "b.txt"]:
            assert cli.main(["sample", "--model", str(fp), "--count", "30", "--seed", "4", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.txt").read_text() == (tmp_path / "b.txt").read_text()
        assert data.read_batch(tmp_path / "a.txt").samples.shape == (30, 5)

    def test_split(self, tmp_path, capsys):
        data.write_batch(data.DataBatch(_random_samples(3, 9, 0)), tmp_path / "d.txt")
        args = ["split", "--data", str(tmp_path / "d.txt"), "--seed", "1", "--out-train", str(tmp_path / "a.txt"), "--out-test", str(tmp_path / "b.txt")]
        assert cli.main(args) == 0
        assert capsys.readouterr().out.strip() == "5 4"

    def test_inspect(self, tmp_path, capsys):
        fp = self._model_file(tmp_path, bm.product_model(topology.make_balanced_tree(4), 0.5))
        assert cli.main(["inspect", "--model", str(fp)]) == 0
        out = capsys.readouterr().out
        assert "variables      4" in out
        assert "entropy        2.772589" in out


class TestPlotting:
    def test_plot_nll_history(self):
        report = structure.TrainReport(nll_history=[3.0, 2.5, 2.4], test_nll_history=[numpy.nan, 2.6, 2.5])
        fig, ax = plotting.plot_nll_history(report, lower_bound=numpy.log(10))
        assert len(ax.lines) == 3
        pyplot.close()

    def test_plot_center_ranking(self):
        ranking = topology.center_distance_ranking(topology.make_balanced_tree(16))
        fig, ax = plotting.plot_center_ranking(ranking, shape=(4, 4))
        assert fig is ax.figure
        pyplot.close()
        with pytest.raises(ValueError):
            plotting.plot_center_ranking(ranking, shape=(2, 2))
