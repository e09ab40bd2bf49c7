"""Tree, process, and decomposition layer.

Hand-checked values come from small trees where every expectation can be
done on paper; the bigger checks are brute-forced against rule
enumeration from the game module.
"""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsdelab import (
    AdaptedProcess,
    FiltrationTree,
    StoppingRule,
    TimeGrid,
    class_d_norm,
    conditional_expectation,
    doob_decompose,
    predictable_projection,
    process_from_json,
    process_to_json,
    snell_envelope,
    tree_from_json,
    tree_to_json,
)
from rbsdelab.dynkin import enumerate_stopping_rules
from rbsdelab.errors import RuleOrderingError, TreeStructureError
from rbsdelab.scenarios import random_adapted, random_martingale, random_tree


def three_child_tree():
    # root with children carrying p = (0.2, 0.3, 0.5)
    return FiltrationTree(TimeGrid(1, 1.0), [-1, 0, 0, 0], [1.0, 0.2, 0.3, 0.5])


# ---------------------------------------------------------------------------
# construction and basic structure


def test_tree_layers_and_path_probabilities():
    tree = FiltrationTree.binary(2, 0.5, p=0.25)
    assert tree.n_nodes == 7
    assert [list(layer) for layer in tree.layers] == [[0], [1, 2], [3, 4, 5, 6]]
    assert np.isclose(tree.path_prob[3], 0.25 * 0.25)
    assert np.isclose(tree.path_prob[tree.leaves].sum(), 1.0)
    assert tree.grid.t(2) == 1.0


def test_tree_rejects_bad_wiring():
    with pytest.raises(TreeStructureError):
        FiltrationTree(TimeGrid(1, 1.0), [0, 0], [1.0, 1.0])  # node 0 not a root
    with pytest.raises(TreeStructureError):
        FiltrationTree(TimeGrid(1, 1.0), [-1, 0, 0], [1.0, 0.6, 0.3])  # probs sum 0.9
    with pytest.raises(TreeStructureError):
        FiltrationTree(TimeGrid(2, 1.0), [-1, 0, 0], [1.0, 0.5, 0.5])  # leaves at layer 1
    with pytest.raises(TreeStructureError):
        TimeGrid(2, 0.0)


def test_process_is_frozen():
    tree = FiltrationTree.chain(2, 1.0)
    X = AdaptedProcess.constant(tree, 1.0)
    with pytest.raises(ValueError):
        X.values[0] = 7.0


# ---------------------------------------------------------------------------
# conditional expectation


def test_condexp_three_children():
    tree = three_child_tree()
    X = AdaptedProcess(np.array([0.0, 1.0, 2.0, 3.0]))
    E = conditional_expectation(tree, X, 0)
    assert np.isclose(E[0], 2.3)


def test_condexp_binary_half():
    tree = FiltrationTree.binary(1, 1.0)
    X = AdaptedProcess(np.array([9.0, 2.0, 0.0]))
    assert np.isclose(conditional_expectation(tree, X, 0)[0], 1.0)


def test_condexp_chain_is_identity_shift():
    # trivial filtration: E[X_{k+1}|F_k] is just the next value
    tree = FiltrationTree.chain(3, 0.5)
    X = AdaptedProcess(np.array([4.0, -1.0, 2.5, 0.0]))
    for k in range(3):
        assert conditional_expectation(tree, X, k)[k] == X[k + 1]


def test_condexp_layer_out_of_range():
    tree = FiltrationTree.chain(2, 1.0)
    X = AdaptedProcess.constant(tree, 0.0)
    with pytest.raises(TreeStructureError):
        conditional_expectation(tree, X, 2)


# ---------------------------------------------------------------------------
# Doob decomposition


def walk_abs_tree():
    """|M| for the two-step +-1 walk with p = 1/2."""
    tree = FiltrationTree.binary(2, 1.0)
    M = np.array([0.0, 1.0, -1.0, 2.0, 0.0, 0.0, -2.0])
    return tree, AdaptedProcess(np.abs(M))


def test_doob_compensator_of_abs_walk():
    tree, X = walk_abs_tree()
    dec = doob_decompose(tree, X)
    # E[|M_1|] - |M_0| = 1, charged to both layer-1 nodes
    assert np.allclose(dec.dv[[1, 2]], 1.0)
    # beyond the root |M| is already a martingale: E[|M_2|
    # given either layer-1 node] = 1 = |M_1|
    assert np.allclose(dec.dv[[3, 4, 5, 6]], 0.0)
    assert np.allclose(dec.dm[[3, 4]], [1.0, -1.0])


def test_doob_martingale_has_zero_compensator(rng):
    tree = random_tree(rng, depth=3, dt=0.5)
    X = random_martingale(rng, tree)
    dec = doob_decompose(tree, X)
    assert np.max(np.abs(dec.dv)) < 1e-12


def test_doob_deterministic_has_zero_martingale_part():
    tree = FiltrationTree.binary(2, 1.0)
    X = AdaptedProcess.from_layer_function(tree, lambda t: t**2)
    dec = doob_decompose(tree, X)
    assert np.max(np.abs(dec.dm)) == 0.0


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_doob_reconstruction_is_exact(seed, depth):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, depth=depth, dt=0.25)
    X = random_adapted(rng, tree)
    dec = doob_decompose(tree, X)
    assert np.max(np.abs(dec.reconstruct(tree).values - X.values)) <= 1e-12
    # increments of the martingale part have zero conditional mean
    for node in range(tree.n_nodes):
        kids = tree.children[node]
        if kids.size:
            assert abs(np.dot(tree.edge_prob[kids], dec.dm[kids])) <= 1e-12
            assert np.ptp(dec.dv[kids]) <= 1e-12  # predictable: equal on siblings


# ---------------------------------------------------------------------------
# Snell envelope


def test_snell_chain_example():
    tree = FiltrationTree.chain(2, 1.0)
    X = AdaptedProcess(np.array([0.0, 5.0, 1.0]))
    S = snell_envelope(tree, X, StoppingRule.at_root(tree), StoppingRule.horizon(tree))
    assert np.allclose(S.values, [5.0, 5.0, 1.0])


def test_snell_constant_process():
    tree = FiltrationTree.binary(3, 0.5)
    X = AdaptedProcess.constant(tree, -2.0)
    S = snell_envelope(tree, X, StoppingRule.at_root(tree), StoppingRule.horizon(tree))
    assert np.allclose(S.values, -2.0)


def test_snell_rejects_unordered_rules():
    tree = FiltrationTree.chain(2, 1.0)
    X = AdaptedProcess.constant(tree, 0.0)
    with pytest.raises(RuleOrderingError):
        snell_envelope(tree, X, StoppingRule.horizon(tree), StoppingRule.at_root(tree))


def _expectation_at_rule(tree, X, rule):
    nodes = rule.fires_at(tree)
    return float(np.dot(tree.path_prob[nodes], X.values[nodes]))


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_snell_root_value_is_optimal_stopping_value(seed, depth):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, depth=depth, dt=0.25)
    X = random_adapted(rng, tree)
    S = snell_envelope(tree, X, StoppingRule.at_root(tree), StoppingRule.horizon(tree))
    best = max(
        _expectation_at_rule(tree, X, rule)
        for rule in enumerate_stopping_rules(tree)
    )
    assert np.isclose(S[0], best, atol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_snell_dominates_and_is_supermartingale(seed, depth):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, depth=depth, dt=0.25)
    X = random_adapted(rng, tree)
    S = snell_envelope(tree, X, StoppingRule.at_root(tree), StoppingRule.horizon(tree))
    assert np.all(S.values >= X.values - 1e-12)
    for node in range(tree.n_nodes):
        kids = tree.children[node]
        if kids.size:
            cont = np.dot(tree.edge_prob[kids], S.values[kids])
            assert S[node] >= cont - 1e-12


# ---------------------------------------------------------------------------
# class (D) norm


def test_class_d_norm_constant():
    tree = FiltrationTree.binary(2, 1.0)
    assert np.isclose(class_d_norm(tree, AdaptedProcess.constant(tree, -3.5)), 3.5)


def test_class_d_norm_positive_martingale(rng):
    # optional stopping: E|Y_tau| = Y_0 for every rule
    tree = random_tree(rng, depth=3, dt=0.5)
    M = random_martingale(rng, tree, scale=0.2)
    Y = AdaptedProcess(M.values + abs(M.values.min()) + 1.0)
    assert np.isclose(class_d_norm(tree, Y), Y[0], atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_class_d_norm_matches_enumeration(seed, depth):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, depth=depth, dt=0.25)
    Y = random_adapted(rng, tree)
    brute = max(
        _expectation_at_rule(tree, Y.abs(), rule)
        for rule in enumerate_stopping_rules(tree)
    )
    assert np.isclose(class_d_norm(tree, Y), brute, atol=1e-10)


# ---------------------------------------------------------------------------
# predictable projection


def test_projection_quarter_three_quarters():
    tree = FiltrationTree(TimeGrid(1, 1.0), [-1, 0, 0], [1.0, 0.25, 0.75])
    X = AdaptedProcess(np.array([0.0, 4.0, 0.0]))
    P = predictable_projection(tree, X)
    assert np.allclose(P.values[[1, 2]], 1.0)
    assert P[0] == X[0]


def test_projection_linear_and_idempotent(rng):
    tree = random_tree(rng, depth=3, dt=0.5)
    X = random_adapted(rng, tree)
    Z = random_adapted(rng, tree)
    lhs = predictable_projection(
        tree, AdaptedProcess(2.0 * X.values - 0.5 * Z.values))
    rhs = 2.0 * predictable_projection(tree, X).values \
        - 0.5 * predictable_projection(tree, Z).values
    assert np.allclose(lhs.values, rhs, atol=1e-12)
    P = predictable_projection(tree, X)
    PP = predictable_projection(tree, P)
    assert np.allclose(P.values, PP.values, atol=1e-12)


def test_projection_fixes_predictable_processes(rng):
    tree = random_tree(rng, depth=3, dt=0.5)
    dec = doob_decompose(tree, random_adapted(rng, tree))
    V = np.zeros(tree.n_nodes)
    for i in range(1, tree.n_nodes):
        V[i] = V[tree.parent[i]] + dec.dv[i]
    P = predictable_projection(tree, AdaptedProcess(V))
    assert np.allclose(P.values, V, atol=1e-12)


def test_projection_of_martingale_steps_back(rng):
    tree = random_tree(rng, depth=3, dt=0.5)
    M = random_martingale(rng, tree)
    P = predictable_projection(tree, M)
    for node in range(tree.n_nodes):
        for kid in tree.children[node]:
            assert np.isclose(P[int(kid)], M[node], atol=1e-12)


# ---------------------------------------------------------------------------
# stopping rules


def test_rule_first_flag_fires_later_flags_inert():
    tree = FiltrationTree.chain(3, 1.0)
    mask = np.array([False, True, True, False])
    rule = StoppingRule.hitting(tree, mask)
    assert list(rule.fires_at(tree)) == [1]


def test_hitting_rule_caps_at_horizon():
    tree = FiltrationTree.binary(2, 1.0)
    rule = StoppingRule.hitting(tree, np.zeros(tree.n_nodes, dtype=bool))
    assert sorted(rule.fires_at(tree)) == sorted(tree.leaves)


def test_rule_ordering_and_layers():
    tree = FiltrationTree.binary(2, 1.0)
    first = StoppingRule.at_root(tree)
    later = StoppingRule.at_layer(tree, 1)
    last = StoppingRule.horizon(tree)
    assert first.pathwise_le(tree, later) and later.pathwise_le(tree, last)
    assert not last.pathwise_le(tree, later)
    assert list(later.fires_at(tree)) == [1, 2]


def test_fires_at_partitions_probability(rng):
    tree = random_tree(rng, depth=4, dt=0.25)
    mask = rng.uniform(size=tree.n_nodes) < 0.3
    rule = StoppingRule.hitting(tree, mask)
    nodes = rule.fires_at(tree)
    assert np.isclose(tree.path_prob[nodes].sum(), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# serialization


def test_tree_json_round_trip(rng):
    tree = random_tree(rng, depth=3, dt=0.125)
    back = tree_from_json(tree_to_json(tree))
    assert back.n_nodes == tree.n_nodes
    assert np.array_equal(back.parent, tree.parent)
    assert np.allclose(back.edge_prob, tree.edge_prob)
    assert back.dt == tree.dt


def test_process_json_round_trip(rng):
    tree = random_tree(rng, depth=3, dt=0.125)
    X = random_adapted(rng, tree)
    back = process_from_json(tree, process_to_json(tree, X))
    assert np.allclose(back.values, X.values, atol=0)


def test_process_json_missing_node():
    tree = FiltrationTree.chain(2, 1.0)
    with pytest.raises(TreeStructureError, match="missing"):
        process_from_json(tree, json.dumps({"0": 1.0, "1": 2.0}))


def test_tree_json_rejects_inconsistent_layers():
    tree = FiltrationTree.chain(2, 1.0)
    obj = json.loads(tree_to_json(tree))
    obj["nodes"][2]["layer"] = 1
    with pytest.raises(TreeStructureError):
        tree_from_json(json.dumps(obj))
