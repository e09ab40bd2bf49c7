"""Game payoffs, enumeration oracles, saddles, and the nonlinear game.

On a finite tree every optimum over stopping rules is attained, so the
barrier-hitting pair read off the value process verifies as an exact
saddle even without the projection condition; the epsilon checks are
still exercised on the projection-violating registry scenario because
that is the regime the continuous theory actually covers.
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsdelab import (
    AdaptedProcess,
    BarrierPair,
    FiltrationTree,
    GamePayoff,
    Generator,
    StoppingRule,
    doob_decompose,
    game_value_bruteforce,
    game_value_process,
    generalized_game_value,
    generalized_payoff_J,
    payoff_J,
    saddle_from_solution,
    solve_reflected,
    verify_saddle,
    verify_solution,
)
from rbsdelab.dynkin import (
    SaddleCandidate,
    count_stopping_rules,
    enumerate_stopping_rules,
)
from rbsdelab.errors import ConfigError, OracleTooLarge, StepSizeError
from rbsdelab.scenarios import (
    named_scenario,
    random_martingale,
    random_reflected_scenario,
)


def _game_scenario():
    sc = named_scenario("binary-game")
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
    return sc, payoff


# ---------------------------------------------------------------------------
# payoff functional


def test_payoff_stop_together_before_horizon_pays_upper():
    sc, payoff = _game_scenario()
    root = StoppingRule.at_root(sc.tree)
    J = payoff_J(sc.tree, payoff, sigma=root, tau=root)
    assert J[0] == sc.barriers.upper[0]


def test_payoff_never_stopping_pays_expected_terminal():
    sc, payoff = _game_scenario()
    hor = StoppingRule.horizon(sc.tree)
    J = payoff_J(sc.tree, payoff, sigma=hor, tau=hor)
    xi = np.array([sc.terminal[int(l)] for l in sc.tree.leaves])
    assert np.isclose(J[0], np.dot(sc.tree.path_prob[sc.tree.leaves], xi))


def test_payoff_running_term_accrues_before_stop():
    tree = FiltrationTree.chain(2, 0.5)
    payoff = GamePayoff(
        running=AdaptedProcess(np.array([2.0, 4.0, 0.0])),
        lower=AdaptedProcess.constant(tree, -10.0),
        upper=AdaptedProcess.constant(tree, 10.0),
        terminal=1.0,
    )
    hor = StoppingRule.horizon(tree)
    J = payoff_J(tree, payoff, sigma=hor, tau=hor)
    assert np.isclose(J[0], 2.0 * 0.5 + 4.0 * 0.5 + 1.0)


def test_payoff_requires_keyword_rules():
    sc, payoff = _game_scenario()
    root = StoppingRule.at_root(sc.tree)
    with pytest.raises(TypeError):
        payoff_J(sc.tree, payoff, root, root)


def test_payoff_rejects_terminal_outside_sandwich():
    tree = FiltrationTree.chain(1, 1.0)
    payoff = GamePayoff(
        running=AdaptedProcess.constant(tree, 0.0),
        lower=AdaptedProcess.constant(tree, -1.0),
        upper=AdaptedProcess.constant(tree, 1.0),
        terminal=3.0,
    )
    with pytest.raises(ConfigError):
        payoff.validate(tree)


def test_one_step_tie_goes_to_the_upper_barrier():
    # sigma = tau at an interior node lies in the "tau <= sigma < T" branch
    tree = FiltrationTree.chain(1, 1.0)
    barriers = BarrierPair(
        AdaptedProcess(np.array([-6.0, 0.0])),
        AdaptedProcess(np.array([-5.0, 0.0])),
    )
    payoff = GamePayoff.from_barriers(tree, barriers, 0.0)
    gv = game_value_bruteforce(tree, payoff)
    assert gv.value_at(0) == -5.0
    sol = solve_reflected(tree, 0.0, Generator.constant(0.0), barriers)
    assert np.isclose(sol.Y[0], -5.0)


# ---------------------------------------------------------------------------
# enumeration


def test_rule_counts_on_binary_trees():
    assert count_stopping_rules(FiltrationTree.chain(0, 1.0)) == 1
    assert count_stopping_rules(FiltrationTree.binary(2, 1.0)) == 5
    assert count_stopping_rules(FiltrationTree.binary(3, 1.0)) == 26
    assert count_stopping_rules(FiltrationTree.binary(4, 1.0)) == 677


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_enumeration_matches_count_and_is_unique(seed, depth):
    rng = np.random.default_rng(seed)
    tree = FiltrationTree.random(rng, depth, 0.5)
    rules = list(enumerate_stopping_rules(tree))
    assert len(rules) == count_stopping_rules(tree)
    seen = {tuple(sorted(map(int, r.fires_at(tree)))) for r in rules}
    assert len(seen) == len(rules)


def test_enumeration_recursion_product(rng):
    tree = FiltrationTree.random(rng, 3, 0.5)

    def n_under(node):
        kids = tree.children[node]
        if kids.size == 0:
            return 1
        prod = 1
        for kid in kids:
            prod *= n_under(int(kid))
        return 1 + prod

    assert count_stopping_rules(tree) == n_under(0)


def test_oracle_cap():
    sc, payoff = _game_scenario()
    with pytest.raises(OracleTooLarge):
        game_value_bruteforce(sc.tree, payoff, cap=3)


# ---------------------------------------------------------------------------
# brute-force value


def test_pinched_game_value_is_the_barrier():
    sc = named_scenario("pinched-chain")
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
    gv = game_value_bruteforce(sc.tree, payoff)
    assert np.isclose(gv.value_at(0), sc.barriers.lower[0], atol=1e-12)


def test_binary_game_has_value_zero():
    sc, payoff = _game_scenario()
    gv = game_value_bruteforce(sc.tree, payoff)
    assert abs(gv.value_at(0)) <= 1e-12
    assert abs(gv.infsup[0]) <= 1e-12
    assert gv.pairs_checked == 25


@given(st.integers(0, 10_000))
def test_game_has_a_value_and_matches_reflected_solution(seed):
    rng = np.random.default_rng(seed)
    sc = random_reflected_scenario(rng, depth=3)
    sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
    # freeze the driver along the solution into the running term
    run = AdaptedProcess(np.array([
        sc.generator(int(sc.tree.layer[i]), i, sol.Y[i])
        for i in range(sc.tree.n_nodes)
    ]))
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal, running=run)
    gv = game_value_bruteforce(sc.tree, payoff)
    assert abs(gv.value_at(0) - gv.infsup[0]) <= 1e-9
    assert abs(gv.value_at(0) - sol.Y[0]) <= 1e-8


def test_value_process_passes_verifier(rng):
    for _ in range(5):
        sc = random_reflected_scenario(rng, mu_range=(0.0, 0.0))
        sc_f = Generator.constant(0.0)
        payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
        V = game_value_process(sc.tree, payoff)
        report = verify_solution(sc.tree, V, sc_f, sc.terminal, sc.barriers)
        assert report.passed, report.as_text()


# ---------------------------------------------------------------------------
# saddles


def test_binary_game_saddle_rules_and_value():
    sc, payoff = _game_scenario()
    sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
    cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers)
    # minimizer quits on the winning branch, maximizer on the losing one
    assert sorted(map(int, cand.tau_star.fires_at(sc.tree))) == [1, 5, 6]
    assert sorted(map(int, cand.sigma_star.fires_at(sc.tree))) == [2, 3, 4]
    report = verify_saddle(sc.tree, payoff, cand)
    assert report.passed(1e-9)
    assert abs(report.value) <= 1e-12
    J = payoff_J(sc.tree, payoff, sigma=cand.sigma_star, tau=cand.tau_star)
    assert abs(J[0]) <= 1e-12


def test_saddle_on_pinched_value():
    sc = named_scenario("pinched-chain")
    sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
    cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers)
    assert list(cand.sigma_star.fires_at(sc.tree)) == [0]
    assert list(cand.tau_star.fires_at(sc.tree)) == [0]


def test_any_rules_saddle_a_pinched_martingale_game(rng):
    tree = FiltrationTree.binary(3, 0.5)
    w = random_martingale(rng, tree)
    barriers = BarrierPair(w, w)
    payoff = GamePayoff.from_barriers(tree, barriers, w)
    for sigma in (StoppingRule.at_layer(tree, 1), StoppingRule.horizon(tree)):
        for tau in (StoppingRule.at_root(tree), StoppingRule.at_layer(tree, 2)):
            cand = SaddleCandidate(sigma_star=sigma, tau_star=tau)
            assert verify_saddle(tree, payoff, cand).passed(1e-9)


def test_large_eps_rules_fire_immediately(rng):
    sc = random_reflected_scenario(rng)
    sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
    span = float(np.max(sc.barriers.upper.values - sc.barriers.lower.values))
    cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers, eps=span + 1.0)
    assert list(cand.sigma_star.fires_at(sc.tree)) == [0]
    assert list(cand.tau_star.fires_at(sc.tree)) == [0]


@given(st.integers(0, 10_000))
def test_exact_saddles_under_projection_condition(seed):
    rng = np.random.default_rng(seed)
    sc = random_reflected_scenario(rng, projection_safe=True,
                                   mu_range=(0.0, 0.0))
    sc_f = Generator.constant(float(sc.generator(0, 0, 0.0)))
    sol = solve_reflected(sc.tree, sc.terminal, sc_f, sc.barriers)
    run = AdaptedProcess.constant(sc.tree, float(sc_f(0, 0, 0.0)))
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal,
                                      running=run)
    cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers)
    report = verify_saddle(sc.tree, payoff, cand)
    assert report.passed(1e-9)
    assert abs(report.value - sol.Y[0]) <= 1e-9


def test_eps_saddles_on_projection_violating_scenario():
    sc = named_scenario("predictable-drop")
    sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
    for eps in sc.experiment["eps"]:
        cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers, eps=eps)
        report = verify_saddle(sc.tree, payoff, cand, Y=sol.Y)
        assert report.passed(1e-9), report.as_text()


def test_value_with_driver_is_martingale_up_to_first_exit(rng):
    for _ in range(5):
        sc = random_reflected_scenario(rng)
        sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
        cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers)
        stop = StoppingRule.hitting(
            sc.tree, cand.sigma_star.stop | cand.tau_star.stop)
        reached = stop.reached(sc.tree)
        # Y plus accrued driver along each path
        acc = np.zeros(sc.tree.n_nodes)
        for i in range(1, sc.tree.n_nodes):
            p = int(sc.tree.parent[i])
            acc[i] = acc[p] + sc.generator(int(sc.tree.layer[p]), p, sol.Y[p]) \
                * sc.tree.dt
        dec = doob_decompose(sc.tree, AdaptedProcess(sol.Y.values + acc))
        for node in range(sc.tree.n_nodes):
            kids = sc.tree.children[node]
            if kids.size and not reached[node]:
                assert np.max(np.abs(dec.dv[kids])) <= 1e-10


# ---------------------------------------------------------------------------
# generalized game


def test_generalized_game_with_zero_driver_reduces_to_plain(rng):
    sc = random_reflected_scenario(rng)
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
    plain = game_value_bruteforce(sc.tree, payoff)
    gen = generalized_game_value(sc.tree, Generator.constant(0.0), sc.barriers,
                                 sc.terminal)
    assert abs(gen.value_at(0) - plain.value_at(0)) <= 1e-10


def test_generalized_game_matches_reflected_solution():
    sc = named_scenario("binary-game")
    f = Generator.linear(-1.0, 0.0)
    sol = solve_reflected(sc.tree, sc.terminal, f, sc.barriers)
    gv = generalized_game_value(sc.tree, f, sc.barriers, sc.terminal)
    assert abs(gv.value_at(0) - sol.Y[0]) <= 1e-8
    assert abs(gv.value_at(0) - gv.infsup[0]) <= 1e-9


def test_generalized_game_requires_nonpositive_mu():
    sc = named_scenario("binary-game")
    with pytest.raises(StepSizeError):
        generalized_game_value(sc.tree, Generator.linear(0.5, 0.0),
                               sc.barriers, sc.terminal)


def test_generalized_payoff_reduces_to_plain_payoff(rng):
    sc = random_reflected_scenario(rng)
    payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
    hor = StoppingRule.horizon(sc.tree)
    mid = StoppingRule.at_layer(sc.tree, 1)
    for sigma, tau in [(hor, hor), (mid, hor), (hor, mid), (mid, mid)]:
        a = payoff_J(sc.tree, payoff, sigma=sigma, tau=tau)
        b = generalized_payoff_J(sc.tree, Generator.constant(0.0), sc.barriers,
                                 sc.terminal, sigma=sigma, tau=tau)
        assert abs(a[0] - b[0]) <= 1e-11


def test_generalized_eps_inequalities(rng):
    sc = random_reflected_scenario(rng, mu_range=(-1.0, -0.2))
    sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers)
    rules = list(enumerate_stopping_rules(sc.tree))
    for eps in (0.25, 0.1):
        cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers, eps=eps)
        lo = max(
            generalized_payoff_J(sc.tree, sc.generator, sc.barriers, sc.terminal,
                                 sigma=sig, tau=cand.tau_star)[0]
            for sig in rules
        )
        hi = min(
            generalized_payoff_J(sc.tree, sc.generator, sc.barriers, sc.terminal,
                                 sigma=cand.sigma_star, tau=tau)[0]
            for tau in rules
        )
        assert lo - eps <= sol.Y[0] + 1e-9
        assert sol.Y[0] <= hi + eps + 1e-9
