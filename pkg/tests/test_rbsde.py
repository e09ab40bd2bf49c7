"""Reflected solver, penalization ladder, pinching system, verifier,
projection condition, stability bound.

The pinching-cone scenario ("dex2" in the registry) is the load-bearing
fixture: a closing barrier cone on [0,1] followed by a pinched tail, where
a one-parameter family of spurious candidates satisfies everything except
minimality.  The expected failure slack for the scale-r candidate is
r*(r + 0.9): the drop of size r at the cone close, paired with the gap to
the lower barrier at the step before it.
"""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsdelab import (
    AdaptedProcess,
    BarrierPair,
    FiltrationTree,
    GamePayoff,
    Generator,
    build_l_system,
    check_projection_condition,
    default_eta,
    game_value_bruteforce,
    solve_bsde,
    solve_half_penalized,
    solve_penalized,
    solve_reflected,
    stability_gap,
    verify_solution,
)
from rbsdelab.errors import BarrierCrossing, ConfigError, TerminalViolation
from rbsdelab.scenarios import (
    named_scenario,
    pinching_cone_candidate,
    random_ordered_pair,
    random_perturbation_pair,
    random_reflected_scenario,
)


def _solve(sc, **kw):
    return solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers, **kw)


# ---------------------------------------------------------------------------
# frozen solves


def test_two_step_chain_with_binding_upper_barrier():
    tree = FiltrationTree.chain(2, 1.0)
    barriers = BarrierPair(
        AdaptedProcess(np.array([-2.0, -1.0, 0.0])),
        AdaptedProcess(np.array([2.0, 0.5, 0.0])),
    )
    sol = solve_reflected(tree, 0.0, Generator.constant(1.0), barriers)
    assert np.allclose(sol.Y.values, [1.5, 0.5, 0.0], atol=1e-12)
    assert np.allclose(sol.dr_minus, [0.0, 0.0, 0.5], atol=1e-12)
    assert np.max(sol.dr_plus) == 0.0

    # brute-force game oracle with the driver frozen into the running term
    payoff = GamePayoff.from_barriers(tree, barriers, 0.0,
                                      running=AdaptedProcess.constant(tree, 1.0))
    gv = game_value_bruteforce(tree, payoff)
    assert abs(gv.value_at(0) - sol.Y[0]) <= 1e-12


def test_binary_game_scenario_values():
    sc = named_scenario("binary-game")
    sol = _solve(sc)
    assert abs(sol.Y[0]) <= 1e-12
    assert np.allclose(sol.Y.values[[1, 2]], [0.5, -0.5], atol=1e-12)


def test_pinched_barriers_force_y_equal_l():
    sc = named_scenario("pinched-chain")
    sol = _solve(sc)
    assert np.allclose(sol.Y.values, sc.barriers.lower.values, atol=1e-12)
    report = verify_solution(sc.tree, sol.Y, sc.generator, sc.terminal, sc.barriers)
    assert report.passed


def test_no_barriers_reduces_to_bsde(rng):
    sc = random_reflected_scenario(rng)
    free = BarrierPair(None, None)
    ref = solve_reflected(sc.tree, sc.terminal, sc.generator, free)
    bare = solve_bsde(sc.tree, sc.terminal, sc.generator)
    assert np.allclose(ref.Y.values, bare.Y.values, atol=1e-11)
    assert np.max(ref.dr_plus) == np.max(ref.dr_minus) == 0.0


def test_one_sided_reflection_dominates_free_solution(rng):
    sc = random_reflected_scenario(rng)
    lower_only = BarrierPair(sc.barriers.lower, None)
    # keep the terminal admissible for the one-sided problem
    xi = {int(l): max(v, sc.barriers.lower.values[l])
          for l, v in sc.terminal.items()}
    ref = solve_reflected(sc.tree, xi, sc.generator, lower_only)
    bare = solve_bsde(sc.tree, xi, sc.generator)
    assert np.min(ref.Y.values - sc.barriers.lower.values) >= -1e-11
    assert np.min(ref.Y.values - bare.Y.values) >= -1e-11


def test_invalid_data_raises():
    tree = FiltrationTree.chain(1, 1.0)
    lo = AdaptedProcess(np.array([1.0, 0.0]))
    hi = AdaptedProcess(np.array([0.0, 0.0]))
    with pytest.raises(BarrierCrossing):
        solve_reflected(tree, 0.0, Generator.constant(0.0), BarrierPair(lo, hi))
    ok = BarrierPair.constant(tree, -1.0, 1.0)
    with pytest.raises(TerminalViolation):
        solve_reflected(tree, 5.0, Generator.constant(0.0), ok)


# ---------------------------------------------------------------------------
# solution structure


@given(st.integers(0, 10_000))
def test_reflected_solution_invariants(seed):
    rng = np.random.default_rng(seed)
    sc = random_reflected_scenario(rng)
    sol = _solve(sc)
    tree = sc.tree
    lo, hi = sc.barriers.arrays(tree)
    assert np.all(sol.Y.values >= lo - 1e-10)
    assert np.all(sol.Y.values <= hi + 1e-10)
    assert np.min(sol.dr_plus) >= 0.0 and np.min(sol.dr_minus) >= 0.0
    for node in range(tree.n_nodes):
        kids = tree.children[node]
        if kids.size == 0:
            continue
        k = int(tree.layer[node])
        # predictable increments, zero-mean martingale part
        assert np.ptp(sol.dr_plus[kids]) <= 1e-12
        assert np.ptp(sol.dr_minus[kids]) <= 1e-12
        assert abs(np.dot(tree.edge_prob[kids], sol.dm[kids])) <= 1e-10
        # dynamics with reflection
        cont = np.dot(tree.edge_prob[kids], sol.Y.values[kids])
        drift = sc.generator(k, node, sol.Y[node]) * tree.dt
        kid = int(kids[0])
        res = sol.Y[node] - cont - drift - sol.dr_plus[kid] + sol.dr_minus[kid]
        assert abs(res) <= 1e-10
        # exact complementarity of the clamp construction
        assert min(sol.dr_plus[kid], sol.Y[node] - lo[node]) <= 1e-10
        assert min(sol.dr_minus[kid], hi[node] - sol.Y[node]) <= 1e-10


@given(st.integers(0, 10_000))
def test_projected_mode_agrees_with_clamp(seed):
    rng = np.random.default_rng(seed)
    sc = random_reflected_scenario(rng)
    a = _solve(sc, method="clamp")
    b = _solve(sc, method="projected")
    assert np.max(np.abs(a.Y.values - b.Y.values)) <= 1e-9


@given(st.integers(0, 10_000))
def test_comparison_for_ordered_reflected_data(seed):
    rng = np.random.default_rng(seed)
    sc1, sc2 = random_ordered_pair(rng, depth=int(rng.integers(2, 5)))
    Y1 = _solve(sc1).Y
    Y2 = _solve(sc2).Y
    assert np.max(Y1.values - Y2.values) <= 1e-10


def test_solver_output_passes_verifier(rng):
    for _ in range(10):
        sc = random_reflected_scenario(rng)
        sol = _solve(sc)
        report = verify_solution(sc.tree, sol.Y, sc.generator, sc.terminal,
                                 sc.barriers)
        assert report.passed, report.as_text()


# ---------------------------------------------------------------------------
# penalization


def test_penalty_with_inactive_barriers_matches_free_solution(rng):
    sc = random_reflected_scenario(rng)
    far = BarrierPair.constant(sc.tree, -100.0, 100.0)
    xi = sc.terminal
    bare = solve_bsde(sc.tree, xi, sc.generator)
    for n in (1, 100, 10_000):
        pen = solve_penalized(sc.tree, xi, sc.generator, far, n)
        assert np.max(np.abs(pen.Y.values - bare.Y.values)) <= 1e-10
        assert np.max(pen.dpen_plus) == np.max(pen.dpen_minus) == 0.0


def test_lower_penalty_is_monotone_in_n(rng):
    sc = random_reflected_scenario(rng)
    prev = None
    for n in (1, 10, 100, 1000, 10_000):
        cur = solve_penalized(sc.tree, sc.terminal, sc.generator, sc.barriers,
                              n, mode="lower").Y.values
        if prev is not None:
            assert np.min(cur - prev) >= -1e-12
        prev = cur


def test_penalty_sandwich_and_convergence(rng):
    sc = random_reflected_scenario(rng)
    exact = _solve(sc).Y.values
    errors = []
    for n in (1, 10, 100, 1000, 10_000):
        args = (sc.tree, sc.terminal, sc.generator, sc.barriers, n)
        low = solve_penalized(*args, mode="lower").Y.values
        up = solve_penalized(*args, mode="upper").Y.values
        both = solve_penalized(*args, mode="both").Y.values
        # driver ordering of the pure penalty modes
        assert np.min(low - both) >= -1e-10
        assert np.min(both - up) >= -1e-10
        # the half-reflected schemes bracket the fully penalized one
        bar = solve_half_penalized(*args, penalty_side="lower").Y.values
        under = solve_half_penalized(*args, penalty_side="upper").Y.values
        assert np.min(both - bar) >= -1e-10
        assert np.min(under - both) >= -1e-10
        errors.append(np.max(np.abs(both - exact)))
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-2 * max(errors[0], 1e-12)


def test_half_penalized_ladder(rng):
    sc = random_reflected_scenario(rng, projection_safe=True)
    exact = _solve(sc).Y.values
    prev = None
    for n in (1, 10, 100, 1000, 10_000):
        half = solve_half_penalized(sc.tree, sc.terminal, sc.generator,
                                    sc.barriers, n, penalty_side="lower")
        # upper barrier is respected exactly, values rise with n
        assert np.max(half.Y.values - sc.barriers.upper.values) <= 1e-10
        if prev is not None:
            assert np.min(half.Y.values - prev) >= -1e-12
        prev = half.Y.values
        err = np.max(np.abs(half.Y.values - exact))
    assert err <= 2e-3
    mirror = solve_half_penalized(sc.tree, sc.terminal, sc.generator,
                                  sc.barriers, 10_000, penalty_side="upper")
    assert np.max(np.abs(mirror.Y.values - exact)) <= 2e-3
    assert np.min(mirror.Y.values - sc.barriers.lower.values) >= -1e-10


def test_one_sided_scheme_documented_without_projection(rng):
    # with a predictable downward barrier jump the ucp-refinement theorem
    # gives no monotonicity; just record that the ladder stays bounded and
    # still converges on this instance
    sc = named_scenario("predictable-drop")
    exact = _solve(sc).Y.values
    errs = [
        np.max(np.abs(
            solve_half_penalized(sc.tree, sc.terminal, sc.generator,
                                 sc.barriers, n, penalty_side="lower").Y.values
            - exact))
        for n in (1, 10, 100, 1000, 10_000)
    ]
    assert all(np.isfinite(errs))
    assert errs[-1] <= errs[0] + 1e-12


def test_default_eta_matches_weight_formula():
    tree = FiltrationTree.chain(4, 0.5)
    eta = default_eta(tree)
    t = 0.5 * tree.layer
    assert np.allclose(eta.values, (2.0 / np.pi) / (1.0 + t**2), atol=1e-15)


def test_penalty_rejects_unknown_mode(rng):
    sc = random_reflected_scenario(rng)
    with pytest.raises(ConfigError):
        solve_penalized(sc.tree, sc.terminal, sc.generator, sc.barriers, 10,
                        mode="sideways")


# ---------------------------------------------------------------------------
# pinching system


def test_l_system_strict_gap_never_pinches(rng):
    sc = random_reflected_scenario(rng)  # barriers keep a gap >= 0.1
    ls = build_l_system(sc.tree, sc.barriers)
    for anchor in range(sc.tree.n_nodes):
        for leaf, (g, layer, lam, closed) in ls.gamma_by_leaf(anchor).items():
            assert layer == sc.tree.K and not lam and closed
            assert g == leaf


def test_l_system_pinched_everywhere_stops_at_once():
    sc = named_scenario("pinched-chain")
    ls = build_l_system(sc.tree, sc.barriers)
    for anchor in range(sc.tree.n_nodes):
        rec = ls.gamma_by_leaf(anchor)
        for leaf, (g, layer, lam, closed) in rec.items():
            assert g == anchor and not lam and closed
        assert ls.interval_steps(anchor).size == 0


def test_l_system_on_pinching_cone_grid():
    sc = named_scenario("dex2")
    ls = build_l_system(sc.tree, sc.barriers)
    # anchor at t = 0.1: the cone is open until it closes at t = 1.0
    by_leaf = ls.gamma_by_leaf(1)
    (g, layer, lam, closed), = by_leaf.values()
    assert layer == 10 and not lam and closed
    assert list(ls.interval_steps(1)) == list(range(2, 11))
    # the origin itself is pinched (both barriers vanish at t = 0)
    assert ls.gamma_by_leaf(0)[int(sc.tree.leaves[0])][1] == 0


# ---------------------------------------------------------------------------
# verifier on the pinching cone


def test_pinching_cone_zero_solution_passes():
    sc = named_scenario("dex2")
    report = verify_solution(sc.tree, pinching_cone_candidate(0.0),
                             sc.generator, sc.terminal, sc.barriers)
    assert report.passed, report.as_text()
    assert report.anchors_checked == 21
    assert report.steps_checked == 45


@pytest.mark.parametrize("r", [0.25, 0.5])
def test_pinching_cone_spurious_candidate_fails_only_minimality(r):
    sc = named_scenario("dex2")
    report = verify_solution(sc.tree, pinching_cone_candidate(r),
                             sc.generator, sc.terminal, sc.barriers)
    assert not report.passed
    for name in ("class (D)", "dynamics", "barriers"):
        assert report.condition(name).passed
    bad = report.condition("minimality")
    assert not bad.passed
    assert abs(bad.slack - r * (r + 0.9)) <= 1e-12
    assert bad.witness == 9


def test_pinching_cone_solver_recovers_zero():
    sc = named_scenario("dex2")
    sol = _solve(sc)
    assert np.max(np.abs(sol.Y.values)) <= 1e-12


# ---------------------------------------------------------------------------
# projection condition


def test_projection_constant_barriers_pass(rng):
    sc = random_reflected_scenario(rng)
    flat = BarrierPair.constant(sc.tree, -1.0, 1.0)
    chk = check_projection_condition(sc.tree, flat)
    assert chk.both_ok


def test_projection_sub_super_martingale_pass(rng):
    sc = random_reflected_scenario(rng, projection_safe=True)
    chk = check_projection_condition(sc.tree, sc.barriers)
    assert chk.lower_ok and chk.upper_ok


def test_projection_detects_predictable_drop():
    tree = FiltrationTree.chain(2, 1.0)
    barriers = BarrierPair(
        AdaptedProcess(np.array([0.0, -1.0, -1.0])),
        AdaptedProcess(np.array([2.0, 2.0, 2.0])),
    )
    chk = check_projection_condition(tree, barriers)
    assert not chk.lower_ok and chk.upper_ok
    assert chk.lower_witness == 0 and chk.upper_witness is None


def test_projection_flags_registry_counterexample():
    sc = named_scenario("predictable-drop")
    chk = check_projection_condition(sc.tree, sc.barriers)
    assert not chk.lower_ok


# ---------------------------------------------------------------------------
# stability


def test_stability_identical_scenarios(rng):
    sc = random_reflected_scenario(rng)
    gap = stability_gap(sc.tree, sc, sc)
    assert abs(gap.lhs) <= 1e-12
    assert gap.rhs >= -1e-12
    assert gap.norm_lhs <= gap.norm_rhs + gap.eps


def test_stability_terminal_bump(rng):
    sc = random_reflected_scenario(rng)
    delta = 0.05
    xi2 = {}
    for l, v in sc.terminal.items():
        xi2[l] = float(min(v + delta, sc.barriers.upper.values[l]))
    sc2 = dataclasses.replace(sc, terminal=xi2)
    gap = stability_gap(sc.tree, sc2, sc)
    assert gap.lhs <= gap.rhs + gap.eps
    assert gap.rhs > 0.0


def test_stability_barrier_lift(rng):
    sc = random_reflected_scenario(rng)
    lo2 = AdaptedProcess(np.minimum(sc.barriers.lower.values + 0.04,
                                    sc.barriers.upper.values - 0.01))
    xi2 = {l: float(max(v, lo2.values[l])) for l, v in sc.terminal.items()}
    sc2 = dataclasses.replace(sc, terminal=xi2,
                              barriers=BarrierPair(lo2, sc.barriers.upper))
    gap = stability_gap(sc.tree, sc2, sc)
    assert gap.lhs <= gap.rhs + gap.eps


@given(st.integers(0, 10_000))
def test_stability_random_pairs(seed):
    rng = np.random.default_rng(seed)
    sc1, sc2 = random_perturbation_pair(rng)
    gap = stability_gap(sc1.tree, sc1, sc2)
    assert gap.lhs <= gap.rhs + gap.eps
    assert gap.norm_lhs <= gap.norm_rhs + gap.eps
