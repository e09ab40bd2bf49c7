"""Command line surface: run scenarios, emit plot-ready CSV, print verdicts.

Determinism contract: stdout and every artifact file depend only on the
scenario, the seed and the flags.  Wall-clock timing goes to stderr so a
byte comparison of two runs with the same inputs succeeds.

Exit codes: 0 checks passed, 2 a verification failed, 3 configuration
error, 4 solver error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .bsde import Generator, f_expectation, solve_bsde
from .dynkin import (
    GamePayoff,
    game_value_bruteforce,
    game_value_process,
    generalized_game_value,
    generalized_payoff_J,
    enumerate_stopping_rules,
    saddle_from_solution,
    verify_saddle,
)
from .errors import (
    BarrierCrossing,
    ConfigError,
    NewtonStagnation,
    NonMonotoneGenerator,
    NonTransient,
    OracleTooLarge,
    RootNotBracketed,
    RuleOrderingError,
    SolverDivergence,
    StepSizeError,
    TerminalViolation,
    TreeStructureError,
)
from .lattice import AdaptedProcess, StoppingRule
from .markov_vi import (
    MarkovScenario,
    complementarity_residual,
    markov_penalized,
    solve_parabolic_vi,
    solve_vi_penalized,
    solve_vi_psor,
    unroll_chain,
    value_function,
)
from .rbsde import (
    BarrierPair,
    check_projection_condition,
    solve_penalized,
    solve_reflected,
    verify_solution,
)
from .scenarios import (
    EvolveBundle,
    Scenario,
    ViBundle,
    named_scenario,
    pinching_cone_candidate,
    random_ordered_pair,
    random_reflected_scenario,
    scenario_from_json,
    scenario_names,
)

OUT_ENV = "RBSDELAB_OUT"

_CONFIG_ERRORS = (ConfigError, TreeStructureError, BarrierCrossing,
                  TerminalViolation, RuleOrderingError)
_SOLVER_ERRORS = (StepSizeError, NonMonotoneGenerator, RootNotBracketed,
                  OracleTooLarge, NonTransient, SolverDivergence,
                  NewtonStagnation)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(out_dir: str, name: str, header: list[str], rows: list[tuple]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _emit(report: dict) -> None:
    print(json.dumps(report, sort_keys=True))


def _out_dir(args) -> str:
    if args.out:
        return args.out
    return os.environ.get(OUT_ENV, "runs")


def _load(args):
    """Registry name or path to a scenario JSON file."""
    ref = args.scenario
    if ref is None:
        raise ConfigError("--scenario is required (registry name or JSON path)")
    if os.path.exists(ref):
        with open(ref) as fh:
            return scenario_from_json(fh.read())
    if ref in scenario_names():
        return named_scenario(ref)
    raise ConfigError(
        f"{ref!r} is neither a file nor a registry name; known names: "
        + ", ".join(scenario_names()))


def _tree_scenario(args) -> Scenario:
    sc = _load(args)
    if not isinstance(sc, Scenario):
        raise ConfigError(f"{args.scenario!r} is not a tree scenario")
    return sc


def _conditions_block(report) -> list[dict]:
    return [
        {"name": c.name, "passed": bool(c.passed), "slack": float(c.slack),
         "witness": None if c.witness is None else int(c.witness)}
        for c in report.conditions
    ]


def _running_constant(f: Generator) -> float:
    """Constant running cost of a y-independent driver, or raise."""
    probes = [f(0, 0, y) for y in (-1.0, 0.0, 1.0, 3.0)]
    if max(probes) - min(probes) > 1e-12:
        raise ConfigError(
            "plain Dynkin games need a y-independent driver; use fexp")
    return probes[1]


# ---------------------------------------------------------------------------
# solve


def _cmd_solve(args) -> int:
    out = _out_dir(args)
    tol = args.tol if args.tol is not None else 1e-10
    if args.randomize:
        rng = np.random.default_rng(args.seed)
        rows = []
        violations = 0
        for i in range(args.randomize):
            lo_sc, hi_sc = random_ordered_pair(rng, depth=args.depth)
            s1 = solve_reflected(lo_sc.tree, lo_sc.terminal, lo_sc.generator,
                                 lo_sc.barriers)
            s2 = solve_reflected(hi_sc.tree, hi_sc.terminal, hi_sc.generator,
                                 hi_sc.barriers)
            worst = float(np.max(s1.Y.values - s2.Y.values))
            bad = worst > tol
            violations += bad
            rows.append((i, float(s1.Y[0]), float(s2.Y[0]), worst, bad))
        path = _write_csv(out, f"solve-comparison-seed{args.seed}.csv",
                          ["instance", "root_lower", "root_upper",
                           "max_ordering_excess", "violation"], rows)
        _emit({"command": "solve", "mode": "randomized-comparison",
               "seed": args.seed, "instances": args.randomize,
               "violations": violations, "csv": path,
               "verdict": "PASS" if violations == 0 else "FAIL"})
        return 0 if violations == 0 else 2

    sc = _tree_scenario(args)
    tree = sc.tree
    if sc.barriers is None:
        sol = solve_bsde(tree, sc.terminal, sc.generator, tol=sc.tol)
        y = sol.Y.values
        dr_plus = np.zeros(tree.n_nodes)
        dr_minus = np.zeros(tree.n_nodes)
        verdict = {"verdict": "PASS", "residual": 0.0}
        passed = True
    else:
        sol = solve_reflected(tree, sc.terminal, sc.generator, sc.barriers,
                              tol=sc.tol)
        y = sol.Y.values
        dr_plus, dr_minus = sol.dr_plus, sol.dr_minus
        rep = verify_solution(tree, sol.Y, sc.generator, sc.terminal,
                              sc.barriers, tol=max(tol, 1e-8))
        passed = rep.passed
        verdict = {"verdict": "PASS" if passed else "FAIL",
                   "residual": float(sol.residual),
                   "conditions": _conditions_block(rep)}
    lo, hi = (sc.barriers.arrays(tree) if sc.barriers is not None
              else (np.full(tree.n_nodes, -np.inf), np.full(tree.n_nodes, np.inf)))
    rows = [(n, int(tree.layer[n]), tree.grid.t(int(tree.layer[n])), y[n],
             lo[n], hi[n], dr_plus[n], dr_minus[n])
            for n in range(tree.n_nodes)]
    path = _write_csv(out, f"solve-{sc.name}.csv",
                      ["node", "layer", "t", "y", "lower", "upper",
                       "dr_plus", "dr_minus"], rows)
    _emit({"command": "solve", "scenario": sc.name, "root_value": float(y[0]),
           "csv": path, **verdict})
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# penalize


def _cmd_penalize(args) -> int:
    sc = _tree_scenario(args)
    if sc.barriers is None or (sc.barriers.lower is None
                               and sc.barriers.upper is None):
        raise ConfigError("penalize needs at least one barrier")
    out = _out_dir(args)
    ns = [int(x) for x in args.n_list.split(",")]
    if sorted(ns) != ns or len(set(ns)) != len(ns):
        raise ConfigError("--n-list must be strictly increasing")
    tree = sc.tree
    rows = []

    ref_both = solve_reflected(tree, sc.terminal, sc.generator, sc.barriers,
                               tol=sc.tol)
    sup_both = []
    for n in ns:
        pen = solve_penalized(tree, sc.terminal, sc.generator, sc.barriers, n,
                              eta=sc.eta, mode="both", tol=sc.tol)
        err = float(np.max(np.abs(pen.Y.values - ref_both.Y.values)))
        sup_both.append(err)
        rows.append(("both", n, err, float(pen.Y[0] - ref_both.Y[0])))

    lower_monotone = None
    if sc.barriers.lower is not None:
        one_sided = BarrierPair(lower=sc.barriers.lower, upper=None)
        ref_lower = solve_reflected(tree, sc.terminal, sc.generator, one_sided,
                                    tol=sc.tol)
        prev = None
        worst_drop = 0.0
        for n in ns:
            pen = solve_penalized(tree, sc.terminal, sc.generator, one_sided,
                                  n, eta=sc.eta, mode="lower", tol=sc.tol)
            err = float(np.max(np.abs(pen.Y.values - ref_lower.Y.values)))
            rows.append(("lower", n, err, float(pen.Y[0] - ref_lower.Y[0])))
            if prev is not None:
                worst_drop = min(worst_drop,
                                 float(np.min(pen.Y.values - prev)))
            prev = pen.Y.values
        lower_monotone = worst_drop >= -1e-12

    path = _write_csv(out, f"penalize-{sc.name}.csv",
                      ["mode", "n", "sup_error", "signed_error_at_root"], rows)
    reduced = sup_both[-1] <= 1e-2 * sup_both[0] + 1e-14 if len(sup_both) > 1 else True
    passed = reduced and (lower_monotone is not False)
    _emit({"command": "penalize", "scenario": sc.name, "csv": path,
           "n": ns, "sup_error_both": sup_both,
           "final_vs_initial_reduction": reduced,
           "lower_mode_monotone": lower_monotone,
           "verdict": "PASS" if passed else "FAIL"})
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# game / fexp


def _cmd_game(args) -> int:
    out = _out_dir(args)
    tol = args.tol if args.tol is not None else 1e-8
    if args.randomize:
        rng = np.random.default_rng(args.seed)
        rows = []
        failures = 0
        for i in range(args.randomize):
            sc = random_reflected_scenario(rng, depth=args.depth,
                                           projection_safe=True)
            sc = dataclasses.replace(sc, generator=Generator.constant(0.0))
            proj = check_projection_condition(sc.tree, sc.barriers)
            sol = solve_reflected(sc.tree, sc.terminal, sc.generator,
                                  sc.barriers)
            payoff = GamePayoff.from_barriers(sc.tree, sc.barriers, sc.terminal)
            cand = saddle_from_solution(sc.tree, sol.Y, sc.barriers)
            rep = verify_saddle(sc.tree, payoff, cand, cap=args.oracle_cap)
            ok = rep.passed(1e-9) and proj.both_ok
            failures += not ok
            rows.append((i, float(sol.Y[0]), rep.worst_sigma_slack,
                         rep.worst_tau_slack, ok))
        path = _write_csv(out, f"game-saddles-seed{args.seed}.csv",
                          ["instance", "root_value", "sigma_slack",
                           "tau_slack", "saddle_verified"], rows)
        _emit({"command": "game", "mode": "randomized-saddles",
               "seed": args.seed, "instances": args.randomize,
               "failures": failures, "csv": path,
               "verdict": "PASS" if failures == 0 else "FAIL"})
        return 0 if failures == 0 else 2

    sc = _tree_scenario(args)
    if sc.barriers is None or sc.barriers.lower is None or sc.barriers.upper is None:
        raise ConfigError("games need both barriers")
    c = _running_constant(sc.generator)
    tree = sc.tree
    running = AdaptedProcess.constant(tree, c)
    payoff = GamePayoff.from_barriers(tree, sc.barriers, sc.terminal,
                                      running=running)
    gv = game_value_bruteforce(tree, payoff, cap=args.oracle_cap)
    sol = solve_reflected(tree, sc.terminal, sc.generator, sc.barriers,
                          tol=sc.tol)
    gap_equiv = abs(gv.value_at(0) - float(sol.Y[0]))
    gap_supinf = float(np.max(np.abs(gv.supinf.values[gv.anchors]
                                     - gv.infsup.values[gv.anchors])))

    vproc = game_value_process(tree, payoff, cap=args.oracle_cap)
    vrep = verify_solution(tree, vproc, sc.generator, sc.terminal, sc.barriers,
                           tol=max(tol, 1e-8))

    cand = saddle_from_solution(tree, sol.Y, sc.barriers)
    srep = verify_saddle(tree, payoff, cand, cap=args.oracle_cap)
    proj = check_projection_condition(tree, sc.barriers)
    saddle_ok = srep.passed(1e-9)

    eps_results = {}
    for eps in (args.eps or []):
        ce = saddle_from_solution(tree, sol.Y, sc.barriers, eps=eps)
        er = verify_saddle(tree, payoff, ce, Y=sol.Y, cap=args.oracle_cap)
        eps_results[str(eps)] = {
            "passed": er.passed(1e-9),
            "sigma_slack": er.worst_sigma_slack,
            "tau_slack": er.worst_tau_slack,
        }

    rows = [(int(nu), float(gv.supinf.values[nu]), float(gv.infsup.values[nu]),
             float(sol.Y.values[nu])) for nu in gv.anchors]
    path = _write_csv(out, f"game-{sc.name}.csv",
                      ["anchor", "supinf", "infsup", "reflected_y"], rows)
    eps_ok = all(r["passed"] for r in eps_results.values())
    passed = (gap_equiv <= tol and gap_supinf <= tol and vrep.passed
              and eps_ok and (saddle_ok or not proj.both_ok))
    _emit({"command": "game", "scenario": sc.name, "csv": path,
           "value": gv.value_at(0), "reflected_root": float(sol.Y[0]),
           "gap_value_vs_reflected": gap_equiv,
           "gap_supinf_vs_infsup": gap_supinf,
           "value_process_verdict": "PASS" if vrep.passed else "FAIL",
           "projection_condition": proj.both_ok,
           "exact_saddle": saddle_ok,
           "epsilon_saddles": eps_results,
           "pairs_checked": gv.pairs_checked,
           "verdict": "PASS" if passed else "FAIL"})
    return 0 if passed else 2


def _cmd_fexp(args) -> int:
    out = _out_dir(args)
    tol = args.tol if args.tol is not None else 1e-8
    if args.randomize:
        rng = np.random.default_rng(args.seed)
        rows = []
        failures = 0
        for i in range(args.randomize):
            sc = random_reflected_scenario(rng, depth=args.depth)
            gv = generalized_game_value(sc.tree, sc.generator, sc.barriers,
                                        sc.terminal, cap=args.oracle_cap)
            sol = solve_reflected(sc.tree, sc.terminal, sc.generator,
                                  sc.barriers)
            gap = abs(gv.value_at(0) - float(sol.Y[0]))
            ok = gap <= tol
            failures += not ok
            rows.append((i, gv.value_at(0), float(sol.Y[0]), gap, ok))
        path = _write_csv(out, f"fexp-agreement-seed{args.seed}.csv",
                          ["instance", "game_value", "reflected_root", "gap",
                           "agrees"], rows)
        _emit({"command": "fexp", "mode": "randomized-agreement",
               "seed": args.seed, "instances": args.randomize,
               "failures": failures, "csv": path,
               "verdict": "PASS" if failures == 0 else "FAIL"})
        return 0 if failures == 0 else 2

    sc = _tree_scenario(args)
    if sc.barriers is None or sc.barriers.lower is None or sc.barriers.upper is None:
        raise ConfigError("games need both barriers")
    if sc.generator.mu > 0:
        raise ConfigError("the nonlinear expectation needs mu <= 0")
    tree = sc.tree
    gv = generalized_game_value(tree, sc.generator, sc.barriers, sc.terminal,
                                cap=args.oracle_cap)
    sol = solve_reflected(tree, sc.terminal, sc.generator, sc.barriers,
                          tol=sc.tol)
    gap_equiv = abs(gv.value_at(0) - float(sol.Y[0]))
    gap_supinf = float(np.max(np.abs(gv.supinf.values[gv.anchors]
                                     - gv.infsup.values[gv.anchors])))

    eps_results = {}
    for eps in (args.eps or [0.25, 0.1]):
        sig_eps = saddle_from_solution(tree, sol.Y, sc.barriers, eps=eps)
        worst_sig = -np.inf
        worst_tau = -np.inf
        for rule in enumerate_stopping_rules(tree, cap=args.oracle_cap):
            j_up = generalized_payoff_J(tree, sc.generator, sc.barriers,
                                        sc.terminal, sigma=rule,
                                        tau=sig_eps.tau_star)
            j_dn = generalized_payoff_J(tree, sc.generator, sc.barriers,
                                        sc.terminal, sigma=sig_eps.sigma_star,
                                        tau=rule)
            worst_sig = max(worst_sig, float(j_up.values[0]) - eps - float(sol.Y[0]))
            worst_tau = max(worst_tau, float(sol.Y[0]) - float(j_dn.values[0]) - eps)
        eps_results[str(eps)] = {
            "passed": worst_sig <= 1e-9 and worst_tau <= 1e-9,
            "sigma_slack": worst_sig,
            "tau_slack": worst_tau,
        }

    rows = [(int(nu), float(gv.supinf.values[nu]), float(gv.infsup.values[nu]),
             float(sol.Y.values[nu])) for nu in gv.anchors]
    path = _write_csv(out, f"fexp-{sc.name}.csv",
                      ["anchor", "supinf", "infsup", "reflected_y"], rows)
    eps_ok = all(r["passed"] for r in eps_results.values())
    passed = gap_equiv <= tol and gap_supinf <= tol and eps_ok
    _emit({"command": "fexp", "scenario": sc.name, "csv": path,
           "value": gv.value_at(0), "reflected_root": float(sol.Y[0]),
           "gap_value_vs_reflected": gap_equiv,
           "gap_supinf_vs_infsup": gap_supinf,
           "epsilon_inequalities": eps_results,
           "pairs_checked": gv.pairs_checked,
           "verdict": "PASS" if passed else "FAIL"})
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# vi / evolve


def _cmd_vi(args) -> int:
    out = _out_dir(args)
    sc = _load(args)
    if isinstance(sc, MarkovScenario):
        label = os.path.splitext(os.path.basename(str(args.scenario)))[0]
        tol = args.tol if args.tol is not None else 1e-10
        u = value_function(sc, tol=tol)
        pen = markov_penalized(sc, n=1e6, tol=tol)
        un = unroll_chain(sc, depth=args.depth, start=sc.n_states // 2)
        tree_sol = solve_reflected(un.tree, un.terminal, un.generator,
                                   un.barriers, tol=1e-12)
        spread = un.group_spread(tree_sol.Y.values)
        field = value_function(sc, tol=tol, horizon=args.depth)
        root_gap = abs(float(field[0, un.start]) - float(tree_sol.Y[0]))
        rows = [(i, float(sc.states[i]), float(u[i]), float(pen.u[i]))
                for i in range(sc.n_states)]
        path = _write_csv(out, f"vi-{label}.csv",
                          ["state", "x", "value", "penalized_value"], rows)
        passed = spread <= 1e-10 and root_gap <= 1e-8
        _emit({"command": "vi", "scenario": label, "csv": path,
               "kind": "chain", "unroll_depth": args.depth,
               "group_spread": spread, "root_gap_vs_tree": root_gap,
               "verdict": "PASS" if passed else "FAIL"})
        return 0 if passed else 2

    if not isinstance(sc, ViBundle):
        raise ConfigError(f"{args.scenario!r} is not a stationary obstacle scenario")
    tol = args.tol if args.tol is not None else sc.tol
    prob = sc.problem
    u_psor = solve_vi_psor(prob, tol=tol)
    n_top = sc.n_penalty[-1]
    u_pen = solve_vi_penalized(prob, n=n_top, tol=tol)
    resid = float(np.max(np.abs(complementarity_residual(prob, u_psor))))
    gap_solvers = float(np.max(np.abs(u_psor - u_pen)))
    chain_gap = None
    if sc.chain is not None:
        h = prob.h
        uc = value_function(sc.chain, tol=h * h / 20.0)
        chain_gap = float(np.max(np.abs(uc[1:-1] - u_psor)))
    rows = [(float(prob.x[i]), float(u_psor[i]), float(u_pen[i]))
            for i in range(prob.x.shape[0])]
    path = _write_csv(out, f"vi-{sc.name}.csv",
                      ["x", "u_psor", "u_penalized"], rows)
    passed = resid <= 1e-8 and gap_solvers <= max(1e-6, 10 * tol)
    report = {"command": "vi", "scenario": sc.name, "csv": path,
              "kind": "obstacle", "penalty_n": n_top,
              "complementarity_residual": resid,
              "psor_vs_penalized": gap_solvers,
              "verdict": "PASS" if passed else "FAIL"}
    if chain_gap is not None:
        report["vi_vs_chain"] = chain_gap
    _emit(report)
    return 0 if passed else 2


def _lazy_start_value(bundle: EvolveBundle, sub: int) -> float:
    """Finite-horizon chain value at the starting state with dt = h^2/sub^2
    (smaller steps keep the same grid, the walk just gets lazier)."""
    base = bundle.chain
    h = base.h
    dt = h * h / (sub * sub)
    lazy = MarkovScenario(states=base.states, P=np.eye(base.n_states)
                          + (np.asarray(base.P) - np.eye(base.n_states)) / (sub * sub),
                          dt=dt, interior=base.interior, reward=base.reward,
                          lower=base.lower, upper=base.upper,
                          boundary=base.boundary, terminal=base.terminal,
                          f_hat=base.f_hat, mu=base.mu)
    field = value_function(lazy, tol=1e-12, horizon=bundle.depth * sub * sub)
    return float(field[0, bundle.start])


def _cmd_evolve(args) -> int:
    out = _out_dir(args)
    sc = _load(args)
    if not isinstance(sc, EvolveBundle):
        raise ConfigError(f"{args.scenario!r} is not an evolution scenario")
    tol = args.tol if args.tol is not None else 1e-10
    field, info = solve_parabolic_vi(sc.problem, tol=tol, return_info=True)
    rows = [(float(sc.problem.x[i]), float(field[0, i]))
            for i in range(sc.problem.x.shape[0])]
    path = _write_csv(out, f"evolve-{sc.name}.csv", ["x", "u_at_t0"], rows)
    report = {"command": "evolve", "scenario": sc.name, "csv": path,
              "theta": info["theta"], "restarted": info["restarted"]}
    passed = True
    if sc.chain is not None:
        v1 = _lazy_start_value(sc, 1)
        v2 = _lazy_start_value(sc, 2)
        v4 = _lazy_start_value(sc, 4)
        limit = v4 + (v4 - v2)
        band = 3.0 * abs(v1 - limit)
        pde_val = float(field[0, sc.x0_index])
        gap = abs(pde_val - v1)
        passed = gap <= band
        report.update({"chain_value": v1, "richardson_limit": limit,
                       "band": band, "pde_value": pde_val,
                       "gap_pde_vs_chain": gap})
    report["verdict"] = "PASS" if passed else "FAIL"
    _emit(report)
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# demo-dex1 / verify


def _variation_until(sc: Scenario, values: np.ndarray, t_max: float) -> float:
    tree = sc.tree
    acc = 0.0
    for node in range(1, tree.n_nodes):
        if tree.grid.t(int(tree.layer[node])) <= t_max + 1e-12:
            acc += abs(float(values[node] - values[tree.parent[node]]))
    return acc


def _cmd_demo_dex1(args) -> int:
    out = _out_dir(args)
    grids = [int(x) for x in args.grids.split(",")]
    rows = []
    variations = []
    for K in grids:
        sc = named_scenario(f"dex1-grid{K}")
        sol = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers,
                              tol=sc.tol)
        rep = verify_solution(sc.tree, sol.Y, sc.generator, sc.terminal,
                              sc.barriers)
        var = _variation_until(sc, sol.Y.values, sc.experiment["variation_until"])
        variations.append(var)
        rows.append((K, 2.0 / K, var, float(sol.Y[0]), rep.passed))
    path = _write_csv(out, f"demo-dex1.csv",
                      ["grid", "dt", "variation_on_0_1", "root_value",
                       "verifier"], rows)
    increasing = all(b > a for a, b in zip(variations, variations[1:]))
    _emit({"command": "demo-dex1", "grids": grids, "csv": path,
           "variations": variations, "strictly_increasing": increasing,
           "verdict": "PASS" if increasing else "FAIL"})
    return 0 if increasing else 2


def _candidate_from_csv(sc: Scenario, path: str) -> AdaptedProcess:
    vals = np.full(sc.tree.n_nodes, np.nan)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["node", "value"]:
            raise ConfigError("candidate CSV must start with header node,value")
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            try:
                vals[int(parts[0])] = float(parts[1])
            except (IndexError, ValueError) as e:
                raise ConfigError(f"candidate CSV line {line_no}: {e}") from e
    if np.any(np.isnan(vals)):
        missing = int(np.flatnonzero(np.isnan(vals))[0])
        raise ConfigError(f"candidate CSV misses node {missing}")
    return AdaptedProcess(vals)


def _cmd_verify(args) -> int:
    sc = _tree_scenario(args)
    if sc.barriers is None:
        raise ConfigError("verify needs a scenario with barriers")
    if args.y is not None:
        cand = _candidate_from_csv(sc, args.y)
        source = args.y
    elif args.scale is not None:
        if sc.name != "dex2":
            raise ConfigError("--scale candidates exist only for dex2")
        cand = pinching_cone_candidate(args.scale)
        source = f"scale={args.scale:g}"
    else:
        cand = solve_reflected(sc.tree, sc.terminal, sc.generator, sc.barriers,
                               tol=sc.tol).Y
        source = "solver"
    tol = args.tol if args.tol is not None else 1e-8
    rep = verify_solution(sc.tree, cand, sc.generator, sc.terminal,
                          sc.barriers, tol=tol)
    _emit({"command": "verify", "scenario": sc.name, "candidate": source,
           "verdict": "PASS" if rep.passed else "FAIL",
           "conditions": _conditions_block(rep),
           "anchors_checked": rep.anchors_checked,
           "steps_checked": rep.steps_checked})
    return 0 if rep.passed else 2


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser, scenario: bool = True) -> None:
    if scenario:
        p.add_argument("--scenario", help="registry name or scenario JSON path")
    p.add_argument("--seed", type=int, default=0, help="randomization seed")
    p.add_argument("--tol", type=float, default=None,
                   help="verification tolerance override")
    p.add_argument("--out", default=None,
                   help=f"artifact directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--oracle-cap", type=int, default=1_000_000,
                   help="abort enumeration beyond this many rule pairs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbsdelab",
        description="Reflected backward equations, Dynkin games and "
                    "obstacle problems on finite lattices")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="reflected solve plus full verification")
    _add_common(p)
    p.add_argument("--randomize", type=int, default=0, metavar="N",
                   help="run N seeded ordered-pair comparison instances")
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(handler=_cmd_solve)

    p = sub.add_parser("penalize", help="penalty sweep against the reflected solve")
    _add_common(p)
    p.add_argument("--n-list", default="1,10,100,1000,10000",
                   help="comma-separated increasing penalty strengths")
    p.set_defaults(handler=_cmd_penalize)

    p = sub.add_parser("game", help="brute-force Dynkin value and saddle check")
    _add_common(p)
    p.add_argument("--randomize", type=int, default=0, metavar="N",
                   help="run N seeded projection-safe saddle verifications")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--eps", type=float, nargs="*", default=None,
                   help="additionally verify epsilon-saddles at these levels")
    p.set_defaults(handler=_cmd_game)

    p = sub.add_parser("fexp", help="nonlinear-expectation game value")
    _add_common(p)
    p.add_argument("--randomize", type=int, default=0, metavar="N",
                   help="run N seeded agreement instances")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--eps", type=float, nargs="*", default=None,
                   help="epsilon-inequality levels (default 0.25 0.1)")
    p.set_defaults(handler=_cmd_fexp)

    p = sub.add_parser("vi", help="stationary obstacle problem, both solvers")
    _add_common(p)
    p.add_argument("--depth", type=int, default=6,
                   help="unroll depth for chain scenarios")
    p.set_defaults(handler=_cmd_vi)

    p = sub.add_parser("evolve", help="parabolic obstacle evolution")
    _add_common(p)
    p.set_defaults(handler=_cmd_evolve)

    p = sub.add_parser("demo-dex1",
                       help="refinement study of the oscillating-barrier example")
    _add_common(p, scenario=False)
    p.add_argument("--grids", default="100,200,400",
                   help="comma-separated grid sizes")
    p.set_defaults(handler=_cmd_demo_dex1)

    p = sub.add_parser("verify", help="check a candidate value process")
    _add_common(p)
    p.add_argument("--y", default=None, metavar="CSV",
                   help="candidate process as node,value CSV")
    p.add_argument("--scale", type=float, default=None,
                   help="built-in candidate family for the dex2 scenario")
    p.set_defaults(handler=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 3
    t0 = time.perf_counter()
    try:
        return args.handler(args)
    except _CONFIG_ERRORS as e:
        _emit({"command": args.command, "verdict": "CONFIG_ERROR",
               "detail": str(e)})
        return 3
    except _SOLVER_ERRORS as e:
        _emit({"command": args.command, "verdict": "SOLVER_ERROR",
               "detail": str(e)})
        return 4
    finally:
        print(f"wall_time_s={time.perf_counter() - t0:.3f}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
