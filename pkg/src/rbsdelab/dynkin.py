"""Dynkin games on the tree: payoff functionals, exhaustive rule
enumeration, saddle points, and the nonlinear-expectation variant.

This is the ground-truth layer: everything here is computed by direct
enumeration over stopping rules, so it validates the reflected solvers
without sharing any code path with them.

The payoff convention: with sigma the maximizer's rule (collects the lower
barrier) and tau the minimizer's (pays the upper barrier),

    payoff = L_sigma        if sigma < tau,
             U_tau          if tau <= sigma and tau < horizon,
             xi             if sigma = tau = horizon,

plus the running integrand summed before sigma and tau.  The indicator
{tau <= sigma < T} is read as {tau <= sigma, tau < T}: the upper payment
happens at tau, so it is tau that must be interior.  Reading it as
{sigma < T} would leave the event {tau < sigma = T} unpaid and break the
saddle theorem already on one-step games.  Call sites pass sigma= and
tau= by keyword to keep the roles straight.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .bsde import Generator, _terminal_values, implicit_step_root
from .errors import ConfigError, OracleTooLarge, RuleOrderingError, StepSizeError
from .lattice import AdaptedProcess, FiltrationTree, StoppingRule, _as_readonly
from .rbsde import BarrierPair

__all__ = [
    "GamePayoff",
    "SaddleCandidate",
    "GameValue",
    "SaddleReport",
    "payoff_J",
    "enumerate_stopping_rules",
    "count_stopping_rules",
    "game_value_bruteforce",
    "game_value_process",
    "saddle_from_solution",
    "verify_saddle",
    "generalized_payoff_J",
    "generalized_game_value",
]

_DEFAULT_RULE_CAP = 1_000_000
_DEFAULT_PAIR_CAP = 1_000_000


@dataclass(frozen=True)
class GamePayoff:
    """Data of the game: running integrand, the two barriers, terminal pay.

    ``terminal`` may be an AdaptedProcess, a scalar, or a mapping keyed by
    leaf id; only leaf values are consumed.
    """

    running: AdaptedProcess
    lower: AdaptedProcess
    upper: AdaptedProcess
    terminal: object

    def validate(self, tree: FiltrationTree) -> None:
        leaves = tree.leaves
        tv = _terminal_values(tree, self.terminal, leaves)
        if np.any(tv < self.lower.values[leaves] - 1e-10) or \
                np.any(tv > self.upper.values[leaves] + 1e-10):
            raise ConfigError("terminal payoff leaves the barrier sandwich")

    @staticmethod
    def from_barriers(tree: FiltrationTree, barriers: BarrierPair, terminal,
                      running: AdaptedProcess | None = None) -> "GamePayoff":
        if barriers.lower is None or barriers.upper is None:
            raise ConfigError("games need both barriers")
        if running is None:
            running = AdaptedProcess.constant(tree, 0.0)
        return GamePayoff(running=running, lower=barriers.lower,
                          upper=barriers.upper, terminal=terminal)


@dataclass(frozen=True)
class SaddleCandidate:
    sigma_star: StoppingRule
    tau_star: StoppingRule
    epsilon: float = 0.0


def payoff_J(tree: FiltrationTree, payoff: GamePayoff, *, sigma: StoppingRule,
             tau: StoppingRule, alpha: StoppingRule | None = None) -> AdaptedProcess:
    """Conditional expected payoff of a fixed rule pair, one backward pass.

    The returned process carries E[payoff | F] at and after the anchor's
    firing nodes; values strictly before the anchor are plain continuation
    values and should not be read.
    """
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    for rule in (sigma, tau):
        rule.validate(tree)
        if not alpha.pathwise_le(tree, rule):
            raise RuleOrderingError("payoff rules must not stop before the anchor")
    sm, tm = sigma.stop, tau.stop
    lv, uv = payoff.lower.values, payoff.upper.values
    rv = payoff.running.values
    vals = np.zeros(tree.n_nodes)
    leaves = tree.leaves
    vals[leaves] = _terminal_values(tree, payoff.terminal, leaves)
    for k in range(tree.K - 1, -1, -1):
        for node in tree.layers[k]:
            node = int(node)
            if tm[node]:
                vals[node] = uv[node]
            elif sm[node]:
                vals[node] = lv[node]
            else:
                kids = tree.children[node]
                vals[node] = rv[node] * tree.dt + float(
                    np.dot(tree.edge_prob[kids], vals[kids])
                )
    return AdaptedProcess(vals)


# ---------------------------------------------------------------------------
# enumeration


def _count_under(tree: FiltrationTree, node: int) -> int:
    kids = tree.children[node]
    if kids.size == 0:
        return 1
    prod = 1
    for kid in kids:
        prod *= _count_under(tree, int(kid))
    return 1 + prod


def _rules_under(tree: FiltrationTree, node: int) -> list[tuple[int, ...]]:
    """All stop-node sets covering every path below ``node`` exactly once.

    The stop-immediately rule comes first, then products of child choices;
    this order is the tie-breaking order everywhere downstream.
    """
    kids = tree.children[node]
    out: list[tuple[int, ...]] = [(node,)]
    if kids.size == 0:
        return out
    child_rules = [_rules_under(tree, int(kid)) for kid in kids]
    for combo in itertools.product(*child_rules):
        merged: tuple[int, ...] = ()
        for part in combo:
            merged = merged + part
        out.append(merged)
    return out


def count_stopping_rules(tree: FiltrationTree,
                         alpha: StoppingRule | None = None) -> int:
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    alpha.validate(tree)
    total = 1
    for nu in alpha.fires_at(tree):
        total *= _count_under(tree, int(nu))
    return total


def enumerate_stopping_rules(tree: FiltrationTree,
                             alpha: StoppingRule | None = None,
                             cap: int = _DEFAULT_RULE_CAP) -> Iterator[StoppingRule]:
    """Every adapted stopping rule at or after the anchor, exactly once."""
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    total = count_stopping_rules(tree, alpha)
    if total > cap:
        raise OracleTooLarge(f"{total} stopping rules exceed the cap {cap}")
    germs = [(_rules_under(tree, int(nu))) for nu in alpha.fires_at(tree)]
    for combo in itertools.product(*germs):
        mask = np.zeros(tree.n_nodes, dtype=bool)
        for part in combo:
            mask[list(part)] = True
        yield StoppingRule(_as_readonly(mask))


# ---------------------------------------------------------------------------
# brute force


@dataclass(frozen=True)
class _AnchorTables:
    """Subtree geometry plus stacked rule masks for the block evaluation."""

    nodes: np.ndarray          # preorder subtree node ids
    weight: np.ndarray         # conditional path probabilities
    leaf: np.ndarray           # bool mask
    stops: np.ndarray          # (N, m) rule stop masks in canonical order
    blocked: np.ndarray        # (N, m) strict-ancestor-stopped masks
    rules: list[tuple[int, ...]]


def _anchor_tables(tree: FiltrationTree, nu: int) -> _AnchorTables:
    nodes = np.asarray(tree.subtree(nu), dtype=np.int64)
    m = nodes.shape[0]
    pos = {int(n): i for i, n in enumerate(nodes)}
    parent_pos = np.full(m, -1, dtype=np.int64)
    for i, n in enumerate(nodes[1:], start=1):
        parent_pos[i] = pos[int(tree.parent[n])]
    rules = _rules_under(tree, nu)
    N = len(rules)
    stops = np.zeros((N, m), dtype=bool)
    for i, rule in enumerate(rules):
        stops[i, [pos[r] for r in rule]] = True
    blocked = np.zeros((N, m), dtype=bool)
    for i in range(1, m):
        p = parent_pos[i]
        blocked[:, i] = blocked[:, p] | stops[:, p]
    weight = tree.path_prob[nodes] / tree.path_prob[nu]
    leaf = np.array([tree.is_leaf(int(n)) for n in nodes])
    return _AnchorTables(nodes=nodes, weight=weight, leaf=leaf,
                         stops=stops, blocked=blocked, rules=rules)


def _payoff_fields(tree: FiltrationTree, payoff: GamePayoff,
                   tab: _AnchorTables) -> tuple[np.ndarray, ...]:
    nodes = tab.nodes
    lv = payoff.lower.values[nodes]
    uv = payoff.upper.values[nodes]
    run = payoff.running.values[nodes] * tree.dt
    tv = np.zeros(nodes.shape[0])
    tv[tab.leaf] = _terminal_values(tree, payoff.terminal, nodes[tab.leaf])
    return lv, uv, run, tv


def _j_matrix(tree: FiltrationTree, payoff: GamePayoff,
              tab: _AnchorTables) -> np.ndarray:
    """J[sigma-rule, tau-rule] at the anchor, block-vectorized over tau."""
    lv, uv, run, tv = _payoff_fields(tree, payoff, tab)
    ST, BT = tab.stops, tab.blocked
    w = tab.weight
    pay_tau = np.where(tab.leaf[None, :], tv[None, :],
                       np.where(ST, uv[None, :], lv[None, :]))
    wrun = w * run
    N = ST.shape[0]
    J = np.empty((N, N))
    for i in range(N):
        reach = ~tab.blocked[i][None, :] & ~BT
        stopnow = tab.stops[i][None, :] | ST
        J[i] = ((reach & stopnow) * (pay_tau * w[None, :])).sum(axis=1) \
            + ((reach & ~stopnow) * wrun[None, :]).sum(axis=1)
    return J


@dataclass(frozen=True)
class GameValue:
    supinf: AdaptedProcess
    infsup: AdaptedProcess
    sigma_star: StoppingRule
    tau_star: StoppingRule
    anchors: np.ndarray
    pairs_checked: int

    def value_at(self, node: int) -> float:
        return float(self.supinf.values[node])


def _assemble_optima(tree: FiltrationTree, picks: dict[int, tuple[int, ...]]) -> StoppingRule:
    mask = np.zeros(tree.n_nodes, dtype=bool)
    for part in picks.values():
        mask[list(part)] = True
    return StoppingRule(_as_readonly(mask))


def game_value_bruteforce(tree: FiltrationTree, payoff: GamePayoff,
                          alpha: StoppingRule | None = None,
                          cap: int = _DEFAULT_PAIR_CAP) -> GameValue:
    """Iterated optima over every rule pair, independently per anchor germ.

    Ties resolve to the earliest rule in enumeration order, which stops as
    soon as the player is indifferent.
    """
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    alpha.validate(tree)
    payoff.validate(tree)
    anchors = alpha.fires_at(tree)
    supinf = np.zeros(tree.n_nodes)
    infsup = np.zeros(tree.n_nodes)
    sig_picks: dict[int, tuple[int, ...]] = {}
    tau_picks: dict[int, tuple[int, ...]] = {}
    pairs = 0
    for nu in anchors:
        nu = int(nu)
        n_rules = _count_under(tree, nu)
        if n_rules * n_rules > cap:
            raise OracleTooLarge(
                f"{n_rules}^2 rule pairs at anchor {nu} exceed the cap {cap}"
            )
        tab = _anchor_tables(tree, nu)
        J = _j_matrix(tree, payoff, tab)
        pairs += J.size
        row_min = J.min(axis=1)
        col_max = J.max(axis=0)
        i_star = int(np.argmax(row_min))
        j_star = int(np.argmin(col_max))
        supinf[nu] = row_min[i_star]
        infsup[nu] = col_max[j_star]
        sig_picks[nu] = tab.rules[i_star]
        tau_picks[nu] = tab.rules[j_star]
    return GameValue(
        supinf=AdaptedProcess(supinf),
        infsup=AdaptedProcess(infsup),
        sigma_star=_assemble_optima(tree, sig_picks),
        tau_star=_assemble_optima(tree, tau_picks),
        anchors=anchors,
        pairs_checked=pairs,
    )


def game_value_process(tree: FiltrationTree, payoff: GamePayoff,
                       cap: int = _DEFAULT_PAIR_CAP) -> AdaptedProcess:
    """Game value anchored at every node: the brute-force value process."""
    payoff.validate(tree)
    vals = np.zeros(tree.n_nodes)
    for nu in range(tree.n_nodes):
        n_rules = _count_under(tree, nu)
        if n_rules * n_rules > cap:
            raise OracleTooLarge(
                f"{n_rules}^2 rule pairs at anchor {nu} exceed the cap {cap}"
            )
        tab = _anchor_tables(tree, nu)
        J = _j_matrix(tree, payoff, tab)
        vals[nu] = J.min(axis=1).max()
    return AdaptedProcess(vals)


# ---------------------------------------------------------------------------
# saddles


def saddle_from_solution(tree: FiltrationTree, Y: AdaptedProcess,
                         barriers: BarrierPair,
                         alpha: StoppingRule | None = None,
                         eps: float = 0.0, tol: float = 1e-10) -> SaddleCandidate:
    """Barrier-touching rules read off a value process.

    eps = 0: first |Y - L| <= tol for sigma*, first |Y - U| <= tol for
    tau*.  eps > 0: first Y <= L + eps, first Y >= U - eps.  Both are
    cut to nodes at or after the anchor and capped at the horizon.
    """
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    alpha.validate(tree)
    reached = alpha.reached(tree)
    yv = Y.values
    if eps < 0:
        raise ConfigError("eps must be nonnegative")
    if barriers.lower is None or barriers.upper is None:
        raise ConfigError("saddles need both barriers")
    lv, uv = barriers.lower.values, barriers.upper.values
    if eps == 0.0:
        low_mask = np.abs(yv - lv) <= tol
        up_mask = np.abs(uv - yv) <= tol
    else:
        low_mask = yv <= lv + eps
        up_mask = yv >= uv - eps
    sigma = StoppingRule.hitting(tree, low_mask & reached)
    tau = StoppingRule.hitting(tree, up_mask & reached)
    return SaddleCandidate(sigma_star=sigma, tau_star=tau, epsilon=eps)


@dataclass(frozen=True)
class SaddleReport:
    value: float
    worst_sigma_slack: float
    worst_tau_slack: float
    epsilon: float
    rules_checked: int
    anchors: np.ndarray

    def passed(self, tol: float = 1e-9) -> bool:
        return self.worst_sigma_slack <= tol and self.worst_tau_slack <= tol

    def as_text(self) -> str:
        kind = "exact saddle" if self.epsilon == 0.0 else f"eps-saddle (eps={self.epsilon:g})"
        return (
            f"{kind}: value={self.value:.12g}\n"
            f"  sigma-side worst slack {self.worst_sigma_slack:.3e}\n"
            f"  tau-side   worst slack {self.worst_tau_slack:.3e}\n"
            f"  rules checked per side: {self.rules_checked}"
        )


def _j_against_fixed(tree: FiltrationTree, payoff: GamePayoff, tab: _AnchorTables,
                     fixed: np.ndarray, fixed_is_tau: bool) -> np.ndarray:
    """J of every enumerated rule against one fixed opponent mask.

    With ``fixed_is_tau`` the enumerated rules play sigma, otherwise tau.
    """
    lv, uv, run, tv = _payoff_fields(tree, payoff, tab)
    w = tab.weight
    m = tab.nodes.shape[0]
    fstop = fixed[tab.nodes]
    fblock = np.zeros(m, dtype=bool)
    pos = {int(n): i for i, n in enumerate(tab.nodes)}
    for i, n in enumerate(tab.nodes[1:], start=1):
        p = pos[int(tree.parent[n])]
        fblock[i] = fblock[p] | fstop[p]
    S, B = tab.stops, tab.blocked
    reach = ~B & ~fblock[None, :]
    stopnow = S | fstop[None, :]
    if fixed_is_tau:
        # the minimizer's stops have priority: they pay U
        pay = np.where(tab.leaf, tv, np.where(fstop, uv, lv))[None, :]
    else:
        pay = np.where(tab.leaf[None, :], tv[None, :],
                       np.where(S, uv[None, :], lv[None, :]))
    return ((reach & stopnow) * (pay * w[None, :])).sum(axis=1) \
        + ((reach & ~stopnow) * (run * w)[None, :]).sum(axis=1)


def verify_saddle(tree: FiltrationTree, payoff: GamePayoff,
                  candidate: SaddleCandidate,
                  alpha: StoppingRule | None = None,
                  Y: AdaptedProcess | None = None,
                  cap: int = _DEFAULT_PAIR_CAP) -> SaddleReport:
    """Check the saddle inequalities against every opposing rule.

    Exact candidates (epsilon = 0) must satisfy, at every anchor node,
    J(sigma, tau*) <= J(sigma*, tau*) <= J(sigma*, tau) for all rules.
    Epsilon candidates are checked against the given value process Y:
    sup_sigma J(sigma, tau_eps) - eps <= Y_alpha and
    Y_alpha <= inf_tau J(sigma_eps, tau) + eps.
    """
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    alpha.validate(tree)
    payoff.validate(tree)
    eps = candidate.epsilon
    if eps > 0.0 and Y is None:
        raise ConfigError("epsilon-saddle verification needs the value process Y")
    anchors = alpha.fires_at(tree)
    worst_sig = -np.inf
    worst_tau = -np.inf
    checked = 0
    value = 0.0
    for nu in anchors:
        nu = int(nu)
        n_rules = _count_under(tree, nu)
        if n_rules * n_rules > cap:
            raise OracleTooLarge(
                f"{n_rules}^2 rule pairs at anchor {nu} exceed the cap {cap}"
            )
        tab = _anchor_tables(tree, nu)
        checked += len(tab.rules)
        sig_vs_taustar = _j_against_fixed(tree, payoff, tab,
                                          candidate.tau_star.stop, fixed_is_tau=True)
        tau_vs_sigstar = _j_against_fixed(tree, payoff, tab,
                                          candidate.sigma_star.stop, fixed_is_tau=False)
        if eps == 0.0:
            base = payoff_J(tree, payoff, sigma=candidate.sigma_star,
                            tau=candidate.tau_star, alpha=alpha).values[nu]
            worst_sig = max(worst_sig, float(sig_vs_taustar.max() - base))
            worst_tau = max(worst_tau, float(base - tau_vs_sigstar.min()))
        else:
            base = float(Y.values[nu])
            worst_sig = max(worst_sig, float(sig_vs_taustar.max() - eps - base))
            worst_tau = max(worst_tau, float(base - tau_vs_sigstar.min() - eps))
        if nu == anchors[0]:
            value = base
    return SaddleReport(value=value, worst_sigma_slack=worst_sig,
                        worst_tau_slack=worst_tau, epsilon=eps,
                        rules_checked=checked, anchors=anchors)


# ---------------------------------------------------------------------------
# generalized game


def generalized_payoff_J(tree: FiltrationTree, f: Generator,
                         barriers: BarrierPair, xi, *, sigma: StoppingRule,
                         tau: StoppingRule, alpha: StoppingRule | None = None,
                         tol: float = 1e-12) -> AdaptedProcess:
    """f-expectation payoff of a fixed rule pair.

    Same stopped payoff as payoff_J (tau pays the upper barrier on ties,
    the horizon pays xi) but continuation values come from the implicit
    backward step instead of plain conditional expectation; running costs
    belong inside f here.
    """
    if f.mu > 0:
        raise StepSizeError("generalized payoff requires mu <= 0")
    if barriers.lower is None or barriers.upper is None:
        raise ConfigError("games need both barriers")
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    for rule in (sigma, tau):
        rule.validate(tree)
        if not alpha.pathwise_le(tree, rule):
            raise RuleOrderingError("payoff rules must not stop before the anchor")
    sm, tm = sigma.stop, tau.stop
    lv, uv = barriers.lower.values, barriers.upper.values
    vals = np.zeros(tree.n_nodes)
    leaves = tree.leaves
    vals[leaves] = _terminal_values(tree, xi, leaves)
    for k in range(tree.K - 1, -1, -1):
        for node in tree.layers[k]:
            node = int(node)
            if tm[node]:
                vals[node] = uv[node]
            elif sm[node]:
                vals[node] = lv[node]
            else:
                kids = tree.children[node]
                c = float(np.dot(tree.edge_prob[kids], vals[kids]))
                vals[node], _ = implicit_step_root(f, k, node, c, tree.dt, tol)
    return AdaptedProcess(vals)


def generalized_game_value(tree: FiltrationTree, f: Generator,
                           barriers: BarrierPair, xi,
                           alpha: StoppingRule | None = None,
                           cap: int = _DEFAULT_PAIR_CAP,
                           tol: float = 1e-12) -> GameValue:
    """Iterated optima of the nonlinear-expectation payoff.

    Per rule pair the payoff is evaluated under the f-expectation: solve
    the plain backward equation on the subtree with terminal data placed
    at the first stopped node (upper value if the minimizer stops there,
    lower if only the maximizer does, terminal data at the horizon).
    Requires mu <= 0, the standing assumption for the operator.
    """
    if f.mu > 0:
        raise StepSizeError("generalized game requires mu <= 0")
    if barriers.lower is None or barriers.upper is None:
        raise ConfigError("games need both barriers")
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    alpha.validate(tree)
    lv, uv = barriers.lower.values, barriers.upper.values
    anchors = alpha.fires_at(tree)
    supinf = np.zeros(tree.n_nodes)
    infsup = np.zeros(tree.n_nodes)
    sig_picks: dict[int, tuple[int, ...]] = {}
    tau_picks: dict[int, tuple[int, ...]] = {}
    pairs = 0

    for nu in anchors:
        nu = int(nu)
        n_rules = _count_under(tree, nu)
        if n_rules * n_rules > cap:
            raise OracleTooLarge(
                f"{n_rules}^2 rule pairs at anchor {nu} exceed the cap {cap}"
            )
        tab = _anchor_tables(tree, nu)
        nodes = tab.nodes
        m = nodes.shape[0]
        tv = np.zeros(tree.n_nodes)
        tv[nodes[tab.leaf]] = _terminal_values(tree, xi, nodes[tab.leaf])
        N = len(tab.rules)
        J = np.empty((N, N))
        vals = np.zeros(tree.n_nodes)
        for i in range(N):
            smask = tab.stops[i]
            for j in range(N):
                tmask = tab.stops[j]
                # backward over reversed preorder
                for idx in range(m - 1, -1, -1):
                    node = int(nodes[idx])
                    if tmask[idx]:
                        vals[node] = tv[node] if tab.leaf[idx] else uv[node]
                    elif smask[idx]:
                        vals[node] = tv[node] if tab.leaf[idx] else lv[node]
                    else:
                        kids = tree.children[node]
                        c = float(np.dot(tree.edge_prob[kids], vals[kids]))
                        k = int(tree.layer[node])
                        vals[node], _ = implicit_step_root(f, k, node, c, tree.dt, tol)
                J[i, j] = vals[nu]
        pairs += J.size
        row_min = J.min(axis=1)
        col_max = J.max(axis=0)
        i_star = int(np.argmax(row_min))
        j_star = int(np.argmin(col_max))
        supinf[nu] = row_min[i_star]
        infsup[nu] = col_max[j_star]
        sig_picks[nu] = tab.rules[i_star]
        tau_picks[nu] = tab.rules[j_star]

    return GameValue(
        supinf=AdaptedProcess(supinf),
        infsup=AdaptedProcess(infsup),
        sigma_star=_assemble_optima(tree, sig_picks),
        tau_star=_assemble_optima(tree, tau_picks),
        anchors=anchors,
        pairs_checked=pairs,
    )
