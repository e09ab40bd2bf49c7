"""Doubly reflected backward equations on a filtration tree.

Solvers and checks for the two-barrier problem: the clamp-based backward
solver producing a semimartingale triple (Y, M, R), the penalization
family (pure and half-reflected), the pinch-time system gamma/Lambda with
its closed or half-open intervals, the four-condition verifier for
candidate non-semimartingale solutions, the barrier projection condition,
and the two quantitative stability bounds.

Conventions follow the lattice module: left limits at step k are the
parent values at k-1, increments live on the child layer, and predictable
increments are constant across siblings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .bsde import (
    BsdeSolution,
    Generator,
    _terminal_values,
    implicit_step_root,
    solve_bsde,
)
from .errors import (
    BarrierCrossing,
    ConfigError,
    SolverDivergence,
    StepSizeError,
    TerminalViolation,
)
from .lattice import (
    AdaptedProcess,
    FiltrationTree,
    StoppingRule,
    _as_readonly,
    class_d_norm,
)

__all__ = [
    "BarrierPair",
    "LSystem",
    "ReflectedSolution",
    "PenalizedSolution",
    "HalfPenalizedSolution",
    "ConditionReport",
    "VerdictReport",
    "ProjectionCheck",
    "StabilityGap",
    "SENTINEL_SCALE",
    "default_eta",
    "build_l_system",
    "solve_reflected",
    "solve_penalized",
    "solve_half_penalized",
    "verify_solution",
    "check_projection_condition",
    "stability_gap",
]

# barrier values at least this large act as absent sides; clamping against
# one means the sentinel was chosen too small
SENTINEL_SCALE = 1e8

_TERMINAL_TOL = 1e-10


@dataclass(frozen=True)
class BarrierPair:
    """Optional lower and upper obstacle, lower <= upper wherever both exist."""

    lower: AdaptedProcess | None = None
    upper: AdaptedProcess | None = None

    def __post_init__(self) -> None:
        if self.lower is not None and self.upper is not None:
            gap = self.upper.values - self.lower.values
            if np.any(gap < -1e-12):
                node = int(np.argmin(gap))
                raise BarrierCrossing(
                    f"lower barrier exceeds upper at node {node} by {-gap.min():g}"
                )

    @staticmethod
    def constant(tree: FiltrationTree, lower: float | None,
                 upper: float | None) -> "BarrierPair":
        mk = lambda v: None if v is None else AdaptedProcess.constant(tree, v)
        return BarrierPair(lower=mk(lower), upper=mk(upper))

    @staticmethod
    def from_layer_functions(tree: FiltrationTree,
                             lower: Callable[[float], float] | None,
                             upper: Callable[[float], float] | None) -> "BarrierPair":
        mk = lambda fn: None if fn is None else AdaptedProcess.from_layer_function(tree, fn)
        return BarrierPair(lower=mk(lower), upper=mk(upper))

    def arrays(self, tree: FiltrationTree) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) filled with -inf/+inf where a side is absent."""
        lo = np.full(tree.n_nodes, -np.inf) if self.lower is None else self.lower.values
        hi = np.full(tree.n_nodes, np.inf) if self.upper is None else self.upper.values
        if lo.shape[0] != tree.n_nodes or hi.shape[0] != tree.n_nodes:
            raise ConfigError("barrier length does not match tree")
        return lo, hi

    def validate_terminal(self, tree: FiltrationTree, xi) -> None:
        lo, hi = self.arrays(tree)
        leaves = tree.leaves
        xv = _terminal_values(tree, xi, leaves)
        low = lo[leaves] - xv
        high = xv - hi[leaves]
        if np.any(low > _TERMINAL_TOL):
            leaf = int(leaves[np.argmax(low)])
            raise TerminalViolation(f"terminal value below lower barrier at leaf {leaf}")
        if np.any(high > _TERMINAL_TOL):
            leaf = int(leaves[np.argmax(high)])
            raise TerminalViolation(f"terminal value above upper barrier at leaf {leaf}")

    def pinched(self, tree: FiltrationTree, pinch_tol: float = 1e-12) -> np.ndarray:
        """Mask of nodes where the barriers touch."""
        if self.lower is None or self.upper is None:
            return np.zeros(tree.n_nodes, dtype=bool)
        return np.abs(self.upper.values - self.lower.values) <= pinch_tol


def default_eta(tree: FiltrationTree) -> AdaptedProcess:
    """The standing weight (2/pi)/(1 + t^2) on the grid."""
    return AdaptedProcess.from_layer_function(
        tree, lambda t: (2.0 / math.pi) / (1.0 + t * t)
    )


# ---------------------------------------------------------------------------
# pinch-time system


@dataclass(frozen=True)
class _Anchored:
    """Per-anchor record: where gamma fires and which nodes the interval keeps."""

    anchor: int
    stop_at: np.ndarray       # stop_at[m] = firing node on the path to m, -1 if none yet
    fires: np.ndarray          # bool, gamma fires exactly here
    lam: np.ndarray            # bool, Lambda membership of the path stopped here
    in_interval: np.ndarray    # bool, node lies in [tau, gamma}


class LSystem:
    """gamma, Lambda and the interval [tau, gamma} for every node-anchored time.

    For the anchor nu at layer j, gamma along a path is the first step index
    k with either a left-limit pinch (L and U equal at k-1, requires k > j)
    or a direct pinch (equal at k, k >= j allowed), capped at the horizon.
    Lambda collects paths whose gamma was produced by the left-limit clause
    alone; there the interval [tau, gamma} is half-open, otherwise closed.

    Under the discrete left-limit convention the left clause at k is always
    preceded by the direct clause at k-1, so Lambda is empty on every tree;
    the machinery still evaluates it literally.
    """

    def __init__(self, tree: FiltrationTree, barriers: BarrierPair,
                 pinch_tol: float = 1e-12):
        self.tree = tree
        self.barriers = barriers
        self.pinch_tol = pinch_tol
        self.direct = barriers.pinched(tree, pinch_tol)
        left = np.zeros(tree.n_nodes, dtype=bool)
        left[1:] = self.direct[tree.parent[1:]]
        self.left = left
        self._cache: dict[int, _Anchored] = {}

    def _record(self, anchor: int) -> _Anchored:
        rec = self._cache.get(anchor)
        if rec is not None:
            return rec
        tree = self.tree
        n = tree.n_nodes
        stop_at = np.full(n, -2, dtype=np.int64)  # -2 marks off-subtree
        fires = np.zeros(n, dtype=bool)
        lam = np.zeros(n, dtype=bool)
        in_interval = np.zeros(n, dtype=bool)
        for m in tree.subtree(anchor):
            m = int(m)
            if m == anchor:
                prior = -1
                trigger = bool(self.direct[m]) or tree.is_leaf(m)
            else:
                prior = stop_at[tree.parent[m]]
                trigger = bool(self.direct[m] or self.left[m]) or tree.is_leaf(m)
            if prior >= 0:
                stop_at[m] = prior
                continue
            if trigger:
                stop_at[m] = m
                fires[m] = True
                # Lambda: equal left limits at gamma and tau < gamma
                lam[m] = bool(self.left[m]) and m != anchor
                in_interval[m] = not lam[m]
            else:
                stop_at[m] = -1
                in_interval[m] = True
        rec = _Anchored(anchor=anchor, stop_at=_as_readonly(stop_at),
                        fires=_as_readonly(fires), lam=_as_readonly(lam),
                        in_interval=_as_readonly(in_interval))
        self._cache[anchor] = rec
        return rec

    def gamma_fires(self, anchor: int) -> np.ndarray:
        return self._record(anchor).fires

    def interval_nodes(self, anchor: int) -> np.ndarray:
        return self._record(anchor).in_interval

    def interval_steps(self, anchor: int) -> np.ndarray:
        """Node ids m whose step (parent -> m) lies inside [tau, gamma}."""
        rec = self._record(anchor)
        ok = rec.in_interval.copy()
        ok[anchor] = False
        parents_ok = np.zeros(self.tree.n_nodes, dtype=bool)
        idx = np.nonzero(ok)[0]
        parents_ok[idx] = rec.in_interval[self.tree.parent[idx]]
        return np.nonzero(ok & parents_ok)[0]

    def gamma_by_leaf(self, anchor: int) -> dict[int, tuple[int, int, bool, bool]]:
        """leaf -> (gamma node, gamma layer, Lambda membership, interval closed)."""
        rec = self._record(anchor)
        out: dict[int, tuple[int, int, bool, bool]] = {}
        for leaf in self.tree.leaves_under(anchor):
            g = int(rec.stop_at[leaf])
            out[int(leaf)] = (g, int(self.tree.layer[g]), bool(rec.lam[g]),
                              not bool(rec.lam[g]))
        return out


def build_l_system(tree: FiltrationTree, barriers: BarrierPair,
                   pinch_tol: float = 1e-12) -> LSystem:
    return LSystem(tree, barriers, pinch_tol)


# ---------------------------------------------------------------------------
# reflected solver


@dataclass(frozen=True)
class ReflectedSolution:
    """Semimartingale triple: value, martingale increments, reflection parts.

    ``dr_plus``/``dr_minus`` are the upward/downward reflection increments,
    stored on child nodes and constant across siblings (predictability).
    ``residual`` is the worst interior fixed-point residual; clamped steps
    are exact.  ``minimality_slack`` records the worst complementarity
    product min-style slack actually realized, which the clamp construction
    keeps at zero up to the root-finder tolerance.
    """

    Y: AdaptedProcess
    dm: np.ndarray
    dr_plus: np.ndarray
    dr_minus: np.ndarray
    residual: float
    minimality_slack: float

    def martingale_increment(self, node: int) -> float:
        return float(self.dm[node])


@dataclass(frozen=True)
class PenalizedSolution(BsdeSolution):
    """Penalized backward solution plus its penalty-derived increments."""

    dpen_plus: np.ndarray = None
    dpen_minus: np.ndarray = None
    n: int = 0
    mode: str = "both"
    eta: AdaptedProcess | None = None


@dataclass(frozen=True)
class HalfPenalizedSolution(ReflectedSolution):
    """One barrier reflected, the other penalized."""

    dpen_plus: np.ndarray = None
    dpen_minus: np.ndarray = None
    n: int = 0
    penalty_side: str = "lower"
    eta: AdaptedProcess | None = None


def _reflected_step(f: Generator, k: int, node: int, c: float, dt: float,
                    lo: float, hi: float, tol: float,
                    method: str) -> tuple[float, float, float, float]:
    """One backward step with clamping.

    Returns (y, dr_plus, dr_minus, residual).  Side selection is by exact
    sign of g at the barriers, so reflection increments are exact and
    complementarity is structural; only interior roots carry the bisection
    residual.
    """

    def g(y: float) -> float:
        return y - c - f(k, node, y) * dt

    if np.isfinite(lo):
        glo = g(lo)
        if glo >= 0.0:
            return lo, glo, 0.0, 0.0
    if np.isfinite(hi):
        ghi = g(hi)
        if ghi <= 0.0:
            return hi, 0.0, -ghi, 0.0

    if method == "projected":
        y = min(max(c, lo), hi)
        for _ in range(100000):
            y_next = min(max(c + f(k, node, y) * dt, lo), hi)
            if abs(y_next - y) <= 0.25 * tol:
                y = y_next
                break
            y = y_next
        else:
            raise SolverDivergence(
                f"projected iteration stalled at node {node}; "
                "needs a dt-Lipschitz contraction"
            )
        return y, 0.0, 0.0, abs(g(y))

    y, res = implicit_step_root(f, k, node, c, dt, tol)
    y = min(max(y, lo), hi)
    return y, 0.0, 0.0, abs(g(y))


def solve_reflected(tree: FiltrationTree, xi, f: Generator, barriers: BarrierPair,
                    tol: float = 1e-12, method: str = "clamp") -> ReflectedSolution:
    """Backward solve with reflection at one or two barriers.

    Per node: find the unconstrained implicit root, clamp it into [L, U],
    and book the drift mismatch at the clamped value as a reflection
    increment (upward at L, downward at U).  ``method="projected"`` swaps
    the root finder for a projected fixed-point iteration as a cross-check;
    it requires the Lipschitz constant of f times dt to be below one.
    """
    if method not in ("clamp", "projected"):
        raise ConfigError(f"unknown method {method!r}")
    if f.mu * tree.dt >= 1.0:
        raise StepSizeError(f"mu*dt = {f.mu * tree.dt} >= 1")
    lo, hi = barriers.arrays(tree)
    barriers.validate_terminal(tree, xi)

    vals = np.zeros(tree.n_nodes)
    leaves = tree.leaves
    vals[leaves] = _terminal_values(tree, xi, leaves)
    dm = np.zeros(tree.n_nodes)
    drp = np.zeros(tree.n_nodes)
    drm = np.zeros(tree.n_nodes)
    worst = 0.0
    slack = 0.0
    for k in range(tree.K - 1, -1, -1):
        for node in tree.layers[k]:
            node = int(node)
            kids = tree.children[node]
            c = float(np.dot(tree.edge_prob[kids], vals[kids]))
            y, dp, dn, res = _reflected_step(
                f, k, node, c, tree.dt, lo[node], hi[node], tol, method
            )
            if dp > 0.0 and abs(lo[node]) >= SENTINEL_SCALE:
                raise BarrierCrossing(f"sentinel lower barrier binds at node {node}")
            if dn > 0.0 and abs(hi[node]) >= SENTINEL_SCALE:
                raise BarrierCrossing(f"sentinel upper barrier binds at node {node}")
            vals[node] = y
            drp[kids] = dp
            drm[kids] = dn
            dm[kids] = vals[kids] - c
            worst = max(worst, res)
            if np.isfinite(lo[node]):
                slack = max(slack, min(dp, y - lo[node]))
            if np.isfinite(hi[node]):
                slack = max(slack, min(dn, hi[node] - y))

    return ReflectedSolution(
        Y=AdaptedProcess(vals),
        dm=_as_readonly(dm),
        dr_plus=_as_readonly(drp),
        dr_minus=_as_readonly(drm),
        residual=worst,
        minimality_slack=slack,
    )


# ---------------------------------------------------------------------------
# penalization


def _penalty_generator(f: Generator, tree: FiltrationTree, barriers: BarrierPair,
                       n: int, eta: AdaptedProcess, mode: str) -> Generator:
    lo, hi = barriers.arrays(tree)
    ev = eta.values
    with_lower = mode in ("lower", "both") and barriers.lower is not None
    with_upper = mode in ("upper", "both") and barriers.upper is not None

    def penalty(k: int, node: int, y: float) -> float:
        p = 0.0
        if with_lower:
            p += n * ev[node] * max(lo[node] - y, 0.0)
        if with_upper:
            p -= n * ev[node] * max(y - hi[node], 0.0)
        return p

    return f.plus_penalty(penalty, label=f"{f.label} + {mode} penalty n={n}")


def _resolve_eta(tree: FiltrationTree, eta) -> AdaptedProcess:
    if eta is None:
        eta = default_eta(tree)
    elif not isinstance(eta, AdaptedProcess):
        eta = AdaptedProcess.constant(tree, float(eta))
    if np.any(eta.values <= 0.0):
        raise ConfigError("penalty weight must be strictly positive")
    return eta


def _penalty_increments(tree: FiltrationTree, Y: np.ndarray, barriers: BarrierPair,
                        n: int, eta: AdaptedProcess, with_lower: bool,
                        with_upper: bool) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = barriers.arrays(tree)
    dp = np.zeros(tree.n_nodes)
    dn = np.zeros(tree.n_nodes)
    for k in range(tree.K):
        for node in tree.layers[k]:
            node = int(node)
            kids = tree.children[node]
            if with_lower:
                dp[kids] = n * eta.values[node] * max(lo[node] - Y[node], 0.0) * tree.dt
            if with_upper:
                dn[kids] = n * eta.values[node] * max(Y[node] - hi[node], 0.0) * tree.dt
    return _as_readonly(dp), _as_readonly(dn)


def solve_penalized(tree: FiltrationTree, xi, f: Generator, barriers: BarrierPair,
                    n: int, eta: AdaptedProcess | None = None, mode: str = "both",
                    tol: float = 1e-12) -> PenalizedSolution:
    """Unreflected solve with barrier penalties n*eta*(y-L)^- - n*eta*(y-U)^+.

    ``mode`` keeps only the named penalty ("lower", "upper") or both.  The
    penalty terms are nonincreasing in y, so the generator's monotonicity
    constant is unchanged and the implicit step stays well posed for any n.
    Returns the solution together with the realized penalty increments
    (on child nodes, predictable) for convergence bookkeeping.
    """
    if mode not in ("lower", "upper", "both"):
        raise ConfigError(f"unknown penalty mode {mode!r}")
    eta = _resolve_eta(tree, eta)
    fn = _penalty_generator(f, tree, barriers, n, eta, mode)
    sol = solve_bsde(tree, xi, fn, tol=tol)
    dp, dn = _penalty_increments(
        tree, sol.Y.values, barriers, n, eta,
        with_lower=mode in ("lower", "both") and barriers.lower is not None,
        with_upper=mode in ("upper", "both") and barriers.upper is not None,
    )
    return PenalizedSolution(
        Y=sol.Y, M=sol.M, root_residuals=sol.root_residuals,
        terminal_rule=sol.terminal_rule,
        dpen_plus=dp, dpen_minus=dn, n=n, mode=mode, eta=eta,
    )


def solve_half_penalized(tree: FiltrationTree, xi, f: Generator,
                         barriers: BarrierPair, n: int,
                         eta: AdaptedProcess | None = None,
                         penalty_side: str = "lower",
                         tol: float = 1e-12) -> HalfPenalizedSolution:
    """Penalize one barrier while reflecting on the other.

    ``penalty_side="lower"`` solves the upper-reflected equation with
    generator f + n*eta*(y-L)^-; these values increase to the two-barrier
    solution as n grows.  ``"upper"`` is the mirror scheme, decreasing to
    it from above.
    """
    if penalty_side not in ("lower", "upper"):
        raise ConfigError(f"unknown penalty side {penalty_side!r}")
    eta = _resolve_eta(tree, eta)
    if penalty_side == "lower":
        if barriers.lower is None:
            raise ConfigError("penalty_side='lower' needs a lower barrier")
        fn = _penalty_generator(f, tree, barriers, n, eta, "lower")
        keep = BarrierPair(lower=None, upper=barriers.upper)
    else:
        if barriers.upper is None:
            raise ConfigError("penalty_side='upper' needs an upper barrier")
        fn = _penalty_generator(f, tree, barriers, n, eta, "upper")
        keep = BarrierPair(lower=barriers.lower, upper=None)
    sol = solve_reflected(tree, xi, fn, keep, tol=tol)
    dp, dn = _penalty_increments(
        tree, sol.Y.values, barriers, n, eta,
        with_lower=penalty_side == "lower",
        with_upper=penalty_side == "upper",
    )
    return HalfPenalizedSolution(
        Y=sol.Y, dm=sol.dm, dr_plus=sol.dr_plus, dr_minus=sol.dr_minus,
        residual=sol.residual, minimality_slack=sol.minimality_slack,
        dpen_plus=dp, dpen_minus=dn, n=n, penalty_side=penalty_side, eta=eta,
    )


# ---------------------------------------------------------------------------
# verifier


@dataclass(frozen=True)
class ConditionReport:
    name: str
    passed: bool
    slack: float
    witness: int | None = None
    note: str = ""


@dataclass(frozen=True)
class VerdictReport:
    conditions: tuple[ConditionReport, ...]
    anchors_checked: int
    steps_checked: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def condition(self, name: str) -> ConditionReport:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_text(self) -> str:
        lines = [f"verdict: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.conditions:
            where = "" if c.witness is None else f"  node={c.witness}"
            note = f"  ({c.note})" if c.note else ""
            lines.append(
                f"  {c.name:<12} {'PASS' if c.passed else 'FAIL'}"
                f"  slack={c.slack:.6g}{where}{note}"
            )
        lines.append(
            f"  anchors={self.anchors_checked} steps={self.steps_checked}"
        )
        return "\n".join(lines)


def verify_solution(tree: FiltrationTree, Y: AdaptedProcess, f: Generator, xi,
                    barriers: BarrierPair, tol: float = 1e-8,
                    pinch_tol: float = 1e-12,
                    lsystem: LSystem | None = None,
                    anchors: Iterable[int] | None = None) -> VerdictReport:
    """Check a candidate value process against the four defining conditions.

    (a) integrability of the stopped family: automatic on a finite tree,
        recorded with the stopping-time norm of Y;
    (b) existence of the dynamics decomposition: on a tree any Y admits
        one once the terminal value matches, so this reduces to the
        terminal check;
    (c) the barrier sandwich at every node;
    (d) minimality: for every node-anchored time, the predictable part of
        the reconstructed compensator, restricted to [tau, gamma}, pushes
        up only on {Y = L} and down only on {Y = U}.  The predictable part
        of a step is anchor-independent, so it is precomputed per parent
        and the anchor loop only resolves interval membership.

    Violations are report entries, never exceptions.
    """
    yv = Y.values
    lo, hi = barriers.arrays(tree)

    norm = class_d_norm(tree, Y)
    cond_a = ConditionReport(
        name="class (D)", passed=True, slack=norm,
        note="finite tree, recorded norm",
    )

    leaves = tree.leaves
    xv = _terminal_values(tree, xi, leaves)
    tgap = np.abs(yv[leaves] - xv)
    worst_leaf = int(leaves[np.argmax(tgap)])
    cond_b = ConditionReport(
        name="dynamics", passed=bool(tgap.max() <= tol), slack=float(tgap.max()),
        witness=worst_leaf if tgap.max() > tol else None,
        note="terminal match; decomposition exists by construction",
    )

    below = lo - yv
    above = yv - hi
    breach = np.maximum(
        np.where(np.isfinite(lo), below, -np.inf),
        np.where(np.isfinite(hi), above, -np.inf),
    )
    worst_node = int(np.argmax(breach))
    cond_c = ConditionReport(
        name="barriers", passed=bool(breach.max() <= tol),
        slack=float(max(breach.max(), 0.0)),
        witness=worst_node if breach.max() > tol else None,
    )

    # predictable compensator part per parent: E[dGamma | F_k] with
    # dGamma_{k+1} = (Y_k - Y_{k+1}) - f(t_k, Y_k) dt
    n = tree.n_nodes
    dgv = np.zeros(n)
    slack_up = np.zeros(n)
    slack_down = np.zeros(n)
    for k in range(tree.K):
        for node in tree.layers[k]:
            node = int(node)
            kids = tree.children[node]
            ce = float(np.dot(tree.edge_prob[kids], yv[kids]))
            g = yv[node] - ce - f(k, node, yv[node]) * tree.dt
            dgv[node] = g
            if np.isfinite(lo[node]):
                slack_up[node] = max(g, 0.0) * (yv[node] - lo[node])
            if np.isfinite(hi[node]):
                slack_down[node] = max(-g, 0.0) * (hi[node] - yv[node])

    lsys = lsystem if lsystem is not None else build_l_system(tree, barriers, pinch_tol)
    anchor_list = range(n) if anchors is None else anchors
    worst_d = 0.0
    witness_d: int | None = None
    n_anchors = 0
    n_steps = 0
    for nu in anchor_list:
        steps = lsys.interval_steps(int(nu))
        n_anchors += 1
        n_steps += steps.shape[0]
        if steps.shape[0] == 0:
            continue
        parents = np.unique(tree.parent[steps])
        local = np.maximum(slack_up[parents], slack_down[parents])
        j = int(np.argmax(local))
        if local[j] > worst_d:
            worst_d = float(local[j])
            witness_d = int(parents[j])
    cond_d = ConditionReport(
        name="minimality", passed=bool(worst_d <= tol), slack=worst_d,
        witness=witness_d if worst_d > tol else None,
    )

    return VerdictReport(
        conditions=(cond_a, cond_b, cond_c, cond_d),
        anchors_checked=n_anchors,
        steps_checked=n_steps,
    )


# ---------------------------------------------------------------------------
# projection condition and stability


@dataclass(frozen=True)
class ProjectionCheck:
    lower_ok: bool | None
    upper_ok: bool | None
    lower_witness: int | None = None
    upper_witness: int | None = None

    @property
    def both_ok(self) -> bool:
        return (self.lower_ok is not False) and (self.upper_ok is not False)


def check_projection_condition(tree: FiltrationTree, barriers: BarrierPair,
                               tol: float = 1e-12) -> ProjectionCheck:
    """Predictable projection bounds: E[L_k|F_{k-1}] >= L_{k-1} and
    E[U_k|F_{k-1}] <= U_{k-1} at every interior node.  Absent sides give
    None."""

    def scan(values: np.ndarray, sign: float) -> tuple[bool, int | None]:
        for k in range(tree.K):
            for node in tree.layers[k]:
                node = int(node)
                kids = tree.children[node]
                ce = float(np.dot(tree.edge_prob[kids], values[kids]))
                if sign * (ce - values[node]) < -tol:
                    return False, node
        return True, None

    lower_ok = upper_ok = None
    lw = uw = None
    if barriers.lower is not None:
        lower_ok, lw = scan(barriers.lower.values, +1.0)
    if barriers.upper is not None:
        upper_ok, uw = scan(barriers.upper.values, -1.0)
    return ProjectionCheck(lower_ok=lower_ok, upper_ok=upper_ok,
                           lower_witness=lw, upper_witness=uw)


@dataclass(frozen=True)
class StabilityGap:
    """Both sides of the pathwise bound at time zero, plus the norm bound.

    The caller asserts lhs <= rhs + eps (the eps is not folded into rhs)
    and norm_lhs <= norm_rhs.
    """

    lhs: float
    rhs: float
    eps: float
    norm_lhs: float
    norm_rhs: float
    beta_hat: StoppingRule


def _unpack_scenario(sc):
    if isinstance(sc, tuple):
        return sc
    return sc.terminal, sc.generator, sc.barriers


def stability_gap(tree: FiltrationTree, scenario1, scenario2,
                  eps: float = 1e-3, tol: float = 1e-12) -> StabilityGap:
    """Evaluate the two-solution stability bound at time zero.

    Solves both problems, builds the eps-hitting times (first touch of
    L^1 + eps from above by Y^1, first touch of U^2 - eps from below by
    Y^2), and accumulates the right-hand side along each path: the
    discounted terminal gap, the generator gap at Y^2 before beta-hat, and
    the barrier gaps at beta-hat when it is interior.  Also returns both
    sides of the stopping-time-norm bound.

    Scenarios are (xi, f, barriers) tuples or objects with ``terminal``,
    ``generator`` and ``barriers`` attributes, with matching barrier
    sidedness.
    """
    xi1, f1, b1 = _unpack_scenario(scenario1)
    xi2, f2, b2 = _unpack_scenario(scenario2)
    if (b1.lower is None) != (b2.lower is None) or (b1.upper is None) != (b2.upper is None):
        raise ConfigError("stability comparison needs matching barrier sidedness")

    s1 = solve_reflected(tree, xi1, f1, b1, tol=tol)
    s2 = solve_reflected(tree, xi2, f2, b2, tol=tol)
    y1, y2 = s1.Y.values, s2.Y.values
    lo1, hi1 = b1.arrays(tree)
    lo2, hi2 = b2.arrays(tree)

    mask1 = np.isfinite(lo1) & (y1 <= lo1 + eps)
    mask2 = np.isfinite(hi2) & (y2 >= hi2 - eps)
    beta_hat = StoppingRule.hitting(tree, mask1 | mask2)
    # walk each path root-down and break at the first flag, so the inert
    # later flags of the hitting rule never matter
    fired = beta_hat.stop

    mu_plus = max(f1.mu, 0.0)
    dt = tree.dt
    lhs = max(y1[0] - y2[0], 0.0)

    rhs = 0.0
    for leaf in tree.leaves:
        leaf = int(leaf)
        path = tree.path_to(leaf)
        # discounted terminal gap, always charged
        acc = math.exp(mu_plus * tree.K * dt) * max(y1[leaf] - y2[leaf], 0.0)
        hit = None
        for node in path:
            node = int(node)
            if fired[node]:
                hit = node
                break
            k = int(tree.layer[node])
            df = f1(k, node, float(y2[node])) - f2(k, node, float(y2[node]))
            acc += math.exp(mu_plus * k * dt) * max(df, 0.0) * dt
        if hit is not None and tree.layer[hit] < tree.K:
            disc = math.exp(mu_plus * tree.layer[hit] * dt)
            if np.isfinite(lo1[hit]):
                acc += disc * max(lo1[hit] - lo2[hit], 0.0)
            if np.isfinite(hi1[hit]):
                acc += disc * max(hi1[hit] - hi2[hit], 0.0)
        rhs += tree.path_prob[leaf] * acc

    norm_lhs = class_d_norm(tree, s1.Y - s2.Y)
    norm_rhs = float(np.dot(tree.path_prob[tree.leaves],
                            np.abs(y1[tree.leaves] - y2[tree.leaves])))
    for k in range(tree.K):
        for node in tree.layers[k]:
            node = int(node)
            df = abs(f1(k, node, float(y2[node])) - f2(k, node, float(y2[node])))
            norm_rhs += tree.path_prob[node] * df * dt
    if b1.lower is not None:
        norm_rhs += class_d_norm(tree, b1.lower - b2.lower)
    if b1.upper is not None:
        norm_rhs += class_d_norm(tree, b1.upper - b2.upper)

    return StabilityGap(lhs=lhs, rhs=rhs, eps=eps,
                        norm_lhs=norm_lhs, norm_rhs=norm_rhs, beta_hat=beta_hat)
