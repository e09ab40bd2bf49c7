"""Markov-chain scenarios and obstacle-problem solvers, plus the bridge
between them.

Scaling convention, fixed once here so the two sides stay comparable.
On (0, 1) with mesh width h the energy form (1/2) int u'v' discretizes to
the tridiagonal stiffness matrix

    A = (1/(2h)) tridiag(-1, 2, -1),

inner products are lumped, (f, v) ~ h * sum f_i v_i, and the chain
generator is A_hat = A / h.  A walk with one-step matrix P = I - dt*A_hat
then satisfies (I - P)/dt = A_hat for every dt, so the stationary clamped
fixed point of the chain and the discrete variational inequality are the
same complementarity problem.  dt = h^2 gives the plain symmetric +-h
walk; smaller dt gives a lazy walk on the same grid, which is how time
refinement is done without touching the mesh.

The two elliptic solvers (projected SOR with a lagged nonlinearity,
semismooth Newton on the penalized system) are algorithmically unrelated
on purpose: each one is the oracle for the other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import eigvalsh_tridiagonal, solve_banded

from .bsde import Generator
from .errors import (
    BarrierCrossing,
    ConfigError,
    NewtonStagnation,
    NonTransient,
    OracleTooLarge,
    RootNotBracketed,
    SolverDivergence,
    StepSizeError,
    TerminalViolation,
)
from .lattice import AdaptedProcess, FiltrationTree, TimeGrid, _as_readonly, doob_decompose
from .rbsde import BarrierPair, VerdictReport, verify_solution

__all__ = [
    "MarkovScenario",
    "UnrolledChain",
    "unroll_chain",
    "value_function",
    "MarkovPenalized",
    "markov_penalized",
    "FukushimaReport",
    "fukushima_bookkeeping",
    "ObstacleProblem",
    "solve_vi_psor",
    "solve_vi_penalized",
    "complementarity_residual",
    "ParabolicObstacleProblem",
    "solve_parabolic_vi",
    "upwind_drift_form",
]

_UNROLL_BUDGET = 200_000
_MAX_BRACKET_DOUBLINGS = 60
_MAX_BISECTIONS = 200
_OBSTACLE_SENTINEL = 1e9


def _per_state(val, states: np.ndarray, name: str) -> np.ndarray:
    """Scalar, callable-of-x, or explicit array -> per-state float array."""
    if callable(val):
        out = np.asarray(val(states), dtype=np.float64)
        if out.shape != states.shape:
            out = np.broadcast_to(out, states.shape).astype(np.float64)
    elif np.isscalar(val):
        out = np.full(states.shape, float(val))
    else:
        out = np.asarray(val, dtype=np.float64)
        if out.shape != states.shape:
            raise ConfigError(f"{name} must have one entry per state")
    return out.copy()


@dataclass(frozen=True)
class MarkovScenario:
    """A killed 1-D chain with obstacles, boundary data and a driver.

    ``states`` is a uniform grid; ``interior`` marks the transient region
    D, everything else is absorbing boundary where the chain is frozen and
    the payoff is ``boundary`` (psi).  ``f_hat(x, y)`` is the driver,
    vectorized over numpy arrays, with one-sided slope bound ``mu``
    (y -> f_hat(x, y) - mu*y nonincreasing).  ``terminal`` supplies data
    for horizon leaves that are still alive; it may be None for purely
    stationary use.
    """

    states: np.ndarray
    P: np.ndarray
    dt: float
    interior: np.ndarray
    reward: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    boundary: np.ndarray
    terminal: np.ndarray | None = None
    f_hat: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    mu: float = 0.0

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 1 or states.size < 2:
            raise ConfigError("state space must be a 1-D grid with >= 2 points")
        steps = np.diff(states)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9):
            raise ConfigError("states must be strictly increasing and evenly spaced")
        m = states.size
        P = np.asarray(self.P, dtype=np.float64)
        if P.shape != (m, m):
            raise ConfigError("transition matrix shape must match the state count")
        if np.any(P < -1e-15):
            raise ConfigError("transition probabilities must be nonnegative")
        if not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError("transition rows must sum to 1")
        interior = np.asarray(self.interior, dtype=bool)
        if interior.shape != (m,):
            raise ConfigError("interior mask must have one entry per state")
        for i in np.flatnonzero(~interior):
            row = np.zeros(m)
            row[i] = 1.0
            if not np.allclose(P[i], row, atol=1e-12):
                raise ConfigError(f"absorbing state {i} must be a fixed point of P")
        if not self.dt > 0:
            raise StepSizeError("dt must be positive")
        if self.f_hat is not None and self.mu * self.dt >= 1.0:
            raise StepSizeError("mu*dt must stay below 1")

        lower = _per_state(self.lower, states, "lower")
        upper = _per_state(self.upper, states, "upper")
        reward = _per_state(self.reward, states, "reward")
        boundary = _per_state(self.boundary, states, "boundary")
        if np.any(lower[interior] > upper[interior] + 1e-12):
            raise BarrierCrossing("obstacles must satisfy h1 <= h2 on the interior")
        off = ~interior
        if np.any(boundary[off] < lower[off] - 1e-12) or np.any(boundary[off] > upper[off] + 1e-12):
            raise TerminalViolation("boundary data must sit between the obstacles")
        terminal = self.terminal
        if terminal is not None:
            terminal = _per_state(terminal, states, "terminal")
            bad = interior & ((terminal < lower - 1e-12) | (terminal > upper + 1e-12))
            if np.any(bad):
                raise TerminalViolation("terminal data must sit between the obstacles")
            object.__setattr__(self, "terminal", _as_readonly(terminal))
        object.__setattr__(self, "states", _as_readonly(states))
        object.__setattr__(self, "P", _as_readonly(P))
        object.__setattr__(self, "interior", _as_readonly(interior))
        object.__setattr__(self, "reward", _as_readonly(reward))
        object.__setattr__(self, "lower", _as_readonly(lower))
        object.__setattr__(self, "upper", _as_readonly(upper))
        object.__setattr__(self, "boundary", _as_readonly(boundary))

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def h(self) -> float:
        return float(self.states[1] - self.states[0])

    @staticmethod
    def walk_on_interval(n_cells: int, dt: float | None = None,
                         span: tuple[float, float] = (0.0, 1.0),
                         reward=0.0, lower=-np.inf, upper=np.inf,
                         boundary=0.0, terminal=None,
                         f_hat=None, mu: float = 0.0) -> "MarkovScenario":
        """Walk with P = I - dt*A_hat on an evenly divided interval.

        ``dt = h^2`` (the default) is the plain +-h walk; ``dt < h^2``
        adds a stay probability, refining time on a fixed mesh.  The two
        endpoints absorb.
        """
        if n_cells < 2:
            raise ConfigError("need at least two cells")
        a, b = span
        states = np.linspace(a, b, n_cells + 1)
        h = (b - a) / n_cells
        if dt is None:
            dt = h * h
        stay = 1.0 - dt / (h * h)
        if stay < -1e-12:
            raise StepSizeError("dt must not exceed h^2 for a nonnegative stay probability")
        stay = max(stay, 0.0)
        jump = dt / (2.0 * h * h)
        m = n_cells + 1
        P = np.zeros((m, m))
        P[0, 0] = 1.0
        P[m - 1, m - 1] = 1.0
        for i in range(1, m - 1):
            P[i, i - 1] = jump
            P[i, i] = stay
            P[i, i + 1] = jump
        interior = np.ones(m, dtype=bool)
        interior[0] = interior[m - 1] = False
        return MarkovScenario(states=states, P=P, dt=float(dt), interior=interior,
                              reward=reward, lower=lower, upper=upper,
                              boundary=boundary, terminal=terminal,
                              f_hat=f_hat, mu=mu)


# ---------------------------------------------------------------------------
# per-state implicit steps (the vectorized cousin of the tree stepper)


def _penalized_residual(y, c, x, g, dt, f_hat, n, eta, h1, h2):
    val = y - c - dt * g
    if f_hat is not None:
        val = val - dt * f_hat(x, y)
    if n:
        val = val - dt * n * eta * np.maximum(h1 - y, 0.0)
        val = val + dt * n * eta * np.maximum(y - h2, 0.0)
    return val


def _state_roots(c, x, g, dt, f_hat, mu, n=0.0, eta=None, h1=None, h2=None):
    """Vectorized root of y = c + dt*(g + f_hat(x,y) + penalty(y))."""
    c = np.asarray(c, dtype=np.float64)

    def G(y):
        return _penalized_residual(y, c, x, g, dt, f_hat, n, eta, h1, h2)

    slope = 1.0 - max(mu, 0.0) * dt
    r = np.abs(G(c)) / slope + 1.0
    lo = c - r
    hi = c + r
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        glo = G(lo)
        ghi = G(hi)
        bad_lo = glo > 0
        bad_hi = ghi < 0
        if not bad_lo.any() and not bad_hi.any():
            break
        w = hi - lo
        lo = np.where(bad_lo, lo - w, lo)
        hi = np.where(bad_hi, hi + w, hi)
    else:
        raise RootNotBracketed("per-state bracket expansion failed")
    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        gm = G(mid)
        lo = np.where(gm <= 0, mid, lo)
        hi = np.where(gm > 0, mid, hi)
        if np.max(hi - lo) < 1e-13 * max(1.0, float(np.abs(mid).max())):
            break
    return 0.5 * (lo + hi)


def _reflected_state_roots(c, x, g, dt, f_hat, mu, h1, h2):
    """Clamped step with exact-sign obstacle detection, mirroring the tree
    solver branch for branch so unrolled and per-state values agree."""
    c = np.asarray(c, dtype=np.float64)

    def G(y):
        return _penalized_residual(y, c, x, g, dt, f_hat, 0.0, None, None, None)

    fin_lo = np.isfinite(h1)
    fin_hi = np.isfinite(h2)
    gl = G(np.where(fin_lo, h1, 0.0))
    gu = G(np.where(fin_hi, h2, 0.0))
    at_lower = fin_lo & (gl >= 0)
    at_upper = fin_hi & (gu <= 0) & ~at_lower
    y = _state_roots(c, x, g, dt, f_hat, mu)
    y = np.clip(y, h1, h2)
    y = np.where(at_lower, h1, y)
    y = np.where(at_upper, h2, y)
    return y


# ---------------------------------------------------------------------------
# unrolling


@dataclass(frozen=True)
class UnrolledChain:
    """A chain history tree with the processes the tree solvers need.

    ``state_index[node]`` is the chain state occupied at that node; after
    absorption both barriers and the terminal datum equal the boundary
    value, which pins the reflected solution there, and the generator is
    switched off.
    """

    scenario: MarkovScenario
    tree: FiltrationTree
    state_index: np.ndarray
    start: int
    barriers: BarrierPair
    terminal: dict[int, float]
    generator: Generator

    def state_groups(self) -> dict[tuple[int, int], np.ndarray]:
        """Node ids keyed by (layer, state): the Markov sufficiency atoms."""
        groups: dict[tuple[int, int], list[int]] = {}
        for node in range(self.tree.n_nodes):
            key = (int(self.tree.layer[node]), int(self.state_index[node]))
            groups.setdefault(key, []).append(node)
        return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}

    def group_spread(self, values: np.ndarray) -> float:
        """Largest within-group range; 0 means fully history-independent."""
        spread = 0.0
        for nodes in self.state_groups().values():
            v = values[nodes]
            spread = max(spread, float(v.max() - v.min()))
        return spread


def unroll_chain(scenario: MarkovScenario, depth: int, start: int,
                 budget: int = _UNROLL_BUDGET) -> UnrolledChain:
    """Expand chain histories from ``start`` into a filtration tree.

    Layer-k atoms are length-k histories.  Absorbing states continue as
    single-child branches so every leaf sits at the horizon layer.
    """
    if depth < 1:
        raise ConfigError("unroll depth must be >= 1")
    if not 0 <= start < scenario.n_states:
        raise ConfigError("start state out of range")
    P = scenario.P
    interior = scenario.interior
    successors: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(scenario.n_states):
        js = np.flatnonzero(P[i] > 0)
        if interior[i] and js.size > 3:
            raise ConfigError(
                f"state {i} has {js.size} successors; unrolling needs <= 3"
            )
        successors[i] = (js, P[i, js])

    parent = [-1]
    prob = [1.0]
    state = [start]
    frontier = [0]
    for _ in range(depth):
        nxt = []
        for node in frontier:
            js, ps = successors[state[node]]
            for j, p in zip(js, ps):
                parent.append(node)
                prob.append(float(p))
                state.append(int(j))
                nxt.append(len(parent) - 1)
            if len(parent) > budget:
                raise OracleTooLarge(
                    f"unrolled tree exceeds the {budget}-node budget"
                )
        frontier = nxt
    tree = FiltrationTree(TimeGrid(K=depth, dt=scenario.dt), parent, prob)
    state_index = np.asarray(state, dtype=np.int64)

    alive = interior[state_index]
    lo = np.where(alive, scenario.lower[state_index], scenario.boundary[state_index])
    hi = np.where(alive, scenario.upper[state_index], scenario.boundary[state_index])
    # infinite obstacle sides become sentinels the tree solver refuses to bind
    lo = np.where(np.isfinite(lo), lo, -_OBSTACLE_SENTINEL)
    hi = np.where(np.isfinite(hi), hi, _OBSTACLE_SENTINEL)
    barriers = BarrierPair(AdaptedProcess(lo), AdaptedProcess(hi))

    terminal: dict[int, float] = {}
    for leaf in tree.leaves:
        s = int(state_index[leaf])
        if interior[s]:
            if scenario.terminal is None:
                raise ConfigError(
                    "horizon reached with the chain still alive; "
                    "the scenario needs terminal data"
                )
            terminal[int(leaf)] = float(scenario.terminal[s])
        else:
            terminal[int(leaf)] = float(scenario.boundary[s])

    xs = scenario.states
    reward = scenario.reward
    f_hat = scenario.f_hat

    def fn(k: int, node: int, y: float) -> float:
        s = state_index[node]
        if not interior[s]:
            return 0.0
        base = float(reward[s])
        if f_hat is not None:
            base += float(f_hat(xs[s], y))
        return base

    gen = Generator(fn=fn, mu=scenario.mu if f_hat is not None else 0.0,
                    label="chain driver")
    return UnrolledChain(scenario=scenario, tree=tree,
                         state_index=_as_readonly(state_index), start=start,
                         barriers=barriers, terminal=terminal, generator=gen)


# ---------------------------------------------------------------------------
# value functions


def _stationary_sweep(scenario: MarkovScenario, u, penalized, n, eta):
    c = scenario.P @ u
    D = scenario.interior
    x = scenario.states[D]
    g = scenario.reward[D]
    if penalized:
        yD = _state_roots(c[D], x, g, scenario.dt, scenario.f_hat, scenario.mu,
                          n=n, eta=eta, h1=scenario.lower[D], h2=scenario.upper[D])
    else:
        yD = _reflected_state_roots(c[D], x, g, scenario.dt, scenario.f_hat,
                                    scenario.mu, scenario.lower[D], scenario.upper[D])
    out = u.copy()
    out[D] = yD
    return out


def _iterate_stationary(scenario, tol, max_iter, penalized, n, eta):
    D = scenario.interior
    u = scenario.boundary.copy()
    if not D.any():
        return u, {"iterations": 0, "est_error": 0.0, "rate": 0.0}
    u[D] = np.clip(np.zeros(D.sum()), scenario.lower[D], scenario.upper[D])
    prev_change = None
    stalled = 0
    for it in range(1, max_iter + 1):
        u_new = _stationary_sweep(scenario, u, penalized, n, eta)
        change = float(np.max(np.abs(u_new - u)))
        u = u_new
        if change == 0.0:
            return u, {"iterations": it, "est_error": 0.0, "rate": 0.0}
        if prev_change is not None and prev_change > 0.0:
            rho = change / prev_change
            if rho < 1.0:
                stalled = 0
                est = change * rho / (1.0 - rho)
                if est <= tol:
                    return u, {"iterations": it, "est_error": est, "rate": rho}
            else:
                stalled += 1
                if stalled >= 1000:
                    raise NonTransient(
                        "fixed-point sweeps are not contracting; "
                        "is the killed chain transient?"
                    )
        prev_change = change
    raise NonTransient(f"no convergence within {max_iter} sweeps (last change {change:.3e})")


def _backward_field(scenario, horizon, penalized, n, eta):
    if scenario.terminal is None:
        raise ConfigError("finite-horizon induction needs terminal data")
    D = scenario.interior
    m = scenario.n_states
    field = np.empty((horizon + 1, m))
    field[horizon] = np.where(D, scenario.terminal, scenario.boundary)
    u = field[horizon].copy()
    for k in range(horizon - 1, -1, -1):
        u = _stationary_sweep(scenario, u, penalized, n, eta)
        field[k] = u
    return field


def value_function(scenario: MarkovScenario, tol: float = 1e-10,
                   horizon: int | None = None, max_iter: int = 100_000,
                   return_info: bool = False):
    """Per-state value of the stopped chain game.

    Stationary (``horizon=None``): the fixed point of

        u = clamp(P u + (g + f_hat(., u)) dt, h1, h2)   on D,  u = psi off D,

    found by sweeping with the driver solved implicitly per state; sweeps
    stop once the geometric-rate error estimate drops below ``tol``.
    Finite horizon: backward induction; returns the (horizon+1, m) field
    whose row k is the time-k value.
    """
    if horizon is None:
        u, info = _iterate_stationary(scenario, tol, max_iter, False, 0.0, None)
        return (u, info) if return_info else u
    if horizon < 0:
        raise ConfigError("horizon must be >= 0")
    field = _backward_field(scenario, horizon, False, 0.0, None)
    return (field, {"iterations": horizon}) if return_info else field


@dataclass(frozen=True)
class MarkovPenalized:
    """Penalized per-state value with iteration diagnostics."""

    u: np.ndarray
    n: float
    iterations: int
    est_error: float


def _resolve_state_eta(scenario: MarkovScenario, eta) -> np.ndarray:
    if eta is None:
        eta = 1.0
    arr = _per_state(eta, scenario.states, "eta")
    if np.any(arr[scenario.interior] <= 0):
        raise ConfigError("penalty weight eta must be positive on the interior")
    return arr


def markov_penalized(scenario: MarkovScenario, n: float, eta=None,
                     tol: float = 1e-10, horizon: int | None = None,
                     max_iter: int = 100_000) -> MarkovPenalized:
    """Unclamped fixed point with obstacles enforced through the driver
    penalty n*eta*(y - h1)^- - n*eta*(y - h2)^+ instead of projection.

    The penalty is handled inside the per-state implicit solve, so the
    sweep contraction rate does not degrade as n grows.
    """
    if n < 0:
        raise ConfigError("penalty level n must be >= 0")
    eta_arr = _resolve_state_eta(scenario, eta)[scenario.interior]
    if horizon is None:
        u, info = _iterate_stationary(scenario, tol, max_iter, True, float(n), eta_arr)
        return MarkovPenalized(u=u, n=float(n), iterations=info["iterations"],
                               est_error=info["est_error"])
    field = _backward_field(scenario, horizon, True, float(n), eta_arr)
    return MarkovPenalized(u=field, n=float(n), iterations=horizon, est_error=0.0)


# ---------------------------------------------------------------------------
# decomposition bookkeeping on the unrolled tree


@dataclass(frozen=True)
class FukushimaReport:
    """u(X) split into compensator + martingale, with the reflection
    process reconstructed from them and the verifier's verdict on it.

    gamma accumulates -(dA + dM + f_hat(X, u(X)) dt); when u solves the
    variational inequality this is exactly the minimal pushing process and
    the verifier passes.
    """

    unrolled: UnrolledChain
    values: AdaptedProcess
    a_part: AdaptedProcess
    m_part: AdaptedProcess
    gamma: AdaptedProcess
    report: VerdictReport


def fukushima_bookkeeping(scenario: MarkovScenario, u, depth: int, start: int,
                          tol: float = 1e-8) -> FukushimaReport:
    u = _per_state(u, scenario.states, "u")
    un = unroll_chain(scenario, depth, start)
    tree = un.tree
    uX = AdaptedProcess(u[un.state_index])
    dec = doob_decompose(tree, uX)

    dgam = -(dec.dm + dec.dv)
    par = tree.parent.copy()
    par[0] = 0
    s_par = un.state_index[par]
    running = scenario.reward[s_par].astype(np.float64)
    if scenario.f_hat is not None:
        running = running + scenario.f_hat(scenario.states[s_par], u[s_par])
    running = np.where(scenario.interior[s_par], running, 0.0)
    running[0] = 0.0
    dgam = dgam - running * tree.dt

    def cumulate(d):
        out = np.zeros(tree.n_nodes)
        for i in range(1, tree.n_nodes):
            out[i] = out[tree.parent[i]] + d[i]
        return AdaptedProcess(out)

    report = verify_solution(tree, uX, un.generator, un.terminal, un.barriers,
                             tol=tol)
    return FukushimaReport(unrolled=un, values=uX,
                           a_part=cumulate(dec.dv), m_part=cumulate(dec.dm),
                           gamma=cumulate(dgam), report=report)


# ---------------------------------------------------------------------------
# elliptic obstacle problem


@dataclass(frozen=True)
class ObstacleProblem:
    """Discrete two-obstacle problem on the open unit interval.

    ``diag``/``off`` hold the symmetric tridiagonal stiffness matrix A of
    the energy (1/2) int u'v' with zero boundary; the assembled load is
    lumped, b(u) = h * f_hat(x, u).  Construction verifies positive
    definiteness through the smallest tridiagonal eigenvalue.
    """

    x: np.ndarray
    h: float
    diag: np.ndarray
    off: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    f_hat: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        diag = np.asarray(self.diag, dtype=np.float64)
        m = x.size
        if m < 1 or diag.shape != (m,):
            raise ConfigError("grid and stiffness diagonal sizes disagree")
        off = np.asarray(self.off, dtype=np.float64)
        if off.shape != (max(m - 1, 0),):
            raise ConfigError("off-diagonal must have m-1 entries")
        if m == 1:
            smallest = diag[0]
        else:
            smallest = eigvalsh_tridiagonal(diag, off, select="i",
                                            select_range=(0, 0))[0]
        if smallest <= 0:
            raise ConfigError("stiffness matrix must be positive definite")
        lower = _per_state(self.lower, x, "lower")
        upper = _per_state(self.upper, x, "upper")
        if np.any(lower > upper + 1e-12):
            raise BarrierCrossing("obstacles must satisfy h1 <= h2")
        if not self.h > 0:
            raise ConfigError("mesh width must be positive")
        object.__setattr__(self, "x", _as_readonly(x))
        object.__setattr__(self, "diag", _as_readonly(diag))
        object.__setattr__(self, "off", _as_readonly(off))
        object.__setattr__(self, "lower", _as_readonly(lower))
        object.__setattr__(self, "upper", _as_readonly(upper))

    @property
    def m(self) -> int:
        return self.x.size

    @staticmethod
    def on_unit_interval(k: int, f_hat=None, lower=None, upper=None) -> "ObstacleProblem":
        """Canonical instance: 2^k + 1 grid points on [0, 1], interior
        unknowns only, A = (1/(2h)) tridiag(-1, 2, -1)."""
        if k < 1:
            raise ConfigError("refinement level k must be >= 1")
        cells = 2 ** k
        h = 1.0 / cells
        x = h * np.arange(1, cells)
        m = x.size
        diag = np.full(m, 1.0 / h)
        off = np.full(m - 1, -1.0 / (2.0 * h))
        lo = -np.inf if lower is None else lower
        hi = np.inf if upper is None else upper
        return ObstacleProblem(x=x, h=h, diag=diag, off=off,
                               lower=lo, upper=hi, f_hat=f_hat)

    def matvec(self, u: np.ndarray) -> np.ndarray:
        v = self.diag * u
        if self.m > 1:
            v[1:] += self.off * u[:-1]
            v[:-1] += self.off * u[1:]
        return v

    def rhs(self, u: np.ndarray) -> np.ndarray:
        if self.f_hat is None:
            return np.zeros(self.m)
        return self.h * np.asarray(self.f_hat(self.x, u), dtype=np.float64)

    def energy(self, u: np.ndarray) -> float:
        """The quadratic form u' A u."""
        return float(u @ self.matvec(u))

    def banded(self) -> np.ndarray:
        ab = np.zeros((3, self.m))
        ab[1] = self.diag
        if self.m > 1:
            ab[0, 1:] = self.off
            ab[2, :-1] = self.off
        return ab


def _natural_residual(lo, di, up, u, b, h1, h2):
    r = di * u - b
    if u.size > 1:
        r[1:] += lo[1:] * u[:-1]
        r[:-1] += up[:-1] * u[1:]
    return u - np.clip(u - r, h1, h2)


def _psor_lcp(lo, di, up, b, h1, h2, u0, omega, tol, max_sweeps):
    """Projected Gauss-Seidel/SOR on a tridiagonal complementarity system.

    Convergence is measured by the natural residual u - clip(u - (Au-b)).
    Near-optimal over-relaxation makes the iteration matrix defective, so
    the residual legitimately grows for about one sweep per grid point
    before the geometric phase; divergence is therefore declared on the
    growth factor over the best residual seen, not on single increases.
    """
    u = u0.copy()
    m = u.size
    best = np.inf
    res = np.inf
    for sweep in range(1, max_sweeps + 1):
        for i in range(m):
            s = b[i] - di[i] * u[i]
            if i > 0:
                s -= lo[i] * u[i - 1]
            if i < m - 1:
                s -= up[i] * u[i + 1]
            yi = u[i] + omega * s / di[i]
            if yi < h1[i]:
                yi = h1[i]
            elif yi > h2[i]:
                yi = h2[i]
            u[i] = yi
        res = float(np.max(np.abs(_natural_residual(lo, di, up, u, b, h1, h2))))
        if res <= tol:
            return u, sweep
        if not np.isfinite(res):
            raise SolverDivergence("projected sweeps produced a non-finite residual")
        best = min(best, res)
        # transient growth is bounded by roughly the grid size; far beyond
        # that the sweeps are genuinely running away
        if sweep > 10 * (m + 1) and res > 1e3 * max(best, tol):
            raise SolverDivergence(
                f"projected sweeps diverging (residual {res:.3e})"
            )
    raise SolverDivergence(f"projected sweeps exhausted ({max_sweeps}), residual {res:.3e}")


def _split_tridiag(problem: ObstacleProblem):
    m = problem.m
    lo = np.zeros(m)
    up = np.zeros(m)
    if m > 1:
        lo[1:] = problem.off
        up[:-1] = problem.off
    return lo, problem.diag.copy(), up


def solve_vi_psor(problem: ObstacleProblem, omega: float | None = None,
                  tol: float = 1e-10, max_outer: int = 100,
                  max_sweeps: int = 50_000, return_info: bool = False):
    """Projected SOR with the nonlinearity lagged in an outer loop.

    The default relaxation 2/(1 + sin(pi h)) is the classical optimum for
    the model stiffness matrix.  Output satisfies the discrete
    complementarity conditions to ``tol`` in the natural-residual norm.
    """
    if omega is None:
        omega = 2.0 / (1.0 + np.sin(np.pi * problem.h))
    if not 0.0 < omega < 2.0:
        raise ConfigError("relaxation parameter must lie in (0, 2)")
    lo, di, up = _split_tridiag(problem)
    h1, h2 = problem.lower, problem.upper
    u = np.clip(np.zeros(problem.m), h1, h2)
    sweeps = 0
    prev_delta = np.inf
    grow = 0
    for outer in range(1, max_outer + 1):
        b = problem.rhs(u)
        u_new, s = _psor_lcp(lo, di, up, b, h1, h2, u, omega, 0.1 * tol, max_sweeps)
        sweeps += s
        delta = float(np.max(np.abs(u_new - u)))
        u = u_new
        b = problem.rhs(u)
        res = float(np.max(np.abs(_natural_residual(lo, di, up, u, b, h1, h2))))
        if res <= tol and (problem.f_hat is None or delta <= tol):
            info = {"outer": outer, "sweeps": sweeps, "residual": res}
            return (u, info) if return_info else u
        if delta > prev_delta * (1.0 + 1e-12):
            grow += 1
            if grow >= 10:
                raise SolverDivergence("outer nonlinearity lag is diverging")
        else:
            grow = 0
        prev_delta = delta
    raise SolverDivergence(f"outer lag did not settle within {max_outer} rounds")


def complementarity_residual(problem: ObstacleProblem, u: np.ndarray) -> np.ndarray:
    """Pointwise natural residual of the complementarity system; zero
    exactly at solutions."""
    lo, di, up = _split_tridiag(problem)
    return _natural_residual(lo, di, up, np.asarray(u, dtype=np.float64),
                             problem.rhs(u), problem.lower, problem.upper)


def solve_vi_penalized(problem: ObstacleProblem, n: float, tol: float = 1e-10,
                       max_newton: int = 100, fd_step: float = 1e-7,
                       return_info: bool = False):
    """Damped semismooth Newton on A u = h*(f_hat + n(u-h1)^- - n(u-h2)^+).

    The penalty kinks only add nonnegative diagonal terms to the Jacobian,
    so each Newton system stays tridiagonal positive definite; steps are
    halved until the residual decreases.
    """
    if n < 0:
        raise ConfigError("penalty level n must be >= 0")
    h1, h2 = problem.lower, problem.upper
    x = problem.x
    h = problem.h

    def load(u):
        base = problem.rhs(u)
        return base + h * n * (np.maximum(h1 - u, 0.0) - np.maximum(u - h2, 0.0))

    def F(u):
        return problem.matvec(u) - load(u)

    def fprime(u):
        if problem.f_hat is None:
            return np.zeros_like(u)
        d = fd_step * np.maximum(1.0, np.abs(u))
        return (np.asarray(problem.f_hat(x, u + d)) -
                np.asarray(problem.f_hat(x, u - d))) / (2.0 * d)

    u = np.clip(np.zeros(problem.m), h1, h2)
    res = float(np.max(np.abs(F(u))))
    for it in range(1, max_newton + 1):
        if res <= tol:
            info = {"newton": it - 1, "residual": res}
            return (u, info) if return_info else u
        gain = n * ((u < h1).astype(float) + (u > h2).astype(float))
        jdiag = problem.diag + h * (gain - fprime(u))
        ab = np.zeros((3, problem.m))
        ab[1] = jdiag
        if problem.m > 1:
            ab[0, 1:] = problem.off
            ab[2, :-1] = problem.off
        step = solve_banded((1, 1), ab, -F(u))
        s = 1.0
        while s >= 2.0 ** -40:
            cand = u + s * step
            new_res = float(np.max(np.abs(F(cand))))
            if new_res <= (1.0 - 1e-4 * s) * res:
                u, res = cand, new_res
                break
            s *= 0.5
        else:
            raise NewtonStagnation(
                f"no descent direction progress at residual {res:.3e}"
            )
    raise NewtonStagnation(f"Newton budget exhausted at residual {res:.3e}")


# ---------------------------------------------------------------------------
# parabolic obstacle problem


def upwind_drift_form(h: float, m: int, drift: float = 0.0):
    """Tridiagonal -(1/2 d^2/dx^2 + drift d/dx) with upwinded drift, scaled
    like the chain generator (already divided by the mass h)."""
    lo = np.full(m, -1.0 / (2.0 * h * h))
    up = np.full(m, -1.0 / (2.0 * h * h))
    di = np.full(m, 1.0 / (h * h))
    if drift > 0:
        di += drift / h
        up -= drift / h
    elif drift < 0:
        di += -drift / h
        lo -= -drift / h
    lo[0] = 0.0
    up[m - 1] = 0.0
    return lo, di, up


def _grid_field(val, times, x, name):
    nt, m = times.size, x.size
    if callable(val):
        out = np.empty((nt, m))
        for i, t in enumerate(times):
            out[i] = _per_state(lambda xx: val(t, xx), x, name)
        return out
    if np.isscalar(val):
        return np.full((nt, m), float(val))
    arr = np.asarray(val, dtype=np.float64)
    if arr.shape == (m,):
        return np.broadcast_to(arr, (nt, m)).copy()
    if arr.shape != (nt, m):
        raise ConfigError(f"{name} must broadcast to (times, points)")
    return arr.copy()


@dataclass(frozen=True)
class ParabolicObstacleProblem:
    """Backward evolution between moving obstacles on the unit interval.

    ``form(t)`` returns the (lo, diag, up) tridiagonal of the elliptic
    operator at time t, scaled like the chain generator; None means the
    constant (1/2) second difference.  theta in [1/2, 1] selects the time
    scheme.  Terminal data must respect the obstacles at the horizon.
    """

    x: np.ndarray
    h: float
    times: np.ndarray
    terminal: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    theta: float = 0.5
    f_hat: Callable | None = None
    form: Callable[[float], tuple] | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
            raise ConfigError("times must be increasing with at least one step")
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [1/2, 1]")
        terminal = _per_state(self.terminal, x, "terminal")
        lower = _grid_field(self.lower, times, x, "lower")
        upper = _grid_field(self.upper, times, x, "upper")
        if np.any(lower > upper + 1e-12):
            raise BarrierCrossing("obstacles must satisfy h1 <= h2")
        if np.any(terminal < lower[-1] - 1e-12) or np.any(terminal > upper[-1] + 1e-12):
            raise TerminalViolation("terminal datum must sit between the horizon obstacles")
        object.__setattr__(self, "x", _as_readonly(x))
        object.__setattr__(self, "times", _as_readonly(times))
        object.__setattr__(self, "terminal", _as_readonly(terminal))
        object.__setattr__(self, "lower", _as_readonly(lower))
        object.__setattr__(self, "upper", _as_readonly(upper))

    @property
    def m(self) -> int:
        return self.x.size

    def operator_at(self, t: float):
        if self.form is not None:
            lo, di, up = self.form(float(t))
            return (np.asarray(lo, dtype=np.float64),
                    np.asarray(di, dtype=np.float64),
                    np.asarray(up, dtype=np.float64))
        return upwind_drift_form(self.h, self.m, 0.0)

    @staticmethod
    def on_unit_interval(k: int, T: float, n_steps: int, terminal,
                         lower=-np.inf, upper=np.inf, theta: float = 0.5,
                         f_hat=None, drift: float = 0.0) -> "ParabolicObstacleProblem":
        if k < 1 or n_steps < 1:
            raise ConfigError("need k >= 1 and at least one time step")
        cells = 2 ** k
        h = 1.0 / cells
        x = h * np.arange(1, cells)
        times = np.linspace(0.0, T, n_steps + 1)
        form = None
        if drift != 0.0:
            def form(t, _h=h, _m=x.size, _b=drift):
                return upwind_drift_form(_h, _m, _b)
        return ParabolicObstacleProblem(x=x, h=h, times=times, terminal=terminal,
                                        lower=lower, upper=upper, theta=theta,
                                        f_hat=f_hat, form=form)


def _tri_matvec(lo, di, up, u):
    v = di * u
    if u.size > 1:
        v[1:] += lo[1:] * u[:-1]
        v[:-1] += up[:-1] * u[1:]
    return v


def solve_parabolic_vi(problem: ParabolicObstacleProblem, tol: float = 1e-10,
                       omega: float = 1.0, max_sweeps: int = 50_000,
                       osc_tol: float = 1e-7, return_info: bool = False):
    """Backward theta-scheme with an obstacle projection every step.

    Each step solves the complementarity system for I + theta*dt*A(t) by
    projected SOR, warm-started from the later level.  With theta = 1/2
    the scheme watches for the classical obstacle-induced time
    oscillation (four or more alternating-sign increments above
    ``osc_tol`` at one node) and reruns fully implicit if it appears.
    Returns the (times, points) field, newest time first.
    """
    x = problem.x
    nt = problem.times.size - 1

    def run(theta):
        field = np.empty((nt + 1, problem.m))
        field[nt] = problem.terminal
        sweeps = 0
        prev_du = None
        alt = np.zeros(problem.m, dtype=np.int64)
        oscillated = False
        for k in range(nt - 1, -1, -1):
            dt = problem.times[k + 1] - problem.times[k]
            lo_k, di_k, up_k = problem.operator_at(problem.times[k])
            lo_n, di_n, up_n = problem.operator_at(problem.times[k + 1])
            u_next = field[k + 1]
            rhs = u_next - (1.0 - theta) * dt * _tri_matvec(lo_n, di_n, up_n, u_next)
            if problem.f_hat is not None:
                rhs = rhs + dt * np.asarray(
                    problem.f_hat(problem.times[k + 1], x, u_next), dtype=np.float64)
            C_lo = theta * dt * lo_k
            C_di = 1.0 + theta * dt * di_k
            C_up = theta * dt * up_k
            u_k, s = _psor_lcp(C_lo, C_di, C_up, rhs,
                               problem.lower[k], problem.upper[k],
                               u_next.copy(), omega, tol, max_sweeps)
            sweeps += s
            field[k] = u_k
            du = u_k - u_next
            if prev_du is not None:
                flip = (np.abs(du) > osc_tol) & (np.abs(prev_du) > osc_tol) \
                    & (np.sign(du) == -np.sign(prev_du))
                alt = np.where(flip, alt + 1, 0)
                if np.any(alt >= 4):
                    oscillated = True
            prev_du = du
        return field, sweeps, oscillated

    theta = problem.theta
    field, sweeps, osc = run(theta)
    restarted = False
    if osc and theta < 1.0:
        field, more, _ = run(1.0)
        sweeps += more
        theta = 1.0
        restarted = True
    info = {"theta": theta, "sweeps": sweeps, "restarted": restarted}
    return (field, info) if return_info else field
