"""Scenario bundles: named instances, JSON loading, seeded randomization.

Everything the test-suite and the command line agree on lives here, so a
property suite and a CLI run with the same seed see byte-identical data.
A tree scenario bundles (tree, terminal, generator, barriers, eta); the
obstacle/evolution entries bundle a discrete problem with its companion
chain so cross-validation runs need no further wiring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .bsde import Generator
from .errors import ConfigError
from .lattice import AdaptedProcess, FiltrationTree, TimeGrid
from .markov_vi import MarkovScenario, ObstacleProblem, ParabolicObstacleProblem
from .rbsde import BarrierPair, default_eta

__all__ = [
    "Scenario",
    "ViBundle",
    "EvolveBundle",
    "scenario_from_json",
    "scenario_to_json",
    "named_scenario",
    "scenario_names",
    "random_tree",
    "random_adapted",
    "random_martingale",
    "random_reflected_scenario",
    "random_ordered_pair",
    "random_perturbation_pair",
]


@dataclass(frozen=True)
class Scenario:
    """A solvable tree instance: everything the backward solvers consume."""

    name: str
    tree: FiltrationTree
    terminal: object
    generator: Generator
    barriers: BarrierPair | None = None
    eta: AdaptedProcess | None = None
    tol: float = 1e-12
    experiment: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ViBundle:
    """Stationary obstacle problem plus the chain that discretizes the
    same complementarity system (None when no bridge is intended)."""

    name: str
    problem: ObstacleProblem
    chain: MarkovScenario | None = None
    n_penalty: tuple = (100.0, 10000.0)
    tol: float = 1e-10


@dataclass(frozen=True)
class EvolveBundle:
    """Parabolic obstacle problem with the matching unrolled-walk data."""

    name: str
    problem: ParabolicObstacleProblem
    chain: MarkovScenario | None = None
    depth: int = 0
    start: int = 0
    x0_index: int = 0


# ---------------------------------------------------------------------------
# JSON form


def _layer_process(tree: FiltrationTree, values, what: str) -> AdaptedProcess:
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != (tree.K + 1,):
        raise ConfigError(f"{what}: per-layer list needs K+1 = {tree.K + 1} entries")
    return AdaptedProcess(vals[tree.layer])


def _parse_tree(obj: Mapping) -> FiltrationTree:
    kind = obj.get("kind")
    try:
        if kind == "chain":
            return FiltrationTree.chain(int(obj["K"]), float(obj["dt"]))
        if kind == "binary":
            return FiltrationTree.binary(int(obj["depth"]), float(obj["dt"]),
                                         float(obj.get("p", 0.5)))
        if kind == "random":
            rng = np.random.default_rng(int(obj["seed"]))
            return FiltrationTree.random(rng, int(obj["depth"]), float(obj["dt"]),
                                         int(obj.get("max_branch", 3)))
        if kind == "explicit":
            parent = obj["parent"]
            grid = TimeGrid(K=int(max(_depths(parent))), dt=float(obj["dt"]))
            return FiltrationTree(grid, parent, obj["edge_prob"])
    except KeyError as e:
        raise ConfigError(f"tree spec is missing field {e}") from e
    raise ConfigError(f"unknown tree kind {kind!r}")


def _depths(parent) -> list[int]:
    out = [0] * len(parent)
    for i, p in enumerate(parent):
        if i:
            out[i] = out[p] + 1
    return out


def _parse_generator(obj) -> Generator:
    if obj is None:
        return Generator.constant(0.0)
    kind = obj.get("kind")
    try:
        if kind == "constant":
            return Generator.constant(float(obj["c"]))
        if kind == "linear":
            return Generator.linear(float(obj["a"]), float(obj["b"]))
        if kind == "monotone_poly":
            return Generator.monotone_poly([float(c) for c in obj["coeffs"]],
                                           float(obj.get("mu", 0.0)))
        if kind == "tabulated":
            nodes = {int(k): v for k, v in obj.get("nodes", {}).items()}
            return Generator.tabulated(obj["y_grid"], nodes, obj.get("default"))
    except KeyError as e:
        raise ConfigError(f"generator spec is missing field {e}") from e
    raise ConfigError(f"unknown generator kind {kind!r}")


def _parse_barrier_side(tree, spec, what):
    if spec is None:
        return None
    if isinstance(spec, Mapping):
        if "layers" not in spec:
            raise ConfigError(f"{what}: barrier object form needs a 'layers' list")
        return _layer_process(tree, spec["layers"], what)
    if np.isscalar(spec):
        return AdaptedProcess(np.full(tree.n_nodes, float(spec)))
    vals = np.asarray(spec, dtype=np.float64)
    if vals.shape != (tree.n_nodes,):
        raise ConfigError(f"{what}: per-node list needs {tree.n_nodes} entries")
    return AdaptedProcess(vals)


def _parse_terminal(tree, spec):
    if spec is None:
        return 0.0
    if isinstance(spec, Mapping):
        return {int(k): float(v) for k, v in spec.items()}
    if np.isscalar(spec):
        return float(spec)
    vals = [float(v) for v in spec]
    if len(vals) != len(tree.leaves):
        raise ConfigError(f"terminal: per-leaf list needs {len(tree.leaves)} entries")
    return {int(leaf): v for leaf, v in zip(tree.leaves, vals)}


def scenario_from_json(source) -> Scenario:
    """Build a tree scenario from a JSON string or parsed mapping.

    Schema (all sections but "tree" optional):
      tree:      {kind: chain|binary|random|explicit, ...}
      generator: {kind: constant|linear|monotone_poly|tabulated, ...}
      terminal:  scalar | per-leaf list | {node: value}
      barriers:  {lower: null|scalar|per-node list|{"layers": [...]}, upper: ...}
      eta:       null | scalar | per-node list
      tol, name, experiment
    """
    if isinstance(source, (str, bytes)):
        try:
            obj = json.loads(source)
        except json.JSONDecodeError as e:
            raise ConfigError(f"scenario JSON does not parse: {e}") from e
    else:
        obj = source
    if "tree" not in obj:
        raise ConfigError("scenario needs a 'tree' section")
    tree = _parse_tree(obj["tree"])
    gen = _parse_generator(obj.get("generator"))
    terminal = _parse_terminal(tree, obj.get("terminal"))
    barriers = None
    bspec = obj.get("barriers")
    if bspec is not None:
        lo = _parse_barrier_side(tree, bspec.get("lower"), "lower")
        hi = _parse_barrier_side(tree, bspec.get("upper"), "upper")
        barriers = BarrierPair(lo, hi)
    eta = None
    espec = obj.get("eta")
    if espec is not None:
        if np.isscalar(espec):
            eta = AdaptedProcess(np.full(tree.n_nodes, float(espec)))
        else:
            vals = np.asarray(espec, dtype=np.float64)
            if vals.shape != (tree.n_nodes,):
                raise ConfigError(f"eta: per-node list needs {tree.n_nodes} entries")
            eta = AdaptedProcess(vals)
    return Scenario(name=str(obj.get("name", "unnamed")), tree=tree,
                    terminal=terminal, generator=gen, barriers=barriers, eta=eta,
                    tol=float(obj.get("tol", 1e-12)),
                    experiment=dict(obj.get("experiment", {})))


def scenario_to_json(sc: Scenario) -> str:
    """Serialize with the tree in explicit form; inverse of the loader up
    to tree-construction shorthand.  Generators built from the symbolic
    constructors reload; hand-written closures dump as an opaque record
    the loader refuses."""
    obj = {
        "name": sc.name,
        "tree": {
            "kind": "explicit",
            "dt": sc.tree.dt,
            "parent": [int(p) for p in sc.tree.parent],
            "edge_prob": [float(p) for p in sc.tree.edge_prob],
        },
        "generator": (dict(sc.generator.spec) if sc.generator.spec is not None
                      else {"kind": "opaque", "label": sc.generator.label}),
        "tol": sc.tol,
        "experiment": sc.experiment,
    }
    if isinstance(sc.terminal, Mapping):
        obj["terminal"] = {str(k): float(v) for k, v in sc.terminal.items()}
    elif np.isscalar(sc.terminal):
        obj["terminal"] = float(sc.terminal)
    if sc.barriers is not None:
        obj["barriers"] = {
            "lower": None if sc.barriers.lower is None else list(map(float, sc.barriers.lower.values)),
            "upper": None if sc.barriers.upper is None else list(map(float, sc.barriers.upper.values)),
        }
    if sc.eta is not None:
        obj["eta"] = list(map(float, sc.eta.values))
    return json.dumps(obj, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# named instances


def _oscillating_barriers(K: int) -> Scenario:
    """Barriers whose lower envelope oscillates like (1-t)cos(pi/(1-t))
    before t = 1, with unbounded discrete variation in the refinement
    limit.  Grid [0, 2], dt = 2/K."""
    dt = 2.0 / K
    t = dt * np.arange(K + 1)
    before = t < 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        wave = np.where(before, (1.0 - t) * np.cos(np.pi / np.where(before, 1.0 - t, 1.0)), 0.0)
    lower = np.where(before, wave, 0.0)
    upper = np.where(before, wave + 0.5 * (1.0 - t), 1.0)
    tree = FiltrationTree.chain(K, dt)
    return Scenario(
        name=f"dex1-grid{K}",
        tree=tree,
        terminal=0.0,
        generator=Generator.constant(0.0),
        barriers=BarrierPair(_layer_process(tree, lower, "lower"),
                             _layer_process(tree, upper, "upper")),
        experiment={"variation_until": 1.0},
    )


def _pinching_cone() -> Scenario:
    """Chain on [0, 2], dt = 0.1: barriers -t and +t while t < 1, both 0
    afterwards.  Pinched at the root and from t = 1 on; the workhorse for
    the non-semimartingale verifier."""
    K, dt = 20, 0.1
    t = dt * np.arange(K + 1)
    open_cone = (t > 0) & (t < 1.0)
    lower = np.where(open_cone, -t, 0.0)
    upper = np.where(open_cone, t, 0.0)
    tree = FiltrationTree.chain(K, dt)
    return Scenario(
        name="dex2",
        tree=tree,
        terminal=0.0,
        generator=Generator.constant(0.0),
        barriers=BarrierPair(_layer_process(tree, lower, "lower"),
                             _layer_process(tree, upper, "upper")),
        experiment={"candidate_scales": [0.0, 0.5]},
    )


def pinching_cone_candidate(r: float) -> AdaptedProcess:
    """The spurious family Y^r: ride the upper barrier until r, stay flat
    until the cone closes, then drop to zero.  r = 0 is the genuine
    solution; r in (0, 1) respects the sandwich and the dynamics yet fails
    minimality at the closing time, where the drop r happens strictly
    above the lower barrier."""
    sc = _pinching_cone()
    t = sc.tree.dt * sc.tree.layer
    vals = np.where(t < 1.0, np.minimum(t, float(r)), 0.0)
    return AdaptedProcess(vals)


def _binary_game() -> Scenario:
    tree = FiltrationTree.binary(2, 1.0)
    lo = np.full(tree.n_nodes, -0.5)
    hi = np.full(tree.n_nodes, 0.5)
    lo[tree.leaves] = -1.0
    hi[tree.leaves] = 1.0
    xi = {int(l): v for l, v in zip(tree.leaves, [1.0, 1.0, -1.0, -1.0])}
    return Scenario(name="binary-game", tree=tree, terminal=xi,
                    generator=Generator.constant(0.0),
                    barriers=BarrierPair(AdaptedProcess(lo), AdaptedProcess(hi)),
                    experiment={"eps": [0.25, 0.1]})


def _pinched_chain() -> Scenario:
    K, dt = 4, 0.25
    tree = FiltrationTree.chain(K, dt)
    w = 0.3 * np.sin(np.pi * dt * np.arange(K + 1) / 2.0)
    proc = _layer_process(tree, w, "pinch")
    return Scenario(name="pinched-chain", tree=tree, terminal=float(w[-1]),
                    generator=Generator.constant(0.0),
                    barriers=BarrierPair(proc, proc))


def _predictable_drop() -> Scenario:
    """Binary depth 2 whose lower barrier drops predictably after the
    first step, breaking the predictable-projection condition; exact
    saddle points need not exist here but epsilon-saddles do."""
    tree = FiltrationTree.binary(2, 0.5)
    lo = np.array([0.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0])
    hi = np.array([0.05, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    xi = {int(l): v for l, v in zip(tree.leaves, [0.6, -0.8, 0.4, -0.2])}
    return Scenario(name="predictable-drop", tree=tree, terminal=xi,
                    generator=Generator.constant(0.0),
                    barriers=BarrierPair(AdaptedProcess(lo), AdaptedProcess(hi)),
                    experiment={"eps": [0.5, 0.1, 0.01]})


def _tent(x):
    return np.maximum(0.0, 0.25 - np.abs(x - 0.5))


def _walk5() -> MarkovScenario:
    """Five-state absorbed walk with tent obstacles and a running cost."""
    return MarkovScenario.walk_on_interval(
        4,
        reward=lambda x: -0.5 + 0.0 * x,
        lower=_tent,
        upper=lambda x: _tent(x) + 0.2,
        boundary=0.0,
        terminal=lambda x: _tent(x) + 0.1,
    )


def _bridge_load(x, u):
    return 0.04 * (x - 0.5) - 0.01 * u


def _bridge(k: int) -> ViBundle:
    """Obstacle problem and walk discretizing the same complementarity
    system: tight two-sided obstacles around a sign-changing load.  The
    free membrane peaks near |u| = 6.4e-4, so the 4e-4 band is partially
    active on both sides with contact-force density about 0.02, small
    enough for the penalty gap at n = 1e5 to sit well under 1e-6."""
    band = 4e-4
    problem = ObstacleProblem.on_unit_interval(k, f_hat=_bridge_load,
                                               lower=-band, upper=band)
    chain = MarkovScenario.walk_on_interval(2 ** k, lower=-band, upper=band,
                                            boundary=0.0, f_hat=_bridge_load,
                                            mu=-0.01)
    return ViBundle(name=f"bridge-k{k}", problem=problem, chain=chain,
                    n_penalty=(1e2, 1e3, 1e4, 1e5))


def _membrane_tent() -> ViBundle:
    # point contact force at the kink: the penalty gap scales like 1/(n h),
    # hence the huge n; tol loosened to the residual floor that implies
    problem = ObstacleProblem.on_unit_interval(
        6, lower=lambda x: np.maximum(0.3 - 2.0 * np.abs(x - 0.5), 0.0))
    return ViBundle(name="membrane-tent", problem=problem,
                    n_penalty=(1e8, 1e9), tol=1e-8)


_GAME_OPTION_K = 5
_GAME_OPTION_DEPTH = 10
_GAME_OPTION_SPREAD = 0.02


def _quartic(x):
    return 50.0 * (x - 0.5) ** 4


def _game_option() -> EvolveBundle:
    """Two-obstacle evolution whose value is strictly interior at the
    starting point: convex exercise payoff, capped by a fixed spread."""
    k = _GAME_OPTION_K
    h = 1.0 / 2 ** k
    depth = _GAME_OPTION_DEPTH
    T = depth * h * h
    x = h * np.arange(1, 2 ** k)
    problem = ParabolicObstacleProblem.on_unit_interval(
        k, T, 40, terminal=_quartic(x),
        lower=lambda t, xx: _quartic(xx),
        upper=lambda t, xx: _quartic(xx) + _GAME_OPTION_SPREAD)
    chain = MarkovScenario.walk_on_interval(
        2 ** k, lower=_quartic, upper=lambda xx: _quartic(xx) + _GAME_OPTION_SPREAD,
        boundary=_quartic, terminal=_quartic)
    start = 2 ** k // 2
    return EvolveBundle(name="game-option", problem=problem, chain=chain,
                        depth=depth, start=start, x0_index=start - 1)


def _heat_free() -> EvolveBundle:
    x = np.arange(1, 2 ** 5) / 2 ** 5
    problem = ParabolicObstacleProblem.on_unit_interval(
        5, 0.05, 20, terminal=np.sin(np.pi * x))
    return EvolveBundle(name="heat-free", problem=problem)


_REGISTRY: dict[str, Callable[[], object]] = {
    "dex2": _pinching_cone,
    "dex1-grid100": lambda: _oscillating_barriers(100),
    "dex1-grid200": lambda: _oscillating_barriers(200),
    "dex1-grid400": lambda: _oscillating_barriers(400),
    "binary-game": _binary_game,
    "pinched-chain": _pinched_chain,
    "predictable-drop": _predictable_drop,
    "walk5": _walk5,
    "bridge-k5": lambda: _bridge(5),
    "bridge-k6": lambda: _bridge(6),
    "bridge-k7": lambda: _bridge(7),
    "membrane-tent": _membrane_tent,
    "game-option": _game_option,
    "heat-free": _heat_free,
}


def scenario_names() -> list[str]:
    return sorted(_REGISTRY)


def named_scenario(name: str):
    """Look up a registry entry; the return type depends on the entry
    (tree Scenario, MarkovScenario, ViBundle or EvolveBundle)."""
    try:
        builder = _REGISTRY[name]
    except KeyError:
        known = ", ".join(scenario_names())
        raise ConfigError(f"unknown scenario {name!r}; known: {known}") from None
    return builder()


# ---------------------------------------------------------------------------
# seeded randomization (shared by property suites and the CLI)


def random_tree(rng: np.random.Generator, depth: int, dt: float = 0.25) -> FiltrationTree:
    """Mixed diet: chains rarely, binaries often, general trees sometimes."""
    roll = rng.integers(0, 4)
    if roll == 0:
        return FiltrationTree.chain(depth, dt)
    if roll <= 2:
        return FiltrationTree.binary(depth, dt, p=float(rng.uniform(0.25, 0.75)))
    return FiltrationTree.random(rng, depth, dt)


def random_adapted(rng: np.random.Generator, tree: FiltrationTree,
                   start: float = 0.0, scale: float = 0.5) -> AdaptedProcess:
    """Random adapted walk: independent increments down every edge."""
    vals = np.zeros(tree.n_nodes)
    vals[0] = start
    for i in range(1, tree.n_nodes):
        vals[i] = vals[tree.parent[i]] + scale * rng.normal()
    return AdaptedProcess(vals)


def random_martingale(rng: np.random.Generator, tree: FiltrationTree,
                      start: float = 0.0, scale: float = 0.5) -> AdaptedProcess:
    """Mean-zero child increments under the edge weights."""
    vals = np.zeros(tree.n_nodes)
    vals[0] = start
    for node in range(tree.n_nodes):
        kids = tree.children[node]
        if kids.size == 0:
            continue
        raw = scale * rng.normal(size=kids.size)
        raw -= np.dot(tree.edge_prob[kids], raw)
        vals[kids] = vals[node] + raw
    return AdaptedProcess(vals)


def _random_generator(rng: np.random.Generator,
                      mu_range: tuple[float, float] = (-1.0, 0.0)) -> Generator:
    a = float(rng.uniform(*mu_range))
    b = float(rng.uniform(-0.5, 0.5))
    return Generator.linear(a, b)


def random_reflected_scenario(rng: np.random.Generator, depth: int = 3,
                              dt: float = 0.25, projection_safe: bool = False,
                              mu_range: tuple[float, float] = (-1.0, 0.0),
                              name: str = "random") -> Scenario:
    """Two-sided scenario with strictly ordered barriers and admissible
    terminal data.

    With ``projection_safe`` the lower barrier is a submartingale and the
    upper a supermartingale (a drifted common martingale), which makes
    predictable barrier jumps favorable and exact saddle points exist;
    the barriers then pinch at the horizon.  Otherwise the barriers are
    independent drifted walks with a guaranteed gap.
    """
    tree = random_tree(rng, depth, dt)
    if projection_safe:
        M = random_martingale(rng, tree, start=float(rng.uniform(-0.3, 0.3)))
        c_lo = float(rng.uniform(0.2, 0.8))
        c_hi = float(rng.uniform(0.2, 0.8))
        to_go = (tree.K - tree.layer) * dt
        lo = AdaptedProcess(M.values - c_lo * to_go)
        hi = AdaptedProcess(M.values + c_hi * to_go)
        xi = {int(l): float(M.values[l]) for l in tree.leaves}
    else:
        W = random_adapted(rng, tree, start=float(rng.uniform(-0.3, 0.3)))
        gap_lo = rng.uniform(0.05, 0.8, tree.n_nodes)
        gap_hi = rng.uniform(0.05, 0.8, tree.n_nodes)
        lo = AdaptedProcess(W.values - gap_lo)
        hi = AdaptedProcess(W.values + gap_hi)
        xi = {}
        for l in tree.leaves:
            l = int(l)
            xi[l] = float(np.clip(W.values[l] + 0.3 * rng.normal(),
                                  lo.values[l], hi.values[l]))
    return Scenario(name=name, tree=tree, terminal=xi,
                    generator=_random_generator(rng, mu_range),
                    barriers=BarrierPair(lo, hi))


def random_ordered_pair(rng: np.random.Generator, depth: int = 4,
                        dt: float = 0.25) -> tuple[Scenario, Scenario]:
    """Scenario pair with pointwise ordered data: terminal, driver and
    both barriers of the second dominate the first."""
    base = random_reflected_scenario(rng, depth, dt)
    tree = base.tree
    lift_lo = rng.uniform(0.0, 0.3, tree.n_nodes)
    lift_hi = lift_lo + rng.uniform(0.0, 0.3, tree.n_nodes)
    lo2 = AdaptedProcess(base.barriers.lower.values + lift_lo)
    hi2 = AdaptedProcess(base.barriers.upper.values + lift_hi)
    c = float(rng.uniform(0.0, 0.4))
    a = base.generator.mu
    b = float(base.generator(0, 0, 0.0))
    gen2 = Generator.linear(a, b + c)
    xi2 = {}
    for l, v in base.terminal.items():
        bump = float(rng.uniform(0.0, 0.3))
        xi2[l] = float(min(max(v + bump, lo2.values[l]), hi2.values[l]))
    second = Scenario(name=base.name + "-upper", tree=tree, terminal=xi2,
                      generator=gen2, barriers=BarrierPair(lo2, hi2))
    return base, second


def random_perturbation_pair(rng: np.random.Generator, depth: int = 3,
                             dt: float = 0.25) -> tuple[Scenario, Scenario]:
    """Same tree, independently bumped data in both directions; for
    stability estimates rather than comparison."""
    base = random_reflected_scenario(rng, depth, dt)
    tree = base.tree
    wiggle = 0.2 * rng.normal(size=tree.n_nodes)
    lo2 = AdaptedProcess(base.barriers.lower.values + wiggle - 0.05)
    hi2 = AdaptedProcess(base.barriers.upper.values + wiggle + 0.05)
    b2 = float(base.generator(0, 0, 0.0)) + float(rng.uniform(-0.3, 0.3))
    gen2 = Generator.linear(base.generator.mu, b2)
    xi2 = {}
    for l, v in base.terminal.items():
        l = int(l)
        xi2[l] = float(np.clip(v + 0.2 * rng.normal(),
                               lo2.values[l], hi2.values[l]))
    second = Scenario(name=base.name + "-shifted", tree=tree, terminal=xi2,
                      generator=gen2, barriers=BarrierPair(lo2, hi2))
    return base, second


def default_scenario_eta(sc: Scenario) -> AdaptedProcess:
    return sc.eta if sc.eta is not None else default_eta(sc.tree)
