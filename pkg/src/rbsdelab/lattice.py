"""Finite filtered probability spaces and the processes living on them.

A :class:`FiltrationTree` is a finite event tree: nodes at layer k are the
atoms of F_k, edges carry strictly positive one-step probabilities, and
every leaf sits at the common horizon layer K.  Adapted processes assign
one real value per node, stopping rules flag per node whether a path may
stop there.  On this substrate the module provides the classical
discrete-time toolkit: one-step conditional expectation, the Doob
decomposition, Snell envelopes between stopping rules, the stopped-supremum
norm sup_tau E|Y_tau| and the predictable projection.

Conventions used throughout the package:

* the discrete left limit X_{t-} at step k is the value at layer k-1
  (X_{0-} = X_0);
* predictable means F_{k-1}-measurable at step k; increments attributed to
  the step k -> k+1 are stored on the layer-(k+1) nodes;
* probabilities are strictly positive, so essential suprema coincide with
  pathwise suprema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import RuleOrderingError, TreeStructureError

__all__ = [
    "TimeGrid",
    "FiltrationTree",
    "AdaptedProcess",
    "StoppingRule",
    "DoobDecomposition",
    "conditional_expectation",
    "doob_decompose",
    "snell_envelope",
    "class_d_norm",
    "predictable_projection",
    "tree_to_json",
    "tree_from_json",
    "process_to_json",
    "process_from_json",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_k = k*dt, k = 0..K."""

    K: int
    dt: float

    def __post_init__(self) -> None:
        if self.K < 0:
            raise TreeStructureError("step count K must be >= 0")
        if not self.dt > 0:
            raise TreeStructureError("dt must be > 0")

    @property
    def horizon(self) -> float:
        return self.K * self.dt

    def t(self, k: int) -> float:
        return k * self.dt


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class FiltrationTree:
    """Finite event tree carrying the filtration.

    Nodes are integers 0..n-1 with the root at 0, ordered so that layers
    are contiguous and nondecreasing.  Construction validates strict
    positivity of edge probabilities, per-node normalisation, and that all
    leaves sit exactly at layer K of the attached grid.

    Parameters
    ----------
    grid : TimeGrid
        Time discretisation; leaves must live at layer ``grid.K``.
    parent : sequence of int
        Parent node id per node, -1 for the root.
    edge_prob : sequence of float
        Probability of the edge from the parent, 1.0 for the root.
    """

    def __init__(self, grid: TimeGrid, parent: Sequence[int], edge_prob: Sequence[float]):
        parent = np.asarray(parent, dtype=np.int64)
        edge_prob = np.asarray(edge_prob, dtype=np.float64)
        n = parent.shape[0]
        if n == 0:
            raise TreeStructureError("tree must contain a root")
        if parent[0] != -1:
            raise TreeStructureError("node 0 must be the root (parent -1)")
        if np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, n)):
            raise TreeStructureError("parents must precede children in the node order")

        layer = np.zeros(n, dtype=np.int64)
        layer[1:] = -1
        for i in range(1, n):
            layer[i] = layer[parent[i]] + 1

        children: list[list[int]] = [[] for _ in range(n)]
        for i in range(1, n):
            children[parent[i]].append(i)

        if not np.isclose(edge_prob[0], 1.0):
            raise TreeStructureError("root edge probability must be 1.0")
        if np.any(edge_prob <= 0):
            raise TreeStructureError("edge probabilities must be strictly positive")
        for i, kids in enumerate(children):
            if kids and not np.isclose(edge_prob[kids].sum(), 1.0, atol=1e-12):
                raise TreeStructureError(f"edge probabilities at node {i} do not sum to 1")

        leaves = np.array([i for i in range(n) if not children[i]], dtype=np.int64)
        if np.any(layer[leaves] != grid.K):
            raise TreeStructureError("every leaf must sit at layer K")

        path_prob = np.ones(n)
        for i in range(1, n):
            path_prob[i] = path_prob[parent[i]] * edge_prob[i]

        self.grid = grid
        self.parent = _as_readonly(parent)
        self.edge_prob = _as_readonly(edge_prob)
        self.layer = _as_readonly(layer)
        self.children = tuple(_as_readonly(np.array(k, dtype=np.int64)) for k in children)
        self.path_prob = _as_readonly(path_prob)
        self.leaves = _as_readonly(leaves)
        self.layers = tuple(
            _as_readonly(np.flatnonzero(layer == k)) for k in range(grid.K + 1)
        )

    # -- basic queries ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.parent.shape[0]

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def dt(self) -> float:
        return self.grid.dt

    def is_leaf(self, node: int) -> bool:
        return self.children[node].size == 0

    def path_to(self, node: int) -> list[int]:
        """Node ids from the root down to ``node`` inclusive."""
        path = [node]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]

    def subtree(self, node: int) -> list[int]:
        """Node ids of the subtree rooted at ``node`` (preorder)."""
        out = [node]
        stack = [node]
        while stack:
            for c in self.children[stack.pop()]:
                out.append(int(c))
                stack.append(int(c))
        return out

    def leaves_under(self, node: int) -> list[int]:
        return [i for i in self.subtree(node) if self.is_leaf(i)]

    # -- constructors ----------------------------------------------------

    @staticmethod
    def chain(K: int, dt: float) -> "FiltrationTree":
        """Deterministic chain: one node per layer (trivial filtration)."""
        parent = [-1] + list(range(K))
        prob = [1.0] * (K + 1)
        return FiltrationTree(TimeGrid(K, dt), parent, prob)

    @staticmethod
    def binary(depth: int, dt: float, p: float = 0.5) -> "FiltrationTree":
        """Full binary tree of the given depth with branch probability p."""
        if not 0 < p < 1:
            raise TreeStructureError("branch probability must lie in (0,1)")
        parent = [-1]
        prob = [1.0]
        frontier = [0]
        for _ in range(depth):
            nxt = []
            for u in frontier:
                for q in (p, 1.0 - p):
                    parent.append(u)
                    prob.append(q)
                    nxt.append(len(parent) - 1)
            frontier = nxt
        return FiltrationTree(TimeGrid(depth, dt), parent, prob)

    @staticmethod
    def random(rng: np.random.Generator, depth: int, dt: float,
               max_branch: int = 3) -> "FiltrationTree":
        """Random tree with 1..max_branch children per node.

        Branch probabilities are drawn from a Dirichlet-like normalised
        uniform sample bounded away from zero, keeping every path
        non-negligible.
        """
        parent = [-1]
        prob = [1.0]
        frontier = [0]
        for _ in range(depth):
            nxt = []
            for u in frontier:
                width = int(rng.integers(1, max_branch + 1))
                raw = rng.uniform(0.2, 1.0, size=width)
                weights = raw / raw.sum()
                for q in weights:
                    parent.append(u)
                    prob.append(float(q))
                    nxt.append(len(parent) - 1)
            frontier = nxt
        return FiltrationTree(TimeGrid(depth, dt), parent, prob)


@dataclass(frozen=True)
class AdaptedProcess:
    """One real value per tree node; adaptedness is structural."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise TreeStructureError("adapted process values must be finite")
        object.__setattr__(self, "values", _as_readonly(v))

    def __getitem__(self, node: int) -> float:
        return float(self.values[node])

    def __len__(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def constant(tree: FiltrationTree, c: float) -> "AdaptedProcess":
        return AdaptedProcess(np.full(tree.n_nodes, float(c)))

    @staticmethod
    def from_function(tree: FiltrationTree,
                      fn: Callable[[int, int], float]) -> "AdaptedProcess":
        """Build from fn(layer, node)."""
        vals = np.array([fn(int(tree.layer[i]), i) for i in range(tree.n_nodes)])
        return AdaptedProcess(vals)

    @staticmethod
    def from_layer_function(tree: FiltrationTree,
                            fn: Callable[[float], float]) -> "AdaptedProcess":
        """Deterministic time function evaluated on the grid, t_k = k*dt."""
        vals = np.array([fn(tree.grid.t(int(tree.layer[i]))) for i in range(tree.n_nodes)])
        return AdaptedProcess(vals)

    @staticmethod
    def from_leaf_values(tree: FiltrationTree,
                         leaf_values: Mapping[int, float] | Sequence[float],
                         fill: str = "condexp") -> "AdaptedProcess":
        """Terminal data extended to a full process.

        Leaf values may be a mapping {leaf id: value} or a sequence aligned
        with ``tree.leaves``.  Interior nodes are filled with backward
        conditional expectations (``fill="condexp"``, the martingale
        closure) or zeros (``fill="zero"``).
        """
        vals = np.zeros(tree.n_nodes)
        if isinstance(leaf_values, Mapping):
            for leaf, v in leaf_values.items():
                if not tree.is_leaf(int(leaf)):
                    raise TreeStructureError(f"node {leaf} is not a leaf")
                vals[int(leaf)] = float(v)
        else:
            seq = np.asarray(leaf_values, dtype=np.float64)
            if seq.shape[0] != tree.leaves.shape[0]:
                raise TreeStructureError("leaf value count mismatch")
            vals[tree.leaves] = seq
        if fill == "condexp":
            for k in range(tree.K - 1, -1, -1):
                for node in tree.layers[k]:
                    kids = tree.children[node]
                    vals[node] = float(np.dot(tree.edge_prob[kids], vals[kids]))
        return AdaptedProcess(vals)

    # small arithmetic helpers; heavy lifting stays in numpy space
    def shifted(self, c: float) -> "AdaptedProcess":
        return AdaptedProcess(self.values + c)

    def __add__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess(self.values + other.values)

    def __sub__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess(self.values - other.values)

    def abs(self) -> "AdaptedProcess":
        return AdaptedProcess(np.abs(self.values))


@dataclass(frozen=True)
class StoppingRule:
    """Stop flags per node; tau = first flagged node along each path.

    Flags strictly after the first one on a path are inert.  Every path
    must carry at least one flag, so tau <= K always.
    """

    stop: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop", _as_readonly(np.asarray(self.stop, dtype=bool)))

    @staticmethod
    def horizon(tree: FiltrationTree) -> "StoppingRule":
        flags = np.zeros(tree.n_nodes, dtype=bool)
        flags[tree.leaves] = True
        return StoppingRule(flags)

    @staticmethod
    def at_root(tree: FiltrationTree) -> "StoppingRule":
        flags = np.zeros(tree.n_nodes, dtype=bool)
        flags[0] = True
        flags[tree.leaves] = True
        return StoppingRule(flags)

    @staticmethod
    def at_layer(tree: FiltrationTree, k: int) -> "StoppingRule":
        flags = np.zeros(tree.n_nodes, dtype=bool)
        flags[tree.layer == k] = True
        flags[tree.leaves] = True
        return StoppingRule(flags)

    @staticmethod
    def hitting(tree: FiltrationTree, mask: np.ndarray) -> "StoppingRule":
        """First time the per-node condition holds, capped at the horizon."""
        flags = np.asarray(mask, dtype=bool).copy()
        flags[tree.leaves] = True
        return StoppingRule(flags)

    def validate(self, tree: FiltrationTree) -> None:
        if self.stop.shape[0] != tree.n_nodes:
            raise TreeStructureError("stopping rule size mismatch")
        if not self.reached(tree)[tree.leaves].all():
            raise TreeStructureError("some path never stops")

    def reached(self, tree: FiltrationTree) -> np.ndarray:
        """Bool per node: rule fired at this node or one of its ancestors."""
        out = np.zeros(tree.n_nodes, dtype=bool)
        for i in range(tree.n_nodes):
            p = tree.parent[i]
            out[i] = self.stop[i] or (p >= 0 and out[p])
        return out

    def fires_at(self, tree: FiltrationTree) -> np.ndarray:
        """Node ids where the rule actually fires (first flag on the path)."""
        reached = self.reached(tree)
        out = []
        for i in range(tree.n_nodes):
            p = tree.parent[i]
            if self.stop[i] and not (p >= 0 and reached[p]):
                out.append(i)
        return np.array(out, dtype=np.int64)

    def stop_layer_by_leaf(self, tree: FiltrationTree) -> dict[int, int]:
        """Firing layer along the path to each leaf."""
        out = {}
        for leaf in tree.leaves:
            for node in tree.path_to(int(leaf)):
                if self.stop[node]:
                    out[int(leaf)] = int(tree.layer[node])
                    break
        return out

    def stop_node_by_leaf(self, tree: FiltrationTree) -> dict[int, int]:
        out = {}
        for leaf in tree.leaves:
            for node in tree.path_to(int(leaf)):
                if self.stop[node]:
                    out[int(leaf)] = int(node)
                    break
        return out

    def pathwise_le(self, tree: FiltrationTree, other: "StoppingRule") -> bool:
        a = self.stop_layer_by_leaf(tree)
        b = other.stop_layer_by_leaf(tree)
        return all(a[leaf] <= b[leaf] for leaf in a)


@dataclass(frozen=True)
class DoobDecomposition:
    """X = X_0 + sum(dM) + sum(dV) with dV predictable, dM mean-zero.

    Increments for the step k -> k+1 are stored on the layer-(k+1) nodes;
    the root entries are zero.  ``dV`` is constant across siblings.
    """

    x0: float
    dm: np.ndarray
    dv: np.ndarray

    def reconstruct(self, tree: FiltrationTree) -> AdaptedProcess:
        vals = np.zeros(tree.n_nodes)
        vals[0] = self.x0
        for i in range(1, tree.n_nodes):
            vals[i] = vals[tree.parent[i]] + self.dm[i] + self.dv[i]
        return AdaptedProcess(vals)


# ---------------------------------------------------------------------------
# core operations


def _condexp_next(tree: FiltrationTree, values: np.ndarray, node: int) -> float:
    kids = tree.children[node]
    return float(np.dot(tree.edge_prob[kids], values[kids]))


def conditional_expectation(tree: FiltrationTree, X: AdaptedProcess,
                            k: int) -> AdaptedProcess:
    """One-step conditional expectation E[X_{k+1} | F_k].

    Returns a copy of X in which every layer-k value is replaced by the
    probability mix of its children's X values; all other layers are left
    untouched.  Only the layer-k restriction carries the operation's
    meaning, the rest of the copy is a convenience.
    """
    if not 0 <= k < tree.K:
        raise TreeStructureError(f"layer {k} out of range for one-step expectation")
    vals = X.values.copy()
    for node in tree.layers[k]:
        vals[node] = _condexp_next(tree, X.values, node)
    return AdaptedProcess(vals)


def doob_decompose(tree: FiltrationTree, X: AdaptedProcess) -> DoobDecomposition:
    """Split X into martingale and predictable parts.

    dV_{k+1} = E[X_{k+1}|F_k] - X_k on all children of a layer-k node,
    dM_{k+1} = X_{k+1} - E[X_{k+1}|F_k].  Reconstruction is exact.
    """
    dm = np.zeros(tree.n_nodes)
    dv = np.zeros(tree.n_nodes)
    for node in range(tree.n_nodes):
        kids = tree.children[node]
        if kids.size == 0:
            continue
        ce = _condexp_next(tree, X.values, node)
        dv[kids] = ce - X.values[node]
        dm[kids] = X.values[kids] - ce
    return DoobDecomposition(x0=X[0], dm=_as_readonly(dm), dv=_as_readonly(dv))


def snell_envelope(tree: FiltrationTree, X: AdaptedProcess,
                   from_rule: StoppingRule, to_rule: StoppingRule) -> AdaptedProcess:
    """Smallest supermartingale dominating X between two stopping rules.

    S equals X where ``to_rule`` fires; on nodes where stopping is allowed
    (at or after ``from_rule``, strictly before ``to_rule``) it is
    max(X_k, E[S_{k+1}|F_k]); before ``from_rule`` it is the bare
    continuation value, so S at a from-node equals
    sup over rules from <= tau <= to of E[X_tau | F_from].
    Beyond ``to_rule`` the values are copies of X (never consumed).
    """
    from_rule.validate(tree)
    to_rule.validate(tree)
    if not from_rule.pathwise_le(tree, to_rule):
        raise RuleOrderingError("snell_envelope requires from <= to pathwise")
    from_reached = from_rule.reached(tree)
    to_reached = to_rule.reached(tree)
    vals = X.values.copy()
    for k in range(tree.K - 1, -1, -1):
        for node in tree.layers[k]:
            if to_reached[node]:
                continue
            cont = _condexp_next(tree, vals, node)
            if from_reached[node]:
                vals[node] = max(X.values[node], cont)
            else:
                vals[node] = cont
    return AdaptedProcess(vals)


def class_d_norm(tree: FiltrationTree, Y: AdaptedProcess,
                 alpha: StoppingRule | None = None,
                 beta: StoppingRule | None = None) -> float:
    """sup over rules alpha <= tau <= beta of E|Y_tau|.

    Finite spaces attain the supremum, so this is the expectation of the
    Snell envelope of |Y| sampled where alpha fires.  The rules default to
    the root germ and the horizon, giving the norm over all of [0, T].
    """
    if alpha is None:
        alpha = StoppingRule.at_root(tree)
    if beta is None:
        beta = StoppingRule.horizon(tree)
    S = snell_envelope(tree, Y.abs(), alpha, beta)
    nodes = alpha.fires_at(tree)
    return float(np.dot(tree.path_prob[nodes], S.values[nodes]))


def predictable_projection(tree: FiltrationTree, X: AdaptedProcess) -> AdaptedProcess:
    """Projection onto the previous layer: value at a layer-k node (k >= 1)
    is E[X_k | F_{k-1}], identical across siblings; the root keeps X_0."""
    vals = np.empty(tree.n_nodes)
    vals[0] = X.values[0]
    for node in range(tree.n_nodes):
        kids = tree.children[node]
        if kids.size:
            vals[kids] = _condexp_next(tree, X.values, node)
    return AdaptedProcess(vals)


# ---------------------------------------------------------------------------
# serialization (structured text, JSON-compatible)


def tree_to_json(tree: FiltrationTree) -> str:
    nodes = [
        {
            "id": i,
            "layer": int(tree.layer[i]),
            "parent": (None if i == 0 else int(tree.parent[i])),
            "prob": float(tree.edge_prob[i]),
        }
        for i in range(tree.n_nodes)
    ]
    return json.dumps({"dt": tree.dt, "nodes": nodes}, indent=2)


def tree_from_json(text: str) -> FiltrationTree:
    obj = json.loads(text)
    nodes = sorted(obj["nodes"], key=lambda d: d["id"])
    ids = [d["id"] for d in nodes]
    if ids != list(range(len(ids))):
        raise TreeStructureError("node ids must be 0..n-1")
    parent = [(-1 if d["parent"] is None else int(d["parent"])) for d in nodes]
    prob = [float(d["prob"]) for d in nodes]
    layers = [int(d["layer"]) for d in nodes]
    K = max(layers) if layers else 0
    tree = FiltrationTree(TimeGrid(K, float(obj["dt"])), parent, prob)
    if list(tree.layer) != layers:
        raise TreeStructureError("declared layers inconsistent with parents")
    return tree


def process_to_json(tree: FiltrationTree, X: AdaptedProcess) -> str:
    return json.dumps({str(i): float(X.values[i]) for i in range(tree.n_nodes)})


def process_from_json(tree: FiltrationTree, text: str | Mapping) -> AdaptedProcess:
    obj = json.loads(text) if isinstance(text, str) else text
    vals = np.zeros(tree.n_nodes)
    seen = np.zeros(tree.n_nodes, dtype=bool)
    for key, v in obj.items():
        i = int(key)
        vals[i] = float(v)
        seen[i] = True
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise TreeStructureError(f"process value missing for node {missing}")
    return AdaptedProcess(vals)
