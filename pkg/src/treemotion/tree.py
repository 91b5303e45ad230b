"""Transform tree and the four-stage velocity-policy composition.

The tree maps a configuration-space root through differentiable edges to
leaf spaces where policies live. One policy evaluation is:

1. forward pass: push coordinates root-to-leaves, recording each edge
   Jacobian;
2. leaf evaluation: each leaf reports its weighted force ``p = M v`` and
   weight ``M``;
3. backward pass: pull ``(p, M)`` to the root through ``J^T p`` and
   ``J^T M J``, reusing shared subpaths once;
4. resolve: solve ``M_root u = p_root`` for the configuration velocity.

``flat_solve`` answers the same weighted least-squares problem without
the tree recursion (explicit root-to-leaf compositions and stacked
normal equations) and is kept deliberately separate so the two routes
can be checked against each other.

Evaluation is a pure function of ``(tree, q, params)``: node states are
freshly allocated scratch owned by the caller, and concurrent
evaluations may share the read-only tree and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, SingularMetricError, StructureError
from .maps import DifferentiableMap
from .params import ParamRegistryBuilder, ParamVector
from .policies import LeafPolicy

#: absolute eigenvalue floor below which the root metric counts as singular
SINGULAR_EIG_TOL = 1e-12


@dataclass
class Edge:
    """Directed edge: ``map`` takes parent coordinates to child coordinates."""

    parent: int
    child: int
    map: DifferentiableMap

    def name(self) -> str:
        return f"edge {self.parent}->{self.child}"


@dataclass
class NodeState:
    """Per-node scratch filled in by the evaluation stages."""

    coord: np.ndarray | None = None
    jac_to_parent: np.ndarray | None = None
    pulled_force: np.ndarray | None = None
    pulled_metric: np.ndarray | None = None


class TransformTree:
    """Rooted tree of coordinate spaces connected by differentiable maps.

    ``node_dims[i]`` is the dimension of node ``i``; node 0 is the root
    (configuration space). Edges must point from lower to higher index,
    which makes ascending index order a topological order and lets the
    passes run as single array sweeps. Every childless node carries
    exactly one leaf policy.

    Construction validates the wiring and assigns parameter slices to
    every learnable component (edge maps in child order, then leaf
    components in leaf order), so ``init_params()`` yields the matching
    flat vector.
    """

    def __init__(self, node_dims, edges, leaf_policies):
        self.node_dims = [int(d) for d in node_dims]
        self.n_nodes = len(self.node_dims)
        if self.n_nodes == 0:
            raise StructureError("tree needs at least a root node")
        if any(d <= 0 for d in self.node_dims):
            raise StructureError("all node dimensions must be positive")
        self.root_dim = self.node_dims[0]

        self.edges: list[Edge] = sorted(edges, key=lambda e: e.child)
        seen_children = set()
        for e in self.edges:
            if not (0 <= e.parent < self.n_nodes and 0 <= e.child < self.n_nodes):
                raise StructureError(f"{e.name()} references unknown nodes")
            if e.parent >= e.child:
                raise StructureError(
                    f"{e.name()} violates topological order (parent < child)"
                )
            if e.child in seen_children:
                raise StructureError(f"node {e.child} has more than one parent")
            seen_children.add(e.child)
            if e.map.in_dim != self.node_dims[e.parent]:
                raise StructureError(
                    f"{e.name()}: map input dim {e.map.in_dim} != parent dim "
                    f"{self.node_dims[e.parent]}"
                )
            if e.map.out_dim != self.node_dims[e.child]:
                raise StructureError(
                    f"{e.name()}: map output dim {e.map.out_dim} != child dim "
                    f"{self.node_dims[e.child]}"
                )
        missing = set(range(1, self.n_nodes)) - seen_children
        if missing:
            raise StructureError(f"nodes {sorted(missing)} are not connected to the root")

        self._children: list[list[int]] = [[] for _ in range(self.n_nodes)]
        self._parent_edge: list[Edge | None] = [None] * self.n_nodes
        for e in self.edges:
            self._children[e.parent].append(e.child)
            self._parent_edge[e.child] = e

        self.leaves = sorted(
            i for i in range(self.n_nodes) if not self._children[i]
        )
        self.leaf_policies: dict[int, LeafPolicy] = dict(leaf_policies)
        for node in self.leaves:
            if node not in self.leaf_policies:
                raise StructureError(f"leaf node {node} has no policy")
        for node, pol in self.leaf_policies.items():
            if node not in self.leaves:
                raise StructureError(f"node {node} has a policy but is not a leaf")
            if pol.dim != self.node_dims[node]:
                raise StructureError(
                    f"leaf node {node}: policy dim {pol.dim} != node dim "
                    f"{self.node_dims[node]}"
                )

        # Root-to-leaf edge paths, used by the flat solver and the losses.
        self._paths: dict[int, list[Edge]] = {}
        for leaf in self.leaves:
            path = []
            node = leaf
            while node != 0:
                edge = self._parent_edge[node]
                path.append(edge)
                node = edge.parent
            self._paths[leaf] = path[::-1]

        # Parameter slice assignment (deterministic order).
        self._components: list[tuple[str, object]] = []
        offset = 0
        for e in self.edges:
            if e.map.n_params > 0:
                e.map.param_slice = slice(offset, offset + e.map.n_params)
                self._components.append((f"edge[{e.parent}->{e.child}].map", e.map))
                offset += e.map.n_params
        for node in self.leaves:
            for suffix, comp in self.leaf_policies[node].components():
                if comp.n_params > 0:
                    comp.param_slice = slice(offset, offset + comp.n_params)
                    self._components.append((f"leaf[{node}].{suffix}", comp))
                    offset += comp.n_params
        self.n_params = offset

    # -- introspection ------------------------------------------------------

    def children(self, node: int) -> list[int]:
        return self._children[node]

    def parent_edge(self, node: int) -> Edge | None:
        return self._parent_edge[node]

    def path_to(self, leaf: int) -> list[Edge]:
        return self._paths[leaf]

    def init_params(self) -> ParamVector:
        builder = ParamRegistryBuilder()
        for name, comp in self._components:
            init = comp.init_values()
            if init.size != (comp.param_slice.stop - comp.param_slice.start):
                raise StructureError(f"component {name} init size mismatch")
            builder.register(name, init)
        return builder.build()


# ---------------------------------------------------------------------------
# The four stages
# ---------------------------------------------------------------------------


def forward_pass(tree: TransformTree, q: np.ndarray,
                 params: ParamVector | None = None) -> list[NodeState]:
    """Push coordinates from the root to every node; record edge Jacobians."""
    q = np.asarray(q, dtype=float)
    if q.shape != (tree.root_dim,):
        raise StructureError(
            f"q has shape {q.shape}, root dimension is {tree.root_dim}"
        )
    states = [NodeState() for _ in range(tree.n_nodes)]
    states[0].coord = q
    for e in tree.edges:
        x = states[e.parent].coord
        y, J = e.map.value_and_jacobian(x, params)
        if y.shape != (tree.node_dims[e.child],):
            raise StructureError(
                f"{e.name()}: map produced shape {y.shape}, node dim is "
                f"{tree.node_dims[e.child]}"
            )
        states[e.child].coord = y
        states[e.child].jac_to_parent = J
    return states


def leaf_evaluate(tree: TransformTree, states: list[NodeState],
                  params: ParamVector | None = None) -> list[NodeState]:
    """Evaluate every leaf policy into ``(pulled_force, pulled_metric)``."""
    for node in tree.leaves:
        policy = tree.leaf_policies[node]
        edge = tree.parent_edge(node)
        parent_coord = states[edge.parent].coord if edge is not None else None
        p, M = policy.evaluate(states[node].coord, params, parent_coord=parent_coord)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(M))):
            raise NumericError(f"leaf {node} produced a non-finite policy output")
        states[node].pulled_force = p
        states[node].pulled_metric = M
    return states


def backward_pass(tree: TransformTree, states: list[NodeState]) -> list[NodeState]:
    """Pull forces/metrics to the root: ``p += J^T p_c``, ``M += J^T M_c J``."""
    for i in range(tree.n_nodes):
        if tree.children(i):
            d = tree.node_dims[i]
            states[i].pulled_force = np.zeros(d)
            states[i].pulled_metric = np.zeros((d, d))
    for e in reversed(tree.edges):
        J = states[e.child].jac_to_parent
        parent = states[e.parent]
        parent.pulled_force = parent.pulled_force + J.T @ states[e.child].pulled_force
        M = parent.pulled_metric + J.T @ states[e.child].pulled_metric @ J
        parent.pulled_metric = 0.5 * (M + M.T)
    return states


def _min_eig_or_nan(M: np.ndarray) -> float:
    if not np.all(np.isfinite(M)):
        return float("nan")
    return float(np.linalg.eigvalsh(M).min())


def _resolve_spd(M: np.ndarray, p: np.ndarray, regularization: float) -> np.ndarray:
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(p))):
        raise NumericError("root system contains non-finite entries")
    if regularization > 0.0:
        # Eigendecomposition pseudo-solve of (M + reg I) u = p.
        w, V = np.linalg.eigh(M)
        return V @ ((V.T @ p) / (w + regularization))
    try:
        factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        min_eig = _min_eig_or_nan(M)
        raise SingularMetricError(
            f"root metric is singular (Cholesky failed, min eigenvalue "
            f"{min_eig:.3e}); pass a positive regularization to proceed"
        ) from exc
    pivots = np.diagonal(factor[0])
    if float(pivots.min()) ** 2 < SINGULAR_EIG_TOL:
        min_eig = float(np.linalg.eigvalsh(M).min())
        if min_eig < SINGULAR_EIG_TOL:
            raise SingularMetricError(
                f"root metric min eigenvalue {min_eig:.3e} is below "
                f"{SINGULAR_EIG_TOL}; pass a positive regularization to proceed"
            )
    return scipy.linalg.cho_solve(factor, p, check_finite=False)


def resolve(states: list[NodeState], regularization: float = 0.0) -> np.ndarray:
    """Solve the root system ``(M_root + reg I) u = p_root``."""
    return _resolve_spd(states[0].pulled_metric, states[0].pulled_force,
                        regularization)


def evaluate_policy(tree: TransformTree, q, params: ParamVector | None = None,
                    regularization: float = 0.0) -> np.ndarray:
    """Configuration-space velocity produced by the composed subtask policies."""
    states = forward_pass(tree, q, params)
    leaf_evaluate(tree, states, params)
    backward_pass(tree, states)
    return resolve(states, regularization)


# ---------------------------------------------------------------------------
# Independent flat solver
# ---------------------------------------------------------------------------


def flat_solve(tree: TransformTree, q, params: ParamVector | None = None,
               regularization: float = 0.0) -> np.ndarray:
    """Solve the same weighted least squares without the tree recursion.

    Each root-to-leaf map is composed directly and its Jacobian chained
    by hand; the normal equations ``sum(J^T M J) u = sum(J^T M v)`` are
    assembled and solved with a plain dense solve. No propagation code
    from the staged algorithm is reused, so agreement between the two
    routes is a meaningful check.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (tree.root_dim,):
        raise StructureError(
            f"q has shape {q.shape}, root dimension is {tree.root_dim}"
        )
    d = tree.root_dim
    A = np.zeros((d, d))
    b = np.zeros(d)
    for leaf in tree.leaves:
        x = q
        prev = None
        J = np.eye(d)
        for edge in tree.path_to(leaf):
            prev = x
            x, J_edge = edge.map.value_and_jacobian(x, params)
            J = J_edge @ J
        p, M = tree.leaf_policies[leaf].evaluate(x, params, parent_coord=prev)
        A += J.T @ (M @ J)
        b += J.T @ p
    if regularization > 0.0:
        return np.linalg.solve(A + regularization * np.eye(d), b)
    min_eig = float(np.linalg.eigvalsh(0.5 * (A + A.T)).min())
    if min_eig < SINGULAR_EIG_TOL:
        raise SingularMetricError(
            f"stacked normal equations are singular (min eigenvalue {min_eig:.3e})"
        )
    return np.linalg.solve(A, b)


# ---------------------------------------------------------------------------
# Summed potential at the root
# ---------------------------------------------------------------------------


def leaf_potential_sum(tree: TransformTree, states: list[NodeState],
                       params: ParamVector | None = None) -> float:
    """Sum of leaf potentials over already-computed forward coordinates."""
    total = 0.0
    for node in tree.leaves:
        phi = tree.leaf_policies[node].potential(states[node].coord, params)
        if phi is None:
            raise StructureError(
                f"leaf {node} has no potential; the summed root potential is "
                "only defined when every leaf carries one"
            )
        total += float(phi)
    return total


def root_potential(tree: TransformTree, q, params: ParamVector | None = None) -> float:
    """Summed pulled-back potential ``sum_k Phi_k(psi_k(q))``.

    When every leaf is a natural-gradient leaf this is the Lyapunov
    function of the composed flow, with gradient ``-p_root``.
    """
    states = forward_pass(tree, q, params)
    return leaf_potential_sum(tree, states, params)
