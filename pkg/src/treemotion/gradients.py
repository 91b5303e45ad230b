"""Analytic weight gradients of the composed policy and of scalar losses.

The gradients are reverse-accumulated by hand through the four
composition stages. With ``u = M_root^{-1} g`` for a cotangent ``g`` on
the policy output,

    g . d(pi) = u . d(p_root) - u . d(M_root) pi,

and both differentials decompose over the tree: pushing ``u`` and ``pi``
down through the edge Jacobians turns the root expression into per-leaf
cotangents on ``(p_k, M_k)`` plus, for learnable edges, a rank-two
cotangent on the edge Jacobian itself. The directional term
``d(M_root) pi`` is therefore never materialized as a 3-tensor.

Learnable edge maps must sit directly above a leaf with no learnable
edge higher on their path (so their own inputs carry no weight
dependence); the structures built here satisfy that by construction and
anything else is rejected up front. A finite-difference oracle for all
of this lives in the verification helpers and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, SingularMetricError, StructureError
from .losses import DemoSet, LossSpec, _sample_subtask_grad, anchor_jacobian
from .params import ParamVector
from .tree import (
    SINGULAR_EIG_TOL,
    TransformTree,
    backward_pass,
    forward_pass,
    leaf_evaluate,
)


@dataclass
class PolicyGradient:
    """Jacobian of the policy output with respect to all learnable weights."""

    jacobian: np.ndarray  # (root_dim, n_params)


@dataclass
class PipelineCache:
    """One evaluated composition pass, reusable across several cotangents."""

    states: list
    pi: np.ndarray
    cho_factor: tuple


def check_gradient_structure(tree: TransformTree) -> None:
    """Reject trees the hand-written reverse pass does not cover.

    A learnable edge map whose input itself depends on weights (a
    learnable edge somewhere above it) would need second derivatives of
    the upper map; no supported construction produces that shape.
    """
    if getattr(tree, "_grad_structure_checked", False):
        return
    for e in tree.edges:
        if e.map.n_params == 0:
            continue
        if e.child not in tree.leaves:
            raise StructureError(
                f"{e.name()}: learnable edge maps must terminate at a leaf"
            )
        node = e.parent
        while node != 0:
            up = tree.parent_edge(node)
            if up.map.n_params > 0:
                raise StructureError(
                    f"{e.name()}: learnable edge below another learnable edge "
                    f"({up.name()}) is not supported"
                )
            node = up.parent
    tree._grad_structure_checked = True


def run_pipeline(tree: TransformTree, q, params: ParamVector) -> PipelineCache:
    """Evaluate the four stages once and keep everything the reverse
    pass needs (coordinates, edge Jacobians, leaf outputs, root factor)."""
    states = forward_pass(tree, q, params)
    leaf_evaluate(tree, states, params)
    backward_pass(tree, states)
    M_root = states[0].pulled_metric
    if not np.all(np.isfinite(M_root)):
        raise NumericError("root metric contains non-finite entries")
    try:
        factor = scipy.linalg.cho_factor(M_root, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        min_eig = float(np.linalg.eigvalsh(M_root).min())
        raise SingularMetricError(
            f"root metric is singular (min eigenvalue {min_eig:.3e}); "
            "gradients require M_root > 0"
        ) from exc
    if float(np.diagonal(factor[0]).min()) ** 2 < SINGULAR_EIG_TOL:
        min_eig = float(np.linalg.eigvalsh(M_root).min())
        if min_eig < SINGULAR_EIG_TOL:
            raise SingularMetricError(
                f"root metric min eigenvalue {min_eig:.3e} is below "
                f"{SINGULAR_EIG_TOL}; gradients require M_root > 0"
            )
    pi = scipy.linalg.cho_solve(factor, states[0].pulled_force, check_finite=False)
    return PipelineCache(states=states, pi=pi, cho_factor=factor)


def pipeline_vjp(tree: TransformTree, cache: PipelineCache, params: ParamVector,
                 cotangent: np.ndarray, grad_out: np.ndarray) -> None:
    """Accumulate ``(d pi / d theta)^T cotangent`` into ``grad_out``."""
    check_gradient_structure(tree)
    states = cache.states
    pi = cache.pi
    u = scipy.linalg.cho_solve(cache.cho_factor, np.asarray(cotangent, dtype=float),
                               check_finite=False)

    u_at = [None] * tree.n_nodes
    pi_at = [None] * tree.n_nodes
    u_at[0] = u
    pi_at[0] = pi
    for e in tree.edges:
        J = states[e.child].jac_to_parent
        u_at[e.child] = J @ u_at[e.parent]
        pi_at[e.child] = J @ pi_at[e.parent]

    for leaf in tree.leaves:
        policy = tree.leaf_policies[leaf]
        u_k = u_at[leaf]
        pi_k = pi_at[leaf]
        cot_p = u_k
        cot_M = -np.outer(u_k, pi_k)
        edge = tree.parent_edge(leaf)
        parent_coord = states[edge.parent].coord if edge is not None else None
        c_z = policy.vjp(states[leaf].coord, params, cot_p, cot_M, grad_out,
                         parent_coord=parent_coord)
        if edge is not None and edge.map.is_learnable:
            p_k = states[leaf].pulled_force
            M_k = states[leaf].pulled_metric
            # Cotangent on the edge Jacobian J: (p_k - M_k pi_k) u_x^T
            # - (M_k u_k) pi_x^T, applied as two tangent/cotangent pairs.
            tangents = np.column_stack((u_at[edge.parent], pi_at[edge.parent]))
            cot_tangents = np.column_stack((p_k - M_k @ pi_k, -(M_k @ u_k)))
            edge.map.pullback_vjp(states[edge.parent].coord, params, c_z,
                                  tangents, cot_tangents, grad_out)


def policy_vjp(tree: TransformTree, q, params: ParamVector,
               cotangent: np.ndarray) -> np.ndarray:
    """One-shot ``(d pi / d theta)^T cotangent``."""
    cache = run_pipeline(tree, q, params)
    grad = params.zeros_like()
    pipeline_vjp(tree, cache, params, cotangent, grad)
    return grad


def policy_param_jacobian(tree: TransformTree, q,
                          params: ParamVector) -> PolicyGradient:
    """Full ``d pi / d theta`` (root_dim x n_params), one reverse pass per row."""
    cache = run_pipeline(tree, q, params)
    d = tree.root_dim
    jac = np.zeros((d, params.size))
    basis = np.eye(d)
    for i in range(d):
        pipeline_vjp(tree, cache, params, basis[i], jac[i])
    return PolicyGradient(jacobian=jac)


def loss_gradient(loss: LossSpec, demos: DemoSet, tree: TransformTree,
                  params: ParamVector) -> np.ndarray:
    """Gradient of the demo loss: ordered sum of per-sample reverse passes."""
    grad = params.zeros_like()
    if loss.kind == "joint_space":
        for q, qdot in demos.samples():
            cache = run_pipeline(tree, q, params)
            g = 2.0 * (cache.pi - qdot)
            pipeline_vjp(tree, cache, params, g, grad)
        return grad
    if loss.kind == "subtask_space":
        lam = loss.lam_for(tree)
        for q, qdot in demos.samples():
            cache = run_pipeline(tree, q, params)
            anchors = [anchor_jacobian(tree, leaf, q, params) for leaf in tree.leaves]
            _, g = _sample_subtask_grad(tree, lam, anchors, cache.pi, qdot)
            pipeline_vjp(tree, cache, params, g, grad)
        return grad
    raise StructureError(
        "independent_baseline has per-leaf objectives; see train_independent_baseline"
    )
