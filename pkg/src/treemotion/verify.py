"""Self-checks: finite-difference oracles and whole-tree consistency.

These back the ``check`` and ``gradcheck`` commands. Everything here is
diagnostic: analytic values are recomputed by an independent route
(finite differences, or the flat least-squares solver) and compared.
"""

from __future__ import annotations

import numpy as np

from .errors import TreeMotionError
from .gradients import loss_gradient
from .losses import DemoSet, LossSpec, loss_value
from .params import ParamVector
from .tree import TransformTree, evaluate_policy, flat_solve, forward_pass

FD_STEP = 1e-6


def fd_jacobian(f, x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def check_tree(tree: TransformTree, params: ParamVector | None = None,
               n_points: int = 10, seed: int = 0,
               flat_tol: float = 1e-10, jac_tol: float = 1e-5) -> dict:
    """Probe a tree at seeded points: staged-vs-flat agreement and
    analytic-vs-FD edge Jacobians.

    Returns a JSON-ready report with per-failure detail; ``"status"`` is
    ``"pass"`` or ``"numeric_failure"``.
    """
    rng = np.random.default_rng(seed)
    points = [np.zeros(tree.root_dim)]
    points += [0.5 * rng.standard_normal(tree.root_dim) for _ in range(n_points)]
    failures = []
    flat_max = 0.0
    jac_max = 0.0
    for idx, q in enumerate(points):
        try:
            pi_tree = evaluate_policy(tree, q, params)
            pi_flat = flat_solve(tree, q, params)
        except TreeMotionError as exc:
            failures.append({
                "kind": "policy_evaluation",
                "point_index": idx,
                "q": q.tolist(),
                "error": f"{type(exc).__name__}: {exc}",
            })
            continue
        dev = float(np.abs(pi_tree - pi_flat).max())
        flat_max = max(flat_max, dev)
        if dev > flat_tol:
            failures.append({
                "kind": "tree_vs_flat",
                "point_index": idx,
                "deviation": dev,
                "tolerance": flat_tol,
            })
        states = forward_pass(tree, q, params)
        for e in tree.edges:
            x = states[e.parent].coord
            try:
                J = e.map.jacobian(x, params)
                J_fd = fd_jacobian(lambda z: e.map.value(z, params), x)
            except TreeMotionError as exc:
                failures.append({
                    "kind": "jacobian_evaluation",
                    "edge": e.name(),
                    "point_index": idx,
                    "error": f"{type(exc).__name__}: {exc}",
                })
                continue
            scale = max(1.0, float(np.abs(J_fd).max()))
            rel = float(np.abs(J - J_fd).max()) / scale
            jac_max = max(jac_max, rel)
            if rel > jac_tol:
                failures.append({
                    "kind": "jacobian_mismatch",
                    "edge": e.name(),
                    "point_index": idx,
                    "relative_error": rel,
                    "tolerance": jac_tol,
                })
    return {
        "status": "pass" if not failures else "numeric_failure",
        "n_points": len(points),
        "tree_vs_flat_max": flat_max,
        "jacobian_max_rel": jac_max,
        "failures": failures,
    }


def gradcheck_report(tree: TransformTree, params: ParamVector, demos: DemoSet,
                     loss: LossSpec, h: float = 1e-5, tol: float = 1e-4,
                     corrupt: float = 0.0) -> dict:
    """Analytic loss gradient against central finite differences.

    ``corrupt`` adds a constant to the analytic gradient before the
    comparison; it exists so a deliberately broken gradient can be shown
    to fail (negative control for the check itself).
    """
    analytic = loss_gradient(loss, demos, tree, params)
    if corrupt:
        analytic = analytic + corrupt
    fd = np.zeros_like(analytic)
    for i in range(params.size):
        up = params.copy()
        up.values[i] += h
        dn = params.copy()
        dn.values[i] -= h
        fd[i] = (loss_value(loss, tree, up, demos)
                 - loss_value(loss, tree, dn, demos)) / (2.0 * h)
    if params.size:
        denom = np.maximum(np.abs(fd), 1e-3)
        rel = np.abs(analytic - fd) / denom
        max_rel = float(rel.max())
        max_abs = float(np.abs(analytic - fd).max())
        worst = int(np.argmax(rel))
    else:
        max_rel = 0.0
        max_abs = 0.0
        worst = -1
    return {
        "status": "pass" if max_rel < tol else "numeric_failure",
        "n_params": int(params.size),
        "fd_step": h,
        "tolerance": tol,
        "max_relative_error": max_rel,
        "max_absolute_error": max_abs,
        "worst_index": worst,
    }


def potential_gradient_fd(tree: TransformTree, q, params: ParamVector | None = None,
                          h: float = FD_STEP) -> np.ndarray:
    """Finite-difference gradient of the summed root potential."""
    from .tree import root_potential

    q = np.asarray(q, dtype=float)
    g = np.zeros_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        g[i] = (root_potential(tree, q + e, params)
                - root_potential(tree, q - e, params)) / (2.0 * h)
    return g
