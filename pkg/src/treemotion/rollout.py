"""Rollouts of ``qdot = pi(q)`` with stability monitoring.

When every leaf carries a potential, the summed pulled-back potential is
a Lyapunov function of the flow and its gradient is the negated root
force, so convergence can be watched without extra differentiation. The
integrator is fixed-step RK4: adaptive stepping would be faster but the
traces would stop being byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .losses import Trajectory
from .params import ParamVector
from .tree import (
    TransformTree,
    backward_pass,
    forward_pass,
    leaf_evaluate,
    leaf_potential_sum,
    resolve,
)


@dataclass
class RolloutResult:
    """Integrated trajectory plus the convergence bookkeeping."""

    trajectory: Trajectory
    potential_trace: np.ndarray | None
    terminal_grad_norm: float
    status: str  # "converged" | "max_steps" | "error"
    message: str = ""


@dataclass
class LyapunovReport:
    """Outcome of the step-to-step descent check on a potential trace."""

    max_increase: float
    slack: float
    n_violations: int

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def _full_eval(tree, q, params, want_potential):
    states = forward_pass(tree, q, params)
    leaf_evaluate(tree, states, params)
    backward_pass(tree, states)
    phi = leaf_potential_sum(tree, states, params) if want_potential else None
    return resolve(states), states[0].pulled_force, phi


def _velocity(tree, q, params):
    states = forward_pass(tree, q, params)
    leaf_evaluate(tree, states, params)
    backward_pass(tree, states)
    return resolve(states)


def integrate(tree: TransformTree, params: ParamVector | None, q0,
              dt: float = 1e-3, max_steps: int = 100_000,
              grad_tol: float = 1e-6, record_potential: bool = True) -> RolloutResult:
    """Fixed-step RK4 on ``qdot = pi(q)`` until the potential gradient
    vanishes (``||grad Phi_root|| = ||p_root|| <= grad_tol``) or the step
    budget runs out.

    ``record_potential`` requires every leaf to carry a potential; a
    policy failure mid-rollout returns the partial trajectory with
    status ``"error"``.
    """
    q = np.asarray(q0, dtype=float).copy()
    ts, qs, qds, phis = [], [], [], []
    status = "max_steps"
    message = ""
    terminal = np.nan
    t = 0.0
    try:
        for _ in range(max_steps + 1):
            pi1, p_root, phi = _full_eval(tree, q, params, record_potential)
            ts.append(t)
            qs.append(q.copy())
            qds.append(pi1)
            if record_potential:
                phis.append(phi)
            terminal = float(np.linalg.norm(p_root))
            if terminal <= grad_tol:
                status = "converged"
                break
            if len(ts) == max_steps + 1:
                break
            k2 = _velocity(tree, q + 0.5 * dt * pi1, params)
            k3 = _velocity(tree, q + 0.5 * dt * k2, params)
            k4 = _velocity(tree, q + dt * k3, params)
            q = q + (dt / 6.0) * (pi1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += dt
    except NumericError as exc:
        status = "error"
        message = str(exc)

    if not ts:  # failed on the very first evaluation
        trajectory = Trajectory(np.zeros(0), np.zeros((0, tree.root_dim)),
                                np.zeros((0, tree.root_dim)))
        trace = np.zeros(0) if record_potential else None
        return RolloutResult(trajectory, trace, float("nan"), status, message)

    trajectory = Trajectory(np.asarray(ts), np.asarray(qs), np.asarray(qds))
    trace = np.asarray(phis) if record_potential else None
    return RolloutResult(trajectory, trace, terminal, status, message)


def lyapunov_check(result: RolloutResult, slack_coeff: float = 1.0) -> LyapunovReport:
    """Check ``Phi_{t+1} <= Phi_t + slack`` along a recorded trace.

    ``slack = slack_coeff * dt**2`` absorbs the integrator's local error;
    the continuous flow itself never increases the potential.
    """
    if result.potential_trace is None:
        raise NumericError("rollout was run without a potential trace")
    trace = result.potential_trace
    t = result.trajectory.t
    if len(trace) < 2:
        return LyapunovReport(max_increase=0.0, slack=0.0, n_violations=0)
    dt = float(np.min(np.diff(t)))
    slack = slack_coeff * dt * dt
    increases = np.diff(trace)
    max_increase = float(max(increases.max(), 0.0))
    n_violations = int(np.sum(increases > slack))
    return LyapunovReport(max_increase=max_increase, slack=slack,
                          n_violations=n_violations)


def descent_rate(tree: TransformTree, params: ParamVector | None, q) -> float:
    """Pointwise ``grad(Phi_root) . pi = -p_root . M_root^{-1} p_root``.

    Nonpositive (up to solver roundoff) whenever the root metric is
    positive definite; useful as a state-by-state stability probe.
    """
    states = forward_pass(tree, q, params)
    leaf_evaluate(tree, states, params)
    backward_pass(tree, states)
    pi = resolve(states)
    return float(-states[0].pulled_force @ pi)
