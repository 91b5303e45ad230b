"""Demonstration data and imitation losses.

Two ways to score a policy against demonstrated velocities: regress the
joint velocity directly, or penalize only the velocity deviation seen in
each subtask space (the image under that subtask's Jacobian), weighted
per subtask. Demonstrations recorded by a human are typically
contradictory in joint space while agreeing in the spaces that matter,
which is the whole reason the subtask-space loss exists.

For leaves reached through a learnable latent map, the subtask loss
projects residuals with the Jacobian of the fixed part of the path only
(up to the node the user actually specified). Projecting through the
learnable map itself would let training shrink the loss by shrinking
the map instead of fitting the motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructureError
from .maps import DiffeoChain
from .params import ParamVector
from .tree import TransformTree, evaluate_policy


@dataclass
class Trajectory:
    """Time-stamped configuration positions and velocities."""

    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.q.ndim != 2:
            raise StructureError("trajectory q must be (T, d)")
        T, _ = self.q.shape
        if self.t.shape != (T,) or self.qdot.shape != self.q.shape:
            raise StructureError("trajectory arrays have inconsistent shapes")
        if T > 1 and not np.all(np.diff(self.t) > 0):
            raise StructureError("trajectory timestamps must strictly increase")

    def __len__(self):
        return self.q.shape[0]

    @property
    def dim(self):
        return self.q.shape[1]


def velocities_by_central_difference(t, q):
    """Estimate velocities from positions (central differences inside,
    one-sided at the ends)."""
    t = np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float)
    T = q.shape[0]
    if T < 2:
        raise StructureError("need at least two samples to estimate velocities")
    qdot = np.empty_like(q)
    qdot[0] = (q[1] - q[0]) / (t[1] - t[0])
    qdot[-1] = (q[-1] - q[-2]) / (t[-1] - t[-2])
    if T > 2:
        dt = (t[2:] - t[:-2])[:, None]
        qdot[1:-1] = (q[2:] - q[:-2]) / dt
    return qdot


@dataclass
class DemoSet:
    """A set of demonstration trajectories with a common dimension."""

    trajectories: list[Trajectory]

    def __post_init__(self):
        if not self.trajectories:
            raise StructureError("demo set is empty")
        d = self.trajectories[0].dim
        if any(tr.dim != d for tr in self.trajectories):
            raise StructureError("demo trajectories have inconsistent dimensions")

    @property
    def dim(self):
        return self.trajectories[0].dim

    @property
    def n_samples(self):
        return sum(len(tr) for tr in self.trajectories)

    def samples(self):
        """All ``(q, qdot)`` pairs in trajectory order."""
        for tr in self.trajectories:
            for i in range(len(tr)):
                yield tr.q[i], tr.qdot[i]


@dataclass
class LossSpec:
    """Which imitation loss to optimize.

    ``lam`` weights the subtask-space loss per leaf (ordered by leaf
    node id) and is ignored by the other kinds. Construction is
    permissive (an all-zero ``lam`` is a valid, identically-zero loss);
    ``validate_for_training`` enforces the stricter contract used by the
    trainer.
    """

    kind: str
    lam: np.ndarray | None = None

    KINDS = ("subtask_space", "joint_space", "independent_baseline")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise StructureError(f"unknown loss kind {self.kind!r}; one of {self.KINDS}")
        if self.lam is not None:
            self.lam = np.asarray(self.lam, dtype=float)

    def lam_for(self, tree: TransformTree) -> np.ndarray:
        if self.lam is None:
            raise StructureError("subtask-space loss needs per-leaf weights")
        if self.lam.shape != (len(tree.leaves),):
            raise StructureError(
                f"lam has {self.lam.size} entries, tree has {len(tree.leaves)} leaves"
            )
        if not np.all(np.isfinite(self.lam)) or np.any(self.lam < 0):
            raise StructureError("lam entries must be finite and nonnegative")
        return self.lam

    def validate_for_training(self, tree: TransformTree) -> None:
        if self.kind == "subtask_space":
            lam = self.lam_for(tree)
            if not np.any(lam > 0):
                raise StructureError("subtask-space training needs some lam > 0")


# ---------------------------------------------------------------------------
# Subtask anchors
# ---------------------------------------------------------------------------


def anchor_jacobian(tree: TransformTree, leaf: int, q,
                    params: ParamVector | None = None) -> np.ndarray:
    """Jacobian of the fixed portion of the root-to-leaf map at ``q``.

    Walks the path and stops before the first latent (diffeo-chain)
    edge, i.e. at the node whose space the user actually named.
    """
    x = np.asarray(q, dtype=float)
    J = np.eye(tree.root_dim)
    for edge in tree.path_to(leaf):
        if isinstance(edge.map, DiffeoChain):
            break
        x, J_edge = edge.map.value_and_jacobian(x, params)
        J = J_edge @ J
    return J


def _sample_subtask_grad(tree, lam, anchors, pi, qdot):
    """Per-sample loss and its gradient with respect to ``pi``."""
    r = qdot - pi
    loss = 0.0
    g = np.zeros_like(pi)
    for lk, J in zip(lam, anchors):
        if lk == 0.0:
            continue
        Jr = J @ r
        loss += lk * float(Jr @ Jr)
        g -= 2.0 * lk * (J.T @ Jr)
    return loss, g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def subtask_loss(tree: TransformTree, params: ParamVector, demos: DemoSet,
                 lam) -> float:
    """Velocity deviation summed over subtask spaces, weighted by ``lam``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (len(tree.leaves),):
        raise StructureError(
            f"lam has {lam.size} entries, tree has {len(tree.leaves)} leaves"
        )
    total = 0.0
    for q, qdot in demos.samples():
        pi = evaluate_policy(tree, q, params)
        r = qdot - pi
        for lk, leaf in zip(lam, tree.leaves):
            if lk == 0.0:
                continue
            Jr = anchor_jacobian(tree, leaf, q, params) @ r
            total += lk * float(Jr @ Jr)
    return total


def joint_loss(tree: TransformTree, params: ParamVector, demos: DemoSet) -> float:
    """Plain joint-space velocity regression error."""
    total = 0.0
    for q, qdot in demos.samples():
        r = qdot - evaluate_policy(tree, q, params)
        total += float(r @ r)
    return total


def loss_value(loss: LossSpec, tree: TransformTree, params: ParamVector,
               demos: DemoSet) -> float:
    if loss.kind == "joint_space":
        return joint_loss(tree, params, demos)
    if loss.kind == "subtask_space":
        return subtask_loss(tree, params, demos, loss.lam_for(tree))
    raise StructureError(
        "independent_baseline is trained per leaf; see train_independent_baseline"
    )
