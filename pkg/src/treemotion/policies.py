"""Leaf policies: desired velocities paired with importance-weight matrices.

A leaf reports the pair ``(p, M)`` where ``p = M v`` is the weighted
force and ``M`` the SPD importance weight. Natural-gradient leaves are
defined by a potential and a metric and report ``p = -grad(Phi)``
directly (no inverse is ever formed), which is what makes the composed
root policy a natural gradient flow. Raw leaves carry an explicit
velocity and metric; the handcrafted damper/attractor/barrier are thin
constructors over these two classes.

Every leaf also exposes the reverse-mode hooks used by the gradient
engine: ``vjp`` accumulates weight gradients given cotangents on
``(p, M)`` and returns the cotangent with respect to the leaf's input
coordinate (needed when the leaf hangs below a learnable edge map).
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, StructureError
from .maps import DiffeoChain


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------


class Potential:
    """Scalar potential on a leaf space; forces are its negated gradient."""

    def value(self, z, params) -> float:
        raise NotImplementedError

    def grad(self, z, params) -> np.ndarray:
        raise NotImplementedError

    def grad_input_vjp(self, z, params, cot) -> np.ndarray:
        """Hessian-vector product ``(d grad / d z)^T cot``."""
        raise NotImplementedError

    def grad_param_vjp(self, z, params, cot, grad_out) -> None:
        """Accumulate ``(d grad / d theta)^T cot`` for explicit weight use."""
        return None


class ZeroPotential(Potential):
    def value(self, z, params):
        return 0.0

    def grad(self, z, params):
        return np.zeros_like(np.asarray(z, dtype=float))

    def grad_input_vjp(self, z, params, cot):
        return np.zeros_like(np.asarray(cot, dtype=float))


class QuadraticPotential(Potential):
    """``0.5 * gain * ||z - goal||^2``."""

    def __init__(self, goal, gain=1.0):
        self.goal = np.asarray(goal, dtype=float)
        if gain <= 0:
            raise StructureError("quadratic potential gain must be positive")
        self.gain = float(gain)

    def value(self, z, params):
        d = z - self.goal
        return 0.5 * self.gain * float(d @ d)

    def grad(self, z, params):
        return self.gain * (z - self.goal)

    def grad_input_vjp(self, z, params, cot):
        return self.gain * cot


class LatentQuadraticPotential(Potential):
    """Quadratic potential in a latent space reached through a diffeo chain.

    The goal is pinned in the parent (subtask) coordinates; its latent
    image moves with the chain weights, so the potential stays minimized
    exactly at the task goal however the chain deforms.
    """

    def __init__(self, goal, chain: DiffeoChain):
        self.goal = np.asarray(goal, dtype=float)
        if not isinstance(chain, DiffeoChain):
            raise StructureError("latent quadratic potential needs a diffeo chain")
        if chain.in_dim != self.goal.size:
            raise StructureError("latent potential goal dimension != chain dimension")
        self.chain = chain

    def goal_image(self, params):
        return self.chain.value(self.goal, params)

    def value(self, z, params):
        d = z - self.goal_image(params)
        return 0.5 * float(d @ d)

    def grad(self, z, params):
        return z - self.goal_image(params)

    def grad_input_vjp(self, z, params, cot):
        return np.asarray(cot, dtype=float)

    def grad_param_vjp(self, z, params, cot, grad_out):
        # grad Phi = z - chain(goal): only the goal image carries weights.
        self.chain.value_vjp(self.goal, params, -np.asarray(cot, dtype=float), grad_out)


class BarrierPotential(Potential):
    """Repulsive potential ``gain * max(0, d0 - z)^2 / z`` on a 1-D distance.

    Smoothly zero for ``z >= d0``, grows without bound as ``z -> 0+``.
    Evaluation at ``z <= 0`` is outside the domain. This functional form
    is a pragmatic choice, not a standard one; it is continuously
    differentiable, which is what the stability argument needs.
    """

    def __init__(self, margin, gain=1.0):
        if margin <= 0 or gain <= 0:
            raise StructureError("barrier margin and gain must be positive")
        self.margin = float(margin)
        self.gain = float(gain)

    def _z(self, z) -> float:
        z0 = float(np.asarray(z).reshape(-1)[0])
        if z0 <= 0.0:
            raise DomainError(f"barrier potential evaluated at z={z0} <= 0")
        return z0

    def value(self, z, params):
        z0 = self._z(z)
        if z0 >= self.margin:
            return 0.0
        gap = self.margin - z0
        return self.gain * gap * gap / z0

    def grad(self, z, params):
        z0 = self._z(z)
        if z0 >= self.margin:
            return np.zeros(1)
        return np.array([-self.gain * (self.margin**2 - z0**2) / z0**2])

    def grad_input_vjp(self, z, params, cot):
        z0 = self._z(z)
        if z0 >= self.margin:
            return np.zeros(1)
        return np.array([2.0 * self.gain * self.margin**2 / z0**3]) * cot


# ---------------------------------------------------------------------------
# Metrics (importance-weight matrices)
# ---------------------------------------------------------------------------


class Metric:
    """State-dependent SPD importance weight."""

    n_params: int = 0
    param_slice: slice | None = None

    @property
    def is_learnable(self) -> bool:
        return self.n_params > 0

    def init_values(self) -> np.ndarray:
        return np.zeros(0)

    def value(self, x, params) -> np.ndarray:
        raise NotImplementedError

    def param_vjp(self, x, params, S, grad_out) -> None:
        return None

    def input_vjp(self, x, params, S) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=float))


class ConstantMetric(Metric):
    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim == 0:
            raise StructureError("constant metric needs a matrix; use scale*I")
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise StructureError("constant metric must be square")
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise StructureError("constant metric must be symmetric")
        if np.linalg.eigvalsh(matrix).min() <= 0:
            raise StructureError("constant metric must be positive definite")
        self.matrix = matrix

    @classmethod
    def scaled_identity(cls, scale, dim):
        if scale <= 0:
            raise StructureError("metric scale must be positive")
        return cls(float(scale) * np.eye(int(dim)))

    def value(self, x, params):
        return self.matrix


class InverseSquareMetric(Metric):
    """1-D weight ``w * (d0 / z)^2``: vanishingly small far away, large near 0."""

    def __init__(self, weight, margin):
        if weight <= 0 or margin <= 0:
            raise StructureError("inverse-square metric needs positive weight/margin")
        self.weight = float(weight)
        self.margin = float(margin)

    def _z(self, x) -> float:
        z0 = float(np.asarray(x).reshape(-1)[0])
        if z0 <= 0.0:
            raise DomainError(f"inverse-square metric evaluated at z={z0} <= 0")
        return z0

    def value(self, x, params):
        z0 = self._z(x)
        return np.array([[self.weight * (self.margin / z0) ** 2]])

    def input_vjp(self, x, params, S):
        z0 = self._z(x)
        dm = -2.0 * self.weight * self.margin**2 / z0**3
        return np.array([float(S[0, 0]) * dm])


class CholeskyMetricNet(Metric):
    """SPD matrix ``M = L L^T`` with ``L`` produced by a small ReLU network.

    A shared trunk feeds two linear heads: one for the ``n`` diagonal
    entries (passed through ``|.| + eps`` so they stay strictly
    positive) and one for the ``n(n-1)/2`` strictly-lower entries. The
    construction guarantees ``min eig(M) > 0`` for any weights.
    """

    def __init__(self, dim, in_dim=None, hidden=(64, 64), eps=1e-4, seed=0,
                 learnable=True, head_scale=0.1):
        self.dim = int(dim)
        self.in_dim = self.dim if in_dim is None else int(in_dim)
        if eps <= 0:
            raise StructureError("Cholesky diagonal bias eps must be positive")
        self.eps = float(eps)
        self.hidden = tuple(int(h) for h in hidden)
        if any(h < 1 for h in self.hidden):
            raise StructureError("hidden layer sizes must be positive")
        self.n_off = self.dim * (self.dim - 1) // 2
        self._tril = np.tril_indices(self.dim, -1)
        self._seed = int(seed)
        self._head_scale = float(head_scale)
        self._shapes = []
        fan_in = self.in_dim
        for h in self.hidden:
            self._shapes += [(h, fan_in), (h,)]
            fan_in = h
        self._shapes += [(self.dim, fan_in), (self.dim,)]
        self._shapes += [(self.n_off, fan_in), (self.n_off,)] if self.n_off else []
        self.n_params = int(sum(int(np.prod(s)) for s in self._shapes))
        self._learnable = bool(learnable)
        self._frozen = None
        if not self._learnable:
            self._frozen = self.init_values()
            self.n_params = 0

    def init_values(self) -> np.ndarray:
        """Seeded init: He-scaled trunk, small heads, diagonal bias at 1.

        Zero init would be useless here: the ReLU trunk and the
        absolute-value head both have zero (sub)gradient at 0, so the
        network could never move. Diagonal bias 1 starts the metric
        near the identity.
        """
        rng = np.random.default_rng(self._seed)
        chunks = []
        n_layers = len(self.hidden)
        for i, shape in enumerate(self._shapes):
            if len(shape) == 1:  # bias
                if i == 2 * n_layers + 1:  # diagonal head bias
                    chunks.append(np.ones(shape[0]))
                else:
                    chunks.append(np.zeros(shape[0]))
            elif i < 2 * n_layers:  # trunk weight
                chunks.append(rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape).ravel())
            else:  # head weight
                chunks.append(
                    rng.normal(0.0, self._head_scale / np.sqrt(shape[1]), size=shape).ravel()
                )
        return np.concatenate(chunks)

    def _weights(self, params):
        if self._frozen is not None:
            block = self._frozen
        else:
            if self.param_slice is None:
                raise StructureError("learnable metric net has no parameter slice")
            block = params.values[self.param_slice]
        out = []
        off = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(block[off: off + size].reshape(shape))
            off += size
        return out

    def _forward(self, x, weights):
        acts = [np.asarray(x, dtype=float)]
        pres = []
        h = acts[0]
        for i in range(len(self.hidden)):
            pre = weights[2 * i] @ h + weights[2 * i + 1]
            pres.append(pre)
            h = np.maximum(pre, 0.0)
            acts.append(h)
        k = 2 * len(self.hidden)
        d_raw = weights[k] @ h + weights[k + 1]
        o_raw = weights[k + 2] @ h + weights[k + 3] if self.n_off else np.zeros(0)
        return acts, pres, d_raw, o_raw

    def decompose(self, x, params):
        """Return ``(L, M)`` with ``L`` lower-triangular, ``M = L L^T``."""
        weights = self._weights(params)
        _, _, d_raw, o_raw = self._forward(x, weights)
        L = np.zeros((self.dim, self.dim))
        L[np.diag_indices(self.dim)] = np.abs(d_raw) + self.eps
        if self.n_off:
            L[self._tril] = o_raw
        M = L @ L.T
        return L, 0.5 * (M + M.T)

    def value(self, x, params):
        return self.decompose(x, params)[1]

    def _vjp(self, x, params, S, grad_block):
        weights = self._weights(params)
        acts, pres, d_raw, o_raw = self._forward(x, weights)
        L = np.zeros((self.dim, self.dim))
        L[np.diag_indices(self.dim)] = np.abs(d_raw) + self.eps
        if self.n_off:
            L[self._tril] = o_raw
        # M = L L^T: cotangent on L is (S + S^T) L for any (possibly
        # asymmetric) cotangent S on M.
        GL = (S + S.T) @ L
        cd = np.sign(d_raw) * GL[np.diag_indices(self.dim)]
        co = GL[self._tril] if self.n_off else np.zeros(0)

        grads = [None] * len(self._shapes) if grad_block is not None else None
        k = 2 * len(self.hidden)
        h_last = acts[-1]
        if grads is not None:
            grads[k] = np.outer(cd, h_last)
            grads[k + 1] = cd
            if self.n_off:
                grads[k + 2] = np.outer(co, h_last)
                grads[k + 3] = co
        ch = weights[k].T @ cd
        if self.n_off:
            ch = ch + weights[k + 2].T @ co
        for i in range(len(self.hidden) - 1, -1, -1):
            cpre = ch * (pres[i] > 0)
            if grads is not None:
                grads[2 * i] = np.outer(cpre, acts[i])
                grads[2 * i + 1] = cpre
            ch = weights[2 * i].T @ cpre
        if grads is not None:
            off = 0
            for g, shape in zip(grads, self._shapes):
                size = int(np.prod(shape))
                grad_block[off: off + size] += g.ravel()
                off += size
        return ch  # cotangent on the network input

    def param_vjp(self, x, params, S, grad_out):
        if not (self._learnable and self.param_slice is not None):
            return
        self._vjp(x, params, S, grad_out[self.param_slice])

    def input_vjp(self, x, params, S):
        return self._vjp(x, params, S, None)


def cholesky_metric(net: CholeskyMetricNet, w, params):
    """``(L, M)`` of the Cholesky-parameterized importance weight at ``w``."""
    return net.decompose(w, params)


# ---------------------------------------------------------------------------
# Leaf policies
# ---------------------------------------------------------------------------


class LeafPolicy:
    """Base leaf policy: reports ``(p, M)`` at a leaf node."""

    kind: str
    dim: int

    def evaluate(self, z, params, parent_coord=None):
        raise NotImplementedError

    def potential(self, z, params):
        """Potential value, or None for leaves without one."""
        return None

    def vjp(self, z, params, cot_p, cot_M, grad_out, parent_coord=None):
        """Accumulate weight gradients; return the cotangent on ``z``."""
        raise NotImplementedError

    def components(self):
        """Learnable sub-components as ``(suffix, component)`` pairs."""
        return []

    @property
    def is_learnable(self) -> bool:
        return any(c.n_params > 0 for _, c in self.components())


class RawVMLeaf(LeafPolicy):
    """Explicit ``(v, M)`` leaf; the velocity may be a learnable constant.

    With ``zero_potential=True`` (the damper) the leaf declares the
    constant potential 0, which keeps it inside the natural-gradient
    class: ``M v = 0 = -grad(0)``.
    """

    kind = "raw_vm"

    def __init__(self, velocity, metric: Metric, learnable=False, zero_potential=False):
        self.velocity = np.asarray(velocity, dtype=float)
        self.dim = self.velocity.size
        self.metric = metric
        self.learnable_velocity = bool(learnable)
        self.param_slice: slice | None = None
        self.n_params = self.dim if self.learnable_velocity else 0
        if zero_potential and np.any(self.velocity != 0.0):
            raise StructureError("a zero-potential raw leaf must have v = 0")
        if zero_potential and self.learnable_velocity:
            raise StructureError("a zero-potential raw leaf cannot be learnable")
        self._zero_potential = bool(zero_potential)

    def init_values(self):
        return self.velocity.copy()

    def _v(self, params):
        if self.learnable_velocity:
            if self.param_slice is None:
                raise StructureError("learnable velocity has no parameter slice")
            return params.values[self.param_slice]
        return self.velocity

    def evaluate(self, z, params, parent_coord=None):
        v = self._v(params)
        M = self.metric.value(z, params)
        return M @ v, M

    def potential(self, z, params):
        return 0.0 if self._zero_potential else None

    def vjp(self, z, params, cot_p, cot_M, grad_out, parent_coord=None):
        v = self._v(params)
        M = self.metric.value(z, params)
        # p = M v couples the force cotangent into the metric cotangent.
        S = cot_M + np.outer(cot_p, v)
        self.metric.param_vjp(z, params, S, grad_out)
        if self.learnable_velocity:
            grad_out[self.param_slice] += M @ cot_p
        return self.metric.input_vjp(z, params, S)

    def components(self):
        out = []
        if self.learnable_velocity:
            out.append(("velocity", self))
        if self.metric.is_learnable:
            out.append(("metric", self.metric))
        return out


class NaturalGradientLeaf(LeafPolicy):
    """Leaf driven by a potential: ``p = -grad(Phi)``, ``M`` from a metric.

    The force never goes through ``M^{-1}``; the pair ``(p, M)`` already
    encodes ``v = -M^{-1} grad(Phi)`` implicitly. ``metric_input``
    selects whether the metric network sees the leaf coordinate
    ("latent") or the parent node coordinate ("subtask").
    """

    kind = "natural_gradient"

    def __init__(self, dim, potential: Potential, metric: Metric,
                 metric_input: str = "latent"):
        self.dim = int(dim)
        self.pot = potential
        self.metric = metric
        if metric_input not in ("latent", "subtask"):
            raise StructureError("metric_input must be 'latent' or 'subtask'")
        self.metric_input = metric_input

    def _metric_coord(self, z, parent_coord):
        if self.metric_input == "subtask":
            if parent_coord is None:
                raise StructureError(
                    "metric_input='subtask' needs the parent coordinate"
                )
            return parent_coord
        return z

    def evaluate(self, z, params, parent_coord=None):
        p = -self.pot.grad(z, params)
        M = self.metric.value(self._metric_coord(z, parent_coord), params)
        return p, M

    def potential(self, z, params):
        return self.pot.value(z, params)

    def vjp(self, z, params, cot_p, cot_M, grad_out, parent_coord=None):
        x_m = self._metric_coord(z, parent_coord)
        self.pot.grad_param_vjp(z, params, -cot_p, grad_out)
        self.metric.param_vjp(x_m, params, cot_M, grad_out)
        c_z = -self.pot.grad_input_vjp(z, params, cot_p)
        if self.metric_input == "latent":
            c_z = c_z + self.metric.input_vjp(x_m, params, cot_M)
        return c_z

    def components(self):
        out = []
        if self.metric.is_learnable:
            out.append(("metric", self.metric))
        return out


def natural_gradient_force(leaf: LeafPolicy, z, params, parent_coord=None):
    """Force/weight pair ``(p, M)`` of a leaf at ``z``."""
    return leaf.evaluate(z, params, parent_coord=parent_coord)


# ---------------------------------------------------------------------------
# Handcrafted leaves
# ---------------------------------------------------------------------------


def handcrafted_damper(gain, dim) -> RawVMLeaf:
    """Zero-velocity leaf with weight ``gain * I``; pulls the composed
    policy toward rest. Carries the constant potential 0."""
    if gain <= 0:
        raise StructureError("damper gain must be positive")
    return RawVMLeaf(np.zeros(int(dim)), ConstantMetric.scaled_identity(gain, dim),
                     zero_potential=True)


def handcrafted_attractor(goal, gain=1.0, weight=1.0) -> NaturalGradientLeaf:
    """Quadratic pull toward ``goal`` with constant weight ``weight * I``."""
    goal = np.asarray(goal, dtype=float)
    return NaturalGradientLeaf(
        goal.size,
        QuadraticPotential(goal, gain),
        ConstantMetric.scaled_identity(weight, goal.size),
    )


def handcrafted_barrier(margin, gain=1.0, weight=1.0) -> NaturalGradientLeaf:
    """Repulsive leaf for a 1-D distance coordinate.

    Inert beyond ``margin``; force and weight both grow as the distance
    shrinks. The exact potential is ``gain * max(0, margin - z)^2 / z``
    and the weight ``weight * (margin / z)^2``.
    """
    return NaturalGradientLeaf(
        1, BarrierPotential(margin, gain), InverseSquareMetric(weight, margin)
    )
