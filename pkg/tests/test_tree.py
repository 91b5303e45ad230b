import numpy as np
import pytest

from treemotion.errors import SingularMetricError, StructureError
from treemotion.fixtures import random_tree
from treemotion.maps import DifferentiableMap, IdentityMap, LinearMap, PlanarArmFK
from treemotion.policies import (
    ConstantMetric,
    RawVMLeaf,
    handcrafted_attractor,
    handcrafted_damper,
)
from treemotion.tree import (
    Edge,
    TransformTree,
    backward_pass,
    evaluate_policy,
    flat_solve,
    forward_pass,
    leaf_evaluate,
    resolve,
)


class SquareFirst(DifferentiableMap):
    """(x1, x2) -> (x1^2), for the forward-pass example."""

    in_dim, out_dim = 2, 1

    def value(self, x, params=None):
        return np.array([x[0] ** 2])

    def jacobian(self, x, params=None):
        return np.array([[2.0 * x[0], 0.0]])


def single_leaf_tree(dim, policy, mapping=None):
    mapping = mapping if mapping is not None else IdentityMap(dim)
    return TransformTree([dim, policy.dim], [Edge(0, 1, mapping)], {1: policy})


def raw_leaf(v, M):
    return RawVMLeaf(np.asarray(v, dtype=float), ConstantMetric(np.asarray(M, dtype=float)))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def test_forward_identity_child():
    tree = single_leaf_tree(2, raw_leaf([0.0, 0.0], np.eye(2)))
    states = forward_pass(tree, np.array([0.3, -0.1]))
    np.testing.assert_allclose(states[1].coord, [0.3, -0.1])
    np.testing.assert_allclose(states[1].jac_to_parent, np.eye(2))


def test_forward_square_map():
    tree = single_leaf_tree(2, raw_leaf([0.0], np.eye(1)), mapping=SquareFirst())
    states = forward_pass(tree, np.array([2.0, 5.0]))
    np.testing.assert_allclose(states[1].coord, [4.0])
    np.testing.assert_allclose(states[1].jac_to_parent, [[4.0, 0.0]])


def test_forward_two_link_arm_end_effector():
    tree = single_leaf_tree(2, raw_leaf([0.0, 0.0], np.eye(2)),
                            mapping=PlanarArmFK([1.0, 1.0], "ee"))
    states = forward_pass(tree, np.zeros(2))
    np.testing.assert_allclose(states[1].coord, [2.0, 0.0], atol=1e-15)


def test_forward_rejects_wrong_q_shape():
    tree = single_leaf_tree(2, raw_leaf([0.0, 0.0], np.eye(2)))
    with pytest.raises(StructureError):
        forward_pass(tree, np.zeros(3))


def test_dimension_mismatch_names_edge():
    bad = LinearMap(np.ones((2, 2)))
    with pytest.raises(StructureError, match="edge 0->1"):
        TransformTree([2, 1], [Edge(0, 1, bad)], {1: raw_leaf([0.0], np.eye(1))})


# ---------------------------------------------------------------------------
# leaf evaluation
# ---------------------------------------------------------------------------


def test_leaf_evaluate_weighted_force():
    tree = single_leaf_tree(2, raw_leaf([1.0, -1.0], 2.0 * np.eye(2)))
    states = leaf_evaluate(tree, forward_pass(tree, np.zeros(2)), None)
    np.testing.assert_allclose(states[1].pulled_force, [2.0, -2.0])


def test_leaf_evaluate_natural_gradient_ignores_metric():
    for weight in (0.5, 3.0):
        leaf = handcrafted_attractor(np.zeros(2), gain=1.0, weight=weight)
        tree = single_leaf_tree(2, leaf)
        states = leaf_evaluate(tree, forward_pass(tree, np.array([1.0, 0.0])), None)
        np.testing.assert_allclose(states[1].pulled_force, [-1.0, 0.0])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def test_backward_single_child_pullback():
    tree = single_leaf_tree(2, raw_leaf([1.0, 0.0], np.eye(2)),
                            mapping=LinearMap(2.0 * np.eye(2)))
    states = forward_pass(tree, np.zeros(2))
    states[1].pulled_force = np.array([1.0, 0.0])
    states[1].pulled_metric = np.eye(2)
    backward_pass(tree, states)
    np.testing.assert_allclose(states[0].pulled_force, [2.0, 0.0])
    np.testing.assert_allclose(states[0].pulled_metric, 4.0 * np.eye(2))


def test_backward_two_children_sum():
    tree = TransformTree(
        [2, 2, 2],
        [Edge(0, 1, IdentityMap(2)), Edge(0, 2, IdentityMap(2))],
        {1: raw_leaf([1.0, 0.0], np.eye(2)), 2: raw_leaf([0.0, 1.0], np.eye(2))},
    )
    states = forward_pass(tree, np.zeros(2))
    leaf_evaluate(tree, states, None)
    backward_pass(tree, states)
    np.testing.assert_allclose(states[0].pulled_force, [1.0, 1.0])
    np.testing.assert_allclose(states[0].pulled_metric, 2.0 * np.eye(2))


def test_backward_matches_flat_composition_on_random_trees(rng):
    # collapsing the tree to per-leaf chained maps must give the same root
    for seed in range(10):
        tree, params = random_tree(seed + 900, max_depth=3)
        q = rng.uniform(-1.0, 1.0, tree.root_dim)
        states = forward_pass(tree, q, params)
        leaf_evaluate(tree, states, params)
        backward_pass(tree, states)
        A = np.zeros((tree.root_dim, tree.root_dim))
        b = np.zeros(tree.root_dim)
        for leaf in tree.leaves:
            x = q
            prev = None
            J = np.eye(tree.root_dim)
            for edge in tree.path_to(leaf):
                prev = x
                x, J_edge = edge.map.value_and_jacobian(x, params)
                J = J_edge @ J
            p, M = tree.leaf_policies[leaf].evaluate(x, params, parent_coord=prev)
            A += J.T @ M @ J
            b += J.T @ p
        np.testing.assert_allclose(states[0].pulled_force, b, atol=1e-12)
        np.testing.assert_allclose(states[0].pulled_metric, A, atol=1e-12)


def test_backward_metrics_stay_symmetric_psd(rng):
    for seed in range(20):
        tree, params = random_tree(seed + 300)
        q = rng.uniform(-1.0, 1.0, tree.root_dim)
        states = forward_pass(tree, q, params)
        leaf_evaluate(tree, states, params)
        backward_pass(tree, states)
        for i in range(tree.n_nodes):
            M = states[i].pulled_metric
            np.testing.assert_allclose(M, M.T, atol=1e-12)
            assert np.linalg.eigvalsh(M).min() >= -1e-10


# ---------------------------------------------------------------------------
# resolve
# ---------------------------------------------------------------------------


def test_resolve_diagonal_and_zero_force():
    tree = single_leaf_tree(2, raw_leaf([0.0, 0.0], np.eye(2)))
    states = forward_pass(tree, np.zeros(2))
    states[0].pulled_metric = 2.0 * np.eye(2)
    states[0].pulled_force = np.array([2.0, 4.0])
    np.testing.assert_allclose(resolve(states), [1.0, 2.0])
    states[0].pulled_metric = np.eye(1)
    states[0].pulled_force = np.zeros(1)
    np.testing.assert_allclose(resolve(states), [0.0])


def test_resolve_singular_metric_raises():
    tree = single_leaf_tree(2, raw_leaf([0.0, 0.0], np.eye(2)))
    states = forward_pass(tree, np.zeros(2))
    states[0].pulled_metric = np.array([[1.0, 1.0], [1.0, 1.0]])
    states[0].pulled_force = np.array([1.0, 1.0])
    with pytest.raises(SingularMetricError):
        resolve(states)


def test_resolve_regularized_solves_shifted_system(rng):
    tree = single_leaf_tree(2, raw_leaf([0.0, 0.0], np.eye(2)))
    states = forward_pass(tree, np.zeros(2))
    B = rng.normal(0.0, 1.0, (2, 2))
    M = B @ B.T + 0.5 * np.eye(2)
    p = rng.normal(0.0, 1.0, 2)
    states[0].pulled_metric = M
    states[0].pulled_force = p
    u = resolve(states, regularization=0.1)
    np.testing.assert_allclose((M + 0.1 * np.eye(2)) @ u, p, atol=1e-12)


# ---------------------------------------------------------------------------
# evaluate_policy / flat_solve
# ---------------------------------------------------------------------------


def test_single_leaf_policy_returns_leaf_velocity(rng):
    for _ in range(3):
        v = rng.uniform(-1.0, 1.0, 2)
        B = rng.normal(0.0, 1.0, (2, 2))
        M = B @ B.T + 0.4 * np.eye(2)
        tree = single_leaf_tree(2, raw_leaf(v, M))
        q = rng.uniform(-1.0, 1.0, 2)
        np.testing.assert_allclose(evaluate_policy(tree, q), v, atol=1e-12)
        np.testing.assert_allclose(flat_solve(tree, q), v, atol=1e-12)


def test_two_equal_leaves_average():
    v1 = np.array([1.0, 0.0])
    v2 = np.array([0.0, 2.0])
    tree = TransformTree(
        [2, 2, 2],
        [Edge(0, 1, IdentityMap(2)), Edge(0, 2, IdentityMap(2))],
        {1: raw_leaf(v1, np.eye(2)), 2: raw_leaf(v2, np.eye(2))},
    )
    np.testing.assert_allclose(evaluate_policy(tree, np.zeros(2)),
                               0.5 * (v1 + v2), atol=1e-14)


def test_arm_attractor_damper_matches_flat(rng):
    tree = TransformTree(
        [3, 2, 3],
        [Edge(0, 1, PlanarArmFK([1.0, 1.0, 1.0], "ee")), Edge(0, 2, IdentityMap(3))],
        {1: handcrafted_attractor([1.0, 1.0], gain=2.0, weight=1.5),
         2: handcrafted_damper(0.7, 3)},
    )
    for _ in range(5):
        q = rng.uniform(-1.0, 1.0, 3)
        np.testing.assert_allclose(evaluate_policy(tree, q),
                                   flat_solve(tree, q), atol=1e-10)


def test_flat_solve_rank_deficient_pullback_raises():
    # 1-D leaf fed by J = [1, 1]: the pulled-back metric has rank 1
    tree = single_leaf_tree(2, raw_leaf([6.0], 3.0 * np.eye(1)),
                            mapping=LinearMap(np.array([[1.0, 1.0]])))
    with pytest.raises(SingularMetricError):
        flat_solve(tree, np.zeros(2))
    with pytest.raises(SingularMetricError):
        evaluate_policy(tree, np.zeros(2))


def test_tree_flat_equivalence_sweep(rng):
    worst = 0.0
    for seed in range(40):
        tree, params = random_tree(seed)
        for _ in range(2):
            q = rng.uniform(-1.0, 1.0, tree.root_dim)
            dev = np.abs(evaluate_policy(tree, q, params)
                         - flat_solve(tree, q, params)).max()
            worst = max(worst, float(dev))
    assert worst <= 1e-10


def test_shared_ancestor_reuse_matches_independent_composition(rng):
    # two leaves under one kinematic branch: shared computation must not
    # change anything relative to composing each leaf separately
    fk = PlanarArmFK([1.0, 1.0, 1.0], "ee")
    tree = TransformTree(
        [3, 2, 2, 1, 3],
        [Edge(0, 1, fk), Edge(1, 2, IdentityMap(2)),
         Edge(1, 3, LinearMap(np.array([[0.5, -1.0]]))),
         Edge(0, 4, IdentityMap(3))],
        {2: handcrafted_attractor([0.5, 0.5]),
         3: raw_leaf([0.2], 2.0 * np.eye(1)),
         4: handcrafted_damper(0.5, 3)},
    )
    for _ in range(5):
        q = rng.uniform(-1.0, 1.0, 3)
        np.testing.assert_allclose(evaluate_policy(tree, q),
                                   flat_solve(tree, q), atol=1e-12)


def test_determinism_bit_identical(rng):
    tree, params = random_tree(77)
    q = rng.uniform(-1.0, 1.0, tree.root_dim)
    a = evaluate_policy(tree, q, params)
    b = evaluate_policy(tree, q, params)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# structural validation
# ---------------------------------------------------------------------------


def test_single_node_tree_root_is_the_leaf():
    tree = TransformTree([2], [], {0: raw_leaf([0.3, -0.1], 2.0 * np.eye(2))})
    q = np.array([0.5, 0.5])
    np.testing.assert_allclose(evaluate_policy(tree, q), [0.3, -0.1], atol=1e-14)
    np.testing.assert_allclose(flat_solve(tree, q), [0.3, -0.1], atol=1e-14)


def test_validation_rejects_disconnected_and_cyclic_wiring():
    with pytest.raises(StructureError, match="not connected"):
        TransformTree([2, 2, 2], [Edge(0, 1, IdentityMap(2))],
                      {1: raw_leaf([0.0, 0.0], np.eye(2)),
                       2: raw_leaf([0.0, 0.0], np.eye(2))})
    with pytest.raises(StructureError, match="topological"):
        TransformTree([2, 2], [Edge(1, 0, IdentityMap(2))],
                      {0: raw_leaf([0.0, 0.0], np.eye(2))})


def test_validation_requires_policy_on_every_leaf():
    with pytest.raises(StructureError, match="no policy"):
        TransformTree([2, 2], [Edge(0, 1, IdentityMap(2))], {})
    with pytest.raises(StructureError, match="not a leaf"):
        TransformTree(
            [2, 2, 2],
            [Edge(0, 1, IdentityMap(2)), Edge(1, 2, IdentityMap(2))],
            {1: raw_leaf([0.0, 0.0], np.eye(2)),
             2: raw_leaf([0.0, 0.0], np.eye(2))},
        )


def test_validation_rejects_double_parent():
    with pytest.raises(StructureError, match="more than one parent"):
        TransformTree(
            [2, 2, 2],
            [Edge(0, 2, IdentityMap(2)), Edge(1, 2, IdentityMap(2)),
             Edge(0, 1, IdentityMap(2))],
            {2: raw_leaf([0.0, 0.0], np.eye(2))},
        )
