import json
import math

import numpy as np
import pytest

from fabricarm.kinematics import (
    CollisionSphere,
    RobotModel,
    TaskMap,
    compose,
    default_arm,
    ee_task_map,
    forward_kinematics,
    joint_limit_maps,
    obstacle_distance_map,
    sphere_kinematics,
    sphere_point_map,
    wrap_angle,
)

RNG = np.random.default_rng(7)


def make_model(n=2, lengths=None):
    lengths = lengths or (1.0,) * n
    return RobotModel(
        link_lengths=tuple(lengths),
        joint_lower=(-math.pi,) * len(lengths),
        joint_upper=(math.pi,) * len(lengths),
        collision_spheres=(CollisionSphere(0, 0.5, 0.1), CollisionSphere(len(lengths) - 1, lengths[-1], 0.1)),
    )


# --- independent oracle: naive 3x3 homogeneous-transform chain ---

def transform_chain_fk(lengths, q, link, offset):
    T = np.eye(3)
    for i in range(link):
        c, s = math.cos(q[i]), math.sin(q[i])
        T = T @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ np.array(
            [[1, 0, lengths[i]], [0, 1, 0], [0, 0, 1]]
        )
    c, s = math.cos(q[link]), math.sin(q[link])
    T = T @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ np.array(
        [[1, 0, offset], [0, 1, 0], [0, 0, 1]]
    )
    return T[:2, 2]


def fd_jacobian(task_map, q, h=1e-6):
    n = len(q)
    J = np.zeros((task_map.output_dim, n))
    for j in range(n):
        dq = np.zeros(n)
        dq[j] = h
        J[:, j] = (task_map.value(q + dq) - task_map.value(q - dq)) / (2 * h)
    return J


def fd_curvature(task_map, q, qdot, h=1e-6):
    # d/dt [J(q(t)) qdot] along q(t) = q + t*qdot, central difference in t
    jv = lambda t: task_map.jacobian(q + t * qdot) @ qdot
    return (jv(h) - jv(-h)) / (2 * h)


class TestForwardKinematics:
    def test_straight_chain(self):
        model = make_model(2)
        p, ang = forward_kinematics(model, [0.0, 0.0], 1, 1.0)
        assert np.allclose(p, [2.0, 0.0])
        assert ang == pytest.approx(0.0)

    def test_first_joint_rotated(self):
        model = make_model(2)
        p, ang = forward_kinematics(model, [math.pi / 2, 0.0], 1, 1.0)
        assert np.allclose(p, [0.0, 2.0], atol=1e-12)
        assert ang == pytest.approx(math.pi / 2)

    def test_both_joints_rotated(self):
        model = make_model(2)
        p, ang = forward_kinematics(model, [math.pi / 2, math.pi / 2], 1, 1.0)
        assert np.allclose(p, [-1.0, 1.0], atol=1e-12)
        assert ang == pytest.approx(math.pi)

    def test_matches_transform_chain_oracle(self):
        lengths = (0.7, 1.1, 0.4)
        model = make_model(3, lengths)
        for _ in range(25):
            q = RNG.uniform(-math.pi, math.pi, 3)
            link = int(RNG.integers(0, 3))
            off = float(RNG.uniform(0, lengths[link]))
            p, _ = forward_kinematics(model, q, link, off)
            assert np.allclose(p, transform_chain_fk(lengths, q, link, off), atol=1e-12)

    def test_link_index_out_of_range(self):
        model = make_model(2)
        with pytest.raises(IndexError):
            forward_kinematics(model, [0.0, 0.0], 2, 0.5)

    def test_base_offset(self):
        model = RobotModel((1.0,), (-1.0,), (1.0,), base_position=(3.0, -1.0))
        p, _ = forward_kinematics(model, [0.0], 0, 1.0)
        assert np.allclose(p, [4.0, -1.0])

    def test_lipschitz_in_q(self):
        model = make_model(3, (0.7, 1.1, 0.4))
        bound = sum(model.link_lengths)
        ee = ee_task_map(model)
        for _ in range(50):
            q = RNG.uniform(-math.pi, math.pi, 3)
            dq = RNG.normal(0, 1e-3, 3)
            dx = ee.value(q + dq)[:2] - ee.value(q)[:2]
            assert np.linalg.norm(dx) <= bound * np.linalg.norm(dq) + 1e-12


class TestEndEffectorMap:
    def test_pose_at_zero(self):
        ee = ee_task_map(make_model(2))
        assert np.allclose(ee.value(np.zeros(2)), [2.0, 0.0, 0.0])

    def test_jacobian_rows_at_zero(self):
        ee = ee_task_map(make_model(2))
        J = ee.jacobian(np.zeros(2))
        # dy/dq1 = 2 (whole arm sweeps), dy/dq2 = 1 (distal link only)
        assert J[1, 0] == pytest.approx(2.0)
        assert J[1, 1] == pytest.approx(1.0)
        assert np.allclose(J[2], [1.0, 1.0])

    def test_zero_velocity_curvature(self):
        ee = ee_task_map(make_model(3))
        q = RNG.uniform(-2, 2, 3)
        assert np.allclose(ee.curvature(q, np.zeros(3)), 0.0)


class TestObstacleDistanceMap:
    def test_normalized_distance(self):
        model = make_model(2)
        sphere = CollisionSphere(1, 1.0, 0.1)
        dist = obstacle_distance_map(model, sphere, (4.0, 0.0), 0.9)
        assert dist.value(np.zeros(2))[0] == pytest.approx(1.0)

    def test_contact_is_zero(self):
        model = make_model(2)
        sphere = CollisionSphere(1, 1.0, 0.1)
        dist = obstacle_distance_map(model, sphere, (3.0, 0.0), 0.9)
        assert dist.value(np.zeros(2))[0] == pytest.approx(0.0)

    def test_rejects_bad_radius(self):
        model = make_model(2)
        with pytest.raises(ValueError):
            obstacle_distance_map(model, model.collision_spheres[0], (1.0, 1.0), 0.0)


def random_task_maps(model):
    maps = [ee_task_map(model), sphere_point_map(model, model.collision_spheres[0])]
    maps += joint_limit_maps(model)
    maps.append(obstacle_distance_map(model, model.collision_spheres[1], (1.4, 0.9), 0.3))
    return maps


class TestDerivativeConsistency:
    """Analytic Jacobians and curvature terms against finite differences."""

    def test_jacobians_match_fd(self):
        model = make_model(3, (0.8, 1.0, 0.5))
        maps = random_task_maps(model)
        for _ in range(100):
            q = RNG.uniform(-2.5, 2.5, 3)
            for tm in maps:
                J = tm.jacobian(q)
                Jfd = fd_jacobian(tm, q)
                scale = max(1.0, np.abs(Jfd).max())
                assert np.abs(J - Jfd).max() / scale < 1e-5

    def test_curvature_matches_fd(self):
        model = make_model(3, (0.8, 1.0, 0.5))
        maps = random_task_maps(model)
        for _ in range(100):
            q = RNG.uniform(-2.5, 2.5, 3)
            qdot = RNG.normal(0, 1.0, 3)
            for tm in maps:
                c = tm.curvature(q, qdot)
                cfd = fd_curvature(tm, q, qdot)
                scale = max(1.0, np.abs(cfd).max())
                assert np.abs(c - cfd).max() / scale < 1e-4

    def test_curvature_identity_along_smooth_path(self):
        # d/dt[J qdot] - J qddot == Jdot qdot for q(t) = a + b sin(w t)
        model = make_model(3, (0.8, 1.0, 0.5))
        ee = ee_task_map(model)
        a = RNG.uniform(-1, 1, 3)
        b = RNG.uniform(-1, 1, 3)
        w = np.array([1.3, 0.7, 2.1])
        q = lambda t: a + b * np.sin(w * t)
        qd = lambda t: b * w * np.cos(w * t)
        qdd = lambda t: -b * w**2 * np.sin(w * t)
        t0, h = 0.4, 1e-5
        jv = lambda t: ee.jacobian(q(t)) @ qd(t)
        lhs = (jv(t0 + h) - jv(t0 - h)) / (2 * h) - ee.jacobian(q(t0)) @ qdd(t0)
        rhs = ee.curvature(q(t0), qd(t0))
        assert np.abs(lhs - rhs).max() / max(1.0, np.abs(rhs).max()) < 1e-4


class TestJointLimitMaps:
    def test_margins(self):
        model = RobotModel((1.0, 1.0), (-1.0, -1.0), (1.0, 1.0))
        maps = joint_limit_maps(model)
        assert len(maps) == 4
        q = np.array([-1.0, 0.0])
        assert maps[0].value(q)[0] == pytest.approx(0.0)   # joint 0 at lower bound
        assert maps[2].value(q)[0] == pytest.approx(1.0)   # joint 1 midpoint, lower margin
        assert maps[3].value(q)[0] == pytest.approx(1.0)   # joint 1 midpoint, upper margin

    def test_jacobian_rows_are_signed_basis(self):
        model = RobotModel((1.0, 1.0), (-1.0, -1.0), (1.0, 1.0))
        maps = joint_limit_maps(model)
        q = np.zeros(2)
        assert np.allclose(maps[0].jacobian(q), [[1.0, 0.0]])
        assert np.allclose(maps[1].jacobian(q), [[-1.0, 0.0]])
        assert np.allclose(maps[3].jacobian(q), [[0.0, -1.0]])


class TestModelValidation:
    def test_rejects_nonpositive_length(self):
        with pytest.raises(ValueError):
            RobotModel((0.0,), (-1.0,), (1.0,))

    def test_rejects_inverted_limits(self):
        with pytest.raises(ValueError):
            RobotModel((1.0,), (1.0,), (-1.0,))

    def test_rejects_sphere_off_chain(self):
        with pytest.raises(ValueError):
            RobotModel((1.0,), (-1.0,), (1.0,), (CollisionSphere(3, 0.1, 0.1),))

    def test_json_round_trip(self):
        model = default_arm(4)
        clone = RobotModel.from_json(json.loads(json.dumps(model.to_json())))
        assert clone == model


class TestSphereKinematicsBatch:
    def test_matches_per_sphere_maps(self):
        model = default_arm(4)
        q = RNG.uniform(-2, 2, 4)
        qdot = RNG.normal(0, 1, 4)
        batch = sphere_kinematics(model, q, qdot)
        for i, s in enumerate(model.collision_spheres):
            tm = sphere_point_map(model, s)
            assert np.allclose(batch.positions[i], tm.value(q))
            assert np.allclose(batch.jacobians[i], tm.jacobian(q))
            assert np.allclose(batch.curvatures[i], tm.curvature(q, qdot))
            assert np.allclose(batch.velocities[i], tm.jacobian(q) @ qdot)


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert np.allclose(wrap_angle(np.array([0.1, 2 * math.pi + 0.1])), [0.1, 0.1])


def test_compose_chain_rule():
    model = make_model(3, (0.8, 1.0, 0.5))
    inner = ee_task_map(model)

    # outer: smooth nonlinear R^3 -> R^2 with analytic derivatives
    A = RNG.normal(size=(2, 3))
    b = RNG.uniform(0.5, 1.5, 3)

    def o_value(x):
        return A @ np.sin(b * x)

    def o_jacobian(x):
        return A @ np.diag(b * np.cos(b * x))

    def o_curvature(x, xdot):
        return A @ (-(b**2) * np.sin(b * x) * xdot**2)

    outer = TaskMap(2, o_value, o_jacobian, o_curvature)
    comp = compose(outer, inner)
    for _ in range(20):
        q = RNG.uniform(-2, 2, 3)
        qdot = RNG.normal(0, 1, 3)
        assert np.allclose(comp.jacobian(q), fd_jacobian(comp, q), atol=1e-5)
        assert np.allclose(comp.curvature(q, qdot), fd_curvature(comp, q, qdot), atol=1e-4)
