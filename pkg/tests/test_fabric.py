import math

import numpy as np
import pytest

from fabricarm.fabric import (
    BARRIER,
    FINITE,
    FabricParams,
    FinslerEnergy,
    Geometry,
    Spec,
    constant_metric_energy,
    energize,
    euclidean_energy,
    forced_fabric_step,
    geometry_to_spec,
    joint_limit_fabric,
    obstacle_fabric,
    path_invariance_check,
    pull,
    quadratic_energy,
    sum_specs,
)
from fabricarm.kinematics import ConfigurationState, TaskMap, TaskState, compose
from fabricarm.numutil import integrate_second_order

RNG = np.random.default_rng(11)


def random_spd(dim, rng=RNG):
    A = rng.normal(size=(dim, dim))
    return A @ A.T + dim * np.eye(dim)


def wavy_energy(dim, rng=RNG):
    """Position-dependent SPD metric G(x) = (1 + 0.3 sin(w.x)) B with analytic dG."""
    B = random_spd(dim, rng)
    w = rng.uniform(0.5, 1.5, dim)

    def G(x):
        return (1.0 + 0.3 * math.sin(w @ x)) * B

    def dG(x):
        c = 0.3 * math.cos(w @ x)
        return c * w[:, None, None] * B[None, :, :]

    return quadratic_energy(G, dG, dim)


def sine_task_map(n_in, n_out, rng=RNG):
    """Smooth map x = A sin(b q + c) with analytic Jacobian and curvature."""
    A = rng.normal(size=(n_out, n_in))
    b = rng.uniform(0.5, 1.5, n_in)
    c = rng.uniform(-1, 1, n_in)
    return TaskMap(
        n_out,
        lambda q: A @ np.sin(b * q + c),
        lambda q: A @ np.diag(b * np.cos(b * q + c)),
        lambda q, qdot: A @ (-(b**2) * np.sin(b * q + c) * qdot**2),
    )


class TestSpec:
    def test_rejects_asymmetric_metric(self):
        with pytest.raises(ValueError):
            Spec(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2))

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError):
            Spec(np.eye(2), np.zeros(3))

    def test_resolve(self):
        s = Spec(2.0 * np.eye(2), np.array([2.0, -4.0]))
        assert np.allclose(s.resolve(eps_reg=0.0), [-1.0, 2.0])


class TestEnergize:
    def test_zero_policy_stays_zero(self):
        e = euclidean_energy(2)
        out = energize(np.zeros(2), e, TaskState([1.0, 0.0], [0.5, 0.5]))
        assert np.allclose(out, 0.0)

    def test_orthogonal_attractor_unchanged(self):
        e = euclidean_energy(2)
        x = np.array([1.0, 0.0])
        v = np.array([0.0, 2.0])  # perpendicular to x
        out = energize(-x, e, TaskState(x, v))
        assert np.allclose(out, -x)

    def test_zero_velocity_returns_input(self):
        e = euclidean_energy(3)
        pi = np.array([1.0, -2.0, 0.5])
        out = energize(pi, e, TaskState(np.ones(3), np.zeros(3)))
        assert np.allclose(out, pi)

    def test_rejects_nonfinite(self):
        e = euclidean_energy(2)
        with pytest.raises(ValueError):
            energize(np.array([np.nan, 0.0]), e, TaskState(np.zeros(2), np.ones(2)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_conserves_energy_constant_metric(self, seed):
        # integration oracle: 1 s of the energized flow at dt = 1e-4
        rng = np.random.default_rng(seed)
        M = random_spd(3, rng)
        e = constant_metric_energy(M)
        a = rng.normal(size=3)

        def accel(x, v):
            return energize(a - x, e, TaskState(x, v))

        x0, v0 = rng.normal(size=3), rng.normal(size=3)
        xs, vs = integrate_second_order(accel, x0, v0, 1e-4, 10_000)
        L0 = e.energy(x0, v0)
        L1 = e.energy(xs[-1], vs[-1])
        assert abs(L1 - L0) / L0 < 1e-5

    @pytest.mark.parametrize("seed", [3, 4])
    def test_conserves_energy_position_dependent(self, seed):
        rng = np.random.default_rng(seed)
        e = wavy_energy(2, rng)

        def accel(x, v):
            return energize(-x, e, TaskState(x, v))

        x0, v0 = rng.normal(size=2), rng.normal(size=2)
        xs, vs = integrate_second_order(accel, x0, v0, 1e-4, 10_000)
        L0 = e.energy(x0, v0)
        assert abs(e.energy(xs[-1], vs[-1]) - L0) / L0 < 1e-5


class TestFinslerEnergyProperties:
    def test_degree_two_homogeneity(self):
        e = wavy_energy(3)
        for _ in range(50):
            x, v = RNG.normal(size=3), RNG.normal(size=3)
            a = RNG.uniform(0.1, 3.0)
            L = e.energy(x, v)
            assert abs(e.energy(x, a * v) - a**2 * L) / max(abs(L), 1e-12) < 1e-8

    def test_metric_positive_definite(self):
        for maker in (lambda: obstacle_fabric(BARRIER)[1], lambda: obstacle_fabric(FINITE)[1]):
            e = maker()
            for _ in range(50):
                x = np.array([RNG.uniform(0.01, 3.0)])
                v = RNG.normal(size=1)
                assert np.linalg.eigvalsh(e.metric(x, v)).min() > 0

    def test_euler_lagrange_flow_conserves(self):
        # any trajectory of metric*xddot + force = 0 holds the energy constant
        e = wavy_energy(2, np.random.default_rng(9))

        def accel(x, v):
            return np.linalg.solve(e.metric(x, v), -e.force(x, v))

        x0, v0 = np.array([0.3, -0.2]), np.array([0.8, 0.4])
        xs, vs = integrate_second_order(accel, x0, v0, 1e-3, 2_000)
        L0 = e.energy(x0, v0)
        assert abs(e.energy(xs[-1], vs[-1]) - L0) / L0 < 1e-4


class TestGeometryHomogeneity:
    @pytest.mark.parametrize("variant", [BARRIER, FINITE])
    def test_obstacle_geometry_hd2(self, variant):
        geo, _ = obstacle_fabric(variant)
        for _ in range(100):
            x = np.array([RNG.uniform(0.05, 2.0)])
            v = RNG.normal(size=1)
            a = RNG.uniform(0.0, 3.0)
            h = geo.accel(x, v)
            ha = geo.accel(x, a * v)
            assert np.abs(ha - a**2 * h).max() <= 1e-6 * max(1.0, np.abs(h).max())


class TestPathInvariance:
    def test_straight_line_geometry(self):
        geo = Geometry(lambda x, v: np.zeros(2), 2)
        dev = path_invariance_check(geo, euclidean_energy(2), [0.0, 0.0], [1.0, 0.5])
        assert dev < 1e-9

    def test_hd2_repeller_1d(self):
        geo, energy = obstacle_fabric(BARRIER)
        dev = path_invariance_check(geo, energy, [1.0], [-0.5])
        assert dev < 1e-3

    def test_hd2_bending_geometry_2d(self):
        # velocity-direction-dependent HD2 field: bends, still path-invariant
        def accel(x, v):
            s = v @ v
            return np.array([-v[1], v[0]]) * math.sqrt(s) * 0.5

        dev = path_invariance_check(Geometry(accel, 2), euclidean_energy(2), [0.0, 0.0], [1.0, 0.0])
        assert dev < 1e-3

    def test_non_hd2_geometry_fails(self):
        # degree-0 constant pull: raw path is a parabola, energized path is not
        geo = Geometry(lambda x, v: np.array([0.0, -1.0]), 2)
        dev = path_invariance_check(geo, euclidean_energy(2), [0.0, 0.0], [1.0, 0.0])
        assert dev > 1e-3

    def test_divergent_trajectory_raises(self):
        geo = Geometry(lambda x, v: 100.0 * x, 1)  # exponential blow-up
        with pytest.raises(RuntimeError):
            path_invariance_check(geo, euclidean_energy(1), [1.0], [1.0], duration=5.0)


class TestPull:
    def test_identity_map_is_identity(self):
        n = 3
        tm = TaskMap(n, lambda q: q.copy(), lambda q: np.eye(n), lambda q, qd: np.zeros(n))
        spec = Spec(random_spd(n), RNG.normal(size=n))
        state = ConfigurationState(RNG.normal(size=n), RNG.normal(size=n))
        out = pull(spec, tm, state)
        assert np.allclose(out.M, spec.M)
        assert np.allclose(out.xi, spec.xi)

    def test_constant_linear_map(self):
        A = RNG.normal(size=(2, 3))
        tm = TaskMap(2, lambda q: A @ q, lambda q: A.copy(), lambda q, qd: np.zeros(2))
        spec = Spec(random_spd(2), RNG.normal(size=2))
        state = ConfigurationState(RNG.normal(size=3), RNG.normal(size=3))
        out = pull(spec, tm, state)
        assert np.allclose(out.M, A.T @ spec.M @ A)
        assert np.allclose(out.xi, A.T @ spec.xi)

    def test_dim_mismatch(self):
        tm = TaskMap(2, lambda q: q[:2], lambda q: np.eye(2, 3), lambda q, qd: np.zeros(2))
        with pytest.raises(ValueError):
            pull(Spec(np.eye(3), np.zeros(3)), tm, ConfigurationState(np.zeros(3), np.zeros(3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_composition_consistency(self, seed):
        # pulling через the composed map == pulling in two stages
        rng = np.random.default_rng(seed)
        inner = sine_task_map(3, 4, rng)
        outer = sine_task_map(4, 2, rng)
        spec = Spec(random_spd(2, rng), rng.normal(size=2))
        q = rng.uniform(-1, 1, 3)
        qdot = rng.normal(size=3)
        state = ConfigurationState(q, qdot)

        direct = pull(spec, compose(outer, inner), state)

        x1 = inner.value(q)
        x1dot = inner.jacobian(q) @ qdot
        mid = pull(spec, outer, ConfigurationState(x1, x1dot))
        staged = pull(mid, inner, state)

        scale = max(np.abs(direct.M).max(), np.abs(direct.xi).max(), 1.0)
        assert np.abs(direct.M - staged.M).max() / scale < 1e-8
        assert np.abs(direct.xi - staged.xi).max() / scale < 1e-8


class TestSumSpecs:
    def test_single_spec_identity(self):
        s = Spec(random_spd(2), RNG.normal(size=2))
        out = sum_specs([s])
        assert np.allclose(out.M, s.M) and np.allclose(out.xi, s.xi)

    def test_two_identity_specs(self):
        s = Spec(np.eye(2), np.zeros(2))
        out = sum_specs([s, s])
        assert np.allclose(out.M, 2 * np.eye(2))
        assert np.allclose(out.xi, 0.0)

    def test_associative(self):
        specs = [Spec(random_spd(3), RNG.normal(size=3)) for _ in range(3)]
        left = sum_specs([sum_specs(specs[:2]), specs[2]])
        right = sum_specs([specs[0], sum_specs(specs[1:])])
        assert np.allclose(left.M, right.M) and np.allclose(left.xi, right.xi)

    def test_empty_and_mismatch_raise(self):
        with pytest.raises(ValueError):
            sum_specs([])
        with pytest.raises(ValueError):
            sum_specs([Spec(np.eye(2), np.zeros(2)), Spec(np.eye(3), np.zeros(3))])


class TestGeometryToSpec:
    def test_zero_geometry_euclidean(self):
        geo = Geometry(lambda x, v: np.zeros(2), 2)
        spec = geometry_to_spec(geo, euclidean_energy(2), TaskState(np.ones(2), np.ones(2)))
        assert np.allclose(spec.M, np.eye(2))
        assert np.allclose(spec.xi, 0.0)

    def test_round_trip_1d_repeller(self):
        geo, energy = obstacle_fabric(BARRIER)
        state = TaskState([1.0], [-1.0])
        spec = geometry_to_spec(geo, energy, state)
        expect = energize(geo.accel(state.x, state.xdot), energy, state)
        assert np.allclose(spec.resolve(eps_reg=0.0), expect)

    def test_round_trip_random(self):
        e = wavy_energy(3)
        geo = Geometry(lambda x, v: np.sin(x) * (v @ v), 3)
        for _ in range(20):
            state = TaskState(RNG.normal(size=3), RNG.normal(size=3))
            spec = geometry_to_spec(geo, e, state)
            expect = energize(geo.accel(state.x, state.xdot), e, state)
            err = np.abs(spec.resolve(eps_reg=0.0) - expect).max()
            assert err / max(1.0, np.abs(expect).max()) < 1e-10


class TestObstacleFabric:
    def test_receding_geometry_is_zero(self):
        geo, _ = obstacle_fabric(BARRIER)
        assert geo.accel(np.array([0.5]), np.array([1.0]))[0] == 0.0
        assert geo.accel(np.array([0.5]), np.array([0.0]))[0] == 0.0

    def test_finite_metric_limit(self):
        _, energy = obstacle_fabric(FINITE)
        m_far = energy.metric(np.array([50.0]), np.zeros(1))[0, 0]
        assert m_far == pytest.approx(0.1, rel=1e-6)

    @pytest.mark.parametrize("variant", [BARRIER, FINITE])
    def test_energized_rollout_conserves(self, variant):
        geo, energy = obstacle_fabric(variant)

        def accel(x, v):
            return energize(geo.accel(x, v), energy, TaskState(x, v))

        x0, v0 = np.array([1.5]), np.array([-0.8])
        xs, vs = integrate_second_order(accel, x0, v0, 1e-3, 2_000)
        L0 = energy.energy(x0, v0)
        assert abs(energy.energy(xs[-1], vs[-1]) - L0) / L0 < 1e-4

    def test_penetration_clamp_keeps_finite(self):
        geo, energy = obstacle_fabric(BARRIER)
        state = TaskState([-0.2], [-1.0])
        out = energize(geo.accel(state.x, state.xdot), energy, state)
        assert np.all(np.isfinite(out))

    def test_variant_param_disagreement(self):
        with pytest.raises(ValueError):
            obstacle_fabric(BARRIER, FabricParams(variant=FINITE))

    def test_barrier_safety_property(self):
        """Unforced barrier fabric never crosses the contact surface.

        Early exit once receding (the energized flow then only increases x):
        the minimum over the remaining horizon is the current x.
        """
        geo, energy = obstacle_fabric(BARRIER)

        def accel(x, v):
            return energize(geo.accel(x, v), energy, TaskState(x, v))

        rng = np.random.default_rng(42)
        dt, horizon = 1e-3, 10.0
        for _ in range(100):
            x = np.array([rng.uniform(0.2, 2.0)])
            v = np.array([rng.uniform(-2.0, 2.0)])
            t = 0.0
            while t < horizon:
                if v[0] >= 0.0 or abs(v[0]) < 1e-8:
                    break
                (xs, vs) = integrate_second_order(accel, x, v, dt, 200)
                assert np.all(xs > 0.0), f"contact crossed from x0={xs[0]}"
                x, v = xs[-1], vs[-1]
                t += 200 * dt
            assert x[0] > 0.0


class TestJointLimitFabric:
    def test_default_gain_is_gentler(self):
        geo, _ = joint_limit_fabric()
        x, v = np.array([0.5]), np.array([-1.0])
        assert geo.accel(x, v)[0] == pytest.approx(0.1 / 0.5 * 1.0)

    def test_receding_zero(self):
        geo, _ = joint_limit_fabric()
        assert geo.accel(np.array([0.5]), np.array([0.3]))[0] == 0.0

    def test_energized_rollout_conserves(self):
        geo, energy = joint_limit_fabric()

        def accel(x, v):
            return energize(geo.accel(x, v), energy, TaskState(x, v))

        xs, vs = integrate_second_order(accel, np.array([1.0]), np.array([-0.5]), 1e-3, 2_000)
        L0 = energy.energy(np.array([1.0]), np.array([-0.5]))
        assert abs(energy.energy(xs[-1], vs[-1]) - L0) / L0 < 1e-4


class TestForcedFabricStep:
    def test_pure_damping(self):
        spec = Spec(np.eye(3), np.zeros(3))
        v = np.array([0.5, -1.0, 2.0])
        out = forced_fabric_step(spec, np.zeros(3), 1.0, ConfigurationState(np.zeros(3), v))
        assert np.allclose(out, -v, atol=1e-5)

    def test_pure_forcing(self):
        spec = Spec(np.eye(2), np.zeros(2))
        g = np.array([1.0, -2.0])
        out = forced_fabric_step(spec, g, 1.0, ConfigurationState(np.zeros(2), np.zeros(2)))
        assert np.allclose(out, g, atol=1e-5)

    def test_matches_manual_assembly(self):
        specs = [Spec(random_spd(3), RNG.normal(size=3)) for _ in range(2)]
        state = ConfigurationState(RNG.normal(size=3), RNG.normal(size=3))
        forcing = RNG.normal(size=3)
        out = forced_fabric_step(sum_specs(specs), forcing, 2.0, state)
        M = specs[0].M + specs[1].M + 1e-6 * np.eye(3)
        manual = np.linalg.solve(M, -(specs[0].xi + specs[1].xi) + forcing) - 2.0 * state.qdot
        assert np.allclose(out, manual)

    def test_rejects_nonpositive_damping(self):
        with pytest.raises(ValueError):
            forced_fabric_step(Spec(np.eye(1), np.zeros(1)), np.zeros(1), 0.0,
                               ConfigurationState(np.zeros(1), np.zeros(1)))


class TestCombinationProperties:
    def test_square_jacobian_single_component_exact(self):
        # with one component and invertible J, resolving the pulled spec equals
        # the inverse-kinematic image of the task-space resolved acceleration
        rng = np.random.default_rng(5)
        tm = sine_task_map(3, 3, rng)
        spec = Spec(random_spd(3, rng), rng.normal(size=3))
        q, qdot = rng.uniform(-1, 1, 3), rng.normal(size=3)
        state = ConfigurationState(q, qdot)
        pulled = pull(spec, tm, state)
        lhs = pulled.resolve(eps_reg=0.0)
        J = tm.jacobian(q)
        rhs = np.linalg.solve(J, spec.resolve(eps_reg=0.0) - tm.curvature(q, qdot))
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_weighted_average_bounds_diagonal(self):
        # summed diagonal specs resolve to a per-axis weighted mean of the
        # component accelerations: bounded by the min and max along each axis
        rng = np.random.default_rng(6)
        for _ in range(50):
            k, dim = 4, 3
            metrics = rng.uniform(0.1, 5.0, size=(k, dim))
            accels = rng.normal(size=(k, dim))
            specs = [Spec(np.diag(m), -np.diag(m) @ a) for m, a in zip(metrics, accels)]
            combined = sum_specs(specs).resolve(eps_reg=0.0)
            for d in range(dim):
                lo, hi = accels[:, d].min(), accels[:, d].max()
                assert lo - 1e-9 <= combined[d] <= hi + 1e-9


class TestFabricParams:
    def test_json_round_trip(self):
        p = FabricParams(k_geo=0.7, p=2.0, variant=FINITE, m_base=0.2, k_m=3.0, l_m=0.4)
        q = FabricParams.from_json(p.to_json())
        assert q == p

    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError):
            FabricParams(variant="soft")

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            FabricParams(k_geo=0.0)
