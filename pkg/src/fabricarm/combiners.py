"""Whole-body joint-acceleration policies for the planar arm.

Four combiners share one avoidance machinery:

- vanilla fabrics: hand-designed goal attractor forcing the avoidance fabric
- vanilla learned policy: the task-space network pulled to joints, nothing else
- fpm: the fabric forced by the pulled network acceleration
- cpm: the combined system energized against the stack's Finsler energy plus
  a goal-potential correction built from the network's latent encoder
- ik baseline: damped-least-squares velocity tracking with naive per-sphere
  repulsion, kept deliberately simple as a point of comparison

The per-tick hot path evaluates every (collision sphere x obstacle) pair and
all joint-limit coordinates in vectorized form; `reference_stack_spec`
assembles the same sum through the per-component objects and is used to pin
the two paths against each other in tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fabric import (
    EPS_DIV,
    EPS_REG,
    FINITE,
    FabricComponent,
    FabricParams,
    Spec,
    _metric_fns,
    geometry_to_spec,
    joint_limit_fabric,
    obstacle_fabric,
    pull,
    sum_specs,
)
from .kinematics import (
    ConfigurationState,
    RobotModel,
    TaskMap,
    ee_task_map,
    joint_limit_maps,
    obstacle_distance_map,
    sphere_kinematics,
    wrap_angle,
)
from .policy.network import PolicyNetwork

VANILLA_FABRICS = "fabrics"
VANILLA_PUMA = "puma"
FPM = "fpm"
CPM = "cpm"
IK_BASELINE = "ik"
COMBINER_KINDS = (VANILLA_FABRICS, VANILLA_PUMA, FPM, CPM, IK_BASELINE)


@dataclass(frozen=True)
class CombinerConfig:
    kind: str = FPM
    beta: float = 2.0                  # uniform configuration-space damping (1/s)
    eps_v: float = 1e-6                # rest-state threshold for the gamma branch
    accel_clamp: float = 50.0          # |qddot|_inf bound (rad/s^2)
    vel_clamp: float = 4.0             # |qdot|_inf bound, applied by the simulator
    forcing_metric: np.ndarray | None = None   # SPD metric on the task space; None = identity
    forcing_mode: str = "spec"         # "spec": forcing enters the resolved system;
                                       # "raw": added after resolving the fabric
    control_dt: float = 1.0 / 30.0     # tick period, used by the ik baseline
    psi_scale: float = 0.1             # positive rescaling of the goal potential (cpm);
                                       # compatibility is invariant under positive scaling
    attractor_gain: float = 10.0       # vanilla-fabrics smooth-norm potential
    attractor_sharpness: float = 10.0
    dls_lambda: float = 0.1            # ik baseline damping
    repulse_gain: float = 0.4          # ik baseline repulsion strength
    repulse_range: float = 0.3         # surface distance where repulsion engages

    def __post_init__(self):
        if self.kind not in COMBINER_KINDS:
            raise ValueError(f"unknown combiner kind {self.kind!r}")
        if self.beta <= 0 or self.accel_clamp <= 0 or self.vel_clamp <= 0:
            raise ValueError("beta and clamps must be positive")
        if self.forcing_mode not in ("spec", "raw"):
            raise ValueError("forcing_mode must be 'spec' or 'raw'")
        if self.forcing_metric is not None:
            M = np.asarray(self.forcing_metric, dtype=float)
            object.__setattr__(self, "forcing_metric", M)
            if np.max(np.abs(M - M.T)) > 1e-9 or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError("forcing metric must be symmetric positive definite")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "beta": self.beta,
            "eps_v": self.eps_v,
            "clamps": {"accel": self.accel_clamp, "vel": self.vel_clamp},
            "forcing_metric": "identity" if self.forcing_metric is None
            else self.forcing_metric.tolist(),
            "forcing_mode": self.forcing_mode,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CombinerConfig":
        clamps = data.get("clamps", {})
        fm = data.get("forcing_metric", "identity")
        return cls(
            kind=data.get("kind", FPM),
            beta=data.get("beta", 2.0),
            eps_v=data.get("eps_v", 1e-6),
            accel_clamp=clamps.get("accel", 50.0),
            vel_clamp=clamps.get("vel", 4.0),
            forcing_metric=None if fm == "identity" else np.array(fm, dtype=float),
            forcing_mode=data.get("forcing_mode", "spec"),
        )


@dataclass
class StepOutput:
    qddot: np.ndarray
    psi: float | None = None
    penetration: bool = False
    min_distance: float = np.inf
    compute_time: float = 0.0
    spec_norms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.qddot)):
            raise ValueError("combiner produced a non-finite acceleration")


# ---------------------------------------------------------------------------
# fabric stack: avoidance components plus their vectorized evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StackTerms:
    """Pulled-and-summed avoidance terms at one configuration state."""

    M: np.ndarray           # summed metric (also the Finsler-energy metric)
    xi_geo: np.ndarray      # force of the energized avoidance behaviors
    xi_energy: np.ndarray   # force of the summed Finsler energy
    energy: float           # summed Finsler energy value
    min_distance: float     # smallest normalized separation seen (obstacles)
    penetration: bool
    obstacle_force: float   # max |xi| over obstacle coordinates (diagnostics)
    limit_force: float


@dataclass(frozen=True)
class FabricStack:
    """Avoidance fabrics of one robot: all sphere-obstacle pairs + joint limits."""

    robot: RobotModel
    obstacle_params: FabricParams = FabricParams()
    limit_params: FabricParams = FabricParams(k_geo=0.1)
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "radii", np.asarray(self.radii, dtype=float).reshape(-1))
        if self.centers.shape[0] != self.radii.shape[0]:
            raise ValueError("obstacle centers and radii must pair up")
        if np.any(self.radii <= 0):
            raise ValueError("obstacle radii must be positive")

    @property
    def n_obstacles(self) -> int:
        return len(self.radii)

    @property
    def n_components(self) -> int:
        return len(self.robot.collision_spheres) * self.n_obstacles + 2 * self.robot.n_joints

    def with_obstacles(self, centers, radii) -> "FabricStack":
        return replace(self, centers=centers, radii=radii)

    def components(self) -> list[FabricComponent]:
        """Per-component objects; the readable counterpart of `terms`."""
        out = []
        geo_o, en_o = obstacle_fabric(self.obstacle_params.variant, self.obstacle_params)
        for sphere in self.robot.collision_spheres:
            for c, r in zip(self.centers, self.radii):
                tm = obstacle_distance_map(self.robot, sphere, c, r)
                out.append(FabricComponent(tm, geo_o, en_o))
        geo_l, en_l = joint_limit_fabric(self.limit_params)
        for tm in joint_limit_maps(self.robot):
            out.append(FabricComponent(tm, geo_l, en_l))
        return out

    def terms(self, q: np.ndarray, qdot: np.ndarray) -> StackTerms:
        """Vectorized pullback-and-sum over every avoidance coordinate."""
        n = self.robot.n_joints
        M = np.zeros((n, n))
        xi_geo = np.zeros(n)
        xi_energy = np.zeros(n)
        energy = 0.0
        min_dist = np.inf
        penetration = False
        obstacle_force = 0.0

        if self.n_obstacles and self.robot.collision_spheres:
            sk = sphere_kinematics(self.robot, q, qdot)
            diff = sk.positions[:, None, :] - self.centers[None, :, :]      # (S,O,2)
            dist = np.linalg.norm(diff, axis=2)
            R = sk.radii[:, None] + self.radii[None, :]
            x = dist / R - 1.0
            u = diff / dist[:, :, None]
            xdot = np.einsum("soi,si->so", u, sk.velocities) / R
            v2 = np.einsum("si,si->s", sk.velocities, sk.velocities)
            tang = v2[:, None] - (xdot * R) ** 2
            curv = (tang / dist + np.einsum("soi,si->so", u, sk.curvatures)) / R
            Jx = np.einsum("soi,sin->son", u, sk.jacobians) / R[:, :, None]

            min_dist = float(x.min())
            penetration = bool(np.any(x <= 0.0))
            xc = np.where(x > 0.0, x, self.obstacle_params.x_min)
            m_fn, dm_fn = _metric_fns(self.obstacle_params)
            m = m_fn(xc)
            xi_e = 0.5 * dm_fn(xc) * xdot**2
            p = self.obstacle_params
            h = p.k_geo / xc**p.p * xdot**2 * (xdot < 0.0)
            pi = np.where(
                np.abs(xdot) < 1e-9,
                h,
                h - xdot**2 * (m * h + xi_e) / (xdot**2 * m + EPS_DIV),
            )
            xi_task = -m * pi
            M += np.einsum("so,son,som->nm", m, Jx, Jx)
            xi_geo += np.einsum("son,so->n", Jx, xi_task + m * curv)
            xi_energy += np.einsum("son,so->n", Jx, xi_e + m * curv)
            energy += float(np.sum(0.5 * m * xdot**2))
            obstacle_force = float(np.abs(xi_task).max(initial=0.0))

        # joint limits: lower margin q - lo (J = +e_i), upper margin hi - q (J = -e_i)
        q = np.asarray(q, dtype=float)
        qdot = np.asarray(qdot, dtype=float)
        lo = np.asarray(self.robot.joint_lower)
        hi = np.asarray(self.robot.joint_upper)
        margins = np.stack([q - lo, hi - q])            # (2, n)
        signs = np.array([1.0, -1.0])[:, None]
        mdot = signs * qdot[None, :]
        pen_l = bool(np.any(margins <= 0.0))
        penetration = penetration or pen_l
        xc = np.where(margins > 0.0, margins, self.limit_params.x_min)
        m_fn, dm_fn = _metric_fns(self.limit_params)
        m = m_fn(xc)
        xi_e = 0.5 * dm_fn(xc) * mdot**2
        p = self.limit_params
        h = p.k_geo / xc**p.p * mdot**2 * (mdot < 0.0)
        pi = np.where(
            np.abs(mdot) < 1e-9,
            h,
            h - mdot**2 * (m * h + xi_e) / (mdot**2 * m + EPS_DIV),
        )
        xi_task = -m * pi
        M[np.arange(n), np.arange(n)] += m.sum(axis=0)
        xi_pulled = (signs * xi_task).sum(axis=0)
        xi_geo += xi_pulled
        xi_energy += (signs * xi_e).sum(axis=0)
        energy += float(np.sum(0.5 * m * mdot**2))

        return StackTerms(
            M, xi_geo, xi_energy, energy, min_dist, penetration,
            obstacle_force, float(np.abs(xi_task).max(initial=0.0)),
        )


def reference_stack_spec(stack: FabricStack, state: ConfigurationState) -> Spec:
    """Assemble the stack spec component by component; oracle for `terms`."""
    specs = []
    for comp in stack.components():
        tstate = comp.task_map.task_state(state.q, state.qdot)
        specs.append(pull(geometry_to_spec(comp.geometry, comp.energy, tstate),
                          comp.task_map, state))
    return sum_specs(specs)


# ---------------------------------------------------------------------------
# the pulled policy and the configuration-space potential gradient
# ---------------------------------------------------------------------------

EPS_PULL = 1e-9


def pull_policy(net_accel: np.ndarray, ee_map: TaskMap, forcing_metric,
                state: ConfigurationState):
    """Forcing terms of the task-space acceleration pulled to joint space.

    Returns (force f_C, forcing metric J^T Mf J, standalone joint acceleration).
    The standalone form is the damped-least-squares image of the desired
    acceleration, used alone by the vanilla learned-policy baseline.
    """
    J = ee_map.jacobian(state.q)
    curv = ee_map.curvature(state.q, state.qdot)
    n = J.shape[1]
    Mf = np.eye(J.shape[0]) if forcing_metric is None else forcing_metric
    f_c = J.T @ (Mf @ (np.asarray(net_accel, dtype=float) - curv))
    M_force = J.T @ Mf @ J
    qddot = np.linalg.solve(M_force + EPS_PULL * np.eye(n), f_c)
    return f_c, M_force, qddot


def potential_gradient_config(net: PolicyNetwork, ee_map: TaskMap, q: np.ndarray,
                              goal=None) -> np.ndarray:
    """Chain rule of the latent goal potential through the end-effector map."""
    x = ee_map.value(np.asarray(q, dtype=float))
    dpsi_dx = net.latent_potential_gradient(x, goal)
    return ee_map.jacobian(q).T @ dpsi_dx


def attractor_gradient(x, goal, gain: float, sharpness: float, angle_dims=(2,)):
    """Gradient of the smooth-norm goal potential
    gain * (r + log(1 + exp(-2 c r)) / c); saturates to `gain` for large r."""
    d = np.asarray(x, dtype=float) - np.asarray(goal, dtype=float)
    for a in angle_dims:
        if a < d.size:
            d[a] = wrap_angle(d[a])
    r = np.linalg.norm(d)
    return gain * np.tanh(sharpness * r) * d / max(r, 1e-12)


# ---------------------------------------------------------------------------
# combiner steps
# ---------------------------------------------------------------------------

def _clamped(qddot: np.ndarray, config: CombinerConfig) -> np.ndarray:
    return np.clip(qddot, -config.accel_clamp, config.accel_clamp)


def _resolve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.linalg.solve(M + EPS_REG * np.eye(M.shape[0]), rhs)


def _forced_step(terms: StackTerms, f_c, M_force, standalone, config, state):
    if config.forcing_mode == "spec":
        qddot = _resolve(terms.M + M_force, -terms.xi_geo + f_c)
    else:
        qddot = _resolve(terms.M, -terms.xi_geo) + standalone
    return qddot - config.beta * state.qdot


def fpm_step(stack: FabricStack, net: PolicyNetwork, config: CombinerConfig,
             state: ConfigurationState, ee_map: TaskMap | None = None,
             goal=None) -> StepOutput:
    """Avoidance fabric forced by the pulled learned policy."""
    t0 = time.perf_counter()
    ee_map = ee_map or ee_task_map(stack.robot)
    terms = stack.terms(state.q, state.qdot)
    x = ee_map.value(state.q)
    xdot = ee_map.jacobian(state.q) @ state.qdot
    a_net = net.forward(x, xdot, goal)
    f_c, M_force, standalone = pull_policy(a_net, ee_map, config.forcing_metric, state)
    qddot = _forced_step(terms, f_c, M_force, standalone, config, state)
    return StepOutput(
        _clamped(qddot, config),
        psi=net.latent_potential(x, goal),
        penetration=terms.penetration,
        min_distance=terms.min_distance,
        compute_time=time.perf_counter() - t0,
        spec_norms={"obstacle": terms.obstacle_force, "limit": terms.limit_force},
    )


def cpm_step(stack: FabricStack, net: PolicyNetwork, config: CombinerConfig,
             state: ConfigurationState, ee_map: TaskMap | None = None,
             goal=None) -> StepOutput:
    """Energized combined system plus the latent-potential correction.

    Requires the finite-metric fabric variant: the energization metric must
    stay bounded and full-rank as the velocity vanishes.
    """
    if stack.obstacle_params.variant != FINITE or stack.limit_params.variant != FINITE:
        raise ValueError("cpm requires finite-metric fabric variants")
    t0 = time.perf_counter()
    ee_map = ee_map or ee_task_map(stack.robot)
    terms = stack.terms(state.q, state.qdot)
    x = ee_map.value(state.q)
    xdot = ee_map.jacobian(state.q) @ state.qdot
    a_net = net.forward(x, xdot, goal)
    _, _, f = pull_policy(a_net, ee_map, config.forcing_metric, state)
    h = _resolve(terms.M, -terms.xi_geo)
    pi = h + f

    qdot = state.qdot
    speed2 = float(qdot @ terms.M @ qdot)
    if np.linalg.norm(qdot) >= 1e-9:
        alpha = -(qdot @ terms.M @ pi + qdot @ terms.xi_energy) / (speed2 + EPS_DIV)
        pi = pi + alpha * qdot

    dpsi = config.psi_scale * potential_gradient_config(net, ee_map, state.q, goal)
    if np.linalg.norm(qdot) < config.eps_v:
        gamma = -_resolve(terms.M, dpsi) - config.beta * qdot
    else:
        gamma = -qdot * (qdot @ dpsi) / speed2 - config.beta * qdot

    return StepOutput(
        _clamped(pi + gamma, config),
        psi=net.latent_potential(x, goal),
        penetration=terms.penetration,
        min_distance=terms.min_distance,
        compute_time=time.perf_counter() - t0,
        spec_norms={"obstacle": terms.obstacle_force, "limit": terms.limit_force},
    )


def vanilla_fabrics_step(stack: FabricStack, goal, config: CombinerConfig,
                         state: ConfigurationState,
                         ee_map: TaskMap | None = None) -> StepOutput:
    """Hand-designed attractor forcing the avoidance fabric (no learning)."""
    t0 = time.perf_counter()
    ee_map = ee_map or ee_task_map(stack.robot)
    terms = stack.terms(state.q, state.qdot)
    x = ee_map.value(state.q)
    a_des = -attractor_gradient(x, goal, config.attractor_gain, config.attractor_sharpness)
    f_c, M_force, standalone = pull_policy(a_des, ee_map, config.forcing_metric, state)
    qddot = _forced_step(terms, f_c, M_force, standalone, config, state)
    return StepOutput(
        _clamped(qddot, config),
        penetration=terms.penetration,
        min_distance=terms.min_distance,
        compute_time=time.perf_counter() - t0,
        spec_norms={"obstacle": terms.obstacle_force, "limit": terms.limit_force},
    )


def vanilla_puma_step(net: PolicyNetwork, ee_map: TaskMap, config: CombinerConfig,
                      state: ConfigurationState, goal=None) -> StepOutput:
    """Pulled learned policy alone: no obstacle terms, no joint limits."""
    t0 = time.perf_counter()
    x = ee_map.value(state.q)
    xdot = ee_map.jacobian(state.q) @ state.qdot
    a_net = net.forward(x, xdot, goal)
    _, _, qddot = pull_policy(a_net, ee_map, config.forcing_metric, state)
    return StepOutput(
        _clamped(qddot - config.beta * state.qdot, config),
        psi=net.latent_potential(x, goal),
        compute_time=time.perf_counter() - t0,
    )


def ik_tracking_baseline_step(net: PolicyNetwork, model: RobotModel,
                              config: CombinerConfig, state: ConfigurationState,
                              centers, radii, ee_map: TaskMap | None = None,
                              goal=None) -> StepOutput:
    """Simplified velocity-IK baseline (not the published modulation method).

    Tracks the policy's one-tick-ahead task velocity through damped least
    squares and adds a per-sphere repulsive joint velocity; deliberately the
    naive per-pair formulation.
    """
    t0 = time.perf_counter()
    ee_map = ee_map or ee_task_map(model)
    q, qdot = state.q, state.qdot
    J = ee_map.jacobian(q)
    xdot = J @ qdot
    x = ee_map.value(q)
    a_net = net.forward(x, xdot, goal)
    v_des = xdot + a_net * config.control_dt
    lam2 = config.dls_lambda**2
    qdot_des = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(J.shape[0]), v_des)

    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    radii = np.asarray(radii, dtype=float).reshape(-1)
    min_dist = np.inf
    penetration = False
    if len(radii):
        sk = sphere_kinematics(model, q, qdot)
        for s in range(len(model.collision_spheres)):
            Js = sk.jacobians[s]
            for o in range(len(radii)):
                d = sk.positions[s] - centers[o]
                dist = float(np.linalg.norm(d))
                gap = dist - sk.radii[s] - radii[o]
                rel = gap / (sk.radii[s] + radii[o])
                min_dist = min(min_dist, rel)
                if gap <= 0.0:
                    penetration = True
                if gap < config.repulse_range:
                    u = d / dist
                    mag = config.repulse_gain * (1.0 / max(gap, 1e-2) - 1.0 / config.repulse_range)
                    v_rep = mag * u
                    qdot_des = qdot_des + Js.T @ np.linalg.solve(
                        Js @ Js.T + lam2 * np.eye(2), v_rep)

    qdot_des = np.clip(qdot_des, -config.vel_clamp, config.vel_clamp)
    qddot = (qdot_des - qdot) / config.control_dt
    return StepOutput(
        _clamped(qddot, config),
        penetration=penetration,
        min_distance=min_dist,
        compute_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# dispatcher used by the simulator and the live session
# ---------------------------------------------------------------------------

def make_stepper(kind: str, robot: RobotModel, net: PolicyNetwork | None,
                 config: CombinerConfig, obstacle_params: FabricParams | None = None,
                 limit_params: FabricParams | None = None) -> Callable:
    """Bind a combiner into a step(state, centers, radii, goal) closure.

    The goal argument both retargets the learned policy (goal-relative inputs)
    and drives the hand-designed attractor, so every combiner tracks moving
    goals through the same interface.
    """
    if kind not in COMBINER_KINDS:
        raise ValueError(f"unknown combiner kind {kind!r}")
    if net is None and kind != VANILLA_FABRICS:
        raise ValueError(f"combiner {kind!r} needs a trained policy network")
    if obstacle_params is None:
        obstacle_params = FabricParams(variant=FINITE) if kind == CPM else FabricParams()
    if limit_params is None:
        limit_params = FabricParams(
            k_geo=0.1, variant=FINITE if kind == CPM else obstacle_params.variant)
    if kind == CPM and (obstacle_params.variant != FINITE or limit_params.variant != FINITE):
        raise ValueError("cpm requires finite-metric fabric variants")
    stack = FabricStack(robot, obstacle_params, limit_params)
    ee_map = ee_task_map(robot)

    def step(state: ConfigurationState, centers, radii, goal) -> StepOutput:
        s = stack.with_obstacles(centers, radii)
        if kind == FPM:
            return fpm_step(s, net, config, state, ee_map, goal)
        if kind == CPM:
            return cpm_step(s, net, config, state, ee_map, goal)
        if kind == VANILLA_FABRICS:
            return vanilla_fabrics_step(s, goal, config, state, ee_map)
        if kind == VANILLA_PUMA:
            return vanilla_puma_step(net, ee_map, config, state, goal)
        return ik_tracking_baseline_step(net, robot, config, state, centers, radii,
                                         ee_map, goal)

    return step
