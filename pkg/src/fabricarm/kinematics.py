"""Planar N-link arm model, forward kinematics and differentiable task maps.

All maps expose value / jacobian / curvature, where curvature is the
velocity-dependent term d/dt[J(q(t))] qdot evaluated at the current state.
Objects are immutable after construction and safe to share across threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Normalize an angle (or array of angles) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), TWO_PI)


def rot90(v: np.ndarray) -> np.ndarray:
    """Rotate 2D vectors by +90 degrees; works on (..., 2) arrays."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class CollisionSphere:
    link: int
    offset: float
    radius: float


@dataclass(frozen=True)
class RobotModel:
    """Planar revolute chain with collision spheres along the links."""

    link_lengths: tuple[float, ...]
    joint_lower: tuple[float, ...]
    joint_upper: tuple[float, ...]
    collision_spheres: tuple[CollisionSphere, ...] = ()
    base_position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        n = len(self.link_lengths)
        if n == 0 or any(L <= 0 for L in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if len(self.joint_lower) != n or len(self.joint_upper) != n:
            raise ValueError("joint limits must match link count")
        if any(lo >= hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ValueError("joint_lower must be strictly below joint_upper")
        for s in self.collision_spheres:
            if not (0 <= s.link < n):
                raise ValueError(f"collision sphere link {s.link} out of range")
            if s.radius <= 0:
                raise ValueError("collision sphere radius must be positive")
            if abs(s.offset) > self.link_lengths[s.link]:
                raise ValueError("collision sphere offset exceeds link length")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def to_json(self) -> dict:
        return {
            "links": list(self.link_lengths),
            "limits": [[lo, hi] for lo, hi in zip(self.joint_lower, self.joint_upper)],
            "spheres": [
                {"link": s.link, "offset": s.offset, "radius": s.radius}
                for s in self.collision_spheres
            ],
            "base": list(self.base_position),
        }

    @classmethod
    def from_json(cls, data: dict) -> "RobotModel":
        return cls(
            link_lengths=tuple(float(L) for L in data["links"]),
            joint_lower=tuple(float(lim[0]) for lim in data["limits"]),
            joint_upper=tuple(float(lim[1]) for lim in data["limits"]),
            collision_spheres=tuple(
                CollisionSphere(int(s["link"]), float(s["offset"]), float(s["radius"]))
                for s in data.get("spheres", [])
            ),
            base_position=tuple(data.get("base", (0.0, 0.0))),
        )


def default_arm(n: int = 3, reach: float = 2.4) -> RobotModel:
    """Arm with n equal links, +/-170 deg limits and spheres at each link midpoint and tip."""
    L = reach / n
    spheres = []
    for k in range(n):
        spheres.append(CollisionSphere(k, 0.5 * L, 0.12 * L))
        spheres.append(CollisionSphere(k, L, 0.12 * L))
    lim = math.radians(170.0)
    return RobotModel(
        link_lengths=(L,) * n,
        joint_lower=(-lim,) * n,
        joint_upper=(lim,) * n,
        collision_spheres=tuple(spheres),
    )


@dataclass(frozen=True)
class ConfigurationState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float))
        if self.q.shape != self.qdot.shape:
            raise ValueError("q and qdot must have identical shape")


@dataclass(frozen=True)
class TaskState:
    x: np.ndarray
    xdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "xdot", np.atleast_1d(np.asarray(self.xdot, dtype=float)))
        if self.x.shape != self.xdot.shape:
            raise ValueError("x and xdot must have identical shape")


@dataclass(frozen=True)
class TaskMap:
    """Twice-differentiable map from configuration space to a task space.

    curvature(q, qdot) returns d/dt[J(q(t))] qdot, the acceleration the task
    variable picks up from joint motion alone (qddot = 0).
    """

    output_dim: int
    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    curvature: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def task_state(self, q: np.ndarray, qdot: np.ndarray) -> TaskState:
        return TaskState(self.value(q), self.jacobian(q) @ np.asarray(qdot, dtype=float))


# ---------------------------------------------------------------------------
# chain geometry helpers (shared by the task maps and the fast combiner path)
# ---------------------------------------------------------------------------

def chain_frames(model: RobotModel, q: np.ndarray):
    """Cumulative link angles, unit link directions and joint origins.

    Returns (theta (n,), u (n,2), origins (n+1,2)) where origins[k] is the
    position of joint k and origins[n] the chain tip.
    """
    q = np.asarray(q, dtype=float)
    theta = np.cumsum(q)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    L = np.asarray(model.link_lengths)
    origins = np.empty((model.n_joints + 1, 2))
    origins[0] = model.base_position
    origins[1:] = origins[0] + np.cumsum(L[:, None] * u, axis=0)
    return theta, u, origins


def point_on_link(model: RobotModel, q: np.ndarray, link: int, offset: float):
    theta, u, origins = chain_frames(model, q)
    return origins[link] + offset * u[link], theta[link]


def point_jacobian(model: RobotModel, q: np.ndarray, link: int, offset: float) -> np.ndarray:
    """2 x n positional Jacobian of a point at `offset` along `link`."""
    _, u, origins = chain_frames(model, q)
    p = origins[link] + offset * u[link]
    J = np.zeros((2, model.n_joints))
    for j in range(link + 1):
        J[:, j] = rot90(p - origins[j])
    return J


def point_curvature(model: RobotModel, q, qdot, link: int, offset: float) -> np.ndarray:
    """Jdot qdot of a point on the chain (analytic, no finite differences)."""
    theta, u, _ = chain_frames(model, q)
    omega = np.cumsum(np.asarray(qdot, dtype=float))
    L = np.asarray(model.link_lengths)
    w2 = omega**2
    c = -np.sum((L[:link] * w2[:link])[:, None] * u[:link], axis=0)
    return c - offset * w2[link] * u[link]


def forward_kinematics(model: RobotModel, q, link_index: int, local_offset: float):
    """World position and cumulative orientation of a point on the chain.

    The point sits `local_offset` along link `link_index`; the returned angle
    is the orientation of that link (sum of the first link_index+1 joint
    angles).
    """
    if not (0 <= link_index < model.n_joints):
        raise IndexError(f"link_index {link_index} out of range for {model.n_joints}-link arm")
    p, angle = point_on_link(model, np.asarray(q, dtype=float), link_index, local_offset)
    return p, float(angle)


def ee_task_map(model: RobotModel) -> TaskMap:
    """End-effector pose map: (x, y, orientation angle), dim 3."""
    n = model.n_joints
    last = n - 1
    tip = model.link_lengths[last]

    def value(q):
        p, angle = point_on_link(model, q, last, tip)
        return np.array([p[0], p[1], angle])

    def jacobian(q):
        J = np.zeros((3, n))
        J[:2] = point_jacobian(model, q, last, tip)
        J[2] = 1.0
        return J

    def curvature(q, qdot):
        c = np.zeros(3)
        c[:2] = point_curvature(model, q, qdot, last, tip)
        return c

    return TaskMap(3, value, jacobian, curvature)


def sphere_point_map(model: RobotModel, sphere: CollisionSphere) -> TaskMap:
    """2D position map of a collision-sphere center."""
    n = model.n_joints

    def value(q):
        p, _ = point_on_link(model, q, sphere.link, sphere.offset)
        return p

    def jacobian(q):
        return point_jacobian(model, q, sphere.link, sphere.offset)

    def curvature(q, qdot):
        return point_curvature(model, q, qdot, sphere.link, sphere.offset)

    return TaskMap(2, value, jacobian, curvature)


def obstacle_distance_map(
    model: RobotModel,
    sphere: CollisionSphere,
    obstacle_center,
    obstacle_radius: float,
) -> TaskMap:
    """Scalar separation coordinate between a body sphere and an obstacle.

    x = |p_sphere - p_obs| / (r_sphere + r_obs) - 1, so x = 0 at contact and
    x > 0 when separated. x goes negative in penetration; downstream fabric
    geometry clamps it.
    """
    if obstacle_radius <= 0:
        raise ValueError("obstacle radius must be positive")
    center = np.asarray(obstacle_center, dtype=float)
    R = sphere.radius + obstacle_radius
    point = sphere_point_map(model, sphere)

    def value(q):
        d = np.linalg.norm(point.value(q) - center)
        return np.array([d / R - 1.0])

    def jacobian(q):
        diff = point.value(q) - center
        d = np.linalg.norm(diff)
        return (diff / (d * R))[None, :] @ point.jacobian(q)

    def curvature(q, qdot):
        diff = point.value(q) - center
        d = np.linalg.norm(diff)
        u = diff / d
        pdot = point.jacobian(q) @ np.asarray(qdot, dtype=float)
        tangential = pdot @ pdot - (u @ pdot) ** 2
        return np.array([(tangential / d + u @ point.curvature(q, qdot)) / R])

    return TaskMap(1, value, jacobian, curvature)


def joint_limit_maps(model: RobotModel) -> list[TaskMap]:
    """2n scalar margin maps: q_i - lower_i and upper_i - q_i (positive inside)."""
    maps = []
    n = model.n_joints
    for i in range(n):
        for sign, bound in ((1.0, model.joint_lower[i]), (-1.0, model.joint_upper[i])):
            e = np.zeros((1, n))
            e[0, i] = sign

            def value(q, sign=sign, bound=bound, i=i):
                return np.array([sign * (q[i] - bound)])

            maps.append(
                TaskMap(
                    1,
                    value,
                    lambda q, e=e: e.copy(),
                    lambda q, qdot: np.zeros(1),
                )
            )
    return maps


def compose(outer: TaskMap, inner: TaskMap) -> TaskMap:
    """Task map of outer(inner(q)) with chain-rule Jacobian and curvature."""

    def value(q):
        return outer.value(inner.value(q))

    def jacobian(q):
        x = inner.value(q)
        return outer.jacobian(x) @ inner.jacobian(q)

    def curvature(q, qdot):
        x = inner.value(q)
        xdot = inner.jacobian(q) @ np.asarray(qdot, dtype=float)
        return outer.curvature(x, xdot) + outer.jacobian(x) @ inner.curvature(q, qdot)

    return TaskMap(outer.output_dim, value, jacobian, curvature)


# ---------------------------------------------------------------------------
# batched sphere kinematics for the per-tick hot path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SphereKinematics:
    """All collision-sphere positions, Jacobians and curvatures at one state."""

    positions: np.ndarray   # (S, 2)
    jacobians: np.ndarray   # (S, 2, n)
    curvatures: np.ndarray  # (S, 2)
    radii: np.ndarray       # (S,)
    velocities: np.ndarray = field(default=None)  # (S, 2), filled when qdot given


def sphere_kinematics(model: RobotModel, q, qdot=None) -> SphereKinematics:
    """Evaluate every collision sphere in one vectorized pass."""
    q = np.asarray(q, dtype=float)
    theta, u, origins = chain_frames(model, q)
    n = model.n_joints
    spheres = model.collision_spheres
    links = np.array([s.link for s in spheres], dtype=int)
    offsets = np.array([s.offset for s in spheres])
    radii = np.array([s.radius for s in spheres])

    pos = origins[links] + offsets[:, None] * u[links]

    # column j of sphere s: rot90(p_s - o_j) for j <= link_s, else 0
    rel = pos[:, None, :] - origins[None, :n, :]         # (S, n, 2)
    cols = rot90(rel)                                    # (S, n, 2)
    mask = (np.arange(n)[None, :] <= links[:, None])     # (S, n)
    jac = np.where(mask[:, :, None], cols, 0.0).transpose(0, 2, 1)  # (S, 2, n)

    curv = np.zeros_like(pos)
    vel = None
    if qdot is not None:
        omega = np.cumsum(np.asarray(qdot, dtype=float))
        w2u = (np.asarray(model.link_lengths) * omega**2)[:, None] * u   # (n, 2)
        prefix = np.vstack([np.zeros(2), np.cumsum(w2u, axis=0)])        # (n+1, 2)
        curv = -prefix[links] - (offsets * omega[links] ** 2)[:, None] * u[links]
        vel = jac @ np.asarray(qdot, dtype=float)

    return SphereKinematics(pos, jac, curv, radii, vel)
