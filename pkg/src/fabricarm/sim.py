"""Scenario definition and the kinematic simulation loop.

The control loop runs at control_dt (30 Hz by default) and holds the
commanded joint acceleration constant while the double integrator advances at
sim_dt substeps (zero-order hold). Obstacles and the goal move on their
schedules; success latches at the first tick that meets the pose threshold
with a collision-free history, and a run ends at success, collision,
sustained deadlock or timeout, whichever comes first.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .combiners import COMBINER_KINDS, CombinerConfig, make_stepper
from .fabric import FabricParams
from .kinematics import ConfigurationState, RobotModel, ee_task_map, sphere_kinematics, wrap_angle
from .numutil import resample_by_arclength
from .policy.network import PolicyNetwork

DEADLOCK_SPEED = 1e-3   # rad/s
DEADLOCK_TIME = 2.0     # s


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")

    def at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, dtype=float) + t * np.asarray(self.velocity, dtype=float)


@dataclass(frozen=True)
class Scenario:
    robot: RobotModel
    q0: np.ndarray
    goal: np.ndarray                        # (x, y, theta)
    qdot0: np.ndarray = None
    goal_waypoints: tuple = ()              # ((t, pose), ...) piecewise-linear motion
    obstacles: tuple[Obstacle, ...] = ()
    duration: float = 10.0
    control_dt: float = 1.0 / 30.0
    sim_dt: float = 1e-3
    success_threshold: float = 0.05
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "q0", np.asarray(self.q0, dtype=float))
        qd0 = np.zeros_like(self.q0) if self.qdot0 is None else np.asarray(self.qdot0, dtype=float)
        object.__setattr__(self, "qdot0", qd0)
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        object.__setattr__(self, "goal_waypoints",
                           tuple((float(t), np.asarray(p, dtype=float)) for t, p in self.goal_waypoints))
        if self.duration <= 0 or self.success_threshold <= 0:
            raise ValueError("duration and success threshold must be positive")
        if self.control_dt < self.sim_dt:
            raise ValueError("control_dt must be at least sim_dt")
        if len(self.q0) != self.robot.n_joints:
            raise ValueError("q0 length must match the robot joint count")

    def goal_at(self, t: float) -> np.ndarray:
        if not self.goal_waypoints:
            return self.goal
        ts = [0.0] + [w[0] for w in self.goal_waypoints]
        ps = [self.goal] + [w[1] for w in self.goal_waypoints]
        if t <= ts[0]:
            return ps[0]
        for (t0, p0), (t1, p1) in zip(zip(ts, ps), zip(ts[1:], ps[1:])):
            if t <= t1:
                a = (t - t0) / max(t1 - t0, 1e-12)
                return (1 - a) * p0 + a * p1
        return ps[-1]

    def obstacles_at(self, t: float):
        if not self.obstacles:
            return np.zeros((0, 2)), np.zeros(0)
        centers = np.array([o.at(t) for o in self.obstacles])
        radii = np.array([o.radius for o in self.obstacles])
        return centers, radii

    def without_obstacles(self) -> "Scenario":
        return replace(self, obstacles=())

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "robot": self.robot.to_json(),
            "q0": self.q0.tolist(),
            "qdot0": self.qdot0.tolist(),
            "goal": self.goal.tolist(),
            "goal_waypoints": [[t, p.tolist()] for t, p in self.goal_waypoints],
            "obstacles": [
                {"center": list(o.center), "radius": o.radius, "velocity": list(o.velocity)}
                for o in self.obstacles
            ],
            "duration": self.duration,
            "control_dt": self.control_dt,
            "sim_dt": self.sim_dt,
            "success_threshold": self.success_threshold,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scenario":
        return cls(
            robot=RobotModel.from_json(data["robot"]),
            q0=data["q0"],
            qdot0=data.get("qdot0"),
            goal=data["goal"],
            goal_waypoints=tuple((t, p) for t, p in data.get("goal_waypoints", [])),
            obstacles=tuple(
                Obstacle(tuple(o["center"]), o["radius"], tuple(o.get("velocity", (0, 0))))
                for o in data.get("obstacles", [])
            ),
            duration=data.get("duration", 10.0),
            control_dt=data.get("control_dt", 1.0 / 30.0),
            sim_dt=data.get("sim_dt", 1e-3),
            success_threshold=data.get("success_threshold", 0.05),
            seed=data.get("seed", 0),
            name=data.get("name", ""),
        )


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return Scenario.from_json(json.load(f))


def save_scenario(scenario: Scenario, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(scenario.to_json(), f, indent=1)


@dataclass
class RunResult:
    success: bool
    time_to_success: float | None
    times: np.ndarray            # (T,)
    qs: np.ndarray               # (T, n)
    qdots: np.ndarray            # (T, n)
    ee_path: np.ndarray          # (T, 3)
    step_compute_times: np.ndarray
    min_clearance: float         # meters of surface gap, negative in collision
    collided: bool
    deadlock: bool
    path_difference: float | None = None
    error: str | None = None

    def final_goal_distance(self, scenario: Scenario) -> float:
        return pose_distance(self.ee_path[-1], scenario.goal_at(self.times[-1]))


def pose_distance(pose_a, pose_b) -> float:
    """Mixed position+angle norm with the angle difference wrapped."""
    d = np.asarray(pose_a, dtype=float) - np.asarray(pose_b, dtype=float)
    d[2] = wrap_angle(d[2])
    return float(np.linalg.norm(d))


def min_surface_gap(robot: RobotModel, q, centers, radii) -> float:
    """Smallest sphere-to-obstacle surface distance in meters."""
    if len(radii) == 0:
        return np.inf
    sk = sphere_kinematics(robot, q)
    diff = sk.positions[:, None, :] - centers[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    return float((dist - sk.radii[:, None] - radii[None, :]).min())


def run_scenario(scenario: Scenario, combiner_kind: str, net: PolicyNetwork | None = None,
                 fabric_params: FabricParams | None = None,
                 limit_params: FabricParams | None = None,
                 config: CombinerConfig | None = None) -> RunResult:
    """Execute one scenario under the chosen combiner; deterministic."""
    if combiner_kind not in COMBINER_KINDS:
        raise ValueError(f"unknown combiner kind {combiner_kind!r}")
    if config is None:
        config = CombinerConfig(kind=combiner_kind, control_dt=scenario.control_dt)
    stepper = make_stepper(combiner_kind, scenario.robot, net, config,
                           obstacle_params=fabric_params, limit_params=limit_params)
    ee_map = ee_task_map(scenario.robot)

    q = scenario.q0.copy()
    qdot = scenario.qdot0.copy()
    t = 0.0
    substeps = int(round(scenario.control_dt / scenario.sim_dt))
    n_ticks = int(round(scenario.duration / scenario.control_dt))

    times, qs, qdots, ees, comp = [], [], [], [], []
    success = False
    tts = None
    collided = False
    deadlock = False
    min_clear = np.inf
    rest_time = 0.0
    error = None

    def log_state():
        times.append(t)
        qs.append(q.copy())
        qdots.append(qdot.copy())
        ees.append(ee_map.value(q))

    centers, radii = scenario.obstacles_at(0.0)
    min_clear = min(min_clear, min_surface_gap(scenario.robot, q, centers, radii))
    log_state()
    if min_clear <= 0.0:
        collided = True

    for _ in range(n_ticks):
        if success or collided or deadlock:
            break
        centers, radii = scenario.obstacles_at(t)
        goal = scenario.goal_at(t)
        try:
            out = stepper(ConfigurationState(q, qdot), centers, radii, goal)
        except Exception as exc:  # combiner failure aborts the run with a diagnostic
            error = f"{type(exc).__name__}: {exc}"
            break
        comp.append(out.compute_time)
        qddot = out.qddot
        for _ in range(substeps):
            qdot = np.clip(qdot + qddot * scenario.sim_dt, -config.vel_clamp, config.vel_clamp)
            q = q + qdot * scenario.sim_dt
            t += scenario.sim_dt
            oc, orad = scenario.obstacles_at(t)
            gap = min_surface_gap(scenario.robot, q, oc, orad)
            min_clear = min(min_clear, gap)
            if gap <= 0.0:
                collided = True
                break
        log_state()
        if collided:
            break
        if pose_distance(ees[-1], scenario.goal_at(t)) < scenario.success_threshold:
            success = True
            tts = t
            break
        if np.linalg.norm(qdot) < DEADLOCK_SPEED:
            rest_time += scenario.control_dt
            if rest_time >= DEADLOCK_TIME:
                deadlock = True
        else:
            rest_time = 0.0

    return RunResult(
        success=success,
        time_to_success=tts,
        times=np.array(times),
        qs=np.array(qs),
        qdots=np.array(qdots),
        ee_path=np.array(ees),
        step_compute_times=np.array(comp),
        min_clearance=float(min_clear),
        collided=collided,
        deadlock=deadlock,
        error=error,
    )


def path_difference(traj: np.ndarray, reference: np.ndarray, samples: int = 200) -> float:
    """Mean pointwise gap between arc-length-resampled end-effector paths.

    Operates on the planar position components only; orientation is excluded
    because meters and radians do not share a scale.
    """
    traj = np.asarray(traj, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if len(traj) < 2 or len(reference) < 2:
        raise ValueError("paths need at least two points")
    a = resample_by_arclength(traj[:, :2], samples)
    b = resample_by_arclength(reference[:, :2], samples)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))
