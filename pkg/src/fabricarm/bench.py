"""Benchmark suites, aggregate metrics and the obstacle-count scaling probe."""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .combiners import CPM, VANILLA_FABRICS, VANILLA_PUMA, CombinerConfig, make_stepper
from .fabric import FINITE, FabricParams
from .kinematics import ConfigurationState, RobotModel, default_arm, ee_task_map, wrap_angle
from .policy.network import PolicyNetwork
from .sim import Obstacle, RunResult, Scenario, min_surface_gap, path_difference, run_scenario

REACH_LIKE = "tomato-like reach"
POUR_LIKE = "pour-like arc"


def _method_params(method: str) -> FabricParams | None:
    if method == CPM:
        return FabricParams(variant=FINITE)
    return None


@dataclass
class MethodReport:
    method: str
    runs: list[RunResult] = field(default_factory=list)
    path_diffs: list[float] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean([r.success for r in self.runs])) if self.runs else 0.0

    def time_to_success(self):
        """(mean, std) over successful runs only, and capped over all runs."""
        ok = [r.time_to_success for r in self.runs if r.success]
        capped = [r.time_to_success if r.success else r.times[-1] for r in self.runs]
        stat = lambda v: (float(np.mean(v)), float(np.std(v))) if v else (math.nan, math.nan)
        return stat(ok), stat(capped)

    def step_time_ms(self):
        all_steps = np.concatenate([r.step_compute_times for r in self.runs
                                    if len(r.step_compute_times)])
        return float(np.mean(all_steps) * 1e3), float(np.std(all_steps) * 1e3)

    def path_diff_stats(self):
        if not self.path_diffs:
            return math.nan, math.nan
        return float(np.mean(self.path_diffs)), float(np.std(self.path_diffs))


@dataclass
class BenchmarkReport:
    methods: dict[str, MethodReport]
    scenarios: list[Scenario]

    def table(self) -> str:
        header = (f"{'method':<10} {'success':>8} {'tts[s]':>14} "
                  f"{'step[ms]':>14} {'path-diff':>14}")
        lines = [header, "-" * len(header)]
        for name, rep in self.methods.items():
            (tm, ts), _ = rep.time_to_success()
            sm, ss = rep.step_time_ms()
            pm, ps = rep.path_diff_stats()
            lines.append(
                f"{name:<10} {rep.success_rate:>8.2f} "
                f"{tm:>7.2f}±{ts:<6.2f} {sm:>7.2f}±{ss:<6.2f} {pm:>7.3f}±{ps:<6.3f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", "scenario", "success", "tts_s", "mean_step_ms", "path_diff"])
        for name, rep in self.methods.items():
            for i, run in enumerate(rep.runs):
                scen = self.scenarios[i].name or f"scenario_{i:02d}"
                steps = run.step_compute_times
                writer.writerow([
                    name, scen, int(run.success),
                    f"{run.time_to_success:.3f}" if run.success else "",
                    f"{np.mean(steps) * 1e3:.3f}" if len(steps) else "",
                    f"{rep.path_diffs[i]:.4f}" if i < len(rep.path_diffs) else "",
                ])
        return buf.getvalue()


def _run_for_bench(args):
    scenario_json, method, net_json, with_path_diff = args
    scenario = Scenario.from_json(scenario_json)
    net = PolicyNetwork.from_json(net_json) if net_json else None
    result = run_scenario(scenario, method, net, fabric_params=_method_params(method))
    pdiff = None
    if with_path_diff:
        free = scenario.without_obstacles()
        mine = run_scenario(free, method, net, fabric_params=_method_params(method))
        ref = run_scenario(free, VANILLA_PUMA, net)
        pdiff = path_difference(mine.ee_path, ref.ee_path)
    return result, pdiff


def benchmark(suite: list[Scenario], methods: list[str], net: PolicyNetwork | None = None,
              with_path_diff: bool = True, workers: int = 1) -> BenchmarkReport:
    """Run every method over the suite and aggregate the paper's four metrics.

    The path difference compares each method against the pulled learned
    policy on the obstacle-free version of every scenario, mirroring how the
    tracking fidelity of the combiners is scored.
    """
    if not suite:
        raise ValueError("benchmark needs a nonempty scenario suite")
    report = BenchmarkReport({}, list(suite))
    jobs = []
    for method in methods:
        for scenario in suite:
            need_net = method != VANILLA_FABRICS
            jobs.append((scenario.to_json(), method,
                         net.to_json() if (need_net or with_path_diff) and net else None,
                         with_path_diff))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_for_bench, jobs))
    else:
        outcomes = [_run_for_bench(j) for j in jobs]
    k = 0
    for method in methods:
        rep = MethodReport(method)
        for _ in suite:
            result, pdiff = outcomes[k]
            rep.runs.append(result)
            if pdiff is not None:
                rep.path_diffs.append(pdiff)
            k += 1
        report.methods[method] = rep
    return report


def scaling_probe(n_obstacles: int, combiner_kind: str, net: PolicyNetwork | None = None,
                  robot: RobotModel | None = None, steps: int = 300, seed: int = 0) -> float:
    """Mean per-step compute time (s) in a scene of n non-blocking spheres."""
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be nonnegative")
    robot = robot or default_arm(3)
    rng = np.random.default_rng(seed)
    reach = robot.reach
    if n_obstacles:
        ang = rng.uniform(0, 2 * math.pi, n_obstacles)
        rad = reach + 0.5 + rng.uniform(0, 3.0, n_obstacles)  # outside the arm's reach
        centers = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        radii = rng.uniform(0.05, 0.2, n_obstacles)
    else:
        centers, radii = np.zeros((0, 2)), np.zeros(0)
    config = CombinerConfig(kind=combiner_kind)
    stepper = make_stepper(combiner_kind, robot, net, config,
                           obstacle_params=_method_params(combiner_kind))
    goal = net.goal if net is not None else np.array([0.6 * reach, 0.3 * reach, 0.3])
    q = np.linspace(0.3, 0.8, robot.n_joints)
    qdot = np.zeros(robot.n_joints)
    dt = config.control_dt
    elapsed = []
    for _ in range(steps):
        t0 = time.perf_counter()
        out = stepper(ConfigurationState(q, qdot), centers, radii, goal)
        elapsed.append(time.perf_counter() - t0)
        qdot = np.clip(qdot + out.qddot * dt, -config.vel_clamp, config.vel_clamp)
        q = q + qdot * dt
    return float(np.mean(elapsed))


# ---------------------------------------------------------------------------
# scenario generation
# ---------------------------------------------------------------------------

def _segment_distance(p, a, b) -> float:
    ab = b - a
    s = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + s * ab)))


def _reachable_pose(robot: RobotModel, rng, margin: float = 0.82):
    """Forward-kinematics pose of a random interior configuration."""
    ee = ee_task_map(robot)
    lo, hi = np.asarray(robot.joint_lower), np.asarray(robot.joint_upper)
    for _ in range(200):
        q = rng.uniform(lo * margin, hi * margin)
        pose = ee.value(q)
        if np.linalg.norm(pose[:2] - robot.base_position) > 0.45 * robot.reach:
            return q, pose
    raise RuntimeError("could not sample a reachable pose")


def scenario_suite_generate(kind: str, count: int, seed: int,
                            robot: RobotModel | None = None,
                            goal_center: np.ndarray | None = None,
                            duration: float = 12.0) -> list[Scenario]:
    """Randomized desk-scale scenarios with a blocking obstacle on the route.

    Every scenario places at least one obstacle within 0.15 m of the straight
    line from the start pose to the goal; a third of them move the goal
    during the run, and every fourth drifts the blocking obstacle slowly.
    Deterministic per seed; raises after 1000 rejected placements.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if kind not in (REACH_LIKE, POUR_LIKE):
        raise ValueError(f"unknown suite kind {kind!r}")
    robot = robot or default_arm(3)
    ee = ee_task_map(robot)
    base = np.asarray(robot.base_position)
    goal_center = np.array([1.2, 0.9, 0.5]) if goal_center is None else np.asarray(goal_center)

    scenarios = []
    rng = np.random.default_rng(seed)
    for i in range(count):
        for attempt in range(1000):
            q0, start = _reachable_pose(robot, rng)
            # goal near the policy's training goal so retargeting stays in range
            shift = rng.uniform(-0.45, 0.45, 2)
            dtheta = rng.uniform(-0.5, 0.5) if kind == POUR_LIKE else rng.uniform(-0.25, 0.25)
            goal = goal_center + np.array([shift[0], shift[1], dtheta])
            if np.linalg.norm(goal[:2] - base) > 0.88 * robot.reach:
                continue
            d_sg = np.linalg.norm(start[:2] - goal[:2])
            if not 0.8 <= d_sg <= 2.1:
                continue

            s = rng.uniform(0.35, 0.65)
            lateral = rng.uniform(-0.12, 0.12)
            seg = goal[:2] - start[:2]
            perp = np.array([-seg[1], seg[0]]) / np.linalg.norm(seg)
            radius = rng.uniform(0.10, 0.18)
            center = start[:2] + s * seg + lateral * perp
            if (np.linalg.norm(center - start[:2]) < radius + 0.15
                    or np.linalg.norm(center - goal[:2]) < radius + 0.15
                    or np.linalg.norm(center - base) < radius + 0.4):
                continue
            velocity = (0.0, 0.0)
            if i % 4 == 1:
                velocity = tuple(rng.uniform(-0.04, 0.04, 2))
            obstacles = [Obstacle(tuple(center), radius, velocity)]

            # optional distractor away from the route
            if rng.uniform() < 0.6:
                for _ in range(50):
                    c2 = base + rng.uniform(-1.0, 1.0, 2) * robot.reach
                    r2 = rng.uniform(0.08, 0.15)
                    if (_segment_distance(c2, start[:2], goal[:2]) > r2 + 0.3
                            and np.linalg.norm(c2 - base) > r2 + 0.4
                            and np.linalg.norm(c2 - start[:2]) > r2 + 0.2
                            and np.linalg.norm(c2 - goal[:2]) > r2 + 0.2):
                        obstacles.append(Obstacle(tuple(c2), r2))
                        break

            waypoints = ()
            if i % 3 == 2:
                drift = rng.uniform(-0.22, 0.22, 2)
                target = goal + np.array([drift[0], drift[1], rng.uniform(-0.15, 0.15)])
                if np.linalg.norm(target[:2] - base) <= 0.88 * robot.reach:
                    waypoints = ((0.45 * duration, target),)

            blocking = _segment_distance(np.asarray(obstacles[0].center),
                                         start[:2], goal[:2]) - obstacles[0].radius
            if blocking > 0.15:
                continue
            # the whole arm body must start clear, and moving obstacles must
            # not drift onto the goal or the base by the end of the run
            oc = np.array([o.at(0.0) for o in obstacles])
            orad = np.array([o.radius for o in obstacles])
            if min_surface_gap(robot, q0, oc, orad) < 0.06:
                continue
            end_ok = True
            for o in obstacles:
                c_end = o.at(duration)
                if (np.linalg.norm(c_end - goal[:2]) < o.radius + 0.15
                        or np.linalg.norm(c_end - base) < o.radius + 0.35):
                    end_ok = False
            if not end_ok:
                continue
            scenarios.append(Scenario(
                robot=robot, q0=q0, goal=goal, goal_waypoints=waypoints,
                obstacles=tuple(obstacles), duration=duration,
                seed=seed + i, name=f"{kind.split('-')[0]}_{i:02d}",
            ))
            break
        else:
            raise RuntimeError(f"could not place scenario {i} after 1000 attempts")
    return scenarios


def concave_trap_scenario(robot: RobotModel | None = None,
                          goal: np.ndarray | None = None,
                          duration: float = 12.0) -> Scenario:
    """A C-shaped pocket of spheres between start and goal.

    The straight pull into the pocket cancels against the barrier repulsion,
    so a purely local attractor policy stalls inside; the scenario exists to
    exhibit that failure mode.
    """
    robot = robot or default_arm(3)
    goal = np.array([1.2, 0.9, 0.5]) if goal is None else np.asarray(goal)
    ee = ee_task_map(robot)
    q0 = np.array([2.35, -1.1, -0.45][: robot.n_joints])
    start = ee.value(q0)
    seg = goal[:2] - start[:2]
    mid = start[:2] + 0.55 * seg
    u = seg / np.linalg.norm(seg)
    spheres = []
    r_arc, r_obs = 0.42, 0.12
    for ang in np.linspace(-1.25, 1.25, 6):
        c, s = math.cos(ang), math.sin(ang)
        # arc bows toward the start: opening faces the incoming straight line
        offset = -r_arc * (c * u + s * np.array([-u[1], u[0]]))
        spheres.append(Obstacle(tuple(mid - offset), r_obs))
    return Scenario(robot=robot, q0=q0, goal=goal, obstacles=tuple(spheres),
                    duration=duration, name="concave_trap")
