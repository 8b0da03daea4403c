"""Synthetic demonstration sets and the CSV/manifest interchange format.

Demonstrations are rollouts of a hand-designed damped spring toward the goal
with a velocity-orthogonal "curl" bend that shapes the approach (straight,
arc, sine-approach, s-curve). The curl is perpendicular to the velocity, so
the spring's Lyapunov argument is untouched and every trajectory ends at the
goal regardless of shape.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("straight", "arc", "sine-approach", "s-curve")

GOAL_TOL = 0.01       # terminal position tolerance
VEL_TOL = 0.02        # terminal speed tolerance


@dataclass(frozen=True)
class DemoTrajectory:
    t: np.ndarray   # (N,)
    x: np.ndarray   # (N, d)
    v: np.ndarray   # (N, d)
    a: np.ndarray   # (N, d)


@dataclass(frozen=True)
class DemonstrationSet:
    trajectories: tuple[DemoTrajectory, ...]
    dt: float
    goal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        if not self.trajectories:
            raise ValueError("demonstration set is empty")
        for traj in self.trajectories:
            steps = np.diff(traj.t)
            if steps.size and not np.allclose(steps, self.dt, rtol=1e-6, atol=1e-9):
                raise ValueError("trajectory sampling period disagrees with dt")
            if np.linalg.norm(traj.x[-1] - self.goal) > GOAL_TOL:
                raise ValueError("trajectory does not terminate at the goal")
            if np.linalg.norm(traj.v[-1]) > VEL_TOL:
                raise ValueError("trajectory does not come to rest")

    @property
    def dim(self) -> int:
        return self.goal.size

    def stacked(self):
        """All (x, v, a) samples concatenated across trajectories."""
        xs = np.concatenate([tr.x for tr in self.trajectories])
        vs = np.concatenate([tr.v for tr in self.trajectories])
        accs = np.concatenate([tr.a for tr in self.trajectories])
        return xs, vs, accs


def _curl_gain(shape: str, amplitude: float):
    if shape == "straight":
        return lambda r: 0.0
    if shape == "arc":
        return lambda r: amplitude
    if shape == "sine-approach":
        return lambda r: amplitude * math.sin(5.0 * r)
    if shape == "s-curve":
        return lambda r: amplitude * math.tanh(4.0 * (r - 0.55))
    raise ValueError(f"unknown demo shape {shape!r}; expected one of {SHAPES}")


def demo_field(shape: str, goal: np.ndarray, k_p: float = 4.0, k_d: float = 3.6,
               amplitude: float = 2.0):
    """Goal-convergent acceleration field used to synthesize demonstrations."""
    goal = np.asarray(goal, dtype=float)
    gain = _curl_gain(shape, amplitude)

    def accel(x, v):
        d = x - goal
        a = -k_p * d - k_d * v
        r = np.linalg.norm(d[:2])
        g = gain(r)
        if g != 0.0:
            a = a.copy()
            a[0] += -g * v[1]
            a[1] += g * v[0]
        return a

    return accel


def synth_demos(shape: str, count: int, dt: float, dim: int = 2, goal=None,
                spread: float = 1.0, seed: int = 0, amplitude: float = 2.0,
                max_duration: float = 30.0) -> DemonstrationSet:
    """Generate `count` demonstrations of the named shape, sampled at dt.

    Starts sit on an arc of radius ~`spread` around the goal (extra dims get
    uniform offsets) with zero initial velocity. Integration runs at a fine
    internal step and is cut once the state is at rest on the goal.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    goal = np.zeros(dim) if goal is None else np.asarray(goal, dtype=float)
    if goal.size != dim:
        raise ValueError("goal dimension mismatch")
    rng = np.random.default_rng(seed)
    accel = demo_field(shape, goal, amplitude=amplitude)

    h = dt / max(1, round(dt / 1e-3))  # internal RK4 step, divides dt exactly
    per_sample = int(round(dt / h))
    trajectories = []
    for i in range(count):
        ang = 2.0 * math.pi * (i / count) + rng.uniform(-0.15, 0.15)
        x = goal.copy()
        x[0] += spread * (1.0 + rng.uniform(-0.15, 0.15)) * math.cos(ang)
        x[1] += spread * (1.0 + rng.uniform(-0.15, 0.15)) * math.sin(ang)
        if dim > 2:
            x[2:] += rng.uniform(-0.6 * spread, 0.6 * spread, dim - 2)
        v = np.zeros(dim)

        ts, xs, vs, accs = [0.0], [x.copy()], [v.copy()], [accel(x, v)]
        t = 0.0
        while t < max_duration:
            for _ in range(per_sample):
                k1v = accel(x, v)
                k1x = v
                k2v = accel(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
                k2x = v + 0.5 * h * k1v
                k3v = accel(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
                k3x = v + 0.5 * h * k2v
                k4v = accel(x + h * k3x, v + h * k3v)
                k4x = v + h * k3v
                x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
                v = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
            t += dt
            ts.append(t)
            xs.append(x.copy())
            vs.append(v.copy())
            accs.append(accel(x, v))
            if np.linalg.norm(x - goal) < 0.6 * GOAL_TOL and np.linalg.norm(v) < 0.5 * VEL_TOL:
                break
        else:
            raise RuntimeError(f"demonstration {i} did not converge within {max_duration}s")
        trajectories.append(DemoTrajectory(np.array(ts), np.array(xs), np.array(vs), np.array(accs)))

    return DemonstrationSet(tuple(trajectories), dt, goal)


# -- CSV + manifest interchange ---------------------------------------------

def save_demo_manifest(demos: DemonstrationSet, directory) -> Path:
    """Write one CSV per trajectory plus a manifest.json; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = demos.dim
    header = (["t"] + [f"x{i + 1}" for i in range(d)]
              + [f"v{i + 1}" for i in range(d)] + [f"a{i + 1}" for i in range(d)])
    files = []
    for idx, traj in enumerate(demos.trajectories):
        name = f"demo_{idx:03d}.csv"
        with open(directory / name, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for k in range(len(traj.t)):
                writer.writerow([repr(traj.t[k])]
                                + [repr(val) for val in traj.x[k]]
                                + [repr(val) for val in traj.v[k]]
                                + [repr(val) for val in traj.a[k]])
        files.append(name)
    manifest = directory / "manifest.json"
    with open(manifest, "w") as f:
        json.dump({"files": files, "dt": demos.dt, "goal": demos.goal.tolist()}, f, indent=1)
    return manifest


def load_demo_manifest(manifest_path) -> DemonstrationSet:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = manifest_path.parent
    dt = float(manifest["dt"])
    goal = np.array(manifest["goal"], dtype=float)
    d = goal.size
    trajectories = []
    for name in manifest["files"]:
        rows = []
        with open(base / name) as f:
            reader = csv.reader(f)
            header = next(reader)
            if len(header) != 1 + 3 * d:
                raise ValueError(f"{name}: expected {1 + 3 * d} columns, got {len(header)}")
            for row in reader:
                rows.append([float(v) for v in row])
        arr = np.array(rows)
        trajectories.append(DemoTrajectory(
            arr[:, 0], arr[:, 1:1 + d], arr[:, 1 + d:1 + 2 * d], arr[:, 1 + 2 * d:]))
    return DemonstrationSet(tuple(trajectories), dt, goal)
