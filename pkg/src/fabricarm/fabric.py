"""Algebra of second-order motion specs and energy-conserving avoidance fabrics.

A spec is the pair (M, xi) describing M xddot + xi = 0 in some space. Avoidance
behaviors are built from an acceleration geometry (homogeneous of degree 2 in
velocity) and a Finsler energy; energization rescales the geometry along the
velocity so the flow conserves the energy without changing its path. Specs are
pulled into configuration space through task maps and summed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .kinematics import ConfigurationState, TaskMap, TaskState
from .numutil import arc_lengths, integrate_second_order, sample_at_arclength

EPS_DIV = 1e-9
EPS_REG = 1e-6


@dataclass(frozen=True)
class Spec:
    """Symmetric metric M and force xi of the system M xddot + xi = 0."""

    M: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "xi", xi)
        if M.ndim != 2 or M.shape[0] != M.shape[1] or xi.shape != (M.shape[0],):
            raise ValueError(f"inconsistent spec dimensions M{M.shape} xi{xi.shape}")
        if np.max(np.abs(M - M.T), initial=0.0) >= 1e-9:
            raise ValueError("spec metric must be symmetric")

    @property
    def space_dim(self) -> int:
        return self.M.shape[0]

    def resolve(self, eps_reg: float = EPS_REG) -> np.ndarray:
        """Acceleration of the spec alone: xddot = -(M + eps I)^-1 xi."""
        reg = self.M + eps_reg * np.eye(self.space_dim)
        return np.linalg.solve(reg, -self.xi)


@dataclass(frozen=True)
class FinslerEnergy:
    """Velocity-homogeneous (degree 2) energy with its metric and force.

    Along any trajectory of metric(x, v) xddot + force(x, v) = 0 the energy
    value is conserved.
    """

    energy: Callable[[np.ndarray, np.ndarray], float]
    metric: Callable[[np.ndarray, np.ndarray], np.ndarray]
    force: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim: int


@dataclass(frozen=True)
class Geometry:
    """Acceleration policy of an avoidance behavior, degree-2 homogeneous in velocity."""

    accel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    space_dim: int


@dataclass(frozen=True)
class FabricComponent:
    task_map: TaskMap
    geometry: Geometry
    energy: FinslerEnergy

    def __post_init__(self):
        if not (self.task_map.output_dim == self.geometry.space_dim == self.energy.dim):
            raise ValueError("task map, geometry and energy dimensions must agree")


def euclidean_energy(dim: int) -> FinslerEnergy:
    I = np.eye(dim)
    return FinslerEnergy(
        energy=lambda x, v: 0.5 * float(v @ v),
        metric=lambda x, v: I.copy(),
        force=lambda x, v: np.zeros(dim),
        dim=dim,
    )


def constant_metric_energy(M: np.ndarray) -> FinslerEnergy:
    M = np.asarray(M, dtype=float)
    return FinslerEnergy(
        energy=lambda x, v: 0.5 * float(v @ M @ v),
        metric=lambda x, v: M.copy(),
        force=lambda x, v: np.zeros(M.shape[0]),
        dim=M.shape[0],
    )


def quadratic_energy(G, dG, dim: int) -> FinslerEnergy:
    """Energy 0.5 v^T G(x) v for a position-dependent metric.

    dG(x) must return the (dim, dim, dim) derivative tensor indexed [k, :, :]
    = dG/dx_k; the force is Gdot v - 0.5 * grad_x(v^T G v).
    """

    def force(x, v):
        T = dG(x)
        Gdot = np.tensordot(v, T, axes=(0, 0))
        grad = 0.5 * np.einsum("kij,i,j->k", T, v, v)
        return Gdot @ v - grad

    return FinslerEnergy(
        energy=lambda x, v: 0.5 * float(v @ G(x) @ v),
        metric=lambda x, v: G(x),
        force=force,
        dim=dim,
    )


def scalar_metric_energy(m, dm) -> FinslerEnergy:
    """1D energy 0.5 m(x) xdot^2 with force 0.5 m'(x) xdot^2."""
    return FinslerEnergy(
        energy=lambda x, v: 0.5 * float(m(x[0])) * float(v[0]) ** 2,
        metric=lambda x, v: np.array([[m(x[0])]], dtype=float),
        force=lambda x, v: np.array([0.5 * dm(x[0]) * v[0] ** 2]),
        dim=1,
    )


def energize(pi: np.ndarray, energy: FinslerEnergy, state: TaskState,
             eps_div: float = EPS_DIV, eps_v: float = 1e-9) -> np.ndarray:
    """Adjust an acceleration along the velocity so the flow conserves `energy`.

    Returns pi + alpha * xdot with alpha = -(xdot^T M pi + xdot^T xi) /
    (xdot^T M xdot + eps_div); below speed eps_v there is no direction to
    energize along and pi is returned unchanged.
    """
    pi = np.asarray(pi, dtype=float)
    x, v = state.x, state.xdot
    if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise ValueError("energize requires finite inputs")
    if np.linalg.norm(v) < eps_v:
        return pi.copy()
    M = energy.metric(x, v)
    xi = energy.force(x, v)
    alpha = -(v @ M @ pi + v @ xi) / (v @ M @ v + eps_div)
    return pi + alpha * v


def geometry_to_spec(geometry: Geometry, energy: FinslerEnergy, state: TaskState) -> Spec:
    """Spec whose standalone resolution reproduces the energized geometry."""
    M = energy.metric(state.x, state.xdot)
    pi = energize(geometry.accel(state.x, state.xdot), energy, state)
    return Spec(M, -M @ pi)


def pull(spec: Spec, task_map: TaskMap, state: ConfigurationState) -> Spec:
    """Map a task-space spec into configuration space through a task map.

    Uses the metric-weighted curvature form (J^T M J, J^T (xi + M Jdot qdot)),
    which is exact under composition of task maps.
    """
    if spec.space_dim != task_map.output_dim:
        raise ValueError(
            f"spec dim {spec.space_dim} does not match task map dim {task_map.output_dim}"
        )
    J = task_map.jacobian(state.q)
    curv = task_map.curvature(state.q, state.qdot)
    M = J.T @ spec.M @ J
    return Spec(0.5 * (M + M.T), J.T @ (spec.xi + spec.M @ curv))


def sum_specs(specs: Sequence[Spec]) -> Spec:
    if not specs:
        raise ValueError("cannot sum an empty list of specs")
    dim = specs[0].space_dim
    if any(s.space_dim != dim for s in specs):
        raise ValueError("all specs must share one dimension")
    M = sum((s.M for s in specs), start=np.zeros((dim, dim)))
    xi = sum((s.xi for s in specs), start=np.zeros(dim))
    return Spec(M, xi)


def forced_fabric_step(fabric_spec_sum: Spec, forcing: np.ndarray, damping: float,
                       state: ConfigurationState, eps_reg: float = EPS_REG) -> np.ndarray:
    """Joint acceleration of the forced, damped fabric:
    (M + eps I)^-1 (-xi + forcing) - damping * qdot."""
    if damping <= 0:
        raise ValueError("damping must be positive")
    reg = fabric_spec_sum.M + eps_reg * np.eye(fabric_spec_sum.space_dim)
    try:
        qddot = np.linalg.solve(reg, -fabric_spec_sum.xi + np.asarray(forcing, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("fabric metric singular even after regularization") from exc
    return qddot - damping * state.qdot


# ---------------------------------------------------------------------------
# 1D avoidance fabrics on distance-like coordinates
# ---------------------------------------------------------------------------

BARRIER = "barrier"
FINITE = "finite"


@dataclass(frozen=True)
class FabricParams:
    """Parameters of the 1D avoidance fabric on a separation coordinate.

    The barrier metric blows up at contact (strict avoidance, unusable where a
    finite metric is required); the finite variant decays to m_base and stays
    bounded everywhere.
    """

    k_geo: float = 0.5
    p: float = 1.0
    variant: str = BARRIER
    m_base: float = 0.1
    k_m: float = 2.0
    l_m: float = 0.5
    x_min: float = 1e-3

    def __post_init__(self):
        if self.variant not in (BARRIER, FINITE):
            raise ValueError(f"unknown fabric variant {self.variant!r}")
        for name in ("k_geo", "p", "m_base", "k_m", "l_m", "x_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"fabric parameter {name} must be positive")

    def to_json(self) -> dict:
        return {
            "geometry": {"k_geo": self.k_geo, "p": self.p},
            "metric": {
                "variant": self.variant,
                "m_base": self.m_base,
                "k_m": self.k_m,
                "l_m": self.l_m,
            },
        }

    @classmethod
    def from_json(cls, data: dict, **overrides) -> "FabricParams":
        geo = data.get("geometry", {})
        met = data.get("metric", {})
        kwargs = dict(
            k_geo=geo.get("k_geo", 0.5),
            p=geo.get("p", 1.0),
            variant=met.get("variant", BARRIER),
            m_base=met.get("m_base", 0.1),
            k_m=met.get("k_m", 2.0),
            l_m=met.get("l_m", 0.5),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


def _metric_fns(params: FabricParams):
    if params.variant == BARRIER:
        m = lambda x: params.k_m / x**2 + params.m_base
        dm = lambda x: -2.0 * params.k_m / x**3
    else:
        m = lambda x: params.m_base + params.k_m * np.exp(-x / params.l_m)
        dm = lambda x: -(params.k_m / params.l_m) * np.exp(-x / params.l_m)
    return m, dm


def obstacle_fabric(variant: str = BARRIER, params: FabricParams | None = None):
    """Repelling geometry plus Finsler energy on a 1D separation coordinate.

    The geometry k_geo / x^p * xdot^2 acts only while approaching (xdot < 0)
    and is degree-2 homogeneous in xdot. Coordinates at or below zero
    (penetration) are evaluated at the clamp x_min.
    """
    if params is None:
        params = FabricParams(variant=variant)
    elif params.variant != variant:
        raise ValueError("variant argument disagrees with params.variant")

    x_min = params.x_min
    m, dm = _metric_fns(params)

    # the clamp catches penetration (x <= 0) only; the natural barrier in
    # (0, x_min) is what keeps unforced rollouts on the safe side of contact
    def clamp(x):
        x = float(x)
        return x if x > 0.0 else x_min

    def accel(x, v):
        xc = clamp(x[0])
        approaching = 1.0 if v[0] < 0.0 else 0.0
        return np.array([params.k_geo / xc**params.p * v[0] ** 2 * approaching])

    energy = scalar_metric_energy(lambda x: m(clamp(x)), lambda x: dm(clamp(x)))
    return Geometry(accel, 1), energy


def joint_limit_fabric(params: FabricParams | None = None):
    """Obstacle fabric tuned for joint-limit margins (gentler geometry gain)."""
    if params is None:
        params = FabricParams(k_geo=0.1)
    return obstacle_fabric(params.variant, params)


def path_invariance_check(geometry: Geometry, energy: FinslerEnergy,
                          x0, xdot0, duration: float = 2.0, dt: float = 1e-3,
                          samples: int = 200) -> float:
    """Max pointwise gap between the raw and energized paths.

    Both systems are integrated for `duration`, truncated to their common arc
    length and compared at `samples` matched arc-length stations. Degree-2
    geometries must come out below 1e-3; a divergent rollout raises.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    v0 = np.atleast_1d(np.asarray(xdot0, dtype=float))
    steps = int(round(duration / dt))
    bound = 1e3 * (1.0 + np.linalg.norm(x0))

    def energized(x, v):
        return energize(geometry.accel(x, v), energy, TaskState(x, v))

    raw_path, _ = integrate_second_order(lambda x, v: geometry.accel(x, v), x0, v0, dt, steps)
    en_path, _ = integrate_second_order(energized, x0, v0, dt, steps)
    for name, path in (("raw", raw_path), ("energized", en_path)):
        if not np.all(np.isfinite(path)) or np.max(np.linalg.norm(path, axis=1)) > bound:
            raise RuntimeError(f"{name} trajectory diverged during path-invariance check")

    common = min(arc_lengths(raw_path)[-1], arc_lengths(en_path)[-1])
    stations = np.linspace(0.0, common, samples)
    a = sample_at_arclength(raw_path, stations)
    b = sample_at_arclength(en_path, stations)
    return float(np.max(np.linalg.norm(a - b, axis=1)))
