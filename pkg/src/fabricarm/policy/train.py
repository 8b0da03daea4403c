"""Losses and the training loop for the task-space policy.

The combined objective is an imitation term (short rollout matching plus
acceleration regression on demonstration triples, plus a goal-rest anchor)
and a latent-stability hinge: along policy rollouts started across the
workspace, the latent distance to the encoded goal must shrink by at least
the margin at every step. Gradients flow through the rollouts themselves
(backprop through time over the semi-implicit Euler integration), so the
hinge shapes the closed-loop behavior and not just the one-step map.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .demos import DemonstrationSet
from .network import PolicyNetwork


@dataclass
class TrainingConfig:
    dt: float = 0.02
    margin: float = 0.01
    stability_weight: float = 1.0       # lambda on the stability hinge
    batch_size: int = 64                # stability rollout starts per iteration
    horizon: int = 30                   # stability rollout steps
    window: int = 10                    # imitation rollout steps
    window_batch: int = 64              # imitation windows per iteration
    learning_rate: float = 1e-3
    iterations: int = 3000
    workspace: np.ndarray = None        # (d, 2) lo/hi bounds of the sampled region
    seed: int = 0
    vel_fraction: float = 0.2           # stability starts given demo-like velocities
    vel_std: np.ndarray = None          # per-dim velocity spread for those starts
    eq_weight: float = 5.0              # goal-rest anchor inside the imitation loss
    contrast_weight: float = 1.0        # latent-floor term enforcing goal identifiability
    contrast_scale: float = 2.0         # latent distance >= scale * saturated task distance
    contrast_radius: float = 1.0        # task distance where the floor saturates
    contrast_box: float = 1.4           # floor samples drawn from the workspace widened this much
    brake_weight: float = 1.0           # overspeed braking hinge
    brake_gain: float = 3.0             # required deceleration per unit of speed excess (1/s)
    onpolicy_fraction: float = 0.5      # stability starts drawn from visited-state buffer
    onpolicy_grace: int = 12            # steps an on-policy start may take to begin descending
    probe_rollouts: int = 6             # forward-only rollouts harvested per probe
    probe_steps: int = 400              # length of each probe rollout
    probe_every: int = 2                # iterations between probes
    buffer_size: int = 4096
    weight_decay: float = 0.0
    calibrate_goal: bool = True         # shift the output bias to an exact goal equilibrium
    log_every: int = 200

    def __post_init__(self):
        if self.margin < 0 or self.stability_weight <= 0 or self.learning_rate <= 0:
            raise ValueError("margin must be >= 0, weights and learning rate positive")
        if self.dt <= 0 or min(self.batch_size, self.horizon, self.window, self.iterations) < 1:
            raise ValueError("batch size, horizon, window, iterations and dt must be positive")
        if self.workspace is not None:
            ws = np.asarray(self.workspace, dtype=float)
            if ws.ndim != 2 or ws.shape[1] != 2 or np.any(ws[:, 0] >= ws[:, 1]):
                raise ValueError("workspace must be (d, 2) with lo < hi")
            self.workspace = ws


@dataclass
class Rollout:
    xs: np.ndarray        # (steps+1, B, d) or (steps+1, d) for a single start
    vs: np.ndarray
    ys: np.ndarray        # latent encodings per step
    diverged: bool = False


def rollout(net: PolicyNetwork, x0, xdot0, steps: int, dt: float, goal=None) -> Rollout:
    """Semi-implicit Euler rollout of the policy, with per-step latent encodings.

    Truncates (and flags) if the state leaves ten times the trusted region.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X = np.atleast_2d(x0).copy()
    V = np.atleast_2d(np.asarray(xdot0, dtype=float)).copy()
    bound = 10.0 * np.where(np.isfinite(net.input_bounds), net.input_bounds, 1e6)[: net.dim]
    xs, vs, ys = [X.copy()], [V.copy()], [net.encode(X, V, goal)]
    diverged = False
    for _ in range(steps):
        A = net.forward(X, V, goal)
        V = V + A * dt
        X = X + V * dt
        if np.any(np.abs(net._relative(X, goal)) > bound):
            diverged = True
            break
        xs.append(X.copy())
        vs.append(V.copy())
        ys.append(net.encode(X, V, goal))
    xs, vs, ys = np.array(xs), np.array(vs), np.array(ys)
    if single:
        xs, vs, ys = xs[:, 0], vs[:, 0], ys[:, 0]
    return Rollout(xs, vs, ys, diverged)


# -- backprop through time over the rollout ----------------------------------

def _rollout_caches(net: PolicyNetwork, X0, V0, steps: int, dt: float):
    X, V = X0.copy(), V0.copy()
    caches, Xs, Vs = [], [X.copy()], [V.copy()]
    for t in range(steps + 1):
        cache = net.state_cache(X, V)
        caches.append(cache)
        if t < steps:
            V = V + net.accel_of(cache) * dt
            X = X + V * dt
            Xs.append(X.copy())
            Vs.append(V.copy())
    return np.array(Xs), np.array(Vs), caches


def _bptt(net: PolicyNetwork, caches, dt: float, grads,
          dXs=None, dVs=None, dYs=None, dAs=None):
    """Accumulate parameter gradients for a loss with the given per-step cotangents."""
    H = len(caches) - 1
    B = caches[0].z0.shape[0]
    lam_x = np.zeros((B, net.dim))
    lam_v = np.zeros((B, net.dim))
    for t in range(H, -1, -1):
        dA = np.zeros((B, net.dim))
        if t < H:
            dA += dt * lam_v + dt * dt * lam_x
        if dAs is not None:
            dA += dAs[t]
        d_out = dA * net.out_scale
        d_latent = dYs[t] if dYs is not None else None
        _, d_z0 = net.backward(caches[t], d_out=d_out, d_latent=d_latent, grads=grads)
        dx, dv = net.input_cotangent(caches[t], d_z0)
        if t < H:
            dx = dx + lam_x
            dv = dv + lam_v + dt * lam_x
        if dXs is not None:
            dx = dx + dXs[t]
        if dVs is not None:
            dv = dv + dVs[t]
        lam_x, lam_v = dx, dv
    return grads


# -- stability hinge ----------------------------------------------------------

def _sample_stability_starts(net: PolicyNetwork, config: TrainingConfig, rng, batch_size):
    """Workspace-uniform positions; rest starts plus a velocity-carrying share.

    Half of the velocity share is Gaussian at the demo spread, half uniform
    over the 3-sigma envelope, so braking is shaped across the speeds that
    rollouts actually develop, not just near the demonstrations.
    """
    ws = config.workspace
    if ws is None:
        raise ValueError("training config needs workspace bounds for stability sampling")
    X0 = rng.uniform(ws[:, 0], ws[:, 1], size=(batch_size, net.dim))
    V0 = np.zeros_like(X0)
    if config.vel_fraction > 0 and config.vel_std is not None:
        k = int(round(config.vel_fraction * batch_size))
        if k:
            V0[:k] = rng.normal(0.0, 1.0, size=(k, net.dim)) * np.asarray(config.vel_std)
    return X0, V0


class _StateBuffer:
    """Ring buffer of states visited by the policy's own rollouts.

    Workspace-uniform hinge batches almost never hit the thin corridors where
    a partially trained field escapes; starting part of the batch from states
    the current policy actually reaches closes those pockets.
    """

    def __init__(self, dim, size):
        self.X = np.zeros((size, dim))
        self.V = np.zeros((size, dim))
        self.count = 0
        self.head = 0

    def add(self, X, V):
        for x, v in zip(X, V):
            self.X[self.head] = x
            self.V[self.head] = v
            self.head = (self.head + 1) % len(self.X)
            self.count = min(self.count + 1, len(self.X))

    def sample(self, n, rng):
        idx = rng.integers(0, self.count, size=n)
        return self.X[idx], self.V[idx]


def _probe_visited_states(net, config, rng, buffer: _StateBuffer):
    """Roll the current policy forward (no gradients) and harvest states."""
    ws = config.workspace
    X = rng.uniform(ws[:, 0], ws[:, 1], size=(config.probe_rollouts, net.dim))
    V = np.zeros_like(X)
    stride = max(1, config.probe_steps // 60)
    keep_x, keep_v = [], []
    for t in range(config.probe_steps):
        A = net.forward(X, V)
        V = V + A * config.dt
        X = X + V * config.dt
        if not np.all(np.isfinite(X)):
            break
        if t % stride == 0:
            keep_x.append(X.copy())
            keep_v.append(V.copy())
    if keep_x:
        buffer.add(np.concatenate(keep_x), np.concatenate(keep_v))


def _stable_loss_impl(net, config, rng, batch_size, grads=None, buffer=None):
    X0, V0 = _sample_stability_starts(net, config, rng, batch_size)
    k = 0
    if buffer is not None and buffer.count > 0 and config.onpolicy_fraction > 0:
        k = int(round(config.onpolicy_fraction * batch_size))
        if k:
            X0[-k:], V0[-k:] = buffer.sample(k, rng)
    _, _, caches = _rollout_caches(net, X0, V0, config.horizon, config.dt)
    goal_cache = net.state_cache(net.goal[None, :], np.zeros((1, net.dim)))
    y_g = net.latent_of(goal_cache)
    Y = np.array([net.latent_of(c) for c in caches])          # (H+1, B, L)
    diff = Y - y_g[None]
    d = np.linalg.norm(diff, axis=2)                          # (H+1, B)
    e = config.margin + d[1:] - d[:-1]
    active = (e > 0).astype(float)
    if k:
        # visited-state starts may be mid-escape; braking cannot make latent
        # progress instantly, so give them a grace window before the hinge bites
        active[: config.onpolicy_grace, batch_size - k:] = 0.0
    loss = float(np.sum(np.maximum(e, 0.0) * (active > 0)))
    if grads is None:
        return loss

    # d/d d_t of the hinge sum: appears as +1 in term t-1 and -1 in term t
    coeff = np.zeros_like(d)
    coeff[1:] += active
    coeff[:-1] -= active
    dYs = coeff[:, :, None] * diff / (d[:, :, None] + 1e-12)
    _bptt(net, caches, config.dt, grads, dYs=dYs)
    # the encoded goal moves with the weights too
    d_yg = -dYs.sum(axis=(0, 1), keepdims=True)[0]
    net.backward(goal_cache, d_latent=d_yg, grads=grads)
    return loss


def _contrast_loss_impl(net, config, rng, grads=None):
    """Latent-floor hinge: far-from-goal states must stay far from the latent goal.

    Without this the hinge alone lets the encoder contract escape corridors
    onto the latent goal, satisfying every sampled window while the task-space
    flow diverges; the floor makes the goal identifiable from the latent
    (the zero of psi is then the task goal and nothing else).
    """
    ws = config.workspace
    center = (ws[:, 0] + ws[:, 1]) / 2.0
    half = (ws[:, 1] - ws[:, 0]) / 2.0 * config.contrast_box
    X = rng.uniform(center - half, center + half, size=(config.batch_size, net.dim))
    V = np.zeros_like(X)
    if config.vel_fraction > 0 and config.vel_std is not None:
        k = int(round(config.vel_fraction * config.batch_size))
        if k:
            V[:k] = rng.normal(0.0, 1.0, size=(k, net.dim)) * np.asarray(config.vel_std)
    cache = net.state_cache(X, V)
    goal_cache = net.state_cache(net.goal[None, :], np.zeros((1, net.dim)))
    y_g = net.latent_of(goal_cache)
    diff = net.latent_of(cache) - y_g
    d = np.linalg.norm(diff, axis=1)
    r = np.linalg.norm(net._relative(X, None), axis=1)
    target = config.contrast_scale * np.minimum(r, config.contrast_radius)
    gap = np.maximum(target - d, 0.0)
    B = X.shape[0]
    loss = float(np.sum(gap**2)) / B
    if grads is not None:
        dY = (-2.0 / B) * gap[:, None] * diff / (d[:, None] + 1e-12)
        net.backward(cache, d_latent=dY, grads=grads)
        net.backward(goal_cache, d_latent=-dY.sum(axis=0, keepdims=True), grads=grads)
    return loss


def _overspeed_loss_impl(net, config, rng, grads=None):
    """One-sided hinge: beyond the demonstration speed envelope the policy
    must decelerate along the velocity, at brake_gain per unit of excess.

    States faster than anything demonstrated are reached only by disturbances
    or bad extrapolation; without this term the network is free to accelerate
    along the motion there, and rollouts that overshoot the goal can run away
    through the input clamp instead of being braked back into the shaped
    region. Inside the envelope (excess zero) the term vanishes identically.
    """
    ws = config.workspace
    center = (ws[:, 0] + ws[:, 1]) / 2.0
    half = (ws[:, 1] - ws[:, 0]) / 2.0 * config.contrast_box
    B = config.batch_size
    X = rng.uniform(center - half, center + half, size=(B, net.dim))
    v_env = np.asarray(config.vel_std) * 3.0
    v_cap = 1.5 * net.input_bounds[net.dim:]
    v_cap = np.where(np.isfinite(v_cap), v_cap, 2.0 * v_env)
    V = rng.uniform(-1.0, 1.0, size=(B, net.dim)) * v_cap
    excess = V - np.clip(V, -v_env, v_env)
    exnorm = np.linalg.norm(excess, axis=1)
    mask = exnorm > 0
    if not np.any(mask):
        return 0.0
    cache = net.state_cache(X, V)
    A = net.accel_of(cache)
    vhat = V / (np.linalg.norm(V, axis=1, keepdims=True) + 1e-12)
    along = np.einsum("bi,bi->b", A, vhat)
    viol = np.maximum(along + config.brake_gain * exnorm, 0.0) * mask
    loss = float(np.sum(viol**2)) / B
    if grads is not None:
        dA = (2.0 / B) * (viol[:, None] * vhat)
        net.backward(cache, d_out=dA * net.out_scale, grads=grads)
    return loss


def stable_loss(net: PolicyNetwork, config: TrainingConfig, rng=None,
                batch_size=None) -> float:
    """Latent-stability hinge over freshly sampled workspace rollouts.

    Zero exactly when every sampled latent trajectory moves toward the
    encoded goal by at least the margin at every step.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return _stable_loss_impl(net, config, rng, batch_size or config.batch_size)


# -- imitation loss -----------------------------------------------------------

def _imitation_loss_impl(net, demos: DemonstrationSet, config, rng, grads=None):
    if abs(demos.dt - config.dt) > 1e-9:
        raise ValueError(f"demo dt {demos.dt} does not match config dt {config.dt}")
    loss = 0.0

    # (a) acceleration regression over all demonstration triples
    xs, vs, accs = demos.stacked()
    cache = net.state_cache(xs, vs)
    resid = net.accel_of(cache) - accs
    n = xs.shape[0]
    loss += float(np.sum(resid**2)) / n
    if grads is not None:
        net.backward(cache, d_out=(2.0 / n) * resid * net.out_scale, grads=grads)

    # (b) short policy rollouts from demonstration states vs the recorded segment
    w = config.window
    usable = [tr for tr in demos.trajectories if len(tr.t) > w + 1]
    if usable:
        idx_traj = rng.integers(0, len(usable), size=config.window_batch)
        starts = np.array([rng.integers(0, len(usable[i].t) - w - 1) for i in idx_traj])
        X0 = np.array([usable[i].x[k] for i, k in zip(idx_traj, starts)])
        V0 = np.array([usable[i].v[k] for i, k in zip(idx_traj, starts)])
        ref_x = np.array([[usable[i].x[k + t] for i, k in zip(idx_traj, starts)]
                          for t in range(w + 1)])
        ref_v = np.array([[usable[i].v[k + t] for i, k in zip(idx_traj, starts)]
                          for t in range(w + 1)])
        Xs, Vs, caches = _rollout_caches(net, X0, V0, w, config.dt)
        ex, ev = Xs - ref_x, Vs - ref_v
        m = ex.size
        loss += float(np.sum(ex**2) + np.sum(ev**2)) / m
        if grads is not None:
            _bptt(net, caches, config.dt, grads,
                  dXs=(2.0 / m) * ex, dVs=(2.0 / m) * ev)

    # (c) the goal at rest is an equilibrium (demos end there at rest)
    if config.eq_weight > 0:
        gcache = net.state_cache(net.goal[None, :], np.zeros((1, net.dim)))
        a_g = net.accel_of(gcache)
        loss += config.eq_weight * float(np.sum(a_g**2))
        if grads is not None:
            net.backward(gcache, d_out=2.0 * config.eq_weight * a_g * net.out_scale,
                         grads=grads)
    return loss


def imitation_loss(net: PolicyNetwork, demos: DemonstrationSet,
                   config: TrainingConfig, rng=None) -> float:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return _imitation_loss_impl(net, demos, config, rng)


# -- optimizer and training loop ----------------------------------------------

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        deltas = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            deltas.append(-self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return deltas


def attach_normalization(net: PolicyNetwork, demos: DemonstrationSet,
                         config: TrainingConfig):
    """Set goal, per-dimension input statistics and output scale from the demos."""
    net.goal = demos.goal.copy()
    xs, vs, accs = demos.stacked()
    rel = net._relative(xs, None)
    z = np.concatenate([rel, vs], axis=1)
    net.norm_mean = z.mean(axis=0)
    net.norm_scale = np.maximum(z.std(axis=0), 1e-3)
    net.out_scale = np.maximum(accs.std(axis=0), 1e-3)
    if config.workspace is not None:
        half = np.maximum(np.abs(config.workspace[:, 0] - net.goal),
                          np.abs(config.workspace[:, 1] - net.goal))
    else:
        half = np.abs(rel).max(axis=0) * 1.5
    v_half = np.maximum(np.abs(vs).max(axis=0) * 2.0, 1e-2)
    net.input_bounds = np.concatenate([half, v_half])
    net.invalidate_caches()


def train(net: PolicyNetwork, demos: DemonstrationSet, config: TrainingConfig):
    """Optimize the combined imitation + stability objective; returns (net, history).

    Deterministic per config.seed. After training, the output bias is shifted
    so the goal at rest is an exact equilibrium (calibrate_goal). Raises on a
    non-finite loss, with the history so far attached to the exception.
    """
    if config.vel_std is None and config.vel_fraction > 0:
        _, vs, _ = demos.stacked()
        config = replace(config, vel_std=np.maximum(vs.std(axis=0), 1e-3))
    attach_normalization(net, demos, config)

    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), config.learning_rate)
    buffer = None
    if config.onpolicy_fraction > 0:
        buffer = _StateBuffer(net.dim, config.buffer_size)
    history = {"iteration": [], "imitation": [], "stable": [], "contrast": [], "total": []}
    for it in range(config.iterations):
        if buffer is not None and it % config.probe_every == 0:
            _probe_visited_states(net, config, rng, buffer)
        grads = net.zero_grads()
        il = _imitation_loss_impl(net, demos, config, rng, grads)
        sgrads = net.zero_grads()
        st = _stable_loss_impl(net, config, rng, config.batch_size, sgrads, buffer=buffer)
        scale = config.stability_weight / config.batch_size
        for g, sg in zip(grads, sgrads):
            g += scale * sg
        ct = 0.0
        if config.contrast_weight > 0:
            cgrads = net.zero_grads()
            ct = _contrast_loss_impl(net, config, rng, cgrads)
            for g, cg in zip(grads, cgrads):
                g += config.contrast_weight * cg
        bk = 0.0
        if config.brake_weight > 0 and config.vel_std is not None:
            bgrads = net.zero_grads()
            bk = _overspeed_loss_impl(net, config, rng, bgrads)
            for g, bg in zip(grads, bgrads):
                g += config.brake_weight * bg
        if config.weight_decay > 0:
            for i, wgt in enumerate(net.weights):
                grads[i] += 2.0 * config.weight_decay * wgt
        total = il + scale * st + config.contrast_weight * ct + config.brake_weight * bk
        if not np.isfinite(total):
            err = RuntimeError(f"training diverged at iteration {it}: loss={total}")
            err.history = history
            raise err
        if it % config.log_every == 0 or it == config.iterations - 1:
            history["iteration"].append(it)
            history["imitation"].append(il)
            history["stable"].append(st)
            history["contrast"].append(ct)
            history["total"].append(total)
        net.apply_delta(opt.step(grads))

    if config.calibrate_goal:
        resid = net.forward(net.goal, np.zeros(net.dim)) / net.out_scale
        net.biases[-1] -= resid
        net.invalidate_caches()

    history["eval_stable"] = stable_loss(
        net, config, rng=np.random.default_rng(config.seed + 7919))
    return net, history
