"""Second-order task-space policy network with an encoder/decoder split.

The network maps a goal-relative state (x - x_g, xdot) to an acceleration.
A designated hidden layer is the latent space: `encode` runs the layers up to
it, `decode` the rest, and forward(x, xdot) == decode(encode(x, xdot)) holds
exactly because both are views of one weight stack. The latent encoding of
the goal at rest doubles as the minimum of the goal potential psi.

Everything is plain numpy; gradients are computed by the explicit
reverse-mode pass in `backward`, which is shared by training, the potential
gradient and the tests, so there is a single numerically consistent
differentiation path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..kinematics import wrap_angle

WEIGHT_FORMAT_VERSION = 1


@dataclass
class ForwardCache:
    z0: np.ndarray                 # normalized input, (B, 2d)
    pre: list[np.ndarray]          # pre-activations per layer
    post: list[np.ndarray]         # activations per layer (last one linear)
    clipped: np.ndarray            # (B,) True where the input hit the clamp
    pass_mask: np.ndarray = None   # (B, 2d) False where the clamp froze an entry

    @property
    def out(self) -> np.ndarray:
        return self.post[-1]


class PolicyNetwork:
    """MLP policy xddot = f(x, xdot) with latent split and goal-relative inputs."""

    def __init__(self, dim: int, hidden=(64, 64, 64), split_index: int = 2,
                 goal=None, angle_dims=(), seed: int = 0, zero_output: bool = False):
        self.dim = int(dim)
        self.layer_sizes = [2 * dim, *hidden, dim]
        if not (1 <= split_index < len(self.layer_sizes) - 1):
            raise ValueError("split_index must designate a hidden layer")
        if self.layer_sizes[split_index] < dim:
            raise ValueError("latent dimension must be at least the task dimension")
        self.split_index = int(split_index)
        self.activation = "tanh"
        self.goal = np.zeros(dim) if goal is None else np.asarray(goal, dtype=float).copy()
        self.angle_dims = tuple(int(a) for a in angle_dims)
        # identity normalization until training statistics are attached
        self.norm_mean = np.zeros(2 * dim)
        self.norm_scale = np.ones(2 * dim)
        self.out_scale = np.ones(dim)
        self.input_bounds = np.full(2 * dim, np.inf)  # goal-relative half-extents

        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        if zero_output:
            self.weights[-1][:] = 0.0
        self._latent_goal = None

    # -- parameter plumbing -------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def zero_grads(self):
        return [np.zeros_like(p) for p in self.parameters()]

    def apply_delta(self, deltas):
        n = self.n_layers
        for i in range(n):
            self.weights[i] += deltas[i]
            self.biases[i] += deltas[n + i]
        self._latent_goal = None

    def invalidate_caches(self):
        self._latent_goal = None

    # -- input handling -----------------------------------------------------

    def _relative(self, x, goal):
        d = np.asarray(x, dtype=float) - (self.goal if goal is None else np.asarray(goal, dtype=float))
        if self.angle_dims:
            d = d.copy() if d is not x else d
            d[..., list(self.angle_dims)] = wrap_angle(d[..., list(self.angle_dims)])
        return d

    def _net_input(self, x, xdot, goal=None):
        """Goal-relative, clamped, normalized input.

        Returns (z0, clipped row mask, elementwise pass-through mask); the
        pass mask is False exactly where the clamp froze an input entry.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(xdot, dtype=float))
        raw = np.concatenate([self._relative(x, goal), v], axis=1)
        lim = 1.5 * self.input_bounds
        passed = np.abs(raw) <= lim
        clipped = ~np.all(passed, axis=1)
        raw = np.clip(raw, -lim, lim)
        return (raw - self.norm_mean) / self.norm_scale, clipped, passed

    def input_jacobian_scale(self) -> np.ndarray:
        """d(z0)/d(raw input) is diagonal with these entries (clamp ignored)."""
        return 1.0 / self.norm_scale

    # -- forward / backward core --------------------------------------------

    def state_cache(self, x, xdot, goal=None) -> ForwardCache:
        """Full forward pass from a raw state batch, keeping all activations."""
        z0, clipped, passed = self._net_input(x, xdot, goal)
        return self.forward_cache(z0, clipped, passed)

    def forward_cache(self, z0: np.ndarray, clipped=None, pass_mask=None) -> ForwardCache:
        pre, post = [], []
        h = z0
        for i in range(self.n_layers):
            a = h @ self.weights[i].T + self.biases[i]
            pre.append(a)
            h = np.tanh(a) if i < self.n_layers - 1 else a
            post.append(h)
        if clipped is None:
            clipped = np.zeros(z0.shape[0], dtype=bool)
        return ForwardCache(z0, pre, post, clipped, pass_mask)

    def latent_of(self, cache: ForwardCache) -> np.ndarray:
        return cache.post[self.split_index - 1]

    def accel_of(self, cache: ForwardCache) -> np.ndarray:
        return cache.out * self.out_scale

    def input_cotangent(self, cache: ForwardCache, d_z0: np.ndarray):
        """Map a cotangent on z0 back to the raw (x, xdot) inputs."""
        d_raw = d_z0 / self.norm_scale
        if cache.pass_mask is not None:
            d_raw = d_raw * cache.pass_mask
        return d_raw[:, : self.dim], d_raw[:, self.dim:]

    def backward(self, cache: ForwardCache, d_out=None, d_latent=None, grads=None):
        """Reverse pass; accumulates into `grads` (weights then biases) if given.

        d_out is the cotangent on the linear output, d_latent an extra
        cotangent injected at the split activation. Returns the cotangent on
        the normalized input z0.
        """
        if grads is None:
            grads = self.zero_grads()
        B = cache.z0.shape[0]
        n = self.n_layers
        delta = np.zeros((B, self.layer_sizes[-1])) if d_out is None else np.asarray(d_out)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                delta = delta * (1.0 - cache.post[i] ** 2)  # tanh'
            inp = cache.post[i - 1] if i > 0 else cache.z0
            grads[i] += delta.T @ inp
            grads[n + i] += delta.sum(axis=0)
            delta = delta @ self.weights[i]
            if d_latent is not None and i == self.split_index:
                delta = delta + np.asarray(d_latent)
        return grads, delta

    # -- public policy surface ----------------------------------------------

    def forward(self, x, xdot, goal=None):
        """Task-space acceleration at (x, xdot); goal overrides the trained goal."""
        a, _ = self.forward_diag(x, xdot, goal)
        return a

    def forward_diag(self, x, xdot, goal=None):
        """Like forward, plus a flag marking inputs clamped to the trusted range."""
        x = np.asarray(x, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xdot))):
            raise ValueError("policy input must be finite")
        single = x.ndim == 1
        z0, clipped, _ = self._net_input(x, xdot, goal)
        cache = self.forward_cache(z0, clipped)
        a = cache.out * self.out_scale
        if single:
            return a[0], bool(clipped[0])
        return a, clipped

    def encode(self, x, xdot, goal=None):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        z0, _, _ = self._net_input(x, xdot, goal)
        h = z0
        for i in range(self.split_index):
            h = np.tanh(h @ self.weights[i].T + self.biases[i])
        return h[0] if single else h

    def decode(self, y):
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        h = np.atleast_2d(y)
        for i in range(self.split_index, self.n_layers):
            a = h @ self.weights[i].T + self.biases[i]
            h = np.tanh(a) if i < self.n_layers - 1 else a
        out = h * self.out_scale
        return out[0] if single else out

    @property
    def latent_goal(self):
        """Encoding of the goal at rest; cached, reset on any weight change."""
        if self._latent_goal is None:
            self._latent_goal = self.encode(self.goal, np.zeros(self.dim))
        return self._latent_goal

    def latent_potential(self, x, goal=None):
        """psi(x) = |rho(x_g, 0) - rho(x, 0)|^2, nonnegative, zero at the goal."""
        y = self.encode(np.asarray(x, dtype=float), np.zeros_like(x, dtype=float), goal)
        d = y - self.latent_goal
        return float(d @ d) if d.ndim == 1 else np.einsum("bi,bi->b", d, d)

    def latent_potential_gradient(self, x, goal=None):
        """Exact reverse-mode d psi / dx through the encoder."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        z0, _, passed = self._net_input(X, np.zeros_like(X), goal)
        cache = self.forward_cache(z0, pass_mask=passed)
        y = cache.post[self.split_index - 1]
        d_latent = 2.0 * (y - self.latent_goal)
        # encoder-only reverse pass
        delta = d_latent
        for i in range(self.split_index - 1, -1, -1):
            delta = delta * (1.0 - cache.post[i] ** 2)
            delta = delta @ self.weights[i]
        gx, _ = self.input_cotangent(cache, delta)
        return gx[0] if single else gx

    # -- serialization --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": WEIGHT_FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "split_index": self.split_index,
            "activation": self.activation,
            "goal": self.goal.tolist(),
            "angle_dims": list(self.angle_dims),
            "norm": {
                "mean": self.norm_mean.tolist(),
                "scale": self.norm_scale.tolist(),
                "out_scale": self.out_scale.tolist(),
                "input_bounds": self.input_bounds.tolist(),
            },
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolicyNetwork":
        if data.get("version") != WEIGHT_FORMAT_VERSION:
            raise ValueError(f"unsupported weight format version {data.get('version')!r}")
        if data.get("activation") != "tanh":
            raise ValueError(f"unsupported activation {data.get('activation')!r}")
        sizes = data["layer_sizes"]
        dim = sizes[-1]
        net = cls(dim, hidden=tuple(sizes[1:-1]), split_index=data["split_index"],
                  goal=data["goal"], angle_dims=tuple(data.get("angle_dims", ())))
        norm = data["norm"]
        net.norm_mean = np.array(norm["mean"], dtype=float)
        net.norm_scale = np.array(norm["scale"], dtype=float)
        net.out_scale = np.array(norm["out_scale"], dtype=float)
        net.input_bounds = np.array(norm["input_bounds"], dtype=float)
        weights = [np.array(w, dtype=float) for w in data["weights"]]
        biases = [np.array(b, dtype=float) for b in data["biases"]]
        if [w.shape for w in weights] != [w.shape for w in net.weights]:
            raise ValueError("weight shapes do not match layer_sizes")
        if [b.shape for b in biases] != [b.shape for b in net.biases]:
            raise ValueError("bias shapes do not match layer_sizes")
        net.weights = weights
        net.biases = biases
        net.invalidate_caches()
        return net


def save_weights(net: PolicyNetwork, path):
    with open(path, "w") as f:
        json.dump(net.to_json(), f)


def load_weights(path) -> PolicyNetwork:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt weight file {path}: {exc}") from exc
    return PolicyNetwork.from_json(data)
