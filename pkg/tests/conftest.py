"""Shared fixtures: trained policy networks, cached on disk across test runs.

The 2D network uses the strict training recipe (pure workspace hinge) that
reaches an exactly-zero evaluation hinge; the 3D arm network uses the robust
recipe (visited-state resampling plus latent floor and overspeed braking)
tuned for closed-loop reliability across the whole workspace.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from fabricarm.kinematics import default_arm
from fabricarm.policy import PolicyNetwork, TrainingConfig, synth_demos, train
from fabricarm.policy.network import load_weights, save_weights

CACHE = Path(__file__).parent / ".cache"

GOAL2D = np.zeros(2)
WS2D = np.array([[-1.6, 1.6], [-1.6, 1.6]])
GOAL3D = np.array([1.2, 0.9, 0.5])
WS3D = np.stack([GOAL3D - 1.8, GOAL3D + 1.8], axis=1)


def strict_2d_config() -> TrainingConfig:
    return TrainingConfig(
        dt=0.02, iterations=1500, horizon=30, batch_size=64, vel_fraction=0.2,
        contrast_weight=0.0, brake_weight=0.0, onpolicy_fraction=0.0,
        workspace=WS2D, seed=0, log_every=100,
    )


def robust_3d_config() -> TrainingConfig:
    return TrainingConfig(
        dt=0.02, iterations=3000, horizon=45, batch_size=96, vel_fraction=0.2,
        contrast_weight=0.7, contrast_radius=2.0, brake_weight=0.2,
        onpolicy_fraction=0.5, workspace=WS3D, seed=0, log_every=100,
    )


def train_cached(name: str, dim, goal, demos_seed, config):
    CACHE.mkdir(exist_ok=True)
    weights = CACHE / f"{name}.json"
    histfile = CACHE / f"{name}_history.json"
    if weights.exists() and histfile.exists():
        with open(histfile) as f:
            return load_weights(weights), json.load(f)
    demos = synth_demos("sine-approach", 10, config.dt, dim=dim, goal=goal,
                        seed=demos_seed)
    net = PolicyNetwork(dim, goal=goal, seed=0)
    net, history = train(net, demos, config)
    save_weights(net, weights)
    with open(histfile, "w") as f:
        json.dump(history, f)
    return net, history


@pytest.fixture(scope="session")
def demos2d():
    return synth_demos("sine-approach", 10, 0.02, dim=2, goal=GOAL2D, seed=1)


@pytest.fixture(scope="session")
def policy2d():
    net, _ = train_cached("policy2d", 2, GOAL2D, 1, strict_2d_config())
    return net


@pytest.fixture(scope="session")
def policy2d_history():
    _, history = train_cached("policy2d", 2, GOAL2D, 1, strict_2d_config())
    return history


@pytest.fixture(scope="session")
def arm():
    return default_arm(3)


@pytest.fixture(scope="session")
def demos3d():
    return synth_demos("sine-approach", 10, 0.02, dim=3, goal=GOAL3D, seed=2)


@pytest.fixture(scope="session")
def policy3d():
    net, _ = train_cached("policy3d", 3, GOAL3D, 2, robust_3d_config())
    return net
