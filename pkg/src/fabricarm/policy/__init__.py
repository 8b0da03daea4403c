from .network import PolicyNetwork, load_weights, save_weights
from .demos import DemonstrationSet, DemoTrajectory, synth_demos, load_demo_manifest, save_demo_manifest
from .train import TrainingConfig, imitation_loss, rollout, stable_loss, train

__all__ = [
    "PolicyNetwork",
    "load_weights",
    "save_weights",
    "DemonstrationSet",
    "DemoTrajectory",
    "synth_demos",
    "load_demo_manifest",
    "save_demo_manifest",
    "TrainingConfig",
    "imitation_loss",
    "rollout",
    "stable_loss",
    "train",
]
