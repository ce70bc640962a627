"""Adversarial-robustness laboratory for hard-parameter-sharing multi-task models."""
from .attacks import APGD, FGSM, PGD, WGD, AttackTrace, make_attack, project
from .estimator import MultiTaskNet
from .model import (MultiTaskModel, TaskSpec, TrainConfig, build_model, clean_error,
                    joint_loss, task_loss, train)
from .synth import SynthSpec, SynthTask, generate_dataset
from .tensor import ComputationGraph, Node, dual_norm, finite_diff_grad, forward_eval, grad_input

__version__ = "0.1.0"

__all__ = [
    "APGD", "FGSM", "PGD", "WGD", "AttackTrace", "make_attack", "project",
    "MultiTaskNet", "MultiTaskModel", "TaskSpec", "TrainConfig", "build_model",
    "clean_error", "joint_loss", "task_loss", "train",
    "SynthSpec", "SynthTask", "generate_dataset",
    "ComputationGraph", "Node", "dual_norm", "finite_diff_grad", "forward_eval", "grad_input",
]
