"""Torque-aware manipulation toolkit: arm statics, contact estimation, a latched-insertion
benchmark and a chunked flow-matching policy with torque integration ablations."""
from .arm import ArmModel, JointSpec, default_arm, forward_kinematics, geometric_jacobian, gravity_torque
from .contact import ContactDetector, JointState, detect_contact, estimate_wrench, torque_residual
from .simenv import TaskSpec, generate_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "ArmModel", "JointSpec", "default_arm", "forward_kinematics", "geometric_jacobian", "gravity_torque",
    "ContactDetector", "JointState", "detect_contact", "estimate_wrench", "torque_residual",
    "TaskSpec", "generate_dataset", "load_dataset", "save_dataset",
]
