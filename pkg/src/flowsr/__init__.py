"""Conditional rectified-flow super-resolution with one-step trajectory distillation.

Float64 torch throughout.  The pipeline is: synthetic data (:mod:`flowsr.data`),
a noise-augmented conditional flow teacher (:mod:`flowsr.flow`), PF-ODE solvers
(:mod:`flowsr.solvers`), one-step distillation (:mod:`flowsr.distill`) and the
fidelity/realism sweep over the dial t (:mod:`flowsr.evaluation`).
"""

__version__ = "0.1.0"

from .degradation import DegradationSpec, build_lr_condition, downsample, lift, transpose_upsample
from .distill import DistillConfig, distill_train, student_intermediate, student_one_step
from .evaluation import SweepResult, emit_report, read_report, tradeoff_sweep
from .flow import FlowConfig, GaussianTask, SRTask, train_teacher
from .metrics import perceptual_proxy, psnr
from .model import Arch, VelocityModel, init_velocity_model, velocity_forward
from .solvers import SolverSpec, solve, straightness

__all__ = [
    "Arch", "DegradationSpec", "DistillConfig", "FlowConfig", "GaussianTask", "SRTask", "SolverSpec",
    "SweepResult", "VelocityModel", "build_lr_condition", "distill_train", "downsample", "emit_report",
    "init_velocity_model", "lift", "perceptual_proxy", "psnr", "read_report", "solve", "straightness",
    "student_intermediate", "student_one_step", "tradeoff_sweep", "train_teacher", "transpose_upsample",
    "velocity_forward",
]
