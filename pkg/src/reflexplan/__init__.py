"""Trajectory planning by conditional diffusion with an inference-time
reflection loop: low-confidence denoising steps are re-noised with a
physics-projected correction and denoised again before the chain moves on.
"""

from .confidence import ConfidenceConstants, ConfidenceReport, evaluate
from .denoiser import DenoiserParams, TrainConfig, as_predictor, train
from .diffusion import NoiseSchedule, make_schedule
from .reflection import ReflectionConfig, reflect_once, reflection_loop
from .sampling import SamplerConfig, SampleResult, sample
from .scenario import SceneContext, assemble_conditions, generate_scenario
from .trajectory import Trajectory, coupling_violations, kinematics

__version__ = "0.1.0"

__all__ = [
    "ConfidenceConstants",
    "ConfidenceReport",
    "DenoiserParams",
    "NoiseSchedule",
    "ReflectionConfig",
    "SampleResult",
    "SamplerConfig",
    "SceneContext",
    "TrainConfig",
    "Trajectory",
    "__version__",
    "as_predictor",
    "assemble_conditions",
    "coupling_violations",
    "evaluate",
    "generate_scenario",
    "kinematics",
    "make_schedule",
    "reflect_once",
    "reflection_loop",
    "sample",
    "train",
]
