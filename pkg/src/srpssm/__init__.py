"""Weighted Shiryayev-Roberts-Pollak change detection for state space models."""

from .detectors import (
    BatchEngine,
    DetectorConfig,
    PsiDistribution,
    StoppingReport,
    StreamingDetector,
    detect_stream,
    estimate_psi,
    run_detector,
)
from .kernels import BACKEND
from .lr_engine import LRProcess, PriorGrid
from .results import MCEstimate
from .ssm_core import ChangeScenario, ModelSpec, simulate_trajectory

__all__ = [
    "BACKEND",
    "BatchEngine",
    "ChangeScenario",
    "DetectorConfig",
    "LRProcess",
    "MCEstimate",
    "ModelSpec",
    "PriorGrid",
    "PsiDistribution",
    "StoppingReport",
    "StreamingDetector",
    "detect_stream",
    "estimate_psi",
    "run_detector",
    "simulate_trajectory",
]
