"""Real-time infant behavioural-monitoring pipeline and edge performance harness."""

from .classify import (TASKS, BackendProfile, PlattParams, Prediction, TaskSpec, classify,
                       make_backend, platt_apply, platt_fit)
from .detect import BoundingBox, RoiTensor, detect_faces, extract_roi, motion_gate, to_rgb
from .frames import (Frame, Resolution, ScenarioScript, load_scenario, pace, read_image_sequence,
                     synth_next_frame)
from .pipeline import AnnotatedFrame, Pipeline, PipelineConfig, RunReport, run
from .temporal import AlertRule, FilterConfig, StableState, alert_check, counters_snapshot, filter_update

__version__ = "0.1.0"

__all__ = [
    "TASKS", "AlertRule", "AnnotatedFrame", "BackendProfile", "BoundingBox", "FilterConfig", "Frame",
    "Pipeline", "PipelineConfig", "PlattParams", "Prediction", "Resolution", "RoiTensor", "RunReport",
    "ScenarioScript", "StableState", "TaskSpec", "alert_check", "classify", "counters_snapshot",
    "detect_faces", "extract_roi", "filter_update", "load_scenario", "make_backend", "motion_gate", "pace",
    "platt_apply", "platt_fit", "read_image_sequence", "run", "synth_next_frame", "to_rgb",
]
