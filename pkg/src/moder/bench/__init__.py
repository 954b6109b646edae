"""Synthetic worlds, task streams, the training/evaluation pipeline and metrics."""

from moder.bench.ablate import AblationRow, AblationTable, Axis, ablate
from moder.bench.metrics import MetricsReport, ci_transfer, faa, matrix_from_csv, matrix_to_csv, mtil_metrics
from moder.bench.pipeline import Experiment, PipelineResult, build_experiment, run_pipeline
from moder.bench.world import (
    SyntheticWorld,
    TaskData,
    TaskStream,
    WorldSpec,
    class_il_stream,
    generate_world,
    mtil_stream,
    sample_split,
)

__all__ = [
    "AblationRow", "AblationTable", "Axis", "ablate",
    "MetricsReport", "ci_transfer", "faa", "matrix_from_csv", "matrix_to_csv", "mtil_metrics",
    "Experiment", "PipelineResult", "build_experiment", "run_pipeline",
    "SyntheticWorld", "TaskData", "TaskStream", "WorldSpec", "class_il_stream", "generate_world",
    "mtil_stream", "sample_split",
]
