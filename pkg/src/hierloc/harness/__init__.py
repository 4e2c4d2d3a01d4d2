"""Synthetic scenes, benchmark orchestration and stage timing."""

from .bench import BenchmarkReport, Dataset, Scan, load_dataset, run_benchmark, synthetic_dataset
from .scenes import SceneConfig, make_pair, random_pose, synth_scene
from .timing import StageTiming, time_stage

__all__ = ["BenchmarkReport", "Dataset", "Scan", "SceneConfig", "StageTiming", "load_dataset",
           "make_pair", "random_pose", "run_benchmark", "synth_scene", "synthetic_dataset", "time_stage"]
