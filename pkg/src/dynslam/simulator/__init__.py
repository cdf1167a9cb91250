"""Synthetic rigid multi-body scenes with exact ground truth."""
from .presets import PRESETS, preset
from .scene import (Background, NoiseSpec, ObjectSpec, SceneScript, Simulation, Trajectory, generate,
                    simulate)
from .tools import delete_masks, ground_truth_map, perturb, perturb_map

__all__ = ["PRESETS", "preset", "Background", "NoiseSpec", "ObjectSpec", "SceneScript", "Simulation",
           "Trajectory", "generate", "simulate", "delete_masks", "ground_truth_map", "perturb", "perturb_map"]
