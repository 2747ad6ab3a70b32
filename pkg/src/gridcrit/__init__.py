"""Grounded critique generation over grid-indexed screenshots."""

from __future__ import annotations

from gridcrit.backends import HashEmbedder, ScriptedBackend, ScriptedEntry
from gridcrit.fewshot import ExemplarStore
from gridcrit.geometry import DEFAULT_SPACE, GridBox, GridSpace, PixelBox
from gridcrit.imaging import RasterImage
from gridcrit.orchestrator import PipelineConfig, PipelineReport, run, run_ground_only
from gridcrit.profiles import design_critique_profile, open_vocab_detection_profile

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SPACE",
    "ExemplarStore",
    "GridBox",
    "GridSpace",
    "HashEmbedder",
    "PipelineConfig",
    "PipelineReport",
    "PixelBox",
    "RasterImage",
    "ScriptedBackend",
    "ScriptedEntry",
    "design_critique_profile",
    "open_vocab_detection_profile",
    "run",
    "run_ground_only",
    "__version__",
]
