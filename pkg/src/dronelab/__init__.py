"""Desk-scale drone racing: tracks, planning, dynamics, sensing and race rules."""

from .core_types import Gate, Pose, RigidState, Track, load_track, save_track
from .race_orchestrator import Race, RaceConfig, RacerDescriptor, evaluate_log, parse_log
from .tracks import DEMO_TRACKS

__version__ = "0.1.0"

__all__ = ["DEMO_TRACKS", "Gate", "Pose", "Race", "RaceConfig", "RacerDescriptor", "RigidState", "Track",
           "evaluate_log", "load_track", "parse_log", "save_track"]
