""" DAVIS simulator: scripted scenes, frames, DVS events and labels. """

from .scene import (SceneError, SceneObject, SceneScript, CameraModel, LabelBox, GroundTruthLabel,
                    CLASSES, render_frame, capture_frame, emit_labels)
from .emulator import DvsEmulator, generate_events
from .dataset import MissingInputError, Sequence, write_dataset, load_index, load_sequence, load_split
from .suites import SCENARIOS, SUITES, simulate_suite
