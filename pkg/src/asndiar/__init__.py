"""Spatial diarization and guided source separation for ad-hoc acoustic
sensor networks with unsynchronised devices."""
from .activity import ActivityMatrix
from .pipeline import PipelineConfig, run_pipeline
from .scene import (MultichannelRecording, SceneConfig, random_meeting,
                    simulate_scene)

__version__ = '0.1.0'
