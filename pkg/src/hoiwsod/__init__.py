"""Weakly supervised object detection for rare classes from human-object interaction cues."""

__version__ = "0.1.0"
