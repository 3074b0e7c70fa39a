"""Prompt-guided, condition-aware RGB-IR fusion for drone object detection."""

__version__ = "0.1.0"
