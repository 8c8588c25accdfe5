"""Emotion-controllable, audio-driven talking-head avatars at desk scale."""

__version__ = "0.1.0"
