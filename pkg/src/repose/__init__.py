"""Pose-controllable person edits: dataset curation, multimodal conditioning,
inpainting diffusion, and evaluation, all runnable at desk scale."""

__version__ = "0.1.0"
