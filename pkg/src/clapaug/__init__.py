"""Contrastive audio-text dual encoders trained with caption rewrites and scored with pooled prompts."""

__version__ = "0.1.0"
