"""Checkpoints, experiment configuration, the staged pipeline and the CLI."""

from .checkpoint import decode, encode, load_checkpoint, save_checkpoint

__all__ = ["decode", "encode", "load_checkpoint", "save_checkpoint"]
