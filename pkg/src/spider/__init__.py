"""Patch curation, human verification, and context-aware classification
for whole-slide pathology images."""

__version__ = "0.1.0"

from .slide import PatchRef, SlideRaster  # noqa: F401
