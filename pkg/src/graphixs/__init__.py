"""Probabilistic 4D splatting engine with a differentiable CPU rasterizer."""
from .core import (Component, ComponentSet, CameraModel, DatasetManifest, FrameObservation,
                   KernelKind, validate_component)

__version__ = "0.1.0"
