"""Test-time adaptation with residual buffer adapters on a frozen backbone."""

from .autodiff import Graph, NonFiniteError
from .backend import BACKEND
from .buffers import BufferBank, BufferSpec, attach_buffers, detach_buffers
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import AdaptConfig, AdaptEngine, AdamOptimizer
from .model import BackboneConfig, build_backbone, pretrain_source
from .norm import NormMode

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptEngine", "AdamOptimizer", "BACKEND", "BackboneConfig",
    "BufferBank", "BufferSpec", "Graph", "NonFiniteError", "NormMode",
    "attach_buffers", "build_backbone", "detach_buffers", "load_checkpoint",
    "pretrain_source", "save_checkpoint",
]
