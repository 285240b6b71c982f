"""Config-driven construction, static verification and desk-scale execution of HRNet models."""

from .analysis import ComplexityReport, compare_reports, count_flops, count_params, infer_shapes
from .builder import build
from .config import ArchConfig, ConfigError, load_config, preset
from .graph import Graph, LayerNode, execute, init_params
from .tensor import GradTape, ShapeError, Tensor, backward, load_tensor, recording, save_tensor

__all__ = [
    "ArchConfig", "ComplexityReport", "ConfigError", "Graph", "GradTape", "LayerNode", "ShapeError",
    "Tensor", "backward", "build", "compare_reports", "count_flops", "count_params", "execute",
    "infer_shapes", "init_params", "load_config", "load_tensor", "preset", "recording", "save_tensor",
]
