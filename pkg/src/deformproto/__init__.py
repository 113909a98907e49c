"""Deformable prototypical parts on a hypersphere, with hand-derived gradients."""

from .config import RunConfig
from .deform import PartGrid, layer_forward, similarity_map, similarity_nondeformable
from .hypersphere import normalize_locations, norm_preserving_interpolate, sample
from .model import Model, evaluate, forward, init_model, run_training

__version__ = "0.1.0"
