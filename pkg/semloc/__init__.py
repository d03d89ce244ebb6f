"""
Semantic localisation on 3D scene graphs: a graph encoder trained for place
retrieval, and the tools to explain what it attends to.
"""
from semloc.encoder import Encoder, ModelConfig, load_checkpoint, save_checkpoint
from semloc.exceptions import SemlocError, with_context
from semloc.scene_graph import EgoGraph, SceneGraph, ego_graph, generate_synthetic, \
    load_scene, save_scene
from semloc.training import TrainConfig, train

__all__ = [
    'EgoGraph',
    'Encoder',
    'ModelConfig',
    'SceneGraph',
    'SemlocError',
    'TrainConfig',
    'ego_graph',
    'generate_synthetic',
    'load_checkpoint',
    'load_scene',
    'save_checkpoint',
    'save_scene',
    'train',
    'with_context',
]
