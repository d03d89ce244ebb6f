"""
Small deterministic fixtures for unit tests.
"""
import typing

import numpy as np

from semloc.encoder import Encoder, ModelConfig, init_params
from semloc.providers import BaseEmbeddingProvider
from semloc.scene_graph import OFFICE_TAXONOMY, DatasetSplit, Place, SceneGraph, \
    SceneObject, SemanticClass, SyntheticConfig, build_dataset, generate_synthetic
from semloc.training import TrainConfig, train

__all__ = [
    'MockEmbeddingProvider',
    'TINY_MODEL',
    'TINY_SCENE',
    'chain_scene',
    'random_scene',
    'tiny_dataset',
    'tiny_encoder',
    'tiny_trained_encoder',
    'toy_scene',
]

TINY_MODEL = ModelConfig(hidden_dim=8, mpnn_layers=1, heads=2, use_gat=True,
    embedding_dim=4, hops=1)

TINY_SCENE = SyntheticConfig(rooms_x=2, rooms_y=2, room_size=3, jitter=0.05,
    n_objects=18, visibility_range=1.5)


class MockEmbeddingProvider(BaseEmbeddingProvider):
    """
    An embedding provider that "computes" values by looking them up in a
    dict.

    Keys missing from the dict produce the empty result, which lets tests
    simulate a backend that skips some keys.
    """

    def __init__(self, data: typing.Mapping[typing.Hashable, typing.Any]) -> None:
        super(MockEmbeddingProvider, self).__init__()

        self._data = data

    def fetch_from_backend(self, load_keys):
        return (
            (lk, self._data[lk])
            for lk in load_keys
            if lk in self._data
        )


def chain_scene(
        n_places: int = 5,
        labels: typing.Sequence[typing.Optional[int]] = (5, None, 10, 5, None),
        taxonomy: typing.Sequence[SemanticClass] = OFFICE_TAXONOMY,
) -> SceneGraph:
    """
    A corridor of places ``0 .. n_places - 1`` one metre apart.  Place ``i``
    sees one object of class ``labels[i]`` (none where the label is
    ``None``); object ids start at 100.
    """
    places = tuple(Place(i, float(i), 0.0) for i in range(n_places))
    objects, visibility = [], []
    for i, label in enumerate(labels[:n_places]):
        if label is None:
            continue
        o = SceneObject(100 + i, float(i), 0.5, label)
        objects.append(o)
        visibility.append((i, o.id))

    return SceneGraph(
        taxonomy=tuple(taxonomy),
        places=places,
        objects=tuple(objects),
        edges_traversability=tuple((i, i + 1) for i in range(n_places - 1)),
        edges_visibility=tuple(visibility),
    )


def toy_scene() -> SceneGraph:
    """
    Two rooms of two places joined by one doorway edge; four objects, one of
    them (a plant) seen from both rooms.
    """
    return SceneGraph(
        taxonomy=OFFICE_TAXONOMY,
        places=(
            Place(0, 0.0, 0.0),
            Place(1, 1.0, 0.0),
            Place(2, 3.0, 0.0),
            Place(3, 4.0, 0.0),
        ),
        objects=(
            SceneObject(10, 0.5, 1.0, 5),
            SceneObject(11, 1.0, 1.0, 10),
            SceneObject(12, 2.0, 0.5, 11),
            SceneObject(13, 4.0, 1.0, 18),
        ),
        edges_traversability=((0, 1), (1, 2), (2, 3)),
        edges_visibility=((0, 10), (1, 10), (1, 11), (1, 12), (2, 12), (3, 13)),
    )


def random_scene(
        seed: int,
        n_places: int = 12,
        n_objects: int = 10,
        visibility_range: float = 1.5,
        taxonomy: typing.Sequence[SemanticClass] = OFFICE_TAXONOMY,
) -> SceneGraph:
    """
    A random connected scene: places on a random spanning tree plus a few
    extra traversability edges, objects with uniform classes.
    """
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, 4.0, size=(n_places, 2))
    places = tuple(Place(i, float(x), float(y)) for i, (x, y) in enumerate(xy))

    edges = {(int(rng.integers(i)), i) for i in range(1, n_places)}
    for _ in range(n_places // 3):
        a, b = sorted(int(v) for v in rng.choice(n_places, size=2, replace=False))
        edges.add((a, b))

    labels = [c.label for c in taxonomy]
    objects = tuple(
        SceneObject(n_places + k, float(x), float(y), int(labels[rng.integers(len(labels))]))
        for k, (x, y) in enumerate(rng.uniform(0.0, 4.0, size=(n_objects, 2)))
    )
    visibility = sorted(
        (p.id, o.id)
        for o in objects
        for p in places
        if np.hypot(p.x - o.x, p.y - o.y) <= visibility_range
    )

    return SceneGraph(
        taxonomy=tuple(taxonomy),
        places=places,
        objects=objects,
        edges_traversability=tuple(sorted(edges)),
        edges_visibility=tuple(visibility),
    )


def tiny_dataset(seed: int = 0) -> typing.Tuple[SceneGraph, DatasetSplit]:
    """
    A 36-place synthetic office with the standard traversal split.
    """
    scene = generate_synthetic(TINY_SCENE, seed)
    return scene, build_dataset(scene, seed, TINY_SCENE.visibility_range, radius=1.5)


def tiny_encoder(
        seed: int = 0,
        config: ModelConfig = TINY_MODEL,
        taxonomy: typing.Sequence[SemanticClass] = OFFICE_TAXONOMY,
) -> Encoder:
    """
    An untrained encoder with small random weights.
    """
    return Encoder(init_params(seed, config, len(taxonomy)), taxonomy)


def tiny_trained_encoder(
        scene: SceneGraph,
        split: DatasetSplit,
        seed: int = 0,
        epochs: int = 2,
        **options: typing.Any,
) -> Encoder:
    """
    An encoder trained for a couple of epochs on ``split`` with the tiny
    model configuration.
    """
    cfg = TrainConfig(epochs=epochs, batch_size=8, seed=seed, hops=TINY_MODEL.hops,
        negatives=4, learning_rate=1e-2, **options)
    params, _ = train(scene, split, cfg, TINY_MODEL)
    return Encoder(params, scene.taxonomy)
