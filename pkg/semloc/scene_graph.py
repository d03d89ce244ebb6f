"""
Scene-graph data model: places, objects, traversability and visibility edges.

Also covers the dataset plumbing around it: file ingestion, synthetic
office-like scenes, class-mobility perturbation, splits with radius-based
positives, ego-graph extraction and class removal.
"""
import dataclasses
import json
import logging
import math
import os
import typing
from collections import deque
from functools import cached_property

import numpy as np

from semloc.exceptions import SceneValidationError, with_context

__all__ = [
    'DEFAULT_MOBILITY',
    'DatasetSplit',
    'EgoGraph',
    'MobilityProfile',
    'OFFICE_COUNTS',
    'OFFICE_TAXONOMY',
    'Place',
    'SceneGraph',
    'SceneObject',
    'SemanticClass',
    'SyntheticConfig',
    'build_dataset',
    'class_counts',
    'ego_graph',
    'ego_graphs',
    'generate_synthetic',
    'load_scene',
    'make_query_variants',
    'perturb',
    'relink_visibility',
    'remove_class',
    'save_scene',
    'scene_from_dict',
    'scene_to_dict',
    'split_dataset',
]

log = logging.getLogger(__name__)

Edge = typing.Tuple[int, int]


@dataclasses.dataclass(frozen=True)
class SemanticClass:
    label: int
    name: str
    code: str


OFFICE_TAXONOMY: typing.Tuple[SemanticClass, ...] = (
    SemanticClass(5, 'chair', 'CH'),
    SemanticClass(8, 'couch', 'CO'),
    SemanticClass(10, 'computer', 'CP'),
    SemanticClass(11, 'plant', 'PL'),
    SemanticClass(12, 'painting', 'PA'),
    SemanticClass(18, 'trash can', 'TC'),
)

OFFICE_COUNTS: typing.Mapping[str, int] = {
    'CH': 28,
    'CO': 11,
    'CP': 35,
    'PL': 13,
    'PA': 8,
    'TC': 15,
}
"""
Object instances per class in the reference office scene.
"""


class Place(typing.NamedTuple):
    id: int
    x: float
    y: float


class SceneObject(typing.NamedTuple):
    id: int
    x: float
    y: float
    label: int


@dataclasses.dataclass(frozen=True)
class SceneGraph:
    """
    Places and objects linked by traversability (place-place) and visibility
    (place-object) edges.

    Instances are validated on construction and never mutated; derived
    lookups are cached.
    """
    taxonomy: typing.Tuple[SemanticClass, ...]
    places: typing.Tuple[Place, ...]
    objects: typing.Tuple[SceneObject, ...]
    edges_traversability: typing.Tuple[Edge, ...]
    edges_visibility: typing.Tuple[Edge, ...]

    def __post_init__(self) -> None:
        self._validate()

    @cached_property
    def place_index(self) -> typing.Dict[int, Place]:
        return {p.id: p for p in self.places}

    @cached_property
    def object_index(self) -> typing.Dict[int, SceneObject]:
        return {o.id: o for o in self.objects}

    @cached_property
    def class_by_label(self) -> typing.Dict[int, SemanticClass]:
        return {c.label: c for c in self.taxonomy}

    @cached_property
    def neighbours(self) -> typing.Dict[int, typing.Tuple[int, ...]]:
        """
        Traversability adjacency, sorted by id.
        """
        adjacency: typing.Dict[int, typing.List[int]] = {p.id: [] for p in self.places}
        for a, b in self.edges_traversability:
            adjacency[a].append(b)
            adjacency[b].append(a)
        return {k: tuple(sorted(v)) for k, v in adjacency.items()}

    @cached_property
    def visible_objects(self) -> typing.Dict[int, typing.Tuple[int, ...]]:
        visible: typing.Dict[int, typing.List[int]] = {p.id: [] for p in self.places}
        for place_id, object_id in self.edges_visibility:
            visible[place_id].append(object_id)
        return {k: tuple(sorted(v)) for k, v in visible.items()}

    def code_of(self, label: int) -> str:
        return self.class_by_label[label].code

    def _validate(self) -> None:
        if not self.taxonomy:
            raise SceneValidationError('Taxonomy must contain at least one class.')

        for field, values in (
                ('label', [c.label for c in self.taxonomy]),
                ('code', [c.code for c in self.taxonomy]),
        ):
            if len(set(values)) != len(values):
                raise with_context(
                    SceneValidationError(f'Duplicate taxonomy {field}.'),
                    context={'field': field, 'values': values},
                )

        labels = {c.label for c in self.taxonomy}
        seen: typing.Set[int] = set()
        for node in (*self.places, *self.objects):
            if node.id in seen:
                raise with_context(
                    SceneValidationError('Duplicate node id.'),
                    context={'id': node.id},
                )
            seen.add(node.id)

            if not (math.isfinite(node.x) and math.isfinite(node.y)):
                raise with_context(
                    SceneValidationError('Node coordinates must be finite.'),
                    context={'id': node.id},
                )

        for o in self.objects:
            if o.label not in labels:
                raise with_context(
                    SceneValidationError('Object label is not in the taxonomy.'),
                    context={'id': o.id, 'label': o.label},
                )

        place_ids = {p.id for p in self.places}
        object_ids = {o.id for o in self.objects}

        undirected: typing.Set[typing.FrozenSet[int]] = set()
        for a, b in self.edges_traversability:
            for endpoint in (a, b):
                if endpoint not in place_ids:
                    raise with_context(
                        SceneValidationError(
                            'Traversability edge references a missing place.',
                        ),
                        context={'edge': [a, b], 'id': endpoint},
                    )
            if a == b:
                raise with_context(
                    SceneValidationError('Self-loop traversability edge.'),
                    context={'edge': [a, b], 'id': a},
                )
            key = frozenset((a, b))
            if key in undirected:
                raise with_context(
                    SceneValidationError('Duplicate traversability edge.'),
                    context={'edge': [a, b]},
                )
            undirected.add(key)

        visibility: typing.Set[Edge] = set()
        for place_id, object_id in self.edges_visibility:
            if place_id not in place_ids:
                raise with_context(
                    SceneValidationError('Visibility edge references a missing place.'),
                    context={'edge': [place_id, object_id], 'id': place_id},
                )
            if object_id not in object_ids:
                raise with_context(
                    SceneValidationError('Visibility edge references a missing object.'),
                    context={'edge': [place_id, object_id], 'id': object_id},
                )
            if (place_id, object_id) in visibility:
                raise with_context(
                    SceneValidationError('Duplicate visibility edge.'),
                    context={'edge': [place_id, object_id]},
                )
            visibility.add((place_id, object_id))


@dataclasses.dataclass(frozen=True)
class EgoGraph:
    """
    The local subgraph around one place; the unit the encoder embeds.

    Node order is significant only for batching; the encoder output does not
    depend on it.
    """
    centre: int
    nodes: typing.Tuple[int, ...]
    labels: typing.Tuple[typing.Optional[int], ...]
    """
    Object class label per node, ``None`` for place nodes.
    """
    edges_traversability: typing.Tuple[Edge, ...]
    edges_visibility: typing.Tuple[Edge, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.labels):
            raise with_context(
                SceneValidationError('Ego graph needs one label slot per node.'),
                context={'centre': self.centre},
            )
        if self.centre not in self.nodes or self.label_of(self.centre) is not None:
            raise with_context(
                SceneValidationError('Ego graph centre must be a contained place.'),
                context={'centre': self.centre},
            )
        contained = set(self.nodes)
        for edge in (*self.edges_traversability, *self.edges_visibility):
            if not contained.issuperset(edge):
                raise with_context(
                    SceneValidationError('Ego graph edge leaves the subgraph.'),
                    context={'centre': self.centre, 'edge': list(edge)},
                )

    @cached_property
    def index(self) -> typing.Dict[int, int]:
        return {node: i for i, node in enumerate(self.nodes)}

    @property
    def centre_index(self) -> int:
        return self.index[self.centre]

    @property
    def place_ids(self) -> typing.Tuple[int, ...]:
        return tuple(n for n, lab in zip(self.nodes, self.labels) if lab is None)

    @property
    def object_ids(self) -> typing.Tuple[int, ...]:
        return tuple(n for n, lab in zip(self.nodes, self.labels) if lab is not None)

    def label_of(self, node: int) -> typing.Optional[int]:
        return self.labels[self.nodes.index(node)]

    def feature_index(self, taxonomy: typing.Sequence[SemanticClass]) \
            -> typing.Tuple[int, ...]:
        """
        Input feature column per node: the class position in ``taxonomy`` for
        objects, ``len(taxonomy)`` (the place slot) for places.

        :raise:
            - :py:class:`SceneValidationError` if an object's class is not in
              ``taxonomy``.
        """
        column = {c.label: i for i, c in enumerate(taxonomy)}
        index = []
        for node, label in zip(self.nodes, self.labels):
            if label is None:
                index.append(len(taxonomy))
            elif label in column:
                index.append(column[label])
            else:
                raise with_context(
                    SceneValidationError('Object class is not in the taxonomy.'),
                    context={'id': node, 'label': label},
                )
        return tuple(index)

    def restrict(self, object_ids: typing.Iterable[int]) -> 'EgoGraph':
        """
        Keeps the listed objects (and every place); other objects and their
        visibility edges are removed.
        """
        keep = set(object_ids)
        pairs = [
            (n, lab) for n, lab in zip(self.nodes, self.labels)
            if lab is None or n in keep
        ]
        return EgoGraph(
            centre=self.centre,
            nodes=tuple(n for n, _ in pairs),
            labels=tuple(lab for _, lab in pairs),
            edges_traversability=self.edges_traversability,
            edges_visibility=tuple(e for e in self.edges_visibility if e[1] in keep),
        )


@dataclasses.dataclass(frozen=True)
class MobilityProfile:
    """
    Per-class displacement scale in metres, keyed by class code.
    """
    sigma: typing.Mapping[str, float]

    def __post_init__(self) -> None:
        for code, value in self.sigma.items():
            if not value >= 0.0:
                raise with_context(
                    SceneValidationError('Mobility scale must be non-negative.'),
                    context={'code': code, 'sigma': value},
                )


DEFAULT_MOBILITY = MobilityProfile({
    'TC': 0.5,
    'CH': 0.5,
    'PL': 0.3,
    'CP': 0.2,
    'CO': 0.05,
    'PA': 0.05,
})


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """
    Layout of a synthetic office: a grid of square rooms joined by doorways,
    each room holding a dense lattice of places.
    """
    rooms_x: int = 4
    rooms_y: int = 4
    room_size: int = 9
    """
    Places per room side.
    """
    place_spacing: float = 1.0
    jitter: float = 0.1
    class_profile: typing.Mapping[str, float] = dataclasses.field(
        default_factory=lambda: dict(OFFICE_COUNTS),
    )
    """
    Relative class frequencies; used as absolute counts when ``n_objects`` is
    ``None``.
    """
    n_objects: typing.Optional[int] = None
    visibility_range: float = 3.0
    taxonomy: typing.Tuple[SemanticClass, ...] = OFFICE_TAXONOMY


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    """
    Train/validation/test partition of the map's places, the query variants
    and the radius-based positives.
    """
    train: typing.FrozenSet[int]
    val: typing.FrozenSet[int]
    test: typing.FrozenSet[int]
    query_variants: typing.Tuple[SceneGraph, ...]
    positives: typing.Mapping[int, typing.FrozenSet[int]]
    """
    Query place id -> map place ids within the matching radius.
    """
    radius: float
    eval_variants: typing.Tuple[SceneGraph, ...] = ()
    """
    Held-out query variants for evaluation; the training variants are used
    when empty.
    """

    def places(self, name: str) -> typing.List[int]:
        return sorted(getattr(self, name))

    def evaluation_queries(self) -> typing.Tuple[SceneGraph, ...]:
        return self.eval_variants or self.query_variants


def scene_to_dict(scene: SceneGraph) -> typing.Dict[str, typing.Any]:
    return {
        'taxonomy': [
            {'label': c.label, 'name': c.name, 'code': c.code}
            for c in scene.taxonomy
        ],
        'places': [{'id': p.id, 'x': p.x, 'y': p.y} for p in scene.places],
        'objects': [
            {'id': o.id, 'x': o.x, 'y': o.y, 'label': o.label}
            for o in scene.objects
        ],
        'edges_traversability': [list(e) for e in scene.edges_traversability],
        'edges_visibility': [list(e) for e in scene.edges_visibility],
    }


_SCHEMA: typing.Dict[str, typing.Dict[str, typing.Tuple[type, ...]]] = {
    'taxonomy': {'label': (int,), 'name': (str,), 'code': (str,)},
    'places': {'id': (int,), 'x': (int, float), 'y': (int, float)},
    'objects': {'id': (int,), 'x': (int, float), 'y': (int, float), 'label': (int,)},
}


def _records(data: typing.Mapping, key: str) -> typing.List[typing.Dict]:
    rows = data.get(key)
    if not isinstance(rows, list):
        raise with_context(
            SceneValidationError('Scene file field must be an array.'),
            context={'field': key},
        )

    fields = _SCHEMA[key]
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise with_context(
                SceneValidationError('Scene record must be an object.'),
                context={'field': f'{key}[{i}]'},
            )
        for name, types in fields.items():
            value = row.get(name)
            if not isinstance(value, types) or isinstance(value, bool):
                raise with_context(
                    SceneValidationError('Scene record field has the wrong type.'),
                    context={'field': f'{key}[{i}].{name}', 'value': value},
                )
    return rows


def _edges(data: typing.Mapping, key: str) -> typing.Tuple[Edge, ...]:
    rows = data.get(key)
    if not isinstance(rows, list):
        raise with_context(
            SceneValidationError('Scene file field must be an array.'),
            context={'field': key},
        )
    edges = []
    for i, row in enumerate(rows):
        if not (isinstance(row, list) and len(row) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) for v in row)):
            raise with_context(
                SceneValidationError('Edge must be a pair of integer ids.'),
                context={'field': f'{key}[{i}]', 'value': row},
            )
        edges.append((row[0], row[1]))
    return tuple(edges)


def scene_from_dict(data: typing.Mapping[str, typing.Any]) -> SceneGraph:
    if not isinstance(data, dict):
        raise SceneValidationError('Scene file must contain a JSON object.')

    return SceneGraph(
        taxonomy=tuple(
            SemanticClass(r['label'], r['name'], r['code'])
            for r in _records(data, 'taxonomy')
        ),
        places=tuple(
            Place(r['id'], float(r['x']), float(r['y']))
            for r in _records(data, 'places')
        ),
        objects=tuple(
            SceneObject(r['id'], float(r['x']), float(r['y']), r['label'])
            for r in _records(data, 'objects')
        ),
        edges_traversability=_edges(data, 'edges_traversability'),
        edges_visibility=_edges(data, 'edges_visibility'),
    )


def load_scene(path: typing.Union[str, os.PathLike]) -> SceneGraph:
    """
    Reads and validates a scene file.

    :raise:
        - :py:class:`SceneValidationError` on malformed JSON (context carries
          line and column), schema violations (context carries the field path)
          or graph invariant violations (context carries the offending id).
    """
    with open(path, encoding='utf-8') as f:
        text = f.read()

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise with_context(
            SceneValidationError(f'Scene file is not valid JSON: {e.msg}.'),
            context={'path': str(path), 'line': e.lineno, 'column': e.colno},
        ) from e

    try:
        return scene_from_dict(data)
    except SceneValidationError as e:
        raise with_context(e, context={'path': str(path)})


def save_scene(scene: SceneGraph, path: typing.Union[str, os.PathLike]) -> None:
    """
    Writes ``scene`` with stable key order; identical graphs give identical
    bytes.
    """
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(scene_to_dict(scene), f, indent=1)
        f.write('\n')


def _allocate_counts(
        profile: typing.Mapping[str, float],
        codes: typing.Sequence[str],
        n_objects: typing.Optional[int],
) -> typing.Dict[str, int]:
    weights = np.array([float(profile.get(code, 0.0)) for code in codes])

    if n_objects is None:
        counts = np.rint(weights).astype(int)
        if counts.sum() == 0:
            raise with_context(
                SceneValidationError('Class profile is all zero.'),
                context={'profile': dict(profile)},
            )
        return dict(zip(codes, counts.tolist()))

    if n_objects == 0:
        return dict.fromkeys(codes, 0)

    if weights.sum() <= 0.0:
        raise with_context(
            SceneValidationError('Class profile is all zero.'),
            context={'profile': dict(profile), 'nObjects': n_objects},
        )

    # Largest-remainder rounding keeps the total exact.
    quota = weights / weights.sum() * n_objects
    counts = np.floor(quota).astype(int)
    remainder = quota - counts
    for i in np.argsort(-remainder, kind='stable')[:n_objects - counts.sum()]:
        counts[i] += 1
    return dict(zip(codes, counts.tolist()))


def generate_synthetic(config: SyntheticConfig, seed: int) -> SceneGraph:
    """
    Builds a deterministic office-like scene.

    Places sit on a jittered lattice inside a grid of rooms, joined within a
    room by 4-neighbour traversability edges and across rooms by one doorway
    per shared wall, so all places form one component.  Objects are dropped
    uniformly into random rooms with classes drawn from the profile, and each
    object is linked to every place within the visibility range.

    :raise:
        - :py:class:`SceneValidationError` for non-positive extents, negative
          or all-zero profiles, or more objects than the rooms can hold.
    """
    side = config.room_size
    if config.rooms_x < 1 or config.rooms_y < 1 or side < 1 \
            or not config.place_spacing > 0.0:
        raise with_context(
            SceneValidationError('Scene extents must be positive.'),
            context={
                'roomsX': config.rooms_x,
                'roomsY': config.rooms_y,
                'roomSize': side,
                'placeSpacing': config.place_spacing,
            },
        )

    unknown = set(config.class_profile) - {c.code for c in config.taxonomy}
    if unknown:
        raise with_context(
            SceneValidationError('Class profile names unknown classes.'),
            context={'codes': sorted(unknown)},
        )

    if any(v < 0 for v in config.class_profile.values()):
        raise with_context(
            SceneValidationError('Class profile frequencies must be non-negative.'),
            context={'profile': dict(config.class_profile)},
        )

    codes = [c.code for c in config.taxonomy]
    counts = _allocate_counts(config.class_profile, codes, config.n_objects)

    n_rooms = config.rooms_x * config.rooms_y
    capacity = n_rooms * side * side
    total = sum(counts.values())
    if total > capacity:
        raise with_context(
            SceneValidationError('Scene extents are too small for the object count.'),
            context={'objects': total, 'capacity': capacity},
        )

    if not total:
        log.warning('Generating a scene without objects.')

    rng = np.random.default_rng(seed)
    spacing = config.place_spacing

    # Places: global lattice coordinates -> id.
    lattice: typing.Dict[typing.Tuple[int, int], int] = {}
    places: typing.List[Place] = []
    for ry in range(config.rooms_y):
        for rx in range(config.rooms_x):
            for j in range(side):
                for i in range(side):
                    gx, gy = rx * side + i, ry * side + j
                    jx, jy = rng.uniform(-config.jitter, config.jitter, size=2) \
                        if config.jitter > 0 else (0.0, 0.0)
                    lattice[(gx, gy)] = len(places)
                    places.append(Place(len(places), gx * spacing + float(jx),
                        gy * spacing + float(jy)))

    traversability: typing.List[Edge] = []
    for (gx, gy), a in lattice.items():
        for dx, dy in ((1, 0), (0, 1)):
            b = lattice.get((gx + dx, gy + dy))
            if b is None:
                continue
            same_room = (gx // side == (gx + dx) // side) \
                and (gy // side == (gy + dy) // side)
            doorway = (dx == 1 and gy % side == side // 2) \
                or (dy == 1 and gx % side == side // 2)
            if same_room or doorway:
                traversability.append((a, b))

    label_of = {c.code: c.label for c in config.taxonomy}
    labels = [label_of[code] for code in codes for _ in range(counts[code])]
    labels = [labels[k] for k in rng.permutation(len(labels))]

    objects: typing.List[SceneObject] = []
    for label in labels:
        room = int(rng.integers(n_rooms))
        rx, ry = room % config.rooms_x, room // config.rooms_x
        ox, oy = rng.uniform(0.0, side - 1, size=2)
        objects.append(SceneObject(
            len(places) + len(objects),
            (rx * side + float(ox)) * spacing,
            (ry * side + float(oy)) * spacing,
            label,
        ))

    scene = SceneGraph(
        taxonomy=tuple(config.taxonomy),
        places=tuple(places),
        objects=tuple(objects),
        edges_traversability=tuple(traversability),
        edges_visibility=(),
    )
    return relink_visibility(scene, config.visibility_range)


def relink_visibility(scene: SceneGraph, visibility_range: float) -> SceneGraph:
    """
    Recomputes visibility edges: each object is seen from every place within
    ``visibility_range`` metres (line of sight ignored).
    """
    if not scene.objects or not scene.places:
        return dataclasses.replace(scene, edges_visibility=())

    place_xy = np.array([(p.x, p.y) for p in scene.places])
    edges: typing.List[Edge] = []
    for o in scene.objects:
        distance = np.hypot(place_xy[:, 0] - o.x, place_xy[:, 1] - o.y)
        edges.extend(
            (scene.places[k].id, o.id)
            for k in np.flatnonzero(distance <= visibility_range)
        )
    edges.sort()
    return dataclasses.replace(scene, edges_visibility=tuple(edges))


def perturb(scene: SceneGraph, profile: MobilityProfile, seed: int) -> SceneGraph:
    """
    Displaces every object by an isotropic Gaussian offset with its class's
    mobility scale; places and edges are left untouched.

    :raise:
        - :py:class:`SceneValidationError` if the profile lacks a class that
          occurs in the scene.
    """
    missing = sorted({
        scene.code_of(o.label) for o in scene.objects
    } - set(profile.sigma))
    if missing:
        raise with_context(
            SceneValidationError('Mobility profile does not cover every class.'),
            context={'codes': missing},
        )

    rng = np.random.default_rng(seed)
    sigma = np.array([profile.sigma[scene.code_of(o.label)] for o in scene.objects])
    offsets = rng.standard_normal((len(scene.objects), 2)) * sigma[:, None]

    return dataclasses.replace(
        scene,
        objects=tuple(
            o._replace(x=o.x + float(dx), y=o.y + float(dy))
            for o, (dx, dy) in zip(scene.objects, offsets)
        ),
    )


def make_query_variants(
        scene: SceneGraph,
        profile: MobilityProfile,
        seeds: typing.Iterable[int],
        relink_range: typing.Optional[float] = None,
) -> typing.Tuple[SceneGraph, ...]:
    """
    One perturbed copy of ``scene`` per seed.

    :param relink_range:
        If set, visibility edges are recomputed from the displaced positions.
    """
    variants = []
    for seed in seeds:
        variant = perturb(scene, profile, seed)
        if relink_range is not None:
            variant = relink_visibility(variant, relink_range)
        variants.append(variant)
    return tuple(variants)


def split_dataset(
        scene: SceneGraph,
        query_variants: typing.Sequence[SceneGraph],
        ratios: typing.Tuple[float, float, float] = (0.7, 0.2, 0.1),
        radius: float = 4.0,
        seed: int = 0,
        eval_variants: typing.Sequence[SceneGraph] = (),
) -> DatasetSplit:
    """
    Shuffles the map's place ids and partitions them by ``ratios``; positives
    of each query place are all map places within ``radius`` metres of its
    ground-truth position (boundary inclusive).

    :raise:
        - :py:class:`ValueError` for a non-positive radius, malformed ratios,
          or query variants whose place layouts disagree.
    """
    if not radius > 0.0:
        raise with_context(
            ValueError('Matching radius must be positive.'),
            context={'radius': radius},
        )

    if len(ratios) != 3 or any(not r > 0.0 for r in ratios) \
            or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise with_context(
            ValueError('Split ratios must be three positive fractions summing to 1.'),
            context={'ratios': list(ratios)},
        )

    if not query_variants:
        raise ValueError('At least one query variant is required.')

    reference = query_variants[0].places
    for variant in (*query_variants[1:], *eval_variants):
        if variant.places != reference:
            raise with_context(
                ValueError('Query variants must share one place layout.'),
                context={'places': len(variant.places)},
            )

    ids = np.array(sorted(scene.place_index), dtype=np.int64)
    shuffled = np.random.default_rng(seed).permutation(ids).tolist()
    n = len(shuffled)
    n_train = min(int(round(ratios[0] * n)), n)
    n_val = min(int(round(ratios[1] * n)), n - n_train)

    map_ids = np.array([p.id for p in scene.places], dtype=np.int64)
    map_xy = np.array([(p.x, p.y) for p in scene.places]).reshape(-1, 2)
    positives: typing.Dict[int, typing.FrozenSet[int]] = {}
    for q in reference:
        distance = np.hypot(map_xy[:, 0] - q.x, map_xy[:, 1] - q.y)
        positives[q.id] = frozenset(map_ids[distance <= radius].tolist())

    return DatasetSplit(
        train=frozenset(shuffled[:n_train]),
        val=frozenset(shuffled[n_train:n_train + n_val]),
        test=frozenset(shuffled[n_train + n_val:]),
        query_variants=tuple(query_variants),
        positives=positives,
        radius=radius,
        eval_variants=tuple(eval_variants),
    )


TRAIN_VARIANT_OFFSETS = (1, 2)
EVAL_VARIANT_OFFSET = 101


def build_dataset(
        scene: SceneGraph,
        seed: int,
        visibility_range: float,
        radius: float = 4.0,
        profile: MobilityProfile = DEFAULT_MOBILITY,
) -> DatasetSplit:
    """
    The standard pipeline split: training traversals from seeds ``seed + 1``
    and ``seed + 2``, a held-out traversal from ``seed + 101``, and the place
    partition from ``seed``.
    """
    def variants(offsets):
        return make_query_variants(
            scene, profile, [seed + k for k in offsets], visibility_range,
        )

    return split_dataset(
        scene,
        variants(TRAIN_VARIANT_OFFSETS),
        radius=radius,
        seed=seed,
        eval_variants=variants((EVAL_VARIANT_OFFSET,)),
    )


def ego_graph(scene: SceneGraph, place: int, hops: int) -> EgoGraph:
    """
    Places within ``hops`` traversability hops of ``place``, every object
    visible from them, and the induced edges.

    :raise:
        - :py:class:`KeyError` for an unknown place id.
        - :py:class:`ValueError` for negative ``hops``.
    """
    if place not in scene.place_index:
        raise with_context(
            KeyError(place),
            context={'placeId': place},
        )
    if hops < 0:
        raise with_context(ValueError('hops must be >= 0.'), context={'hops': hops})

    depth = {place: 0}
    frontier = deque([place])
    while frontier:
        current = frontier.popleft()
        if depth[current] == hops:
            continue
        for nb in scene.neighbours[current]:
            if nb not in depth:
                depth[nb] = depth[current] + 1
                frontier.append(nb)

    places = sorted(depth)
    objects = sorted({o for p in places for o in scene.visible_objects[p]})
    contained = set(places)

    return EgoGraph(
        centre=place,
        nodes=tuple(places) + tuple(objects),
        labels=(None,) * len(places)
            + tuple(scene.object_index[o].label for o in objects),
        edges_traversability=tuple(
            (p, nb) for p in places for nb in scene.neighbours[p]
            if p < nb and nb in contained
        ),
        edges_visibility=tuple(
            (p, o) for p in places for o in scene.visible_objects[p]
        ),
    )


def ego_graphs(
        scene: SceneGraph,
        places: typing.Iterable[int],
        hops: int,
) -> typing.List[EgoGraph]:
    return [ego_graph(scene, p, hops) for p in places]


def remove_class(
        scene: SceneGraph,
        c: typing.Union[SemanticClass, int],
) -> SceneGraph:
    """
    Removes every object of class ``c`` and its visibility edges.

    Removing a class with no instances returns ``scene`` unchanged.

    :raise:
        - :py:class:`SceneValidationError` if ``c`` is not in the taxonomy.
    """
    label = c.label if isinstance(c, SemanticClass) else c
    if label not in scene.class_by_label:
        raise with_context(
            SceneValidationError('Class is not in the taxonomy.'),
            context={'label': label},
        )

    removed = {o.id for o in scene.objects if o.label == label}
    if not removed:
        return scene

    return dataclasses.replace(
        scene,
        objects=tuple(o for o in scene.objects if o.id not in removed),
        edges_visibility=tuple(
            e for e in scene.edges_visibility if e[1] not in removed
        ),
    )


def class_counts(scene: SceneGraph) -> typing.Dict[int, int]:
    """
    Instance count per taxonomy label (zero for absent classes).
    """
    counts = dict.fromkeys((c.label for c in scene.taxonomy), 0)
    for o in scene.objects:
        counts[o.label] += 1
    return counts
