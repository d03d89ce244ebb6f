"""
Graph encoder: class one-hot projection, sum-aggregation message passing with
per-edge-type weights, a multi-head GATv2 block and a linear map to unit
embeddings read at the ego graph's centre place.
"""
import dataclasses
import json
import logging
import os
import typing

import numpy as np

from semloc import autodiff as ad
from semloc.exceptions import CheckpointError, SceneValidationError, \
    with_context
from semloc.scene_graph import EgoGraph, SemanticClass

__all__ = [
    'AttentionRecord',
    'CHECKPOINT_FORMAT',
    'CHECKPOINT_VERSION',
    'Embedding',
    'Encoder',
    'EncoderParams',
    'GraphBatch',
    'ModelConfig',
    'bow_embed',
    'embed',
    'forward',
    'init_params',
    'load_checkpoint',
    'node_features',
    'save_checkpoint',
]

log = logging.getLogger(__name__)

Embedding = np.ndarray

CHECKPOINT_FORMAT = 'semloc-checkpoint'
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    mpnn_layers: int = 2
    heads: int = 3
    use_gat: bool = True
    embedding_dim: int = 32
    hops: int = 2
    """
    Ego-graph radius in traversability hops.
    """

    @property
    def readout_dim(self) -> int:
        return self.heads * self.hidden_dim if self.use_gat else self.hidden_dim


@dataclasses.dataclass
class EncoderParams:
    """
    Named weight arrays plus the hyperparameters that fix their shapes.

    Batch-norm running statistics live here too; they are buffers (updated in
    train mode, never differentiated).
    """
    config: ModelConfig
    num_classes: int
    tensors: typing.Dict[str, np.ndarray]

    BUFFER_SUFFIXES = ('.running_mean', '.running_var')

    def trainable_names(self) -> typing.List[str]:
        return [n for n in self.tensors if not n.endswith(self.BUFFER_SUFFIXES)]

    def bind(self, tape: typing.Optional[ad.Tape] = None) \
            -> typing.Dict[str, ad.Tensor]:
        """
        Wraps trainable arrays as tensors, watched on ``tape`` if given.
        """
        return {
            name: tape.watch(self.tensors[name], name) if tape is not None
            else ad.Tensor(self.tensors[name])
            for name in self.trainable_names()
        }

    def copy(self) -> 'EncoderParams':
        return EncoderParams(
            config=self.config,
            num_classes=self.num_classes,
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )


@dataclasses.dataclass(frozen=True)
class AttentionRecord:
    """
    GATv2 coefficients of one ego graph: ``coefficients[h, e]`` is head
    ``h``'s weight on directed edge ``sources[e] -> targets[e]`` (node ids),
    normalised over each target's in-neighbourhood.  A node with no
    in-neighbours carries a single self-loop instead.
    """
    sources: typing.Tuple[int, ...]
    targets: typing.Tuple[int, ...]
    coefficients: np.ndarray

    @property
    def heads(self) -> int:
        return int(self.coefficients.shape[0])


def _shapes(config: ModelConfig, num_classes: int) \
        -> typing.List[typing.Tuple[str, typing.Tuple[int, ...]]]:
    h = config.hidden_dim
    shapes = [
        ('input.weight', (num_classes + 1, h)),
        ('input.bias', (h,)),
    ]
    for layer in range(config.mpnn_layers):
        prefix = f'mpnn.{layer}'
        shapes += [
            (f'{prefix}.self', (h, h)),
            (f'{prefix}.traversability', (h, h)),
            (f'{prefix}.visibility', (h, h)),
            (f'{prefix}.bias', (h,)),
            (f'{prefix}.bn.scale', (h,)),
            (f'{prefix}.bn.shift', (h,)),
            (f'{prefix}.bn.running_mean', (h,)),
            (f'{prefix}.bn.running_var', (h,)),
        ]
    if config.use_gat:
        for head in range(config.heads):
            shapes += [
                (f'gat.{head}.source', (h, h)),
                (f'gat.{head}.target', (h, h)),
                (f'gat.{head}.attention', (h, 1)),
            ]
        shapes.append(('gat.bias', (config.heads * h,)))
    shapes += [
        ('output.weight', (config.readout_dim, config.embedding_dim)),
        ('output.bias', (config.embedding_dim,)),
    ]
    return shapes


def init_params(
        seed: int,
        config: ModelConfig = ModelConfig(),
        num_classes: int = 6,
) -> EncoderParams:
    """
    Glorot-uniform weight matrices, zero biases, unit batch-norm scale.
    """
    rng = np.random.default_rng(seed)
    tensors: typing.Dict[str, np.ndarray] = {}

    for name, shape in _shapes(config, num_classes):
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(('.bn.scale', '.running_var')):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)

    return EncoderParams(config=config, num_classes=num_classes, tensors=tensors)


def node_features(g: EgoGraph, taxonomy: typing.Sequence[SemanticClass]) \
        -> ad.Tensor:
    """
    One-hot rows of width ``len(taxonomy) + 1``: the class column for objects,
    the trailing place slot for places.  No coordinates are used.
    """
    index = g.feature_index(taxonomy)
    features = np.zeros((len(index), len(taxonomy) + 1))
    features[np.arange(len(index)), index] = 1.0
    return ad.Tensor(features)


class GraphBatch:
    """
    Disjoint union of ego graphs, flattened for one vectorised forward pass.
    """

    def __init__(self,
            graphs: typing.Sequence[EgoGraph],
            taxonomy: typing.Sequence[SemanticClass],
    ) -> None:
        if not graphs:
            raise ValueError('Cannot batch zero graphs.')

        self.graphs = list(graphs)
        self.num_graphs = len(self.graphs)

        blocks, segment, centres, node_ids = [], [], [], []
        trav_src, trav_dst, vis_src, vis_dst = [], [], [], []
        offset = 0
        for k, g in enumerate(self.graphs):
            if not g.nodes:
                raise with_context(
                    SceneValidationError('Cannot embed an empty graph.'),
                    context={'centre': g.centre},
                )
            blocks.append(node_features(g, taxonomy).value)
            segment.extend([k] * len(g.nodes))
            centres.append(offset + g.centre_index)
            node_ids.extend(g.nodes)

            local = g.index
            for a, b in g.edges_traversability:
                trav_src += [offset + local[a], offset + local[b]]
                trav_dst += [offset + local[b], offset + local[a]]
            for p, o in g.edges_visibility:
                vis_src += [offset + local[o], offset + local[p]]
                vis_dst += [offset + local[p], offset + local[o]]
            offset += len(g.nodes)

        self.num_nodes = offset
        self.features = np.concatenate(blocks, axis=0)
        self.segment = np.asarray(segment, dtype=np.int64)
        self.centres = np.asarray(centres, dtype=np.int64)
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.trav_src = np.asarray(trav_src, dtype=np.int64)
        self.trav_dst = np.asarray(trav_dst, dtype=np.int64)
        self.vis_src = np.asarray(vis_src, dtype=np.int64)
        self.vis_dst = np.asarray(vis_dst, dtype=np.int64)
        edge_src = np.concatenate([self.trav_src, self.vis_src])
        edge_dst = np.concatenate([self.trav_dst, self.vis_dst])

        # Nodes without in-edges attend to themselves only.
        lonely = np.setdiff1d(np.arange(offset), edge_dst)
        self.edge_src = np.concatenate([edge_src, lonely])
        self.edge_dst = np.concatenate([edge_dst, lonely])

    def attention_records(self, coefficients: np.ndarray) \
            -> typing.List[AttentionRecord]:
        """
        Splits batch-level coefficients (heads x edges) into per-graph
        records keyed by node id.
        """
        owner = self.segment[self.edge_dst]
        records = []
        for k in range(self.num_graphs):
            mask = owner == k
            records.append(AttentionRecord(
                sources=tuple(self.node_ids[self.edge_src[mask]].tolist()),
                targets=tuple(self.node_ids[self.edge_dst[mask]].tolist()),
                coefficients=coefficients[:, mask],
            ))
        return records


def forward(
        batch: GraphBatch,
        weights: typing.Mapping[str, ad.Tensor],
        params: EncoderParams,
        training: bool = False,
        features: typing.Optional[ad.Tensor] = None,
) -> typing.Tuple[ad.Tensor, np.ndarray]:
    """
    Runs the encoder over a batch.

    :param weights:
        Trainable tensors from :py:meth:`EncoderParams.bind`.

    :param features:
        Overrides the batch's one-hot features (gradient-based explainers pass
        a watched tensor here).

    :return:
        ``(embeddings, attention)``: unit embeddings ``(graphs, dim)`` and the
        GATv2 coefficients ``(heads, edges)`` over the batch's directed edges
        (empty when the GAT block is disabled).
    """
    config = params.config
    n = batch.num_nodes
    x = features if features is not None else ad.Tensor(batch.features)

    h = ad.elu(x @ weights['input.weight'] + weights['input.bias'])

    for layer in range(config.mpnn_layers):
        prefix = f'mpnn.{layer}'
        message = h @ weights[f'{prefix}.self'] + weights[f'{prefix}.bias']
        for kind, src, dst in (
                ('traversability', batch.trav_src, batch.trav_dst),
                ('visibility', batch.vis_src, batch.vis_dst),
        ):
            if src.size:
                projected = h @ weights[f'{prefix}.{kind}']
                message = message + ad.sum_segments(
                    ad.gather_rows(projected, src), dst, n,
                )

        h = ad.batch_norm(
            ad.tanh(message),
            weights[f'{prefix}.bn.scale'],
            weights[f'{prefix}.bn.shift'],
            params.tensors[f'{prefix}.bn.running_mean'],
            params.tensors[f'{prefix}.bn.running_var'],
            training=training,
            segments=batch.segment,
            num_segments=batch.num_graphs,
        )

    attention = np.zeros((config.heads if config.use_gat else 0, batch.edge_src.size))
    if config.use_gat:
        src, dst = batch.edge_src, batch.edge_dst
        outputs = []
        for head in range(config.heads):
            source = h @ weights[f'gat.{head}.source']
            target = h @ weights[f'gat.{head}.target']
            gathered = ad.gather_rows(source, src)
            scores = ad.leaky_relu(gathered + ad.gather_rows(target, dst)) \
                @ weights[f'gat.{head}.attention']
            alpha = ad.softmax_over_segments(scores, dst, n)
            attention[head] = alpha.value[:, 0]
            outputs.append(ad.sum_segments(gathered * alpha, dst, n))
        h = ad.concat(outputs, axis=1) + weights['gat.bias']

    z = ad.gather_rows(h, batch.centres) @ weights['output.weight'] \
        + weights['output.bias']
    return ad.l2_normalize(z), attention


def embed(
        g: EgoGraph,
        params: EncoderParams,
        taxonomy: typing.Sequence[SemanticClass],
        mode: str = 'infer',
) -> typing.Tuple[Embedding, AttentionRecord]:
    """
    Embeds a single ego graph.

    :param mode:
        ``'train'`` normalises with the graph's own statistics and updates
        the running statistics; ``'infer'`` uses the running statistics.
    """
    if mode not in ('train', 'infer'):
        raise with_context(ValueError('Unknown encoder mode.'), context={'mode': mode})

    batch = GraphBatch([g], taxonomy)
    z, attention = forward(batch, params.bind(), params, training=mode == 'train')
    record, = batch.attention_records(attention)
    return z.value[0].copy(), record


def bow_embed(g: EgoGraph, taxonomy: typing.Sequence[SemanticClass]) -> Embedding:
    """
    L2-normalised histogram of the object classes in ``g`` (zero vector when
    there are none).
    """
    column = {c.label: i for i, c in enumerate(taxonomy)}
    counts = np.zeros(len(taxonomy))
    for label in g.labels:
        if label in column:
            counts[column[label]] += 1.0
    norm = np.linalg.norm(counts)
    return counts / norm if norm > 0 else counts


class Encoder:
    """
    Trained parameters bound to a taxonomy, in inference mode.
    """

    def __init__(self,
            params: EncoderParams,
            taxonomy: typing.Sequence[SemanticClass],
            chunk_size: int = 256,
    ) -> None:
        self.params = params
        self.taxonomy = tuple(taxonomy)
        self.chunk_size = chunk_size
        self.weights = params.bind()

    @property
    def hops(self) -> int:
        return self.params.config.hops

    def embed(self, g: EgoGraph) -> typing.Tuple[Embedding, AttentionRecord]:
        return embed(g, self.params, self.taxonomy)

    def embed_many(self, graphs: typing.Sequence[EgoGraph]) -> np.ndarray:
        """
        Inference embeddings, one row per graph.
        """
        if not graphs:
            return np.zeros((0, self.params.config.embedding_dim))

        rows = []
        for start in range(0, len(graphs), self.chunk_size):
            batch = GraphBatch(graphs[start:start + self.chunk_size], self.taxonomy)
            z, _ = forward(batch, self.weights, self.params)
            rows.append(z.value)
        return np.concatenate(rows, axis=0)

    def similarity(self, p: EgoGraph, q: EgoGraph) -> float:
        z = self.embed_many([p, q])
        return float(z[0] @ z[1])


def save_checkpoint(
        params: EncoderParams,
        taxonomy: typing.Sequence[SemanticClass],
        path: typing.Union[str, os.PathLike],
) -> None:
    document = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'model': dataclasses.asdict(params.config),
        'num_classes': params.num_classes,
        'taxonomy': [dataclasses.asdict(c) for c in taxonomy],
        'tensors': {
            name: {'shape': list(array.shape), 'values': array.ravel().tolist()}
            for name, array in params.tensors.items()
        },
    }
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(document, f)
        f.write('\n')


def load_checkpoint(path: typing.Union[str, os.PathLike]) \
        -> typing.Tuple[EncoderParams, typing.Tuple[SemanticClass, ...]]:
    """
    :raise:
        - :py:class:`FileNotFoundError` if ``path`` does not exist.
        - :py:class:`CheckpointError` if the container, version, tensor names
          or shapes do not match the stored hyperparameters.
    """
    with open(path, encoding='utf-8') as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise with_context(
                CheckpointError('Checkpoint is not valid JSON.'),
                context={'path': str(path), 'line': e.lineno},
            ) from e

    if document.get('format') != CHECKPOINT_FORMAT \
            or document.get('version') != CHECKPOINT_VERSION:
        raise with_context(
            CheckpointError('Unsupported checkpoint format.'),

            context={
                'path': str(path),
                'format': document.get('format'),
                'version': document.get('version'),
            },
        )

    try:
        config = ModelConfig(**document['model'])
        num_classes = int(document['num_classes'])
        taxonomy = tuple(SemanticClass(**c) for c in document['taxonomy'])
        stored = document['tensors']
    except (KeyError, TypeError) as e:
        raise with_context(
            CheckpointError('Checkpoint is missing required fields.'),
            context={'path': str(path), 'error': str(e)},
        ) from e

    expected = _shapes(config, num_classes)
    if set(stored) != {name for name, _ in expected}:
        raise with_context(
            CheckpointError('Checkpoint tensors do not match the model.'),

            context={
                'path': str(path),
                'missing': sorted({n for n, _ in expected} - set(stored)),
                'unexpected': sorted(set(stored) - {n for n, _ in expected}),
            },
        )

    tensors = {}
    for name, shape in expected:
        entry = stored[name]
        values = np.asarray(entry['values'], dtype=np.float64)
        if tuple(entry['shape']) != shape or values.size != int(np.prod(shape)):
            raise with_context(
                CheckpointError('Checkpoint tensor has the wrong shape.'),
                context={'path': str(path), 'tensor': name, 'shape': entry['shape']},
            )
        tensors[name] = values.reshape(shape)

    return EncoderParams(config, num_classes, tensors), taxonomy
