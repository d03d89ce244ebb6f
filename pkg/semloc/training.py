"""
Contrastive training of the graph encoder and the model-design ablation grid.
"""
import csv
import dataclasses
import logging
import os
import typing

import numpy as np

from semloc import autodiff as ad
from semloc.encoder import Encoder, EncoderParams, GraphBatch, ModelConfig, \
    forward, init_params
from semloc.exceptions import NumericFault, TrainingDiverged, with_context
from semloc.metrics import EvalReport, SimilarityMatrix, bow_similarity_matrix, \
    evaluate, similarity_from_embeddings
from semloc.providers import EgoGraphEmbeddingProvider, ParameterisedDefaultDict
from semloc.scene_graph import DatasetSplit, SceneGraph, ego_graph, ego_graphs

__all__ = [
    'ABLATION_COLUMNS',
    'AblationRow',
    'AblationVariant',
    'Adam',
    'EpochRecord',
    'LOSSES',
    'PairBatch',
    'TRAIN_COLUMNS',
    'TrainConfig',
    'TrainReport',
    'architecture_grid',
    'bow_place_similarity',
    'loss_contrastive',
    'loss_infonce',
    'loss_triplet_batchhard',
    'place_similarity',
    'run_ablation_grid',
    'sample_batch',
    'train',
    'write_ablation_table',
    'write_train_report',
]

log = logging.getLogger(__name__)

LOSSES = ('contrastive', 'triplet', 'infonce')

DEFAULT_MARGINS = {'contrastive': 1.0, 'triplet': 0.2, 'infonce': 1.0}
DEFAULT_NEGATIVES = {'contrastive': 1, 'triplet': 31, 'infonce': 31}

TRAIN_COLUMNS = (
    'variant', 'seed', 'epoch', 'loss', 'pr_auc', 'f1',
    'recall@1', 'recall@5', 'recall@10',
)

ABLATION_COLUMNS = (
    'variant', 'mpnn_layers', 'hidden_dim', 'heads', 'gat', 'runs',
    'pr_auc_mean', 'pr_auc_std', 'recall@1_mean', 'recall@1_std',
)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    loss: str = 'infonce'
    margin: typing.Optional[float] = None
    """
    Hinge margin; defaults to 1.0 for contrastive and 0.2 for triplet.
    """
    temperature: float = 0.7
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    hops: int = 2
    negatives: typing.Optional[int] = None
    """
    Negatives sampled per query; defaults to 1 for contrastive and 31
    otherwise.
    """
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        problems = {}
        if self.loss not in LOSSES:
            problems['loss'] = self.loss
        if self.margin is not None and not self.margin > 0.0:
            problems['margin'] = self.margin
        if not self.temperature > 0.0:
            problems['temperature'] = self.temperature
        if not self.learning_rate > 0.0:
            problems['learningRate'] = self.learning_rate
        if self.epochs < 1:
            problems['epochs'] = self.epochs
        if self.batch_size < 1:
            problems['batchSize'] = self.batch_size
        if self.hops < 0:
            problems['hops'] = self.hops
        if self.negatives is not None and self.negatives < 1:
            problems['negatives'] = self.negatives

        if problems:
            raise with_context(
                ValueError('Invalid training configuration.'),
                context=problems,
            )

    @property
    def resolved_margin(self) -> float:
        return DEFAULT_MARGINS[self.loss] if self.margin is None else self.margin

    @property
    def resolved_negatives(self) -> int:
        return DEFAULT_NEGATIVES[self.loss] if self.negatives is None \
            else self.negatives


def loss_contrastive(
        z_a: typing.Any,
        z_b: typing.Any,
        y: typing.Any,
        margin: float = 1.0,
) -> ad.Tensor:
    """
    ``y * d**2 + (1 - y) * max(0, margin - d)**2`` with ``d`` the Euclidean
    distance, averaged over rows.
    """
    diff = ad.as_tensor(z_a) - ad.as_tensor(z_b)
    d2 = ad.dot(diff, diff)
    hinge = ad.relu(margin - ad.sqrt(d2))

    y = np.asarray(y, dtype=np.float64).reshape(d2.shape)
    return ad.mean(d2 * y + ad.square(hinge) * (1.0 - y))


def loss_triplet_batchhard(
        anchors: typing.Any,
        candidates: typing.Any,
        positive_mask: np.ndarray,
        negative_mask: typing.Optional[np.ndarray] = None,
        margin: float = 0.2,
) -> ad.Tensor:
    """
    Batch-hard triplet loss: each anchor is paired with its farthest positive
    and nearest negative among ``candidates``.

    :param positive_mask:
        ``(anchors, candidates)`` boolean matrix of positive pairs.

    :param negative_mask:
        Negative pairs; everything that is not positive by default.

    Anchors lacking a positive or a negative are excluded (and counted in a
    warning).  If none remain the loss is a constant zero.
    """
    anchors, candidates = ad.as_tensor(anchors), ad.as_tensor(candidates)
    positive_mask = np.asarray(positive_mask, dtype=bool)
    negative_mask = ~positive_mask if negative_mask is None \
        else np.asarray(negative_mask, dtype=bool)

    a, c = anchors.value, candidates.value
    squared = (a * a).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] \
        - 2.0 * a @ c.T
    distance = np.sqrt(np.maximum(squared, 0.0))

    valid = positive_mask.any(axis=1) & negative_mask.any(axis=1)
    excluded = int((~valid).sum())
    if excluded:
        log.warning('Excluded %d triplet anchor(s) without a positive or negative.',
            excluded)
    if not valid.any():
        return ad.Tensor(0.0)

    rows = np.flatnonzero(valid)
    hardest_positive = np.argmax(np.where(positive_mask, distance, -np.inf), axis=1)
    hardest_negative = np.argmin(np.where(negative_mask, distance, np.inf), axis=1)

    picked = ad.gather_rows(anchors, rows)
    to_positive = picked - ad.gather_rows(candidates, hardest_positive[rows])
    to_negative = picked - ad.gather_rows(candidates, hardest_negative[rows])

    d_p = ad.sqrt(ad.dot(to_positive, to_positive))
    d_n = ad.sqrt(ad.dot(to_negative, to_negative))
    return ad.mean(ad.relu(d_p - d_n + margin))


def _as_rows(z: typing.Any) -> ad.Tensor:
    z = ad.as_tensor(z)
    return ad.reshape(z, (1, z.shape[0])) if z.value.ndim == 1 else z


def loss_infonce(
        z_q: typing.Any,
        z_pos: typing.Any,
        z_negs: typing.Any,
        temperature: float = 0.7,
) -> ad.Tensor:
    """
    Mean InfoNCE over queries, on cosine similarities.

    :param z_q:
        Query embeddings ``(batch, dim)`` (or a single vector).

    :param z_pos:
        One positive per query, same shape as ``z_q``.

    :param z_negs:
        ``(batch * k, dim)``: the ``k`` negatives of query 0, then of query 1,
        and so on.
    """
    if not temperature > 0.0:
        raise with_context(
            ValueError('Temperature must be positive.'),
            context={'temperature': temperature},
        )

    q = ad.l2_normalize(_as_rows(z_q))
    p = ad.l2_normalize(_as_rows(z_pos))
    n = ad.l2_normalize(_as_rows(z_negs))

    batch = q.shape[0]
    k = n.shape[0] // batch if batch else 0
    if k < 1 or n.shape[0] != batch * k or p.shape != q.shape:
        raise with_context(
            ValueError('InfoNCE needs one positive and k >= 1 negatives per query.'),
            context={'queries': list(q.shape), 'positives': list(p.shape),
                'negatives': list(n.shape)},
        )

    owner = np.repeat(np.arange(batch), k)
    logits = ad.concat([
        ad.dot(q, p),
        ad.dot(ad.gather_rows(q, owner), n),
    ]) / temperature
    segments = np.concatenate([np.arange(batch), owner])

    prob = ad.softmax_over_segments(logits, segments, batch)
    return -ad.mean(ad.ln(ad.gather_rows(prob, np.arange(batch))))


class Adam:
    """
    Adam over the trainable arrays of :py:class:`EncoderParams`, updated in
    place.
    """

    def __init__(self,
            params: EncoderParams,
            learning_rate: float = 1e-3,
            beta1: float = 0.9,
            beta2: float = 0.999,
            epsilon: float = 1e-8,
    ) -> None:
        super(Adam, self).__init__()

        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

        self.steps = 0
        self._m = {n: np.zeros_like(params.tensors[n]) for n in params.trainable_names()}
        self._v = {n: np.zeros_like(params.tensors[n]) for n in params.trainable_names()}

    def step(self, grads: typing.Mapping[str, np.ndarray]) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps

        for name, m in self._m.items():
            g = grads[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g

            self.params.tensors[name] -= self.learning_rate * (m / correction1) \
                / (np.sqrt(v / correction2) + self.epsilon)


class PairBatch(typing.NamedTuple):
    variants: typing.Tuple[int, ...]
    """
    Index into ``split.query_variants`` per query.
    """
    queries: typing.Tuple[int, ...]
    positives: typing.Tuple[int, ...]
    negatives: typing.Tuple[typing.Tuple[int, ...], ...]


def sample_batch(
        queries: typing.Sequence[int],
        split: DatasetSplit,
        map_ids: typing.Sequence[int],
        rng: np.random.Generator,
        negatives: int,
) -> PairBatch:
    """
    Per query: a uniformly chosen training variant, one uniform positive and
    ``negatives`` distinct non-positives (fewer if some query has fewer
    available, so every query gets the same count).
    """
    pools = []
    for q in queries:
        positive = sorted(split.positives.get(q, ()))
        if not positive:
            raise with_context(
                ValueError('Query place has no positive within the radius.'),
                context={'placeId': q, 'radius': split.radius},
            )
        excluded = split.positives[q]
        pools.append((positive, [m for m in map_ids if m not in excluded]))

    k = min([negatives, *(len(neg) for _, neg in pools)])

    variants, pos_ids, neg_ids = [], [], []
    for positive, negative in pools:
        variants.append(int(rng.integers(len(split.query_variants))))
        pos_ids.append(int(positive[rng.integers(len(positive))]))
        neg_ids.append(tuple(
            int(m) for m in rng.choice(negative, size=k, replace=False)
        ) if k else ())

    return PairBatch(
        variants=tuple(variants),
        queries=tuple(int(q) for q in queries),
        positives=tuple(pos_ids),
        negatives=tuple(neg_ids),
    )


def _batch_loss(
        batch: PairBatch,
        graphs: typing.Mapping,
        params: EncoderParams,
        weights: typing.Mapping[str, ad.Tensor],
        split: DatasetSplit,
        cfg: TrainConfig,
        taxonomy,
) -> ad.Tensor:
    query_graphs = [graphs[v, q] for v, q in zip(batch.variants, batch.queries)]
    map_ids = sorted({*batch.positives, *(m for negs in batch.negatives for m in negs)})
    n = len(query_graphs)
    row = {m: n + i for i, m in enumerate(map_ids)}

    z, _ = forward(
        GraphBatch(query_graphs + [graphs[None, m] for m in map_ids], taxonomy),
        weights, params, training=True,
    )
    z_q = ad.gather_rows(z, np.arange(n))
    z_p = ad.gather_rows(z, [row[m] for m in batch.positives])

    if cfg.loss == 'infonce':
        z_n = ad.gather_rows(z, [row[m] for negs in batch.negatives for m in negs])
        return loss_infonce(z_q, z_p, z_n, cfg.temperature)

    if cfg.loss == 'contrastive':
        z_n = ad.gather_rows(z, [row[negs[0]] for negs in batch.negatives])
        return loss_contrastive(
            ad.concat([z_q, z_q]),
            ad.concat([z_p, z_n]),
            [1.0] * n + [0.0] * n,
            cfg.resolved_margin,
        )

    pool = ad.gather_rows(z, np.arange(n, n + len(map_ids)))
    mask = np.array([[m in split.positives[q] for m in map_ids] for q in batch.queries])
    return loss_triplet_batchhard(z_q, pool, mask, margin=cfg.resolved_margin)


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val: EvalReport


@dataclasses.dataclass
class TrainReport:
    seed: int
    epochs: typing.List[EpochRecord]
    best_epoch: int
    checkpoint: typing.Optional[str] = None
    """
    Where the best parameters were saved, if they were.
    """

    @property
    def losses(self) -> typing.List[float]:
        return [e.loss for e in self.epochs]


def place_similarity(
        encoder: Encoder,
        scene: SceneGraph,
        split: DatasetSplit,
        subset: str,
        queries: typing.Optional[SceneGraph] = None,
) -> SimilarityMatrix:
    """
    Similarities of ``subset``'s query places (from the evaluation variant
    unless ``queries`` is given) against every map place.
    """
    query_scene = queries if queries is not None else split.evaluation_queries()[0]
    query_ids = split.places(subset)
    map_ids = sorted(scene.place_index)

    return similarity_from_embeddings(
        query_ids, EgoGraphEmbeddingProvider(query_scene, encoder).matrix(query_ids),
        map_ids, EgoGraphEmbeddingProvider(scene, encoder).matrix(map_ids),
    )


def bow_place_similarity(
        scene: SceneGraph,
        split: DatasetSplit,
        subset: str,
        hops: int,
        queries: typing.Optional[SceneGraph] = None,
) -> SimilarityMatrix:
    query_scene = queries if queries is not None else split.evaluation_queries()[0]
    return bow_similarity_matrix(
        ego_graphs(query_scene, split.places(subset), hops),
        ego_graphs(scene, sorted(scene.place_index), hops),
        scene.taxonomy,
    )


def train(
        scene: SceneGraph,
        split: DatasetSplit,
        cfg: TrainConfig = TrainConfig(),
        model: ModelConfig = ModelConfig(),
) -> typing.Tuple[EncoderParams, TrainReport]:
    """
    Optimises the configured loss and returns the parameters of the epoch
    with the best validation PR-AUC (earliest on ties).

    :raise:
        - :py:class:`ValueError` if the train or validation set is empty.
        - :py:class:`TrainingDiverged` if a loss or parameter goes
          non-finite.
    """
    if not split.train or not split.val:
        raise with_context(
            ValueError('Training needs non-empty train and validation sets.'),
            context={'train': len(split.train), 'val': len(split.val)},
        )

    model = dataclasses.replace(model, hops=cfg.hops)
    params = init_params(cfg.seed, model, len(scene.taxonomy))
    optimiser = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)

    scenes = {None: scene, **dict(enumerate(split.query_variants))}
    graphs = ParameterisedDefaultDict(
        lambda key: ego_graph(scenes[key[0]], key[1], cfg.hops),
    )
    map_ids = sorted(scene.place_index)
    train_ids = np.array(split.places('train'), dtype=np.int64)

    records: typing.List[EpochRecord] = []
    best: typing.Optional[typing.Tuple[float, int, EncoderParams]] = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_ids)
        losses = []

        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = sample_batch(
                order[start:start + cfg.batch_size].tolist(),
                split, map_ids, rng, cfg.resolved_negatives,
            )

            tape = ad.Tape()
            try:
                loss = _batch_loss(
                    batch, graphs, params, params.bind(tape), split, cfg,
                    scene.taxonomy,
                )
            except NumericFault as e:
                log.error('Loss went non-finite at epoch %d, batch %d.', epoch, b)
                raise with_context(
                    TrainingDiverged('Training diverged.'),
                    context={'epoch': epoch, 'batch': b, **getattr(e, 'context', {})},
                ) from e

            losses.append(loss.item())
            if loss.tape is None:
                continue

            optimiser.step(ad.backward(tape, loss))
            if not all(np.isfinite(params.tensors[n]).all() for n in params.trainable_names()):
                log.error('Parameters went non-finite at epoch %d, batch %d.', epoch, b)
                raise with_context(
                    TrainingDiverged('Training diverged.'),
                    context={'epoch': epoch, 'batch': b, 'loss': loss.item()},
                )

        val = evaluate(
            place_similarity(Encoder(params, scene.taxonomy), scene, split, 'val'),
            split.positives,
        )
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, val)
        records.append(record)
        log.info(
            'Epoch %d/%d: loss %.4f, val PR-AUC %.4f, recall@1 %.4f',
            epoch, cfg.epochs, record.loss, val.pr_auc, val.recall_at_1,
        )

        if best is None or val.pr_auc > best[0]:
            best = (val.pr_auc, epoch, params.copy())

    _, best_epoch, best_params = best
    return best_params, TrainReport(seed=cfg.seed, epochs=records, best_epoch=best_epoch)


@dataclasses.dataclass(frozen=True)
class AblationVariant:
    name: str
    model: ModelConfig


@dataclasses.dataclass(frozen=True)
class AblationRow:
    variant: AblationVariant
    runs: int
    pr_auc_mean: float
    pr_auc_std: float
    recall_at_1_mean: float
    recall_at_1_std: float

    def as_row(self) -> typing.Dict[str, typing.Any]:
        m = self.variant.model
        return dict(zip(ABLATION_COLUMNS, (
            self.variant.name, m.mpnn_layers, m.hidden_dim,
            m.heads if m.use_gat else 0, int(m.use_gat), self.runs,
            self.pr_auc_mean, self.pr_auc_std,
            self.recall_at_1_mean, self.recall_at_1_std,
        )))


def architecture_grid() -> typing.List[AblationVariant]:
    """
    The reference model and one-axis departures from it: MPNN depth, hidden
    width, head count, and dropping the attention block.
    """
    base = ModelConfig()
    return [
        AblationVariant('1 MPNN layer', dataclasses.replace(base, mpnn_layers=1)),
        AblationVariant('3 MPNN layers', dataclasses.replace(base, mpnn_layers=3)),
        AblationVariant('hidden 32', dataclasses.replace(base, hidden_dim=32)),
        AblationVariant('hidden 128', dataclasses.replace(base, hidden_dim=128)),
        AblationVariant('1 head', dataclasses.replace(base, heads=1)),
        AblationVariant('2 heads', dataclasses.replace(base, heads=2)),
        AblationVariant('no GAT, 2 MPNN layers', dataclasses.replace(base, use_gat=False)),
        AblationVariant('no GAT, 3 MPNN layers',
            dataclasses.replace(base, use_gat=False, mpnn_layers=3)),
        AblationVariant('our model', base),
    ]


def _spread(values: typing.Sequence[float]) -> typing.Tuple[float, float]:
    return float(np.mean(values)), float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def run_ablation_grid(
        scene: SceneGraph,
        split: DatasetSplit,
        grid: typing.Sequence[AblationVariant],
        seeds: typing.Sequence[int],
        cfg: TrainConfig = TrainConfig(),
) -> typing.List[AblationRow]:
    """
    Trains every variant once per seed and summarises test-split PR-AUC and
    recall@1 (sample standard deviation over seeds).
    """
    if not grid or not seeds:
        raise with_context(
            ValueError('Ablation needs at least one variant and one seed.'),
            context={'variants': len(grid), 'seeds': len(seeds)},
        )

    rows = []
    for variant in grid:
        pr, r1 = [], []
        for seed in seeds:
            params, _ = train(scene, split, dataclasses.replace(cfg, seed=seed), variant.model)
            report = evaluate(
                place_similarity(Encoder(params, scene.taxonomy), scene, split, 'test'),
                split.positives,
            )
            pr.append(report.pr_auc)
            r1.append(report.recall_at_1)
            log.info('Ablation %s, seed %d: PR-AUC %.4f', variant.name, seed, report.pr_auc)

        rows.append(AblationRow(variant, len(seeds), *_spread(pr), *_spread(r1)))
    return rows


def write_train_report(
        report: TrainReport,
        path: typing.Union[str, os.PathLike],
        variant: str = 'our model',
) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRAIN_COLUMNS)
        for e in report.epochs:
            writer.writerow([
                variant, report.seed, e.epoch, e.loss, e.val.pr_auc, e.val.f1,
                e.val.recall_at_1, e.val.recall_at_5, e.val.recall_at_10,
            ])
    log.info('Wrote training report.', extra={'path': str(path)})


def write_ablation_table(
        rows: typing.Sequence[AblationRow],
        path: typing.Union[str, os.PathLike],
) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator='\n')
        writer.writeheader()
        writer.writerows(r.as_row() for r in rows)
    log.info('Wrote ablation table.', extra={'path': str(path)})
