"""
Per-object importance for a place/query pair.

Every explainer attributes the same target: the cosine similarity between the
map place's embedding and the query's embedding.  Scores are reported for the
query's object nodes only; places are never ranked.
"""
import csv
import dataclasses
import itertools
import logging
import math
import os
import typing
from collections import defaultdict as default_dict

import numpy as np

from semloc import autodiff as ad
from semloc.encoder import Encoder, GraphBatch, forward
from semloc.exceptions import with_context
from semloc.providers import CoalitionValueProvider
from semloc.scene_graph import EgoGraph, SemanticClass

__all__ = [
    'ATTRIBUTION_COLUMNS',
    'AttributionResult',
    'EXPLAINERS',
    'PlacePair',
    'attention_importance',
    'coalition_values',
    'exact_shapley',
    'explain',
    'integrated_gradients',
    'object_importance',
    'path_integrated_gradients',
    'random_ranking',
    'saliency',
    'shapley_sampling',
    'smoothgrad',
    'target_scalar',
    'write_attributions',
]

log = logging.getLogger(__name__)

ATTRIBUTION_COLUMNS = (
    'pair_id', 'explainer', 'node_id', 'class_code', 'raw', 'normalised',
)

EXACT_SHAPLEY_LIMIT = 16


class PlacePair(typing.NamedTuple):
    """
    A query ego graph and the map ego graph it is matched against.
    """
    map_graph: EgoGraph
    query_graph: EgoGraph

    @property
    def pair_id(self) -> str:
        return f'{self.query_graph.centre}->{self.map_graph.centre}'


@dataclasses.dataclass(frozen=True)
class AttributionResult:
    explainer: str
    query: int
    match: int
    object_ids: typing.Tuple[int, ...]
    labels: typing.Tuple[int, ...]
    raw: np.ndarray
    residual: typing.Optional[float] = None
    """
    Integrated-gradients completeness residual, when applicable.
    """

    @property
    def pair_id(self) -> str:
        return f'{self.query}->{self.match}'

    @property
    def normalised(self) -> np.ndarray:
        """
        ``|raw| / sum(|raw|)``; all zeros when every raw score is zero.
        """
        magnitude = np.abs(self.raw)
        total = magnitude.sum()
        return magnitude / total if total > 0.0 else np.zeros_like(magnitude)

    def class_scores(self) -> typing.Dict[int, float]:
        """
        Summed normalised score per class label present in the query.
        """
        scores: typing.Dict[int, float] = default_dict(float)
        for label, score in zip(self.labels, self.normalised):
            scores[label] += float(score)
        return dict(scores)

    def ranking(self) -> typing.List[int]:
        """
        Object ids by descending raw magnitude; ties by ascending id.
        """
        return [
            o for _, o in sorted(zip(-np.abs(self.raw), self.object_ids))
        ]


def _result(
        explainer: str,
        pair: PlacePair,
        raw: typing.Sequence[float],
        residual: typing.Optional[float] = None,
) -> AttributionResult:
    q = pair.query_graph
    objects = q.object_ids
    return AttributionResult(
        explainer=explainer,
        query=q.centre,
        match=pair.map_graph.centre,
        object_ids=objects,
        labels=tuple(q.label_of(o) for o in objects),
        raw=np.asarray(raw, dtype=np.float64).reshape(len(objects)),
        residual=residual,
    )


def _object_rows(g: EgoGraph) -> np.ndarray:
    return np.array([i for i, lab in enumerate(g.labels) if lab is not None],
        dtype=np.int64)


def target_scalar(P: EgoGraph, Q: EgoGraph, encoder: Encoder) -> float:
    """
    Cosine similarity of the two embeddings.
    """
    z = encoder.embed_many([P, Q])
    return float(z[0] @ z[1])


def _target_fn(P: EgoGraph, Q: EgoGraph, encoder: Encoder) \
        -> typing.Tuple[np.ndarray, typing.Callable[[ad.Tensor], ad.Tensor]]:
    """
    Q's one-hot features and the similarity to P as a function of them.
    """
    z_p = ad.Tensor(encoder.embed_many([P])[0])
    batch = GraphBatch([Q], encoder.taxonomy)
    dim = encoder.params.config.embedding_dim

    def f(x: ad.Tensor) -> ad.Tensor:
        z, _ = forward(batch, encoder.weights, encoder.params, features=x)
        return ad.dot(ad.reshape(z, (dim,)), z_p)

    return batch.features, f


def _gradient(f: typing.Callable[[ad.Tensor], ad.Tensor], x: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    leaf = tape.watch(x, 'features')
    out = f(leaf)
    if out.tape is None:
        return np.zeros_like(x)
    grad, = ad.backward(tape, out, [leaf])
    return grad


def _saliency_raw(f, x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return np.linalg.norm(_gradient(f, x)[rows], axis=1)


def saliency(P: EgoGraph, Q: EgoGraph, encoder: Encoder) -> AttributionResult:
    """
    L2 norm of the target's gradient over each object's feature row.
    """
    x, f = _target_fn(P, Q, encoder)
    return _result('saliency', PlacePair(P, Q), _saliency_raw(f, x, _object_rows(Q)))


def path_integrated_gradients(
        f: typing.Callable[[ad.Tensor], ad.Tensor],
        x: np.ndarray,
        baseline: np.ndarray,
        steps: int,
) -> np.ndarray:
    """
    Coordinate-wise integrated gradients of scalar ``f`` along the straight
    path from ``baseline`` to ``x`` (midpoint rule).
    """
    if steps < 1:
        raise with_context(ValueError('steps must be >= 1.'), context={'steps': steps})

    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    delta = x - baseline

    total = np.zeros_like(x)
    for k in range(steps):
        total += _gradient(f, baseline + (k + 0.5) / steps * delta)
    return delta * total / steps


def _object_baseline(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    baseline = x.copy()
    baseline[rows] = 0.0
    return baseline


def integrated_gradients(
        P: EgoGraph,
        Q: EgoGraph,
        encoder: Encoder,
        steps: int = 128,
        baseline: typing.Optional[np.ndarray] = None,
) -> AttributionResult:
    """
    :param baseline:
        Feature matrix to integrate from; by default Q's features with every
        object row zeroed (place rows kept).

    The result's ``residual`` is ``sum(attributions) - (f(x) - f(baseline))``.
    """
    x, f = _target_fn(P, Q, encoder)
    rows = _object_rows(Q)
    x0 = _object_baseline(x, rows) if baseline is None else np.asarray(baseline)

    attributions = path_integrated_gradients(f, x, x0, steps)
    residual = float(attributions.sum() - (f(ad.Tensor(x)).item() - f(ad.Tensor(x0)).item()))

    return _result('ig', PlacePair(P, Q), attributions[rows].sum(axis=1), residual)


def coalition_values(P: EgoGraph, Q: EgoGraph, encoder: Encoder) \
        -> CoalitionValueProvider:
    z_p = encoder.embed_many([P])[0]
    return CoalitionValueProvider(
        lambda coalitions: encoder.embed_many([Q.restrict(s) for s in coalitions]) @ z_p,
    )


def shapley_sampling(
        P: EgoGraph,
        Q: EgoGraph,
        encoder: Encoder,
        permutations: int = 200,
        seed: int = 0,
) -> AttributionResult:
    """
    Permutation-sampling Shapley values with node-removal masking: a
    coalition keeps its objects (with their visibility edges) and every
    place.

    Every coalition the sampled permutations need is registered up front and
    embedded in bulk; repeated coalitions are evaluated once.
    """
    if permutations < 1:
        raise with_context(
            ValueError('permutations must be >= 1.'),
            context={'permutations': permutations},
        )

    pair = PlacePair(P, Q)
    players = Q.object_ids
    if not players:
        return _result('shapley', pair, [])

    rng = np.random.default_rng(seed)
    orders = [rng.permutation(len(players)) for _ in range(permutations)]

    values = coalition_values(P, Q, encoder)
    values.register(
        frozenset(players[i] for i in order[:cut])
        for order in orders for cut in range(len(players) + 1)
    )

    phi = np.zeros(len(players))
    for order in orders:
        coalition: typing.Set[int] = set()
        before = values[coalition]
        for i in order:
            coalition.add(players[i])
            after = values[coalition]
            phi[i] += after - before
            before = after

    return _result('shapley', pair, phi / permutations)


def exact_shapley(P: EgoGraph, Q: EgoGraph, encoder: Encoder) -> AttributionResult:
    """
    Shapley values by full enumeration of coalitions.

    :raise:
        - :py:class:`ValueError` if Q has more objects than can reasonably be
          enumerated.
    """
    pair = PlacePair(P, Q)
    players = Q.object_ids
    n = len(players)
    if n > EXACT_SHAPLEY_LIMIT:
        raise with_context(
            ValueError('Too many objects for exact Shapley values.'),
            context={'objects': n, 'limit': EXACT_SHAPLEY_LIMIT},
        )
    if not n:
        return _result('shapley_exact', pair, [])

    subsets = [
        frozenset(c)
        for size in range(n + 1)
        for c in itertools.combinations(players, size)
    ]
    values = coalition_values(P, Q, encoder)
    values.register(subsets)

    weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
        for s in range(n)]
    phi = np.zeros(n)
    for i, player in enumerate(players):
        for s in subsets:
            if player not in s:
                phi[i] += weight[len(s)] * (values[s | {player}] - values[s])

    return _result('shapley_exact', pair, phi)


def attention_importance(P: EgoGraph, Q: EgoGraph, encoder: Encoder) \
        -> AttributionResult:
    """
    Head-averaged attention each object receives from the places that see
    it, summed over those places.
    """
    if not encoder.params.config.use_gat:
        raise with_context(
            ValueError('Encoder has no attention block.'),
            context={'config': dataclasses.asdict(encoder.params.config)},
        )

    _, record = encoder.embed(Q)
    label = dict(zip(Q.nodes, Q.labels))
    mean_alpha = record.coefficients.mean(axis=0)

    scores: typing.Dict[int, float] = dict.fromkeys(Q.object_ids, 0.0)
    for src, dst, alpha in zip(record.sources, record.targets, mean_alpha):
        if label[src] is not None and label[dst] is None:
            scores[src] += float(alpha)

    return _result('attention', PlacePair(P, Q), [scores[o] for o in Q.object_ids])


def random_ranking(
        P: EgoGraph,
        Q: EgoGraph,
        encoder: Encoder,
        seed: int = 0,
) -> AttributionResult:
    """
    Uniform random scores; the uninformed baseline for fidelity curves.
    """
    rng = np.random.default_rng(seed)
    return _result('random', PlacePair(P, Q), rng.uniform(size=len(Q.object_ids)))


def smoothgrad(
        method: str,
        P: EgoGraph,
        Q: EgoGraph,
        encoder: Encoder,
        samples: int = 16,
        sigma: float = 0.1,
        seed: int = 0,
        steps: int = 32,
) -> AttributionResult:
    """
    Averages saliency or integrated-gradients scores over Gaussian-perturbed
    copies of Q's features.
    """
    if method not in ('saliency', 'ig'):
        raise with_context(
            ValueError('SmoothGrad wraps gradient explainers only.'),
            context={'method': method},
        )

    x, f = _target_fn(P, Q, encoder)
    rows = _object_rows(Q)
    rng = np.random.default_rng(seed)

    total = np.zeros(len(rows))
    for _ in range(samples):
        noisy = x + rng.normal(scale=sigma, size=x.shape)
        if method == 'saliency':
            total += _saliency_raw(f, noisy, rows)
        else:
            total += path_integrated_gradients(
                f, noisy, _object_baseline(noisy, rows), steps,
            )[rows].sum(axis=1)

    return _result(f'smoothgrad_{method}', PlacePair(P, Q), total / samples)


EXPLAINERS: typing.Dict[str, typing.Callable[..., AttributionResult]] = {
    'saliency': saliency,
    'ig': integrated_gradients,
    'shapley': shapley_sampling,
    'attention': attention_importance,
    'random': random_ranking,
}


def explain(
        method: str,
        P: EgoGraph,
        Q: EgoGraph,
        encoder: Encoder,
        **options: typing.Any,
) -> AttributionResult:
    try:
        explainer = EXPLAINERS[method]
    except KeyError:
        raise with_context(
            ValueError(f'Unknown explainer {method!r}.'),
            context={'method': method, 'known': sorted(EXPLAINERS)},
        ) from None
    return explainer(P, Q, encoder, **options)


def object_importance(results: typing.Iterable[AttributionResult]) \
        -> typing.Dict[int, float]:
    """
    Mean normalised score of each object over the results it appears in.
    """
    totals: typing.Dict[int, typing.List[float]] = default_dict(list)
    for result in results:
        for o, score in zip(result.object_ids, result.normalised):
            totals[o].append(float(score))
    return {o: float(np.mean(v)) for o, v in sorted(totals.items())}


def write_attributions(
        results: typing.Iterable[AttributionResult],
        taxonomy: typing.Sequence[SemanticClass],
        path: typing.Union[str, os.PathLike],
) -> None:
    code = {c.label: c.code for c in taxonomy}
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(ATTRIBUTION_COLUMNS)
        for r in results:
            for o, label, raw, norm in zip(r.object_ids, r.labels, r.raw, r.normalised):
                writer.writerow([r.pair_id, r.explainer, o, code[label], float(raw), float(norm)])
    log.info('Wrote attributions.', extra={'path': str(path)})
