"""
Retrieval evaluation over place/query similarity matrices.
"""
import csv
import dataclasses
import json
import logging
import os
import typing

import numpy as np
from sklearn.metrics import average_precision_score

from semloc.encoder import Encoder, bow_embed
from semloc.exceptions import DegenerateLabels, ShapeMismatch, with_context
from semloc.scene_graph import EgoGraph, SemanticClass

__all__ = [
    'EVAL_COLUMNS',
    'EvalReport',
    'SimilarityMatrix',
    'bow_similarity_matrix',
    'evaluate',
    'f1_best',
    'pair_scores',
    'pr_auc',
    'recall_at_n',
    'similarity_from_embeddings',
    'similarity_matrix',
    'write_eval_reports',
    'write_similarity_csv',
]

log = logging.getLogger(__name__)

Positives = typing.Mapping[int, typing.AbstractSet[int]]

EVAL_COLUMNS = (
    'model', 'pr_auc', 'f1', 'threshold',
    'recall@1', 'recall@5', 'recall@10',
    'queries', 'positives', 'pairs',
)


@dataclasses.dataclass(frozen=True)
class SimilarityMatrix:
    query_ids: typing.Tuple[int, ...]
    map_ids: typing.Tuple[int, ...]
    values: np.ndarray
    """
    Cosine similarity, one row per query and one column per map place.
    """

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.query_ids), len(self.map_ids)):
            raise with_context(
                ShapeMismatch('Similarity matrix does not match its id lists.'),

                context={
                    'shape': list(self.values.shape),
                    'queries': len(self.query_ids),
                    'mapPlaces': len(self.map_ids),
                },
            )

    def entry(self, query_id: int, map_id: int) -> float:
        return float(self.values[
            self.query_ids.index(query_id),
            self.map_ids.index(map_id),
        ])


def similarity_from_embeddings(
        query_ids: typing.Sequence[int],
        query_z: np.ndarray,
        map_ids: typing.Sequence[int],
        map_z: np.ndarray,
) -> SimilarityMatrix:
    """
    Dot products of unit embeddings, clipped into [-1, 1] against rounding.
    """
    values = np.clip(query_z @ map_z.T, -1.0, 1.0) if len(query_ids) and len(map_ids) \
        else np.zeros((len(query_ids), len(map_ids)))
    return SimilarityMatrix(tuple(query_ids), tuple(map_ids), values)


def similarity_matrix(
        queries: typing.Sequence[EgoGraph],
        map_places: typing.Sequence[EgoGraph],
        encoder: Encoder,
) -> SimilarityMatrix:
    return similarity_from_embeddings(
        [g.centre for g in queries], encoder.embed_many(queries),
        [g.centre for g in map_places], encoder.embed_many(map_places),
    )


def bow_similarity_matrix(
        queries: typing.Sequence[EgoGraph],
        map_places: typing.Sequence[EgoGraph],
        taxonomy: typing.Sequence[SemanticClass],
) -> SimilarityMatrix:
    """
    Bag-of-words baseline: cosine of class histograms (0 for object-free
    graphs).
    """
    def stack(graphs):
        if not graphs:
            return np.zeros((0, len(taxonomy)))
        return np.stack([bow_embed(g, taxonomy) for g in graphs])

    return similarity_from_embeddings(
        [g.centre for g in queries], stack(queries),
        [g.centre for g in map_places], stack(map_places),
    )


def pair_scores(sim: SimilarityMatrix, positives: Positives) \
        -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Flattens ``sim`` row-major into ``(scores, labels)``; a pair is labelled
    1 when the map place is a positive of the query.
    """
    labels = np.array([
        [m in positives.get(q, ()) for m in sim.map_ids]
        for q in sim.query_ids
    ], dtype=np.int64).reshape(sim.values.shape)
    return sim.values.ravel(), labels.ravel()


def _check_labels(scores: typing.Sequence[float], labels: typing.Sequence[int]) \
        -> typing.Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise with_context(
            ShapeMismatch('Scores and labels must be flat and equally long.'),
            context={'scores': list(scores.shape), 'labels': list(labels.shape)},
        )

    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise with_context(
            DegenerateLabels('Metric needs at least one positive and one negative.'),
            context={'pairs': int(labels.size), 'positives': n_pos},
        )
    return scores, labels


def pr_auc(scores: typing.Sequence[float], labels: typing.Sequence[int]) -> float:
    """
    Area under the precision-recall curve, step-interpolated, with tied
    scores forming a single operating point.

    :raise:
        - :py:class:`DegenerateLabels` unless both classes are present.
    """
    scores, labels = _check_labels(scores, labels)
    return float(average_precision_score(labels, scores))


def f1_best(scores: typing.Sequence[float], labels: typing.Sequence[int]) \
        -> typing.Tuple[float, float]:
    """
    Best F1 over every distinct-score threshold (predict positive when
    ``score >= threshold``).

    :return:
        ``(f1, threshold)``; among equal F1 values the lowest threshold wins.

    :raise:
        - :py:class:`DegenerateLabels` unless both classes are present.
    """
    scores, labels = _check_labels(scores, labels)

    order = np.argsort(-scores, kind='stable')
    ranked, hits = scores[order], labels[order]
    # Last position of each run of tied scores.
    ends = np.flatnonzero(np.append(ranked[1:] != ranked[:-1], True))

    tp = np.cumsum(hits)[ends]
    fp = ends + 1 - tp
    fn = hits.sum() - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)

    best = len(f1) - 1 - int(np.argmax(f1[::-1]))
    return float(f1[best]), float(ranked[ends[best]])


def recall_at_n(sim: SimilarityMatrix, positives: Positives, n: int) -> float:
    """
    Fraction of queries with a positive among their ``n`` most similar map
    places (equal similarities ranked by ascending map id).
    """
    if n < 1:
        raise with_context(ValueError('n must be >= 1.'), context={'n': n})
    if not sim.query_ids:
        return 0.0

    map_ids = np.asarray(sim.map_ids, dtype=np.int64)
    hits = 0
    for row, q in zip(sim.values, sim.query_ids):
        top = map_ids[np.lexsort((map_ids, -row))[:n]]
        if positives.get(q) and not positives[q].isdisjoint(top.tolist()):
            hits += 1
    return hits / len(sim.query_ids)


@dataclasses.dataclass(frozen=True)
class EvalReport:
    pr_auc: float
    f1: float
    threshold: float
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    queries: int
    positives: int
    pairs: int

    def as_row(self, model: str) -> typing.Dict[str, typing.Any]:
        return dict(zip(EVAL_COLUMNS, (
            model, self.pr_auc, self.f1, self.threshold,
            self.recall_at_1, self.recall_at_5, self.recall_at_10,
            self.queries, self.positives, self.pairs,
        )))


def evaluate(sim: SimilarityMatrix, positives: Positives) -> EvalReport:
    scores, labels = pair_scores(sim, positives)
    f1, threshold = f1_best(scores, labels)
    return EvalReport(
        pr_auc=pr_auc(scores, labels),
        f1=f1,
        threshold=threshold,
        recall_at_1=recall_at_n(sim, positives, 1),
        recall_at_5=recall_at_n(sim, positives, 5),
        recall_at_10=recall_at_n(sim, positives, 10),
        queries=len(sim.query_ids),
        positives=int(labels.sum()),
        pairs=int(labels.size),
    )


def write_eval_reports(
        reports: typing.Mapping[str, EvalReport],
        csv_path: typing.Union[str, os.PathLike],
        json_path: typing.Optional[typing.Union[str, os.PathLike]] = None,
) -> None:
    """
    One CSV row per model, in mapping order; optionally the same rows as a
    JSON list.
    """
    rows = [report.as_row(model) for model, report in reports.items()]

    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=EVAL_COLUMNS, lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)
    log.info('Wrote evaluation report.', extra={'path': str(csv_path)})

    if json_path is not None:
        with open(json_path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(rows, f, indent=2)
            f.write('\n')


def write_similarity_csv(sim: SimilarityMatrix, path: typing.Union[str, os.PathLike]) \
        -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['query_id', *sim.map_ids])
        for q, row in zip(sim.query_ids, sim.values):
            writer.writerow([q, *(repr(float(v)) for v in row)])
