"""
Model introspection: leave-one-class-out ablation, attribution-distribution
shifts, fidelity budget curves, the characterisation score, class rankings
and the attention/performance correlation.
"""
import csv
import dataclasses
import logging
import math
import os
import typing
from collections import defaultdict as default_dict

import numpy as np
from scipy.spatial.distance import jensenshannon
from scipy.stats import kendalltau, pearsonr, spearmanr

from semloc.attribution import AttributionResult, PlacePair, coalition_values, \
    explain
from semloc.encoder import Encoder
from semloc.exceptions import with_context
from semloc.metrics import evaluate, similarity_from_embeddings
from semloc.providers import EgoGraphEmbeddingProvider, SceneVariantDelegate
from semloc.scene_graph import DatasetSplit, SceneGraph, SemanticClass, \
    class_counts, ego_graph, remove_class

__all__ = [
    'CharactScore',
    'ClassAblationRow',
    'Correlation',
    'DEFAULT_BINS',
    'FidelityCurve',
    'JSD_EPSILON',
    'JsdShiftRow',
    'RANKING_METHODS',
    'attention_performance_correlation',
    'bootstrap_charact_lower',
    'budget_count',
    'budget_grid',
    'build_pairs',
    'charact',
    'charact_curve',
    'class_ablation',
    'fidelity_curves',
    'frequency_importance',
    'jsd',
    'jsd_shift',
    'jsd_shifts',
    'kendall_tau',
    'mean_class_attribution',
    'rank_classes',
    'ranking_scores',
    'sample_places',
    'score_histogram',
    'write_charact_table',
    'write_class_ablation',
    'write_correlation',
    'write_fidelity_curves',
    'write_jsd_table',
    'write_rankings',
]

log = logging.getLogger(__name__)

DEFAULT_BINS = 20
JSD_EPSILON = 1e-9

RANKING_METHODS = ('ablation', 'saliency', 'ig', 'shapley', 'attention')

PathLike = typing.Union[str, os.PathLike]


def sample_places(
        split: DatasetSplit,
        subset: str,
        limit: typing.Optional[int] = None,
        seed: int = 0,
) -> typing.List[int]:
    """
    ``limit`` place ids drawn without replacement from a split subset
    (all of them if ``limit`` is ``None``), in ascending order.
    """
    ids = split.places(subset)
    if limit is None or limit >= len(ids):
        return ids
    rng = np.random.default_rng(seed)
    return sorted(int(p) for p in rng.choice(ids, size=limit, replace=False))


def build_pairs(
        map_scene: SceneGraph,
        query_scene: SceneGraph,
        place_ids: typing.Iterable[int],
        hops: int,
) -> typing.List[PlacePair]:
    """
    Pairs each query place with the same place in the map (its ground-truth
    match).
    """
    return [
        PlacePair(ego_graph(map_scene, p, hops), ego_graph(query_scene, p, hops))
        for p in place_ids
    ]


# Class ablation.

@dataclasses.dataclass(frozen=True)
class ClassAblationRow:
    label: int
    code: str
    count: int
    pr_auc_with: float
    pr_auc_without: float

    @property
    def drop(self) -> float:
        return self.pr_auc_with - self.pr_auc_without

    @property
    def normalised_drop(self) -> float:
        return self.drop / self.count


def class_ablation(
        scene: SceneGraph,
        split: DatasetSplit,
        encoder: Encoder,
        taxonomy: typing.Optional[typing.Sequence[SemanticClass]] = None,
        subset: str = 'test',
        queries: typing.Optional[SceneGraph] = None,
) -> typing.List[ClassAblationRow]:
    """
    PR-AUC with and without each class (removed from both the map and the
    queries), using the trained encoder as is.

    Classes without instances in the map are skipped.
    """
    taxonomy = scene.taxonomy if taxonomy is None else taxonomy
    query_scene = queries if queries is not None else split.evaluation_queries()[0]
    counts = class_counts(scene)

    def variant(source: SceneGraph):
        return lambda label: EgoGraphEmbeddingProvider(
            source if label is None else remove_class(source, label), encoder,
        )

    maps = SceneVariantDelegate(variant(scene))
    query_variants = SceneVariantDelegate(variant(query_scene))
    query_ids = split.places(subset)
    map_ids = sorted(scene.place_index)

    def pr_auc_for(label: typing.Optional[int]) -> float:
        sim = similarity_from_embeddings(
            query_ids, query_variants.get_data_provider(label).matrix(query_ids),
            map_ids, maps.get_data_provider(label).matrix(map_ids),
        )
        return evaluate(sim, split.positives).pr_auc

    base = pr_auc_for(None)
    rows = []
    for c in taxonomy:
        count = counts.get(c.label, 0)
        if not count:
            log.info('Skipping class %s: no instances in the map.', c.code)
            continue
        rows.append(ClassAblationRow(c.label, c.code, count, base, pr_auc_for(c.label)))
    return rows


# Attribution-distribution shift.

def score_histogram(scores: typing.Sequence[float], bins: int = DEFAULT_BINS) \
        -> np.ndarray:
    """
    Probability mass of ``scores`` in ``bins`` equal bins over [0, 1].

    :raise:
        - :py:class:`ValueError` for an empty score set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not scores.size:
        raise ValueError('Cannot histogram an empty attribution set.')
    counts, _ = np.histogram(np.clip(scores, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def jsd(p: typing.Sequence[float], q: typing.Sequence[float]) -> float:
    """
    Jensen-Shannon divergence in bits, after adding a small constant to
    every bin.
    """
    p = np.asarray(p, dtype=np.float64) + JSD_EPSILON
    q = np.asarray(q, dtype=np.float64) + JSD_EPSILON
    value = jensenshannon(p, q, base=2) ** 2
    return float(np.clip(np.nan_to_num(value), 0.0, 1.0))


@dataclasses.dataclass(frozen=True)
class JsdShiftRow:
    explainer: str
    label: int
    code: str
    count: int
    jsd: float

    @property
    def normalised_jsd(self) -> float:
        return self.jsd / self.count if self.count else 0.0


def _pooled_scores(
        explainer: str,
        pairs: typing.Sequence[PlacePair],
        encoder: Encoder,
        options: typing.Mapping[str, typing.Any],
) -> np.ndarray:
    results = [explain(explainer, p.map_graph, p.query_graph, encoder, **options)
        for p in pairs if p.query_graph.object_ids]
    return np.concatenate([r.normalised for r in results]) if results \
        else np.zeros(0)


def jsd_shift(
        explainer: str,
        c: SemanticClass,
        scene: SceneGraph,
        query_scene: SceneGraph,
        place_ids: typing.Sequence[int],
        encoder: Encoder,
        hops: typing.Optional[int] = None,
        pre: typing.Optional[np.ndarray] = None,
        bins: int = DEFAULT_BINS,
        **options: typing.Any,
) -> JsdShiftRow:
    """
    JSD between the explainer's normalised-score histograms before and after
    removing class ``c`` from both scenes.

    :param pre:
        Precomputed "before" histogram, so that loops over classes compute it
        once.

    :raise:
        - :py:class:`ValueError` if no query keeps an object without ``c``.
    """
    hops = encoder.hops if hops is None else hops
    if pre is None:
        pre = score_histogram(
            _pooled_scores(explainer, build_pairs(scene, query_scene, place_ids, hops),
                encoder, options),
            bins,
        )

    post_pairs = build_pairs(
        remove_class(scene, c), remove_class(query_scene, c), place_ids, hops,
    )
    post_scores = _pooled_scores(explainer, post_pairs, encoder, options)
    if not post_scores.size:
        raise with_context(
            ValueError('No query keeps an object once the class is removed.'),
            context={'label': c.label, 'code': c.code, 'places': len(place_ids)},
        )
    post = score_histogram(post_scores, bins)

    return JsdShiftRow(
        explainer=explainer,
        label=c.label,
        code=c.code,
        count=class_counts(scene).get(c.label, 0),
        jsd=jsd(pre, post),
    )


def jsd_shifts(
        explainer: str,
        scene: SceneGraph,
        query_scene: SceneGraph,
        place_ids: typing.Sequence[int],
        encoder: Encoder,
        hops: typing.Optional[int] = None,
        bins: int = DEFAULT_BINS,
        **options: typing.Any,
) -> typing.List[JsdShiftRow]:
    hops = encoder.hops if hops is None else hops
    pre = score_histogram(
        _pooled_scores(explainer, build_pairs(scene, query_scene, place_ids, hops),
            encoder, options),
        bins,
    )
    counts = class_counts(scene)

    rows = []
    for c in scene.taxonomy:
        if not counts.get(c.label):
            log.info('Skipping class %s: no instances in the map.', c.code)
            continue
        stripped = remove_class(query_scene, c)
        if not any(ego_graph(stripped, p, hops).object_ids for p in place_ids):
            log.info('Skipping class %s: no query keeps an object without it.', c.code)
            continue
        rows.append(jsd_shift(
            explainer, c, scene, query_scene, place_ids, encoder,
            hops=hops, pre=pre, bins=bins, **options,
        ))
    return rows


# Fidelity and characterisation.

@dataclasses.dataclass(frozen=True)
class FidelityCurve:
    explainer: str
    grid: typing.Tuple[float, ...]
    s_keep: np.ndarray
    s_drop: np.ndarray
    fid_plus: np.ndarray
    fid_minus: np.ndarray
    pairs: int
    plus_samples: np.ndarray
    """
    Per-pair necessity values, ``(pairs, len(grid))``.
    """
    minus_samples: np.ndarray
    skipped: int = 0

    def index_of(self, rho: float) -> int:
        for i, value in enumerate(self.grid):
            if math.isclose(value, rho, abs_tol=1e-9):
                return i
        raise with_context(
            ValueError('Budget is not on the curve grid.'),
            context={'rho': rho, 'grid': list(self.grid)},
        )


def budget_grid(start: float, stop: float, step: float) -> typing.Tuple[float, ...]:
    """
    ``start, start + step, ...`` up to ``stop`` inclusive, rounded to 10
    decimals.
    """
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(round(start + i * step, 10) for i in range(count))


def _check_grid(grid: typing.Sequence[float]) -> None:
    if not grid or any(not 0.0 < r <= 1.0 for r in grid) \
            or any(b <= a for a, b in zip(grid, grid[1:])):
        raise with_context(
            ValueError('Budget grid must be strictly increasing within (0, 1].'),
            context={'grid': list(grid)},
        )


def budget_count(rho: float, n: int) -> int:
    return min(n, int(math.ceil(rho * n - 1e-9)))


def fidelity_curves(
        explainer: str,
        pairs: typing.Sequence[PlacePair],
        encoder: Encoder,
        grid: typing.Sequence[float],
        results: typing.Optional[typing.Sequence[AttributionResult]] = None,
        **options: typing.Any,
) -> FidelityCurve:
    """
    Keeps (sufficiency) or removes (necessity) each query's top-ranked
    objects at every budget and measures the similarity change.

    :param results:
        Precomputed attributions aligned with ``pairs``; computed with
        ``explainer`` otherwise.
    """
    grid = tuple(float(r) for r in grid)
    _check_grid(grid)

    keep_rows, drop_rows, plus_rows, minus_rows = [], [], [], []
    skipped = 0
    for i, pair in enumerate(pairs):
        P, Q = pair
        players = Q.object_ids
        if not players:
            skipped += 1
            continue

        result = results[i] if results is not None \
            else explain(explainer, P, Q, encoder, **options)
        ranking = result.ranking()
        n = len(ranking)

        values = coalition_values(P, Q, encoder)
        cuts = [budget_count(r, n) for r in grid]
        values.register([frozenset(players)])
        values.register(frozenset(ranking[:k]) for k in cuts)
        values.register(frozenset(ranking[k:]) for k in cuts)

        s_full = values[frozenset(players)]
        s_keep = np.array([values[frozenset(ranking[:k])] for k in cuts])
        s_drop = np.array([values[frozenset(ranking[k:])] for k in cuts])

        keep_rows.append(s_keep)
        drop_rows.append(s_drop)
        plus_rows.append(np.abs(s_drop - s_full))
        minus_rows.append(np.abs(s_full - s_keep))

    if skipped:
        log.info('Skipped %d pair(s) without object nodes.', skipped)
    if not plus_rows:
        raise with_context(
            ValueError('No pair has object nodes to rank.'),
            context={'pairs': len(pairs)},
        )

    plus, minus = np.stack(plus_rows), np.stack(minus_rows)
    return FidelityCurve(
        explainer=explainer,
        grid=grid,
        s_keep=np.stack(keep_rows).mean(axis=0),
        s_drop=np.stack(drop_rows).mean(axis=0),
        fid_plus=plus.mean(axis=0),
        fid_minus=minus.mean(axis=0),
        pairs=len(plus_rows),
        plus_samples=plus,
        minus_samples=minus,
        skipped=skipped,
    )


@dataclasses.dataclass(frozen=True)
class CharactScore:
    explainer: str
    rho: float
    w_plus: float
    w_minus: float
    value: float


def _check_weights(w_plus: float, w_minus: float) -> None:
    if not (0.0 <= w_plus <= 1.0 and 0.0 <= w_minus <= 1.0) \
            or not math.isclose(w_plus + w_minus, 1.0, abs_tol=1e-9):
        raise with_context(
            ValueError('Weights must lie in [0, 1] and sum to 1.'),
            context={'wPlus': w_plus, 'wMinus': w_minus},
        )


def _harmonic(fid_plus: float, fid_minus: float, w_plus: float, w_minus: float) -> float:
    sufficiency = 1.0 - fid_minus
    if sufficiency < 0.0:
        log.debug('Sufficiency term %.4f floored at 0.', sufficiency)
        sufficiency = 0.0

    if fid_plus <= 0.0 or sufficiency <= 0.0:
        return 0.0

    value = (w_plus + w_minus) / (w_plus / fid_plus + w_minus / sufficiency)
    if not 0.0 <= value <= 1.0:
        log.debug('Characterisation score %.4f clamped to [0, 1].', value)
        value = min(max(value, 0.0), 1.0)
    return value


def charact(
        curve: FidelityCurve,
        rho: float = 0.2,
        w_plus: float = 0.5,
        w_minus: float = 0.5,
) -> CharactScore:
    """
    Weighted harmonic mean of necessity and ``1 - sufficiency loss`` at
    budget ``rho``; zero when either term is zero.
    """
    _check_weights(w_plus, w_minus)
    i = curve.index_of(rho)
    return CharactScore(
        explainer=curve.explainer,
        rho=curve.grid[i],
        w_plus=w_plus,
        w_minus=w_minus,
        value=_harmonic(float(curve.fid_plus[i]), float(curve.fid_minus[i]),
            w_plus, w_minus),
    )


def charact_curve(
        curve: FidelityCurve,
        w_plus: float = 0.5,
        w_minus: float = 0.5,
) -> np.ndarray:
    _check_weights(w_plus, w_minus)
    return np.array([
        _harmonic(float(p), float(m), w_plus, w_minus)
        for p, m in zip(curve.fid_plus, curve.fid_minus)
    ])


def bootstrap_charact_lower(
        curve: FidelityCurve,
        rho: float = 0.2,
        w_plus: float = 0.5,
        w_minus: float = 0.5,
        resamples: int = 1000,
        confidence: float = 0.95,
        seed: int = 0,
) -> float:
    """
    One-sided lower confidence bound of the characterisation score, by
    resampling pairs with replacement.
    """
    _check_weights(w_plus, w_minus)
    i = curve.index_of(rho)
    plus, minus = curve.plus_samples[:, i], curve.minus_samples[:, i]
    rng = np.random.default_rng(seed)

    stats = np.empty(resamples)
    for b in range(resamples):
        idx = rng.integers(len(plus), size=len(plus))
        stats[b] = _harmonic(float(plus[idx].mean()), float(minus[idx].mean()),
            w_plus, w_minus)
    return float(np.quantile(stats, 1.0 - confidence))


# Rankings and correlations.

def mean_class_attribution(results: typing.Iterable[AttributionResult]) \
        -> typing.Dict[int, float]:
    """
    Mean over results of each class's summed normalised score (a result
    without the class contributes zero).
    """
    results = list(results)
    if not results:
        return {}
    totals: typing.Dict[int, float] = default_dict(float)
    for r in results:
        for label, score in r.class_scores().items():
            totals[label] += score
    return {label: v / len(results) for label, v in sorted(totals.items())}


def ranking_scores(
        method: str,
        ablation: typing.Sequence[ClassAblationRow] = (),
        shifts: typing.Sequence[JsdShiftRow] = (),
) -> typing.Dict[int, float]:
    """
    Per-class score a method is ranked by: normalised PR-AUC drop for
    ablation, frequency-normalised JSD for the explainers.
    """
    if method not in RANKING_METHODS:
        raise with_context(
            ValueError(f'Unknown ranking method {method!r}.'),
            context={'method': method, 'known': list(RANKING_METHODS)},
        )
    if method == 'ablation':
        return {r.label: r.normalised_drop for r in ablation}
    return {r.label: r.normalised_jsd for r in shifts if r.explainer == method}


def rank_classes(scores: typing.Mapping[int, float]) -> typing.List[int]:
    """
    Labels by descending score; ties by ascending label.
    """
    return [label for label, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def kendall_tau(a: typing.Sequence[int], b: typing.Sequence[int]) -> float:
    """
    Kendall rank correlation between two orderings of the same labels.
    """
    if sorted(a) != sorted(b):
        raise with_context(
            ValueError('Rankings must order the same labels.'),
            context={'a': list(a), 'b': list(b)},
        )
    position = {label: i for i, label in enumerate(b)}
    tau, _ = kendalltau(np.arange(len(a)), [position[label] for label in a])
    return float(tau)


def frequency_importance(
        counts: typing.Mapping[int, int],
        importance: typing.Mapping[int, float],
) -> typing.Optional[float]:
    """
    Spearman correlation between class frequency and class importance; a
    negative value means frequent classes are down-weighted.

    ``None`` when fewer than three classes are shared or either side is
    constant.
    """
    labels = sorted(set(counts) & set(importance))
    x = np.array([counts[k] for k in labels], dtype=np.float64)
    y = np.array([importance[k] for k in labels], dtype=np.float64)
    if len(labels) < 3 or np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return None
    rho, _ = spearmanr(x, y)
    return float(rho)


@dataclasses.dataclass(frozen=True)
class Correlation:
    pearson: typing.Optional[float]
    spearman: typing.Optional[float]
    points: typing.Tuple[typing.Tuple[int, str, float, float], ...]
    """
    ``(label, code, normalised PR-AUC drop, normalised attention JSD)``.
    """

    @property
    def defined(self) -> bool:
        return self.pearson is not None


def attention_performance_correlation(
        ablation: typing.Sequence[ClassAblationRow],
        shifts: typing.Sequence[JsdShiftRow],
) -> Correlation:
    """
    Correlates each class's normalised PR-AUC drop with its normalised
    attention JSD.  Constant inputs leave the coefficients undefined
    (``None``).

    :raise:
        - :py:class:`ValueError` if fewer than three classes appear in both.
    """
    attention = {r.label: r for r in shifts if r.explainer == 'attention'}
    points = tuple(
        (r.label, r.code, r.normalised_drop, attention[r.label].normalised_jsd)
        for r in ablation if r.label in attention
    )
    if len(points) < 3:
        raise with_context(
            ValueError('Correlation needs at least three classes.'),
            context={'classes': len(points)},
        )

    x = np.array([p[2] for p in points])
    y = np.array([p[3] for p in points])
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        log.info('Correlation undefined for constant inputs.')
        return Correlation(None, None, points)

    r, _ = pearsonr(x, y)
    rho, _ = spearmanr(x, y)
    return Correlation(float(r), float(rho), points)


# Writers.

def _write(path: PathLike, header: typing.Sequence[str], rows: typing.Iterable) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    log.info('Wrote table.', extra={'path': str(path)})


def write_class_ablation(rows: typing.Sequence[ClassAblationRow], path: PathLike) -> None:
    _write(path, ('label', 'code', 'count', 'pr_auc_with', 'pr_auc_without', 'drop',
        'normalised_drop'), (
        (r.label, r.code, r.count, r.pr_auc_with, r.pr_auc_without, r.drop,
            r.normalised_drop)
        for r in rows
    ))


def write_jsd_table(rows: typing.Sequence[JsdShiftRow], path: PathLike) -> None:
    _write(path, ('explainer', 'label', 'code', 'count', 'jsd', 'normalised_jsd'), (
        (r.explainer, r.label, r.code, r.count, r.jsd, r.normalised_jsd) for r in rows
    ))


def write_fidelity_curves(
        curves: typing.Sequence[FidelityCurve],
        path: PathLike,
        w_plus: float = 0.5,
        w_minus: float = 0.5,
) -> None:
    def rows():
        for c in curves:
            score = charact_curve(c, w_plus, w_minus)
            for i, rho in enumerate(c.grid):
                yield (c.explainer, rho, c.s_keep[i], c.s_drop[i], c.fid_plus[i],
                    c.fid_minus[i], score[i], c.pairs)

    _write(path, ('explainer', 'rho', 's_keep', 's_drop', 'fid_plus', 'fid_minus',
        'charact', 'pairs'), rows())


def write_charact_table(scores: typing.Sequence[CharactScore], path: PathLike) -> None:
    _write(path, ('explainer', 'rho', 'w_plus', 'w_minus', 'charact'), (
        (s.explainer, s.rho, s.w_plus, s.w_minus, s.value) for s in scores
    ))


def write_correlation(correlation: Correlation, path: PathLike) -> None:
    _write(path, ('label', 'code', 'normalised_drop', 'normalised_attention_jsd',
        'pearson', 'spearman'), (
        (*p, '' if correlation.pearson is None else correlation.pearson,
            '' if correlation.spearman is None else correlation.spearman)
        for p in correlation.points
    ))


def _ordinal(n: int) -> str:
    suffix = 'th' if 10 <= n % 100 <= 20 else {1: 'st', 2: 'nd', 3: 'rd'}.get(n % 10, 'th')
    return f'{n}{suffix}'


def write_rankings(
        rows: typing.Sequence[typing.Tuple[str, int, typing.Sequence[str]]],
        path: PathLike,
) -> None:
    """
    One row per ``(method, run, class codes best-first)``.
    """
    width = max([6, *(len(codes) for _, _, codes in rows)])
    _write(path, ('method', 'run', *(_ordinal(i) for i in range(1, width + 1))), (
        (method, run, *codes, *([''] * (width - len(codes))))
        for method, run, codes in rows
    ))
