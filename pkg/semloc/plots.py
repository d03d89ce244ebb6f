"""
SVG figures for the analysis bundle.

CSV files are the source of truth; these are renderings of the same data.
"""
import logging
import os
import typing

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from semloc.introspection import Correlation, FidelityCurve, charact_curve
from semloc.metrics import SimilarityMatrix
from semloc.scene_graph import SceneGraph

__all__ = [
    'plot_correlation',
    'plot_fidelity',
    'plot_floor_plan',
    'plot_object_importance',
    'plot_similarity',
]

log = logging.getLogger(__name__)

PathLike = typing.Union[str, os.PathLike]

# Stable element ids and no creation date, so reruns are byte-identical.
matplotlib.rcParams['svg.hashsalt'] = 'semloc'
matplotlib.rcParams['svg.fonttype'] = 'none'


def _save(fig: plt.Figure, path: PathLike) -> None:
    fig.savefig(path, format='svg', bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    log.info('Wrote figure.', extra={'path': str(path)})


def plot_similarity(sim: SimilarityMatrix, path: PathLike, title: str = '') -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(sim.values, cmap='viridis', vmin=-1.0, vmax=1.0,
        aspect='auto', interpolation='nearest')
    fig.colorbar(image, ax=ax, label='cosine similarity')
    ax.set_xlabel('map place')
    ax.set_ylabel('query place')
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_fidelity(
        curves: typing.Sequence[FidelityCurve],
        path: PathLike,
        w_plus: float = 0.5,
        w_minus: float = 0.5,
) -> None:
    """
    Necessity, sufficiency loss and characterisation score against the
    budget, one line per explainer.
    """
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5), sharex=True)
    for curve in curves:
        style = {'label': curve.explainer, 'linestyle': '--' if curve.explainer == 'random' else '-'}
        axes[0].plot(curve.grid, curve.fid_plus, **style)
        axes[1].plot(curve.grid, curve.fid_minus, **style)
        axes[2].plot(curve.grid, charact_curve(curve, w_plus, w_minus), **style)

    for ax, label in zip(axes, ('fidelity+', 'fidelity-', 'characterisation')):
        ax.set_xlabel('budget')
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[2].legend(loc='best')
    _save(fig, path)


def plot_correlation(correlation: Correlation, path: PathLike) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for _, code, drop, shift in correlation.points:
        ax.scatter(drop, shift, color='tab:blue')
        ax.annotate(code, (drop, shift), textcoords='offset points', xytext=(4, 4))

    if correlation.defined:
        x = np.array([p[2] for p in correlation.points])
        y = np.array([p[3] for p in correlation.points])
        slope, intercept = np.polyfit(x, y, 1)
        xs = np.linspace(x.min(), x.max(), 2)
        ax.plot(xs, slope * xs + intercept, color='tab:gray', linestyle=':')
        ax.set_title(f'r = {correlation.pearson:.3f}')
    else:
        ax.set_title('r undefined')

    ax.set_xlabel('normalised PR-AUC drop')
    ax.set_ylabel('normalised attention JSD')
    _save(fig, path)


def plot_object_importance(
        importance: typing.Mapping[int, float],
        scene: SceneGraph,
        path: PathLike,
) -> None:
    """
    One bar per object, grouped and coloured by class.
    """
    objects = sorted((scene.object_index[o] for o in importance),
        key=lambda o: (o.label, o.id))
    labels = [c.label for c in scene.taxonomy]
    cmap = plt.get_cmap('tab10')

    fig, ax = plt.subplots(figsize=(max(6.0, 0.15 * len(objects)), 4))
    ax.bar(
        np.arange(len(objects)),
        [importance[o.id] for o in objects],
        color=[cmap(labels.index(o.label) % 10) for o in objects],
    )
    handles = [plt.Rectangle((0, 0), 1, 1, color=cmap(i % 10)) for i in range(len(labels))]
    ax.legend(handles, [c.code for c in scene.taxonomy], ncol=len(labels), loc='upper right')
    ax.set_xticks([])
    ax.set_xlabel('object')
    ax.set_ylabel('mean normalised importance')
    _save(fig, path)


def plot_floor_plan(
        scene: SceneGraph,
        sim: SimilarityMatrix,
        query_id: int,
        path: PathLike,
) -> None:
    """
    Map places coloured by their similarity to one query; the query's true
    position is starred.
    """
    row = sim.values[sim.query_ids.index(query_id)]
    xy = np.array([(scene.place_index[m].x, scene.place_index[m].y) for m in sim.map_ids])

    fig, ax = plt.subplots(figsize=(7, 6))
    points = ax.scatter(xy[:, 0], xy[:, 1], c=row, cmap='magma', vmin=-1.0, vmax=1.0, s=12)
    if scene.objects:
        ax.scatter([o.x for o in scene.objects], [o.y for o in scene.objects],
            marker='s', s=8, color='tab:cyan', label='objects')
    if query_id in scene.place_index:
        q = scene.place_index[query_id]
        ax.scatter([q.x], [q.y], marker='*', s=180, color='tab:green', label='query')
    fig.colorbar(points, ax=ax, label='cosine similarity')
    ax.set_aspect('equal')
    ax.legend(loc='upper right')
    _save(fig, path)
