"""
Command-line entry point: ``semloc <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into one bundle
directory (``--out``, default ``$SEMLOC_OUTPUT_ROOT/<command>``).
"""
import argparse
import csv
import dataclasses
import hashlib
import importlib.metadata
import json
import logging
import os
import platform
import sys
import typing
from xml.etree import ElementTree

import numpy as np

from semloc.attribution import ATTRIBUTION_COLUMNS, EXPLAINERS, AttributionResult, \
    PlacePair, exact_shapley, explain, object_importance, smoothgrad, write_attributions
from semloc.config import default_output_root, load_config
from semloc.encoder import Encoder, ModelConfig, load_checkpoint, save_checkpoint
from semloc.exceptions import OutputValidationError, SemlocError, with_context
from semloc.introspection import RANKING_METHODS, attention_performance_correlation, \
    bootstrap_charact_lower, budget_grid, build_pairs, charact, class_ablation, \
    fidelity_curves, frequency_importance, jsd_shifts, kendall_tau, \
    mean_class_attribution, rank_classes, ranking_scores, sample_places, \
    write_charact_table, write_class_ablation, write_correlation, \
    write_fidelity_curves, write_jsd_table, write_rankings
from semloc.metrics import EVAL_COLUMNS, evaluate, write_eval_reports, write_similarity_csv
from semloc.plots import plot_correlation, plot_fidelity, plot_floor_plan, \
    plot_object_importance, plot_similarity
from semloc.scene_graph import DatasetSplit, SceneGraph, SyntheticConfig, \
    build_dataset, class_counts, generate_synthetic, load_scene, save_scene
from semloc.training import ABLATION_COLUMNS, LOSSES, TRAIN_COLUMNS, TrainConfig, \
    architecture_grid, bow_place_similarity, place_similarity, run_ablation_grid, \
    train, write_ablation_table, write_train_report

__all__ = [
    'Bundle',
    'REQUIRED_COLUMNS',
    'RunConfig',
    'build_parser',
    'main',
]

log = logging.getLogger(__name__)

JSD_EXPLAINERS = ('saliency', 'ig', 'shapley', 'attention')
FIDELITY_EXPLAINERS = ('saliency', 'ig', 'shapley', 'attention', 'random')
EXPLAIN_METHODS = (*sorted(EXPLAINERS), 'shapley_exact', 'smoothgrad_ig',
    'smoothgrad_saliency')

VERSIONED_DISTRIBUTIONS = ('semloc', 'numpy', 'scipy', 'scikit-learn', 'matplotlib')

MANIFEST = 'manifest.json'

REQUIRED_COLUMNS: typing.Dict[str, typing.Tuple[str, ...]] = {
    'ablation_table.csv': ABLATION_COLUMNS,
    'attributions.csv': ATTRIBUTION_COLUMNS,
    'charact.csv': ('explainer', 'rho', 'charact'),
    'class_ablation.csv': ('label', 'code', 'drop', 'normalised_drop'),
    'correlation.csv': ('label', 'normalised_drop', 'normalised_attention_jsd'),
    'eval.csv': EVAL_COLUMNS,
    'fidelity_curves.csv': ('explainer', 'rho', 'fid_plus', 'fid_minus', 'charact'),
    'jsd.csv': ('explainer', 'label', 'jsd', 'normalised_jsd'),
    'rank_agreement.csv': ('method', 'run', 'kendall_tau_vs_ablation'),
    'rankings.csv': ('method', 'run', '1st'),
    'separation.csv': ('explainer', 'charact', 'lower_bound', 'random_mean'),
    'train_report.csv': TRAIN_COLUMNS,
}
"""
Columns a table must carry, keyed by file name.
"""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """
    Resolved global options for one command invocation.
    """
    command: str
    seed: int
    out: str
    config: typing.Optional[str] = None
    scene: typing.Optional[str] = None
    checkpoint: typing.Optional[str] = None
    argv: typing.Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ('config', 'scene', 'checkpoint'):
            path = getattr(self, name)
            if path is not None and not os.path.isfile(path):
                raise with_context(
                    FileNotFoundError(f'No such {name} file: {path}'),
                    context={'option': name, 'path': path},
                )

        os.makedirs(self.out, exist_ok=True)
        if not os.access(self.out, os.W_OK):
            raise with_context(
                PermissionError(f'Output directory is not writable: {self.out}'),
                context={'path': self.out},
            )

    @classmethod
    def from_args(cls, args: argparse.Namespace, argv: typing.Sequence[str]) \
            -> 'RunConfig':
        return cls(
            command=args.command,
            seed=args.seed,
            out=args.out or os.path.join(default_output_root(), args.command),
            config=args.config,
            scene=getattr(args, 'scene', None),
            checkpoint=getattr(args, 'checkpoint', None),
            argv=tuple(argv),
        )


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def _versions() -> typing.Dict[str, typing.Optional[str]]:
    versions: typing.Dict[str, typing.Optional[str]] = {
        'python': platform.python_version(),
    }
    for dist in VERSIONED_DISTRIBUTIONS:
        try:
            versions[dist] = importlib.metadata.version(dist)
        except importlib.metadata.PackageNotFoundError:
            versions[dist] = None
    return versions


class Bundle:
    """
    Tracks the inputs read and the files written by one command, and writes
    the manifest describing them.
    """

    def __init__(self, run: RunConfig) -> None:
        self.run = run
        self.inputs: typing.Dict[str, str] = {}
        self.outputs: typing.List[str] = []

    def input(self, path: str) -> str:
        self.inputs[path] = _sha256(path)
        return path

    def output(self, name: str) -> str:
        path = os.path.join(self.run.out, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        if name not in self.outputs:
            self.outputs.append(name)
        return path

    def write_manifest(self, seeds: typing.Sequence[int] = ()) -> str:
        manifest = {
            'command': self.run.command,
            'argv': list(self.run.argv),
            'seed': self.run.seed,
            'seeds': list(seeds) or [self.run.seed],
            'versions': _versions(),
            'inputs': dict(sorted(self.inputs.items())),
            'outputs': {
                name: _sha256(os.path.join(self.run.out, name))
                for name in sorted(self.outputs)
            },
        }
        path = os.path.join(self.run.out, MANIFEST)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    def validate(self) -> None:
        """
        Re-reads the manifest and every output it lists, checking digests and
        file formats.

        :raise:
            - :py:class:`OutputValidationError` listing every problem found.
        """
        with open(os.path.join(self.run.out, MANIFEST), encoding='utf-8') as f:
            recorded = json.load(f).get('outputs', {})

        issues = []
        for name in self.outputs:
            path = os.path.join(self.run.out, name)
            if not os.path.isfile(path):
                issues.append({'file': name, 'problem': 'missing'})
                continue
            if recorded.get(name) != _sha256(path):
                issues.append({'file': name, 'problem': 'digest does not match manifest'})
            issues.extend({'file': name, 'problem': p} for p in _check_output(path))

        if issues:
            raise with_context(
                OutputValidationError(f'{len(issues)} problem(s) in the output bundle.'),
                context={'out': self.run.out, 'issues': issues},
            )
        log.debug('Validated %d output(s) in %s.', len(self.outputs), self.run.out)


def _check_table(path: str) -> typing.List[str]:
    with open(path, encoding='utf-8', newline='') as f:
        rows = list(csv.reader(f))
    if not rows:
        return ['table has no header']

    header, problems = rows[0], []
    if not all(header) or len(set(header)) != len(header):
        problems.append('blank or duplicate column names')

    missing = [c for c in REQUIRED_COLUMNS.get(os.path.basename(path), ()) if c not in header]
    if missing:
        problems.append(f'missing columns {missing}')

    ragged = [i for i, row in enumerate(rows[1:], 2) if len(row) != len(header)]
    if ragged:
        problems.append(f'rows {ragged[:5]} do not match the header width')
    return problems


def _check_output(path: str) -> typing.List[str]:
    """
    Format problems in one output file (empty if it reads back cleanly).
    """
    name = os.path.basename(path)
    try:
        if name.endswith('.csv'):
            return _check_table(path)
        if name == 'scene.json':
            load_scene(path)
        elif name == 'checkpoint.json':
            load_checkpoint(path)
        elif name.endswith('.json'):
            with open(path, encoding='utf-8') as f:
                json.load(f)
        elif name.endswith('.svg'):
            if not ElementTree.parse(path).getroot().tag.endswith('svg'):
                return ['not an SVG document']
    except (SemlocError, ValueError, ElementTree.ParseError, UnicodeDecodeError) as e:
        return [f'{type(e).__name__}: {e}']
    return []


# Shared pipeline steps.

def _synthetic_config(args: argparse.Namespace) -> SyntheticConfig:
    return load_config(args.config, SyntheticConfig, section='scene')


def _load_dataset(args: argparse.Namespace, bundle: Bundle) \
        -> typing.Tuple[SceneGraph, DatasetSplit]:
    scene = load_scene(bundle.input(args.scene))
    split = build_dataset(scene, args.seed, _synthetic_config(args).visibility_range,
        radius=args.radius)
    return scene, split


def _load_encoder(args: argparse.Namespace, bundle: Bundle) -> Encoder:
    if args.checkpoint is None:
        raise with_context(
            ValueError(f'The {args.command} command needs --checkpoint.'),
            context={'command': args.command},
        )
    params, taxonomy = load_checkpoint(bundle.input(args.checkpoint))
    return Encoder(params, taxonomy)


def _train_config(args: argparse.Namespace, seed: int) -> TrainConfig:
    return load_config(args.config, TrainConfig, {
        'loss': getattr(args, 'loss', None),
        'temperature': getattr(args, 'temp', None),
        'margin': getattr(args, 'margin', None),
        'epochs': getattr(args, 'epochs', None),
        'seed': seed,
    }, section='train')


def _query_scene(split: DatasetSplit, scene: SceneGraph, variant: str) -> SceneGraph:
    """
    ``eval`` is the held-out traversal, ``map`` the map itself and an integer
    picks a training traversal.
    """
    if variant == 'eval':
        return split.evaluation_queries()[0]
    if variant == 'map':
        return scene
    try:
        return split.query_variants[int(variant)]
    except (ValueError, IndexError):
        raise with_context(
            ValueError(f'Unknown query variant {variant!r}.'),
            context={'variant': variant, 'trainingVariants': len(split.query_variants)},
        ) from None


def _explainer_options(method: str, args: argparse.Namespace, seed: int) \
        -> typing.Dict[str, typing.Any]:
    if method == 'shapley':
        return {'permutations': args.permutations, 'seed': seed}
    if method == 'random':
        return {'seed': seed}
    if method == 'ig':
        return {'steps': args.steps}
    return {}


def _has_attention(encoder: Encoder) -> bool:
    if encoder.params.config.use_gat:
        return True
    log.warning('Model has no attention block; skipping attention.')
    return False


# Commands.

def cmd_generate(args: argparse.Namespace, bundle: Bundle) -> None:
    cfg = load_config(args.config, SyntheticConfig, {'n_objects': args.objects},
        section='scene')
    scene = generate_synthetic(cfg, args.seed)
    save_scene(scene, bundle.output('scene.json'))
    log.info('Generated %d places and %d objects.', len(scene.places), len(scene.objects))


def cmd_train(args: argparse.Namespace, bundle: Bundle) -> None:
    scene, split = _load_dataset(args, bundle)
    model = load_config(args.config, ModelConfig, section='model')
    params, report = train(scene, split, _train_config(args, args.seed), model)

    report.checkpoint = bundle.output('checkpoint.json')
    save_checkpoint(params, scene.taxonomy, report.checkpoint)
    write_train_report(report, bundle.output('train_report.csv'))
    log.info('Best epoch %d of %d.', report.best_epoch, len(report.epochs))


def cmd_eval(args: argparse.Namespace, bundle: Bundle) -> None:
    encoder = _load_encoder(args, bundle)
    scene, split = _load_dataset(args, bundle)

    sim = place_similarity(encoder, scene, split, args.subset)
    reports = {'model': evaluate(sim, split.positives)}
    write_similarity_csv(sim, bundle.output('similarity_model.csv'))
    plot_similarity(sim, bundle.output('similarity_model.svg'), 'learned')

    if args.baseline == 'bow':
        bow = bow_place_similarity(scene, split, args.subset, encoder.hops)
        reports['bow'] = evaluate(bow, split.positives)
        write_similarity_csv(bow, bundle.output('similarity_bow.csv'))
        plot_similarity(bow, bundle.output('similarity_bow.svg'), 'bag of words')

    write_eval_reports(reports, bundle.output('eval.csv'), bundle.output('eval.json'))
    if sim.query_ids:
        plot_floor_plan(scene, sim, sim.query_ids[0], bundle.output('floor_plan.svg'))

    for model, report in reports.items():
        log.info('%s: PR-AUC %.4f, recall@1 %.4f', model, report.pr_auc, report.recall_at_1)


def _explain_one(
        method: str,
        pair: PlacePair,
        encoder: Encoder,
        args: argparse.Namespace,
) -> AttributionResult:
    P, Q = pair
    if method == 'shapley_exact':
        return exact_shapley(P, Q, encoder)
    if method.startswith('smoothgrad_'):
        return smoothgrad(method[len('smoothgrad_'):], P, Q, encoder,
            samples=args.samples, sigma=args.sigma, seed=args.seed)
    return explain(method, P, Q, encoder, **_explainer_options(method, args, args.seed))


def cmd_explain(args: argparse.Namespace, bundle: Bundle) -> None:
    encoder = _load_encoder(args, bundle)
    scene, split = _load_dataset(args, bundle)
    query_scene = _query_scene(split, scene, args.variant)

    places = sample_places(split, 'test', args.pairs, args.seed)
    results = [
        _explain_one(args.method, pair, encoder, args)
        for pair in build_pairs(scene, query_scene, places, encoder.hops)
    ]

    write_attributions(results, encoder.taxonomy, bundle.output('attributions.csv'))
    importance = object_importance(results)
    if importance:
        plot_object_importance(importance, query_scene,
            bundle.output('object_importance.svg'))

    class_scores = mean_class_attribution(results)
    rho = frequency_importance(class_counts(scene), class_scores)
    if rho is not None:
        log.info('Frequency/importance Spearman correlation: %.3f', rho)


def cmd_ablate(args: argparse.Namespace, bundle: Bundle) -> None:
    scene, split = _load_dataset(args, bundle)

    if args.architecture:
        seeds = [args.seed + r for r in range(args.runs)]
        rows = run_ablation_grid(scene, split, architecture_grid(), seeds,
            _train_config(args, args.seed))
        write_ablation_table(rows, bundle.output('ablation_table.csv'))
        return

    encoder = _load_encoder(args, bundle)
    rows = class_ablation(scene, split, encoder,
        queries=_query_scene(split, scene, args.variant))
    write_class_ablation(rows, bundle.output('class_ablation.csv'))


def _parse_rho_grid(text: str) -> typing.Tuple[float, ...]:
    try:
        start, stop, step = (float(v) for v in text.split(':'))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f'expected start:stop:step, got {text!r}',
        ) from None
    if not step > 0.0 or stop < start:
        raise argparse.ArgumentTypeError(f'empty budget grid {text!r}')
    return budget_grid(start, stop, step)


def _write_separation(rows: typing.Sequence[typing.Tuple], path: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(('explainer', 'charact', 'lower_bound', 'random_mean',
            'exceeds_random'))
        writer.writerows(rows)


def cmd_fidelity(args: argparse.Namespace, bundle: Bundle) -> None:
    encoder = _load_encoder(args, bundle)
    scene, split = _load_dataset(args, bundle)
    query_scene = _query_scene(split, scene, args.variant)

    places = sample_places(split, 'test', args.pairs, args.seed)
    pairs = build_pairs(scene, query_scene, places, encoder.hops)
    grid = args.rho_grid

    curves = [
        fidelity_curves(m, pairs, encoder, grid, **_explainer_options(m, args, args.seed))
        for m in FIDELITY_EXPLAINERS
        if m != 'attention' or _has_attention(encoder)
    ]
    weights = {'w_plus': args.w_plus, 'w_minus': args.w_minus}
    scores = [charact(c, args.rho_star, **weights) for c in curves]

    write_fidelity_curves(curves, bundle.output('fidelity_curves.csv'), **weights)
    write_charact_table(scores, bundle.output('charact.csv'))
    plot_fidelity(curves, bundle.output('fidelity.svg'), **weights)

    baseline = float(np.mean([
        charact(
            fidelity_curves('random', pairs, encoder, grid, seed=args.seed + r),
            args.rho_star, **weights,
        ).value
        for r in range(args.random_runs)
    ]))
    separation = []
    for curve, score in zip(curves, scores):
        if curve.explainer == 'random':
            continue
        lower = bootstrap_charact_lower(curve, args.rho_star, seed=args.seed, **weights)
        separation.append((curve.explainer, score.value, lower, baseline,
            int(lower > baseline)))
    _write_separation(separation, bundle.output('separation.csv'))


def cmd_report(args: argparse.Namespace, bundle: Bundle) -> typing.List[int]:
    """
    Class rankings by every method, once per run; each run trains its own
    model unless a checkpoint is given.
    """
    scene, split = _load_dataset(args, bundle)
    query_scene = _query_scene(split, scene, args.variant)
    shared = _load_encoder(args, bundle) if args.checkpoint is not None else None
    model = load_config(args.config, ModelConfig, section='model')
    counts = class_counts(scene)
    seeds = [args.seed + r for r in range(args.runs)]

    rankings, agreement = [], []
    for run, seed in enumerate(seeds):
        if shared is not None:
            encoder = shared
        else:
            params, _ = train(scene, split, _train_config(args, seed), model)
            encoder = Encoder(params, scene.taxonomy)

        ablation = class_ablation(scene, split, encoder, queries=query_scene)
        write_class_ablation(ablation, bundle.output(f'run{run}/class_ablation.csv'))

        places = sample_places(split, 'test', args.pairs, seed)
        shifts = [
            row
            for m in JSD_EXPLAINERS
            if m != 'attention' or _has_attention(encoder)
            for row in jsd_shifts(m, scene, query_scene, places, encoder,
                **_explainer_options(m, args, seed))
        ]
        write_jsd_table(shifts, bundle.output(f'run{run}/jsd.csv'))

        attended = {r.label for r in shifts if r.explainer == 'attention'}
        if len(attended & {r.label for r in ablation}) >= 3:
            correlation = attention_performance_correlation(ablation, shifts)
            write_correlation(correlation, bundle.output(f'run{run}/correlation.csv'))
            plot_correlation(correlation, bundle.output(f'run{run}/correlation.svg'))
            if correlation.defined and correlation.pearson <= 0.0:
                log.warning('Run %d: attention/performance correlation is not positive.',
                    run)

        reference = rank_classes(ranking_scores('ablation', ablation))
        for method in RANKING_METHODS:
            scores = ranking_scores(method, ablation, shifts)
            if not scores:
                continue
            order = rank_classes(scores)
            rankings.append((method, run, [scene.code_of(label) for label in order]))
            common = set(order) & set(reference)
            tau = kendall_tau(
                [label for label in order if label in common],
                [label for label in reference if label in common],
            ) if len(common) > 1 else None
            rho = frequency_importance(counts, scores)
            agreement.append((
                method, run, '' if tau is None else tau, '' if rho is None else rho,
            ))

    write_rankings(rankings, bundle.output('rankings.csv'))
    with open(bundle.output('rank_agreement.csv'), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(('method', 'run', 'kendall_tau_vs_ablation', 'frequency_spearman'))
        writer.writerows(agreement)
    return seeds


# Argument parsing.

def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help='Global random seed.')
    common.add_argument('--out', help='Output bundle directory.')
    common.add_argument('--config', help='JSON config file (flags win over it).')
    common.add_argument(
        '--log-level', default='INFO',
        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'),
    )
    return common


def _model_inputs(parser: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    parser.add_argument('--scene', required=True, help='Scene JSON file.')
    parser.add_argument('--radius', type=float, default=4.0,
        help='Positive matching radius in metres.')
    if checkpoint:
        parser.add_argument('--checkpoint', help='Checkpoint written by train.')


def _training_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--loss', choices=LOSSES)
    parser.add_argument('--temp', type=float, help='InfoNCE temperature.')
    parser.add_argument('--margin', type=float, help='Contrastive or triplet margin.')
    parser.add_argument('--epochs', type=int)


def _analysis_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--pairs', type=int,
        help='Test places to analyse (all of them by default).')
    parser.add_argument('--variant', default='eval',
        help='Query traversal: eval, map, or a training variant index.')
    parser.add_argument('--permutations', type=int, default=200)
    parser.add_argument('--steps', type=int, default=128,
        help='Integrated-gradients path steps.')


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog='semloc',
        description='Semantic localisation on scene graphs, and its explanations.',
    )
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('generate', parents=[common], help='Write a synthetic scene.')
    p.add_argument('--objects', type=int, help='Total object count.')
    p.set_defaults(handler=cmd_generate)

    p = commands.add_parser('train', parents=[common], help='Train the encoder.')
    _model_inputs(p, checkpoint=False)
    _training_options(p)
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('eval', parents=[common], help='Retrieval metrics.')
    _model_inputs(p)
    p.add_argument('--baseline', choices=('bow',))
    p.add_argument('--subset', default='test', choices=('train', 'val', 'test'))
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser('explain', parents=[common], help='Per-object attributions.')
    _model_inputs(p)
    _analysis_options(p)
    p.add_argument('--method', default='ig', choices=EXPLAIN_METHODS)
    p.add_argument('--samples', type=int, default=16, help='SmoothGrad samples.')
    p.add_argument('--sigma', type=float, default=0.1, help='SmoothGrad noise scale.')
    p.set_defaults(handler=cmd_explain)

    p = commands.add_parser('ablate', parents=[common],
        help='Class ablation, or the architecture grid with --architecture.')
    _model_inputs(p)
    _training_options(p)
    p.add_argument('--variant', default='eval')
    p.add_argument('--architecture', action='store_true')
    p.add_argument('--runs', type=int, default=3)
    p.set_defaults(handler=cmd_ablate)

    p = commands.add_parser('fidelity', parents=[common], help='Fidelity curves.')
    _model_inputs(p)
    _analysis_options(p)
    p.add_argument('--rho-grid', type=_parse_rho_grid, default=budget_grid(0.05, 1.0, 0.05),
        help='Budgets as start:stop:step.')
    p.add_argument('--rho-star', type=float, default=0.2)
    p.add_argument('--w-plus', type=float, default=0.5)
    p.add_argument('--w-minus', type=float, default=0.5)
    p.add_argument('--random-runs', type=int, default=20)
    p.set_defaults(handler=cmd_fidelity)

    p = commands.add_parser('report', parents=[common], help='Class rankings per run.')
    _model_inputs(p)
    _training_options(p)
    _analysis_options(p)
    p.add_argument('--runs', type=int, default=3)
    p.set_defaults(handler=cmd_report)

    return parser


_handler: typing.Optional[logging.Handler] = None


def _configure_logging(level: str) -> None:
    global _handler
    logger = logging.getLogger('semloc')
    if _handler is not None:
        logger.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    logger.addHandler(_handler)
    logger.setLevel(level)


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    """
    :return:
        Exit status; 0 only if every output and the manifest were written and
        read back cleanly.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)

    try:
        bundle = Bundle(RunConfig.from_args(args, argv))
        seeds = args.handler(args, bundle)
        bundle.write_manifest(seeds or ())
        bundle.validate()
    except (SemlocError, ValueError, OSError) as e:
        context = getattr(e, 'context', {})
        log.error('%s: %s', type(e).__name__, e, extra={'context': context})
        if context:
            log.error('Context: %s', json.dumps(context, default=str, sort_keys=True))
        return 1

    return 0
