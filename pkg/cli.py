#!/usr/bin/env python3
"""
Command-line entry point for the Cold-Start Audience Recommender

    python cli.py [--config FILE] [--threads N] [--log-level LEVEL] <command> ...

Commands: ingest, build-graph, train-model, predict, evaluate, grid-search,
synth. Every command prints a one-line JSON summary on stdout; diagnostics go
to stderr.
"""

import os
import sys
import json
import argparse
import logging
from dataclasses import asdict
from datetime import timezone
from typing import Dict, List, Optional

from dateutil import parser as date_parser

from cache_manager import CacheManager
from catalog import (InteractionIndex, ShowRecord, TransactionFormat, build_index,
                     ingest_transactions, load_shows, split_holdout, suggest_cutoff,
                     write_shows, write_transactions)
from config import FORMAT_VERSIONS, Config, __version__
from contentsim import LinearModel, assemble_training_set, train_sgd
from copurchase import ItemGraph, WeightFunctionKind, build_graph
from error_handler import ConfigurationError, InputFormatError, error_handler, handle_cli_errors
from evaluation import (ColdStartRecommender, EvaluationSettings, SyntheticSpec, evaluate,
                        generate_synthetic, grid_search, random_ranking_revenue)
from performance_monitor import performance_monitor

logger = logging.getLogger(__name__)


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest=dest, default=default, nargs=0, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        formats = " ".join(f"{name}={version}" for name, version in sorted(FORMAT_VERSIONS.items()))
        sys.stdout.write(f"coldstart {__version__} ({formats})\n")
        parser.exit()


def parse_lengths(text: str) -> List[int]:
    """'2', '1..5' or '1,2,4'"""
    text = str(text).strip()
    try:
        if '..' in text:
            low, high = (int(part) for part in text.split('..', 1))
            lengths = list(range(low, high + 1))
        else:
            lengths = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise ConfigurationError(f"invalid propagation lengths: {text!r}", module='cli')
    if not lengths or min(lengths) < 1:
        raise ConfigurationError(f"propagation lengths must be >= 1: {text!r}", module='cli')
    return lengths


def parse_cutoff(text: str) -> int:
    """UTC seconds, or any date dateutil understands (naive dates are UTC)"""
    text = str(text).strip()
    if text.lstrip('-').isdigit():
        return int(text)
    try:
        moment = date_parser.parse(text)
    except (ValueError, OverflowError) as e:
        raise ConfigurationError(f"invalid cutoff {text!r}: {e}", module='cli')
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='coldstart',
                                     description='Rank the likely audience of a brand-new show')
    parser.add_argument('--config', help='key-value config file (group.key=value)')
    parser.add_argument('--threads', type=int, help='worker threads (default: all cores)')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--version', action=_VersionAction, help='print version and format tags')
    commands = parser.add_subparsers(dest='command', required=True)

    def with_transactions(sub):
        sub.add_argument('--transactions', help='transaction CSV')
        sub.add_argument('--delimiter', default=',')
        sub.add_argument('--cache-dir', help='index cache directory')

    sub = commands.add_parser('ingest', help='validate transactions and cache the index')
    with_transactions(sub)

    sub = commands.add_parser('build-graph', help='build the collaborative network')
    with_transactions(sub)
    sub.add_argument('--kind', help='weight function, e.g. MDW-asym')
    sub.add_argument('--out', help='graph TSV to write')

    sub = commands.add_parser('train-model', help='fit the content-to-weight model')
    with_transactions(sub)
    sub.add_argument('--shows', help='show descriptions (JSON lines)')
    sub.add_argument('--graph', help='graph TSV built from the same transactions')
    sub.add_argument('--out', help='model JSON to write')

    sub = commands.add_parser('predict', help='rank the audience of a new show')
    with_transactions(sub)
    sub.add_argument('--show', required=True, help='JSON description of the new show')
    sub.add_argument('--shows', help='descriptions of the existing shows (JSON lines)')
    sub.add_argument('--graph', help='graph TSV')
    sub.add_argument('--model', help='model JSON')
    sub.add_argument('--l', type=int, help='propagation length')
    sub.add_argument('--top', help='audience CSV to write')
    sub.add_argument('--limit', type=int, help='keep only the first N users')

    for name, help_text in (('evaluate', 'holdout evaluation of one configuration'),
                            ('grid-search', 'revenue for every (l, weight function) pair')):
        sub = commands.add_parser(name, help=help_text)
        with_transactions(sub)
        sub.add_argument('--shows', help='show descriptions (JSON lines)')
        sub.add_argument('--cutoff', help='last training timestamp or date')
        sub.add_argument('--test-sample-size', type=int)
        sub.add_argument('--out', help='output file')
        if name == 'evaluate':
            sub.add_argument('--kind')
            sub.add_argument('--l', type=int)
        else:
            sub.add_argument('--l', dest='lengths', help="lengths, e.g. '1..5'")
            sub.add_argument('--kinds', help="'all' or a comma list")
            sub.add_argument('--report', help='per-cell JSON report to write')
            sub.add_argument('--baseline', action='store_true',
                             help='also compute the random-ranking baseline')

    sub = commands.add_parser('synth', help='generate a planted-community dataset')
    sub.add_argument('--out-dir', help='directory for transactions.csv and shows.jsonl')
    sub.add_argument('--seed', type=int)
    sub.add_argument('--users', type=int)
    sub.add_argument('--shows', type=int)
    sub.add_argument('--communities', type=int)
    sub.add_argument('--noise', type=float)
    return parser


# argparse dest -> config key
_OVERRIDES = {
    'threads': 'runtime.threads',
    'log_level': 'runtime.log_level',
    'transactions': 'paths.transactions',
    'cache_dir': 'paths.cache_dir',
    'graph': 'paths.graph',
    'model': 'paths.model',
    'kind': 'graph.kind',
    'l': 'propagation.length',
    'cutoff': 'evaluation.cutoff',
    'test_sample_size': 'evaluation.test_sample_size',
    'lengths': 'evaluation.grid_lengths',
    'kinds': 'evaluation.grid_kinds',
}

_SYNTH_OVERRIDES = {
    'seed': 'seeds.synthetic',
    'users': 'synthetic.num_users',
    'shows': 'synthetic.num_shows',
    'communities': 'synthetic.num_communities',
    'noise': 'synthetic.feature_noise',
}


def resolve_config(args: argparse.Namespace) -> Config:
    """Defaults, then environment, then --config, then flags"""
    config = Config()
    if args.config:
        config.load_file(args.config)
    mapping = dict(_OVERRIDES)
    if args.command == 'synth':
        mapping.update(_SYNTH_OVERRIDES)
    elif isinstance(getattr(args, 'shows', None), str):
        mapping['shows'] = 'paths.shows'
    config.apply_overrides({key: getattr(args, dest) for dest, key in mapping.items()
                            if hasattr(args, dest)})
    return config.resolve()


def _require(value: Optional[str], what: str) -> str:
    if not value:
        raise ConfigurationError(f"missing {what}", module='cli')
    return value


def _output_path(explicit: Optional[str], config: Config, default_name: str) -> str:
    path = explicit or os.path.join(config.paths['output_dir'], default_name)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return path


def _ingest(config: Config, args):
    path = _require(config.paths['transactions'], 'transactions file (--transactions)')
    return ingest_transactions(path, TransactionFormat(delimiter=args.delimiter))


def _load_index(config: Config, args) -> InteractionIndex:
    path = _require(config.paths['transactions'], 'transactions file (--transactions)')
    def builder():
        return build_index(_ingest(config, args).transactions)

    if config.paths['cache_dir']:
        return CacheManager(config.paths['cache_dir']).get_or_build(path, builder, args.delimiter)
    return builder()


def _load_catalog(config: Config):
    path = config.paths['shows']
    if not path:
        error_handler.log_warning("no show descriptions; every category is treated as missing")
        return {}
    return load_shows(path)


def _load_graph(config: Config) -> ItemGraph:
    with open(_require(config.paths['graph'], 'graph file (--graph)'), 'r', encoding='utf-8') as f:
        graph = ItemGraph.load_tsv(f)
    if graph.kind is None:
        graph.kind = WeightFunctionKind.parse(config.graph['kind'])
    return graph


def _holdout(config: Config, args):
    transactions = _ingest(config, args).transactions
    catalog = _load_catalog(config)
    cutoff = config.evaluation['cutoff']
    cutoff = parse_cutoff(cutoff) if cutoff is not None else suggest_cutoff(transactions)
    return split_holdout(transactions, catalog, cutoff,
                         test_sample_size=config.evaluation['test_sample_size'],
                         sample_seed=config.get_seed('test_sample'))


def cmd_ingest(args, config: Config) -> Dict:
    result = _ingest(config, args)
    index = build_index(result.transactions)
    index.check_invariants()
    cached = False
    if config.paths['cache_dir']:
        cached = CacheManager(config.paths['cache_dir']).set_index(
            config.paths['transactions'], index, args.delimiter)
    return {'transactions': len(result.transactions), 'malformed': result.malformed_count,
            'users': index.user_count, 'shows': index.show_count, 'cached': cached}


def cmd_build_graph(args, config: Config) -> Dict:
    index = _load_index(config, args)
    kind = WeightFunctionKind.parse(config.graph['kind'])
    graph = build_graph(index, kind, threads=config.runtime['threads'])
    out = _output_path(args.out, config, 'graph.tsv')
    with open(out, 'w', encoding='utf-8') as f:
        graph.save_tsv(f, config.fingerprint())
    return {'graph': out, 'kind': kind.label, 'nodes': graph.node_count, 'edges': graph.edge_count}


def cmd_train_model(args, config: Config) -> Dict:
    index = _load_index(config, args)
    graph = _load_graph(config)
    settings = EvaluationSettings.from_config(config)
    training_set = assemble_training_set(index, graph, graph.kind, settings.negative_seed,
                                         _load_catalog(config))
    model = train_sgd(training_set, settings.hyper)
    out = _output_path(args.out, config, 'model.json')
    model.save_json(out, config.fingerprint())
    return {'model': out, 'kind': graph.kind.label, 'rows': len(training_set),
            'final_mse': model.final_mse}


def cmd_predict(args, config: Config) -> Dict:
    try:
        with open(args.show, 'r', encoding='utf-8') as f:
            record = ShowRecord.from_json_dict(json.load(f))
    except (ValueError, KeyError, TypeError) as e:
        raise InputFormatError(f"invalid show description {args.show}: {e}")
    index = _load_index(config, args)
    graph = _load_graph(config)
    model = LinearModel.load_json(_require(config.paths['model'], 'model file (--model)'))
    settings = EvaluationSettings.from_config(config)
    recommender = ColdStartRecommender(graph.kind, settings).attach(
        index, _load_catalog(config), graph, model)
    l = config.propagation['length']
    ranking = recommender.rank_audience(record, l)
    out = _output_path(args.top, config, 'audience.csv')
    ranking.save_csv(out, config.fingerprint(), args.limit)
    top = ranking.top(1)
    return {'audience': out, 'show_id': record.show_id, 'l': l, 'users': len(ranking),
            'top_user': top[0][0] if top else None}


def cmd_evaluate(args, config: Config) -> Dict:
    split = _holdout(config, args)
    kind = WeightFunctionKind.parse(config.graph['kind'])
    l = config.propagation['length']
    report = evaluate(split.train_index, split.catalog, split.test_shows, kind, l,
                      EvaluationSettings.from_config(config), fingerprint=config.fingerprint())
    report.config['cutoff'] = split.cutoff
    out = _output_path(args.out, config, 'report.json')
    report.save_json(out)
    return {'report': out, 'kind': kind.label, 'l': l, 'mean_revenue': report.mean_revenue,
            'test_shows': len(report.per_show), 'failed': len(report.failed_shows)}


def cmd_grid_search(args, config: Config) -> Dict:
    split = _holdout(config, args)
    lengths = parse_lengths(config.evaluation['grid_lengths'])
    kinds = WeightFunctionKind.parse_list(config.evaluation['grid_kinds'])
    result = grid_search(split.train_index, split.catalog, split.test_shows, lengths, kinds,
                         EvaluationSettings.from_config(config), fingerprint=config.fingerprint())
    out = _output_path(args.out, config, 'grid.tsv')
    result.save_tsv(out, config.fingerprint())
    summary = {'matrix': out, 'shape': list(result.matrix.shape), 'test_shows': len(split.test_shows)}
    if args.report:
        result.save_json(_output_path(args.report, config, 'grid.json'))
        summary['report'] = args.report
    best_l, best_kind, best_revenue = result.best()
    summary['best'] = {'l': best_l, 'kind': best_kind, 'mean_revenue': best_revenue}
    error_handler.log_info("best grid cell", summary['best'])
    if args.baseline:
        summary['random_baseline'] = random_ranking_revenue(
            split.train_index, split.test_shows, config.evaluation['baseline_rounds'],
            config.get_seed('baseline'), EvaluationSettings.from_config(config).revenue)
    return summary


def cmd_synth(args, config: Config) -> Dict:
    try:
        spec = SyntheticSpec.from_config(config)
    except ValueError as e:
        raise ConfigurationError(str(e), module='evaluation')
    dataset = generate_synthetic(spec)
    out_dir = args.out_dir or config.paths['output_dir']
    os.makedirs(out_dir, exist_ok=True)
    transactions_path = os.path.join(out_dir, 'transactions.csv')
    shows_path = os.path.join(out_dir, 'shows.jsonl')
    manifest_path = os.path.join(out_dir, 'synth_manifest.json')
    with open(transactions_path, 'w', encoding='utf-8', newline='') as f:
        write_transactions(dataset.transactions, f)
    write_shows(dataset.catalog, shows_path)
    manifest = {
        'config': config.fingerprint(),
        'spec': asdict(spec),
        'transactions': len(dataset.transactions),
        'show_communities': dataset.show_communities,
        'user_communities': dataset.user_communities,
    }
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    return {'transactions': transactions_path, 'shows': shows_path, 'manifest': manifest_path,
            'rows': len(dataset.transactions)}


COMMANDS = {
    'ingest': cmd_ingest,
    'build-graph': cmd_build_graph,
    'train-model': cmd_train_model,
    'predict': cmd_predict,
    'evaluate': cmd_evaluate,
    'grid-search': cmd_grid_search,
    'synth': cmd_synth,
}


@handle_cli_errors
def run_command(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit status"""
    args = build_parser().parse_args(argv)
    error_handler.setup_logging(args.log_level or 'INFO')
    config = resolve_config(args)
    error_handler.setup_logging(config.runtime['log_level'])
    logger.debug("resolved configuration %s", json.dumps(config.as_dict(), sort_keys=True))
    summary = COMMANDS[args.command](args, config)
    summary = {'command': args.command, 'config': config.fingerprint(), **summary}
    print(json.dumps(summary, sort_keys=True, default=str))
    performance_monitor.log_performance_summary()
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
