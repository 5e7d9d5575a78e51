#!/usr/bin/env python3
"""
Evaluation Module for the Cold-Start Audience Recommender
Temporal holdout evaluation with the optimal-revenue metric, grid search over
propagation length and weight function, a random-ranking baseline, and a
planted-community synthetic data generator.
"""

import json
import math
import logging
import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from catalog import Catalog, InteractionIndex, ShowRecord, TestShow, Transaction
from config import FORMAT_VERSIONS, Config
from contentsim import (FeatureEncoder, InsertionPolicy, LinearModel, SGDHyperparameters,
                        assemble_training_set, insert_new_show, records_for, train_sgd)
from copurchase import ItemGraph, PairStatistics, WeightFunctionKind, build_graph
from error_handler import ColdStartError, ConfigurationError, error_handler
from performance_monitor import performance_monitor
from propagation import AudienceRanking, PropagationState, propagate, rank_users

logger = logging.getLogger(__name__)


def _progress(iterable: Iterable, desc: str, total: Optional[int] = None):
    """tqdm bar on an interactive stderr while INFO logging is on"""
    quiet = not sys.stderr.isatty() or logging.getLogger().getEffectiveLevel() > logging.INFO
    return tqdm(iterable, desc=desc, total=total, disable=quiet, leave=False)


@dataclass(frozen=True)
class RevenueConfig:
    communication_cost: float = 0.05    # euros per contacted user

    def __post_init__(self):
        if not math.isfinite(self.communication_cost) or self.communication_cost < 0:
            raise ConfigurationError("communication_cost must be a finite value >= 0",
                                     module='evaluation')


def best_prefix(spends: np.ndarray, cost: float) -> Tuple[float, int]:
    """Best value of sum(spends[:k]) - cost * k over k in 0..N, smallest k on ties"""
    spends = np.asarray(spends, dtype=np.float64)
    if len(spends) == 0:
        return 0.0, 0
    prefix = np.cumsum(spends) - cost * np.arange(1, len(spends) + 1)
    k = int(np.argmax(prefix))
    if prefix[k] <= 0:
        return 0.0, 0
    return float(prefix[k]), k + 1


def optimal_revenue(ranking: AudienceRanking, truth: Dict[str, float],
                    cfg: Optional[RevenueConfig] = None) -> Tuple[float, int]:
    """
    Revenue of the best audience prefix: spend of the top-k users minus the
    cost of contacting k users. Users absent from truth spend nothing; the
    empty audience is always admissible.
    """
    cfg = cfg or RevenueConfig()
    spends = np.fromiter((truth.get(u, 0.0) for u in ranking.user_ids), dtype=np.float64,
                         count=len(ranking.user_ids))
    return best_prefix(spends, cfg.communication_cost)


@dataclass
class ShowOutcome:
    show_id: str
    revenue: float = 0.0
    k_star: int = 0
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self) -> Dict:
        data = {'show_id': self.show_id, 'revenue': self.revenue, 'k_star': self.k_star}
        if self.error is not None:
            data['error'] = self.error
        return data


@dataclass
class EvaluationReport:
    per_show: List[ShowOutcome]
    mean_revenue: float
    config: Dict = field(default_factory=dict)

    @property
    def failed_shows(self) -> List[str]:
        return [o.show_id for o in self.per_show if o.failed]

    @property
    def evaluated_count(self) -> int:
        return sum(1 for o in self.per_show if not o.failed)

    def revenue_of(self, show_id: str) -> float:
        for outcome in self.per_show:
            if outcome.show_id == show_id:
                return outcome.revenue
        raise KeyError(show_id)

    def to_dict(self) -> Dict:
        return {
            'format_version': FORMAT_VERSIONS['report_json'],
            'per_show': [o.to_dict() for o in self.per_show],
            'mean_revenue': self.mean_revenue if math.isfinite(self.mean_revenue) else None,
            'failed_shows': self.failed_shows,
            'config': self.config,
        }

    def save_json(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')


def _mean(outcomes: Sequence[ShowOutcome]) -> float:
    values = [o.revenue for o in outcomes if not o.failed]
    if not values:
        return float('nan')
    return sum(values) / len(values)


@dataclass(frozen=True)
class EvaluationSettings:
    """Everything besides the weight function and l that shapes a run"""
    hyper: SGDHyperparameters = field(default_factory=SGDHyperparameters)
    policy: InsertionPolicy = field(default_factory=InsertionPolicy)
    revenue: RevenueConfig = field(default_factory=RevenueConfig)
    negative_seed: int = 0
    aggregation: str = 'max'
    threads: int = 1

    @classmethod
    def from_config(cls, config: Config) -> 'EvaluationSettings':
        return cls(
            hyper=SGDHyperparameters(
                learning_rate=config.sgd['learning_rate'],
                epochs=config.sgd['epochs'],
                shuffle_seed=config.get_seed('sgd_shuffle'),
                l2=config.sgd['l2'],
                fit_intercept=config.sgd['fit_intercept'],
            ),
            policy=InsertionPolicy(
                mode=config.insertion['mode'],
                k=config.insertion['top_k'],
                symmetric=config.insertion['symmetric'],
            ),
            revenue=RevenueConfig(config.revenue['communication_cost']),
            negative_seed=config.get_seed('negative_sampling'),
            aggregation=config.propagation['aggregation'],
            threads=config.runtime['threads'],
        )

    def describe(self) -> Dict:
        return {
            'sgd': asdict(self.hyper),
            'insertion': asdict(self.policy),
            'communication_cost': self.revenue.communication_cost,
            'negative_seed': self.negative_seed,
            'aggregation': self.aggregation,
        }


class ColdStartRecommender:
    """
    Trained pipeline for one weight function: the collaborative network of
    the training index and the content model predicting its edge weights.
    A fitted recommender ranks the audience of any number of new shows.
    """

    def __init__(self, kind: WeightFunctionKind, settings: Optional[EvaluationSettings] = None):
        self.kind = WeightFunctionKind.parse(kind)
        self.settings = settings or EvaluationSettings()
        self.index: Optional[InteractionIndex] = None
        self.catalog: Optional[Catalog] = None
        self.graph: Optional[ItemGraph] = None
        self.model: Optional[LinearModel] = None
        self.encoder: Optional[FeatureEncoder] = None

    def fit(self, index: InteractionIndex, catalog: Catalog,
            stats: Optional[PairStatistics] = None) -> 'ColdStartRecommender':
        stats = stats or PairStatistics(index)
        graph = build_graph(index, self.kind, threads=self.settings.threads, stats=stats)
        training_set = assemble_training_set(index, graph, self.kind, self.settings.negative_seed,
                                             catalog, stats=stats)
        model = train_sgd(training_set, self.settings.hyper)
        return self.attach(index, catalog, graph, model)

    def attach(self, index: InteractionIndex, catalog: Catalog, graph: ItemGraph,
               model: LinearModel) -> 'ColdStartRecommender':
        """Use an already built network and model"""
        self.index, self.catalog, self.graph, self.model = index, catalog, graph, model
        self.encoder = FeatureEncoder(records_for(graph.node_ids, catalog))
        return self

    @property
    def is_fitted(self) -> bool:
        return self.graph is not None

    def _require_fitted(self):
        if not self.is_fitted:
            raise ConfigurationError("recommender is not fitted", module='evaluation')

    def propagate_from(self, record: ShowRecord, l: int) -> PropagationState:
        self._require_fitted()
        augmented = insert_new_show(self.graph, self.model, self.catalog, record,
                                    self.settings.policy, self.encoder)
        return propagate(augmented, record.show_id, l)

    def rank_audience(self, record: ShowRecord, l: int) -> AudienceRanking:
        state = self.propagate_from(record, l)
        return rank_users(self.index, state, self.settings.aggregation)

    def model_summary(self) -> Dict:
        self._require_fitted()
        return {
            'weight_function_kind': self.kind.label,
            'edges': self.graph.edge_count,
            'coefficients': self.model.coefficients,
            'intercept': self.model.intercept,
            'final_mse': self.model.final_mse,
            'training_rows': self.model.training_rows,
        }


def _test_record(test_show: TestShow) -> ShowRecord:
    return test_show.record if test_show.record is not None else ShowRecord(test_show.show_id)


def _score_show(recommender: ColdStartRecommender, test_show: TestShow,
                lengths: Sequence[int]) -> List[ShowOutcome]:
    """One outcome per length; a failing show yields failed outcomes"""
    try:
        state = recommender.propagate_from(_test_record(test_show), max(lengths))
        outcomes = []
        for l in lengths:
            ranking = rank_users(recommender.index, state.truncated(l),
                                 recommender.settings.aggregation)
            revenue, k_star = optimal_revenue(ranking, test_show.spend, recommender.settings.revenue)
            outcomes.append(ShowOutcome(test_show.show_id, revenue, k_star))
        return outcomes
    except (ColdStartError, KeyError, ValueError) as e:
        error_handler.log_warning("test show excluded from the mean", {
            'show_id': test_show.show_id,
            'error_type': type(e).__name__,
            'error': str(e)
        })
        return [ShowOutcome(test_show.show_id, error=f"{type(e).__name__}: {e}") for _ in lengths]


def _evaluate_lengths(recommender: ColdStartRecommender, test_shows: Sequence[TestShow],
                      lengths: Sequence[int],
                      fingerprint: Optional[str] = None) -> Dict[int, EvaluationReport]:
    if not test_shows:
        raise ConfigurationError("no test show to evaluate", module='evaluation')
    for l in lengths:
        if l < 1:
            raise ConfigurationError(f"propagation length must be >= 1, got {l}", module='evaluation')

    ordered = sorted(test_shows, key=lambda t: t.show_id)
    threads = max(1, recommender.settings.threads)
    per_show = Parallel(n_jobs=threads, prefer='threads')(
        delayed(_score_show)(recommender, test_show, lengths)
        for test_show in _progress(ordered, f"evaluate {recommender.kind.label}")
    )

    reports = {}
    for column, l in enumerate(lengths):
        outcomes = [row[column] for row in per_show]
        config = {
            'weight_function_kind': recommender.kind.label,
            'propagation_length': l,
            'settings': recommender.settings.describe(),
            'model': {
                'final_mse': recommender.model.final_mse,
                'training_rows': recommender.model.training_rows,
                'seed': recommender.model.seed,
            },
        }
        if fingerprint:
            config['fingerprint'] = fingerprint
        report = EvaluationReport(outcomes, _mean(outcomes), config)
        if report.failed_shows:
            error_handler.log_warning("evaluation finished with failed test shows", {
                'kind': recommender.kind.label,
                'l': l,
                'failed': len(report.failed_shows),
                'evaluated': report.evaluated_count
            })
        reports[l] = report
    return reports


@performance_monitor.stage('evaluate')
def evaluate(train_index: InteractionIndex, catalog: Catalog, test_shows: Sequence[TestShow],
             kind: WeightFunctionKind, l: int, settings: Optional[EvaluationSettings] = None,
             recommender: Optional[ColdStartRecommender] = None,
             fingerprint: Optional[str] = None) -> EvaluationReport:
    """
    Train on the holdout's training side, then insert, propagate, rank and
    score every test show. A pre-fitted recommender skips training.
    """
    if not test_shows:
        raise ConfigurationError("no test show to evaluate", module='evaluation')
    if recommender is None:
        recommender = ColdStartRecommender(kind, settings).fit(train_index, catalog)
    report = _evaluate_lengths(recommender, test_shows, [l], fingerprint)[l]
    logger.info("%s l=%d: mean optimal revenue %.4f over %d shows", recommender.kind.label, l,
                report.mean_revenue, report.evaluated_count)
    return report


@dataclass
class GridSearchResult:
    matrix: pd.DataFrame                                # rows: l, columns: kind labels
    reports: Dict[Tuple[int, str], EvaluationReport]    # (l, kind label) -> report

    def best(self) -> Tuple[int, str, float]:
        values = self.matrix.to_numpy(dtype=np.float64)
        i, j = np.unravel_index(np.nanargmax(values), values.shape)
        return int(self.matrix.index[i]), self.matrix.columns[j], float(values[i, j])

    def best_length(self, kind: WeightFunctionKind) -> Tuple[int, float]:
        column = self.matrix[WeightFunctionKind.parse(kind).label]
        return int(column.idxmax()), float(column.max())

    def save_tsv(self, path: str, fingerprint: Optional[str] = None):
        """l rows, one column per weight function, values at 17 significant digits"""
        with open(path, 'w', encoding='utf-8') as f:
            if fingerprint:
                f.write(f"# config={fingerprint} format_version={FORMAT_VERSIONS['report_json']}\n")
            self.matrix.to_csv(f, sep='\t', float_format='%.17g', lineterminator='\n')

    def save_json(self, path: str):
        payload = {
            'format_version': FORMAT_VERSIONS['report_json'],
            'cells': [
                {'l': l, 'kind': kind, **report.to_dict()}
                for (l, kind), report in sorted(self.reports.items())
            ],
        }
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write('\n')


@performance_monitor.stage('grid_search')
def grid_search(train_index: InteractionIndex, catalog: Catalog, test_shows: Sequence[TestShow],
                l_values: Sequence[int], kinds: Sequence[WeightFunctionKind],
                settings: Optional[EvaluationSettings] = None,
                fingerprint: Optional[str] = None) -> GridSearchResult:
    """
    Mean optimal revenue for every (l, kind) cell. Each kind's network and
    model are trained once and shared by all its l values.
    """
    if not l_values or not kinds:
        raise ConfigurationError("grid search needs at least one length and one kind",
                                 module='evaluation')
    kinds = [WeightFunctionKind.parse(k) for k in kinds]
    lengths = list(l_values)
    stats = PairStatistics(train_index)

    matrix = pd.DataFrame(index=pd.Index(lengths, name='l'),
                          columns=[k.label for k in kinds], dtype=np.float64)
    reports = {}
    for kind in kinds:
        recommender = ColdStartRecommender(kind, settings).fit(train_index, catalog, stats=stats)
        for l, report in _evaluate_lengths(recommender, test_shows, lengths, fingerprint).items():
            matrix.loc[l, kind.label] = report.mean_revenue
            reports[(l, kind.label)] = report
        logger.info("grid search %s: %s", kind.label,
                    ", ".join(f"l={l}: {matrix.loc[l, kind.label]:.2f}" for l in lengths))
    return GridSearchResult(matrix, reports)


def random_ranking_revenue(index: InteractionIndex, test_shows: Sequence[TestShow],
                           rounds: int = 100, seed: int = 0,
                           revenue: Optional[RevenueConfig] = None) -> float:
    """Mean optimal revenue of uniformly shuffled rankings of the training users"""
    if not test_shows:
        raise ConfigurationError("no test show to evaluate", module='evaluation')
    if rounds < 1:
        raise ConfigurationError("baseline rounds must be >= 1", module='evaluation')
    revenue = revenue or RevenueConfig()
    rng = np.random.default_rng(seed)
    values = []
    for test_show in sorted(test_shows, key=lambda t: t.show_id):
        spends = np.array([test_show.spend.get(u, 0.0) for u in index.user_ids], dtype=np.float64)
        for _ in range(rounds):
            values.append(best_prefix(spends[rng.permutation(len(spends))],
                                      revenue.communication_cost)[0])
    return sum(values) / len(values)


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 5000
    num_shows: int = 500
    num_communities: int = 4
    feature_noise: float = 0.1
    mean_purchases: float = 4.0         # average shows per user
    activity_sigma: float = 1.0         # lognormal spread of user activity
    popularity_sigma: float = 1.0       # lognormal spread of show popularity
    in_community_rate: float = 0.9
    spend_mean: float = 30.0            # euros per purchase
    spend_sigma: float = 0.5
    seed: int = 0
    start_timestamp: int = 1_500_000_000
    show_spacing: int = 86_400          # seconds between consecutive first sales
    sale_window: int = 30 * 86_400

    def __post_init__(self):
        if self.num_users < 0 or self.num_shows < 1 or self.num_communities < 1:
            raise ValueError("num_users must be >= 0, num_shows and num_communities >= 1")
        if self.num_communities > self.num_shows:
            raise ValueError(f"{self.num_communities} communities cannot be planted "
                             f"in {self.num_shows} shows")
        if not 0.0 <= self.feature_noise <= 1.0 or not 0.0 <= self.in_community_rate <= 1.0:
            raise ValueError("feature_noise and in_community_rate must lie in [0, 1]")
        if self.mean_purchases < 1:
            raise ValueError("mean_purchases must be >= 1")

    @classmethod
    def from_config(cls, config: Config, **overrides) -> 'SyntheticSpec':
        values = dict(config.synthetic)
        values['seed'] = config.get_seed('synthetic')
        values.update(overrides)
        return cls(**values)


@dataclass
class SyntheticDataset:
    transactions: List[Transaction]
    catalog: Catalog
    user_communities: Dict[str, int]
    show_communities: Dict[str, int]
    spec: SyntheticSpec


# tags per community and category
_VENUES_PER_COMMUNITY = 3
_PRODUCERS_PER_COMMUNITY = 5


def _community_record(show_id: str, community: int, first_sale: int, spec: SyntheticSpec,
                      rng: np.random.Generator) -> ShowRecord:
    """Each category keeps the community's value unless noise swaps in another community's"""
    def source() -> int:
        if rng.random() < spec.feature_noise:
            return int(rng.integers(spec.num_communities))
        return community

    city = f"city-{source()}"
    venue_community = source()
    venue = f"venue-{venue_community}-{rng.integers(_VENUES_PER_COMMUNITY)}"
    type_community = source()
    types = {f"type-{type_community}-a", f"type-{type_community}-b"}
    producer_community = source()
    stakeholders = {f"producer-{producer_community}-{rng.integers(_PRODUCERS_PER_COMMUNITY)}"}
    return ShowRecord(show_id, city=city, venue=venue, types=types, stakeholders=stakeholders,
                      first_sale=first_sale)


@performance_monitor.stage('generate_synthetic')
def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """
    Planted-community purchase data. Shows and users belong to communities;
    a show's description follows its community up to feature_noise, and a
    user buys inside their community with probability in_community_rate.
    User activity and show popularity are heavy-tailed.
    """
    rng = np.random.default_rng(spec.seed)
    show_width = len(str(max(spec.num_shows - 1, 0)))
    user_width = len(str(max(spec.num_users - 1, 0)))
    show_ids = [f"show-{j:0{show_width}d}" for j in range(spec.num_shows)]
    user_ids = [f"user-{i:0{user_width}d}" for i in range(spec.num_users)]

    # every community gets at least one show
    show_community = rng.permutation(np.arange(spec.num_shows) % spec.num_communities)
    release_order = rng.permutation(spec.num_shows)
    first_sale = spec.start_timestamp + release_order * spec.show_spacing
    popularity = rng.lognormal(0.0, spec.popularity_sigma, size=spec.num_shows)

    catalog = {
        show_ids[j]: _community_record(show_ids[j], int(show_community[j]), int(first_sale[j]),
                                       spec, rng)
        for j in range(spec.num_shows)
    }

    members = [np.flatnonzero(show_community == c) for c in range(spec.num_communities)]
    user_community = rng.integers(spec.num_communities, size=spec.num_users)
    # mean-one activity so that the average basket stays near mean_purchases
    activity = rng.lognormal(-spec.activity_sigma ** 2 / 2, spec.activity_sigma, size=spec.num_users)
    baskets = 1 + rng.poisson((spec.mean_purchases - 1) * activity)
    spend_mu = math.log(spec.spend_mean) - spec.spend_sigma ** 2 / 2

    def pick(pool: np.ndarray, size: int) -> np.ndarray:
        size = min(size, len(pool))
        if size == 0:
            return pool[:0]
        weights = popularity[pool] / popularity[pool].sum()
        return rng.choice(pool, size=size, replace=False, p=weights)

    everything = np.arange(spec.num_shows)
    transactions = []
    for i, user_id in enumerate(user_ids):
        size = int(min(baskets[i], spec.num_shows))
        inside = int(rng.binomial(size, spec.in_community_rate))
        chosen = pick(members[user_community[i]], inside)
        outside = np.setdiff1d(everything, chosen)
        chosen = np.concatenate([chosen, pick(outside, size - len(chosen))])
        for j in np.sort(chosen):
            amount = round(float(rng.lognormal(spend_mu, spec.spend_sigma)), 2)
            timestamp = int(first_sale[j] + rng.integers(spec.sale_window))
            transactions.append(Transaction(user_id, show_ids[j], amount, timestamp))

    transactions.sort(key=lambda t: (t.timestamp, t.user_id, t.show_id))
    logger.info("generated %d transactions for %d users and %d shows", len(transactions),
                spec.num_users, spec.num_shows)
    return SyntheticDataset(
        transactions=transactions,
        catalog=catalog,
        user_communities={u: int(c) for u, c in zip(user_ids, user_community)},
        show_communities={s: int(c) for s, c in zip(show_ids, show_community)},
        spec=spec,
    )


if __name__ == "__main__":
    from catalog import split_holdout, suggest_cutoff

    error_handler.setup_logging("INFO")
    dataset = generate_synthetic(SyntheticSpec(num_users=800, num_shows=80, seed=1))
    split = split_holdout(dataset.transactions, dataset.catalog,
                          suggest_cutoff(dataset.transactions), test_sample_size=10)
    result = grid_search(split.train_index, split.catalog, split.test_shows, [1, 2, 3],
                         [WeightFunctionKind.JACCARD, WeightFunctionKind.MDW_ASYM])
    print(result.matrix)
    print("random baseline:", random_ranking_revenue(split.train_index, split.test_shows))
