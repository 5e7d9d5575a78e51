import io

import numpy as np
import pandas as pd
import pytest
from pytest import approx, mark

from catalog import (ShowRecord, TestShow as HeldOutShow, build_index, split_holdout,
                     suggest_cutoff, write_shows, write_transactions)
from contentsim import SGDHyperparameters
from copurchase import PairStatistics, WeightFunctionKind, build_graph
from error_handler import ConfigurationError
from evaluation import (ColdStartRecommender, EvaluationSettings, RevenueConfig, SyntheticSpec,
                        best_prefix, evaluate, generate_synthetic, grid_search, optimal_revenue,
                        random_ranking_revenue)
from propagation import AudienceRanking

from conftest import make_transactions

K = WeightFunctionKind


def ranking_of(user_ids):
    return AudienceRanking(np.asarray(user_ids, dtype=object), np.zeros(len(user_ids)))


def reverse_scan(spends, cost):
    """Independent brute force: every prefix, scanned from the longest"""
    best, best_k = 0.0, 0
    for k in range(len(spends), 0, -1):
        total = 0.0
        for s in spends[:k]:
            total += s
        value = total - cost * k
        if value >= best and value > 0:
            best, best_k = value, k
    return best, best_k


def test_worked_example():
    ranking = ranking_of(['u1', 'u2', 'u3'])
    revenue, k_star = optimal_revenue(ranking, {'u1': 10.0, 'u2': 0.0, 'u3': 2.0}, RevenueConfig(0.05))
    assert revenue == approx(11.85)
    assert k_star == 3


def test_zero_spend_means_empty_audience():
    assert optimal_revenue(ranking_of(['a', 'b']), {}) == (0.0, 0)


def test_cost_free_contact():
    ranking = ranking_of(['a', 'b', 'c', 'd'])
    revenue, k_star = optimal_revenue(ranking, {'a': 1.0, 'c': 2.0}, RevenueConfig(0.0))
    assert revenue == 3.0
    assert k_star == 3


def test_negative_cost_rejected():
    with pytest.raises(ConfigurationError):
        RevenueConfig(-0.01)


def test_matches_reverse_scan_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 30))
        spends = np.where(rng.random(n) < 0.3, rng.exponential(5.0, n).round(2), 0.0)
        cost = float(rng.choice([0.0, 0.05, 0.5, 3.0]))
        assert best_prefix(spends, cost) == reverse_scan(list(spends), cost)


def test_adding_a_spender_never_decreases_revenue():
    rng = np.random.default_rng(1)
    for _ in range(300):
        spends = list(np.where(rng.random(15) < 0.3, rng.exponential(5.0, 15), 0.0))
        before, _ = best_prefix(spends, 0.05)
        position = int(rng.integers(0, len(spends) + 1))
        after, _ = best_prefix(spends[:position] + [float(rng.exponential(5.0)) + 0.01]
                               + spends[position:], 0.05)
        assert after >= before - 1e-9


def test_shuffling_below_k_star_never_decreases_revenue():
    rng = np.random.default_rng(2)
    for _ in range(300):
        spends = np.where(rng.random(20) < 0.3, rng.exponential(5.0, 20), 0.0)
        revenue, k_star = best_prefix(spends, 0.05)
        shuffled = np.concatenate([spends[:k_star], rng.permutation(spends[k_star:])])
        assert best_prefix(shuffled, 0.05)[0] >= revenue - 1e-12
        reordered = np.concatenate([rng.permutation(spends[:k_star]), spends[k_star:]])
        assert best_prefix(reordered, 0.05)[0] >= revenue - 1e-9


@pytest.fixture
def lookalike_case():
    """X and Y are bought by two disjoint crowds; the new show copies X's description"""
    purchases = []
    for i in range(6):
        purchases += [(f"x{i}", 'X1'), (f"x{i}", 'X2')]
        purchases += [(f"y{i}", 'Y1'), (f"y{i}", 'Y2')]
    transactions = make_transactions(purchases)
    catalog = {
        'X1': ShowRecord('X1', city='Paris', venue='Olympia', types={'rock'}, stakeholders={'p1'}),
        'X2': ShowRecord('X2', city='Paris', venue='Olympia', types={'rock'}, stakeholders={'p1'}),
        'Y1': ShowRecord('Y1', city='Nice', venue='Acropolis', types={'opera'}, stakeholders={'p2'}),
        'Y2': ShowRecord('Y2', city='Nice', venue='Acropolis', types={'opera'}, stakeholders={'p2'}),
    }
    new = ShowRecord('NEW', city='Paris', venue='Olympia', types={'rock'}, stakeholders={'p1'})
    test_show = HeldOutShow('NEW', {f"x{i}": 10.0 for i in range(6)}, new)
    return build_index(transactions), catalog, test_show


def test_lookalike_show_reaches_its_crowd(lookalike_case):
    index, catalog, test_show = lookalike_case
    settings = EvaluationSettings(hyper=SGDHyperparameters(epochs=200))
    report = evaluate(index, catalog, [test_show], K.JACCARD, 2, settings)
    outcome = report.per_show[0]
    assert not outcome.failed
    assert outcome.k_star == 6
    assert outcome.revenue == approx(6 * 10.0 - 0.05 * 6)
    assert report.mean_revenue == outcome.revenue


def test_evaluate_without_test_shows(lookalike_case):
    index, catalog, _ = lookalike_case
    with pytest.raises(ConfigurationError):
        evaluate(index, catalog, [], K.JACCARD, 1)


def test_failed_show_is_reported_not_averaged(lookalike_case):
    index, catalog, test_show = lookalike_case
    clash = HeldOutShow('X1', {'x0': 10.0}, catalog['X1'])
    report = evaluate(index, catalog, [test_show, clash], K.JACCARD, 1)
    assert report.failed_shows == ['X1']
    assert report.evaluated_count == 1
    assert report.mean_revenue == report.revenue_of('NEW')
    assert 'ShowConflictError' in report.to_dict()['per_show'][1]['error']


@pytest.fixture(scope='module')
def synthetic_split():
    dataset = generate_synthetic(SyntheticSpec(num_users=600, num_shows=60, num_communities=3,
                                               feature_noise=0.1, seed=5))
    cutoff = suggest_cutoff(dataset.transactions, test_fraction=0.2)
    return split_holdout(dataset.transactions, dataset.catalog, cutoff, test_sample_size=8,
                         sample_seed=1)


def test_evaluate_is_deterministic(synthetic_split):
    split = synthetic_split
    settings = EvaluationSettings(threads=2)
    first = evaluate(split.train_index, split.catalog, split.test_shows, K.MDW_ASYM, 2, settings)
    second = evaluate(split.train_index, split.catalog, split.test_shows, K.MDW_ASYM, 2, settings)
    assert first.to_dict() == second.to_dict()
    revenues = [o.revenue for o in first.per_show if not o.failed]
    assert first.mean_revenue == sum(revenues) / len(revenues)
    assert [o.show_id for o in first.per_show] == sorted(o.show_id for o in first.per_show)


def test_report_json(tmp_path, synthetic_split):
    split = synthetic_split
    report = evaluate(split.train_index, split.catalog, split.test_shows, K.JACCARD, 1,
                      fingerprint='cafe')
    path = tmp_path / 'report.json'
    report.save_json(str(path))
    import json
    payload = json.loads(path.read_text())
    assert set(payload) >= {'per_show', 'mean_revenue', 'config'}
    assert payload['config']['fingerprint'] == 'cafe'
    assert payload['config']['weight_function_kind'] == 'Jaccard'
    assert set(payload['per_show'][0]) >= {'show_id', 'revenue', 'k_star'}


def test_grid_single_cell_equals_evaluate(synthetic_split):
    split = synthetic_split
    result = grid_search(split.train_index, split.catalog, split.test_shows, [1], [K.JACCARD])
    report = evaluate(split.train_index, split.catalog, split.test_shows, K.JACCARD, 1)
    assert result.matrix.shape == (1, 1)
    assert result.matrix.loc[1, 'Jaccard'] == report.mean_revenue


def test_grid_shares_training_across_lengths(synthetic_split):
    split = synthetic_split
    kinds = [K.JACCARD, K.MDW_ASYM]
    result = grid_search(split.train_index, split.catalog, split.test_shows, [1, 2, 3], kinds)
    assert list(result.matrix.index) == [1, 2, 3]
    assert list(result.matrix.columns) == ['Jaccard', 'MDW-asym']
    for l in (1, 2, 3):
        single = evaluate(split.train_index, split.catalog, split.test_shows, K.MDW_ASYM, l)
        assert result.matrix.loc[l, 'MDW-asym'] == single.mean_revenue
    l, kind, value = result.best()
    assert value == result.matrix.max().max()


def test_grid_tsv(tmp_path, synthetic_split):
    split = synthetic_split
    result = grid_search(split.train_index, split.catalog, split.test_shows, [1, 2],
                         [K.JACCARD, K.NBI])
    path = tmp_path / 'grid.tsv'
    result.save_tsv(str(path), fingerprint='abc')
    frame = pd.read_csv(path, sep='\t', comment='#', index_col='l',
                        float_precision='round_trip')
    assert frame.shape == (2, 2)
    assert frame.loc[2, 'NBI'] == result.matrix.loc[2, 'NBI']


def test_grid_needs_cells(synthetic_split):
    split = synthetic_split
    with pytest.raises(ConfigurationError):
        grid_search(split.train_index, split.catalog, split.test_shows, [], [K.JACCARD])


def test_random_baseline_is_seeded(synthetic_split):
    split = synthetic_split
    first = random_ranking_revenue(split.train_index, split.test_shows, rounds=5, seed=3)
    assert first == random_ranking_revenue(split.train_index, split.test_shows, rounds=5, seed=3)
    assert first >= 0.0


def test_recommender_ranks_every_training_user(synthetic_split):
    split = synthetic_split
    recommender = ColdStartRecommender(K.NBI).fit(split.train_index, split.catalog)
    ranking = recommender.rank_audience(split.test_shows[0].record, 2)
    assert sorted(ranking.user_ids) == sorted(split.train_index.user_ids)
    assert recommender.model_summary()['weight_function_kind'] == 'NBI'


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_users=200, num_shows=30, seed=7)
    outputs = []
    for _ in range(2):
        dataset = generate_synthetic(spec)
        transactions, shows = io.StringIO(), io.StringIO()
        write_transactions(dataset.transactions, transactions)
        write_shows(dataset.catalog, shows)
        outputs.append((transactions.getvalue(), shows.getvalue()))
    assert outputs[0] == outputs[1]
    assert generate_synthetic(SyntheticSpec(num_users=200, num_shows=30, seed=8)).transactions \
        != generate_synthetic(spec).transactions


def test_synthetic_without_users():
    dataset = generate_synthetic(SyntheticSpec(num_users=0, num_shows=10, num_communities=2))
    assert dataset.transactions == []
    assert len(dataset.catalog) == 10


def test_synthetic_rejects_too_many_communities():
    with pytest.raises(ValueError):
        SyntheticSpec(num_shows=3, num_communities=4)


def test_planted_communities_show_in_jaccard_weights(small_synthetic):
    dataset = small_synthetic
    index = build_index(dataset.transactions)
    stats = PairStatistics(index)
    rows, cols = stats.candidate_positions()
    weights = stats.evaluate(K.JACCARD, rows, cols)
    community = np.array([dataset.show_communities[s] for s in index.show_ids])
    same = community[rows] == community[cols]
    assert weights[same].mean() > weights[~same].mean()


def test_noise_free_shows_share_community_features(small_synthetic):
    by_community = {}
    for show_id, record in small_synthetic.catalog.items():
        by_community.setdefault(small_synthetic.show_communities[show_id], set()).add(record.city)
    assert all(len(cities) == 1 for cities in by_community.values())


@mark.slow
def test_every_kind_beats_random_rankings():
    dataset = generate_synthetic(SyntheticSpec(num_users=5000, num_shows=500, num_communities=4,
                                               feature_noise=0.1, seed=0))
    cutoff = suggest_cutoff(dataset.transactions, test_fraction=0.2)
    split = split_holdout(dataset.transactions, dataset.catalog, cutoff)
    result = grid_search(split.train_index, split.catalog, split.test_shows, range(1, 6), list(K),
                         EvaluationSettings(threads=4))
    assert result.matrix.shape == (5, 7)
    assert not result.matrix.isna().any().any()
    baseline = random_ranking_revenue(split.train_index, split.test_shows, rounds=100, seed=0)
    for kind in K:
        _, best = result.best_length(kind)
        assert best > baseline, kind.label
