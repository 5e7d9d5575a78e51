import io
import math
from collections import defaultdict
from fractions import Fraction

import numpy as np
import pytest
from pytest import approx

from catalog import build_index
from copurchase import (ItemGraph, PairStatistics, WeightFunctionKind, build_graph,
                        candidate_pairs, cooccurrence_counts, weigh_pairs, weight)
from error_handler import InputFormatError, UnknownShowError

from conftest import make_transactions, random_transactions

K = WeightFunctionKind


def naive_weights(transactions, kind):
    """All-pairs evaluation straight from buyer sets"""
    buyers = defaultdict(set)
    shows_of = defaultdict(set)
    for t in transactions:
        buyers[t.show_id].add(t.user_id)
        shows_of[t.user_id].add(t.show_id)
    n_shows = len(buyers)
    degree_sum = sum(len(s) for s in shows_of.values())
    result = {}
    for a in sorted(buyers):
        for b in sorted(buyers):
            if a == b:
                continue
            common = buyers[a] & buyers[b]
            if not common:
                continue
            n, ka, kb = len(common), len(buyers[a]), len(buyers[b])
            if kind is K.JACCARD:
                w = n / len(buyers[a] | buyers[b])
            elif kind is K.JACCARD_ASYM:
                w = n / ka
            elif kind is K.NBI:
                w = sum(1 / len(shows_of[u]) for u in common) / ka
            elif kind is K.MDW:
                w = sum(1 / (len(shows_of[u]) - 1) for u in common) / max(ka, kb)
            elif kind is K.MDW_ASYM:
                w = sum(1 / (len(shows_of[u]) - 1) for u in common) / ka
            elif kind is K.BP:
                var = ka * (1 - ka / n_shows) * kb * (1 - kb / n_shows)
                w = 0.0 if var <= 0 else (n - ka * kb / n_shows) / math.sqrt(var)
            else:
                # exact rationals so ties with the expectation are true zeros
                p = Fraction(kb, degree_sum)
                expected = sum(1 - (1 - p) ** (len(shows_of[u]) - 1) for u in buyers[a])
                excess = n - expected
                w = float(excess) / math.sqrt(n) if excess > 0 else 0.0
            if w > 0:
                result[(a, b)] = w
    return result


def test_t1_hand_values(t1_index):
    assert weight(K.JACCARD, 'A', 'B', t1_index) == approx(2 / 3, abs=1e-15)
    assert weight(K.JACCARD_ASYM, 'A', 'B', t1_index) == 1.0
    assert weight(K.JACCARD_ASYM, 'B', 'A', t1_index) == approx(2 / 3, abs=1e-15)
    assert weight(K.NBI, 'A', 'B', t1_index) == approx(5 / 12, abs=1e-15)
    assert weight(K.MDW, 'A', 'B', t1_index) == approx(1 / 2, abs=1e-15)
    assert weight(K.MDW_ASYM, 'A', 'B', t1_index) == approx(3 / 4, abs=1e-15)
    assert weight(K.BP, 'A', 'B', t1_index) == approx(0.5 / math.sqrt(0.75), abs=1e-12)
    assert weight(K.AMAZON, 'A', 'B', t1_index) == approx((2 - 63 / 64) / math.sqrt(2), abs=1e-12)


@pytest.mark.parametrize('kind', list(K))
def test_vectorized_matches_scalar_on_t1(t1_index, kind):
    stats = PairStatistics(t1_index)
    rows, cols = stats.candidate_positions()
    values = stats.evaluate(kind, rows, cols)
    ids = t1_index.show_ids
    for r, c, v in zip(rows, cols, values):
        assert v == approx(weight(kind, ids[r], ids[c], t1_index), abs=1e-12)


@pytest.mark.parametrize('kind', list(K))
def test_no_common_buyer_is_zero(t1_index, kind):
    assert weight(kind, 'A', 'D', t1_index) == 0.0
    assert weigh_pairs(t1_index, kind, [0], [3])[0] == 0.0


def test_t1_candidate_pairs(t1_index):
    pairs = set(candidate_pairs(t1_index))
    assert pairs == {('A', 'B'), ('B', 'A'), ('A', 'C'), ('C', 'A'), ('B', 'C'), ('C', 'B')}


def test_single_show_users_have_no_pairs():
    index = build_index(make_transactions([('u1', 'A'), ('u2', 'B'), ('u3', 'A')]))
    assert list(candidate_pairs(index)) == []
    assert build_graph(index, K.JACCARD).edge_count == 0


def test_one_user_three_shows():
    index = build_index(make_transactions([('u1', 'X'), ('u1', 'Y'), ('u1', 'Z')]))
    assert len(list(candidate_pairs(index))) == 6


def test_cooccurrence_counts_t1(t1_index):
    counts = cooccurrence_counts(t1_index).toarray()
    assert counts.tolist() == [
        [0, 2, 1, 0],
        [2, 0, 2, 0],
        [1, 2, 0, 0],
        [0, 0, 0, 0],
    ]


def test_t1_graphs(t1_index):
    assert build_graph(t1_index, K.JACCARD).edge_count == 6
    bp = build_graph(t1_index, K.BP)
    assert bp.weight('A', 'C') == 0.0
    assert ('A', 'C') not in bp.edge_dict()
    assert bp.edge_dict()[('A', 'B')] == approx(0.5 / math.sqrt(0.75))


def test_empty_index_gives_empty_graph():
    index = build_index([])
    graph = build_graph(index, K.MDW_ASYM)
    assert graph.node_count == 0
    assert graph.edge_count == 0


@pytest.mark.parametrize('kind', list(K))
def test_oracle_on_random_indices(kind):
    rng = np.random.default_rng(list(K).index(kind))
    for _ in range(200):
        transactions = random_transactions(rng, max_users=10, max_shows=8)
        graph = build_graph(build_index(transactions), kind)
        expected = naive_weights(transactions, kind)
        actual = graph.edge_dict()
        # positives within rounding of zero may be dropped
        assert set(actual) <= set(expected)
        assert {p for p, w in expected.items() if w > 1e-12} <= set(actual)
        for pair, w in actual.items():
            assert w == approx(expected[pair], rel=1e-12, abs=1e-12)


def test_amazon_zero_excess_stores_no_edge():
    # s1 has four buyers owning two shows each, s3 holds a quarter of all purchases
    # and shares one buyer: expected overlap 4 * (1 - 3/4) is exactly 1
    index = build_index(make_transactions([
        ('u1', 's1'), ('u1', 's3'),
        ('u2', 's1'), ('u2', 's2'),
        ('u3', 's1'), ('u3', 's2'),
        ('u4', 's1'), ('u4', 's2'),
        ('u5', 's3'), ('u6', 's3'), ('u7', 's3'),
        ('u8', 's4'), ('u9', 's4'), ('u10', 's4'),
        ('u11', 's4'), ('u12', 's4'),
    ]))
    assert index.degree_sum == 16
    assert index.show_degree_of('s3') == 4
    assert weight(K.AMAZON, 's1', 's3', index) == 0.0
    assert weigh_pairs(index, K.AMAZON, [index.show_position('s1')],
                       [index.show_position('s3')])[0] == 0.0
    assert ('s1', 's3') not in build_graph(index, K.AMAZON).edge_dict()


def test_identities_on_random_indices():
    rng = np.random.default_rng(5)
    for _ in range(200):
        index = build_index(random_transactions(rng))
        stats = PairStatistics(index)
        rows, cols = stats.candidate_positions()
        if len(rows) == 0:
            continue
        n = stats.evaluate(K.JACCARD_ASYM, rows, cols) * index.show_degree[rows]
        n_back = stats.evaluate(K.JACCARD_ASYM, cols, rows) * index.show_degree[cols]
        common = np.asarray(stats.counts[rows, cols]).ravel()
        np.testing.assert_allclose(n, common, atol=1e-12)
        np.testing.assert_allclose(n_back, common, atol=1e-12)

        mdw = stats.evaluate(K.MDW, rows, cols)
        asym = np.minimum(stats.evaluate(K.MDW_ASYM, rows, cols),
                          stats.evaluate(K.MDW_ASYM, cols, rows))
        np.testing.assert_allclose(mdw, asym, atol=1e-12)

        assert np.all(stats.evaluate(K.MDW_ASYM, rows, cols)
                      >= stats.evaluate(K.NBI, rows, cols) - 1e-12)
        for kind in (K.JACCARD, K.MDW, K.BP):
            np.testing.assert_allclose(stats.evaluate(kind, rows, cols),
                                       stats.evaluate(kind, cols, rows), atol=1e-12)
        for kind in (K.JACCARD, K.JACCARD_ASYM, K.NBI):
            values = stats.evaluate(kind, rows, cols)
            assert np.all((values > 0) & (values <= 1 + 1e-12))


def test_threaded_build_matches_serial():
    rng = np.random.default_rng(8)
    index = build_index(random_transactions(rng, max_users=60, max_shows=30, density=0.2))
    for kind in (K.AMAZON, K.MDW_ASYM):
        serial = build_graph(index, kind, threads=1)
        threaded = build_graph(index, kind, threads=4)
        assert (serial.adjacency != threaded.adjacency).nnz == 0


@pytest.mark.parametrize('kind', list(K))
def test_graph_invariants(kind):
    rng = np.random.default_rng(21)
    index = build_index(random_transactions(rng, max_users=30, max_shows=15))
    assert build_graph(index, kind).check_invariants()


def test_parse_kind_labels():
    assert K.parse('MDW-asym') is K.MDW_ASYM
    assert K.parse('mdw_asym') is K.MDW_ASYM
    assert K.parse('JaccardAsym') is K.JACCARD_ASYM
    assert K.parse_list('all') == list(K)
    assert K.parse_list('NBI, BP') == [K.NBI, K.BP]
    with pytest.raises(ValueError):
        K.parse('cosine')


def test_tsv_round_trip_keeps_isolated_nodes(t1_index):
    graph = build_graph(t1_index, K.MDW_ASYM)
    buffer = io.StringIO()
    graph.save_tsv(buffer, fingerprint='abc')
    text = buffer.getvalue()
    assert text.startswith('# weight_function=MDW-asym\n')
    assert '# node\tD\n' in text
    assert '# config=abc\n' in text
    buffer.seek(0)
    loaded = ItemGraph.load_tsv(buffer)
    assert list(loaded.node_ids) == ['A', 'B', 'C', 'D']
    assert loaded.kind is K.MDW_ASYM
    assert loaded.edge_dict() == graph.edge_dict()


def test_load_tsv_reads_hash_lines_that_are_not_headers():
    text = ("# weight_function=Jaccard\n"
            "# format_version=1\n"
            "#x\tA\t0.5\n"
            "A\t#y\t0.25\n")
    graph = ItemGraph.load_tsv(io.StringIO(text))
    assert graph.edge_dict() == {('#x', 'A'): 0.5, ('A', '#y'): 0.25}
    with pytest.raises(InputFormatError):
        ItemGraph.load_tsv(io.StringIO("# free-form note\n"))


def test_save_tsv_rejects_ids_that_read_back_as_comments():
    index = build_index(make_transactions([('u1', '#1'), ('u1', 'B')]))
    graph = build_graph(index, K.JACCARD)
    with pytest.raises(InputFormatError):
        graph.save_tsv(io.StringIO())


def test_with_node_adds_edges(t1_index):
    graph = build_graph(t1_index, K.JACCARD)
    augmented = graph.with_node('N', {'A': 0.5}, {'B': 0.25})
    assert augmented.node_count == 5
    assert augmented.weight('N', 'A') == 0.5
    assert augmented.weight('B', 'N') == 0.25
    assert augmented.weight('A', 'B') == graph.weight('A', 'B')
    assert not graph.has_node('N')
    with pytest.raises(UnknownShowError):
        graph.position('N')
