import io

import numpy as np
import pytest
from pytest import approx

from catalog import (ShowRecord, TransactionFormat, build_index, ingest_transactions, load_shows,
                     split_holdout, suggest_cutoff, write_shows, write_transactions)
from error_handler import ConfigurationError, InputFormatError, UnknownShowError

from conftest import T1_PURCHASES, make_transactions, random_transactions


def test_t1_degrees(t1_index):
    assert t1_index.show_count == 4
    assert t1_index.user_count == 4
    assert t1_index.degree_sum == 8
    assert [t1_index.show_degree_of(s) for s in 'ABCD'] == [2, 3, 2, 1]
    assert t1_index.user_degree_of('u2') == 3
    assert t1_index.buyers_of('B') == {'u1', 'u2', 'u3'}
    assert t1_index.shows_of('u2') == {'A', 'B', 'C'}
    assert t1_index.check_invariants()


def test_index_ids_sorted(t1_index):
    assert list(t1_index.show_ids) == ['A', 'B', 'C', 'D']
    assert list(t1_index.user_ids) == ['u1', 'u2', 'u3', 'u4']


def test_repeat_purchase_counted_once():
    index = build_index(make_transactions([('u1', 'A'), ('u1', 'A'), ('u2', 'A')]))
    assert index.show_degree_of('A') == 2
    assert index.user_degree_of('u1') == 1
    assert index.degree_sum == 2


def test_unknown_show_is_key_error(t1_index):
    with pytest.raises(UnknownShowError):
        t1_index.show_position('Z')
    with pytest.raises(KeyError):
        t1_index.buyers_of('Z')


def test_degree_sums_agree_on_random_indices():
    rng = np.random.default_rng(11)
    for _ in range(50):
        index = build_index(random_transactions(rng))
        assert int(index.show_degree.sum()) == int(index.user_degree.sum()) == index.degree_sum


def test_ingest_valid_rows():
    text = "user_id,show_id,amount,timestamp\nu1,A,10.5,100\nu2,B,0,101\n"
    result = ingest_transactions(io.StringIO(text))
    assert result.malformed_count == 0
    assert [(t.user_id, t.show_id) for t in result.transactions] == [('u1', 'A'), ('u2', 'B')]
    assert result.transactions[0].amount == approx(10.5)
    assert result.transactions[1].timestamp == 101


def test_ingest_reports_malformed_rows():
    text = ("user_id,show_id,amount,timestamp\n"
            "u1,A,10.5,100\n"
            "u2,,3,101\n"
            "u3,B,-1,102\n"
            "u4,B,abc,103\n"
            "u5,C,2,1.5\n"
            ",C,2,104\n")
    result = ingest_transactions(io.StringIO(text))
    assert len(result.transactions) == 1
    assert result.malformed_rows == [
        (3, 'missing show_id'),
        (4, 'negative amount'),
        (5, 'invalid amount'),
        (6, 'invalid timestamp'),
        (7, 'missing user_id'),
    ]


def test_ingest_header_mismatch():
    with pytest.raises(InputFormatError) as exc:
        ingest_transactions(io.StringIO("user,show,price,time\nu1,A,1,1\n"))
    assert 'user_id' in str(exc.value)


def test_ingest_empty_file():
    with pytest.raises(InputFormatError):
        ingest_transactions(io.StringIO(""))


def test_ingest_header_only():
    result = ingest_transactions(io.StringIO("user_id,show_id,amount,timestamp\n"))
    assert result.transactions == []
    assert result.malformed_count == 0


def test_ingest_wrong_field_count_is_reported():
    text = ("user_id,show_id,amount,timestamp\n"
            "u1,A,10,100\n"
            "u2,B,5,101,EXTRA\n"
            "u3,C\n"
            "u4,D,7,103\n")
    result = ingest_transactions(io.StringIO(text))
    assert [t.user_id for t in result.transactions] == ['u1', 'u4']
    assert result.malformed_rows == [(3, 'wrong field count'), (4, 'wrong field count')]


def test_ingest_invalid_utf8(tmp_path):
    path = tmp_path / 'latin1.csv'
    path.write_bytes(b"user_id,show_id,amount,timestamp\nu\xff1,A,10,100\n")
    with pytest.raises(InputFormatError):
        ingest_transactions(str(path))


def test_ingest_custom_format():
    fmt = TransactionFormat(user_id='client', show_id='event', amount='paid', timestamp='ts',
                            delimiter=';')
    result = ingest_transactions(io.StringIO("client;event;paid;ts\nc1;e1;4;9\n"), fmt)
    assert result.transactions[0].user_id == 'c1'
    assert result.transactions[0].show_id == 'e1'


def test_write_then_ingest_gives_same_index(t1_transactions):
    buffer = io.StringIO()
    write_transactions(t1_transactions, buffer)
    buffer.seek(0)
    result = ingest_transactions(buffer)
    assert result.transactions == t1_transactions
    assert build_index(result.transactions) == build_index(t1_transactions)


def test_shows_round_trip(t1_catalog):
    buffer = io.StringIO()
    write_shows(t1_catalog, buffer)
    buffer.seek(0)
    loaded = load_shows(buffer)
    assert loaded == t1_catalog
    assert loaded['D'].venue is None
    assert loaded['A'].types == frozenset({'rock', 'live'})


def test_load_shows_rejects_duplicates():
    lines = '{"show_id": "A", "city": "Paris"}\n{"show_id": "A"}\n'
    with pytest.raises(InputFormatError):
        load_shows(io.StringIO(lines))


def test_load_shows_rejects_invalid_json():
    with pytest.raises(InputFormatError):
        load_shows(io.StringIO('{"show_id": \n'))


def test_split_holdout_t1(t1_transactions, t1_catalog):
    # first sales: A 1000, B 1001, C 1004, D 1007
    split = split_holdout(t1_transactions, t1_catalog, cutoff=1003)
    assert list(split.train_index.show_ids) == ['A', 'B']
    assert [t.show_id for t in split.test_shows] == ['C', 'D']
    assert split.test_shows[0].spend == {'u2': 10.0, 'u3': 10.0}
    assert split.test_shows[1].spend == {'u4': 10.0}
    assert split.test_shows[0].record == t1_catalog['C']
    assert all(t.show_id in ('A', 'B') for t in split.train_transactions)


def test_split_holdout_test_show_purchases_never_train(t1_transactions, t1_catalog):
    split = split_holdout(t1_transactions, t1_catalog, cutoff=1003)
    test_ids = {t.show_id for t in split.test_shows}
    assert not any(split.train_index.has_show(s) for s in test_ids)


def test_split_holdout_without_test_shows(t1_transactions, t1_catalog):
    with pytest.raises(ConfigurationError):
        split_holdout(t1_transactions, t1_catalog, cutoff=10_000)
    with pytest.raises(ConfigurationError):
        split_holdout(t1_transactions, t1_catalog, cutoff=0)


def test_split_holdout_sample_is_seeded(small_synthetic):
    transactions = small_synthetic.transactions
    cutoff = suggest_cutoff(transactions, test_fraction=0.5)
    first = split_holdout(transactions, small_synthetic.catalog, cutoff, test_sample_size=5,
                          sample_seed=4)
    second = split_holdout(transactions, small_synthetic.catalog, cutoff, test_sample_size=5,
                           sample_seed=4)
    ids = [t.show_id for t in first.test_shows]
    assert len(ids) == 5
    assert ids == sorted(ids)
    assert ids == [t.show_id for t in second.test_shows]


def test_suggest_cutoff_leaves_both_sides(t1_transactions):
    cutoff = suggest_cutoff(t1_transactions, test_fraction=0.5)
    assert cutoff == 1001
    with pytest.raises(ConfigurationError):
        suggest_cutoff(make_transactions([('u1', 'A')]))


def test_show_record_missing_values():
    record = ShowRecord.from_json_dict({'show_id': 'X', 'types': ['a', 'b']})
    assert record.city is None
    assert record.stakeholders == frozenset()
    assert record.to_json_dict() == {'show_id': 'X', 'types': ['a', 'b']}


def test_t1_purchase_fixture_matches_index(t1_index):
    assert t1_index.degree_sum == len(T1_PURCHASES)
