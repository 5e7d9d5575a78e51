#!/usr/bin/env python3
"""
Catalog Module for the Cold-Start Audience Recommender
Transactions and show descriptions: ingestion, the user/show interaction
index, and the temporal holdout split.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse as sp

from error_handler import ConfigurationError, InputFormatError, UnknownShowError, error_handler

logger = logging.getLogger(__name__)

TRANSACTION_COLUMNS = ('user_id', 'show_id', 'amount', 'timestamp')
# replaces a row with too many fields so it keeps its line position
_WRONG_WIDTH = '\x00wrong-width'


@dataclass(frozen=True)
class Transaction:
    user_id: str
    show_id: str
    amount: float       # euros
    timestamp: int      # UTC seconds


@dataclass(frozen=True)
class ShowRecord:
    show_id: str
    city: Optional[str] = None
    venue: Optional[str] = None
    types: FrozenSet[str] = frozenset()
    stakeholders: FrozenSet[str] = frozenset()
    first_sale: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'types', frozenset(self.types))
        object.__setattr__(self, 'stakeholders', frozenset(self.stakeholders))

    @classmethod
    def from_json_dict(cls, data: Dict) -> 'ShowRecord':
        return cls(
            show_id=str(data['show_id']),
            city=data.get('city'),
            venue=data.get('venue'),
            types=data.get('types') or (),
            stakeholders=data.get('stakeholders') or (),
            first_sale=data.get('first_sale'),
        )

    def to_json_dict(self) -> Dict:
        """Absent keys mean missing values"""
        data = {'show_id': self.show_id}
        if self.city is not None:
            data['city'] = self.city
        if self.venue is not None:
            data['venue'] = self.venue
        if self.types:
            data['types'] = sorted(self.types)
        if self.stakeholders:
            data['stakeholders'] = sorted(self.stakeholders)
        if self.first_sale is not None:
            data['first_sale'] = self.first_sale
        return data


Catalog = Dict[str, ShowRecord]


@dataclass(frozen=True)
class TransactionFormat:
    """Column mapping of a transaction file"""
    user_id: str = 'user_id'
    show_id: str = 'show_id'
    amount: str = 'amount'
    timestamp: str = 'timestamp'
    delimiter: str = ','

    def columns(self) -> Dict[str, str]:
        return {field_name: getattr(self, field_name) for field_name in TRANSACTION_COLUMNS}


@dataclass
class IngestResult:
    transactions: List[Transaction]
    malformed_rows: List[Tuple[int, str]] = field(default_factory=list)  # (line, reason)

    @property
    def malformed_count(self) -> int:
        return len(self.malformed_rows)


Source = Union[str, io.IOBase]


def ingest_transactions(source: Source, fmt: Optional[TransactionFormat] = None) -> IngestResult:
    """Parse a transaction CSV, keeping every valid row and reporting the rest"""
    fmt = fmt or TransactionFormat()
    columns = fmt.columns()
    try:
        frame = pd.read_csv(source, sep=fmt.delimiter, dtype=str, keep_default_na=False,
                            engine='python', skip_blank_lines=False, encoding='utf-8',
                            on_bad_lines=lambda fields: [_WRONG_WIDTH])
    except pd.errors.EmptyDataError:
        raise InputFormatError("transaction file has no header; expected columns "
                               f"{list(columns.values())}")
    except UnicodeDecodeError as e:
        raise InputFormatError(f"transaction file is not valid UTF-8: {e}")
    except pd.errors.ParserError as e:
        raise InputFormatError(f"unreadable transaction file: {e}")

    missing = [name for name in columns.values() if name not in frame.columns]
    if missing:
        raise InputFormatError(f"transaction header mismatch: missing columns {missing}, "
                               f"found {list(frame.columns)}")

    users = frame[columns['user_id']].str.strip()
    shows = frame[columns['show_id']].str.strip()
    amounts = pd.to_numeric(frame[columns['amount']], errors='coerce')
    stamps = pd.to_numeric(frame[columns['timestamp']], errors='coerce')

    reasons = pd.Series('', index=frame.index)
    reasons[~np.isfinite(stamps) | (stamps != np.floor(stamps))] = 'invalid timestamp'
    reasons[amounts < 0] = 'negative amount'
    reasons[~np.isfinite(amounts)] = 'invalid amount'
    reasons[shows == ''] = 'missing show_id'
    reasons[users == ''] = 'missing user_id'
    # short rows come back with NaN; empty fields read as ''
    wrong_width = frame[list(columns.values())].isna().any(axis=1) | (users == _WRONG_WIDTH)
    reasons[wrong_width] = 'wrong field count'

    bad = reasons != ''
    # Line numbers are 1-based and count the header
    malformed_rows = [(int(i) + 2, reason) for i, reason in reasons[bad].items()]
    good = ~bad
    transactions = [
        Transaction(user_id=u, show_id=s, amount=float(a), timestamp=int(t))
        for u, s, a, t in zip(users[good], shows[good], amounts[good], stamps[good])
    ]

    if malformed_rows:
        error_handler.log_warning("malformed transaction rows rejected", {
            'count': len(malformed_rows),
            'first': malformed_rows[:5]
        })
    logger.info("ingested %d transactions (%d malformed)", len(transactions), len(malformed_rows))
    return IngestResult(transactions, malformed_rows)


def write_transactions(transactions: Iterable[Transaction], sink: Source):
    """Write transactions in the ingest format (header user_id,show_id,amount,timestamp)"""
    frame = pd.DataFrame(
        [(t.user_id, t.show_id, t.amount, t.timestamp) for t in transactions],
        columns=list(TRANSACTION_COLUMNS),
    )
    frame.to_csv(sink, index=False, lineterminator='\n')


def load_shows(source: Source) -> Catalog:
    """Read show descriptions from JSON lines"""
    if isinstance(source, str):
        with open(source, 'r', encoding='utf-8') as f:
            return load_shows(f)

    catalog = {}
    for line_no, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode('utf-8')
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            record = ShowRecord.from_json_dict(data)
        except (ValueError, KeyError, TypeError) as e:
            raise InputFormatError(f"shows line {line_no}: invalid record ({e})")
        if record.show_id in catalog:
            raise InputFormatError(f"shows line {line_no}: duplicate show_id {record.show_id!r}")
        catalog[record.show_id] = record
    return catalog


def write_shows(catalog: Catalog, sink: Source):
    """Write show descriptions as JSON lines sorted by show_id"""
    if isinstance(sink, str):
        with open(sink, 'w', encoding='utf-8') as f:
            return write_shows(catalog, f)
    for show_id in sorted(catalog):
        sink.write(json.dumps(catalog[show_id].to_json_dict(), sort_keys=True) + '\n')


class InteractionIndex:
    """
    Deduplicated user/show purchase structure.

    Identifiers are mapped to dense positions in sorted id order; the
    incidence matrix is users x shows with a 1 for every purchased pair.
    Instances are never mutated after construction.
    """

    def __init__(self, user_ids: np.ndarray, show_ids: np.ndarray, incidence: sp.csr_matrix):
        self.user_ids = np.asarray(user_ids, dtype=object)
        self.show_ids = np.asarray(show_ids, dtype=object)
        incidence = sp.csr_matrix(incidence, dtype=np.int32)
        incidence.sum_duplicates()
        incidence.data[:] = 1
        incidence.sort_indices()
        self.incidence = incidence
        self.by_show = incidence.tocsc()
        self.by_show.sort_indices()

        self.user_degree = np.diff(incidence.indptr).astype(np.int64)
        self.show_degree = np.diff(self.by_show.indptr).astype(np.int64)
        for array in (self.user_ids, self.show_ids, self.user_degree, self.show_degree):
            array.flags.writeable = False

        self._user_pos = {u: i for i, u in enumerate(self.user_ids)}
        self._show_pos = {s: i for i, s in enumerate(self.show_ids)}

    @property
    def show_count(self) -> int:
        return len(self.show_ids)

    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    @property
    def degree_sum(self) -> int:
        return int(self.incidence.nnz)

    def has_show(self, show_id: str) -> bool:
        return show_id in self._show_pos

    def has_user(self, user_id: str) -> bool:
        return user_id in self._user_pos

    def show_position(self, show_id: str) -> int:
        try:
            return self._show_pos[show_id]
        except KeyError:
            raise UnknownShowError(f"unknown show: {show_id!r}")

    def user_position(self, user_id: str) -> int:
        try:
            return self._user_pos[user_id]
        except KeyError:
            raise KeyError(f"unknown user: {user_id!r}")

    def buyers_of(self, show_id: str) -> FrozenSet[str]:
        """U(s)"""
        j = self.show_position(show_id)
        rows = self.by_show.indices[self.by_show.indptr[j]:self.by_show.indptr[j + 1]]
        return frozenset(self.user_ids[rows])

    def shows_of(self, user_id: str) -> FrozenSet[str]:
        """S(u)"""
        i = self.user_position(user_id)
        cols = self.incidence.indices[self.incidence.indptr[i]:self.incidence.indptr[i + 1]]
        return frozenset(self.show_ids[cols])

    def show_degree_of(self, show_id: str) -> int:
        return int(self.show_degree[self.show_position(show_id)])

    def user_degree_of(self, user_id: str) -> int:
        return int(self.user_degree[self.user_position(user_id)])

    def check_invariants(self) -> bool:
        """Degree caches agree with memberships; sum of k_s equals sum of k_u"""
        assert int(self.show_degree.sum()) == self.degree_sum == int(self.user_degree.sum())
        assert np.array_equal(np.asarray(self.incidence.sum(axis=1)).ravel(), self.user_degree)
        assert np.array_equal(np.asarray(self.incidence.sum(axis=0)).ravel(), self.show_degree)
        return True

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionIndex):
            return NotImplemented
        return (np.array_equal(self.user_ids, other.user_ids)
                and np.array_equal(self.show_ids, other.show_ids)
                and (self.incidence != other.incidence).nnz == 0)

    def __repr__(self):
        return (f"InteractionIndex(users={self.user_count}, shows={self.show_count}, "
                f"degree_sum={self.degree_sum})")


def build_index(transactions: Sequence[Transaction]) -> InteractionIndex:
    """Build the deduplicated interaction index"""
    users = pd.Series([t.user_id for t in transactions], dtype=object)
    shows = pd.Series([t.show_id for t in transactions], dtype=object)
    user_codes, user_ids = pd.factorize(users, sort=True)
    show_codes, show_ids = pd.factorize(shows, sort=True)

    incidence = sp.csr_matrix(
        (np.ones(len(user_codes), dtype=np.int32), (user_codes, show_codes)),
        shape=(len(user_ids), len(show_ids)),
    )
    index = InteractionIndex(np.asarray(user_ids, dtype=object), np.asarray(show_ids, dtype=object),
                             incidence)
    logger.debug("built %r", index)
    return index


@dataclass
class TestShow:
    show_id: str
    spend: Dict[str, float]             # user_id -> total euros spent on the show
    record: Optional[ShowRecord] = None


@dataclass
class HoldoutSplit:
    train_transactions: List[Transaction]
    train_index: InteractionIndex
    test_shows: List[TestShow]
    catalog: Catalog
    cutoff: int


def split_holdout(transactions: Sequence[Transaction], shows: Catalog, cutoff: int,
                  test_sample_size: Optional[int] = None, sample_seed: int = 0) -> HoldoutSplit:
    """
    Temporal holdout: a show is a test show iff its first transaction is
    strictly after the cutoff. Test-show purchases never reach the train
    index. With test_sample_size, a seeded uniform sample of the test shows
    is kept for evaluation.
    """
    first_seen = {}
    for t in transactions:
        if t.show_id not in first_seen or t.timestamp < first_seen[t.show_id]:
            first_seen[t.show_id] = t.timestamp

    test_ids = sorted(s for s, first in first_seen.items() if first > cutoff)
    train_transactions = [t for t in transactions if first_seen[t.show_id] <= cutoff]
    if not test_ids:
        raise ConfigurationError(f"cutoff {cutoff} leaves no test show")
    if not train_transactions:
        raise ConfigurationError(f"cutoff {cutoff} leaves an empty training set")

    if test_sample_size is not None:
        if test_sample_size < 1:
            raise ConfigurationError("test_sample_size must be >= 1")
        if test_sample_size < len(test_ids):
            rng = np.random.default_rng(sample_seed)
            picked = rng.choice(len(test_ids), size=test_sample_size, replace=False)
            test_ids = sorted(test_ids[i] for i in picked)

    spend = {s: {} for s in test_ids}
    for t in transactions:
        per_user = spend.get(t.show_id)
        if per_user is not None:
            per_user[t.user_id] = per_user.get(t.user_id, 0.0) + t.amount

    test_shows = [TestShow(s, spend[s], shows.get(s)) for s in test_ids]
    train_index = build_index(train_transactions)
    logger.info("holdout at %d: %d train shows, %d test shows", cutoff,
                train_index.show_count, len(test_shows))
    return HoldoutSplit(train_transactions, train_index, test_shows, shows, cutoff)


def suggest_cutoff(transactions: Sequence[Transaction], test_fraction: float = 0.2) -> int:
    """Cutoff leaving roughly the most recent test_fraction of shows for testing"""
    first_seen = {}
    for t in transactions:
        if t.show_id not in first_seen or t.timestamp < first_seen[t.show_id]:
            first_seen[t.show_id] = t.timestamp
    if len(first_seen) < 2:
        raise ConfigurationError("at least two shows are needed for a holdout split")
    ordered = sorted(first_seen.values())
    keep = min(len(ordered) - 1, max(1, int(round(len(ordered) * (1.0 - test_fraction)))))
    return int(ordered[keep - 1])
