#!/usr/bin/env python3
"""
Co-purchase Weight Module for the Cold-Start Audience Recommender
The seven co-purchase weight functions and the sparse directed item-item
collaborative network built from them.

Notation: U(s) buyers of show s, S(u) shows bought by user u,
k_s = |U(s)|, k_u = |S(u)|, U(s1, s2) = U(s1) & U(s2).
"""

import math
import logging
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse as sp
from joblib import Parallel, delayed

from catalog import InteractionIndex
from config import FORMAT_VERSIONS
from error_handler import InputFormatError, UnknownShowError
from performance_monitor import performance_monitor

logger = logging.getLogger(__name__)


class WeightFunctionKind(Enum):
    # Definition order is the column order of the grid-search matrix
    AMAZON = 'Amazon'
    BP = 'BP'
    JACCARD = 'Jaccard'
    JACCARD_ASYM = 'Jaccard-asym'
    MDW = 'MDW'
    MDW_ASYM = 'MDW-asym'
    NBI = 'NBI'

    @property
    def label(self) -> str:
        return self.value

    @property
    def symmetric(self) -> bool:
        # Amazon is asymmetric as written: the sum runs over U(s1) only
        return self in (WeightFunctionKind.JACCARD, WeightFunctionKind.MDW, WeightFunctionKind.BP)

    @classmethod
    def parse(cls, text: Union[str, 'WeightFunctionKind']) -> 'WeightFunctionKind':
        if isinstance(text, cls):
            return text
        wanted = str(text).replace('-', '').replace('_', '').replace(' ', '').lower()
        for kind in cls:
            if wanted in (kind.value.replace('-', '').lower(), kind.name.replace('_', '').lower()):
                return kind
        raise ValueError(f"unknown weight function {text!r}; expected one of "
                         f"{[k.value for k in cls]}")

    @classmethod
    def parse_list(cls, text: str) -> List['WeightFunctionKind']:
        if text.strip().lower() == 'all':
            return list(cls)
        return [cls.parse(part) for part in text.split(',') if part.strip()]


# Above this exponent (1 - p)^e is taken in log space
DIRECT_POWER_LIMIT = 64


def _amazon_miss_probability(p: float, exponent: int) -> float:
    """1 - (1 - p)^exponent"""
    if exponent <= 0:
        return 0.0
    if p >= 1.0:
        return 1.0
    if exponent <= DIRECT_POWER_LIMIT:
        return 1.0 - (1.0 - p) ** exponent
    return -math.expm1(exponent * math.log1p(-p))


def _amazon_rounding_bound(n, exponent_total):
    """
    Accumulated rounding of n - expected: a few ulps per power step and per
    summed term. Differences inside it are exact zeros.
    """
    return 4.0 * np.finfo(np.float64).eps * (n + exponent_total)


def weight(kind: WeightFunctionKind, s1: str, s2: str, index: InteractionIndex) -> float:
    """
    Reference evaluation of w(s1, s2) straight from the buyer sets.
    Returns 0 when the shows share no buyer.
    """
    if s1 == s2:
        raise ValueError("weight is undefined for a show with itself")
    buyers1 = index.buyers_of(s1)
    buyers2 = index.buyers_of(s2)
    common = sorted(buyers1 & buyers2)
    if not common:
        return 0.0

    n = len(common)
    k1, k2 = len(buyers1), len(buyers2)
    user_degrees = [index.user_degree_of(u) for u in common]
    # every common buyer owns s1 and s2
    assert min(user_degrees) >= 2

    if kind is WeightFunctionKind.JACCARD:
        return n / len(buyers1 | buyers2)
    if kind is WeightFunctionKind.JACCARD_ASYM:
        return n / k1
    if kind is WeightFunctionKind.NBI:
        return sum(1.0 / k for k in user_degrees) / k1
    if kind is WeightFunctionKind.MDW:
        return sum(1.0 / (k - 1) for k in user_degrees) / max(k1, k2)
    if kind is WeightFunctionKind.MDW_ASYM:
        return sum(1.0 / (k - 1) for k in user_degrees) / k1
    if kind is WeightFunctionKind.BP:
        shows = index.show_count
        variance = k1 * (1 - k1 / shows) * k2 * (1 - k2 / shows)
        if variance <= 0:
            return 0.0
        return (n - k1 * k2 / shows) / math.sqrt(variance)
    if kind is WeightFunctionKind.AMAZON:
        p = k2 / index.degree_sum
        exponents = [index.user_degree_of(u) - 1 for u in sorted(buyers1)]
        expected = sum(_amazon_miss_probability(p, e) for e in exponents)
        excess = n - expected
        if abs(excess) <= _amazon_rounding_bound(n, sum(e + 1 for e in exponents)):
            return 0.0
        return excess / math.sqrt(n)
    raise ValueError(f"unsupported weight function: {kind}")


def cooccurrence_counts(index: InteractionIndex) -> sp.csr_matrix:
    """|U(s1, s2)| for every pair of distinct shows, as X^T X with the diagonal removed"""
    incidence = index.incidence
    counts = (incidence.T @ incidence).tocsr()
    if counts.shape[0]:
        counts.setdiag(0)
    counts.eliminate_zeros()
    counts.sort_indices()
    return counts


class PairStatistics:
    """
    Sparse per-pair aggregates over common buyers, computed once per index:
    counts |U(s1,s2)|, sums of 1/k_u and sums of 1/(k_u - 1).
    Each is a product X^T D X over the user x show incidence X, so the work
    is proportional to sum_u k_u^2, never |S|^2.
    """

    def __init__(self, index: InteractionIndex):
        self.index = index
        incidence = index.incidence
        self.counts = cooccurrence_counts(index)

        degrees = index.user_degree.astype(np.float64)
        inverse = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
        # users with k_u = 1 only ever touch the diagonal
        inverse_less_one = np.divide(1.0, degrees - 1, out=np.zeros_like(degrees), where=degrees > 1)
        self.inverse_sums = self._user_weighted(incidence, inverse)
        self.inverse_less_one_sums = self._user_weighted(incidence, inverse_less_one)

        self._exponent_histograms = {}

    @staticmethod
    def _user_weighted(incidence: sp.csr_matrix, user_weights: np.ndarray) -> sp.csr_matrix:
        """X^T diag(user_weights) X"""
        scaled = sp.csr_matrix(incidence.multiply(user_weights[:, None]), dtype=np.float64)
        product = (incidence.T @ scaled).tocsr()
        product.sort_indices()
        return product

    def candidate_positions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Row-major (source, target) positions of every pair sharing a buyer"""
        coo = self.counts.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64)

    @staticmethod
    def _lookup(matrix: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if len(rows) == 0:
            return np.zeros(0, dtype=np.float64)
        return np.asarray(matrix[rows, cols], dtype=np.float64).ravel()

    def exponent_histogram(self, show: int) -> Tuple[np.ndarray, np.ndarray]:
        """Distinct |S(u) \\ s| over the buyers of a show, with multiplicities"""
        cached = self._exponent_histograms.get(show)
        if cached is None:
            by_show = self.index.by_show
            buyers = by_show.indices[by_show.indptr[show]:by_show.indptr[show + 1]]
            cached = np.unique(self.index.user_degree[buyers] - 1, return_counts=True)
            self._exponent_histograms[show] = cached
        return cached

    def evaluate(self, kind: WeightFunctionKind, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Vectorized w(rows[i], cols[i]); pairs without a common buyer give 0"""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        n = self._lookup(self.counts, rows, cols)
        result = np.zeros(len(rows), dtype=np.float64)
        shared = n > 0
        if not shared.any():
            return result

        rows, cols, n = rows[shared], cols[shared], n[shared]
        degree = self.index.show_degree.astype(np.float64)
        k1, k2 = degree[rows], degree[cols]

        if kind is WeightFunctionKind.JACCARD:
            values = n / (k1 + k2 - n)
        elif kind is WeightFunctionKind.JACCARD_ASYM:
            values = n / k1
        elif kind is WeightFunctionKind.NBI:
            values = self._lookup(self.inverse_sums, rows, cols) / k1
        elif kind is WeightFunctionKind.MDW:
            values = self._lookup(self.inverse_less_one_sums, rows, cols) / np.maximum(k1, k2)
        elif kind is WeightFunctionKind.MDW_ASYM:
            values = self._lookup(self.inverse_less_one_sums, rows, cols) / k1
        elif kind is WeightFunctionKind.BP:
            shows = float(self.index.show_count)
            variance = k1 * (1 - k1 / shows) * k2 * (1 - k2 / shows)
            values = np.zeros(len(n))
            ok = variance > 0
            values[ok] = (n[ok] - k1[ok] * k2[ok] / shows) / np.sqrt(variance[ok])
        elif kind is WeightFunctionKind.AMAZON:
            values = self._amazon(rows, cols, n, k2)
        else:
            raise ValueError(f"unsupported weight function: {kind}")

        result[shared] = values
        return result

    def _amazon(self, rows, cols, n, k2) -> np.ndarray:
        p = k2 / float(self.index.degree_sum)
        expected = np.zeros(len(rows))
        exponent_total = np.zeros(len(rows))
        order = np.argsort(rows, kind='stable')
        sources, starts = np.unique(rows[order], return_index=True)
        ends = np.append(starts[1:], len(rows))
        with np.errstate(divide='ignore', invalid='ignore'):
            keep = 1.0 - np.minimum(p, 1.0)
            log_keep = np.log1p(-np.minimum(p, 1.0))
            for source, start, end in zip(sources, starts, ends):
                members = order[start:end]
                exponents, multiplicity = self.exponent_histogram(int(source))
                direct = exponents <= DIRECT_POWER_LIMIT
                miss = np.empty((len(members), len(exponents)))
                miss[:, direct] = 1.0 - np.power(keep[members][:, None], exponents[direct])
                miss[:, ~direct] = -np.expm1(np.outer(log_keep[members], exponents[~direct]))
                miss[:, exponents <= 0] = 0.0
                miss[p[members] >= 1.0, :] = np.where(exponents > 0, 1.0, 0.0)
                expected[members] = miss @ multiplicity
                exponent_total[members] = float(multiplicity @ (exponents + 1))
        excess = n - expected
        excess[np.abs(excess) <= _amazon_rounding_bound(n, exponent_total)] = 0.0
        return excess / np.sqrt(n)


def candidate_pairs(index: InteractionIndex) -> Iterator[Tuple[str, str]]:
    """Ordered pairs (s1, s2), s1 != s2, sharing at least one buyer"""
    rows, cols = PairStatistics(index).candidate_positions()
    show_ids = index.show_ids
    for r, c in zip(rows, cols):
        yield show_ids[r], show_ids[c]


def weigh_pairs(index: InteractionIndex, kind: WeightFunctionKind, sources: Sequence[int],
                targets: Sequence[int], stats: Optional[PairStatistics] = None) -> np.ndarray:
    """Weights for arbitrary show position pairs (0 for non-candidates)"""
    stats = stats or PairStatistics(index)
    return stats.evaluate(kind, np.asarray(sources), np.asarray(targets))


# Comment lines the TSV writer emits; any other line is an edge
_HEADER_PREFIXES = ('# weight_function=', '# format_version=', '# config=', '# node\t')


class ItemGraph:
    """
    Sparse directed weighted graph over shows. Adjacency is a CSR matrix
    indexed by node position, rows are sources; only positive weights are
    stored and there are no self-loops.
    """

    def __init__(self, node_ids: Sequence[str], adjacency: sp.csr_matrix,
                 kind: Optional[WeightFunctionKind] = None):
        self.node_ids = np.asarray(node_ids, dtype=object)
        self.node_ids.flags.writeable = False
        adjacency = sp.csr_matrix(adjacency, dtype=np.float64, copy=True)
        if adjacency.shape != (len(self.node_ids), len(self.node_ids)):
            raise ValueError(f"adjacency shape {adjacency.shape} does not match "
                             f"{len(self.node_ids)} nodes")
        adjacency.sum_duplicates()
        adjacency.eliminate_zeros()
        adjacency.sort_indices()
        self.adjacency = adjacency
        self.kind = kind
        self._pos = {s: i for i, s in enumerate(self.node_ids)}
        self._incoming = None

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.nnz)

    def has_node(self, show_id: str) -> bool:
        return show_id in self._pos

    def position(self, show_id: str) -> int:
        try:
            return self._pos[show_id]
        except KeyError:
            raise UnknownShowError(f"show {show_id!r} is not a node of the graph")

    @property
    def incoming(self) -> sp.csr_matrix:
        """Transposed adjacency: row s lists the edges s' -> s"""
        if self._incoming is None:
            self._incoming = self.adjacency.T.tocsr()
            self._incoming.sort_indices()
        return self._incoming

    def weight(self, source: str, target: str) -> float:
        return float(self.adjacency[self.position(source), self.position(target)])

    def successors(self, show_id: str) -> Dict[str, float]:
        i = self.position(show_id)
        start, end = self.adjacency.indptr[i], self.adjacency.indptr[i + 1]
        return {self.node_ids[j]: float(w) for j, w in
                zip(self.adjacency.indices[start:end], self.adjacency.data[start:end])}

    def edges(self) -> Iterator[Tuple[str, str, float]]:
        """Edges ordered by source id, then target id"""
        coo = self.adjacency.tocoo()
        ids = self.node_ids
        order = sorted(range(coo.nnz), key=lambda e: (ids[coo.row[e]], ids[coo.col[e]]))
        for e in order:
            yield ids[coo.row[e]], ids[coo.col[e]], float(coo.data[e])

    def edge_dict(self) -> Dict[Tuple[str, str], float]:
        return {(a, b): w for a, b, w in self.edges()}

    def with_node(self, show_id: str, outgoing: Dict[str, float],
                  incoming: Dict[str, float]) -> 'ItemGraph':
        """Copy of the graph with one more node and its incident edges"""
        n = self.node_count
        existing = self.adjacency.tocoo()
        rows, cols, data = list(existing.row), list(existing.col), list(existing.data)
        for target, w in sorted(outgoing.items()):
            rows.append(n)
            cols.append(self.position(target))
            data.append(w)
        for source, w in sorted(incoming.items()):
            rows.append(self.position(source))
            cols.append(n)
            data.append(w)
        adjacency = sp.csr_matrix((data, (rows, cols)), shape=(n + 1, n + 1))
        node_ids = list(self.node_ids) + [show_id]
        return ItemGraph(node_ids, adjacency, self.kind)

    def check_invariants(self) -> bool:
        assert np.all(self.adjacency.data > 0), "non-positive edge stored"
        assert self.adjacency.diagonal().sum() == 0, "self-loop stored"
        if self.kind is not None and self.kind.symmetric:
            assert (abs(self.adjacency - self.adjacency.T) > 1e-12).nnz == 0, "asymmetric edge"
        return True

    def save_tsv(self, sink, fingerprint: Optional[str] = None):
        """TSV edge list with weights at 17 significant digits"""
        if isinstance(sink, str):
            with open(sink, 'w', encoding='utf-8') as f:
                return self.save_tsv(f, fingerprint)
        for show_id in self.node_ids:
            if show_id.startswith('#') or any(c in show_id for c in '\t\r\n'):
                raise InputFormatError(f"show id {show_id!r} cannot be written to a graph TSV",
                                       module='copurchase')
        sink.write(f"# weight_function={self.kind.label if self.kind else 'none'}\n")
        sink.write(f"# format_version={FORMAT_VERSIONS['graph_tsv']}\n")
        if fingerprint:
            sink.write(f"# config={fingerprint}\n")
        degree = np.diff(self.adjacency.indptr) + np.diff(self.incoming.indptr)
        for show_id in sorted(self.node_ids[degree == 0]):
            sink.write(f"# node\t{show_id}\n")
        for source, target, w in self.edges():
            sink.write(f"{source}\t{target}\t{w:.17g}\n")

    @classmethod
    def load_tsv(cls, source) -> 'ItemGraph':
        if isinstance(source, str):
            with open(source, 'r', encoding='utf-8') as f:
                return cls.load_tsv(f)
        kind = None
        nodes = set()
        edges = []
        for line_no, line in enumerate(source, start=1):
            line = line.rstrip('\n')
            if not line:
                continue
            header = next((p for p in _HEADER_PREFIXES if line.startswith(p)), None)
            if header == '# node\t':
                nodes.add(line[len(header):])
                continue
            if header == '# weight_function=':
                label = line[len(header):]
                kind = None if label == 'none' else WeightFunctionKind.parse(label)
                continue
            if header is not None:
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise InputFormatError(f"graph line {line_no}: expected 3 tab-separated fields",
                                       module='copurchase')
            try:
                w = float(parts[2])
            except ValueError:
                raise InputFormatError(f"graph line {line_no}: invalid weight {parts[2]!r}",
                                       module='copurchase')
            if not w > 0:
                raise InputFormatError(f"graph line {line_no}: edge weights must be positive",
                                       module='copurchase')
            edges.append((parts[0], parts[1], w))
            nodes.update(parts[:2])

        node_ids = sorted(nodes)
        pos = {s: i for i, s in enumerate(node_ids)}
        rows = [pos[a] for a, _, _ in edges]
        cols = [pos[b] for _, b, _ in edges]
        data = [w for _, _, w in edges]
        adjacency = sp.csr_matrix((data, (rows, cols)), shape=(len(node_ids), len(node_ids)))
        return cls(node_ids, adjacency, kind)

    def __repr__(self):
        kind = self.kind.label if self.kind else None
        return f"ItemGraph(kind={kind}, nodes={self.node_count}, edges={self.edge_count})"


def _chunks(rows: np.ndarray, parts: int) -> List[slice]:
    """Split row-major pair arrays at source boundaries"""
    if len(rows) == 0:
        return []
    source_starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    cuts = [int(group[0]) for group in np.array_split(source_starts, parts) if len(group)]
    cuts.append(len(rows))
    return [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


@performance_monitor.stage('build_graph')
def build_graph(index: InteractionIndex, kind: WeightFunctionKind, threads: int = 1,
                stats: Optional[PairStatistics] = None) -> ItemGraph:
    """Collaborative item-item network: every candidate pair with positive weight"""
    kind = WeightFunctionKind.parse(kind)
    stats = stats or PairStatistics(index)
    rows, cols = stats.candidate_positions()

    parts = _chunks(rows, max(1, threads) * 4) if threads > 1 else [slice(0, len(rows))]
    pieces = Parallel(n_jobs=max(1, threads), prefer='threads')(
        delayed(stats.evaluate)(kind, rows[part], cols[part]) for part in parts
    ) if parts else []
    weights = np.concatenate(pieces) if pieces else np.zeros(0)

    keep = weights > 0
    n = index.show_count
    adjacency = sp.csr_matrix((weights[keep], (rows[keep], cols[keep])), shape=(n, n))
    graph = ItemGraph(index.show_ids, adjacency, kind)
    logger.info("built %s network: %d candidate pairs, %d edges", kind.label, len(rows),
                graph.edge_count)
    return graph
