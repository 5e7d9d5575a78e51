#!/usr/bin/env python3
"""
Content Similarity Module for the Cold-Start Audience Recommender
Learns to predict collaborative edge weights from show descriptions and uses
the learned model to insert a brand-new show into the item-item network.

Steps:
1. collect positive edges of the network and an equal-size seeded sample of
   non-edges;
2. describe each pair by one content similarity per feature category;
3. fit an affine model with stochastic gradient descent;
4. link the new show to existing shows with the predicted weights.
"""

import json
import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse as sp

from catalog import Catalog, InteractionIndex, ShowRecord
from config import FORMAT_VERSIONS
from copurchase import ItemGraph, PairStatistics, WeightFunctionKind
from error_handler import (ConfigurationError, DivergenceError, EmptyTrainingSetError,
                           ShowConflictError, error_handler)
from performance_monitor import performance_monitor

logger = logging.getLogger(__name__)

FEATURE_CATEGORIES = ('city', 'venue', 'types', 'stakeholders')
# exact-match indicator vs. Jaccard over a set of tags
CATEGORY_KINDS = {
    'city': 'exact',
    'venue': 'exact',
    'types': 'set',
    'stakeholders': 'set',
}


@dataclass(frozen=True)
class FeatureSimilarity:
    values: Tuple[float, ...]
    missing: Tuple[bool, ...]

    def __getitem__(self, category: str) -> float:
        return self.values[FEATURE_CATEGORIES.index(category)]

    def is_missing(self, category: str) -> bool:
        return self.missing[FEATURE_CATEGORIES.index(category)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _present(value) -> bool:
    return value is not None and len(value) > 0


def pair_features(a: ShowRecord, b: ShowRecord) -> FeatureSimilarity:
    """Per-category content similarity; a category missing on either side scores 0"""
    values, missing = [], []
    for category in FEATURE_CATEGORIES:
        left, right = getattr(a, category), getattr(b, category)
        if not (_present(left) and _present(right)):
            values.append(0.0)
            missing.append(True)
            continue
        if CATEGORY_KINDS[category] == 'exact':
            values.append(1.0 if left == right else 0.0)
        else:
            values.append(len(left & right) / len(left | right))
        missing.append(False)
    return FeatureSimilarity(tuple(values), tuple(missing))


class FeatureEncoder:
    """
    Vectorized pair_features over a fixed list of shows: exact categories
    become integer codes (-1 when missing), set categories become a sparse
    show x tag incidence matrix.
    """

    def __init__(self, records: Sequence[ShowRecord]):
        self.show_ids = [r.show_id for r in records]
        self.codes = {}
        self.vocabularies = {}
        self.tag_matrices = {}
        self.tag_counts = {}
        for category in FEATURE_CATEGORIES:
            vocabulary = {}
            if CATEGORY_KINDS[category] == 'exact':
                codes = np.full(len(records), -1, dtype=np.int64)
                for i, record in enumerate(records):
                    value = getattr(record, category)
                    if _present(value):
                        codes[i] = vocabulary.setdefault(value, len(vocabulary))
                self.codes[category] = codes
            else:
                rows, cols = [], []
                for i, record in enumerate(records):
                    for tag in sorted(getattr(record, category)):
                        rows.append(i)
                        cols.append(vocabulary.setdefault(tag, len(vocabulary)))
                matrix = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                                       shape=(len(records), max(1, len(vocabulary))))
                self.tag_matrices[category] = matrix
                self.tag_counts[category] = np.diff(matrix.indptr).astype(np.float64)
            self.vocabularies[category] = vocabulary

    def __len__(self):
        return len(self.show_ids)

    def pair_matrix(self, left: np.ndarray, right: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Similarities (n x 4) and missing flags for encoded position pairs"""
        left = np.asarray(left, dtype=np.int64)
        right = np.asarray(right, dtype=np.int64)
        values = np.zeros((len(left), len(FEATURE_CATEGORIES)))
        missing = np.zeros((len(left), len(FEATURE_CATEGORIES)), dtype=bool)
        for c, category in enumerate(FEATURE_CATEGORIES):
            if CATEGORY_KINDS[category] == 'exact':
                a, b = self.codes[category][left], self.codes[category][right]
                absent = (a < 0) | (b < 0)
                values[:, c] = ((a == b) & ~absent).astype(np.float64)
            else:
                matrix, sizes = self.tag_matrices[category], self.tag_counts[category]
                if len(left):
                    overlap = np.asarray(matrix[left].multiply(matrix[right]).sum(axis=1)).ravel()
                else:
                    overlap = np.zeros(0)
                absent = (sizes[left] == 0) | (sizes[right] == 0)
                union = sizes[left] + sizes[right] - overlap
                values[:, c] = np.divide(overlap, union, out=np.zeros_like(overlap), where=~absent)
            missing[:, c] = absent
        return values, missing

    def against(self, record: ShowRecord) -> Tuple[np.ndarray, np.ndarray]:
        """Similarities of one (possibly unseen) show with every encoded show"""
        n = len(self.show_ids)
        values = np.zeros((n, len(FEATURE_CATEGORIES)))
        missing = np.zeros((n, len(FEATURE_CATEGORIES)), dtype=bool)
        for c, category in enumerate(FEATURE_CATEGORIES):
            value = getattr(record, category)
            if CATEGORY_KINDS[category] == 'exact':
                codes = self.codes[category]
                if not _present(value):
                    missing[:, c] = True
                    continue
                # -2 never matches: the value is new to the catalog
                code = self.vocabularies[category].get(value, -2)
                missing[:, c] = codes < 0
                values[:, c] = ((codes == code) & (codes >= 0)).astype(np.float64)
            else:
                sizes = self.tag_counts[category]
                if not _present(value):
                    missing[:, c] = True
                    continue
                vocabulary = self.vocabularies[category]
                known = [vocabulary[tag] for tag in value if tag in vocabulary]
                probe = np.zeros(self.tag_matrices[category].shape[1])
                probe[known] = 1.0
                overlap = self.tag_matrices[category] @ probe
                union = sizes + len(value) - overlap
                absent = sizes == 0
                values[:, c] = np.divide(overlap, union, out=np.zeros_like(overlap), where=~absent)
                missing[:, c] = absent
        return values, missing


def records_for(show_ids: Sequence[str], catalog: Catalog) -> List[ShowRecord]:
    records = []
    undescribed = 0
    for show_id in show_ids:
        record = catalog.get(show_id)
        if record is None:
            undescribed += 1
            record = ShowRecord(show_id)
        records.append(record)
    if undescribed:
        error_handler.log_warning("shows without description; all categories treated as missing",
                                  {'count': undescribed})
    return records


@dataclass
class TrainingSet:
    features: np.ndarray            # rows x categories, the matrix A
    missing: np.ndarray
    targets: np.ndarray
    pairs: List[Tuple[str, str]]
    positive_count: int
    negative_count: int
    shortfall: int = 0
    weight_function_kind: Optional[str] = None

    def __len__(self):
        return len(self.targets)

    def rows(self):
        for values, missing, target in zip(self.features, self.missing, self.targets):
            yield FeatureSimilarity(tuple(values.tolist()), tuple(missing.tolist())), float(target)


def _sample_negative_pairs(pattern_codes: np.ndarray, n: int, needed: int,
                           rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """
    Uniform sample without replacement of ordered pairs (a != b) whose code
    a * n + b is not in pattern_codes. Returns codes and the shortfall.
    """
    available = n * (n - 1) - len(pattern_codes)
    if available <= 0:
        return np.zeros(0, dtype=np.int64), needed

    if available <= 2 * needed:
        # small universe: enumerate it
        a, b = np.divmod(np.arange(n * n, dtype=np.int64), n)
        codes = a * n + b
        codes = codes[(a != b) & ~np.isin(codes, pattern_codes)]
        if len(codes) <= needed:
            return codes, needed - len(codes)
        return codes[np.sort(rng.choice(len(codes), size=needed, replace=False))], 0

    picked = np.zeros(0, dtype=np.int64)
    while len(picked) < needed:
        batch = max(1024, 2 * (needed - len(picked)))
        a = rng.integers(0, n, size=batch)
        b = rng.integers(0, n, size=batch)
        codes = a * n + b
        codes = codes[(a != b) & ~np.isin(codes, pattern_codes)]
        merged = np.concatenate([picked, codes])
        # first occurrence wins, in draw order
        _, first = np.unique(merged, return_index=True)
        picked = merged[np.sort(first)]
    return picked[:needed], 0


@performance_monitor.stage('assemble_training_set')
def assemble_training_set(index: InteractionIndex, graph: ItemGraph, kind: WeightFunctionKind,
                          negative_seed: int, catalog: Catalog,
                          stats: Optional[PairStatistics] = None) -> TrainingSet:
    """
    Positive rows are the stored edges; negative rows are a seeded uniform
    sample, of the same size, of ordered pairs with no edge in either
    direction. For asymmetric kinds a row's target is the larger of the two
    directed weights.
    """
    kind = WeightFunctionKind.parse(kind)
    if not np.array_equal(graph.node_ids, index.show_ids):
        raise ValueError("graph nodes do not match the index shows; build the graph from this index")
    n = graph.node_count
    if graph.edge_count == 0:
        raise EmptyTrainingSetError(f"the {kind.label} network has no edge to learn from")

    adjacency = graph.adjacency
    positive = adjacency.tocoo()
    pos_rows = positive.row.astype(np.int64)
    pos_cols = positive.col.astype(np.int64)
    pos_targets = positive.data.astype(np.float64)
    if not kind.symmetric:
        reverse = np.asarray(adjacency[pos_cols, pos_rows], dtype=np.float64).ravel()
        pos_targets = np.maximum(pos_targets, reverse)

    either = (adjacency + adjacency.T).tocoo()
    pattern_codes = np.unique(either.row.astype(np.int64) * n + either.col.astype(np.int64))
    rng = np.random.default_rng(negative_seed)
    negative_codes, shortfall = _sample_negative_pairs(pattern_codes, n, len(pos_targets), rng)
    neg_rows, neg_cols = np.divmod(negative_codes, n)

    stats = stats or PairStatistics(index)
    neg_targets = stats.evaluate(kind, neg_rows, neg_cols)
    if not kind.symmetric:
        neg_targets = np.maximum(neg_targets, stats.evaluate(kind, neg_cols, neg_rows))

    if shortfall:
        error_handler.log_warning("fewer negative pairs than positive edges; using all of them", {
            'positives': len(pos_targets),
            'negatives': len(negative_codes),
            'shortfall': shortfall
        })

    rows = np.concatenate([pos_rows, neg_rows])
    cols = np.concatenate([pos_cols, neg_cols])
    encoder = FeatureEncoder(records_for(graph.node_ids, catalog))
    features, missing = encoder.pair_matrix(rows, cols)
    ids = graph.node_ids
    training_set = TrainingSet(
        features=features,
        missing=missing,
        targets=np.concatenate([pos_targets, neg_targets]),
        pairs=[(ids[a], ids[b]) for a, b in zip(rows, cols)],
        positive_count=len(pos_targets),
        negative_count=len(neg_targets),
        shortfall=shortfall,
        weight_function_kind=kind.label,
    )
    logger.info("training set for %s: %d positive, %d negative rows", kind.label,
                training_set.positive_count, training_set.negative_count)
    return training_set


@dataclass(frozen=True)
class SGDHyperparameters:
    learning_rate: float = 0.01
    epochs: int = 20
    shuffle_seed: int = 0
    l2: float = 0.0
    fit_intercept: bool = True


@dataclass
class LinearModel:
    coefficients: Dict[str, float]
    intercept: float
    hyperparameters: Dict = field(default_factory=dict)
    seed: int = 0
    final_mse: float = float('nan')
    weight_function_kind: Optional[str] = None
    epoch_losses: List[float] = field(default_factory=list)
    training_rows: int = 0

    def coefficient_vector(self) -> np.ndarray:
        return np.asarray([self.coefficients[c] for c in FEATURE_CATEGORIES], dtype=np.float64)

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.coefficient_vector() + self.intercept

    def save_json(self, path: str, fingerprint: Optional[str] = None):
        payload = {
            'format_version': FORMAT_VERSIONS['model_json'],
            'coefficients': {c: self.coefficients[c] for c in FEATURE_CATEGORIES},
            'intercept': self.intercept,
            'hyperparameters': self.hyperparameters,
            'seed': self.seed,
            'final_mse': self.final_mse,
            'weight_function_kind': self.weight_function_kind,
            'epoch_losses': self.epoch_losses,
            'training_rows': self.training_rows,
        }
        if fingerprint:
            payload['config'] = fingerprint
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write('\n')

    @classmethod
    def load_json(cls, path: str) -> 'LinearModel':
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
        try:
            coefficients = {c: float(payload['coefficients'][c]) for c in FEATURE_CATEGORIES}
            return cls(
                coefficients=coefficients,
                intercept=float(payload['intercept']),
                hyperparameters=payload.get('hyperparameters', {}),
                seed=int(payload.get('seed', 0)),
                final_mse=float(payload.get('final_mse', float('nan'))),
                weight_function_kind=payload.get('weight_function_kind'),
                epoch_losses=list(payload.get('epoch_losses', [])),
                training_rows=int(payload.get('training_rows', 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid model file {path}: {e}", module='contentsim')


def squared_error(coef: np.ndarray, intercept: float, x: np.ndarray, y: float,
                  l2: float = 0.0) -> float:
    """Per-row loss: (intercept + coef.x - y)^2 + l2 * |coef|^2"""
    residual = intercept + float(np.dot(coef, x)) - y
    return residual * residual + l2 * float(np.dot(coef, coef))


def squared_error_gradient(coef: np.ndarray, intercept: float, x: np.ndarray, y: float,
                           l2: float = 0.0) -> Tuple[np.ndarray, float]:
    """Analytic gradient of squared_error w.r.t. (coef, intercept)"""
    residual = intercept + float(np.dot(coef, x)) - y
    return 2.0 * residual * np.asarray(x, dtype=np.float64) + 2.0 * l2 * coef, 2.0 * residual


def _mean_squared_error(features: np.ndarray, targets: np.ndarray, coef: np.ndarray,
                        intercept: float) -> float:
    with np.errstate(over='ignore', invalid='ignore'):
        residuals = features @ coef + intercept - targets
        return float(np.mean(residuals * residuals))


@performance_monitor.stage('train_sgd')
def train_sgd(ts: TrainingSet, hyper: Optional[SGDHyperparameters] = None) -> LinearModel:
    """Fit the affine model by per-row gradient steps over shuffled epochs"""
    hyper = hyper or SGDHyperparameters()
    if len(ts) == 0:
        raise EmptyTrainingSetError("cannot fit a model on an empty training set")
    if ts.features.shape[1] != len(FEATURE_CATEGORIES):
        raise ValueError(f"expected {len(FEATURE_CATEGORIES)} feature columns")

    rows = ts.features.tolist()
    targets = ts.targets.tolist()
    rate = hyper.learning_rate
    decay = 1.0 - 2.0 * rate * hyper.l2
    fit_intercept = hyper.fit_intercept
    c0 = c1 = c2 = c3 = 0.0
    b = 0.0
    rng = np.random.default_rng(hyper.shuffle_seed)
    losses = []

    for epoch in range(1, hyper.epochs + 1):
        for i in rng.permutation(len(rows)).tolist():
            x0, x1, x2, x3 = rows[i]
            step = 2.0 * rate * (b + c0 * x0 + c1 * x1 + c2 * x2 + c3 * x3 - targets[i])
            c0 = decay * c0 - step * x0
            c1 = decay * c1 - step * x1
            c2 = decay * c2 - step * x2
            c3 = decay * c3 - step * x3
            if fit_intercept:
                b -= step
        mse = _mean_squared_error(ts.features, ts.targets, np.array([c0, c1, c2, c3]), b)
        if not math.isfinite(mse):
            raise DivergenceError(f"SGD diverged at epoch {epoch} (learning rate {rate})", epoch=epoch)
        losses.append(mse)
        logger.debug("epoch %d: mse %.6g", epoch, mse)

    model = LinearModel(
        coefficients=dict(zip(FEATURE_CATEGORIES, (c0, c1, c2, c3))),
        intercept=b,
        hyperparameters={k: v for k, v in asdict(hyper).items() if k != 'shuffle_seed'},
        seed=hyper.shuffle_seed,
        final_mse=losses[-1],
        weight_function_kind=ts.weight_function_kind,
        epoch_losses=losses,
        training_rows=len(ts),
    )
    logger.info("trained model for %s: mse %.6g after %d epochs", ts.weight_function_kind,
                model.final_mse, hyper.epochs)
    return model


def predict_weight(model: LinearModel, f: FeatureSimilarity) -> float:
    """intercept + sum of coefficient * similarity"""
    return model.intercept + sum(model.coefficients[c] * v for c, v in zip(FEATURE_CATEGORIES, f.values))


@dataclass(frozen=True)
class InsertionPolicy:
    mode: str = 'keep-positive'     # or 'top-k'
    k: Optional[int] = None
    symmetric: bool = True          # False: only edges leaving the new show

    def __post_init__(self):
        if self.mode not in ('keep-positive', 'top-k'):
            raise ConfigurationError(f"unknown insertion mode {self.mode!r}", module='contentsim')
        if self.mode == 'top-k' and (self.k is None or self.k < 1):
            raise ConfigurationError("top-k insertion needs k >= 1", module='contentsim')


def predict_insertion_weights(graph: ItemGraph, model: LinearModel, catalog: Catalog,
                              s_new: ShowRecord,
                              encoder: Optional[FeatureEncoder] = None) -> np.ndarray:
    """Predicted weight between s_new and every node, in node order"""
    if encoder is None:
        encoder = FeatureEncoder(records_for(graph.node_ids, catalog))
    if len(encoder) != graph.node_count:
        raise ValueError("feature encoder does not cover the graph nodes")
    features, _ = encoder.against(s_new)
    return model.predict_many(features)


def insert_new_show(graph: ItemGraph, model: LinearModel, catalog: Catalog, s_new: ShowRecord,
                    policy: Optional[InsertionPolicy] = None,
                    encoder: Optional[FeatureEncoder] = None) -> ItemGraph:
    """Augmented copy of graph with s_new linked to the shows it is predicted to resemble"""
    policy = policy or InsertionPolicy()
    if graph.has_node(s_new.show_id):
        raise ShowConflictError(f"show {s_new.show_id!r} is already in the network")

    predicted = predict_insertion_weights(graph, model, catalog, s_new, encoder)
    candidates = np.flatnonzero(predicted > 0)
    ids = graph.node_ids
    if policy.mode == 'top-k':
        # highest prediction first, ties by show id
        ranked = sorted(candidates.tolist(), key=lambda j: (-predicted[j], ids[j]))
        candidates = np.asarray(ranked[:policy.k], dtype=np.int64)

    outgoing = {ids[j]: float(predicted[j]) for j in candidates}
    incoming = dict(outgoing) if policy.symmetric else {}
    logger.debug("inserted %s with %d edges", s_new.show_id, len(outgoing))
    return graph.with_node(s_new.show_id, outgoing, incoming)
