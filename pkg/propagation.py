#!/usr/bin/env python3
"""
Similarity Propagation Module for the Cold-Start Audience Recommender
Spreads the new show's similarity through the augmented item-item network
and turns the result into a ranked audience.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from catalog import InteractionIndex
from config import FORMAT_VERSIONS
from copurchase import ItemGraph

logger = logging.getLogger(__name__)

# Above this fraction of nodes in the support, steps use the full matrix product
DENSE_SUPPORT_FRACTION = 1.0 / 8
TIE_BREAK = 'score-desc,user_id-asc'


@dataclass(frozen=True, eq=False)
class PropagationState:
    source: str
    node_ids: np.ndarray
    steps: Tuple[np.ndarray, ...]   # t_0 .. t_l, aligned with node_ids
    summed: np.ndarray              # t_1 + ... + t_l

    @property
    def length(self) -> int:
        return len(self.steps) - 1

    def step(self, i: int) -> Dict[str, float]:
        """Non-zero entries of t_i"""
        values = self.steps[i]
        return {self.node_ids[j]: float(values[j]) for j in np.flatnonzero(values)}

    def summed_map(self) -> Dict[str, float]:
        return {self.node_ids[j]: float(self.summed[j]) for j in np.flatnonzero(self.summed)}

    def support(self) -> set:
        return set(self.node_ids[np.flatnonzero(self.summed > 0)])

    def truncated(self, l: int) -> 'PropagationState':
        """The state a propagation of length l would have produced"""
        if not 1 <= l <= self.length:
            raise ValueError(f"cannot truncate a length-{self.length} propagation to {l}")
        steps = self.steps[:l + 1]
        summed = np.sum(steps[1:], axis=0)
        summed.flags.writeable = False
        return PropagationState(self.source, self.node_ids, steps, summed)


def propagate(graph: ItemGraph, s_new: str, l: int) -> PropagationState:
    """
    t_0 is the indicator of s_new; each step pushes t_i along the directed
    edges and rescales the flow to sum to one. A step with no outgoing flow
    yields the zero vector and every later step stays zero.
    """
    if l < 1:
        raise ValueError(f"propagation length must be >= 1, got {l}")
    source = graph.position(s_new)
    n = graph.node_count

    current = np.zeros(n)
    current[source] = 1.0
    steps = [current]
    support = np.array([source])
    for i in range(l):
        if len(support) == 0:
            steps.append(np.zeros(n))
            continue
        if len(support) > n * DENSE_SUPPORT_FRACTION:
            flow = graph.incoming @ current
        else:
            flow = graph.adjacency[support].T @ current[support]
        flow = np.asarray(flow, dtype=np.float64).ravel()
        total = flow.sum()
        if total > 0:
            current = flow / total
        else:
            logger.debug("propagation from %s dead-ends at step %d", s_new, i + 1)
            current = np.zeros(n)
        support = np.flatnonzero(current)
        steps.append(current)

    for values in steps:
        values.flags.writeable = False
    summed = np.sum(steps[1:], axis=0)
    summed.flags.writeable = False
    return PropagationState(s_new, graph.node_ids, tuple(steps), summed)


@dataclass(frozen=True, eq=False)
class AudienceRanking:
    user_ids: np.ndarray        # in rank order
    scores: np.ndarray
    tie_break: str = TIE_BREAK
    aggregation: str = 'max'

    def __len__(self):
        return len(self.user_ids)

    def top(self, n: Optional[int] = None) -> List[Tuple[str, float]]:
        end = len(self.user_ids) if n is None else n
        return [(u, float(s)) for u, s in zip(self.user_ids[:end], self.scores[:end])]

    def save_csv(self, path: str, fingerprint: Optional[str] = None, limit: Optional[int] = None):
        """rank,user_id,score with scores at 17 significant digits"""
        with open(path, 'w', encoding='utf-8') as f:
            if fingerprint:
                f.write(f"# config={fingerprint} format_version={FORMAT_VERSIONS['ranking_csv']}\n")
            f.write("rank,user_id,score\n")
            for rank, (user_id, score) in enumerate(self.top(limit), start=1):
                f.write(f"{rank},{user_id},{score:.17g}\n")


def rank_users(index: InteractionIndex, state: PropagationState,
               aggregation: str = 'max') -> AudienceRanking:
    """
    Score every user by the largest summed similarity among the shows they
    bought (or the total, with aggregation='sum'). The new show itself is
    never part of a user's history.
    """
    if aggregation not in ('max', 'sum'):
        raise ValueError(f"unknown aggregation {aggregation!r}")

    by_show = np.zeros(index.show_count)
    for j in np.flatnonzero(state.summed):
        show_id = state.node_ids[j]
        if show_id != state.source and index.has_show(show_id):
            by_show[index.show_position(show_id)] = state.summed[j]

    incidence = index.incidence
    if index.user_count == 0:
        scores = np.zeros(0)
    elif aggregation == 'max':
        weighted = incidence.multiply(by_show[np.newaxis, :]).tocsr()
        scores = weighted.max(axis=1).toarray().ravel()
    else:
        scores = np.asarray(incidence @ by_show, dtype=np.float64).ravel()

    # user_ids are sorted, so a stable sort leaves ties in ascending id order
    order = np.argsort(-scores, kind='stable')
    return AudienceRanking(index.user_ids[order], scores[order], TIE_BREAK, aggregation)
