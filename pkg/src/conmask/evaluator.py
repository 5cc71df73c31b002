"""Ranking evaluation with target filtering, plus baseline scorers.

Scorers are callables ``scorer(h, r, t, direction) -> float`` where
``direction`` names the corrupted side ("head" or "tail"); rank ties are
broken pessimistically (the true entity sorts below every tie), so a
constant scorer yields rank == pool size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from conmask.kgdata import KnowledgeGraph
from conmask.model import EncodedCorpus, ModelParams, ScoringContext

DIRECTIONS = ("head", "tail")


@dataclass
class QueryResult:
    query_id: int
    direction: str
    rank: int | None
    pool_size: int
    flags: list[str] = field(default_factory=list)


@dataclass
class RankingReport:
    queries: list[QueryResult]
    aggregates: dict
    skipped_unseen_relation: int = 0
    scorer_errors: int = 0

    def to_dict(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "skipped_unseen_relation": self.skipped_unseen_relation,
            "scorer_errors": self.scorer_errors,
            "queries": [
                {"query_id": q.query_id, "direction": q.direction, "rank": q.rank,
                 "pool_size": q.pool_size, "flags": q.flags}
                for q in self.queries
            ],
        }

    def csv_rows(self) -> list[tuple]:
        return [(q.query_id, q.direction, "" if q.rank is None else q.rank,
                 q.pool_size, "|".join(q.flags)) for q in self.queries]


def build_target_index(graph: KnowledgeGraph) -> dict:
    """relation -> sorted heads / tails observed in the graph."""
    heads: dict[int, set[int]] = {}
    tails: dict[int, set[int]] = {}
    for h, r, t in graph.triples:
        heads.setdefault(r, set()).add(h)
        tails.setdefault(r, set()).add(t)
    return {"head": {r: sorted(s) for r, s in heads.items()},
            "tail": {r: sorted(s) for r, s in tails.items()}}


def target_filter(triple: tuple[int, int, int], direction: str,
                  graph: KnowledgeGraph, index: dict | None = None
                  ) -> tuple[list[int], bool]:
    """Candidates previously seen with the query relation on the query side.

    Returns (pool, unfilterable): the true entity is appended when the
    training set never connects it via the relation, and the query is
    flagged. A relation with no candidates at all yields an empty pool
    (caller skips the query).
    """
    h, r, t = triple
    if index is None:
        index = build_target_index(graph)
    pool = list(index[direction].get(r, []))
    if not pool:
        return [], False
    true_entity = h if direction == "head" else t
    if true_entity not in pool:
        return pool + [true_entity], True
    return pool, False


def pessimistic_rank(scores: list[float], true_pos: int) -> int:
    """1 + number of candidates scoring >= the true score (excluding it)."""
    s = scores[true_pos]
    rank = 1
    for i, v in enumerate(scores):
        if i == true_pos:
            continue
        if v >= s:
            rank += 1
    return rank


def _aggregate(rows: list[QueryResult]) -> dict:
    out = {}
    for key in DIRECTIONS + ("all",):
        ranks = [q.rank for q in rows
                 if q.rank is not None and (key == "all" or q.direction == key)]
        if ranks:
            arr = np.array(ranks, dtype=np.float64)
            out[key] = {
                "n": len(ranks),
                "mr": float(arr.mean()),
                "hits10": float((arr <= 10).mean()),
                "mrr": float((1.0 / arr).mean()),
            }
        else:
            out[key] = {"n": 0, "mr": None, "hits10": None, "mrr": None}
    return out


def rank_queries(test_triples: list[tuple[int, int, int]], scorer,
                 train_graph: KnowledgeGraph, directions=DIRECTIONS,
                 filtered: bool = False,
                 known_triples: set[tuple[int, int, int]] | None = None) -> RankingReport:
    """Rank the true entity of each query among its filtered candidates.

    ``filtered=True`` additionally removes candidates that form another
    known-true triple (the train set plus ``known_triples``).
    """
    index = build_target_index(train_graph)
    known = set(train_graph.triple_set)
    if known_triples:
        known |= set(known_triples)
    rows: list[QueryResult] = []
    skipped = 0
    errors = 0
    for qid, (h, r, t) in enumerate(test_triples):
        for direction in directions:
            pool, unfilterable = target_filter((h, r, t), direction, train_graph, index)
            if not pool:
                skipped += 1
                rows.append(QueryResult(qid, direction, None, 0,
                                        ["skipped_unseen_relation"]))
                continue
            true_entity = h if direction == "head" else t
            if filtered:
                def is_other_true(c):
                    trip = (c, r, t) if direction == "head" else (h, r, c)
                    return c != true_entity and trip in known
                pool = [c for c in pool if not is_other_true(c)]
            flags = ["unfilterable"] if unfilterable else []
            try:
                scores = [float(scorer(c, r, t, direction)) if direction == "head"
                          else float(scorer(h, r, c, direction)) for c in pool]
            except Exception:
                errors += 1
                rows.append(QueryResult(qid, direction, None, len(pool),
                                        flags + ["scorer_error"]))
                continue
            rank = pessimistic_rank(scores, pool.index(true_entity))
            rows.append(QueryResult(qid, direction, rank, len(pool), flags))
    return RankingReport(rows, _aggregate(rows), skipped, errors)


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------

class ConMaskScorer:
    """Infer-mode model scorer with per-(entity, relation) fusion caching."""

    def __init__(self, params: ModelParams, corpus: EncodedCorpus,
                 mask_window: int = 6):
        self._ctx = ScoringContext(params, corpus, mask_window=mask_window,
                                   mode="infer")

    def __call__(self, h: int, r: int, t: int, direction: str = "tail") -> float:
        return float(self._ctx.score(h, r, t).data)


class RandomScorer:
    """Uniform scores for everything that passes target filtering."""

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def __call__(self, h: int, r: int, t: int, direction: str = "tail") -> float:
        return float(self._rng.random())


class SemanticAvgScorer:
    """Contextual features only: no masking, no fusion.

    The known side's description average plus the relation-name average
    is compared (cosine) against the candidate's name average.
    """

    def __init__(self, matrix: np.ndarray, corpus: EncodedCorpus):
        self._name_avg = [self._avg(matrix, idx) for idx in corpus.entity_names]
        self._desc_avg = [self._avg(matrix, idx) for idx in corpus.entity_descs]
        self._rel_avg = [self._avg(matrix, idx) for idx in corpus.relation_names]

    @staticmethod
    def _avg(matrix: np.ndarray, indices: np.ndarray) -> np.ndarray:
        if indices.size == 0:
            return np.zeros(matrix.shape[1])
        return matrix[indices].mean(axis=0)

    def __call__(self, h: int, r: int, t: int, direction: str = "tail") -> float:
        known, candidate = (t, h) if direction == "head" else (h, t)
        query = self._desc_avg[known] + self._rel_avg[r]
        target = self._name_avg[candidate]
        nq, nt = np.linalg.norm(query), np.linalg.norm(target)
        if nq == 0.0 or nt == 0.0:
            return 0.0
        return float(query @ target / (nq * nt))
