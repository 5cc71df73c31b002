"""ConMask scoring, target sampling, and the partial list-wise ranking loss.

A triple is scored by seven cosine features combined linearly with
trainable weights:

  theta1  cos( fusion of tail desc masked by r , avg head name )
  theta2  cos( fusion of head desc masked by r , fusion of tail desc masked by r )
  theta3  cos( avg relation name , avg head name )
  theta4  cos( avg head desc , avg tail desc )
  theta5  cos( avg relation name , avg tail name )
  theta6  cos( avg head name , avg tail name )
  theta7  cos( fusion of head desc masked by r , avg tail name )

Training minimizes, per triple, the negative log of the softmax mass the
true entities receive within a sampled candidate pool; the corrupted
side (head or tail) is chosen by a coin flip per triple.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conmask import numkit as nk
from conmask.encoder import FcnParams, fuse_batch, semantic_avg
from conmask.errors import DataError, ShapeError
from conmask.kgdata import EmbeddingTable, KnowledgeGraph, truncate_pad
from conmask.masking import apply_mask
from conmask.numkit.tensor import Tensor

N_FEATURES = 7


@dataclass
class EncodedCorpus:
    """Token index sequences per entity/relation, truncated to config lengths.

    Entities with an empty description fall back to their name tokens so
    the fusion input is always defined. Sequences are stored unpadded;
    valid lengths equal array lengths.
    """

    entity_names: list[np.ndarray]
    entity_descs: list[np.ndarray]
    relation_names: list[np.ndarray]
    entity_name_tokens: list[list[str]]
    entity_desc_tokens: list[list[str]]

    @classmethod
    def build(cls, kg: KnowledgeGraph, table: EmbeddingTable,
              max_content_len: int = 512, max_name_len: int = 512) -> "EncodedCorpus":
        names, descs = [], []
        name_tok, desc_tok = [], []
        for i in range(len(kg.entities)):
            ntoks = kg.entity_name_tokens[i][:max_name_len]
            dtoks = (kg.entity_desc_tokens[i] or kg.entity_name_tokens[i])[:max_content_len]
            name_tok.append(ntoks)
            desc_tok.append(dtoks)
            ns, nv = truncate_pad(table.encode(ntoks), max_name_len)
            ds, dv = truncate_pad(table.encode(dtoks), max_content_len)
            names.append(ns[:nv])
            descs.append(ds[:dv])
        rels = []
        for toks in kg.relation_name_tokens:
            rs, rv = truncate_pad(table.encode(toks[:max_name_len]), max_name_len)
            rels.append(rs[:rv])
        return cls(names, descs, rels, name_tok, desc_tok)


@dataclass
class ModelParams:
    """All trainable state: embeddings, fusion stack, combination weights."""

    embeddings: Tensor        # (V, k); row 0 is the frozen OOV/pad row
    fcn: FcnParams
    feature_weights: Tensor   # (7,)
    embeddings_trainable: bool = True

    @classmethod
    def init(cls, table: EmbeddingTable, conv_width: int = 3, n_layers: int = 3,
             rng: np.random.Generator | None = None,
             freeze_embeddings: bool = False) -> "ModelParams":
        emb = nk.parameter(table.matrix.copy(), "embeddings")
        emb.requires_grad = not freeze_embeddings
        return cls(
            embeddings=emb,
            fcn=FcnParams.init(table.dim, conv_width=conv_width, n_layers=n_layers, rng=rng),
            feature_weights=nk.parameter(np.ones(N_FEATURES), "feature_weights"),
            embeddings_trainable=not freeze_embeddings,
        )

    @property
    def dim(self) -> int:
        return self.embeddings.data.shape[1]

    def trainable(self) -> list[Tensor]:
        out = []
        if self.embeddings_trainable:
            out.append(self.embeddings)
        out += self.fcn.trainable()
        out.append(self.feature_weights)
        return out

    def zero_oov_grad(self) -> None:
        """Keep the reserved OOV/pad row pinned at zero."""
        if self.embeddings.grad is not None:
            self.embeddings.grad[0] = 0.0


class ScoringContext:
    """One forward build: shares embedding/average/fusion nodes across scores.

    In train mode every call belongs to the same computation graph, so
    node sharing both saves work and accumulates gradients correctly. A
    fresh context is required per optimization step; infer-mode contexts
    can live as long as the parameters stay untouched.
    """

    def __init__(self, params: ModelParams, corpus: EncodedCorpus, mask_window: int = 6,
                 mode: str = "infer", keep_p: float = 1.0,
                 rng: np.random.Generator | None = None):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.params = params
        self.corpus = corpus
        self.mask_window = mask_window
        self.mode = mode
        self.keep_p = keep_p
        self.rng = rng
        self._name_avg: dict[int, Tensor] = {}
        self._desc_avg: dict[int, Tensor] = {}
        self._rel_avg: dict[int, Tensor] = {}
        self._fusion: dict[tuple[int, int], Tensor] = {}

    def _rows(self, indices: np.ndarray, what: str, ident: int) -> Tensor:
        if indices.size == 0:
            raise DataError(f"{what} {ident} has no usable tokens")
        return nk.embed_rows(self.params.embeddings, indices)

    def name_avg(self, entity: int) -> Tensor:
        if entity not in self._name_avg:
            rows = self._rows(self.corpus.entity_names[entity], "entity", entity)
            self._name_avg[entity], _ = semantic_avg(rows, rows.data.shape[0])
        return self._name_avg[entity]

    def desc_avg(self, entity: int) -> Tensor:
        if entity not in self._desc_avg:
            rows = self._rows(self.corpus.entity_descs[entity], "entity", entity)
            self._desc_avg[entity], _ = semantic_avg(rows, rows.data.shape[0])
        return self._desc_avg[entity]

    def rel_avg(self, relation: int) -> Tensor:
        if relation not in self._rel_avg:
            rows = self._rows(self.corpus.relation_names[relation], "relation", relation)
            self._rel_avg[relation], _ = semantic_avg(rows, rows.data.shape[0])
        return self._rel_avg[relation]

    def masked_desc(self, entity: int, relation: int):
        desc = self._rows(self.corpus.entity_descs[entity], "entity", entity)
        rel = self._rows(self.corpus.relation_names[relation], "relation", relation)
        return apply_mask(desc, rel, self.mask_window)

    def prepare_fusions(self, pairs: list[tuple[int, int]]) -> None:
        """Fuse all (entity, relation) pairs not yet cached, in one batch."""
        todo = [p for p in dict.fromkeys(pairs) if p not in self._fusion]
        if not todo:
            return
        mcs = [self.masked_desc(e, r) for e, r in todo]
        outs = fuse_batch(mcs, self.params.fcn, self.mode,
                          keep_p=self.keep_p, rng=self.rng)
        for pair, out in zip(todo, outs):
            self._fusion[pair] = out

    def fusion(self, entity: int, relation: int) -> Tensor:
        if (entity, relation) not in self._fusion:
            self.prepare_fusions([(entity, relation)])
        return self._fusion[(entity, relation)]

    def features(self, h: int, r: int, t: int) -> list[Tensor]:
        head_fusion = self.fusion(h, r)
        tail_fusion = self.fusion(t, r)
        h_name, t_name = self.name_avg(h), self.name_avg(t)
        return [
            nk.cosine(tail_fusion, h_name),
            nk.cosine(head_fusion, tail_fusion),
            nk.cosine(self.rel_avg(r), h_name),
            nk.cosine(self.desc_avg(h), self.desc_avg(t)),
            nk.cosine(self.rel_avg(r), t_name),
            nk.cosine(h_name, t_name),
            nk.cosine(head_fusion, t_name),
        ]

    def score(self, h: int, r: int, t: int) -> Tensor:
        theta = nk.stack_scalars(self.features(h, r, t))
        return nk.tsum(nk.mul(self.params.feature_weights, theta))


def conmask_score(h: int, r: int, t: int, params: ModelParams, corpus: EncodedCorpus,
                  mode: str = "infer", mask_window: int = 6, keep_p: float = 1.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Score a single triple; convenience wrapper over ScoringContext."""
    ctx = ScoringContext(params, corpus, mask_window=mask_window, mode=mode,
                         keep_p=keep_p, rng=rng)
    return ctx.score(h, r, t)


@dataclass
class TargetSample:
    positives: list[int]
    negatives: list[int]
    direction: str  # "head" when the head side is corrupted, else "tail"

    @property
    def pool(self) -> list[int]:
        return self.positives + self.negatives


def sample_targets(h: int, r: int, t: int, graph: KnowledgeGraph, n_pos: int,
                   n_neg: int, rng: np.random.Generator, p_c: float,
                   entity_pool: list[int] | None = None) -> TargetSample:
    """Draw positive/negative entity sets for one triple.

    p_c > 0.5 corrupts the head side, otherwise the tail side. Positives
    are the true entities for the partial triple; negatives are uniform
    over the graph's connected entities that do not complete a known
    triple. Sampling is without replacement; short supplies are used
    whole. ``entity_pool`` overrides the negative-candidate universe.
    """
    if p_c > 0.5:
        positives_all = sorted({hh for hh, rr, tt in graph.triples if rr == r and tt == t})
        direction = "head"
    else:
        positives_all = sorted({tt for hh, rr, tt in graph.triples if hh == h and rr == r})
        direction = "tail"
    if not positives_all:
        raise DataError(f"no positives for triple ({h}, {r}, {t}); is it in the graph?")
    pos_set = set(positives_all)
    if entity_pool is None:
        entity_pool = sorted(graph.triple_entities())
    negatives_all = [e for e in entity_pool if e not in pos_set]

    def pick(pool: list[int], n: int) -> list[int]:
        if n >= len(pool):
            return list(pool)
        return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]

    return TargetSample(positives=pick(positives_all, n_pos),
                        negatives=pick(negatives_all, n_neg), direction=direction)


def softmax_score(ctx: ScoringContext, h: int, r: int, t: int,
                  candidates: list[int], direction: str) -> Tensor:
    """Softmax-normalized score of the true triple within a candidate pool."""
    if not candidates:
        raise ShapeError("softmax_score needs a non-empty candidate pool")
    true_entity = h if direction == "head" else t
    if true_entity not in candidates:
        raise ValueError(f"true entity {true_entity} not in candidate pool")
    scores = []
    true_score = None
    for c in candidates:
        s = ctx.score(c, r, t) if direction == "head" else ctx.score(h, r, c)
        scores.append(s)
        if c == true_entity and true_score is None:
            true_score = s
    lse = nk.logsumexp(nk.stack_scalars(scores))
    return nk.exp(nk.sub(true_score, lse))


def triple_loss(ctx: ScoringContext, h: int, r: int, t: int, sample: TargetSample) -> Tensor:
    """-(1/|E+|) sum over positives of log softmax mass, log-sum-exp form."""
    pool = sample.pool
    pool_scores = {}
    for c in pool:
        pool_scores[c] = ctx.score(c, r, t) if sample.direction == "head" \
            else ctx.score(h, r, c)
    lse = nk.logsumexp(nk.stack_scalars([pool_scores[c] for c in pool]))
    terms = [nk.sub(lse, pool_scores[p]) for p in sample.positives]
    total = terms[0]
    for term in terms[1:]:
        total = nk.add(total, term)
    return nk.mul(total, 1.0 / len(sample.positives))


def listwise_loss(batch: list[tuple[int, int, int]], params: ModelParams,
                  corpus: EncodedCorpus, graph: KnowledgeGraph,
                  rng: np.random.Generator, n_pos: int = 1, n_neg: int = 4,
                  mask_window: int = 6, keep_p: float = 0.5,
                  mode: str = "train") -> Tensor:
    """Mean per-triple ranking loss over a batch, one shared graph build."""
    if not batch:
        raise ShapeError("listwise_loss needs a non-empty batch")
    ctx = ScoringContext(params, corpus, mask_window=mask_window, mode=mode,
                         keep_p=keep_p, rng=rng)
    entity_pool = sorted(graph.triple_entities())
    samples = []
    fusion_pairs: list[tuple[int, int]] = []
    for h, r, t in batch:
        p_c = float(rng.uniform())
        sample = sample_targets(h, r, t, graph, n_pos, n_neg, rng, p_c,
                                entity_pool=entity_pool)
        samples.append(sample)
        if sample.direction == "head":
            fusion_pairs += [(c, r) for c in sample.pool]
            fusion_pairs.append((t, r))
        else:
            fusion_pairs += [(c, r) for c in sample.pool]
            fusion_pairs.append((h, r))
    # one batched fusion call so batch-norm sees the whole batch
    ctx.prepare_fusions(fusion_pairs)
    losses = [triple_loss(ctx, h, r, t, s) for (h, r, t), s in zip(batch, samples)]
    return nk.tmean(nk.stack_scalars(losses))
