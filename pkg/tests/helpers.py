"""Shared toy-graph builders for the model/trainer/evaluator tests."""

import numpy as np

from conmask.kgdata import EmbeddingTable, KnowledgeGraph


def unit(v):
    return v / np.linalg.norm(v)


def tiny_kg_and_table(k=6, seed=0):
    """Three entities, two relations, hand-buildable embeddings."""
    rng = np.random.default_rng(seed)
    entities = ["ada", "bert", "cleo"]
    relations = ["knows", "mentors"]
    triples = [(0, 0, 1), (1, 1, 2), (0, 0, 2)]
    name_tokens = [["ada"], ["bert"], ["cleo"]]
    desc_tokens = [
        ["ada", "studied", "with", "bert"],
        ["bert", "taught", "cleo", "daily"],
        ["cleo", "writes", "papers"],
    ]
    rel_tokens = [["knows"], ["mentors"]]
    kg = KnowledgeGraph(entities, relations, triples, name_tokens, desc_tokens, rel_tokens)
    words = sorted({w for toks in name_tokens + desc_tokens + rel_tokens for w in toks})
    matrix = np.vstack([np.zeros(k)] + [unit(rng.normal(size=k)) for _ in words])
    table = EmbeddingTable(["<oov>"] + words, matrix)
    return kg, table


def synthetic_indicator_kg(n_entities=50, n_relations=5, k=32, seed=0,
                           triples_per_entity=2, n_filler=20):
    """A knowledge graph whose descriptions give the answers away.

    Every entity has a unique name word. Each relation has a name word
    plus an "indicator" word embedded close to it. For every triple
    (h, r, t), h's description contains the indicator for r followed
    within a few tokens by t's name word (and symmetrically t's
    description points back at h), so a model that extracts words near
    indicators can read off the targets.
    """
    rng = np.random.default_rng(seed)
    entity_words = [f"ent{i:02d}" for i in range(n_entities)]
    rel_words = [f"tie{j}" for j in range(n_relations)]
    ind_words = [f"hint{j}" for j in range(n_relations)]
    filler_words = [f"fluff{m}" for m in range(n_filler)]

    vectors: dict[str, np.ndarray] = {}
    for w in entity_words + filler_words:
        vectors[w] = unit(rng.normal(size=k))
    for j, w in enumerate(rel_words):
        vectors[w] = unit(rng.normal(size=k))
        vectors[ind_words[j]] = unit(0.9 * vectors[w] + 0.436 * unit(rng.normal(size=k)))

    triples = []
    seen = set()
    mentions: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n_entities)}
    for i in range(n_entities):
        rels = rng.choice(n_relations, size=min(triples_per_entity, n_relations),
                          replace=False)
        for r in rels:
            t = int(rng.integers(0, n_entities))
            while t == i:
                t = int(rng.integers(0, n_entities))
            trip = (i, int(r), t)
            if trip in seen:
                continue
            seen.add(trip)
            triples.append(trip)
            mentions[i].append((int(r), t))
            mentions[t].append((int(r), i))

    def filler():
        return filler_words[int(rng.integers(0, n_filler))]

    desc_tokens = []
    for i in range(n_entities):
        toks = [entity_words[i], filler(), filler()]
        for r, other in mentions[i]:
            toks += [filler(), ind_words[r], filler(), entity_words[other]]
        toks.append(filler())
        desc_tokens.append(toks)

    kg = KnowledgeGraph(
        entities=[f"E{i}" for i in range(n_entities)],
        relations=[f"R{j}" for j in range(n_relations)],
        triples=triples,
        entity_name_tokens=[[w] for w in entity_words],
        entity_desc_tokens=desc_tokens,
        relation_name_tokens=[[w] for w in rel_words],
    )
    words = entity_words + rel_words + ind_words + filler_words
    matrix = np.vstack([np.zeros(k)] + [vectors[w] for w in words])
    table = EmbeddingTable(["<oov>"] + words, matrix)
    return kg, table
