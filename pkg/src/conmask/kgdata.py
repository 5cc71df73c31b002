"""Corpus ingestion: triples, names, descriptions, word vectors, splits.

File formats (UTF-8 throughout):
  triples.tsv       head<TAB>relation<TAB>tail
  names.tsv         id_string<TAB>name text (entities and, optionally, relations)
  descriptions.tsv  entity<TAB>description text
  vectors.txt       word v1 ... vk, whitespace-separated, one word per line
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from conmask.errors import DataError

OOV_WORD = "<oov>"
OOV_INDEX = 0  # reserved zero row, doubles as the padding row

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_stopwords: set[str] | None = None


def stopword_set() -> set[str]:
    """The bundled stop-word list (cached)."""
    global _stopwords
    if _stopwords is None:
        text = resources.files("conmask").joinpath("data/stopwords.txt").read_text("utf-8")
        _stopwords = {line.strip() for line in text.splitlines()
                      if line.strip() and not line.startswith("#")}
    return _stopwords


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric, drop stop words; digits kept."""
    stops = stopword_set()
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in stops]


@dataclass
class KnowledgeGraph:
    """Entity/relation vocabularies, deduplicated triples, token lists."""

    entities: list[str]
    relations: list[str]
    triples: list[tuple[int, int, int]]
    entity_name_tokens: list[list[str]]
    entity_desc_tokens: list[list[str]]
    relation_name_tokens: list[list[str]]
    entity_index: dict[str, int] = field(default_factory=dict)
    relation_index: dict[str, int] = field(default_factory=dict)
    triple_set: set[tuple[int, int, int]] = field(default_factory=set)

    def __post_init__(self):
        if not self.entity_index:
            self.entity_index = {e: i for i, e in enumerate(self.entities)}
        if not self.relation_index:
            self.relation_index = {r: i for i, r in enumerate(self.relations)}
        if not self.triple_set:
            self.triple_set = set(self.triples)

    def with_triples(self, triples: list[tuple[int, int, int]]) -> "KnowledgeGraph":
        """Same vocabularies and texts, different triple set."""
        return KnowledgeGraph(self.entities, self.relations, list(triples),
                              self.entity_name_tokens, self.entity_desc_tokens,
                              self.relation_name_tokens)

    def triple_entities(self) -> set[int]:
        out: set[int] = set()
        for h, _, t in self.triples:
            out.add(h)
            out.add(t)
        return out


def _read_tsv(path, n_fields: int, what: str) -> list[tuple[str, ...]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise DataError(f"{what} line {lineno}: expected {n_fields} tab-separated "
                                f"fields, got {len(parts)}")
            rows.append(tuple(parts))
    return rows


def _name_tokens(name_text: str, ident: str) -> list[str]:
    toks = tokenize(name_text)
    if not toks:
        # name made entirely of stop words: keep the raw alphanumeric tokens
        toks = _TOKEN_RE.findall(name_text.lower())
    if not toks:
        raise DataError(f"entity {ident!r} has a name with no usable tokens: {name_text!r}")
    return toks


def load_graph(triples_path, names_path, descriptions_path) -> KnowledgeGraph:
    """Parse the three corpus files into a KnowledgeGraph.

    Ids are assigned in first-seen order: relations by the triples file,
    entities by the names file. Duplicate triples are dropped. A triple
    referencing an entity without a name row is an error.
    """
    raw_triples = _read_tsv(triples_path, 3, "triples")
    names = _read_tsv(names_path, 2, "names")
    descs = _read_tsv(descriptions_path, 2, "descriptions")

    relations: list[str] = []
    relation_index: dict[str, int] = {}
    for _, r, _ in raw_triples:
        if r not in relation_index:
            relation_index[r] = len(relations)
            relations.append(r)

    name_text: dict[str, str] = {}
    entities: list[str] = []
    entity_index: dict[str, int] = {}
    for ident, text in names:
        if ident in name_text:
            continue  # first occurrence wins
        name_text[ident] = text
        if ident not in relation_index:
            entity_index[ident] = len(entities)
            entities.append(ident)

    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    for h, r, t in raw_triples:
        for e in (h, t):
            if e not in entity_index:
                raise DataError(f"triple references entity {e!r} with no name row")
        trip = (entity_index[h], relation_index[r], entity_index[t])
        if trip not in seen:
            seen.add(trip)
            triples.append(trip)

    desc_text: dict[str, str] = {}
    for ident, text in descs:
        if ident not in desc_text:
            desc_text[ident] = text

    entity_name_tokens = [_name_tokens(name_text[e], e) for e in entities]
    entity_desc_tokens = [tokenize(desc_text.get(e, "")) for e in entities]
    # relations without a names row fall back to their tokenized id string
    relation_name_tokens = [_name_tokens(name_text.get(r, r), r) for r in relations]

    return KnowledgeGraph(entities, relations, triples, entity_name_tokens,
                          entity_desc_tokens, relation_name_tokens)


def corpus_vocabulary(kg: KnowledgeGraph, min_count: int = 1) -> set[str]:
    """Words used by the graph's token lists, optionally count-thresholded."""
    counts: dict[str, int] = {}
    for lists in (kg.entity_name_tokens, kg.entity_desc_tokens, kg.relation_name_tokens):
        for toks in lists:
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
    return {w for w, c in counts.items() if c >= min_count}


@dataclass
class EmbeddingTable:
    """word -> k-dim vector map; row 0 is the reserved OOV/padding row."""

    words: list[str]
    matrix: np.ndarray
    trainable: bool = True
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {w: i for i, w in enumerate(self.words)}
        self.matrix = np.asarray(self.matrix, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def encode(self, tokens: list[str]) -> np.ndarray:
        """Token strings -> row indices; unknown words map to the OOV row."""
        return np.array([self.index.get(t, OOV_INDEX) for t in tokens], dtype=np.int64)


def load_embeddings(path, vocabulary: set[str]) -> EmbeddingTable:
    """Load pretrained vectors, keeping only words in ``vocabulary``.

    The dimension is inferred from the first line; any line with a
    different field count is an error naming the line number. Repeated
    words keep their first vector.
    """
    words: list[str] = [OOV_WORD]
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise DataError(f"vectors line {lineno}: no vector components")
            if len(parts) != dim + 1:
                raise DataError(f"vectors line {lineno}: expected {dim + 1} fields, "
                                f"got {len(parts)}")
            word = parts[0]
            if word in seen or word not in vocabulary:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise DataError(f"vectors line {lineno}: {exc}") from exc
            seen.add(word)
            words.append(word)
            rows.append(vec)
    if dim is None:
        raise DataError(f"vectors file {path} is empty")
    matrix = np.zeros((len(words), dim))
    for i, vec in enumerate(rows, start=1):
        matrix[i] = vec
    return EmbeddingTable(words, matrix)


def truncate_pad(indices, max_len: int, pad_index: int = OOV_INDEX) -> tuple[np.ndarray, int]:
    """Fixed-length index sequence plus true (pre-padding) length."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    idx = np.asarray(list(indices), dtype=np.int64)
    valid = min(idx.size, max_len)
    out = np.full(max_len, pad_index, dtype=np.int64)
    out[:valid] = idx[:valid]
    return out, valid


@dataclass
class SplitSpec:
    """Parameters of an open/closed-world split."""

    entity_keep_fraction: float = 0.90
    edge_holdout_fraction: float = 0.10
    seed: int = 0
    mode: str = "open"

    def validate(self) -> None:
        if not 0.0 < self.entity_keep_fraction <= 1.0:
            raise ValueError(f"entity_keep_fraction must be in (0, 1], got {self.entity_keep_fraction}")
        if not 0.0 <= self.edge_holdout_fraction < 1.0:
            raise ValueError(f"edge_holdout_fraction must be in [0, 1), got {self.edge_holdout_fraction}")
        if self.mode not in ("open", "closed"):
            raise ValueError(f"mode must be 'open' or 'closed', got {self.mode!r}")


@dataclass
class Split:
    train: KnowledgeGraph
    validation: list[tuple[int, int, int]]
    test: list[tuple[int, int, int]]
    manifest: dict


def make_split(kg: KnowledgeGraph, spec: SplitSpec) -> Split:
    """Deterministic split of a graph into train / validation / test.

    Open mode keeps a fraction of entities, induces the subgraph, then
    holds out a fraction of its edges; validation/test are a 50/50 (by
    seed) partition of the held-out triples with at least one endpoint
    absent from train. Closed mode keeps every entity and holds out
    edges only.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    all_triples = kg.triples

    if spec.mode == "open":
        n_entities = len(kg.entities)
        n_keep = int(round(spec.entity_keep_fraction * n_entities))
        kept = set(rng.choice(n_entities, size=n_keep, replace=False).tolist()) \
            if n_keep < n_entities else set(range(n_entities))
        induced = [t for t in all_triples if t[0] in kept and t[2] in kept]
        base = induced
    else:
        base = list(all_triples)

    n_hold = int(round(spec.edge_holdout_fraction * len(base)))
    hold_pos = set(rng.choice(len(base), size=n_hold, replace=False).tolist()) if n_hold else set()
    train_triples = [t for i, t in enumerate(base) if i not in hold_pos]
    if not train_triples:
        raise DataError("split produced an empty train graph")
    train = kg.with_triples(train_triples)
    train_entities = train.triple_entities()

    pool = [t for t in all_triples if t not in train.triple_set]
    if spec.mode == "open":
        eligible = [t for t in pool if t[0] not in train_entities or t[2] not in train_entities]
        closed_holdout = len(pool) - len(eligible)
    else:
        eligible = pool
        closed_holdout = 0

    order = rng.permutation(len(eligible)).tolist()
    half = len(eligible) // 2
    validation = [eligible[i] for i in order[:half]]
    test = [eligible[i] for i in order[half:]]

    manifest = {
        "mode": spec.mode,
        "seed": spec.seed,
        "entity_keep_fraction": spec.entity_keep_fraction,
        "edge_holdout_fraction": spec.edge_holdout_fraction,
        "counts": {
            "entities": len(kg.entities),
            "relations": len(kg.relations),
            "input_triples": len(all_triples),
            "train_triples": len(train_triples),
            "train_entities": len(train_entities),
            "validation": len(validation),
            "test": len(test),
            "closed_holdout": closed_holdout,
        },
    }
    return Split(train, validation, test, manifest)


# ---------------------------------------------------------------------------
# Binary corpus bundle
# ---------------------------------------------------------------------------

_BUNDLE_MAGIC = b"CMBNDL01"
_BUNDLE_VERSION = 1


def save_bundle(path, kg: KnowledgeGraph, table: EmbeddingTable) -> None:
    """Write graph + embedding table as one versioned binary file."""
    payload = {
        "entities": kg.entities,
        "relations": kg.relations,
        "triples": [list(t) for t in kg.triples],
        "entity_name_tokens": kg.entity_name_tokens,
        "entity_desc_tokens": kg.entity_desc_tokens,
        "relation_name_tokens": kg.relation_name_tokens,
        "vocab": table.words,
        "dim": table.dim,
        "trainable": table.trainable,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    mat = np.ascontiguousarray(table.matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_BUNDLE_MAGIC)
        fh.write(struct.pack("<I", _BUNDLE_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def load_bundle(path) -> tuple[KnowledgeGraph, EmbeddingTable]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _BUNDLE_MAGIC:
            raise DataError(f"{path}: not a corpus bundle (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _BUNDLE_VERSION:
            raise DataError(f"{path}: bundle version {version} unsupported "
                            f"(expected {_BUNDLE_VERSION})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise DataError(f"{path}: truncated bundle")
        payload = json.loads(blob.decode("utf-8"))
        rows, cols = struct.unpack("<QQ", fh.read(16))
        raw = fh.read(rows * cols * 8)
        if len(raw) != rows * cols * 8:
            raise DataError(f"{path}: truncated bundle matrix")
    matrix = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    kg = KnowledgeGraph(
        payload["entities"], payload["relations"],
        [tuple(t) for t in payload["triples"]],
        payload["entity_name_tokens"], payload["entity_desc_tokens"],
        payload["relation_name_tokens"],
    )
    table = EmbeddingTable(payload["vocab"], matrix, trainable=payload["trainable"])
    return kg, table
