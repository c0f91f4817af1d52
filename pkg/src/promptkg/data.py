"""Knowledge-graph ingestion, inverse-triple augmentation, vocab and neighbor index."""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError, DataError, ParseError, ReferentialIntegrityError

SPLITS = ("train", "valid", "test")
REVERSE_PREFIX = "reverse: "
MAX_TOKENS = 72


@dataclass(frozen=True)
class KnowledgeGraph:
    entity_ids: tuple[str, ...]
    entity_names: tuple[str, ...]
    entity_descriptions: tuple[str, ...]
    relation_ids: tuple[str, ...]
    relation_names: tuple[str, ...]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    augmented: bool = False
    raw_relation_count: int = 0
    _entity_lookup: dict = field(default=None, repr=False, compare=False)
    _relation_lookup: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_entity_lookup", {e: i for i, e in enumerate(self.entity_ids)})
        object.__setattr__(self, "_relation_lookup", {r: i for i, r in enumerate(self.relation_ids)})
        if not self.raw_relation_count:
            object.__setattr__(self, "raw_relation_count", len(self.relation_ids))

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)

    @property
    def self_loop_relation(self) -> int:
        """Relation id reserved for the self-connection (one past the last real id)."""
        return self.num_relations

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def entity_index(self, entity_id: str) -> int:
        return self._entity_lookup[entity_id]

    def relation_index(self, relation_id: str) -> int:
        return self._relation_lookup[relation_id]

    def entity_text(self, i: int) -> str:
        name, desc = self.entity_names[i], self.entity_descriptions[i]
        return f"{name}: {desc}" if desc else name

    def relation_text(self, r: int) -> str:
        return self.relation_names[r]

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test], axis=0)

    def counts(self) -> dict:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            "train": int(len(self.train)),
            "valid": int(len(self.valid)),
            "test": int(len(self.test)),
            "augmented": self.augmented,
            "raw_relations": self.raw_relation_count,
        }


def _read_tsv(path: Path, min_fields: int, max_fields: int):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if not min_fields <= len(fields) <= max_fields:
                raise ParseError(path, line_no, f"expected {min_fields}-{max_fields} tab-separated fields, got {len(fields)}")
            if any(not f.strip() for f in fields[:min_fields]):
                raise ParseError(path, line_no, "empty identifier field")
            yield line_no, fields


def _read_triples(path, entities: Mapping[str, int], relations: Mapping[str, int]) -> np.ndarray:
    path = Path(path)
    rows = []
    for line_no, (h, r, t) in _read_tsv(path, 3, 3):
        missing = [x for x, table in ((h, entities), (t, entities)) if x not in table]
        if r not in relations:
            missing.append(r)
        if missing:
            raise ReferentialIntegrityError(f"{path}:{line_no}: unknown id(s) {missing}")
        rows.append((entities[h], relations[r], entities[t]))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def load_graph(triples_paths, entity_text_path, relation_text_path) -> KnowledgeGraph:
    """Parse TSV dumps into an indexed graph.

    ``triples_paths`` is a mapping ``split -> path`` (missing splits are
    empty) or a single path taken as the train split.
    """
    if not isinstance(triples_paths, Mapping):
        triples_paths = {"train": triples_paths}
    ent_ids, names, descs = [], [], []
    seen: set[str] = set()
    for line_no, fields in _read_tsv(Path(entity_text_path), 2, 3):
        if fields[0] in seen:
            raise ParseError(entity_text_path, line_no, f"duplicate entity id {fields[0]!r}")
        seen.add(fields[0])
        ent_ids.append(fields[0])
        names.append(fields[1])
        descs.append(fields[2] if len(fields) > 2 else "")
    rel_ids, rel_names = [], []
    seen = set()
    for line_no, fields in _read_tsv(Path(relation_text_path), 2, 2):
        if fields[0] in seen:
            raise ParseError(relation_text_path, line_no, f"duplicate relation id {fields[0]!r}")
        seen.add(fields[0])
        rel_ids.append(fields[0])
        rel_names.append(fields[1])
    ent_lookup = {e: i for i, e in enumerate(ent_ids)}
    rel_lookup = {r: i for i, r in enumerate(rel_ids)}
    splits = {}
    for name in SPLITS:
        p = triples_paths.get(name)
        splits[name] = _read_triples(p, ent_lookup, rel_lookup) if p else np.zeros((0, 3), dtype=np.int64)
    return KnowledgeGraph(tuple(ent_ids), tuple(names), tuple(descs), tuple(rel_ids), tuple(rel_names),
                          splits["train"], splits["valid"], splits["test"])


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}


def _dump_graph(root: Path) -> KnowledgeGraph:
    for name in ("entities.tsv", "relations.tsv"):
        if not (root / name).exists():
            raise ReferentialIntegrityError(f"{root}: missing {name}; triples cannot be resolved")
    if not (root / "train.tsv").exists():
        raise DataError(f"{root}: missing train.tsv")
    paths = {s: root / f"{s}.tsv" for s in SPLITS if (root / f"{s}.tsv").exists()}
    return load_graph(paths, root / "entities.tsv", root / "relations.tsv")


def load_dataset_dir(root) -> KnowledgeGraph:
    """Load a raw (not yet augmented) dump."""
    root = Path(root)
    if read_manifest(root).get("augmented"):
        raise ContractError(f"{root} holds an already augmented dump")
    return _dump_graph(root)


def load_augmented(root) -> KnowledgeGraph:
    """Load a dump ready for training: augment a raw one, trust a prepared one."""
    root = Path(root)
    manifest = read_manifest(root)
    if not manifest.get("augmented"):
        return add_inverse_triples(_dump_graph(root))
    g = _dump_graph(root)
    raw = int(manifest.get("raw_relations", g.num_relations // 2))
    if 2 * raw != g.num_relations:
        raise DataError(f"{root}: augmented dump has {g.num_relations} relations, expected {2 * raw}")
    return replace(g, augmented=True, raw_relation_count=raw)


def add_inverse_triples(g: KnowledgeGraph) -> KnowledgeGraph:
    """Append ``(t, r⁻¹, h)`` for every triple; inverse of ``r`` is ``r + |R|``."""
    if g.augmented:
        raise ContractError("graph is already augmented with inverse triples")
    n_rel = g.num_relations

    def with_inverse(triples):
        inverse = triples[:, ::-1].copy()
        inverse[:, 1] = triples[:, 1] + n_rel
        return np.concatenate([triples, inverse], axis=0)

    return replace(
        g,
        relation_ids=g.relation_ids + tuple(f"{REVERSE_PREFIX}{r}" for r in g.relation_ids),
        relation_names=g.relation_names + tuple(f"{REVERSE_PREFIX}{n}" for n in g.relation_names),
        train=with_inverse(g.train),
        valid=with_inverse(g.valid),
        test=with_inverse(g.test),
        augmented=True,
        raw_relation_count=n_rel,
    )


def write_dataset_dir(g: KnowledgeGraph, root, manifest_extra: dict | None = None) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "entities.tsv", "w", encoding="utf-8") as fh:
        for eid, name, desc in zip(g.entity_ids, g.entity_names, g.entity_descriptions):
            fh.write(f"{eid}\t{name}\t{desc}\n")
    with open(root / "relations.tsv", "w", encoding="utf-8") as fh:
        for rid, name in zip(g.relation_ids, g.relation_names):
            fh.write(f"{rid}\t{name}\n")
    for split in SPLITS:
        with open(root / f"{split}.tsv", "w", encoding="utf-8") as fh:
            for h, r, t in g.split(split):
                fh.write(f"{g.entity_ids[h]}\t{g.relation_ids[r]}\t{g.entity_ids[t]}\n")
    manifest = g.counts()
    manifest.update(manifest_extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- neighbor index --------------------------------------------------------

@dataclass(frozen=True)
class NeighborIndex:
    """Per-entity ``(neighbor, relation)`` pairs plus flat edge arrays.

    Edges are sorted by center entity; each entity's self-loop comes last
    in its block.
    """

    pairs: tuple[tuple[tuple[int, int], ...], ...]
    center: np.ndarray
    neighbor: np.ndarray
    relation: np.ndarray
    self_loop_relation: int

    def __getitem__(self, entity: int):
        return self.pairs[entity]

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def num_edges(self) -> int:
        return int(self.center.shape[0])

    def degree(self, entity: int) -> int:
        """Neighbor count excluding the self-loop."""
        return len(self.pairs[entity]) - 1

    def triples(self) -> np.ndarray:
        keep = self.relation != self.self_loop_relation
        return np.stack([self.center[keep], self.relation[keep], self.neighbor[keep]], axis=1)


def build_neighbor_index(g: KnowledgeGraph) -> NeighborIndex:
    if not g.augmented:
        raise ContractError("neighbor index requires an augmented graph")
    lists: list[list[tuple[int, int]]] = [[] for _ in range(g.num_entities)]
    for h, r, t in g.train:
        lists[h].append((int(t), int(r)))
    loop = g.self_loop_relation
    for i in range(g.num_entities):
        lists[i].append((i, loop))
    center = np.asarray([i for i, lst in enumerate(lists) for _ in lst], dtype=np.int64)
    neighbor = np.asarray([j for lst in lists for j, _ in lst], dtype=np.int64)
    relation = np.asarray([r for lst in lists for _, r in lst], dtype=np.int64)
    return NeighborIndex(tuple(tuple(lst) for lst in lists), center, neighbor, relation, loop)


# -- tokenization ----------------------------------------------------------

SPECIAL_TOKENS = ("[B]", "[S]", "[MASK]", "[PAD]", "[UNK]")
BOS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(len(SPECIAL_TOKENS))

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class TokenVocab:
    def __init__(self, tokens=()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, texts) -> "TokenVocab":
        vocab = cls()
        for text in texts:
            for tok in split_words(text):
                if tok not in SPECIAL_TOKENS:
                    vocab.add(tok)
        return vocab

    @classmethod
    def from_graph(cls, g: KnowledgeGraph) -> "TokenVocab":
        texts = [g.entity_text(i) for i in range(g.num_entities)]
        texts += list(g.relation_names)
        texts.append(REVERSE_PREFIX)
        return cls.build(texts)

    def to_json(self) -> str:
        return json.dumps(self.itos)

    @classmethod
    def from_json(cls, blob: str) -> "TokenVocab":
        itos = json.loads(blob)
        if tuple(itos[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError("serialized vocab does not start with the reserved special tokens")
        return cls(itos[len(SPECIAL_TOKENS):])


def tokenize(text: str, vocab: TokenVocab, max_len: int = MAX_TOKENS) -> list[int]:
    """Lowercased word/punctuation split, unknown words to [UNK], hard cap ``max_len``."""
    return [vocab.id(tok) for tok in split_words(text)[:max_len]]


# -- filtering -------------------------------------------------------------

def known_answers(g: KnowledgeGraph) -> dict[tuple[int, int], set[int]]:
    """``(h, r) -> {t}`` over train ∪ valid ∪ test."""
    known: dict[tuple[int, int], set[int]] = defaultdict(set)
    for h, r, t in g.all_triples():
        known[(int(h), int(r))].add(int(t))
    return dict(known)


def filtered_candidates(query, known: Mapping[tuple[int, int], set[int]]) -> set[int]:
    """Entities to exclude when ranking ``query = (h, r, gold)``."""
    h, r, gold = (int(x) for x in query)
    return set(known.get((h, r), ())) - {gold}
