"""Filtered ranking metrics, degree buckets and per-query explanations."""

from __future__ import annotations

import json
from importlib import resources
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .data import NeighborIndex, filtered_candidates, known_answers
from .predictors import ensemble_scores
from .errors import ContractError, QueryIndexError

HITS_AT = (1, 3, 10)
PREDICTORS = ("T", "S", "C")


def filtered_rank(scores, gold: int, exclusions) -> int:
    """1-based rank of ``gold`` among non-excluded entities; ties count against gold."""
    scores = np.asarray(scores, dtype=float)
    exclusions = set(int(e) for e in exclusions)
    if gold in exclusions:
        raise ContractError(f"gold entity {gold} is in the exclusion set")
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[list(exclusions)] = False
    keep[gold] = False
    return 1 + int(np.count_nonzero(scores[keep] >= scores[gold]))


def batch_filtered_ranks(scores: np.ndarray, triples: np.ndarray, known) -> np.ndarray:
    """Vectorised ``filtered_rank`` over a B×|E| score matrix."""
    B, n = scores.shape
    rows = np.arange(B)
    gold = triples[:, 2]
    excluded = np.zeros((B, n), dtype=bool)
    for b, (h, r, t) in enumerate(triples):
        excluded[b, list(known.get((int(h), int(r)), ()))] = True
    excluded[rows, gold] = True
    ahead = (scores >= scores[rows, gold][:, None]) & ~excluded
    return 1 + ahead.sum(axis=1)


@dataclass
class RankingReport:
    ranks: list[int]
    mrr: float
    hits: dict[str, float]
    count: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RankingReport":
        return cls(list(d["ranks"]), float(d["mrr"]), {str(k): float(v) for k, v in d["hits"].items()},
                   int(d["count"]))


def aggregate(ranks) -> RankingReport:
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ContractError("cannot aggregate an empty rank list")
    arr = np.asarray(ranks, dtype=float)
    hits = {str(k): float(np.mean(arr <= k)) for k in HITS_AT}
    return RankingReport(ranks, float(np.mean(1.0 / arr)), hits, len(ranks))


def random_chance_mrr(triples: np.ndarray, known, num_entities: int) -> float:
    """Expected filtered MRR of uniformly random scores: mean over queries of H(n)/n."""
    values = []
    for h, r, t in triples:
        n = num_entities - len(filtered_candidates((h, r, t), known))
        values.append(np.sum(1.0 / np.arange(1, n + 1)) / n)
    return float(np.mean(values))


# -- degree buckets --------------------------------------------------------

@dataclass
class DegreeBucketReport:
    boundaries: list[int]
    labels: list[str]
    mrr: list[float | None]
    counts: list[int]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegreeBucketReport":
        return cls(list(d["boundaries"]), list(d["labels"]), list(d["mrr"]), list(d["counts"]))


def bucket_labels(boundaries) -> list[str]:
    edges = list(boundaries)
    return [f"[{lo},{hi})" for lo, hi in zip(edges, edges[1:])] + [f"[{edges[-1]},inf)"]


def degree_buckets(triples: np.ndarray, ranks, index: NeighborIndex, boundaries=(0, 5, 10, 20, 50, 100)) -> DegreeBucketReport:
    """Group queries by the known (head) entity's neighbor count, self-loop excluded."""
    boundaries = [int(b) for b in boundaries]
    if any(b >= c for b, c in zip(boundaries, boundaries[1:])):
        raise ContractError("bucket boundaries must be strictly increasing")
    ranks = np.asarray(ranks, dtype=float)
    degrees = np.asarray([index.degree(int(h)) for h in triples[:, 0]])
    slot = np.searchsorted(boundaries, degrees, side="right") - 1
    slot = np.clip(slot, 0, len(boundaries) - 1)
    mrr, counts = [], []
    for b in range(len(boundaries)):
        sel = slot == b
        counts.append(int(sel.sum()))
        mrr.append(float(np.mean(1.0 / ranks[sel])) if sel.any() else None)
    return DegreeBucketReport(boundaries, bucket_labels(boundaries), mrr, counts)


# -- full evaluation -------------------------------------------------------

@dataclass
class EvaluationResult:
    split: str
    reports: dict[str, RankingReport]
    buckets: dict[str, DegreeBucketReport] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "meta": self.meta,
            "reports": {k: v.to_dict() for k, v in self.reports.items()},
            "buckets": {k: v.to_dict() for k, v in self.buckets.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationResult":
        return cls(d["split"], {k: RankingReport.from_dict(v) for k, v in d["reports"].items()},
                   {k: DegreeBucketReport.from_dict(v) for k, v in d.get("buckets", {}).items()},
                   dict(d.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"split: {self.split}", f"{'pred':<6}{'MRR':>8}{'H@1':>8}{'H@3':>8}{'H@10':>8}{'n':>6}"]
        for name in PREDICTORS:
            if name in self.reports:
                r = self.reports[name]
                lines.append(f"{name:<6}{r.mrr:>8.4f}{r.hits['1']:>8.4f}{r.hits['3']:>8.4f}"
                             f"{r.hits['10']:>8.4f}{r.count:>6d}")
        for name, b in self.buckets.items():
            lines.append(f"degree buckets [{name}]")
            for label, m, c in zip(b.labels, b.mrr, b.counts):
                shown = "-" if m is None else f"{m:.4f}"
                lines.append(f"  {label:<12}{shown:>8}{c:>6d}")
        return "\n".join(lines) + "\n"


def collect_scores(model, triples: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
    parts: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(triples), batch_size):
        chunk = triples[start:start + batch_size]
        for name, s in model.score(chunk[:, :2]).items():
            parts.setdefault(name, []).append(s)
    return {k: np.concatenate(v, axis=0) for k, v in parts.items()}


def evaluate(model, split: str = "valid", buckets=None, batch_size: int = 64, known=None) -> EvaluationResult:
    triples = model.graph.split(split)
    if len(triples) == 0:
        raise ContractError(f"split {split!r} is empty")
    known = known if known is not None else known_answers(model.graph)
    scores = collect_scores(model, triples, batch_size)
    reports, bucket_reports = {}, {}
    for name in PREDICTORS:
        if name not in scores:
            continue
        ranks = batch_filtered_ranks(scores[name], triples, known)
        reports[name] = aggregate(ranks)
        if buckets is not None:
            bucket_reports[name] = degree_buckets(triples, ranks, model.index, buckets)
    return EvaluationResult(split, reports, bucket_reports)


def dump_scores(model, triples: np.ndarray, path, batch_size: int = 64) -> None:
    """TSV ``query_id  entity_id  Q_T  Q_S  ensemble`` (``nan`` where a predictor is off)."""
    scores = collect_scores(model, triples, batch_size)
    g = model.graph
    nan = np.full_like(scores["S"], np.nan)
    q_t, q_c = scores.get("T", nan), scores.get("C", nan)
    with open(path, "w", encoding="utf-8") as fh:
        for q, (h, r, _) in enumerate(triples):
            qid = f"{g.entity_ids[h]}|{g.relation_ids[r]}"
            for e in range(g.num_entities):
                values = "\t".join(repr(float(a[q, e])) for a in (q_t, scores["S"], q_c))
                fh.write(f"{qid}\t{g.entity_ids[e]}\t{values}\n")


# -- explanations ----------------------------------------------------------

@dataclass
class NeighborWeight:
    relation: str
    entity: str
    alpha: float


@dataclass
class Explanation:
    head: str
    relation: str
    beta: list[float]
    components: list[int]
    neighbors: list[list[NeighborWeight]]
    predictions: dict[str, list[tuple[str, float]]]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictions"] = {k: [list(p) for p in v] for k, v in self.predictions.items()}
        return d

    def to_text(self) -> str:
        lines = [f"query: ({self.head}, {self.relation}, ?)"]
        for k, beta, nbrs in zip(self.components, self.beta, self.neighbors):
            lines.append(f"component {k + 1}  beta={beta:.4f}")
            for n in nbrs:
                lines.append(f"    {n.alpha:8.4f}  {n.relation:<28} {n.entity}")
        for name, preds in self.predictions.items():
            shown = ", ".join(f"{e} ({s:.3f})" for e, s in preds)
            lines.append(f"top [{name}]: {shown}")
        return "\n".join(lines) + "\n"


def resolve_query(graph, head_id: str, relation_id: str) -> tuple[int, int]:
    try:
        return graph.entity_index(head_id), graph.relation_index(relation_id)
    except KeyError as exc:
        raise QueryIndexError(f"unknown query id {exc.args[0]!r}") from None


def explain(model, head_id: str, relation_id: str, top_m: int = 2, top_j: int = 5) -> Explanation:
    h, r = resolve_query(model.graph, head_id, relation_id)
    out = model.forward_detail(np.asarray([[h, r]]))
    g = model.graph
    alpha = out.graph.attention[-1]
    edges = np.nonzero(model.index.center == h)[0]
    if out.selected is not None:
        components = [int(out.selected[0])]
    else:
        components = list(range(model.cfg.components))
    relation_names = list(g.relation_names) + ["self"]
    neighbors = []
    for k in components:
        weights = alpha[edges, k]
        order = np.argsort(-weights, kind="stable")[:top_m]
        neighbors.append([NeighborWeight(relation_names[model.index.relation[edges[i]]],
                                         g.entity_names[model.index.neighbor[edges[i]]],
                                         float(weights[i])) for i in order])
    predictions = {}
    scored = {"S": out.q_struct.data[0]}
    if out.q_text is not None:
        scored["T"] = out.q_text.data[0]
        scored["C"] = ensemble_scores(out.q_text, out.q_struct, model.fusion)[0]
    for name in PREDICTORS:
        if name in scored:
            top = np.argsort(-scored[name], kind="stable")[:top_j]
            predictions[name] = [(g.entity_names[i], float(scored[name][i])) for i in top]
    return Explanation(g.entity_names[h], g.relation_names[r], [float(b) for b in out.beta.data[0]],
                       components, neighbors, predictions)


def save_report(result: EvaluationResult, path) -> None:
    Path(path).write_text(result.to_json() + "\n", encoding="utf-8")


# -- schemas ---------------------------------------------------------------

REPORT_SCHEMA = "evaluation_report.schema.json"
EXPLANATION_SCHEMA = "explanation.schema.json"


def load_schema(name: str) -> dict:
    return json.loads(resources.files("promptkg").joinpath("schemas").joinpath(name).read_text(encoding="utf-8"))


def validate_document(doc: dict, schema_name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` breaks the bundled schema."""
    jsonschema.validate(doc, load_schema(schema_name))
