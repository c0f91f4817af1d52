"""End-to-end model: graph learner → structure prompts → frozen encoder → two predictors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import KnowledgeGraph, NeighborIndex, TokenVocab, build_neighbor_index
from .encoder import (EncoderConfig, FrozenEncoder, HardTaskPrompt, PromptProjector,
                      assemble_hard_prompt, embed_entity_texts, project_structure_prompt)
from .graph import DisentangledGraphLearner, GraphLearnerConfig, GraphOutput, mi_regularizer
from .module import Module
from .predictors import (AblationMode, FusionWeights, StructuralHead, TextualHead, ensemble_scores,
                         make_scorer, map_prompt_to_struct, select_single_component,
                         structural_loss, structural_scores, textual_loss, textual_scores,
                         total_loss)
from .tensor import Tensor


@dataclass
class ForwardOutput:
    q_text: Tensor | None      # B × |E|
    q_struct: Tensor           # B × |E|
    beta: Tensor               # B × K_fed
    graph: GraphOutput
    selected: np.ndarray | None  # chosen component per query in single_component mode
    mapped_components: Tensor | None = None  # B × K_fed × d, prompt states mapped back to graph space
    mapped_relation: Tensor | None = None    # B × d


@dataclass
class LossParts:
    total: Tensor
    text: float | None
    struct: float
    mi: float


def build_encoder(cfg: RunConfig, vocab_size: int, rng: np.random.Generator) -> FrozenEncoder:
    enc_cfg = EncoderConfig(layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads, ffn=cfg.ffn,
                            max_positions=cfg.max_tokens + 8, prefix_positions=cfg.prefix_positions)
    return FrozenEncoder(enc_cfg, vocab_size, rng)


class PromptKGModel(Module):
    """Trainable parts are the graph learner, projector, heads and fusion weights.

    The encoder is held by reference and must be frozen before the model is
    built; its parameters are not part of this module's parameter list.
    """

    def __init__(self, cfg: RunConfig, graph: KnowledgeGraph, vocab: TokenVocab, encoder: FrozenEncoder,
                 rng: np.random.Generator, index: NeighborIndex | None = None):
        super().__init__()
        if not encoder.frozen:
            raise ValueError("encoder must be frozen before building the model")
        self.cfg = cfg
        self.mode = cfg.ablation
        self.graph = graph
        self.vocab = vocab
        self.encoder = encoder
        self.index = index if index is not None else build_neighbor_index(graph)
        self.learner = self.child("graph", DisentangledGraphLearner(
            GraphLearnerConfig(cfg.components, cfg.dim, cfg.graph_layers, cfg.composition),
            graph.num_entities, graph.num_relations, rng))
        self.projector = self.child("projector", PromptProjector(
            cfg.dim, cfg.proj_hidden, cfg.layers, cfg.prompt_len, cfg.hidden, rng))
        text_table = embed_entity_texts(graph, encoder, vocab, cfg.max_tokens)
        self.textual = self.child("textual", TextualHead(text_table, rng))
        scorer = make_scorer(cfg.scorer, cfg.dim, rng, cfg.gamma, cfg.conve_rows,
                             cfg.conve_kernels, cfg.conve_kernel_size)
        self.structural = self.child("structural", StructuralHead(cfg.dim, cfg.hidden, cfg.prompt_len, scorer, rng))
        self.fusion = self.child("fusion", FusionWeights())
        self.qualify_names()
        self._prompts: dict[tuple[int, int], HardTaskPrompt] = {}

    def prompt(self, h: int, r: int) -> HardTaskPrompt:
        key = (int(h), int(r))
        if key not in self._prompts:
            self._prompts[key] = assemble_hard_prompt(key[0], key[1], self.graph, self.vocab, self.cfg.max_tokens)
        return self._prompts[key]

    def forward(self, queries: np.ndarray) -> ForwardOutput:
        """Score every entity as the tail of each ``(h, r)`` row in ``queries``."""
        queries = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
        heads, rels = queries[:, 0], queries[:, 1]
        B = len(queries)
        graph_out = self.learner.forward(self.index)
        comps = T.take(graph_out.components, heads)           # B × K × d
        rel = T.take(graph_out.relations, rels)                # B × d
        candidates = graph_out.components                      # |E| × K × d
        selected = None
        if self.mode is AblationMode.SINGLE_COMPONENT:
            selected = select_single_component(comps.data, rel.data)
            comps = T.reshape(comps[np.arange(B), selected], (B, 1, self.cfg.dim))
        K = comps.shape[1]
        prefix = project_structure_prompt(comps, rel, self.projector)
        mask_hidden, prompt_hidden, _ = self.encoder.encode([self.prompt(h, r) for h, r in queries], prefix)
        n, H = self.cfg.prompt_len, self.cfg.hidden
        blocks = T.reshape(prompt_hidden, (B, K + 1, n, H))
        mapped = map_prompt_to_struct(blocks, self.structural)  # B × (K+1) × d
        mapped_comps = mapped[:, :K]
        mapped_rel = mapped[:, K]
        if selected is None:
            q_struct, beta = structural_scores(mapped_comps, mapped_rel, candidates, self.structural)
        else:
            # score the mapped component against every candidate component, keep the selected one
            K_all = self.cfg.components
            spread = T.reshape(mapped_comps, (B, 1, self.cfg.dim)) + T.Tensor(np.zeros((1, K_all, 1)))
            per = self.structural.scorer.score_all(spread, mapped_rel, T.transpose(candidates, (1, 0, 2)))
            q_struct = per[np.arange(B), selected]
            beta = T.Tensor(np.ones((B, 1)))
        q_text = textual_scores(mask_hidden, self.textual) if self.mode.textual else None
        return ForwardOutput(q_text, q_struct, beta, graph_out, selected, mapped_comps, mapped_rel)

    def loss(self, triples: np.ndarray) -> LossParts:
        triples = np.asarray(triples, dtype=np.int64)
        out = self.forward(triples[:, :2])
        gold = triples[:, 2]
        eps = self.cfg.label_smoothing
        l_s = structural_loss(out.q_struct, gold, eps)
        l_t = textual_loss(out.q_text, gold, eps) if out.q_text is not None else None
        l_mi = mi_regularizer(out.graph.components, np.unique(triples[:, 0]))
        total = total_loss(l_t, l_s, l_mi, self.fusion, self.cfg.mi_weight)
        return LossParts(total, None if l_t is None else l_t.item(), l_s.item(), l_mi.item())

    def score(self, queries: np.ndarray) -> dict[str, np.ndarray]:
        """Score arrays keyed ``T``/``S``/``C`` (``T`` and ``C`` only with the textual predictor)."""
        with T.no_grad():
            out = self.forward(queries)
        scores = {"S": out.q_struct.data}
        if out.q_text is not None:
            scores["T"] = out.q_text.data
            scores["C"] = ensemble_scores(out.q_text, out.q_struct, self.fusion)
        return scores

    def forward_detail(self, queries: np.ndarray) -> ForwardOutput:
        with T.no_grad():
            return self.forward(queries)
