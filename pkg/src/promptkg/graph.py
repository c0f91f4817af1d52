"""Disentangled relation-aware graph attention over the neighbor index.

Each entity carries K component vectors.  Per component, a neighbor's
weight is the softmax (over the entity's neighbor pairs) of the dot product
between the two endpoints' components after a per-relation Hadamard
projection.  Aggregated messages pass through ``tanh``; relation embeddings
are carried to the next layer by a layer-specific linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import NeighborIndex
from .errors import ConfigError
from .module import Module
from .tensor import Tensor

COMPOSITIONS = ("multiply", "subtract", "crossover")
SUPPORTED_K = (1, 2, 4, 6)


@dataclass(frozen=True)
class GraphLearnerConfig:
    components: int = 2
    dim: int = 32
    layers: int = 1
    composition: str = "multiply"

    def __post_init__(self):
        if self.components not in SUPPORTED_K:
            raise ConfigError(f"component count must be one of {SUPPORTED_K}, got {self.components}")
        if self.dim < 2:
            raise ConfigError(f"embedding size must be >= 2, got {self.dim}")
        if self.layers < 1:
            raise ConfigError(f"aggregation layers must be >= 1, got {self.layers}")
        if self.composition not in COMPOSITIONS:
            raise ConfigError(f"composition must be one of {COMPOSITIONS}, got {self.composition!r}")


@dataclass
class GraphOutput:
    components: Tensor          # |E| × K × d
    relations: Tensor           # (|R| + 1) × d, self-loop relation last
    attention: list[np.ndarray]  # per layer, edges × K


def compose(kind: str, projected: Tensor, relation: Tensor) -> Tensor:
    if kind == "multiply":
        return projected * relation
    if kind == "subtract":
        return projected - relation
    if kind == "crossover":
        return projected * relation + projected
    raise ConfigError(f"unknown composition {kind!r}")


class DisentangledGraphLearner(Module):
    def __init__(self, config: GraphLearnerConfig, num_entities: int, num_relations: int,
                 rng: np.random.Generator):
        """``num_relations`` counts real relations; one self-loop slot is appended."""
        super().__init__()
        self.config = config
        self.num_entities = num_entities
        self.num_relations = num_relations + 1
        K, d = config.components, config.dim
        bound = 1.0 / np.sqrt(d)

        def uniform(*shape):
            return rng.uniform(-bound, bound, size=shape)

        self.ent_comp = self.param("ent_comp", uniform(num_entities, K, d))
        self.rel_emb = self.param("rel_emb", uniform(self.num_relations, d))
        self.rel_proj = self.param("rel_proj", uniform(self.num_relations, d))
        self.thetas = [self.param(f"theta_{l}", uniform(d, d)) for l in range(config.layers)]

    def relation_project(self, v: Tensor, rel_id) -> Tensor:
        return v * T.take(self.rel_proj, rel_id)

    def edge_scores(self, comps: Tensor, index: NeighborIndex) -> Tensor:
        """Dot products of relation-projected endpoint components, edges × K."""
        proj = T.reshape(T.take(self.rel_proj, index.relation), (index.num_edges, 1, self.config.dim))
        vi = T.take(comps, index.center) * proj
        vj = T.take(comps, index.neighbor) * proj
        return T.reduce_sum(vi * vj, axis=-1)

    def attention(self, comps: Tensor, index: NeighborIndex) -> Tensor:
        return T.segment_softmax(self.edge_scores(comps, index), index.center, self.num_entities)

    def aggregate_layer(self, layer: int, comps: Tensor, rels: Tensor, index: NeighborIndex):
        """One aggregation pass (``layer`` counts from 1).

        Returns new components, next-layer relation embeddings and the
        attention weights used.
        """
        if not 1 <= layer <= self.config.layers:
            raise ConfigError(f"layer {layer} outside [1, {self.config.layers}]")
        d = self.config.dim
        alpha = self.attention(comps, index)
        proj = T.reshape(T.take(self.rel_proj, index.relation), (index.num_edges, 1, d))
        rel = T.reshape(T.take(rels, index.relation), (index.num_edges, 1, d))
        message = compose(self.config.composition, T.take(comps, index.neighbor) * proj, rel)
        weighted = message * T.reshape(alpha, alpha.shape + (1,))
        new_comps = T.tanh(T.segment_sum(weighted, index.center, self.num_entities))
        new_rels = T.matmul(rels, self.thetas[layer - 1])
        return new_comps, new_rels, alpha

    def forward(self, index: NeighborIndex) -> GraphOutput:
        if len(index) != self.num_entities:
            raise ConfigError(f"index covers {len(index)} entities, table has {self.num_entities}")
        comps, rels = self.ent_comp, self.rel_emb
        attention = []
        for layer in range(1, self.config.layers + 1):
            comps, rels, alpha = self.aggregate_layer(layer, comps, rels, index)
            attention.append(alpha.data)
        return GraphOutput(comps, rels, attention)


def mi_regularizer(components: Tensor, entity_batch=None, eps: float = 1e-12) -> Tensor:
    """Mean squared cosine similarity over distinct component pairs.

    ``components`` is ``|E| × K × d``; ``entity_batch`` selects rows (all
    when omitted).  Zero when K == 1.
    """
    if entity_batch is not None:
        components = T.take(components, entity_batch)
    n, K, _ = components.shape
    if K < 2:
        return Tensor(0.0)
    norms = T.sqrt(T.reduce_sum(T.square(components), axis=-1, keepdims=True) + eps)
    unit = components / norms
    cos = T.matmul(unit, T.transpose(unit, (0, 2, 1)))
    off_diag = 1.0 - np.eye(K)
    return T.reduce_sum(T.square(cos) * off_diag) * (1.0 / (n * K * (K - 1)))
