"""Hard task prompt, structure-prompt projection and the frozen text encoder.

The encoder is a small post-LN transformer.  At every layer a block of
prefix vectors is prepended to the token states: prefixes contribute keys
and values to the token queries, and at the final layer they are also run as
queries so their outputs can be read back as text-enhanced structure states.
Prefix outputs at earlier layers would never be consumed (each layer gets a
fresh prefix block from the projector), so they are not computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import (BOS_ID, MASK_ID, MAX_TOKENS, PAD_ID, SEP_ID, KnowledgeGraph, TokenVocab,
                   tokenize)
from .errors import ConfigError, ContractError
from .module import Module
from .optim import AdamState, optimizer_step
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class HardTaskPrompt:
    token_ids: tuple[int, ...]
    mask_position: int


def assemble_hard_prompt(h_id: int, r_id: int, graph: KnowledgeGraph, vocab: TokenVocab,
                         max_tokens: int = MAX_TOKENS) -> HardTaskPrompt:
    """``[B] head-text [S] relation-text [S] [MASK] [S]``; text capped at ``max_tokens``."""
    rel = tokenize(graph.relation_text(r_id), vocab, max_tokens)
    head = tokenize(graph.entity_text(h_id), vocab, max_tokens - len(rel))
    ids = (BOS_ID, *head, SEP_ID, *rel, SEP_ID, MASK_ID, SEP_ID)
    return HardTaskPrompt(ids, len(ids) - 2)


def pad_batch(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences; returns ids and a boolean validity mask."""
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(sequences), width), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    max_positions: int = 128
    prefix_positions: bool = False
    max_prefix: int = 256

    def __post_init__(self):
        if min(self.layers, self.hidden, self.heads, self.ffn) < 1:
            raise ConfigError("encoder sizes must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.heads} heads")


@dataclass
class EncoderOutput:
    hidden: Tensor                  # B × T × H, final layer, token positions
    prefix_hidden: Tensor | None    # B × P × H, final layer, prefix positions
    attention: list[np.ndarray]     # per layer, B × heads × queries × (P + T)


class TransformerLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        H, F = cfg.hidden, cfg.ffn
        self.heads = cfg.heads

        def dense(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        self.wq = self.param("wq", dense(H, H))
        self.wk = self.param("wk", dense(H, H))
        self.wv = self.param("wv", dense(H, H))
        self.wo = self.param("wo", dense(H, H))
        self.bq = self.param("bq", np.zeros(H))
        self.bk = self.param("bk", np.zeros(H))
        self.bv = self.param("bv", np.zeros(H))
        self.bo = self.param("bo", np.zeros(H))
        self.ln1_g = self.param("ln1_g", np.ones(H))
        self.ln1_b = self.param("ln1_b", np.zeros(H))
        self.w1 = self.param("w1", dense(H, F))
        self.b1 = self.param("b1", np.zeros(F))
        self.w2 = self.param("w2", dense(F, H))
        self.b2 = self.param("b2", np.zeros(H))
        self.ln2_g = self.param("ln2_g", np.ones(H))
        self.ln2_b = self.param("ln2_b", np.zeros(H))

    def _split(self, x: Tensor) -> Tensor:
        B, N, H = x.shape
        return T.transpose(T.reshape(x, (B, N, self.heads, H // self.heads)), (0, 2, 1, 3))

    def __call__(self, queries: Tensor, context: Tensor, key_bias: np.ndarray):
        """``queries`` B×Nq×H attend over ``context`` B×Nk×H.

        ``key_bias`` (B×Nk) is 0 for visible keys and a large negative
        number for padding.
        """
        B, Nq, H = queries.shape
        dh = H // self.heads
        q = self._split(T.matmul(queries, self.wq) + self.bq)
        k = self._split(T.matmul(context, self.wk) + self.bk)
        v = self._split(T.matmul(context, self.wv) + self.bv)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        probs = T.softmax(scores + key_bias[:, None, None, :], axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, Nq, H))
        attended = T.matmul(ctx, self.wo) + self.bo
        y = T.layer_norm(queries + attended, self.ln1_g, self.ln1_b)
        ff = T.matmul(T.relu(T.matmul(y, self.w1) + self.b1), self.w2) + self.b2
        return T.layer_norm(y + ff, self.ln2_g, self.ln2_b), probs.data


class FrozenEncoder(Module):
    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        H = cfg.hidden
        self.tok_emb = self.param("tok_emb", rng.normal(0.0, 1.0, size=(vocab_size, H)))
        self.pos_emb = self.param("pos_emb", rng.normal(0.0, 0.1, size=(cfg.max_positions, H)))
        self.emb_ln_g = self.param("emb_ln_g", np.ones(H))
        self.emb_ln_b = self.param("emb_ln_b", np.zeros(H))
        self.mlm_bias = self.param("mlm_bias", np.zeros(vocab_size))
        if cfg.prefix_positions:
            self.prefix_pos = self.param("prefix_pos", rng.normal(0.0, 0.1, size=(cfg.max_prefix, H)))
        self.layers = [self.child(f"layer{i}", TransformerLayer(cfg, rng)) for i in range(cfg.layers)]
        self.frozen = False
        self.qualify_names()

    def freeze(self) -> None:
        if self.frozen:
            raise ContractError("encoder is already frozen")
        super().freeze()
        self.frozen = True

    def embed(self, ids: np.ndarray) -> Tensor:
        B, L = ids.shape
        if L > self.cfg.max_positions:
            raise ConfigError(f"sequence length {L} exceeds {self.cfg.max_positions} positions")
        x = T.take(self.tok_emb, ids) + T.getitem(self.pos_emb, slice(0, L))
        return T.layer_norm(x, self.emb_ln_g, self.emb_ln_b)

    def encode_ids(self, ids: np.ndarray, valid: np.ndarray, prefix: Tensor | None = None) -> EncoderOutput:
        """Run the stack; ``prefix`` is L × B × P × H or None."""
        B, L = ids.shape
        if prefix is not None:
            if prefix.ndim != 4 or prefix.shape[0] != len(self.layers) or prefix.shape[1] != B \
                    or prefix.shape[3] != self.cfg.hidden:
                raise ConfigError(f"prefix shape {prefix.shape} does not match "
                                  f"{len(self.layers)} layers × batch {B} × P × {self.cfg.hidden}")
            P = prefix.shape[2]
        else:
            P = 0
        key_bias_text = np.where(valid, 0.0, NEG_INF)
        key_bias = np.concatenate([np.zeros((B, P)), key_bias_text], axis=1)
        x = self.embed(ids)
        attention = []
        prefix_out = None
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            if P:
                block = prefix[l]
                if self.cfg.prefix_positions:
                    block = block + T.getitem(self.prefix_pos, slice(0, P))
                context = T.concat([block, x], axis=1)
            else:
                context = x
            queries = context if (l == last and P) else x
            out, probs = layer(queries, context, key_bias)
            attention.append(probs)
            if l == last and P:
                prefix_out = T.getitem(out, (slice(None), slice(0, P)))
                out = T.getitem(out, (slice(None), slice(P, P + L)))
            x = out
        return EncoderOutput(x, prefix_out, attention)

    def encode(self, prompts, prefix: Tensor | None = None):
        """Encode hard prompts; returns (mask_hidden B×H, prompt_hidden B×P×H, output)."""
        ids, valid = pad_batch([p.token_ids for p in prompts])
        out = self.encode_ids(ids, valid, prefix)
        rows = np.arange(len(prompts))
        cols = np.asarray([p.mask_position for p in prompts])
        mask_hidden = T.getitem(out.hidden, (rows, cols))
        return mask_hidden, out.prefix_hidden, out

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        return T.matmul(hidden, T.transpose(self.tok_emb, (1, 0))) + self.mlm_bias


class PromptProjector(Module):
    """Two-layer map from a d-vector to ``L × n × H`` prefix vectors."""

    def __init__(self, dim: int, proj_hidden: int, layers: int, prompt_len: int, hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.dim, self.proj_hidden = dim, proj_hidden
        self.layers, self.prompt_len, self.hidden = layers, prompt_len, hidden
        out = layers * hidden * prompt_len
        self.w_in = self.param("w_in", rng.uniform(-1, 1, size=(proj_hidden, dim)) / np.sqrt(dim))
        self.b_in = self.param("b_in", np.zeros(proj_hidden))
        self.w_out = self.param("w_out", rng.uniform(-1, 1, size=(out, proj_hidden)) / np.sqrt(proj_hidden))
        self.b_out = self.param("b_out", np.zeros(out))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.matmul(x, T.transpose(self.w_in, (1, 0))) + self.b_in)
        return T.matmul(h, T.transpose(self.w_out, (1, 0))) + self.b_out


def project_structure_prompt(components: Tensor, relation: Tensor, projector: PromptProjector) -> Tensor:
    """Map B×K×d components and B×d relation to an L × B × ((K+1)·n) × H prefix stack.

    Per layer the blocks are ordered component 1..K, then relation.
    """
    if components.ndim == 2:
        components = T.reshape(components, (1,) + components.shape)
        relation = T.reshape(relation, (1,) + relation.shape)
    B, K, d = components.shape
    if d != projector.dim or relation.shape != (B, d):
        raise ConfigError(f"projector expects dim {projector.dim}, got components {components.shape} "
                          f"and relation {relation.shape}")
    L, n, H = projector.layers, projector.prompt_len, projector.hidden
    stacked = T.concat([components, T.reshape(relation, (B, 1, d))], axis=1)
    flat = projector(stacked)
    blocks = T.reshape(flat, (B, K + 1, L, n, H))
    return T.reshape(T.transpose(blocks, (2, 0, 1, 3, 4)), (L, B, (K + 1) * n, H))


# -- surrogate pretraining -------------------------------------------------

def _mask_batch(seqs, rng: np.random.Generator, rate: float):
    ids, valid = pad_batch(seqs)
    chosen = (rng.random(ids.shape) < rate) & valid
    for i, s in enumerate(seqs):
        if not chosen[i].any():
            chosen[i, rng.integers(len(s))] = True
    targets = ids[chosen]
    masked = ids.copy()
    masked[chosen] = MASK_ID
    return masked, valid, chosen, targets


def mlm_loss(encoder: FrozenEncoder, seqs, rng: np.random.Generator, rate: float = 0.15) -> Tensor:
    masked, valid, chosen, targets = _mask_batch(seqs, rng, rate)
    hidden = encoder.encode_ids(masked, valid).hidden
    rows, cols = np.nonzero(chosen)
    logits = encoder.mlm_logits(T.getitem(hidden, (rows, cols)))
    return T.cross_entropy_smoothed(logits, targets, 0.0)


def corpus_sequences(texts, vocab: TokenVocab, max_tokens: int = MAX_TOKENS) -> list[tuple[int, ...]]:
    return [tuple(tokenize(t, vocab, max_tokens)) for t in texts if tokenize(t, vocab, max_tokens)]


def pretrain_and_freeze(encoder: FrozenEncoder, corpus, steps: int, rng: np.random.Generator,
                        lr: float = 1e-3, batch_size: int = 16, mask_rate: float = 0.15) -> list[float]:
    """Masked-token training over ``corpus`` (token id sequences), then freeze.

    Returns the per-step training losses.
    """
    if encoder.frozen:
        raise ContractError("encoder is already frozen")
    corpus = list(corpus)
    state = AdamState()
    params = encoder.trainable_parameters()
    losses = []
    for _ in range(steps):
        picks = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        loss = mlm_loss(encoder, [corpus[i] for i in picks], rng, mask_rate)
        T.backward(loss)
        optimizer_step(params, lr, state)
        losses.append(loss.item())
    encoder.freeze()
    return losses


def embed_entity_texts(graph: KnowledgeGraph, encoder: FrozenEncoder, vocab: TokenVocab,
                       max_tokens: int = MAX_TOKENS, batch_size: int = 64) -> np.ndarray:
    """Mean-pooled final-layer states of ``[B] text [S]`` per entity, |E| × H."""
    seqs = [(BOS_ID, *tokenize(graph.entity_text(i), vocab, max_tokens), SEP_ID)
            for i in range(graph.num_entities)]
    rows = []
    with T.no_grad():
        for start in range(0, len(seqs), batch_size):
            ids, valid = pad_batch(seqs[start:start + batch_size])
            hidden = encoder.encode_ids(ids, valid).hidden.data
            pooled = (hidden * valid[..., None]).sum(axis=1) / valid.sum(axis=1, keepdims=True)
            rows.append(pooled)
    return np.concatenate(rows, axis=0)
