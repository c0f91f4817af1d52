"""Textual and structural predictors, KGE scorers, joint loss and score fusion."""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .module import Module
from .tensor import Tensor


class AblationMode(str, enum.Enum):
    FULL = "full"
    SINGLE_COMPONENT = "single_component"
    NO_DISEN = "no_disen"
    NO_TEXTUAL_PREDICTOR = "no_textual_predictor"

    @property
    def textual(self) -> bool:
        return self is not AblationMode.NO_TEXTUAL_PREDICTOR


# -- textual ---------------------------------------------------------------

class TextualHead(Module):
    def __init__(self, text_table: np.ndarray, rng: np.random.Generator):
        super().__init__()
        H = text_table.shape[1]
        self.w_o = self.param("w_o", rng.normal(0.0, 1.0 / H, size=(H, H)))
        self.e_text = self.param("e_text", text_table, frozen=True)


def textual_scores(mask_hidden: Tensor, head: TextualHead) -> Tensor:
    """``Q[b, i] = e_text[i] · (W_o · mask_hidden[b])``; B×H in, B×|E| out."""
    transformed = T.matmul(mask_hidden, T.transpose(head.w_o, (1, 0)))
    return T.matmul(transformed, T.transpose(head.e_text, (1, 0)))


def textual_loss(scores: Tensor, gold, epsilon: float = 0.1) -> Tensor:
    return T.cross_entropy_smoothed(scores, gold, epsilon)


structural_loss = textual_loss


# -- KGE scorers -----------------------------------------------------------

def _per_component_dot(queries: Tensor, candidates: Tensor) -> Tensor:
    """B×K×d queries against K×|E|×d candidates → B×K×|E|."""
    # one plain 2-D product per component keeps K=1 arithmetic identical to a single-embedding scorer
    K = queries.shape[1]
    return T.stack([T.matmul_nt(queries[:, k], candidates[k]) for k in range(K)], axis=1)


class TransE(Module):
    name = "transe"

    def __init__(self, dim: int, gamma: float = 9.0):
        super().__init__()
        self.dim = dim
        self.gamma = gamma

    def score(self, v_h: Tensor, r: Tensor, v_t: Tensor) -> Tensor:
        diff = v_h + r - v_t
        return self.gamma - T.reduce_sum(T.square(diff), axis=-1)

    def score_all(self, heads: Tensor, relation: Tensor, candidates: Tensor) -> Tensor:
        """heads B×K×d, relation B×d, candidates K×|E|×d → B×K×|E|."""
        B, K, d = heads.shape
        translated = T.reshape(heads + T.reshape(relation, (B, 1, d)), (B, K, 1, d))
        diff = translated - T.reshape(candidates, (1,) + candidates.shape)
        return self.gamma - T.reduce_sum(T.square(diff), axis=-1)


class DistMult(Module):
    name = "distmult"

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def score(self, v_h: Tensor, r: Tensor, v_t: Tensor) -> Tensor:
        return T.reduce_sum(v_h * r * v_t, axis=-1)

    def score_all(self, heads: Tensor, relation: Tensor, candidates: Tensor) -> Tensor:
        B, K, d = heads.shape
        query = heads * T.reshape(relation, (B, 1, d))
        return _per_component_dot(query, candidates)


class ConvE(Module):
    """Head and relation reshaped to ``rows × cols`` maps, stacked vertically,
    convolved, flattened and projected back to ``d``; score is a dot product
    with the candidate."""

    name = "conve"

    def __init__(self, dim: int, rows: int, kernels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        if rows < 1 or dim % rows:
            raise ConfigError(f"ConvE cannot reshape dim {dim} into {rows} rows")
        self.dim, self.rows, self.cols = dim, rows, dim // rows
        height, width = 2 * rows, self.cols
        if kernel_size > height or kernel_size > width:
            raise ConfigError(f"ConvE kernel {kernel_size} exceeds {height}×{width} input")
        self.out_h, self.out_w = height - kernel_size + 1, width - kernel_size + 1
        flat = kernels * self.out_h * self.out_w
        fan = kernel_size * kernel_size
        self.kernels = self.param("kernels", rng.normal(0.0, 1.0 / np.sqrt(fan), size=(kernels, 1, kernel_size, kernel_size)))
        self.conv_bias = self.param("conv_bias", np.zeros((kernels, 1, 1)))
        self.fc = self.param("fc", rng.normal(0.0, 1.0 / np.sqrt(flat), size=(flat, dim)))
        self.fc_bias = self.param("fc_bias", np.zeros(dim))

    def query_vector(self, v_h: Tensor, r: Tensor) -> Tensor:
        """``...×d`` head and relation (same leading shape) → ``...×d``."""
        lead = v_h.shape[:-1]
        if v_h.shape[-1] != self.dim or r.shape != v_h.shape:
            raise ConfigError(f"ConvE expects matching ...×{self.dim} inputs, got {v_h.shape} and {r.shape}")
        n = int(np.prod(lead, dtype=np.int64)) if lead else 1
        image = T.concat([T.reshape(v_h, (n, 1, self.rows, self.cols)),
                          T.reshape(r, (n, 1, self.rows, self.cols))], axis=2)
        feat = T.relu(T.conv2d(image, self.kernels) + self.conv_bias)
        hidden = T.relu(T.matmul(T.reshape(feat, (n, -1)), self.fc) + self.fc_bias)
        return T.reshape(hidden, lead + (self.dim,))

    def score(self, v_h: Tensor, r: Tensor, v_t: Tensor) -> Tensor:
        return T.reduce_sum(self.query_vector(v_h, r) * v_t, axis=-1)

    def score_all(self, heads: Tensor, relation: Tensor, candidates: Tensor) -> Tensor:
        B, K, d = heads.shape
        rel = T.reshape(relation, (B, 1, d)) + T.Tensor(np.zeros((1, K, 1)))
        query = self.query_vector(heads, rel)
        return _per_component_dot(query, candidates)


SCORERS = ("transe", "distmult", "conve")


def make_scorer(kind: str, dim: int, rng: np.random.Generator, gamma: float = 9.0,
                conve_rows: int = 4, conve_kernels: int = 8, conve_kernel_size: int = 3) -> Module:
    if kind == "transe":
        return TransE(dim, gamma)
    if kind == "distmult":
        return DistMult(dim)
    if kind == "conve":
        return ConvE(dim, conve_rows, conve_kernels, conve_kernel_size, rng)
    raise ConfigError(f"unknown scorer {kind!r}; choose from {SCORERS}")


def kge_score(scorer, v_h, r, v_t) -> float:
    return scorer.score(T.as_tensor(v_h), T.as_tensor(r), T.as_tensor(v_t)).item()


# -- structural ------------------------------------------------------------

class StructuralHead(Module):
    def __init__(self, dim: int, hidden: int, prompt_len: int, scorer: Module, rng: np.random.Generator):
        super().__init__()
        self.dim, self.hidden, self.prompt_len = dim, hidden, prompt_len
        width = hidden * prompt_len
        self.w_p2s = self.param("w_p2s", rng.normal(0.0, 1.0 / np.sqrt(width), size=(dim, width)))
        self.scorer = self.child("scorer", scorer)


def map_prompt_to_struct(block: Tensor, head: StructuralHead) -> Tensor:
    """``...×n×H`` final-layer prompt states → ``...×d``."""
    n, H = head.prompt_len, head.hidden
    if block.ndim < 2 or block.shape[-2:] != (n, H):
        raise ConfigError(f"prompt block must end in {n}×{H}, got {block.shape}")
    flat = T.reshape(block, block.shape[:-2] + (n * H,))
    return T.matmul(flat, T.transpose(head.w_p2s, (1, 0)))


def component_attention(mapped_components: Tensor, mapped_relation: Tensor) -> Tensor:
    """Softmax over K of ``<ṽ_k, r̃>``; B×K×d and B×d in, B×K out."""
    if mapped_components.ndim == 2:
        mapped_components = T.reshape(mapped_components, (1,) + mapped_components.shape)
        mapped_relation = T.reshape(mapped_relation, (1,) + mapped_relation.shape)
    B, K, d = mapped_components.shape
    logits = T.reduce_sum(mapped_components * T.reshape(mapped_relation, (B, 1, d)), axis=-1)
    return T.softmax(logits, axis=-1)


def component_scores(mapped_components: Tensor, mapped_relation: Tensor, candidates: Tensor,
                     head: StructuralHead) -> Tensor:
    """Per-component candidate scores, B×K×|E|; ``candidates`` is |E|×K×d."""
    return head.scorer.score_all(mapped_components, mapped_relation, T.transpose(candidates, (1, 0, 2)))


def structural_scores(mapped_components: Tensor, mapped_relation: Tensor, candidates: Tensor,
                      head: StructuralHead, beta: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """``Q_S[b, i] = Σ_k β[b, k] · Q^k[b, i]``; returns (scores, β)."""
    if beta is None:
        beta = component_attention(mapped_components, mapped_relation)
    per_component = component_scores(mapped_components, mapped_relation, candidates, head)
    B, K = beta.shape
    return T.reduce_sum(per_component * T.reshape(beta, (B, K, 1)), axis=1), beta


def select_single_component(components, relation) -> np.ndarray | int:
    """Index of the component with the largest dot product with the relation.

    Accepts K×d / d (returns an int) or B×K×d / B×d (returns B indices);
    ``argmax`` resolves ties to the lowest index.
    """
    comps = np.asarray(components.data if isinstance(components, Tensor) else components, dtype=float)
    rel = np.asarray(relation.data if isinstance(relation, Tensor) else relation, dtype=float)
    if comps.ndim == 2:
        return int(np.argmax(comps @ rel))
    return np.argmax(np.einsum("bkd,bd->bk", comps, rel), axis=1)


# -- fusion ----------------------------------------------------------------

class FusionWeights(Module):
    """Two log-variances ``s``; task weight is ``exp(-s)`` (textual first)."""

    def __init__(self):
        super().__init__()
        self.log_sigma = self.param("log_sigma", np.zeros(2))

    def weights(self) -> np.ndarray:
        return np.exp(-self.log_sigma.data)

    def normalized(self) -> np.ndarray:
        w = self.weights()
        return w / w.sum()


def total_loss(loss_text: Tensor | None, loss_struct: Tensor, loss_mi: Tensor, fusion: FusionWeights,
               mi_weight: float = 0.1) -> Tensor:
    """``Σ_i exp(-s_i)·L_i + s_i + λ·L_mi``; a None textual loss drops its term."""
    s = fusion.log_sigma
    total = T.exp(-s[1]) * loss_struct + s[1]
    if loss_text is not None:
        total = total + T.exp(-s[0]) * loss_text + s[0]
    return total + mi_weight * T.as_tensor(loss_mi)


def ensemble_scores(q_text, q_struct, fusion: FusionWeights) -> np.ndarray:
    if q_text is None or q_struct is None:
        raise ContractError("ensemble needs both textual and structural scores")
    w = fusion.normalized()
    q_text = q_text.data if isinstance(q_text, Tensor) else np.asarray(q_text)
    q_struct = q_struct.data if isinstance(q_struct, Tensor) else np.asarray(q_struct)
    return w[0] * q_text + w[1] * q_struct
