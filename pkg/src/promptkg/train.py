"""Run setup, surrogate encoder pretraining and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import RunConfig
from .data import KnowledgeGraph, TokenVocab, known_answers, load_augmented
from .encoder import FrozenEncoder, corpus_sequences, pretrain_and_freeze
from .errors import CheckpointError, NumericAbort
from .evaluation import evaluate
from .model import PromptKGModel, build_encoder
from .optim import AdamState, optimizer_step

log = logging.getLogger(__name__)

ENCODER_FILE = "encoder.ckpt"
BEST_FILE = "model_best.ckpt"
INITIAL_FILE = "model_initial.ckpt"
LOG_FILE = "train_log.jsonl"


def seeded_rngs(seed: int, count: int = 4) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed}


def text_corpus(graph: KnowledgeGraph) -> list[str]:
    return [graph.entity_text(i) for i in range(graph.num_entities)] + list(graph.relation_names)


def save_encoder(encoder: FrozenEncoder, vocab: TokenVocab, cfg: RunConfig, path) -> None:
    meta = provenance(cfg)
    meta.update(vocab=vocab.to_json(), frozen=encoder.frozen)
    checkpoint.save(path, encoder.state_dict(), meta)


def load_encoder(path, cfg: RunConfig) -> tuple[FrozenEncoder, TokenVocab]:
    arrays, meta = checkpoint.load(path)
    vocab = TokenVocab.from_json(meta["vocab"])
    encoder = build_encoder(cfg, len(vocab), np.random.default_rng(0))
    try:
        encoder.load_state_dict(arrays)
    except CheckpointError as exc:
        raise CheckpointError(f"encoder checkpoint incompatible with config: {exc}") from None
    encoder.freeze()
    return encoder, vocab


def prepare_encoder(cfg: RunConfig, graph: KnowledgeGraph, rng: np.random.Generator):
    """Build, pretrain and freeze the encoder (or load a frozen one)."""
    if cfg.encoder_checkpoint:
        encoder, vocab = load_encoder(cfg.encoder_checkpoint, cfg)
        return encoder, vocab, []
    vocab = TokenVocab.from_graph(graph)
    encoder = build_encoder(cfg, len(vocab), rng)
    corpus = corpus_sequences(text_corpus(graph), vocab, cfg.max_tokens)
    losses = pretrain_and_freeze(encoder, corpus, cfg.pretrain_steps, rng, cfg.pretrain_lr, cfg.pretrain_batch)
    return encoder, vocab, losses


@dataclass
class Run:
    cfg: RunConfig
    graph: KnowledgeGraph
    vocab: TokenVocab
    encoder: FrozenEncoder
    model: PromptKGModel
    pretrain_losses: list[float] = field(default_factory=list)
    shuffle_rng: np.random.Generator | None = None


def build_run(cfg: RunConfig, graph: KnowledgeGraph | None = None) -> Run:
    """Load + augment data, prepare the frozen encoder and initialise the model."""
    if graph is None:
        cfg.check_paths()
        graph = load_augmented(cfg.data_dir)
    enc_rng, model_rng, shuffle_rng, _ = seeded_rngs(cfg.seed)
    encoder, vocab, losses = prepare_encoder(cfg, graph, enc_rng)
    model = PromptKGModel(cfg, graph, vocab, encoder, model_rng)
    return Run(cfg, graph, vocab, encoder, model, losses, shuffle_rng)


def selection_mrr(result) -> float:
    return result.reports["C" if "C" in result.reports else "S"].mrr


@dataclass
class TrainResult:
    log: list[dict]
    best_mrr: float
    best_epoch: int
    best_state: dict


def train_epochs(run: Run, epochs: int | None = None, evaluate_each: bool = True,
                 output_dir: Path | None = None, on_epoch=None) -> TrainResult:
    """Epoch loop with best-validation-MRR selection; ``on_epoch(run, entry)`` runs after each epoch."""
    cfg = run.cfg
    model = run.model
    epochs = cfg.epochs if epochs is None else epochs
    params = model.trainable_parameters()
    state = AdamState()
    known = known_answers(run.graph)
    train = run.graph.train
    entries = []
    best_mrr, best_epoch, best_state = -1.0, 0, model.state_dict()
    if evaluate_each and len(run.graph.valid):
        best_mrr = selection_mrr(evaluate(model, "valid", known=known))
    for epoch in range(1, epochs + 1):
        order = run.shuffle_rng.permutation(len(train))
        totals, parts_sum, batches = 0.0, np.zeros(3), 0
        for start in range(0, len(order), cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            parts = model.loss(batch)
            value = parts.total.item()
            if not math.isfinite(value):
                _numeric_dump(output_dir, epoch, batches, parts, model)
                raise NumericAbort(f"non-finite loss {value} at epoch {epoch}, batch {batches}")
            T.backward(parts.total)
            optimizer_step(params, cfg.lr, state)
            totals += value
            parts_sum += [parts.text or 0.0, parts.struct, parts.mi]
            batches += 1
        means = parts_sum / batches
        entry = {"epoch": epoch, "loss": totals / batches,
                 "loss_text": float(means[0]) if model.mode.textual else None,
                 "loss_struct": float(means[1]), "loss_mi": float(means[2]),
                 "log_sigma": [float(x) for x in model.fusion.log_sigma.data]}
        if evaluate_each and len(run.graph.valid):
            mrr = selection_mrr(evaluate(model, "valid", known=known))
            entry["valid_mrr"] = mrr
            if mrr > best_mrr:
                best_mrr, best_epoch, best_state = mrr, epoch, model.state_dict()
        entries.append(entry)
        if on_epoch is not None:
            on_epoch(run, entry)
        log.info("epoch %d loss %.5f valid_mrr %s", epoch, entry["loss"], entry.get("valid_mrr"))
    if not evaluate_each:
        best_state, best_epoch = model.state_dict(), epochs
    return TrainResult(entries, best_mrr, best_epoch, best_state)


def _numeric_dump(output_dir, epoch, batch, parts, model) -> None:
    if output_dir is None:
        return
    report = {
        "epoch": epoch, "batch": batch,
        "loss_text": parts.text, "loss_struct": parts.struct, "loss_mi": parts.mi,
        "non_finite_params": [p.name for p in model.parameters() if not np.all(np.isfinite(p.data))],
    }
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    (Path(output_dir) / "numeric_abort.json").write_text(json.dumps(report, indent=2))


def run_training(cfg: RunConfig, output_dir=None) -> tuple[Run, TrainResult]:
    """Full ``train`` command: checkpoints and log land in ``output_dir``."""
    cfg.check_paths()
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = build_run(cfg)
    meta = provenance(cfg)
    (out / "config.txt").write_text(cfg.dump())
    save_encoder(run.encoder, run.vocab, cfg, out / ENCODER_FILE)
    checkpoint.save(out / INITIAL_FILE, run.model.state_dict(), meta)
    result = train_epochs(run, output_dir=out)
    run.model.load_state_dict(result.best_state)
    checkpoint.save(out / BEST_FILE, result.best_state,
                    dict(meta, best_epoch=result.best_epoch, best_valid_mrr=result.best_mrr))
    with open(out / LOG_FILE, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dict(meta, pretrain_losses=run.pretrain_losses), sort_keys=True) + "\n")
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return run, result


def restore_run(cfg: RunConfig, run_dir, checkpoint_path=None) -> Run:
    """Rebuild a trained model from a run directory's encoder and model checkpoints."""
    run_dir = Path(run_dir)
    cfg_enc = cfg.replace(encoder_checkpoint=str(run_dir / ENCODER_FILE))
    run = build_run(cfg_enc)
    arrays, meta = checkpoint.load(checkpoint_path or run_dir / BEST_FILE)
    stored = meta.get("config_hash")
    if stored is not None and stored != cfg.config_hash():
        expected = {k: v for k, v in meta.get("config", {}).items() if k != "output_dir"}
        diff = sorted(k for k, v in cfg.to_dict().items() if k in expected and expected[k] != v)
        if any(k not in ("epochs", "eval_split", "buckets", "encoder_checkpoint") for k in diff):
            raise CheckpointError(f"checkpoint config v{checkpoint.FORMAT_VERSION} differs in {diff}")
    run.model.load_state_dict(arrays)
    return run
