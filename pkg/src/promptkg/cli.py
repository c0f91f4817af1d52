"""Command line entry point: ``prepare``, ``train``, ``eval`` and ``explain``.

Every RunConfig key is also a ``--flag`` that overrides the config file.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, load_config, parse_config
from .data import add_inverse_triples, known_answers, load_dataset_dir, write_dataset_dir
from .errors import ConfigError, DataError, PromptKGError
from .evaluation import (EXPLANATION_SCHEMA, REPORT_SCHEMA, dump_scores, evaluate, explain,
                         random_chance_mrr, save_report, validate_document)
from .toy import DEFAULT_SEED, write_toy_dataset
from .train import provenance, restore_run, run_training

log = logging.getLogger("promptkg")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def cmd_prepare(args) -> int:
    if args.make_toy:
        manifest = write_toy_dataset(args.make_toy, args.seed)
        print(json.dumps(manifest, indent=2, sort_keys=True))
        return 0
    if not args.dataset or not args.out:
        raise ConfigError("prepare needs --make-toy DIR, or a dataset dir and --out DIR")
    graph = load_dataset_dir(args.dataset)
    augmented = add_inverse_triples(graph)
    extra = {"source": str(args.dataset), "raw_train": int(len(graph.train)),
             "neighbor_pairs": int(len(augmented.train)) + augmented.num_entities}
    manifest = write_dataset_dir(augmented, args.out, extra)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    _, result = run_training(cfg, out)
    print(json.dumps({"best_epoch": result.best_epoch, "best_valid_mrr": result.best_mrr,
                      "output_dir": str(out), "config_hash": cfg.config_hash()}, sort_keys=True))
    return 0


def _restore(args, cfg: RunConfig):
    run_dir = Path(args.run_dir or cfg.output_dir)
    if not (run_dir / "encoder.ckpt").exists():
        raise ConfigError(f"{run_dir} has no encoder.ckpt; train first or pass --run-dir")
    return restore_run(cfg, run_dir, args.checkpoint)


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.split:
        cfg = cfg.replace(eval_split=args.split)
    run = _restore(args, cfg)
    result = evaluate(run.model, cfg.eval_split, buckets=cfg.buckets)
    result.meta = dict(provenance(cfg), random_chance_mrr=random_chance_mrr(
        run.graph.split(cfg.eval_split), known_answers(run.graph), run.graph.num_entities))
    validate_document(result.to_dict(), REPORT_SCHEMA)
    out = Path(args.out or Path(args.run_dir or cfg.output_dir) / f"eval_{cfg.eval_split}")
    out.mkdir(parents=True, exist_ok=True)
    save_report(result, out / "report.json")
    (out / "report.txt").write_text(result.to_text(), encoding="utf-8")
    if args.dump_scores:
        dump_scores(run.model, run.graph.split(cfg.eval_split), out / "scores.tsv")
    sys.stdout.write(result.to_text())
    return 0


def cmd_explain(args) -> int:
    cfg = _config(args)
    run = _restore(args, cfg)
    exp = explain(run.model, args.head, args.relation, args.top_m, args.top_j)
    exp.meta = provenance(cfg)
    doc = exp.to_dict()
    validate_document(doc, EXPLANATION_SCHEMA)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(exp.to_text(), encoding="utf-8")
    sys.stdout.write(exp.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptkg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate the toy fixture or augment a raw dump")
    p.add_argument("dataset", nargs="?", help="raw dataset directory")
    p.add_argument("--out", help="destination for the augmented dump")
    p.add_argument("--make-toy", metavar="DIR", help="write the deterministic toy fixture to DIR")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="toy generator seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="pretrain and freeze the encoder, then train the model")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "filtered ranking report"),
                             ("explain", cmd_explain, "per-component explanation for one query")):
        p = sub.add_parser(name, help=text)
        _add_config_flags(p)
        p.add_argument("--run-dir", help="training output directory (defaults to output_dir)")
        p.add_argument("--checkpoint", help="model checkpoint (defaults to the best one)")
        p.add_argument("--out", help="output path")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--split", choices=("valid", "test"), help="shorthand for --eval-split")
            p.add_argument("--dump-scores", action="store_true", help="also write per-candidate scores")
        else:
            p.add_argument("--head", required=True, help="head entity id")
            p.add_argument("--relation", required=True, help="relation id")
            p.add_argument("--top-m", type=int, default=2)
            p.add_argument("--top-j", type=int, default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PromptKGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
