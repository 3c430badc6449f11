"""Command-line entry point: ``grouprag {index,run,eval,ablate,train-policy}``.

Exit codes: 0 success, 1 config/input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import RunConfig, load_config
from .errors import GroupRAGError, InputError
from .evaluation import render_table
from .harness import evaluate_traces, execute_run, load_traces, locality_violations, prepare, run_ablation
from .policy import TrainConfig, WifParams, load_instances, save_policy, train_policy
from .retrieval import ChunkingConfig, build_index, ingest_corpus

logger = logging.getLogger("grouprag")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class UsageError(InputError):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run config (YAML or JSON)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1, help="questions processed in parallel")
    parser.add_argument("--out", type=Path, help="output directory or file")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grouprag", description="Group-aware retrieval and reasoning runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="chunk a corpus and write a BM25 index file")
    _common(p)
    p.add_argument("corpus", type=Path, help="directory of .txt/.jsonl files, or one .jsonl file")
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--overlap-tokens", type=int, default=32)

    p = sub.add_parser("run", help="run the pipeline over a dataset")
    _common(p)

    p = sub.add_parser("eval", help="recompute stage metrics from saved traces")
    _common(p)
    p.add_argument("traces", type=Path, help="run directory or its traces/ subdirectory")
    p.add_argument("--dataset", type=Path, help="dataset JSONL (defaults to the config's)")

    p = sub.add_parser("ablate", help="leave-one-out or progressive ablation")
    _common(p)
    p.add_argument("--protocol", choices=["none", "leave_one_out", "progressive"], help="override ablation.protocol")

    p = sub.add_parser("train-policy", help="train the selection policy on SelectionInstance JSONL")
    _common(p)
    p.add_argument("instances", type=Path)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--k", type=int, default=8, help="rollouts per instance")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2.5)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--gamma", type=float, default=0.5)
    return parser


def _require_config(args) -> RunConfig:
    if args.config is None:
        raise UsageError(f"{args.command} needs --config")
    return load_config(args.config, seed=args.seed, output_dir=args.out)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.output_dir
    if out is None:
        raise UsageError("no output directory (--out or config output_dir)")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_index(args) -> int:
    out = args.out or Path("index.json")
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    corpus = ingest_corpus(args.corpus, ChunkingConfig(args.max_tokens, args.overlap_tokens))
    index = build_index(corpus)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)
    for w in corpus.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"indexed {len(index)} chunks, vocabulary {len(index.vocabulary)} -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _require_config(args)
    out = _out_dir(args, cfg)
    rt = prepare(cfg)
    switches = cfg.ablation.switches if cfg.ablation.protocol == "none" else ()
    report = execute_run(rt, out, switches, args.jobs)
    print(render_table([("run", report)]), end="")
    print(f"traces and report written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config_path = args.config
    manifest = args.traces / "manifest.json"
    if config_path is None and manifest.exists():
        recorded = json.loads(manifest.read_text(encoding="utf-8")).get("config_path")
        config_path = Path(recorded) if recorded else None
    if config_path is None:
        raise UsageError("eval needs --config (or a run directory whose manifest names one)")
    cfg = load_config(config_path, seed=args.seed)
    if args.dataset is not None:
        cfg.dataset = args.dataset
    rt = prepare(cfg)
    result = evaluate_traces(rt, load_traces(args.traces))
    for qid in result.orphans:
        print(f"warning: orphan trace {qid}", file=sys.stderr)
    if result.missing:
        print(f"missing traces: {', '.join(result.missing)}", file=sys.stderr)
    text = json.dumps(result.report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    print(render_table([("eval", result.report)]), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _require_config(args)
    if args.protocol:
        cfg.ablation = type(cfg.ablation)(args.protocol, cfg.ablation.switches)
    if cfg.ablation.protocol == "none":
        raise UsageError("ablate needs ablation.protocol leave_one_out or progressive")
    out = _out_dir(args, cfg)
    rt = prepare(cfg)
    rows = run_ablation(rt, out, args.jobs)
    print((out / "comparison.txt").read_text(encoding="utf-8"), end="")
    if cfg.ablation.protocol == "leave_one_out":
        for problem in locality_violations(rows):
            print(f"warning: upstream metric moved: {problem}", file=sys.stderr)
    return EXIT_OK


def cmd_train_policy(args) -> int:
    instances = load_instances(args.instances)
    seed = args.seed if args.seed is not None else 0
    wif = WifParams(args.alpha, args.beta, args.gamma)
    cfg = TrainConfig(k=args.k, lr=args.lr, epochs=args.epochs, seed=seed, wif=wif)
    params, history = train_policy(instances, cfg)
    out = args.out or Path("policy")
    out.mkdir(parents=True, exist_ok=True)
    save_policy(out / "policy.json", params, wif)
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_wif"])
        for epoch, value in enumerate(history, start=1):
            writer.writerow([epoch, repr(value)])
    final = f"{history[-1]:.4f}" if history else "n/a"
    print(f"trained on {len(instances)} instances for {args.epochs} epochs; final mean WIF {final} -> {out}")
    return EXIT_OK


COMMANDS = {
    "index": cmd_index,
    "run": cmd_run,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "train-policy": cmd_train_policy,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GroupRAGError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
