"""Command line for the block-expansion laboratory.

Six subcommands cover the pipeline: pretrain-base, expand, train, eval,
shift, compare. Outputs land under an output root (flag, or the
BLOCKGROW_OUT_ROOT environment variable), every run writes a
`<command>.repro.json` record beside its artifacts, and all randomness is
derived from the single --seed. Exit codes: 0 success, 1 configuration or
input error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .artifacts import (CheckpointError, blob_sha256, load_checkpoint,
                        save_checkpoint)
from .data import (VOCAB_SIZE, Corpus, derive_rng, detokenize, load_corpus,
                   mixture_sampler, synthetic_suite)
from .evaluation import (compare_strategies, perplexity, shift_analysis,
                         write_compare_csv, write_compare_json,
                         write_shift_csv, write_shift_json, write_timings_csv)
from .expansion import (PlanError, FreezeMask, expand_model, plan_expansion,
                        save_plan, verify_preservation)
from .figures import (compare_loss_figure, compare_perplexity_figure,
                      shift_fractions_figure, training_loss_figure)
from .model import ModelConfig, init_model
from .training import (StrategySpec, TrainConfig, TrainingDivergedError,
                       train)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2

OUT_ROOT_ENV = "BLOCKGROW_OUT_ROOT"
GENERAL_CHARS = 440_000
DOMAIN_CHARS = 260_000
SUITE_NAMES = ("general_train", "general_eval", "domain_train", "domain_eval")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; here those are config errors (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _out_root(args) -> Path:
    if args.out_root is not None:
        root = Path(args.out_root)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _resolve(root: Path, value: str | Path) -> Path:
    value = Path(value)
    return value if value.is_absolute() else root / value


def _write_repro(root: Path, command: str, args) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in sorted(vars(args).items()) if k != "func"}
    record = {"command": command, "config": config, "seed": args.seed,
              "version": f"blockgrow-v{__version__}"}
    path = root / f"{command}.repro.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _suite(args) -> dict[str, Corpus]:
    return synthetic_suite(seed=args.seed,
                           general_chars=getattr(args, "general_chars", GENERAL_CHARS),
                           domain_chars=getattr(args, "domain_chars", DOMAIN_CHARS))


def _corpus(args, root: Path, spec: str) -> Corpus:
    if spec in SUITE_NAMES:
        return _suite(args)[spec]
    path = _resolve(root, spec)
    if not path.exists():
        raise CheckpointError(
            f"corpus {spec!r} is neither one of {SUITE_NAMES} nor a file")
    return load_corpus(path)


def _stream_seed(seed: int, *labels: str) -> int:
    return int(derive_rng(seed, *labels).integers(2 ** 31))


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain_base(args) -> int:
    root = _out_root(args)
    config = ModelConfig(vocab_size=VOCAB_SIZE, hidden_size=args.hidden,
                         num_heads=args.heads, ffn_size=args.ffn,
                         num_blocks=args.blocks, max_seq_len=args.max_seq)
    model = init_model(config, derive_rng(args.seed, "init"))
    suite = _suite(args)
    corpora_dir = root / "corpora"
    corpora_dir.mkdir(parents=True, exist_ok=True)
    for name in SUITE_NAMES:
        text = "\n\n".join(detokenize(doc).decode("utf-8")
                           for doc in suite[name].documents)
        (corpora_dir / f"{name}.txt").write_text(text + "\n", encoding="utf-8")
    cfg = TrainConfig(total_steps=args.steps, batch_size=args.batch_size,
                      seq_len=args.seq_len, max_lr=args.max_lr,
                      strategy="full_ft", seed=args.seed)
    stream = mixture_sampler([suite["general_train"]], cfg.batch_size,
                             cfg.seq_len,
                             seed=_stream_seed(args.seed, "pretrain", "stream"))
    mask = FreezeMask.all_trainable(model)
    result = train(model, mask, stream, cfg,
                   csv_path=root / f"{args.out}.loss.csv")
    save_checkpoint(_resolve(root, args.out), model, train_config=cfg)
    training_loss_figure(result.loss_history, root / f"{args.out}.loss.png",
                         title="base pretraining loss")
    ppl = perplexity(model, suite["general_eval"],
                     min(config.max_seq_len, 2 * cfg.seq_len))
    print(f"saved {args.out} ({model.parameter_count()} params, "
          f"{cfg.total_steps} steps)")
    print(f"general_eval perplexity: {ppl!r}")
    _write_repro(root, "pretrain-base", args)
    return EXIT_OK


def cmd_expand(args) -> int:
    root = _out_root(args)
    model, _ = load_checkpoint(_resolve(root, args.base))
    plan = plan_expansion(len(model.blocks), args.groups, args.copies,
                          args.placement)
    expanded, mask = expand_model(model, plan)
    report = verify_preservation(model, expanded, trials=args.trials,
                                 seq_len=min(16, model.config.max_seq_len),
                                 seed=args.seed)
    out = _resolve(root, args.out)
    save_plan(plan, Path(str(out) + ".plan.json"))
    save_checkpoint(out, expanded, mask,
                    base_checkpoint_hash=blob_sha256(_resolve(root, args.base)),
                    expansion_plan=plan)
    print(f"expanded {plan.original_count} -> {plan.expanded_count} blocks "
          f"({args.placement}); trainable: {len(mask.trainable_names())} tensors")
    print(f"preservation max abs diff: {report.max_abs_diff!r}")
    if not report.exact:
        print("error: expansion did not preserve outputs", file=sys.stderr)
        return EXIT_CONFIG
    _write_repro(root, "expand", args)
    return EXIT_OK


def cmd_train(args) -> int:
    root = _out_root(args)
    model, mask = load_checkpoint(_resolve(root, args.model))
    if mask is None:
        mask = FreezeMask.all_trainable(model)
    corpus = _corpus(args, root, args.corpus)
    cfg = TrainConfig(total_steps=args.steps, batch_size=args.batch_size,
                      seq_len=args.seq_len, max_lr=args.max_lr, seed=args.seed)
    stream = mixture_sampler([corpus], cfg.batch_size, cfg.seq_len,
                             seed=_stream_seed(args.seed, "train", "stream"))
    result = train(model, mask, stream, cfg,
                   csv_path=root / f"{args.out}.loss.csv")
    save_checkpoint(_resolve(root, args.out), model, mask,
                    base_checkpoint_hash=blob_sha256(_resolve(root, args.model)),
                    train_config=cfg)
    training_loss_figure(result.loss_history, root / f"{args.out}.loss.png",
                         title=f"adaptation loss ({corpus.name})")
    final = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"trained {cfg.total_steps} steps on {corpus.name}; "
          f"final loss {final!r}")
    _write_repro(root, "train", args)
    return EXIT_OK


def cmd_eval(args) -> int:
    root = _out_root(args)
    model, _ = load_checkpoint(_resolve(root, args.model))
    corpus = _corpus(args, root, args.corpus)
    ppl = perplexity(model, corpus, args.seq_len)
    print(f"perplexity: {ppl!r}")
    lines = ["model,corpus,seq_len,perplexity",
             f"{args.model},{corpus.name},{args.seq_len},{ppl!r}"]
    (root / f"{args.out}.eval.csv").write_text("\n".join(lines) + "\n",
                                               encoding="utf-8")
    _write_repro(root, "eval", args)
    return EXIT_OK


def cmd_shift(args) -> int:
    root = _out_root(args)
    base, _ = load_checkpoint(_resolve(root, args.base))
    aligned, _ = load_checkpoint(_resolve(root, args.aligned))
    suite = _suite(args)
    queries = []
    for doc in suite["domain_eval"].documents:
        if len(doc) >= args.prompt_len:
            queries.append(doc[:args.prompt_len])
        if len(queries) == args.num_queries:
            break
    if not queries:
        raise CheckpointError("no evaluation documents long enough for prompts")
    report = shift_analysis(base, aligned, queries, args.max_new_tokens)
    print(f"positions: {report.total_positions}")
    print(f"fractions: unshifted={report.fraction_unshifted!r} "
          f"marginal={report.fraction_marginal!r} "
          f"shifted={report.fraction_shifted!r}")
    write_shift_json(report, root / f"{args.out}.json")
    write_shift_csv(report, root / f"{args.out}.csv")
    shift_fractions_figure(report, root / f"{args.out}.png")
    _write_repro(root, "shift", args)
    return EXIT_OK


def _parse_strategies(text: str) -> list[StrategySpec]:
    specs = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token in ("full_ft", "moe", "lora", "block_expand"):
            specs.append(StrategySpec(token))
        elif token.startswith("lora_r"):
            specs.append(StrategySpec("lora", lora_rank=int(token[len("lora_r"):])))
        elif token.startswith("block_expand_"):
            parts = token[len("block_expand_"):].split("_")
            added = int(parts[0])
            placement = parts[1] if len(parts) > 1 else "interleaved"
            specs.append(StrategySpec("block_expand", added_blocks=added,
                                      placement=placement))
        else:
            raise ValueError(f"unknown strategy {token!r}")
    if not specs:
        raise ValueError("no strategies given")
    return specs


def cmd_compare(args) -> int:
    root = _out_root(args)
    base, _ = load_checkpoint(_resolve(root, args.base))
    specs = _parse_strategies(args.strategies)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    cfg = TrainConfig(total_steps=args.steps, batch_size=args.batch_size,
                      seq_len=args.seq_len, max_lr=args.max_lr,
                      seed=args.seed)
    suite = _suite(args)

    def log(row):
        print(f"{row.strategy} seed={row.seed} domain_ppl={row.domain_ppl:.4f} "
              f"general_ppl={row.general_ppl:.4f} "
              f"trainable={row.trainable_params} diverged={row.diverged}")

    report = compare_strategies(base, suite, specs, cfg, seeds,
                                eval_seq_len=args.eval_seq_len, log=log)
    write_compare_csv(report, root / f"{args.out}.csv")
    write_compare_json(report, root / f"{args.out}.json")
    write_timings_csv(report, root / f"{args.out}.timings.csv")
    compare_loss_figure(report, root / f"{args.out}.loss.png")
    compare_perplexity_figure(report, root / f"{args.out}.ppl.png")
    print(f"base: domain_ppl={report.base_domain_ppl:.4f} "
          f"general_ppl={report.base_general_ppl:.4f}")
    for label in sorted(report.medians):
        med = report.medians[label]
        print(f"median {label}: domain_ppl={med['domain_ppl']:.4f} "
              f"general_ppl={med['general_ppl']:.4f} "
              f"degradation={med['general_degradation']:+.4f}")
    _write_repro(root, "compare", args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="master seed; per-component seeds derive from it")
    common.add_argument("--out-root", default=None,
                        help=f"output directory (default: ${OUT_ROOT_ENV} or ./runs)")

    parser = _Parser(prog="blockgrow",
                     description="Depth expansion lab for tiny byte-level decoders")
    parser.add_argument("--version", action="version",
                        version=f"blockgrow-v{__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-base", parents=[common],
                       help="train a base model on the synthetic general corpus")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--max-lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=128)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--general-chars", type=int, default=GENERAL_CHARS)
    p.add_argument("--domain-chars", type=int, default=DOMAIN_CHARS)
    p.add_argument("--out", default="base")
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("expand", parents=[common],
                       help="insert zero-initialized identity blocks")
    p.add_argument("--base", required=True, help="base checkpoint (path prefix)")
    p.add_argument("--groups", type=int, required=True, help="N groups")
    p.add_argument("--copies", type=int, default=1, help="P copies per group")
    p.add_argument("--placement", default="interleaved",
                   choices=("interleaved", "prefix", "suffix"))
    p.add_argument("--trials", type=int, default=20,
                   help="random sequences for the preservation check")
    p.add_argument("--out", default="expanded")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("train", parents=[common],
                       help="continue training a checkpoint under its freeze mask")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", default="domain_train",
                   help=f"one of {SUITE_NAMES} or a text file")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--max-lr", type=float, default=2e-4)
    p.add_argument("--general-chars", type=int, default=GENERAL_CHARS)
    p.add_argument("--domain-chars", type=int, default=DOMAIN_CHARS)
    p.add_argument("--out", default="trained")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="perplexity of a checkpoint on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", default="general_eval")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--general-chars", type=int, default=GENERAL_CHARS)
    p.add_argument("--domain-chars", type=int, default=DOMAIN_CHARS)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("shift", parents=[common],
                       help="token distribution shift of aligned vs base")
    p.add_argument("--base", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--num-queries", type=int, default=20)
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--general-chars", type=int, default=GENERAL_CHARS)
    p.add_argument("--domain-chars", type=int, default=DOMAIN_CHARS)
    p.add_argument("--out", default="shift")
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("compare", parents=[common],
                       help="run adaptation strategies and compare perplexities")
    p.add_argument("--base", required=True)
    p.add_argument("--strategies", default="block_expand_2,full_ft,lora",
                   help="comma list, e.g. block_expand_1,block_expand_2,"
                        "full_ft,lora,lora_r8,moe")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--max-lr", type=float, default=2e-4)
    p.add_argument("--eval-seq-len", type=int, default=None)
    p.add_argument("--general-chars", type=int, default=GENERAL_CHARS)
    p.add_argument("--domain-chars", type=int, default=DOMAIN_CHARS)
    p.add_argument("--out", default="compare")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, PlanError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
