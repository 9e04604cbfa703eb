"""
Command-line entry point.

Subcommands: gen-data, build-vocab, train, caption, eval, grad-check,
export-attn and describe.  Exit status is 0 on success, 1 for user errors
(bad flags, missing or malformed files, invalid settings) and 2 for internal
or numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .attention import export_attention
from .config import (CONFIG_KEYS, MODEL_KEYS, ModelConfig, TrainConfig, apply_settings, dump_config,
                     load_config_file)
from .corpus import (build_vocab, detokenize, ensure_dir, generate_synthetic, load_dataset, read_raster,
                     save_dataset, Vocabulary)
from .decoding import DecodeConfig, evaluate, greedy_decode
from .errors import ConfigurationError, FormatError, InputError, NumericError, TokenIndexError
from .language import receptive_field
from .model import Captioner, count_parameters
from .trainer import load_checkpoint, model_grad_check, train
from .vision import load_feature_grid

USER_ERRORS = (ConfigurationError, FormatError, InputError, TokenIndexError, OSError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports bad usage as an exception instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    """One optional flag per config key; unset flags stay None so the config file can fill them."""
    defaults = {**vars(ModelConfig()), **vars(TrainConfig())}
    group = p.add_argument_group("model and training settings (flag > config file > default)")
    for key in keys:
        default = defaults[key]
        if isinstance(default, bool):
            group.add_argument(_flag(key), dest=key, nargs="?", const="true", default=None, metavar="BOOL",
                               help=f"default {str(default).lower()}")
        else:
            group.add_argument(_flag(key), dest=key, default=None, metavar=key.split("_")[-1].upper(),
                               help=f"default {default!r}")


def resolve_configs(args, vocab_size: int = 0) -> tuple[ModelConfig, TrainConfig]:
    model, train_cfg = ModelConfig(vocab_size=vocab_size), TrainConfig()
    if getattr(args, "config", None):
        load_config_file(args.config, model, train_cfg)
    flags = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    apply_settings(model, train_cfg, flags)
    return model.validate(), train_cfg.validate()


def _workers(args) -> int:
    return args.workers if args.workers else (os.cpu_count() or 1)


def _load_grid(args, model: Captioner) -> np.ndarray:
    if args.image:
        if not model.config.uses_encoder:
            raise ConfigurationError("this checkpoint consumes feature grids; pass --features")
        return model.features(images=read_raster(args.image)).data[0]
    if args.features:
        return load_feature_grid(args.features).vectors
    raise InputError("pass --image or --features")


# subcommands

def cmd_gen_data(args) -> int:
    examples = generate_synthetic(args.seed, args.n, args.image_size, args.grid)
    path = save_dataset(examples, args.out)
    print(f"wrote {len(examples)} examples to {path}")
    return 0


def cmd_build_vocab(args) -> int:
    captions = [ex.caption for ex in load_dataset(args.data)]
    vocab = build_vocab(captions, args.max_size)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} entries written to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.dump_config:
        model_cfg, train_cfg = resolve_configs(args)
        sys.stdout.write(dump_config(model_cfg, train_cfg))
        return 0
    if not args.data:
        raise InputError("train needs --data")
    dataset = load_dataset(args.data)
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab([ex.caption for ex in dataset])
    val_set = load_dataset(args.val) if args.val else None
    model_cfg, train_cfg = resolve_configs(args, len(vocab))
    if args.out:
        train_cfg.checkpoint = args.out
    if not train_cfg.checkpoint:
        raise InputError("train needs --out (or a checkpoint key in the config file)")
    if dataset[0].image is None:
        model_cfg.image_size = 0
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(dataset, vocab, model_cfg, train_cfg, val_set, resume=resume,
                   on_eval=lambda r: print(r.line(), flush=True))
    print(f"stopped after step {result.step} ({result.stop_reason}); checkpoint {train_cfg.checkpoint}")
    return 0


def cmd_caption(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = ckpt.model(), ckpt.vocab()
    tokens = greedy_decode(_load_grid(args, model), model, DecodeConfig(max_len=args.max_len))
    print(detokenize(tokens, vocab))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = ckpt.model(), ckpt.vocab()
    examples = load_dataset(args.data)
    report, _ = evaluate(examples, model, vocab, DecodeConfig(max_len=args.max_len), dump_path=args.dump,
                         workers=_workers(args))
    print(report.summary())
    return 0


def cmd_grad_check(args) -> int:
    report = model_grad_check(depth=args.depth, kernel=args.k, seed=args.seed, hierarchical=args.hierarchical,
                              skip_every=args.skip_every, tol=args.tol, h=args.h)
    print(report)
    if not report.passed:
        raise NumericError("gradient check failed")
    return 0


def cmd_export_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = ckpt.model(), ckpt.vocab()
    grid = _load_grid(args, model)
    result = greedy_decode(grid, model, DecodeConfig(max_len=args.max_len), keep=True)
    out = ensure_dir(args.out)
    d = int(round(np.sqrt(grid.shape[0])))
    written = []
    for j, (token, maps) in enumerate(zip(result.tokens, result.maps)):
        word = vocab.word(token)
        written += export_attention(maps, [word], out / f"{j:03d}_{word}.txt")
    print(detokenize(result.tokens, vocab))
    print(f"{len(written)} attention files written to {out} (grid {d}x{d})")
    return 0


def describe_model(cfg: ModelConfig) -> str:
    counts = count_parameters(cfg)
    width = max(len(m) for m in counts)
    lines = [f"{module:<{width}}  {n:>12,d}" for module, n in counts.items()]
    lines.append(f"{'total':<{width}}  {sum(counts.values()):>12,d}")
    lines.append(f"receptive field: {receptive_field(cfg.depth, cfg.kernel)} positions "
                 f"(depth {cfg.depth}, kernel {cfg.kernel})")
    return "\n".join(lines)


def cmd_describe(args) -> int:
    model_cfg, _ = resolve_configs(args, args.vocab_size)
    print(describe_model(model_cfg))
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="convcap", description="Convolutional image captioning with visual attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic two-object scene corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="number of examples")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--grid", type=int, default=4, help="cells per side")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a dataset")
    p.add_argument("--data", required=True, help="dataset.jsonl")
    p.add_argument("--max-size", type=int, default=10000, help="table size including reserved tokens")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a captioner")
    p.add_argument("--data", help="training dataset.jsonl")
    p.add_argument("--val", help="validation dataset.jsonl for early stopping")
    p.add_argument("--vocab", help="vocabulary file (built from --data when omitted)")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--dump-config", action="store_true", help="print the effective settings and exit")
    add_config_flags(p, CONFIG_KEYS)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("caption", cmd_caption, "caption one image"),
                             ("export-attn", cmd_export_attn, "caption one image and export its attention maps")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", help="IMGR raster")
        p.add_argument("--features", help="FGRD feature grid")
        p.add_argument("--max-len", type=int, default=70)
        if name == "export-attn":
            p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="decode a split and report corpus BLEU-1..4")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dump", help="per-example tab-separated output")
    p.add_argument("--max-len", type=int, default=70)
    p.add_argument("--workers", type=int, default=0, help="decoding threads (default: all cores)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--k", type=int, default=2, help="kernel width")
    p.add_argument("--skip-every", type=int, default=0)
    p.add_argument("--hierarchical", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("describe", help="per-module parameter counts and receptive field")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--vocab-size", type=int, default=10000)
    add_config_flags(p, MODEL_KEYS)
    p.set_defaults(func=cmd_describe)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"convcap: numeric error: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"convcap: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"convcap: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
