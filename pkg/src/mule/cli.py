"""``mule`` command line: gen, train, eval."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


from . import pipeline
from .config import RunConfig, documented_keys
from .data.formats import load_split, save_dataset
from .errors import ConfigError, MuleError
from .evaluator import evaluate, nearest_sentences, write_report
from .model import language_branch_size
from .trainer import load_checkpoint, save_checkpoint, self_test, train


def _resolve(args) -> RunConfig:
    cfg = RunConfig.preset(args.preset)
    if getattr(args, "config", None):
        cfg.load(args.config)
    if getattr(args, "ablate", None):
        cfg.ablate(args.ablate)
    if getattr(args, "parallel", False):
        cfg.set("parallel", True)
    cfg.override(args.set or [])
    cfg.apply_env()
    return cfg


def _parse_translate(items) -> dict:
    allowed = {"src": "translate_src", "dst": "translate_dst", "p": "translate_p"}
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in allowed:
            raise ConfigError(f"--translate expects src=.. dst=.. p=.., got {item!r}")
        out[allowed[key]] = value
    return out


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    if args.translate is not None:
        cfg.override(f"{k}={v}" for k, v in _parse_translate(args.translate).items())
    if args.print_config:
        sys.stdout.write(cfg.dump())
        return 0
    splits = pipeline.generate(cfg, translate=args.translate is not None)
    out = Path(args.out)
    save_dataset(splits, out)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    for name, corpus in splits.items():
        counts = ", ".join(f"{l} {corpus.sentence_count(l)}" for l in corpus.languages)
        machine = sum(corpus.sentence_count(l, machine=True) for l in corpus.languages)
        print(f"{name}: {len(corpus)} images; sentences {counts}" + (f" ({machine} machine)" if machine else ""))
    return 0


def _banner(params, cfg: RunConfig) -> str:
    sizes = language_branch_size(params.config)
    per_lang = ", ".join(f"{l} {n}" for l, n in sizes["per_language"].items())
    mode = "parallel encoders" if cfg["parallel"] else "shared encoder"
    return (f"parameters: total {params.count()}; encoder {sizes['encoder']} ({mode}); "
            f"language-specific {per_lang}; image branch {params.count('image.')}; "
            f"classifier {params.count('classifier.')}")


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.print_config:
        sys.stdout.write(cfg.dump())
        return 0
    data = Path(args.data)
    langs = cfg.languages
    train_split = pipeline.training_corpus(load_split(data, "train", langs), cfg)
    val = None if args.no_val else load_split(data, "val", langs)
    params = pipeline.initial_params(cfg, train_split)
    tcfg = cfg.training_config()
    print(_banner(params, cfg))
    if args.self_test:
        for report in self_test(train_split, params, tcfg):
            print(f"self-test: {report}")

    def log(row):
        mr = " ".join(f"{k}={v:.1f}" for k, v in row.items() if k.startswith("mR_"))
        print(f"epoch {row['epoch']:>3} lr {row['lr']:.3g} nc {row['nc']:.4f} match {row['match']:.4f} "
              f"lc {row['lc']:.4f} {mr}".rstrip())

    best, history = train(train_split, tcfg, val=val, params=params, on_epoch=log)
    out = Path(args.out)
    save_checkpoint(best, out, history)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    print(f"checkpoint written to {out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_split(args.data, args.split, params.config.languages)
    report = evaluate(corpus, params)
    print(report.format_table())
    out = Path(args.report) if args.report else Path(args.checkpoint) / "report.tsv"
    write_report(report, out)
    if args.dump_nearest:
        for lang in corpus.languages:
            for image_id, sents in nearest_sentences(corpus, params, lang, args.dump_nearest):
                print(f"{lang}\t{image_id}\t" + " | ".join(sents))
    return 0


def _common(p: argparse.ArgumentParser):
    p.add_argument("--preset", default="fullscale", choices=["fullscale", "desk"], help="base configuration")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mule", description="Multilingual image-sentence retrieval.",
                                     epilog="Configuration keys:\n" + documented_keys(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic corpus")
    _common(gen)
    gen.add_argument("--out", required=True, help="output data directory")
    gen.add_argument("--translate", nargs="+", metavar="K=V",
                     help="add simulated translations to the training split, e.g. src=en dst=de p=0.1")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model")
    _common(tr)
    tr.add_argument("--data", help="data directory written by gen")
    tr.add_argument("--out", help="checkpoint directory")
    tr.add_argument("--ablate", help="ablation preset: full, embn, nc, nc-lc")
    tr.add_argument("--parallel", action="store_true", help="separate encoder per language")
    tr.add_argument("--self-test", action="store_true", help="gradient-check a micro-batch before training")
    tr.add_argument("--no-val", action="store_true", help="skip validation; keep the final epoch")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--report", help="report path (default: <checkpoint>/report.tsv)")
    ev.add_argument("--dump-nearest", type=int, default=0, metavar="N", help="print N nearest sentences per image")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.print_config and not (args.data and args.out):
        parser.error("train needs --data and --out")
    try:
        return args.func(args)
    except MuleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
