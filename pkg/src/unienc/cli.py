"""``unienc`` command line: train, eval, bench, gen-data, ingest, mask-dump.

Exit codes: 0 on success, 1 on a validation problem (bad flags, bad config,
missing inputs), 2 on a runtime failure; the latter writes a traceback to a
diagnostics file and prints its path.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import traceback

import numpy as np

from . import data as D
from .config import OUTPUT_ENV, ConfigError, RunConfig

log = logging.getLogger("unienc")

RESOLVED = "resolved-config"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _csv_ints(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    docs = RunConfig.docs()
    for key, default in RunConfig.defaults().items():
        p.add_argument(_flag(key), dest=f"cfg_{key}", default=None, metavar="V",
                       help=f"{docs[key]} (default: {default!r})")


def _resolve(args) -> RunConfig:
    """Config file, then ``--set`` pairs, then dedicated flags. A key given both
    through ``--set`` and its own flag with different values is an error."""
    values = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} does not exist")
        with open(args.config, encoding="utf-8") as fh:
            values.update(RunConfig.parse_text(fh.read(), args.config))
    sets = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        RunConfig.coerce(k, v)
        sets[k] = v
    flags = {k: getattr(args, f"cfg_{k}") for k in RunConfig.keys()
             if getattr(args, f"cfg_{k}", None) is not None}
    for k in sets.keys() & flags.keys():
        if RunConfig.coerce(k, sets[k]) != RunConfig.coerce(k, flags[k]):
            raise ConfigError(f"conflicting flags: {_flag(k)} {flags[k]} and --set {k}={sets[k]}")
    values.update(sets)
    values.update(flags)
    cfg = RunConfig.from_mapping(values)
    cfg.output_dir = cfg.resolved_output_dir()
    return cfg


def _parse_name(parse, text: str, what: str):
    from .tensor import ContractError
    try:
        return parse(text)
    except ContractError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _need(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is required (set {_flag(what)} or {what} = ... in the config)")
    if not os.path.exists(path):
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _build_model(cfg: RunConfig, vocab):
    from .encoder import Encoder
    from .paradigms import RankingModel
    enc = Encoder(cfg.encoder_config(len(vocab)), rng=np.random.default_rng([cfg.seed, 0]))
    return RankingModel(enc, cfg.paradigm, vocab, scheme=cfg.scheme,
                        context_sees_candidates=cfg.context_sees_candidates,
                        poly_codes=cfg.poly_codes, rng=np.random.default_rng([cfg.seed, 1]))


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    from .inputs import Vocab, read_corpus
    from .training import train
    from . import checkpoint
    cfg = _resolve(args)
    train_recs = read_corpus(_need(cfg.train_path, "train_path"))
    valid_recs = read_corpus(_need(cfg.valid_path, "valid_path"))
    if len(train_recs) < cfg.batch_size or len(valid_recs) < cfg.batch_size:
        raise ConfigError(f"train and valid need at least batch_size={cfg.batch_size} records, got "
                          f"{len(train_recs)} and {len(valid_recs)}")
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    if cfg.vocab_path:
        vocab = Vocab.load(_need(cfg.vocab_path, "vocab_path"))
    else:
        vocab = Vocab.build(t for r in train_recs + valid_recs
                            for t in [u["text"] for u in r.context] + r.candidates)
    vocab_file = os.path.join(out, "vocab.txt")
    vocab.save(vocab_file)
    model = _build_model(cfg, vocab)
    resolved = RunConfig.from_mapping({**vars(cfg), "vocab_path": os.path.abspath(vocab_file),
                                       "checkpoint": os.path.abspath(os.path.join(out, "best.ckpt"))})
    resolved.save(os.path.join(out, RESOLVED))
    res = train(model, train_recs, valid_recs, cfg.optim_config(), cfg.train_config(), out)
    checkpoint.save(os.path.join(out, "best.ckpt"), model.state_dict())
    print(json.dumps({"steps": res.steps, "best_valid_r1": res.best_r1, "output_dir": out}))
    return 0


def cmd_eval(args) -> int:
    from .evalbench import evaluate
    from .inputs import Vocab, read_corpus
    from . import checkpoint
    cfg = _resolve(args)
    recs = read_corpus(_need(cfg.test_path, "test_path"))
    vocab = Vocab.load(_need(cfg.vocab_path, "vocab_path"))
    model = _build_model(cfg, vocab)
    model.load_state_dict(checkpoint.load(_need(cfg.checkpoint, "checkpoint")))
    metrics = evaluate(model, recs, cfg.batch_eval).as_dict()
    metrics["paradigm"] = cfg.paradigm
    os.makedirs(cfg.output_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.output_dir, RESOLVED))
    with open(os.path.join(cfg.output_dir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=1)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    from .encoder import EncoderConfig
    from .evalbench import latency_bench, reports_csv, reports_gnuplot, reports_jsonl
    from .paradigms import Paradigm
    paradigms = [_parse_name(Paradigm.parse, p, "--paradigms").value for p in args.paradigms.split(",") if p.strip()]
    if args.warmup < 3:
        raise ConfigError("--warmup must be >= 3")
    need = args.context_len + max(args.pool_sizes) * args.cand_len
    cfg = EncoderConfig(layers=args.layers, heads=args.heads, model_dim=args.model_dim,
                        ff_dim=args.ff_dim, dropout=0.0, max_len=max(512, need))
    reports = latency_bench(paradigms, args.pool_sizes, args.context_len, args.cand_len,
                            repeats=args.repeats, warmup=args.warmup, cfg=cfg,
                            batch_size=args.batch_size, budget_mb=args.budget_mb,
                            single_thread=not args.allow_threads, seed=args.seed)
    text = {"csv": reports_csv, "jsonl": reports_jsonl, "gnuplot": reports_gnuplot}[args.format](reports)
    _emit(text, args.out)
    return 0


def cmd_gen_data(args) -> int:
    spec = D.SyntheticTaskSpec(vocab_size=args.vocab_size, turns=args.turns, turn_len=args.turn_len,
                               cand_len=args.cand_len, num_candidates=args.num_candidates,
                               rule=args.rule, distractors=args.distractors,
                               n_keywords=args.n_keywords, keyword_types=args.keyword_types,
                               seed=args.seed)
    spec.validate()
    out = args.out or os.path.join(os.environ.get(OUTPUT_ENV) or ".", "data")
    paths = D.generate_files(spec, out, args.n_train, args.n_valid, args.n_test)
    print(json.dumps(paths, sort_keys=True))
    return 0


def cmd_ingest(args) -> int:
    if not os.path.exists(args.input):
        raise ConfigError(f"input {args.input} does not exist")
    rep = D.ingest_ubuntu(args.input, args.out, args.split, args.group_size)
    print(json.dumps(vars(rep), sort_keys=True))
    return 0


def cmd_mask_dump(args) -> int:
    from .masks import Kind, allowed_pairs, build_map, count_allowed, render_ascii, render_pgm
    kind = _parse_name(Kind.parse, args.kind, "--kind")
    if min(args.lc, args.m, args.lr) < 1:
        raise ConfigError("--lc, --m and --lr must be >= 1")
    m = 1 if kind is Kind.CROSS else args.m
    if kind is Kind.CROSS and args.m != 1:
        log.warning("cross runs one candidate per pass; dumping a single pass")
    spans = [(args.lc + i * args.lr, args.lc + (i + 1) * args.lr) for i in range(m)]
    mask = build_map(kind, args.lc, spans, context_sees_candidates=not args.context_blind)
    text = render_pgm(mask, args.scale) if args.format == "pgm" else render_ascii(mask) + "\n"
    _emit(text, args.out)
    n = count_allowed(mask)
    expect = allowed_pairs(kind, args.lc, args.lr, m, not args.context_blind)
    print(f"# {kind.value} {mask.shape[0]}x{mask.shape[1]} allowed={n} closed_form={expect}",
          file=sys.stderr)
    return 0


def _emit(text: str, path) -> None:
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unienc", description="Response selection with attention-mask paradigms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a ranking model with in-batch negatives")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a corpus and report R@k, MRR, MAP, P@1")
    _add_run_flags(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency per context across paradigms and pool sizes")
    b.add_argument("--paradigms", default="uni,cross")
    b.add_argument("--pool-sizes", type=_csv_ints, default=[10, 20, 50, 100])
    b.add_argument("--context-len", type=int, default=256)
    b.add_argument("--cand-len", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--batch-size", type=int, default=None)
    b.add_argument("--budget-mb", type=float, default=256.0)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--model-dim", type=int, default=64)
    b.add_argument("--ff-dim", type=int, default=256)
    b.add_argument("--allow-threads", action="store_true", help="do not pin BLAS to one thread")
    b.add_argument("--format", choices=("csv", "jsonl", "gnuplot"), default="csv")
    b.add_argument("--out", default=None)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-data", help="write a synthetic ranking corpus")
    defaults = D.SyntheticTaskSpec()
    g.add_argument("--out", default=None, help=f"directory (default: ${OUTPUT_ENV}/data or ./data)")
    g.add_argument("--rule", choices=D.RULES, default=defaults.rule)
    g.add_argument("--distractors", choices=D.DISTRACTORS, default=defaults.distractors)
    for name in ("vocab_size", "turns", "turn_len", "cand_len", "num_candidates", "n_keywords",
                 "keyword_types", "seed"):
        g.add_argument(_flag(name), type=int, default=getattr(defaults, name))
    g.add_argument("--n-train", type=int, default=4000)
    g.add_argument("--n-valid", type=int, default=200)
    g.add_argument("--n-test", type=int, default=500)
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("ingest", help="convert label<TAB>utterances...<TAB>response lines to JSONL")
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", choices=D.SPLITS, default="test")
    i.add_argument("--group-size", type=int, default=10)
    i.set_defaults(func=cmd_ingest)

    m = sub.add_parser("mask-dump", help="print an attention mask as ASCII or PGM")
    m.add_argument("--kind", required=True)
    m.add_argument("--lc", type=int, required=True, help="context length")
    m.add_argument("--m", type=int, default=1, help="number of candidates")
    m.add_argument("--lr", type=int, required=True, help="candidate span length")
    m.add_argument("--context-blind", action="store_true",
                   help="arrow: context rows do not attend to candidates")
    m.add_argument("--format", choices=("ascii", "pgm"), default="ascii")
    m.add_argument("--scale", type=int, default=1)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_mask_dump)
    return p


def _diagnostics_dir(args) -> str:
    for cand in (os.environ.get(OUTPUT_ENV), getattr(args, "cfg_output_dir", None)):
        if cand:
            try:
                os.makedirs(cand, exist_ok=True)
                return cand
            except OSError:
                pass
    return tempfile.gettempdir()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, D.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        path = os.path.join(_diagnostics_dir(args), "diagnostics.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"command: unienc {' '.join(argv)}\n")
            traceback.print_exc(file=fh)
        print(f"error: {type(exc).__name__}: {exc}\ndiagnostics: {path}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
