"""Command-line entry point: ``rdn gen-data|train|caption|eval|gradcheck``.

Settings resolve as built-in defaults < ``--config`` JSON < flags, and the
effective configuration is echoed to stderr. Exit codes: 0 success,
1 check failure, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    ConfigError,
    DataConfig,
    DatasetParseError,
    Vocabulary,
    build_vocab,
    generate_splits,
    read_dataset,
    record_from_json,
    write_splits,
)
from .evaluation import DESK_TRAIN, corpus_eval, tiny_gradcheck
from .inference import beam_search, export_trace, greedy_decode, trace_tokens
from .training import NumericalError, TrainConfig, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
VARIANT_FLAGS = {"baseline": "baseline", "pos": "pos_only", "ref": "ref_only", "full": "full"}
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - {"data", "train", "decode"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _echo_config(section: str, values: dict) -> None:
    print(json.dumps({section: values}, sort_keys=True), file=sys.stderr)


def _data_config(cfg: dict, **overrides) -> DataConfig:
    d = dict(cfg.get("data", {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return DataConfig.from_dict(d)


def _train_config(cfg: dict, base: dict | None = None, **overrides) -> TrainConfig:
    d = dict(DESK_TRAIN)
    d.update(base or {})
    d.update(cfg.get("train", {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


DECODE_DEFAULTS = {"beam_size": 5, "max_len": 20}


def _decode_config(args) -> dict:
    d = dict(DECODE_DEFAULTS)
    d.update(_load_config(args.config).get("decode", {}))
    for key, flag in (("beam_size", args.beam), ("max_len", args.max_len)):
        if flag is not None:
            d[key] = flag
    unknown = set(d) - set(DECODE_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown decode config keys: {sorted(unknown)}")
    if not (isinstance(d["beam_size"], int) and d["beam_size"] >= 1):
        raise UsageError("beam size must be a positive integer")
    if not (isinstance(d["max_len"], int) and d["max_len"] >= 1):
        raise UsageError("max_len must be a positive integer")
    _echo_config("decode", d)
    return d


def _dataset_path(data: str, split: str) -> Path:
    p = Path(data)
    return p / f"{split}.jsonl" if p.is_dir() else p


def _dataset_vocab(data: str) -> Vocabulary | None:
    p = Path(data)
    vocab_file = (p if p.is_dir() else p.parent) / "vocab.json"
    if not vocab_file.exists():
        return None
    return Vocabulary(json.loads(vocab_file.read_text(encoding="utf-8")))


# ------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    dc = _data_config(cfg, n_train=args.count, seed=args.seed)
    _echo_config("data", json.loads(dc.to_json()))
    min_count = cfg.get("train", {}).get("vocab_min_count", TrainConfig.vocab_min_count)
    splits = generate_splits(dc)
    out = Path(args.out)
    try:
        write_splits(splits, out)
        vocab = build_vocab([r.caption for r in splits["train"]] or [["<unk>"]], min_count)
        (out / "vocab.json").write_text(json.dumps(vocab.tokens) + "\n", encoding="utf-8")
        (out / "data_config.json").write_text(dc.to_json() + "\n", encoding="utf-8")
    except OSError as err:
        print(f"error: cannot write to {out}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    for name, recs in splits.items():
        print(f"{name}\t{len(recs)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    vocab = _dataset_vocab(args.data)
    ckpt = None
    if args.resume:
        ckpt = load_checkpoint(args.resume, vocab_fingerprint=vocab.fingerprint if vocab else None)
    tc = _train_config(
        cfg,
        base=ckpt.meta.get("train") if ckpt else None,
        variant=VARIANT_FLAGS[args.variant] if args.variant else None,
        total_iters=args.iters,
        lr0=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        lam=args.lam,
    )
    _echo_config("train", tc.as_dict())
    dataset = read_dataset(_dataset_path(args.data, "train"))
    params, start = None, 0
    if ckpt:
        params, start, vocab = ckpt.params, ckpt.iteration, ckpt.vocab
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume else "w"
    with open(out / "train.log", mode, encoding="utf-8") as logf:
        result = train(
            dataset, tc, vocab=vocab, params=params, start_iter=start,
            on_log=lambda e: logf.write(e.line() + "\n"), stop_iter=args.stop_at,
        )
    save_checkpoint(
        result.params,
        {"vocab": result.vocab, "iteration": result.iteration, "seed": tc.seed, "train": tc.as_dict()},
        out,
    )
    last = result.log[-1] if result.log else None
    print(f"saved {out} at iteration {result.iteration}" + (f", loss {last.total:.6f}" if last else ""))
    return EXIT_OK


def _records_from_arg(arg: str):
    if arg.lstrip().startswith("{"):
        return [record_from_json(arg)]
    return read_dataset(Path(arg))


def cmd_caption(args) -> int:
    dc = _decode_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    if args.vocab:
        expected = Vocabulary(json.loads(Path(args.vocab).read_text(encoding="utf-8")))
        if expected.fingerprint != ckpt.vocab.fingerprint:
            raise ConfigError(
                f"vocabulary {expected.fingerprint} does not match checkpoint {ckpt.vocab.fingerprint}"
            )
    records = _records_from_arg(args.record)
    first_trace = None
    for rec in records:
        if dc["beam_size"] == 1:
            ids, trace = greedy_decode(ckpt.params, rec.regions, dc["max_len"], ckpt.vocab)
        else:
            best = beam_search(ckpt.params, rec.regions, dc["beam_size"], dc["max_len"])[0]
            ids = best.words
            trace = trace_tokens(ckpt.params, rec.regions, list(best.tokens), ckpt.vocab)
        if first_trace is None:
            first_trace = trace
        print(" ".join(ckpt.vocab.decode(ids)))
    if args.trace and first_trace is not None:
        fmt = "dot" if str(args.trace).endswith(".dot") else "json"
        Path(args.trace).write_text(export_trace(first_trace, fmt), encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    dc = _decode_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = read_dataset(_dataset_path(args.data, args.split))
    vocab = _dataset_vocab(args.data)
    report = corpus_eval(
        ckpt, dataset, dc["beam_size"], dc["max_len"],
        vocab_fingerprint=vocab.fingerprint if vocab else None, oracle=args.oracle,
    )
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.dims != "tiny":
        raise UsageError("only --dims tiny is supported")
    res = tiny_gradcheck(args.seed, args.eps, corrupt=args.corrupt_grad)
    print(f"max_rel_error\t{res.max_error:.6e}\t{res.param}\t{list(res.index or ())}")
    if res.max_error > GRADCHECK_TOL:
        print(f"gradient check failed: worst parameter {res.param}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdn", description="Reflective-attention caption decoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/val/test splits")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="number of training records")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory or train .jsonl file")
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--iters", type=int, help="total iterations of the lr schedule")
    p.add_argument("--stop-at", type=int, help="stop early at this iteration")
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption records with a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="a JSON record line or a .jsonl file")
    p.add_argument("--beam", type=int, help="beam size (default 5; 1 is greedy)")
    p.add_argument("--max-len", type=int, help="longest caption in words (default 20)")
    p.add_argument("--trace", help="write the first record's attention trace (.json or .dot)")
    p.add_argument("--vocab", help="vocab.json that must match the checkpoint")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score a split with BLEU, ROUGE-L and CIDEr-D")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int, help="beam size (default 5; 1 is greedy)")
    p.add_argument("--max-len", type=int, help="longest caption in words (default 20)")
    p.add_argument("--oracle", action="store_true", help="score the references against themselves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--dims", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, DatasetParseError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
