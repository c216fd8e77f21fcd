"""``ssnt`` command line: train, decode, align, eval, estimate-e.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import lattice
from .data import CorpusFormatError, Vocab, apply_length_filters, detokenize, load_corpus, tokenize
from .decode import beam_decode, default_max_len, greedy_decode
from .diffcore import NumericalError
from .evaluate import evaluate
from .train import Checkpoint, TrainConfig, train
from .transition import estimate_emission

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ssnt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config handling ----------------------------------------------------------------------


def _coerce(field: dataclasses.Field, raw: str):
    hints = typing.get_type_hints(TrainConfig)
    tp = hints[field.name]
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    base = args[0] if args else tp
    if raw.lower() in ("none", "null") and args:
        return None
    if base is bool:
        if raw.lower() not in ("true", "false", "1", "0"):
            raise UsageError(f"{field.name} expects true/false, got {raw!r}")
        return raw.lower() in ("true", "1")
    try:
        return base(raw)
    except ValueError:
        raise UsageError(f"{field.name} expects {base.__name__}, got {raw!r}") from None


def resolve_config(path: str | None, overrides: list[str]) -> TrainConfig:
    values: dict = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from None
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        if key == "preset":
            values["preset"] = raw
            continue
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(fields[key], raw)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _load(path, level, attributes=False):
    try:
        return load_corpus(path, level, attributes=attributes)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except CorpusFormatError as exc:
        raise DataError(str(exc)) from None


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


# -- commands -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    for p in (args.train, args.dev):
        if not Path(p).is_file():
            raise DataError(f"file not found: {p}")
    train_raw = apply_length_filters(_load(args.train, cfg.level, cfg.attributes),
                                     args.max_src, args.max_tgt, args.max_product)
    dev_raw = apply_length_filters(_load(args.dev, cfg.level, cfg.attributes),
                                   args.max_src, args.max_tgt, args.max_product)
    if not train_raw:
        raise DataError("training corpus is empty after filtering")
    result = train(cfg, train_raw, dev_raw, out_dir=args.out)
    best = result.best
    print(f"best epoch {best.epoch}: dev perplexity {best.metric['dev_perplexity']:.6g}")
    return EXIT_OK


def _read_inputs(path) -> list[str]:
    if path in (None, "-"):
        lines = sys.stdin.read().splitlines()
    else:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except FileNotFoundError:
            raise DataError(f"file not found: {path}") from None
    return [ln for ln in lines if ln.strip()]


def _check_vocab(path, expected: Vocab, side: str) -> None:
    if path is None:
        return
    try:
        given = Vocab.load(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"cannot read {side} vocab {path}: {exc}") from None
    if given != expected:
        raise DataError(f"{side} vocab {path} does not match the checkpoint")


def cmd_decode(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.level and args.level != cfg.level:
        raise DataError(f"checkpoint was trained at {cfg.level} level, not {args.level}")
    _check_vocab(args.src_vocab, ckpt.src_vocab, "source")
    _check_vocab(args.tgt_vocab, ckpt.tgt_vocab, "target")
    if args.beam is not None and args.beam < 1:
        raise UsageError("--beam must be >= 1")
    model = ckpt.model()
    width = 1 if args.greedy else (args.beam if args.beam is not None else cfg.beam)
    use_greedy = args.greedy or (args.beam is None and width == 1)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for line in _read_inputs(args.input):
            fields = line.split("\t")
            text = fields[0]
            toks = tokenize(text, cfg.level)
            if cfg.attributes and len(fields) == 3:
                toks = tuple(f"<{a}>" for a in fields[2].split(";") if a) + toks
            src = ckpt.src_vocab.encode(toks)
            max_len = args.max_len or cfg.max_len or default_max_len(len(src), cfg.level)
            if use_greedy:
                best = greedy_decode(model, src, max_len)
            else:
                best = beam_decode(model, src, max_len, width)[0]
            record = {
                "input": text,
                "output": detokenize(ckpt.tgt_vocab.decode(best.tokens), cfg.level),
                "score": best.score,
                "alignment": [list(c) for c in best.cells()],
                "truncated": best.truncated,
            }
            out.write(json.dumps(record, ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def alignment_svg(gamma: np.ndarray, path: list[int], src_labels, tgt_labels, cell: int = 22) -> str:
    """Heatmap of posteriors with the best path outlined."""
    n_src, n_tgt = gamma.shape
    left, top = 90, 70
    width, height = left + n_tgt * cell + 10, top + n_src * cell + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="monospace" font-size="11">']
    for j, lab in enumerate(tgt_labels):
        x = left + j * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 6}" transform="rotate(-60 {x} {top - 6})">'
                     f'{escape(lab)}</text>')
    for i, lab in enumerate(src_labels):
        parts.append(f'<text x="{left - 6}" y="{top + i * cell + cell * 0.7:.1f}" '
                     f'text-anchor="end">{escape(lab)}</text>')
    for i in range(n_src):
        for j in range(n_tgt):
            shade = int(round(255 * (1.0 - float(np.clip(gamma[i, j], 0.0, 1.0)))))
            parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb({shade},{shade},255)" stroke="#eee"/>')
    for j, i in enumerate(path):
        parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                     f'height="{cell}" fill="none" stroke="red" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_align(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    level = ckpt.config.level
    src_toks, tgt_toks = tokenize(args.source, level), tokenize(args.target, level)
    if not src_toks or not tgt_toks:
        raise UsageError("align needs a non-empty source and target")
    src, tgt = ckpt.src_vocab.encode(src_toks), ckpt.tgt_vocab.encode(tgt_toks)
    model = ckpt.model()
    try:
        lat = model.align(src, tgt)
    except lattice.DegenerateLatticeError as exc:
        raise NumericalError(f"pair has zero probability; first impossible column: "
                             f"{exc.column}") from None
    gamma = lat.posteriors
    path, score = model.viterbi(src, tgt)
    tsv = lattice.posteriors_tsv(gamma)
    if args.tsv:
        Path(args.tsv).write_text(tsv, encoding="utf-8")
    else:
        sys.stdout.write(tsv)
    if args.svg:
        labels_src = list(src_toks) + ["</s>"]
        labels_tgt = list(tgt_toks) + ["</s>"]
        Path(args.svg).write_text(alignment_svg(gamma, path, labels_src, labels_tgt), encoding="utf-8")
    print(json.dumps({"log_likelihood": lat.log_likelihood, "viterbi_score": score,
                      "viterbi_path": [[i, j] for j, i in enumerate(path)]}),
          file=sys.stderr if not args.tsv else sys.stdout)
    return EXIT_OK


def _read_strings(path) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    return [ln.split("\t")[-1] for ln in lines]


def cmd_eval(args) -> int:
    refs, hyps = _read_strings(args.refs), _read_strings(args.hyps)
    if len(refs) != len(hyps):
        raise DataError(f"{args.refs} has {len(refs)} lines but {args.hyps} has {len(hyps)}")
    report = evaluate(refs, hyps, args.metric, args.level)
    prefix = Path(args.out_prefix) if args.out_prefix else None
    if prefix is not None:
        report.write(prefix.with_name(prefix.name + ".csv"), prefix.with_name(prefix.name + ".json"))
    print(json.dumps({"metric": args.metric, "count": len(report.records), **report.aggregates()},
                     sort_keys=True))
    return EXIT_OK


def cmd_estimate_e(args) -> int:
    pairs = _load(args.train, args.level)
    if not pairs:
        raise DataError(f"{args.train} contains no pairs")
    e = estimate_emission((len(p.source), len(p.target)) for p in pairs)
    print(format(e, ".17g"))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssnt", description="Neural transduction over latent monotone alignments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON TrainConfig file")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--max-src", type=int, default=50)
    p.add_argument("--max-tgt", type=int, default=25)
    p.add_argument("--max-product", type=int, default=500)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode input lines")
    p.add_argument("checkpoint")
    p.add_argument("--input", help="TSV or plain lines (first column is the source); default stdin")
    p.add_argument("--output", help="JSON-lines output; default stdout")
    p.add_argument("--beam", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-len", type=int)
    p.add_argument("--level", choices=("char", "word"))
    p.add_argument("--src-vocab")
    p.add_argument("--tgt-vocab")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("align", help="forced alignment of one pair")
    p.add_argument("checkpoint")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--tsv", help="write posteriors here instead of stdout")
    p.add_argument("--svg", help="write a heatmap here")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("refs")
    p.add_argument("hyps")
    p.add_argument("--metric", choices=("exact", "rouge"), default="exact")
    p.add_argument("--level", choices=("char", "word"), default="word")
    p.add_argument("--out-prefix", help="write <prefix>.csv and <prefix>.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estimate-e", help="closed-form geometric emit probability")
    p.add_argument("train")
    p.add_argument("--level", choices=("char", "word"), default="char")
    p.set_defaults(func=cmd_estimate_e)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or an argparse usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ssnt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"ssnt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"ssnt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
