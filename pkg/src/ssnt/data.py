"""Corpus reading, vocabularies and length filters."""

from __future__ import annotations

import collections
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class RawPair:
    source: tuple[str, ...]
    target: tuple[str, ...]


@dataclass(frozen=True)
class ExamplePair:
    """Token ids, each side terminated by ``</s>``."""

    source: tuple[int, ...]
    target: tuple[int, ...]


def tokenize(text: str, level: str) -> tuple[str, ...]:
    if level == "char":
        return tuple(text)
    if level == "word":
        return tuple(t for t in text.split(" ") if t)
    raise ValueError(f"unknown tokenisation level {level!r}")


def parse_lines(lines: Iterable[str], level: str, origin="<input>",
                attributes: bool = False) -> list[RawPair]:
    """Parse ``source<TAB>target`` lines; blank lines are skipped.

    With ``attributes=True`` a line may carry a third field of
    ``;``-separated morphological attributes, prepended to the source as
    single composite tokens.
    """
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if attributes and len(fields) == 3:
            attrs = tuple(f"<{a}>" for a in fields[2].split(";") if a)
        elif len(fields) == 2:
            attrs = ()
        else:
            raise CorpusFormatError(origin, lineno, f"expected one TAB, found {len(fields) - 1}")
        src, tgt = tokenize(fields[0], level), tokenize(fields[1], level)
        if not src or not tgt:
            raise CorpusFormatError(origin, lineno, "empty source or target")
        pairs.append(RawPair(attrs + src, tgt))
    return pairs


def load_corpus(path, level: str = "char", attributes: bool = False) -> list[RawPair]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_lines(fh, level, origin=path, attributes=attributes)


def apply_length_filters(pairs: Sequence[RawPair], max_src: int = 50, max_tgt: int = 25,
                         max_product: int = 500) -> list[RawPair]:
    """Drop pairs that are too long on either side or whose length product is too big."""
    return [p for p in pairs
            if len(p.source) <= max_src and len(p.target) <= max_tgt
            and len(p.source) * len(p.target) <= max_product]


class Vocab:
    """Bijective token/id map; ids 0..3 are the reserved tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str], eos: bool = True) -> tuple[int, ...]:
        ids = [self.stoi.get(t, UNK_ID) for t in tokens]
        if eos:
            ids.append(EOS_ID)
        return tuple(ids)

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out

    def to_lines(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    def save(self, path) -> None:
        Path(path).write_text(self.to_lines(), encoding="utf-8")

    @classmethod
    def from_tokens(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[:4]) != RESERVED:
            raise ValueError("vocab must start with the four reserved tokens")
        v = cls()
        for t in itos[4:]:
            if t in v.stoi:
                raise ValueError(f"duplicate vocab entry {t!r}")
            v.add(t)
        return v

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_tokens(lines)


def _ranked(counter: collections.Counter, min_count: int) -> list[str]:
    kept = [(t, c) for t, c in counter.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return [t for t, _ in kept]


def build_vocab(pairs: Sequence[RawPair], min_count: int = 1) -> tuple[Vocab, Vocab]:
    """Source and target vocabs ordered by count (descending) then token."""
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    src = collections.Counter(t for p in pairs for t in p.source)
    tgt = collections.Counter(t for p in pairs for t in p.target)
    return Vocab(_ranked(src, min_count)), Vocab(_ranked(tgt, min_count))


def encode_pairs(pairs: Sequence[RawPair], src_vocab: Vocab, tgt_vocab: Vocab) -> list[ExamplePair]:
    return [ExamplePair(src_vocab.encode(p.source), tgt_vocab.encode(p.target)) for p in pairs]


def detokenize(tokens: Sequence[str], level: str) -> str:
    return "".join(tokens) if level == "char" else " ".join(tokens)
