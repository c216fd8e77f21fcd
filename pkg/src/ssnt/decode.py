"""Joint search over output strings and monotone alignments.

``greedy_decode`` fills the ``Q``/``bp``/``W`` tables cell by cell, keeping
one prefix per cell. ``beam_decode`` keeps up to ``k`` prefixes per cell.

Shared conventions:

* the decoder state used at cell ``(i, j)`` is the one obtained by reading
  the prefix recovered through the predecessor's back-pointers;
* a cell whose word is ``</s>`` is finished and is not extended;
* search stops once the best finished score is at least every live score
  in the current column (scores only go down along a path);
* ties go to the lower token id, then the lower predecessor row.

Rows/columns are 0-based; ``alignment[j]`` is the input row of output ``j``.
Returned token lists exclude ``</s>``; alignments include its position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as D
from .data import EOS_ID
from .model import SSNT


@dataclass
class Decoded:
    tokens: list[int]
    alignment: list[int]
    score: float
    truncated: bool = False

    def cells(self) -> list[tuple[int, int]]:
        return [(i, j) for j, i in enumerate(self.alignment)]


@dataclass
class DecodeTables:
    Q: np.ndarray
    bp: np.ndarray
    W: np.ndarray
    i_end: int
    j_end: int


def default_max_len(src_len: int, level: str = "char") -> int:
    return 2 * src_len + 5 if level == "char" else 25


def _log_softmax_rows(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, -np.inf, z)
    m = z.max(axis=-1, keepdims=True)
    return z - (np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m)


class CellScorer:
    """Per-input cache of encoder projections for fast cell scoring."""

    def __init__(self, model: SSNT, src: Sequence[int]):
        self.model = model
        nets = model.nets
        d = nets.cfg.enc_dim
        with D.no_grad():
            H = nets.encode(src).value
        self.n_src = H.shape[0]
        self.H = H
        p = {k: v.value for k, v in nets.params.items()}
        self.word_h = H @ p["out_W"][:, :d].T
        self.word_s = p["out_W"][:, d:]
        self.word_b = p["out_b"]
        self.mask = nets.mask
        if model.geometric is None:
            self.emit_h = H @ p["trans_W"][:, :d].T
            self.emit_s = p["trans_W"][:, d:]
            self.emit_b = p["trans_b"]
            self.emit_v = p["trans_v"]
            self.emit_c = p["trans_c"]

    def start(self):
        with D.no_grad():
            return self.model.nets.decoder_start()

    def advance(self, state, token: int):
        with D.no_grad():
            return self.model.nets.decoder_advance(state, token)

    @staticmethod
    def top(state) -> np.ndarray:
        return state[-1].h.value

    def word_log_probs(self, s: np.ndarray) -> np.ndarray:
        """``I x V`` log distributions for every row given decoder vector ``s``."""
        return _log_softmax_rows(self.word_h + (self.word_s @ s + self.word_b), self.mask)

    def log_emit_shift(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.model.geometric is not None:
            e = self.model.geometric.e
            return np.full(self.n_src, np.log(e)), np.full(self.n_src, np.log1p(-e))
        z = np.tanh(self.emit_h + (self.emit_s @ s + self.emit_b)) @ self.emit_v + self.emit_c[0]
        prob = np.clip(1.0 / (1.0 + np.exp(-z)), D.SIGMOID_EPS, 1.0 - D.SIGMOID_EPS)
        return np.log(prob), np.log(1.0 - prob)

    def log_transitions(self, k: int, s: np.ndarray) -> np.ndarray:
        """``log p(a_j = i | a_{j-1} = k)`` for every row ``i`` (``-inf`` below ``k``)."""
        log_emit, log_shift = self.log_emit_shift(s)
        prefix = np.concatenate([[0.0], np.cumsum(log_shift)[:-1]])
        out = prefix - prefix[k] + log_emit
        out[:k] = -np.inf
        return out


# -- greedy DP ---------------------------------------------------------------------


def greedy_decode(model: SSNT, src: Sequence[int], max_len: int,
                  return_tables: bool = False):
    """Best (tokens, alignment, score) by the one-prefix-per-cell DP."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    sc = CellScorer(model, src)
    n_src = sc.n_src
    Q = np.full((n_src, max_len), -np.inf)
    bp = np.full((n_src, max_len), -1, dtype=np.int64)
    W = np.full((n_src, max_len), -1, dtype=np.int64)
    states = [dict() for _ in range(max_len)]  # states[j][i]: decoder after reading cell (i, j)'s prefix

    start = sc.start()
    s = sc.top(start)
    scores = sc.log_transitions(0, s)[:, None] + sc.word_log_probs(s)
    W[:, 0] = np.argmax(scores, axis=1)
    Q[:, 0] = scores[np.arange(n_src), W[:, 0]]

    def chain(i: int, j: int) -> tuple[list[int], list[int]]:
        toks, rows = [], []
        while j >= 0:
            toks.append(int(W[i, j]))
            rows.append(i)
            i, j = int(bp[i, j]), j - 1
        return toks[::-1], rows[::-1]

    def state_at(i: int, j: int):
        if i not in states[j]:
            prev = start if j == 0 else state_at(int(bp[i, j]), j - 1)
            states[j][i] = sc.advance(prev, int(W[i, j]))
        return states[j][i]

    best_done: tuple | None = None
    j_last = 0
    for j in range(max_len):
        j_last = j
        if j > 0:
            n_vocab = sc.word_b.shape[0]
            cand = np.full((n_src, n_vocab, n_src), -np.inf)
            for k in range(n_src):
                if not np.isfinite(Q[k, j - 1]) or W[k, j - 1] == EOS_ID:
                    continue
                s = sc.top(state_at(k, j - 1))
                cand[:, :, k] = Q[k, j - 1] + sc.log_transitions(k, s)[:, None] + sc.word_log_probs(s)
            flat = cand.reshape(n_src, -1)
            arg = np.argmax(flat, axis=1)
            Q[:, j] = flat[np.arange(n_src), arg]
            W[:, j], bp[:, j] = np.divmod(arg, n_src)
            dead = ~np.isfinite(Q[:, j])
            W[dead, j], bp[dead, j] = -1, -1
        for i in range(n_src):
            if W[i, j] == EOS_ID:
                key = (-Q[i, j], j, i)
                if best_done is None or key < best_done:
                    best_done = key
        live = [Q[i, j] for i in range(n_src) if np.isfinite(Q[i, j]) and W[i, j] != EOS_ID]
        if best_done is not None and (not live or -best_done[0] >= max(live)):
            break

    if best_done is not None:
        _, j_end, i_end = best_done
        truncated = False
    else:
        j_end = j_last
        i_end = int(np.argmax(Q[:, j_end]))
        truncated = True
    toks, rows = chain(i_end, j_end)
    if not truncated:
        toks = toks[:-1]
    result = Decoded(toks, rows, float(Q[i_end, j_end]), truncated)
    if return_tables:
        width = j_last + 1
        return result, DecodeTables(Q[:, :width], bp[:, :width], W[:, :width], i_end, j_end)
    return result


# -- beam search ---------------------------------------------------------------------


@dataclass
class Hypothesis:
    row: int
    tokens: tuple[int, ...]
    alignment: tuple[int, ...]
    score: float
    parent_state: object = field(repr=False, default=None)
    _state: object = field(repr=False, default=None)

    @property
    def col(self) -> int:
        return len(self.tokens) - 1

    def state(self, sc: CellScorer):
        if self._state is None:
            self._state = sc.advance(self.parent_state, self.tokens[-1])
        return self._state


def _result_key(h: Hypothesis):
    return (-h.score, len(h.tokens), h.row)


def beam_decode(model: SSNT, src: Sequence[int], max_len: int, width: int) -> list[Decoded]:
    """Up to ``width`` finished hypotheses, best first."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    sc = CellScorer(model, src)
    n_src = sc.n_src
    start = sc.start()
    done: list[Hypothesis] = []
    active: list[list[Hypothesis]] = []

    def expand(parents: list[tuple[int, float, tuple, tuple, object]]) -> list[list[tuple]]:
        # parents: (row, score, tokens, alignment, decoder state ready for this column)
        cells: list[list[tuple]] = [[] for _ in range(n_src)]
        for rank, (row, score, toks, align, state) in enumerate(parents):
            s = sc.top(state)
            trans = sc.log_transitions(row, s)
            words = sc.word_log_probs(s)
            for i in range(row, n_src):
                total = score + trans[i] + words[i]
                best = np.argsort(-total, kind="stable")[:width]
                for y in best:
                    if np.isfinite(total[y]):
                        cells[i].append((float(total[y]), int(y), row, rank, toks + (int(y),),
                                         align + (i,), state))
        return cells

    parents = [(0, 0.0, (), (), start)]
    last_active: list[Hypothesis] = []
    for j in range(max_len):
        cells = expand(parents)
        active = []
        for i, cand in enumerate(cells):
            cand.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
            seen, kept = set(), []
            for c in cand:
                if c[4] in seen:
                    continue
                seen.add(c[4])
                kept.append(c)
                if len(kept) == width:
                    break
            for score, y, _, _, toks, align, state in kept:
                hyp = Hypothesis(i, toks, align, score, parent_state=state)
                (done if y == EOS_ID else active).append(hyp)
        if active:
            last_active = active
        if done and (not active or -_result_key(min(done, key=_result_key))[0]
                     >= max(h.score for h in active)):
            break
        if not active:
            break
        parents = [(h.row, h.score, h.tokens, h.alignment, h.state(sc)) for h in active]

    if done:
        done.sort(key=_result_key)
        return [Decoded(list(h.tokens[:-1]), list(h.alignment), h.score) for h in done[:width]]
    last_active.sort(key=_result_key)
    return [Decoded(list(h.tokens), list(h.alignment), h.score, truncated=True)
            for h in last_active[:width]]


# -- rescoring -----------------------------------------------------------------------------


def path_score(model: SSNT, src: Sequence[int], target: Sequence[int],
               alignment: Sequence[int]) -> float:
    """Sum of transition and word log-probs along a given path (through the lattice inputs)."""
    with D.no_grad():
        inputs = model.lattice_inputs(src, target)
    lw = inputs.log_word.value
    total = 0.0
    prev = 0
    for j, i in enumerate(alignment):
        total += inputs.emit.log_transition(prev, i, j) + lw[i, j]
        prev = i
    return total


def trace_steps(model: SSNT, src: Sequence[int], tokens: Sequence[int],
                alignment: Sequence[int]) -> list[tuple[float, float, int]]:
    """Per output step: (log transition, log word prob, argmax word) along a fixed path."""
    sc = CellScorer(model, src)
    state = sc.start()
    out, prev = [], 0
    for j, i in enumerate(alignment):
        s = sc.top(state)
        words = sc.word_log_probs(s)[i]
        out.append((float(sc.log_transitions(prev, s)[i]), float(words[tokens[j]]),
                    int(np.argmax(words))))
        state = sc.advance(state, tokens[j])
        prev = i
    return out
