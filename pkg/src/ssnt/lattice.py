"""Forward/backward recursions over the monotone alignment lattice.

Rows index input positions, columns output positions, everything in log
space. With ``S[i, j] = sum_{d<i} log_shift[d, j]`` the forward recursion

    alpha[i, j] = word[i, j] + log sum_{k<=i} alpha[k, j-1] p(a_j = i | a_{j-1} = k)

factorises into ``word + emit + S`` plus a running log-sum-exp of
``alpha[:, j-1] - S[:, j]``, so each column costs O(I) and is built from
differentiable ops; training gradients come from reverse mode through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as D
from .transition import EmitLattice


class DegenerateLatticeError(D.NumericalError):
    """Every alignment path has zero probability."""

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


def _check_shapes(log_word, trans: EmitLattice) -> tuple[int, int]:
    shape = log_word.shape
    if len(shape) != 2 or shape[0] == 0 or shape[1] == 0:
        raise D.ContractError(f"lattice needs a non-empty I x J grid, got {shape}")
    if trans.shape != shape:
        raise D.ContractError(f"word grid {shape} and transition grid {trans.shape} differ")
    return shape


def _shift_prefix(trans: EmitLattice) -> D.Var:
    return D.exclusive_cumsum(trans.log_shift, axis=0)


def forward(log_word, trans: EmitLattice) -> D.Var:
    """Log forward table ``log alpha`` (I x J), differentiable."""
    log_word = D.const(log_word) if not isinstance(log_word, D.Var) else log_word
    _, n_tgt = _check_shapes(log_word, trans)
    prefix = _shift_prefix(trans)
    local = log_word + trans.log_emit + prefix
    cols = [local[:, 0]]
    for j in range(1, n_tgt):
        carried = D.logcumsumexp(cols[-1] - prefix[:, j])
        cols.append(local[:, j] + carried)
    return D.stack(cols, axis=1)


def backward(log_word, trans: EmitLattice) -> np.ndarray:
    """Log backward table ``log beta`` (I x J); last column is 0."""
    lw = np.asarray(log_word.value if isinstance(log_word, D.Var) else log_word, dtype=np.float64)
    _check_shapes(lw, trans)
    n_src, n_tgt = lw.shape
    prefix = np.concatenate([np.zeros((1, n_tgt)), np.cumsum(trans.log_shift.value, axis=0)[:-1]])
    emit = trans.log_emit.value
    beta = np.zeros((n_src, n_tgt))
    for j in range(n_tgt - 2, -1, -1):
        nxt = prefix[:, j + 1] + emit[:, j + 1] + lw[:, j + 1] + beta[:, j + 1]
        tail = np.logaddexp.accumulate(nxt[::-1])[::-1]
        beta[:, j] = tail - prefix[:, j + 1]
    return beta


def log_likelihood(log_alpha) -> D.Var:
    """``log p(y | x)``: log-sum-exp of the last forward column."""
    log_alpha = D.const(log_alpha) if not isinstance(log_alpha, D.Var) else log_alpha
    ll = D.logsumexp(log_alpha[:, log_alpha.shape[1] - 1], axis=0)
    if ll.value == -np.inf:
        raise DegenerateLatticeError("all alignment paths have zero probability",
                                     column=first_dead_column(log_alpha.value))
    return ll


def first_dead_column(log_alpha: np.ndarray) -> int | None:
    dead = np.all(np.isneginf(log_alpha), axis=0)
    hits = np.flatnonzero(dead)
    return int(hits[0]) if hits.size else None


def posteriors(log_alpha, log_beta, log_lik) -> np.ndarray:
    """Alignment posterior ``gamma = alpha * beta / p(y|x)``; columns sum to 1."""
    la = log_alpha.value if isinstance(log_alpha, D.Var) else np.asarray(log_alpha)
    ll = float(log_lik.value if isinstance(log_lik, D.Var) else log_lik)
    if not np.isfinite(ll):
        raise DegenerateLatticeError("posteriors undefined for a zero-probability pair",
                                     column=first_dead_column(la))
    with np.errstate(invalid="ignore"):
        gamma = np.exp(la + np.asarray(log_beta) - ll)
    return np.nan_to_num(gamma, nan=0.0)


def viterbi(log_word, trans: EmitLattice) -> tuple[list[int], float]:
    """Best monotone alignment (one row per column) and its log score.

    Ties go to the smaller predecessor row, then the smaller final row.
    """
    lw = np.asarray(log_word.value if isinstance(log_word, D.Var) else log_word, dtype=np.float64)
    n_src, n_tgt = _check_shapes(lw, trans)
    delta = np.full((n_src, n_tgt), -np.inf)
    back = np.zeros((n_src, n_tgt), dtype=np.int64)
    delta[:, 0] = [trans.log_initial(i) for i in range(n_src)] + lw[:, 0]
    for j in range(1, n_tgt):
        cand = delta[:, j - 1][:, None] + trans.transition_matrix(j)
        back[:, j] = np.argmax(cand, axis=0)
        delta[:, j] = cand[back[:, j], np.arange(n_src)] + lw[:, j]
    last = int(np.argmax(delta[:, -1]))
    path = [last]
    for j in range(n_tgt - 1, 0, -1):
        path.append(int(back[path[-1], j]))
    return path[::-1], float(delta[last, -1])


@dataclass
class AlignmentLattice:
    log_word: np.ndarray
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_likelihood: float

    @property
    def posteriors(self) -> np.ndarray:
        return posteriors(self.log_alpha, self.log_beta, self.log_likelihood)


def build(log_word, trans: EmitLattice) -> AlignmentLattice:
    """Run both recursions without recording a graph."""
    with D.no_grad():
        alpha = forward(log_word, trans)
        ll = log_likelihood(alpha)
    lw = log_word.value if isinstance(log_word, D.Var) else np.asarray(log_word)
    return AlignmentLattice(np.asarray(lw, dtype=np.float64), alpha.value,
                            backward(lw, trans), float(ll.value))


def posteriors_tsv(gamma: np.ndarray) -> str:
    """One line per input row, tab-separated columns of ``gamma``."""
    return "".join("\t".join(repr(float(v)) for v in row) + "\n" for row in gamma)
