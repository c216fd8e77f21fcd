"""Monotone alignment transitions built from shift/emit decisions.

Both parameterisations reduce to an ``I x J`` grid of emit probabilities
``p_emit[i, j]``: the chance of stopping at input row ``i`` to produce output
``j``. A jump from row ``k`` to row ``i >= k`` for output ``j`` shifts past
rows ``k..i-1`` and emits at ``i``:

    log p(a_j = i | a_{j-1} = k) = sum_{d=k}^{i-1} log(1 - p_emit[d, j]) + log p_emit[i, j]

The first output starts from row 0 as if the previous alignment were 0.
The geometric model uses a constant ``p_emit = e``. Mass that would shift
past the last row is dropped; nothing is renormalised.

All row/column indices in this module are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import diffcore as D


def estimate_emission(lengths: Iterable[tuple[int, int]]) -> float:
    """Maximum-likelihood geometric emit probability ``sum J / (sum I + sum J)``."""
    total_src = total_tgt = 0
    n = 0
    for src_len, tgt_len in lengths:
        if src_len < 1 or tgt_len < 1:
            raise ValueError(f"sequence lengths must be >= 1, got ({src_len}, {tgt_len})")
        total_src += src_len
        total_tgt += tgt_len
        n += 1
    if n == 0:
        raise ValueError("cannot estimate the emission probability from an empty corpus")
    return total_tgt / (total_src + total_tgt)


@dataclass(frozen=True)
class GeometricTransition:
    e: float

    def __post_init__(self):
        if not 0.0 < self.e < 1.0:
            raise ValueError(f"emission probability must lie in (0, 1), got {self.e}")

    def log_transition(self, k: int, i: int) -> float:
        if i < k:
            return -np.inf
        return (i - k) * np.log1p(-self.e) + np.log(self.e)

    def log_initial(self, i: int) -> float:
        return self.log_transition(0, i)

    def lattice(self, n_src: int, n_tgt: int) -> "EmitLattice":
        p = np.full((n_src, n_tgt), self.e, dtype=np.float64)
        return EmitLattice.from_probs(D.const(p))


class EmitLattice:
    """Per-cell emit probabilities plus their log and log-complement grids."""

    def __init__(self, log_emit: D.Var, log_shift: D.Var):
        if log_emit.shape != log_shift.shape or len(log_emit.shape) != 2:
            raise D.ContractError(
                f"emit/shift grids must share an I x J shape: {log_emit.shape} vs {log_shift.shape}")
        self.log_emit = log_emit
        self.log_shift = log_shift

    @classmethod
    def from_probs(cls, p_emit) -> "EmitLattice":
        p_emit = D.const(p_emit) if not isinstance(p_emit, D.Var) else p_emit
        return cls(D.log(p_emit), D.log(1.0 - p_emit))

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_emit.shape

    @property
    def p_emit(self) -> np.ndarray:
        return np.exp(self.log_emit.value)

    def _check(self, k: int, i: int, j: int) -> None:
        n_src, n_tgt = self.shape
        if not (0 <= k < n_src and 0 <= i < n_src and 0 <= j < n_tgt):
            raise D.ContractError(f"transition ({k} -> {i}, column {j}) outside {n_src} x {n_tgt} lattice")

    def log_transition(self, k: int, i: int, j: int) -> float:
        self._check(k, i, j)
        if i < k:
            return -np.inf
        shift = self.log_shift.value[k:i, j].sum()
        return float(shift + self.log_emit.value[i, j])

    def log_initial(self, i: int) -> float:
        return self.log_transition(0, i, 0)

    def transition_matrix(self, j: int) -> np.ndarray:
        """``M[k, i] = log p(a_j = i | a_{j-1} = k)`` with ``-inf`` below the diagonal."""
        n_src = self.shape[0]
        csum = np.concatenate([[0.0], np.cumsum(self.log_shift.value[:, j])])
        m = csum[None, :n_src] - csum[:n_src, None] + self.log_emit.value[None, :, j]
        return np.where(np.triu(np.ones((n_src, n_src), dtype=bool)), m, -np.inf)


def log_transition_geometric(k: int, i: int, e: float) -> float:
    return GeometricTransition(e).log_transition(k, i)


def log_initial_geometric(i: int, e: float) -> float:
    return GeometricTransition(e).log_initial(i)


def log_transition_neural(k: int, i: int, j: int, emit: EmitLattice) -> float:
    return emit.log_transition(k, i, j)
