"""The segment-to-segment transducer: networks + transition + lattice."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as D
from . import lattice
from .data import BOS_ID
from .seqnn import NetConfig, Networks
from .transition import EmitLattice, GeometricTransition


@dataclass
class LatticeInputs:
    """Differentiable per-pair scores that feed the alignment lattice."""

    log_word: D.Var      # I x J, log p(y_j | h_i, s_j)
    emit: EmitLattice    # I x J emit/shift grids
    enc: D.Var           # I x enc_dim
    dec: D.Var           # J x hidden


class SSNT:
    """Neural (``emit_e is None``) or geometric-transition transducer."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None, emit_e: float | None = None):
        if cfg.neural_transition == (emit_e is not None):
            raise ValueError("geometric models need emit_e; neural models must not set it")
        self.cfg = cfg
        self.nets = Networks(cfg, rng=rng, params=params)
        self.geometric = GeometricTransition(emit_e) if emit_e is not None else None

    @property
    def params(self) -> dict[str, D.Var]:
        return self.nets.params

    @property
    def emit_e(self) -> float | None:
        return self.geometric.e if self.geometric is not None else None

    def lattice_inputs(self, src: Sequence[int], tgt: Sequence[int], dropout_in: float = 0.0,
                       dropout_out: float = 0.0, rng: np.random.Generator | None = None) -> LatticeInputs:
        """Scores for a pair; ``tgt`` ends with ``</s>`` and has no ``<s>``."""
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.size == 0:
            raise ValueError("target sequence is empty")
        enc = self.nets.encode(src, dropout_in, dropout_out, rng)
        prefix = np.concatenate([[BOS_ID], tgt[:-1]])
        dec = self.nets.decoder_states(prefix, dropout_in, dropout_out, rng)
        grid = self.nets.word_log_prob_grid(enc, dec)
        ids = np.broadcast_to(tgt, (enc.shape[0], tgt.size))
        log_word = D.cast(D.pick_last(grid, ids), np.float64)
        if self.geometric is not None:
            emit = self.geometric.lattice(enc.shape[0], tgt.size)
        else:
            emit = EmitLattice.from_probs(D.cast(self.nets.emit_prob_grid(enc, dec), np.float64))
        return LatticeInputs(log_word, emit, enc, dec)

    def log_likelihood(self, src, tgt, dropout_in=0.0, dropout_out=0.0, rng=None) -> D.Var:
        inputs = self.lattice_inputs(src, tgt, dropout_in, dropout_out, rng)
        return lattice.log_likelihood(lattice.forward(inputs.log_word, inputs.emit))

    def loss(self, src, tgt, **kw) -> D.Var:
        return -self.log_likelihood(src, tgt, **kw)

    def align(self, src, tgt) -> lattice.AlignmentLattice:
        """Forced alignment of a given pair (no dropout, no graph)."""
        with D.no_grad():
            inputs = self.lattice_inputs(src, tgt)
        return lattice.build(inputs.log_word, inputs.emit)

    def viterbi(self, src, tgt) -> tuple[list[int], float]:
        with D.no_grad():
            inputs = self.lattice_inputs(src, tgt)
        return lattice.viterbi(inputs.log_word, inputs.emit)
