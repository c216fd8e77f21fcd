"""Embeddings, LSTM encoder/decoder and the two per-cell output networks.

The encoder and decoder keep separate hidden states: the decoder state for
output position ``j`` only ever sees ``<s> y_1 .. y_{j-1}``. The two heads
score a cell ``(i, j)`` from ``[h_i; s_j]``:

* word head: ``log_softmax(W_w [h_i; s_j] + b_w)`` over the target vocab
* emit head: ``sigmoid(v . tanh(W_t [h_i; s_j] + b_t) + c)``, clamped

Grid versions evaluate every cell at once by splitting ``W`` into its
``h`` and ``s`` column blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as D

INIT_SCALE = 0.08
FORGET_BIAS = 1.0


@dataclass
class NetConfig:
    src_vocab: int
    tgt_vocab: int
    hidden: int = 32
    emb: int | None = None
    layers: int = 1
    bidirectional: bool = False
    neural_transition: bool = True
    mlp_hidden: int | None = None
    dtype: str = "float64"
    masked_ids: tuple[int, ...] = field(default=(0, 2))

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden size and layer count must be >= 1")
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise ValueError("vocabularies must be non-empty")
        self.masked_ids = tuple(self.masked_ids)

    @property
    def emb_dim(self) -> int:
        return self.emb or self.hidden

    @property
    def mlp_dim(self) -> int:
        return self.mlp_hidden or self.hidden

    @property
    def enc_dim(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masked_ids"] = list(self.masked_ids)
        return d


class LSTMState(NamedTuple):
    h: D.Var
    c: D.Var


def lstm_step(W: D.Var, b: D.Var, prev: LSTMState, x) -> LSTMState:
    """One LSTM step; ``W`` is ``4H x (in + H)`` with gate blocks ``[i, f, o, g]``."""
    n = prev.h.shape[-1]
    x = D.const(x) if not isinstance(x, D.Var) else x
    if W.shape != (4 * n, x.shape[-1] + n):
        raise D.ContractError(f"lstm weights {W.shape} do not fit input {x.shape} / hidden {n}")
    hc = D.lstm_cell(D.affine(W, b, D.concat([x, prev.h])), prev.c)
    return LSTMState(hc[:n], hc[n:])


def run_lstm(W: D.Var, b: D.Var, X: D.Var, reverse: bool = False) -> D.Var:
    """Hidden states for every row of ``X`` (T x in), zero initial state."""
    n_in = X.shape[1]
    n = b.shape[0] // 4
    proj = D.affine(W[:, :n_in], b, X)
    w_rec = W[:, n_in:]
    order = range(X.shape[0] - 1, -1, -1) if reverse else range(X.shape[0])
    outs = [None] * X.shape[0]
    h = c = None
    for t in order:
        pre = proj[t]
        if h is None:
            c = D.const(np.zeros(n, dtype=proj.dtype))
        else:
            pre = pre + D.matmul(w_rec, h)
        hc = D.lstm_cell(pre, c)
        h, c = hc[:n], hc[n:]
        outs[t] = h
    return D.stack(outs, axis=0)


class Networks:
    """Parameter store plus the forward computations of every sub-network."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        if params is None:
            params = self._init(rng if rng is not None else np.random.default_rng(0))
        self.params = {name: D.parameter(np.asarray(v, dtype=self.dtype), name)
                       for name, v in params.items()}
        mask = np.zeros(cfg.tgt_vocab, dtype=bool)
        mask[[i for i in cfg.masked_ids if i < cfg.tgt_vocab]] = True
        self.mask = mask

    # -- parameters ---------------------------------------------------------------

    def shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        H, E = cfg.hidden, cfg.emb_dim
        shapes = {"src_emb": (cfg.src_vocab, E), "tgt_emb": (cfg.tgt_vocab, E)}
        directions = ("fw", "bw") if cfg.bidirectional else ("fw",)
        n_in = E
        for layer in range(cfg.layers):
            for d in directions:
                shapes[f"enc_{d}{layer}_W"] = (4 * H, n_in + H)
                shapes[f"enc_{d}{layer}_b"] = (4 * H,)
            n_in = cfg.enc_dim
        n_in = E
        for layer in range(cfg.layers):
            shapes[f"dec{layer}_W"] = (4 * H, n_in + H)
            shapes[f"dec{layer}_b"] = (4 * H,)
            n_in = H
        joint = cfg.enc_dim + H
        shapes["out_W"] = (cfg.tgt_vocab, joint)
        shapes["out_b"] = (cfg.tgt_vocab,)
        if cfg.neural_transition:
            shapes["trans_W"] = (cfg.mlp_dim, joint)
            shapes["trans_b"] = (cfg.mlp_dim,)
            shapes["trans_v"] = (cfg.mlp_dim,)
            shapes["trans_c"] = (1,)
        return shapes

    def _init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.shapes().items():
            value = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
            if name.endswith("_b") and (name.startswith("enc_") or name.startswith("dec")):
                n = shape[0] // 4
                value[n:2 * n] = FORGET_BIAS
            params[name] = value
        return params

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    # -- recurrences ---------------------------------------------------------------

    def encode(self, src_ids: Sequence[int], dropout_in: float = 0.0,
               dropout_out: float = 0.0, rng: np.random.Generator | None = None) -> D.Var:
        """Encoder states ``H`` (I x enc_dim); bidirectional rows are ``[fw; bw]``."""
        ids = np.asarray(src_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot encode an empty source sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.src_vocab:
            raise D.ContractError("source id outside the vocabulary")
        p = self.params
        X = D.rows(p["src_emb"], ids)
        for layer in range(self.cfg.layers):
            X = D.dropout(X, dropout_in, rng)
            fw = run_lstm(p[f"enc_fw{layer}_W"], p[f"enc_fw{layer}_b"], X)
            if self.cfg.bidirectional:
                bw = run_lstm(p[f"enc_bw{layer}_W"], p[f"enc_bw{layer}_b"], X, reverse=True)
                X = D.concat([fw, bw], axis=1)
            else:
                X = fw
        return D.dropout(X, dropout_out, rng)

    def decoder_states(self, prefix_ids: Sequence[int], dropout_in: float = 0.0,
                       dropout_out: float = 0.0, rng: np.random.Generator | None = None,
                       bos: int = 2) -> D.Var:
        """Decoder states ``S``: row ``j`` has read ``prefix_ids[:j+1]``.

        ``prefix_ids`` must start with the ``<s>`` id.
        """
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if ids.size == 0 or ids[0] != bos:
            raise D.ContractError("decoder prefix must start with <s>")
        if ids.min() < 0 or ids.max() >= self.cfg.tgt_vocab:
            raise D.ContractError("target id outside the vocabulary")
        p = self.params
        X = D.rows(p["tgt_emb"], ids)
        for layer in range(self.cfg.layers):
            X = D.dropout(X, dropout_in, rng)
            X = run_lstm(p[f"dec{layer}_W"], p[f"dec{layer}_b"], X)
        return D.dropout(X, dropout_out, rng)

    def decoder_start(self, bos: int = 2) -> tuple[LSTMState, ...]:
        zeros = np.zeros(self.cfg.hidden, dtype=self.dtype)
        state = tuple(LSTMState(D.const(zeros), D.const(zeros)) for _ in range(self.cfg.layers))
        return self.decoder_advance(state, bos)

    def decoder_advance(self, state: tuple[LSTMState, ...], token: int) -> tuple[LSTMState, ...]:
        p = self.params
        x = p["tgt_emb"][int(token)]
        new = []
        for layer, prev in enumerate(state):
            nxt = lstm_step(p[f"dec{layer}_W"], p[f"dec{layer}_b"], prev, x)
            new.append(nxt)
            x = nxt.h
        return tuple(new)

    # -- output heads ---------------------------------------------------------------

    def _split(self, W: D.Var) -> tuple[D.Var, D.Var]:
        d = self.cfg.enc_dim
        return W[:, :d], W[:, d:]

    def word_log_probs(self, h, s) -> D.Var:
        """Log distribution over the target vocab for one cell."""
        p = self.params
        return D.log_softmax(D.affine(p["out_W"], p["out_b"], D.concat([h, s])), self.mask)

    def word_log_prob_grid(self, H: D.Var, S: D.Var) -> D.Var:
        """``I x J x V`` log distributions for every cell."""
        p = self.params
        w_h, w_s = self._split(p["out_W"])
        a = D.matmul(H, D.transpose(w_h))
        b = D.affine(w_s, p["out_b"], S)
        logits = D.reshape(a, (H.shape[0], 1, -1)) + D.reshape(b, (1, S.shape[0], -1))
        return D.log_softmax(logits, self.mask)

    def emit_prob(self, h, s) -> D.Var:
        p = self.params
        hidden = D.tanh(D.affine(p["trans_W"], p["trans_b"], D.concat([h, s])))
        z = D.matmul(hidden, p["trans_v"]) + p["trans_c"][0]
        return D.clamped_sigmoid(z)

    def emit_prob_grid(self, H: D.Var, S: D.Var) -> D.Var:
        """``I x J`` clamped emit probabilities."""
        p = self.params
        w_h, w_s = self._split(p["trans_W"])
        a = D.matmul(H, D.transpose(w_h))
        b = D.affine(w_s, p["trans_b"], S)
        n_src, n_tgt, m = H.shape[0], S.shape[0], self.cfg.mlp_dim
        hidden = D.tanh(D.reshape(a, (n_src, 1, m)) + D.reshape(b, (1, n_tgt, m)))
        z = D.matmul(D.reshape(hidden, (n_src * n_tgt, m)), p["trans_v"]) + p["trans_c"]
        return D.clamped_sigmoid(D.reshape(z, (n_src, n_tgt)))

