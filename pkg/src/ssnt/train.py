"""Maximum-likelihood training with Adam, checkpoints and gradient checks."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as D
from .data import ExamplePair, RawPair, Vocab, build_vocab, encode_pairs
from .lattice import DegenerateLatticeError
from .model import SSNT
from .seqnn import NetConfig
from .transition import estimate_emission

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSNT-CKPT\n"
CHECKPOINT_VERSION = 1

PRESETS = {
    "summarization": dict(level="word", hidden=256, dropout_in=0.2, dropout_out=0.0,
                          min_count=5, max_len=25, beam=1, batch_size=32),
    "inflection": dict(level="char", hidden=128, dropout_in=0.5, dropout_out=0.5,
                       min_count=1, beam=30, batch_size=32),
}


@dataclass
class TrainConfig:
    hidden: int = 32
    layers: int = 1
    emb: int | None = None
    mlp_hidden: int | None = None
    encoder: str = "uni"
    transition: str = "neural"
    lr: float = 0.001
    batch_size: int = 32
    dropout_in: float = 0.0
    dropout_out: float = 0.0
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 5.0
    lr_decay: float = 1.0  # lr multiplier applied when dev perplexity does not improve
    seed: int = 0
    max_len: int | None = None
    beam: int = 1
    level: str = "char"
    min_count: int = 1
    dtype: str = "float64"
    attributes: bool = False

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1 or self.batch_size < 1:
            raise ValueError("hidden, layers and batch_size must be >= 1")
        for rate in (self.dropout_in, self.dropout_out):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")
        if self.encoder not in ("uni", "bi"):
            raise ValueError(f"encoder must be 'uni' or 'bi', got {self.encoder!r}")
        if self.transition not in ("neural", "geometric"):
            raise ValueError(f"transition must be 'neural' or 'geometric', got {self.transition!r}")
        if self.level not in ("char", "word"):
            raise ValueError(f"level must be 'char' or 'word', got {self.level!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        preset = values.pop("preset", None)
        if preset and preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        merged = dict(PRESETS[preset]) if preset else {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(values)
        return cls(**merged)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def net_config(self, src_vocab: int, tgt_vocab: int) -> NetConfig:
        return NetConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, hidden=self.hidden,
                         emb=self.emb, layers=self.layers, bidirectional=self.encoder == "bi",
                         neural_transition=self.transition == "neural",
                         mlp_hidden=self.mlp_hidden, dtype=self.dtype)


# -- optimiser -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params: dict[str, D.Var], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> bool:
    """In-place bias-corrected Adam update; returns False (and counts) on non-finite grads."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise D.ContractError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("skipping update with non-finite gradient (%d so far)", state.skipped)
        return False
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoints ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    net: NetConfig
    src_vocab: Vocab
    tgt_vocab: Vocab
    params: dict[str, np.ndarray]
    emit_e: float | None = None
    step: int = 0
    epoch: int = 0
    metric: dict = field(default_factory=dict)

    def model(self) -> SSNT:
        return SSNT(self.net, params=self.params, emit_e=self.emit_e)

    @classmethod
    def from_model(cls, model: SSNT, config: TrainConfig, src_vocab: Vocab, tgt_vocab: Vocab,
                   **kw) -> "Checkpoint":
        params = {k: v.copy() for k, v in model.nets.values().items()}
        return cls(config, model.cfg, src_vocab, tgt_vocab, params, model.emit_e, **kw)

    def save(self, path) -> None:
        tensors, chunks, offset = [], [], 0
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "net": self.net.to_dict(),
            "emit_e": self.emit_e,
            "vocabs": {"src": self.src_vocab.itos, "tgt": self.tgt_vocab.itos},
            "tensors": tensors,
            "step": self.step,
            "epoch": self.epoch,
            "metric": self.metric,
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n")
            for raw in chunks:
                fh.write(raw)
        tmp.replace(path)

    @classmethod
    def read_header(cls, path) -> tuple[dict, bytes]:
        with Path(path).open("rb") as fh:
            if fh.readline() != CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not an SSNT checkpoint")
            header = json.loads(fh.readline().decode("utf-8"))
            payload = fh.read()
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        return header, payload

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, payload = cls.read_header(path)
        params = {}
        for t in header["tensors"]:
            dt = np.dtype(t["dtype"]).newbyteorder("<")
            raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
            params[t["name"]] = np.frombuffer(raw, dtype=dt).astype(t["dtype"]).reshape(t["shape"])
        return cls(TrainConfig.from_dict(header["config"]), NetConfig(**header["net"]),
                   Vocab.from_tokens(header["vocabs"]["src"]),
                   Vocab.from_tokens(header["vocabs"]["tgt"]), params,
                   header["emit_e"], header["step"], header["epoch"], header["metric"])


# -- training ---------------------------------------------------------------------------------


def perplexity(model: SSNT, examples: Sequence[ExamplePair]) -> float:
    """``exp(total NLL / total target tokens)`` (target tokens include ``</s>``)."""
    total, count = 0.0, 0
    with D.no_grad():
        for ex in examples:
            try:
                total -= model.log_likelihood(ex.source, ex.target).item()
            except DegenerateLatticeError:
                return math.inf
            count += len(ex.target)
    return math.exp(total / count) if count else math.nan


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_perplexity: float


@dataclass
class TrainResult:
    model: SSNT
    best: Checkpoint
    history: list[EpochRecord]
    src_vocab: Vocab
    tgt_vocab: Vocab


def build_model(config: TrainConfig, src_vocab: Vocab, tgt_vocab: Vocab,
                train_raw: Sequence[RawPair]) -> SSNT:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    emit_e = None
    if config.transition == "geometric":
        emit_e = estimate_emission((len(p.source), len(p.target)) for p in train_raw)
    return SSNT(config.net_config(len(src_vocab), len(tgt_vocab)), rng=rng, emit_e=emit_e)


def train(config: TrainConfig, train_raw: Sequence[RawPair], dev_raw: Sequence[RawPair],
          out_dir=None, vocabs: tuple[Vocab, Vocab] | None = None,
          on_epoch: Callable[[EpochRecord, SSNT], bool] | None = None) -> TrainResult:
    """Train on raw pairs; keeps the checkpoint with the best dev perplexity.

    With ``out_dir`` set, writes ``best.ckpt``, ``last.ckpt`` and
    ``metrics.csv`` there. ``on_epoch`` may return True to stop early.
    """
    if not train_raw:
        raise ValueError("training corpus is empty")
    src_vocab, tgt_vocab = vocabs or build_vocab(train_raw, config.min_count)
    train_ex = encode_pairs(train_raw, src_vocab, tgt_vocab)
    dev_ex = encode_pairs(dev_raw, src_vocab, tgt_vocab)
    model = build_model(config, src_vocab, tgt_vocab, train_raw)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    adam = AdamState()
    params = model.params
    lr = config.lr

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(metrics_fh)
        writer.writerow(["epoch", "train_loss", "dev_perplexity"])

    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    best_ppl, stale = math.inf, 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = shuffle_rng.permutation(len(train_ex))
            total_loss, n_loss = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_ex[i] for i in order[start:start + config.batch_size]]
                grads = {name: np.zeros_like(p.value) for name, p in params.items()}
                used = 0
                for ex in batch:
                    try:
                        loss = model.loss(ex.source, ex.target, dropout_in=config.dropout_in,
                                          dropout_out=config.dropout_out, rng=dropout_rng)
                    except DegenerateLatticeError:
                        log.warning("skipping example with zero likelihood: %s", ex)
                        continue
                    g = D.backward(loss, params)
                    for name in grads:
                        grads[name] += g[name]
                    total_loss += loss.item()
                    n_loss += 1
                    used += 1
                if not used:
                    continue
                for g in grads.values():
                    g /= used
                clip_by_global_norm(grads, config.clip_norm)
                adam_step(params, grads, adam, lr=lr)
            dev_ppl = perplexity(model, dev_ex) if dev_ex else math.nan
            record = EpochRecord(epoch, total_loss / max(n_loss, 1), dev_ppl)
            history.append(record)
            log.info("epoch %d  train loss %.4f  dev ppl %.4f", epoch, record.train_loss, dev_ppl)
            if writer is not None:
                writer.writerow([epoch, repr(record.train_loss), repr(dev_ppl)])
                metrics_fh.flush()
            ckpt = Checkpoint.from_model(model, config, src_vocab, tgt_vocab, step=adam.t,
                                         epoch=epoch, metric={"dev_perplexity": dev_ppl})
            improved = best is None or dev_ppl < best_ppl or (math.isnan(best_ppl) and not dev_ex)
            if improved:
                best, best_ppl, stale = ckpt, dev_ppl, 0
                if out is not None:
                    ckpt.save(out / "best.ckpt")
            else:
                stale += 1
                lr *= config.lr_decay
            if out is not None:
                ckpt.save(out / "last.ckpt")
            if on_epoch is not None and on_epoch(record, model):
                break
            if dev_ex and stale >= config.patience:
                log.info("dev perplexity stalled for %d epochs, stopping", stale)
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(best.model(), best, history, src_vocab, tgt_vocab)


# -- gradient check ----------------------------------------------------------------------------

PARAM_GROUPS = {
    "embeddings": ("src_emb", "tgt_emb"),
    "encoder_lstm": ("enc_",),
    "decoder_lstm": ("dec",),
    "W_w": ("out_W",),
    "b_w": ("out_b",),
    "W_t": ("trans_W", "trans_v"),
    "b_t": ("trans_b", "trans_c"),
}


def param_group(name: str) -> str:
    for group, prefixes in PARAM_GROUPS.items():
        if any(name.startswith(p) for p in prefixes):
            return group
    raise KeyError(name)


def grad_check(model: SSNT, example: ExamplePair, step: float = 1e-5, per_group: int = 50,
               rng: np.random.Generator | None = None) -> dict[str, float]:
    """Max relative error between reverse-mode and central differences per parameter group.

    Samples up to ``per_group`` coordinates per group (all of them when the
    group is smaller). Dropout is off; the geometric ``e`` is not a
    parameter and is never perturbed.
    """
    if model.nets.dtype != np.float64:
        raise ValueError("gradient checks need float64 parameters")
    rng = rng or np.random.default_rng(0)
    params = model.params
    grads = D.backward(model.loss(example.source, example.target), params)

    def f() -> float:
        with D.no_grad():
            return model.loss(example.source, example.target).item()

    coords: dict[str, list[tuple[str, tuple]]] = {}
    for name, p in params.items():
        coords.setdefault(param_group(name), []).extend((name, idx) for idx in np.ndindex(p.shape))
    report = {}
    for group, items in coords.items():
        pick = rng.choice(len(items), size=min(per_group, len(items)), replace=False)
        worst = 0.0
        for n in pick:
            name, idx = items[n]
            num = D.numerical_grad(f, params[name].value, idx, step)
            worst = max(worst, D.relative_error(float(grads[name][idx]), num))
        report[group] = worst
    return report
