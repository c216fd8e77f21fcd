"""Neural sequence transduction with exact marginalisation over monotone alignments."""

from .data import Vocab, build_vocab, load_corpus
from .decode import beam_decode, greedy_decode
from .model import SSNT
from .seqnn import NetConfig
from .train import Checkpoint, TrainConfig, train

__all__ = ["SSNT", "Checkpoint", "NetConfig", "TrainConfig", "Vocab", "beam_decode",
           "build_vocab", "greedy_decode", "load_corpus", "train"]
