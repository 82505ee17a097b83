"""Adversarial mutual-information training for small sequence-to-sequence models."""
from .seqmodel import (BOS, EOS, PAD, UNK, DecodeConfig, LatentState, ModelConfig, SeqModelParams,
                       SequencePair, Vocab)
from .tasks import Dataset, TaskSpec, generate, load_corpus, split, write_corpus
from .trainer import TrainConfig, TrainState, evaluate, init_state, pretrain, train

__version__ = "0.1.0"

__all__ = ["BOS", "EOS", "PAD", "UNK", "DecodeConfig", "LatentState", "ModelConfig",
           "SeqModelParams", "SequencePair", "Vocab", "Dataset", "TaskSpec", "generate",
           "load_corpus", "split", "write_corpus", "TrainConfig", "TrainState", "evaluate",
           "init_state", "pretrain", "train", "__version__"]
