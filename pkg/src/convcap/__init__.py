"""Convolutional image captioning: a causal gated-conv decoder with visual attention."""

from .autodiff import Tensor, grad_check, no_grad, precision
from .config import ModelConfig, TrainConfig
from .corpus import Vocabulary, build_vocab, generate_synthetic, tokenize
from .decoding import DecodeConfig, bleu, evaluate, greedy_decode
from .model import Captioner, count_parameters
from .trainer import init_model, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "no_grad", "precision", "ModelConfig", "TrainConfig", "Vocabulary", "build_vocab",
           "generate_synthetic", "tokenize", "DecodeConfig", "bleu", "evaluate", "greedy_decode", "Captioner",
           "count_parameters", "init_model", "load_checkpoint", "save_checkpoint", "train"]
