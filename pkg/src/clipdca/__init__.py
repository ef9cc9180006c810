"""Desk-scale domain-conditioned CLIP finetuning with OOD scoring and domain unlearning."""
from .checkpoint import Checkpoint, interpolate_weights, load_checkpoint, load_model, save_checkpoint
from .model import DualEncoder, build_vocab_texts, make_model

__version__ = "0.1.0"
