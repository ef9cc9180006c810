"""Toy dual encoder with class/domain image heads, text projector and hidden-state projector."""
from __future__ import annotations

import re
from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TAU_INIT = 0.07
TAU_MIN = 0.01


class DegenerateProjectionError(ArithmeticError):
    """A projection produced a zero vector that cannot be normalized."""


@dataclass
class ImageBatch:
    pixels: torch.Tensor
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.pixels = torch.as_tensor(self.pixels, dtype=torch.float32)
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise ValueError(f"expected pixels [B>=1, C, H, W], got {tuple(self.pixels.shape)}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.ids:
            self.ids = list(range(self.pixels.shape[0]))


@dataclass
class TextBatch:
    token_ids: torch.Tensor
    lengths: torch.Tensor

    def __post_init__(self):
        self.token_ids = torch.as_tensor(self.token_ids, dtype=torch.long)
        self.lengths = torch.as_tensor(self.lengths, dtype=torch.long)
        if self.token_ids.ndim != 2 or self.lengths.shape != self.token_ids.shape[:1]:
            raise ValueError("token_ids must be [B, L] with one length per row")
        if (self.lengths < 1).any():
            raise ValueError("empty text sequence")
        if (self.lengths > self.token_ids.shape[1]).any():
            raise ValueError("length exceeds sequence width")


class Tokenizer:
    """Lower-cased whitespace tokenizer over a fixed vocabulary."""

    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, vocab: Sequence[str], max_len: int = 12):
        self.vocab = list(vocab)
        if self.vocab[:2] != [self.PAD, self.UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len

    @staticmethod
    def split(text: str) -> list[str]:
        return re.findall(r"[^\s]+", text.lower())

    @classmethod
    def build(cls, texts: Sequence[str], max_len: int = 12) -> "Tokenizer":
        words = sorted({w for t in texts for w in cls.split(t)})
        return cls([cls.PAD, cls.UNK] + words, max_len=max_len)

    def __len__(self):
        return len(self.vocab)

    def __call__(self, texts: Sequence[str]) -> TextBatch:
        rows = []
        for t in texts:
            ids = [self.index.get(w, 1) for w in self.split(t)][: self.max_len]
            if not ids:
                raise ValueError(f"empty text sequence: {t!r}")
            rows.append(ids)
        ids = torch.zeros(len(rows), self.max_len, dtype=torch.long)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
        return TextBatch(ids, torch.tensor([len(r) for r in rows]))


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 128          # trunk feature width F
    depth: int = 4
    heads: int = 4
    text_width: int = 128
    text_depth: int = 2
    embed_dim: int = 64       # D, shared by both image heads and the text projector
    hidden_width: int = 32    # H, style-manifest hidden-state width
    vocab: list = field(default_factory=lambda: [Tokenizer.PAD, Tokenizer.UNK])
    max_len: int = 12


class Block(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x, key_mask=None):
        B, T, W = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(B, T, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / (W // self.heads) ** 0.5
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        y = att.softmax(-1) @ v
        x = x + self.proj(y.transpose(1, 2).reshape(B, T, W))
        return x + self.mlp(self.ln2(x))


class ImageTrunk(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = (cfg.image_size // cfg.patch) ** 2
        # conv-pool stem producing one token per patch
        chans = [cfg.channels, 32, 64, cfg.width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, padding=1), nn.GELU(), nn.MaxPool2d(2)]
        self.stem = nn.Sequential(*layers)
        self.pos = nn.Parameter(torch.randn(1, n, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.width)

    def forward(self, pixels):
        c = self.cfg
        if tuple(pixels.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise ValueError(f"expected images [B, {c.channels}, {c.image_size}, {c.image_size}], "
                             f"got {tuple(pixels.shape)}")
        x = self.stem(pixels * 2 - 1).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x.mean(1))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(len(cfg.vocab), cfg.text_width)
        self.pos = nn.Parameter(torch.randn(1, cfg.max_len, cfg.text_width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.text_width, cfg.heads) for _ in range(cfg.text_depth))
        self.ln = nn.LayerNorm(cfg.text_width)

    def forward(self, ids, lengths):
        L = ids.shape[1]
        mask = torch.arange(L)[None, :] < lengths[:, None]
        x = self.tok(ids) + self.pos[:, :L]
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        m = mask[..., None].float()
        return self.ln((x * m).sum(1) / m.sum(1))


def normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms < eps).any():
        raise DegenerateProjectionError("projection produced a zero vector")
    return x / norms


class DualEncoder(nn.Module):
    """Image trunk with class head (used for inference) and domain head
    (training only), text encoder with projector, hidden-state projector
    and a learnable temperature."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.vocab, cfg.max_len)
        g = torch.random.fork_rng()
        with g:
            torch.manual_seed(seed)
            self.trunk = ImageTrunk(cfg)
            self.class_head = nn.Linear(cfg.width, cfg.embed_dim, bias=False)
            self.domain_head = nn.Linear(cfg.width, cfg.embed_dim, bias=False)
            self.text = TextEncoder(cfg)
            self.text_proj = nn.Linear(cfg.text_width, cfg.embed_dim, bias=False)
            self.hidden_proj = nn.Linear(cfg.hidden_width, cfg.embed_dim, bias=False)
            nn.init.orthogonal_(self.hidden_proj.weight)
        self.tau = nn.Parameter(torch.tensor(TAU_INIT))

    def temperature(self) -> torch.Tensor:
        return self.tau.clamp(min=TAU_MIN)

    def encode_image(self, batch) -> torch.Tensor:
        pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
        return self.trunk(pixels)

    def project_class(self, features) -> torch.Tensor:
        return normalize_rows(self.class_head(features))

    def project_domain(self, features) -> torch.Tensor:
        return normalize_rows(self.domain_head(features))

    def encode_text(self, batch) -> torch.Tensor:
        if not isinstance(batch, TextBatch):
            batch = self.tokenizer(list(batch))
        if batch.token_ids.numel() and batch.token_ids.max() >= len(self.cfg.vocab):
            raise ValueError("token id outside vocabulary")
        return normalize_rows(self.text_proj(self.text(batch.token_ids, batch.lengths)))

    def project_hidden(self, hidden) -> torch.Tensor:
        hidden = torch.as_tensor(hidden, dtype=torch.float32)
        if hidden.ndim != 2 or hidden.shape[1] != self.cfg.hidden_width:
            raise ValueError(f"hidden states must be [B, {self.cfg.hidden_width}], got {tuple(hidden.shape)}")
        return normalize_rows(self.hidden_proj(hidden))

    @torch.no_grad()
    def zero_shot_classify(self, images, class_prompts, chunk: int = 256) -> torch.Tensor:
        """Argmax of class-head/text similarity; ties go to the lowest class index."""
        was_training = self.training
        self.eval()
        try:
            text = self.encode_text(class_prompts)
            if text.shape[0] < 1:
                raise ValueError("need at least one class prompt")
            pixels = images.pixels if isinstance(images, ImageBatch) else torch.as_tensor(images)
            preds = []
            for s in range(0, pixels.shape[0], chunk):
                sims = self.project_class(self.encode_image(pixels[s:s + chunk])) @ text.T
                # torch.argmax returns the first maximal index
                preds.append(sims.argmax(dim=1))
            return torch.cat(preds)
        finally:
            self.train(was_training)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def build_vocab_texts(class_names, domain_names, style_captions=()) -> list[str]:
    from .data import CAPTION_TEMPLATE, PROMPT_TEMPLATE
    texts = [PROMPT_TEMPLATE.format(c) for c in class_names]
    texts += [CAPTION_TEMPLATE.format(d, c) for d in domain_names for c in class_names]
    texts += list(style_captions)
    return texts


def make_model(texts: Sequence[str], seed: int = 0, **overrides) -> DualEncoder:
    """Model with a vocabulary built from ``texts``."""
    tok = Tokenizer.build(texts, max_len=overrides.get("max_len", 12))
    cfg = ModelConfig(vocab=tok.vocab, **overrides)
    return DualEncoder(cfg, seed=seed)


def images_tensor(arr) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
