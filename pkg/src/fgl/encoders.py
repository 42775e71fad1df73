"""Toy vision/text towers, stage projections and the image projector.

The towers are randomly initialized stand-ins for pretrained CLIP encoders;
"frozen" means ``requires_grad=False`` and is checked bit-for-bit in tests.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .domain import RasterImage, ToyConfig
from .errors import ConfigError, ShapeError
from .nn import TransformerBlock, freeze

# Small closed vocabulary shared by the text tower and the instruction tokenizer.
WORDS = (
    "<pad>", "a", "photo", "of", "pristine", "forged", "object", "is", "this", "image",
    "tampered", "with", "authentic", "real", "fake", "region", "where", "the", "has", "been",
    "manipulated", "spliced", "copied", "removed", "<unk>",
)
WORD_ID = {w: i for i, w in enumerate(WORDS)}
TEXT_MAX_LEN = 64

AUTHENTIC_TEMPLATE = "a photo of a pristine"
FORGED_TEMPLATE = "a photo of a forged"


def tokenize(text: str) -> list[int]:
    return [WORD_ID.get(w, WORD_ID["<unk>"]) for w in re.findall(r"[a-z0-9<>]+", text.lower())]


def template_ids(template: str, length: int) -> list[int]:
    """Last ``length`` words of the template, left-padded with <pad>."""
    ids = tokenize(template)[-length:]
    return [WORD_ID["<pad>"]] * (length - len(ids)) + ids


def images_to_tensor(images: Sequence[RasterImage], dtype=torch.float32) -> torch.Tensor:
    """Stack images into B x 3 x H x W, scaled to [-1, 1]."""
    arr = np.stack([im.data for im in images]).astype(np.float64)
    t = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    return (t / 255.0 - 0.5) / 0.5


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """B x C x H x W -> B x P x (C*patch*patch), patches in row-major order."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = x.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PatchEncoder(nn.Module):
    """ViT-style encoder that exposes intermediate block outputs."""

    def __init__(self, cfg: ToyConfig, in_channels: int = 3):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.image_size = cfg.image_size
        self.tap_blocks = list(cfg.tap_blocks)
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(in_channels * cfg.patch_size ** 2, d)
        self.pos = nn.Parameter(torch.randn(cfg.num_patches, d) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.num_heads) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, use_position: bool = True):
        """Return (list of tapped P x d features, final normalized output)."""
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ShapeError(f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}")
        h = self.patch_embed(patchify(x, self.patch_size))
        if use_position:
            h = h + self.pos
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i in self.tap_blocks:
                taps.append(h)
        return taps, self.norm(h)


class TextTower(nn.Module):
    def __init__(self, cfg: ToyConfig, depth: int = 2):
        super().__init__()
        d = cfg.embed_dim
        self.token_embed = nn.Embedding(len(WORDS), d)
        nn.init.normal_(self.token_embed.weight, std=0.5)
        self.pos = nn.Parameter(torch.randn(TEXT_MAX_LEN, d) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """B x L x d embedded prompts -> B x d unit vectors (last-token pooling)."""
        if seq.shape[1] > TEXT_MAX_LEN:
            raise ShapeError(f"prompt longer than {TEXT_MAX_LEN} tokens")
        h = seq + self.pos[: seq.shape[1]]
        for block in self.blocks:
            h = block(h)
        last = self.norm(h[:, -1])
        return last / last.norm(dim=-1, keepdim=True)


class PromptBank(nn.Module):
    """Frozen template embeddings plus learnable object-agnostic embeddings."""

    def __init__(self, cfg: ToyConfig, tower: TextTower):
        super().__init__()
        if cfg.object_embed_len < 1:
            raise ConfigError("object embedding length must be >= 1")
        table = tower.token_embed.weight.detach()
        E, m, d = cfg.template_len, cfg.object_embed_len, cfg.embed_dim
        self.authentic_template = nn.Parameter(table[template_ids(AUTHENTIC_TEMPLATE, E)].clone(), requires_grad=False)
        self.forged_template = nn.Parameter(table[template_ids(FORGED_TEMPLATE, E)].clone(), requires_grad=False)
        self.object_word = nn.Parameter(table[[WORD_ID["object"]]].clone(), requires_grad=False)
        self.object_p = nn.Parameter(torch.randn(m, d) * 0.5)
        self.object_n = nn.Parameter(torch.randn(m, d) * 0.5)

    def sequences(self, use_object_prompt: bool = True) -> torch.Tensor:
        """2 x L x d: row 0 authentic, row 1 forged."""
        if use_object_prompt:
            p, n = self.object_p, self.object_n
        else:
            p = n = self.object_word
        return torch.stack([torch.cat([self.authentic_template, p]), torch.cat([self.forged_template, n])])


def encode_text_prompts(bank: PromptBank, tower: TextTower, use_object_prompt: bool = True) -> torch.Tensor:
    return tower(bank.sequences(use_object_prompt))


class StageProjections(nn.Module):
    """Unshared per-stage linear maps for the patch and vocabulary sides."""

    def __init__(self, cfg: ToyConfig, init: str = "identity"):
        super().__init__()
        d = cfg.embed_dim
        self.n_stages = len(cfg.tap_blocks)
        for i in range(1, self.n_stages + 1):
            # vocab-side outputs only reach the decoder through attention keys, convex
            # combinations of values and an instance-normalized grid, so a bias there is inert
            self.add_module(f"stage{i}", nn.ModuleDict({"patch": nn.Linear(d, d), "vocab": nn.Linear(d, d, bias=False)}))
        for lin in self.modules():
            if isinstance(lin, nn.Linear):
                if lin.bias is not None:
                    nn.init.zeros_(lin.bias)
                if init == "identity":
                    with torch.no_grad():
                        lin.weight.copy_(torch.eye(d))
                elif init == "zero":
                    nn.init.zeros_(lin.weight)
                elif init != "random":
                    raise ConfigError(f"unknown projection init {init!r}")

    def forward(self, raw: torch.Tensor, stage: int, side: str = "patch") -> torch.Tensor:
        if not (isinstance(stage, int) and 1 <= stage <= self.n_stages) or side not in ("patch", "vocab"):
            raise ConfigError(f"no projection for stage {stage!r} side {side!r}")
        return getattr(self, f"stage{stage}")[side](raw)

    def project_all(self, raws: Sequence[torch.Tensor], side: str) -> list[torch.Tensor]:
        if len(raws) != self.n_stages:
            raise ShapeError(f"{len(raws)} stages given, projections exist for {self.n_stages}")
        return [self(r, i, side) for i, r in enumerate(raws, start=1)]


def project_stage(raw: torch.Tensor, stage: int, proj: StageProjections, side: str = "patch") -> torch.Tensor:
    return proj(raw, stage, side)


class ImageProjector(nn.Module):
    """Two-layer MLP from vision width to LLM-token width."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(d_out, d_out)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


@dataclass
class StageFeatures:
    """Per-stage raw and projected features; any side may be absent."""

    patch_raw: list[torch.Tensor]
    patch_proj: list[torch.Tensor] | None = None
    vocab_raw: list[torch.Tensor] | None = None
    vocab_proj: list[torch.Tensor] | None = None

    @property
    def n_stages(self) -> int:
        return len(self.patch_raw)


def make_vocab_encoder(frozen: PatchEncoder) -> PatchEncoder:
    """Trainable twin of the frozen tower, starting from the same weights."""
    twin = copy.deepcopy(frozen)
    for p in twin.parameters():
        p.requires_grad_(True)
    return twin


def encode_stages(images, enc: PatchEncoder, use_position: bool = True) -> StageFeatures:
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images, next(enc.parameters()).dtype)
    taps, _ = enc(x, use_position=use_position)
    return StageFeatures(patch_raw=taps)


def encode_vocab_stages(images, enc: PatchEncoder):
    """Returns (StageFeatures with the vocab side filled, f_vocab)."""
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images, next(enc.parameters()).dtype)
    taps, final = enc(x)
    return StageFeatures(patch_raw=[], vocab_raw=taps), final


__all__ = [
    "PatchEncoder", "TextTower", "PromptBank", "StageProjections", "ImageProjector", "StageFeatures",
    "encode_stages", "encode_vocab_stages", "encode_text_prompts", "project_stage", "images_to_tensor",
    "make_vocab_encoder", "freeze", "tokenize", "WORDS",
]
