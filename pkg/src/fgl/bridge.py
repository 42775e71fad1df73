"""Mask-token bridge: turns a predicted score map into tokens, interleaves
them with image, prompt and instruction tokens, and classifies the
sequence with a small transformer head. Verdicts are argmax only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .domain import LABELS, DatasetManifest, ScoreMap, ToyConfig
from .encoders import WORDS, ImageProjector, patchify, tokenize
from .errors import ConfigError, ContractError, ShapeError
from .flexpert import FLExpert, TrainResult, dice_loss, load_arrays
from .nn import (
    CrossAttentionBlock,
    TransformerBlock,
    dtype_of,
    freeze,
    load_checkpoint,
    load_into,
    module_state,
    save_checkpoint,
)

log = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = "is this image tampered with"
ROLES = ("image", "prompt", "mask", "text")
HEAD_MAX_LEN = 256


class MaskEncoder(nn.Module):
    """Patch embedding over the 1-channel map, one transformer block, then k
    learned queries cross-attend to produce the mask tokens."""

    def __init__(self, cfg: ToyConfig, depth: int = 1):
        super().__init__()
        d = cfg.token_dim
        self.patch_size = cfg.patch_size
        self.image_size = cfg.image_size
        self.patch_embed = nn.Linear(cfg.patch_size ** 2, d)
        self.pos = nn.Parameter(torch.randn(cfg.num_patches, d) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.num_heads) for _ in range(depth))
        self.pool = CrossAttentionBlock(d, cfg.num_heads, cfg.mask_tokens)
        self.out = nn.Linear(d, d)

    def forward(self, score: torch.Tensor) -> torch.Tensor:
        """B x H x W in [0, 1] -> B x k x token_dim."""
        if score.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(f"score map {tuple(score.shape[-2:])} != {self.image_size}x{self.image_size}")
        h = self.patch_embed(patchify(score[:, None] * 2 - 1, self.patch_size)) + self.pos
        for block in self.blocks:
            h = block(h)
        return self.out(self.pool(h))


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # B x L x D
    roles: list[str]

    def __len__(self):
        return len(self.roles)

    def boundaries(self) -> dict[str, tuple[int, int]]:
        """Half-open [start, end) span of each role group."""
        out, pos = {}, 0
        for role in ROLES:
            n = sum(r == role for r in self.roles)
            out[role] = (pos, pos + n)
            pos += n
        return out


def assemble_token_sequence(image_tokens, prompt_tokens, mask_tokens, text_tokens) -> TokenSequence:
    """Concatenate in the order [image][prompt][mask][text].

    Each group is B x n x D or n x D (broadcast over the batch); empty groups
    are allowed.
    """
    groups = [image_tokens, prompt_tokens, mask_tokens, text_tokens]
    batch = max((g.shape[0] for g in groups if g.ndim == 3), default=1)
    dims = {g.shape[-1] for g in groups if g.shape[-2] > 0}
    if len(dims) > 1:
        raise ShapeError(f"token groups disagree on width: {sorted(dims)}")
    width = dims.pop() if dims else image_tokens.shape[-1]
    parts, roles = [], []
    for role, g in zip(ROLES, groups):
        if g.ndim == 2:
            g = g.unsqueeze(0).expand(batch, -1, -1)
        if g.shape[1] == 0:
            continue
        if g.shape[0] != batch:
            raise ShapeError(f"{role} tokens have batch {g.shape[0]}, expected {batch}")
        parts.append(g)
        roles += [role] * g.shape[1]
    tokens = torch.cat(parts, dim=1) if parts else torch.zeros(batch, 0, width)
    return TokenSequence(tokens, roles)


class DecisionHead(nn.Module):
    """Two transformer blocks over the token sequence, mean-pooled into two
    logits (0 = authentic, 1 = forged). Also owns the instruction word table."""

    def __init__(self, cfg: ToyConfig, depth: int = 2):
        super().__init__()
        d = cfg.token_dim
        self.word_embed = nn.Embedding(len(WORDS), d)
        nn.init.normal_(self.word_embed.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(HEAD_MAX_LEN, d) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(d)
        self.readout = nn.Linear(d, 2)

    def forward(self, seq: TokenSequence) -> torch.Tensor:
        if len(seq) > HEAD_MAX_LEN:
            raise ShapeError(f"sequence longer than {HEAD_MAX_LEN}")
        h = seq.tokens + self.pos[: len(seq)]
        for block in self.blocks:
            h = block(h)
        return self.readout(self.norm(h).mean(dim=1))


@dataclass
class Verdict:
    verdict: str
    logits: np.ndarray


def verdict_from_logits(logits) -> str:
    """Index 0 is authentic, 1 is forged; ties resolve to authentic."""
    return LABELS[int(np.argmax(np.asarray(logits)))]


def classify(seq: TokenSequence, head: DecisionHead) -> list[Verdict]:
    with torch.no_grad():
        logits = head(seq).cpu().numpy()
    return [Verdict(verdict_from_logits(row), row) for row in logits]


class MaskBridge(nn.Module):
    """Parameter namespaces: img_proj (frozen), mask_enc, prompt_tokens, head."""

    def __init__(self, cfg: ToyConfig, use_mask_tokens: bool = True, use_prompt_tokens: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_mask_tokens = use_mask_tokens
        self.use_prompt_tokens = use_prompt_tokens
        with torch.random.fork_rng():
            torch.manual_seed(cfg.rng_seed + 1)
            self.img_proj = freeze(ImageProjector(cfg.embed_dim, cfg.token_dim))
            self.mask_enc = MaskEncoder(cfg)
            self.prompt_tokens = nn.Parameter(torch.randn(cfg.prompt_tokens, cfg.token_dim) * 0.02)
            self.head = DecisionHead(cfg)
        self.to(dtype_of(cfg.precision))

    @property
    def dtype(self) -> torch.dtype:
        return self.prompt_tokens.dtype

    def instruction_tokens(self, text: str = DEFAULT_INSTRUCTION) -> torch.Tensor:
        ids = tokenize(text)
        if not ids:
            return torch.zeros(0, self.cfg.token_dim, dtype=self.dtype)
        return self.head.word_embed(torch.tensor(ids))

    def encode_mask_tokens(self, score: torch.Tensor) -> torch.Tensor:
        return self.mask_enc(score)

    def assemble(self, image_features, score, instruction: str = DEFAULT_INSTRUCTION) -> TokenSequence:
        """``image_features``: B x P x d final frozen-tower output; ``score``: B x H x W."""
        b = image_features.shape[0]
        empty = torch.zeros(b, 0, self.cfg.token_dim, dtype=self.dtype)
        img = self.img_proj(image_features)
        prompt = self.prompt_tokens if self.use_prompt_tokens else empty
        mask = self.mask_enc(score) if self.use_mask_tokens else empty
        return assemble_token_sequence(img, prompt, mask, self.instruction_tokens(instruction))

    def forward(self, image_features, score, instruction: str = DEFAULT_INSTRUCTION) -> torch.Tensor:
        return self.head(self.assemble(image_features, score, instruction))


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# explanation templates

NEGATIVE_RESPONSE = "No, there is no forgery information in this image."

RATIONALE = {
    "splicing": "Its texture and colour statistics do not match the surrounding content, "
    "which points to material pasted in from another image.",
    "copy-move": "Its content duplicates another part of the same image, "
    "which points to a region copied and moved within the picture.",
    "removal": "It is unusually smooth compared with its surroundings, "
    "which points to content that was erased and filled in.",
    "unknown": "Its local statistics are inconsistent with the rest of the image.",
}


def mask_region(score: ScoreMap, level: float = 0.5):
    """Tight bounding box (x0, y0, x1, y1), inclusive, of {score >= level} and its area fraction."""
    sel = score.data >= level
    if not sel.any():
        return None, 0.0
    rows, cols = np.nonzero(sel)
    return (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())), float(sel.mean())


def render_explanation(verdict: str, forgery_type: str, mask: ScoreMap) -> str:
    if verdict == "authentic":
        return NEGATIVE_RESPONSE
    if verdict != "forged":
        raise ContractError(f"unknown verdict {verdict!r}")
    box, frac = mask_region(mask)
    if box is None:
        raise ContractError("forged verdict needs at least one mask pixel >= 0.5")
    kind = forgery_type if forgery_type in RATIONALE else "unknown"
    x0, y0, x1, y1 = box
    type_text = "The forgery type could not be determined." if kind == "unknown" else f"The forgery type is {kind}."
    return (
        f"Yes, this image has been tampered with. {type_text} "
        f"The manipulated region spans x {x0} to {x1} and y {y0} to {y1}, "
        f"covering about {round(100 * frac)}% of the image. {RATIONALE[kind]}"
    )


# ---------------------------------------------------------------------------
# joint training


def bridge_checkpoint_tensors(bridge: MaskBridge, expert: FLExpert) -> dict[str, torch.Tensor]:
    return {**module_state(expert), **module_state(bridge)}


def save_bridge(bridge: MaskBridge, expert: FLExpert, path, meta: dict | None = None) -> None:
    meta = {"config": bridge.cfg.to_dict(), "use_mask_tokens": bridge.use_mask_tokens,
            "use_prompt_tokens": bridge.use_prompt_tokens, **(meta or {})}
    save_checkpoint(bridge_checkpoint_tensors(bridge, expert), path, meta)


def load_bridge(path) -> tuple[MaskBridge, FLExpert]:
    tensors, meta = load_checkpoint(path)
    cfg = ToyConfig.from_dict(meta["config"])
    expert = FLExpert(cfg)
    bridge = MaskBridge(cfg, meta.get("use_mask_tokens", True), meta.get("use_prompt_tokens", True))
    load_into(expert, tensors)
    load_into(bridge, tensors)
    return bridge, expert


def joint_loss(bridge, expert, x, y, labels, frozen, lambda_cls, lambda_loc, mask_source="predicted"):
    """Returns (total, ce, dice, logits). The predicted map enters the mask
    encoder detached: the classification term never reaches the expert."""
    out = expert(x, frozen=frozen)
    score = out["score"]
    mask_in = score.detach() if mask_source == "predicted" else y
    logits = bridge(frozen[1], mask_in)
    ce = cross_entropy(logits, labels)
    dice = dice_loss(score, y)
    return lambda_cls * ce + lambda_loc * dice, ce, dice, logits


def train_bridge(
    manifest: DatasetManifest,
    flexpert_checkpoint,
    cfg: ToyConfig | None = None,
    epochs: int = 300,
    mask_source: str = "predicted",
    checkpoint_out=None,
    bridge: MaskBridge | None = None,
) -> TrainResult:
    """Fine-tune the mask encoder, prompt tokens, head and expert trainables on
    lambda_cls * CE + lambda_loc * dice. ``flexpert_checkpoint`` is a path or
    an FLExpert instance. The image projector stays frozen."""
    if isinstance(flexpert_checkpoint, FLExpert):
        expert = flexpert_checkpoint
    else:
        if flexpert_checkpoint is None or not Path(flexpert_checkpoint).exists():
            raise ConfigError(f"FL-Expert checkpoint not found: {flexpert_checkpoint}")
        expert = FLExpert.load(flexpert_checkpoint)
    cfg = cfg or expert.cfg
    if mask_source not in ("predicted", "ground-truth"):
        raise ConfigError("mask_source must be 'predicted' or 'ground-truth'")
    bridge = bridge or MaskBridge(cfg)
    x, y = load_arrays(manifest, cfg, expert.dtype)
    labels = torch.tensor([LABELS.index(e.label) for e in manifest])
    frozen = expert.frozen_features(x)
    params = [p for p in list(expert.parameters()) + list(bridge.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    result = TrainResult(bridge, extra={"expert": expert, "ce": [], "dice": [], "accuracy": []})
    for epoch in range(epochs):
        total, ce, dice, logits = joint_loss(bridge, expert, x, y, labels, frozen,
                                             cfg.lambda_cls, cfg.lambda_loc, mask_source)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        acc = float((logits.argmax(dim=1) == labels).double().mean())
        result.losses.append(float(total.detach()))
        result.extra["ce"].append(float(ce.detach()))
        result.extra["dice"].append(float(dice.detach()))
        result.extra["accuracy"].append(acc)
        log.info("epoch %d loss %.5f ce %.5f dice %.5f acc %.3f", epoch + 1, result.losses[-1],
                 result.extra["ce"][-1], result.extra["dice"][-1], acc)
    if checkpoint_out is not None:
        save_bridge(bridge, expert, checkpoint_out, {"losses": result.losses, "accuracy": result.extra["accuracy"]})
        result.checkpoint = Path(checkpoint_out)
    return result


def detect(images: Sequence, bridge: MaskBridge, expert: FLExpert, instruction: str = DEFAULT_INSTRUCTION):
    """Return (verdicts, score maps) for a list of RasterImages."""
    from .encoders import images_to_tensor

    x = images_to_tensor(images, expert.dtype)
    with torch.no_grad():
        frozen = expert.frozen_features(x)
        score = expert(x, frozen=frozen)["score"]
        seq = bridge.assemble(frozen[1], score, instruction)
    verdicts = classify(seq, bridge.head)
    return verdicts, [ScoreMap(s.numpy()) for s in score]
