"""Forgery-localization expert.

Pipeline: frozen patch tower + trainable vocabulary twin -> per-stage
projections -> {cross-modal reasoning against prompt text features,
multi-layer attention fusion} -> U-shaped conv decoder -> score map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .domain import BinaryMask, DatasetManifest, RasterImage, ScoreMap, ToyConfig
from .encoders import (
    PatchEncoder,
    PromptBank,
    StageProjections,
    TextTower,
    encode_text_prompts,
    images_to_tensor,
    make_vocab_encoder,
)
from .errors import ConfigError, ShapeError
from .nn import (
    conv3x3,
    dtype_of,
    freeze,
    load_checkpoint,
    load_into,
    module_state,
    resize_to,
    save_checkpoint,
    scaled_dot_attention,
    softmax,
    upsample2x,
)

log = logging.getLogger(__name__)

DICE_EPS = 1.0


def cross_modal_reasoning(patch_proj: Sequence[torch.Tensor], f_text: torch.Tensor) -> torch.Tensor:
    """Mean over stages of the per-patch softmax over {authentic, forged}.

    ``patch_proj`` holds (..., P, d) projected patch features; returns (..., P, 2).
    """
    if f_text.ndim != 2 or f_text.shape[0] != 2:
        raise ShapeError(f"text features must be 2 x d, got {tuple(f_text.shape)}")
    if not patch_proj:
        raise ShapeError("no stages given")
    per_stage = [softmax(f @ f_text.T, axis=-1) for f in patch_proj]
    return torch.stack(per_stage).mean(dim=0)


def attention_fusion(patch_proj, vocab_proj, key_dim: int | None = None, return_weights: bool = False):
    """Mean over stages of softmax(Q K^T / sqrt(d_e)) V with Q from the patch
    side and K = V from the vocabulary side."""
    if len(patch_proj) != len(vocab_proj) or not patch_proj:
        raise ShapeError(f"stage count mismatch: {len(patch_proj)} vs {len(vocab_proj)}")
    outs, weights = [], []
    for q, kv in zip(patch_proj, vocab_proj):
        o, w = scaled_dot_attention(q, kv, kv, key_dim=key_dim, return_weights=True)
        outs.append(o)
        weights.append(w)
    fused = torch.stack(outs).mean(dim=0)
    return (fused, weights) if return_weights else fused


class DecoderNet(nn.Module):
    """Four 3x3 convs, two bilinear x2 upsamplings, input-grid skips before
    convs 3 and 4, bilinear resize to image size, sigmoid.

    The input grid and hidden activations are instance-normalized, so the
    final conv sees zero-mean channels and only its bias can move all logits
    together. Without this, dice + Adam drives the whole map to 1 within a
    few steps (a uniform rise always lowers dice before features separate).
    """

    def __init__(self, in_channels: int, image_size: int, widths=(64, 32, 32)):
        super().__init__()
        w1, w2, w3 = widths
        self.image_size = image_size
        self.norm_in = nn.GroupNorm(in_channels, in_channels)
        self.conv1 = conv3x3(in_channels, w1, bias=False)
        self.norm1 = nn.GroupNorm(w1, w1)
        self.conv2 = conv3x3(w1, w2, bias=False)
        self.norm2 = nn.GroupNorm(w2, w2)
        self.conv3 = conv3x3(w2 + in_channels, w3, bias=False)
        self.norm3 = nn.GroupNorm(w3, w3)
        self.conv4 = conv3x3(w3 + in_channels, 1)
        self.act = nn.GELU()

    def logits(self, grid: torch.Tensor) -> torch.Tensor:
        grid = self.norm_in(grid)
        h = self.act(self.norm1(self.conv1(grid)))
        h = self.act(self.norm2(self.conv2(upsample2x(h))))
        h = torch.cat([h, resize_to(grid, h.shape[-1])], dim=1)
        h = self.act(self.norm3(self.conv3(h)))
        h = upsample2x(h)
        h = torch.cat([h, resize_to(grid, h.shape[-1])], dim=1)
        return resize_to(self.conv4(h), self.image_size)[:, 0]

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(grid))


def tokens_to_grid(tokens: torch.Tensor) -> torch.Tensor:
    """B x P x C -> B x C x sqrt(P) x sqrt(P) (row-major patches)."""
    b, p, c = tokens.shape
    g = math.isqrt(p)
    if g * g != p:
        raise ShapeError(f"patch count {p} is not a perfect square")
    return tokens.transpose(1, 2).reshape(b, c, g, g)


def decode_mask(f_cross, f_enhanced, f_vocab, dec: DecoderNet) -> torch.Tensor:
    """Concatenate [f_cross, f_enhanced, f_vocab] channel-wise and decode to B x H x W."""
    squeeze = f_cross.ndim == 2
    if squeeze:
        f_cross, f_enhanced, f_vocab = f_cross[None], f_enhanced[None], f_vocab[None]
    if not f_cross.shape[:2] == f_enhanced.shape[:2] == f_vocab.shape[:2]:
        raise ShapeError("decoder inputs disagree on batch or patch count")
    out = dec(tokens_to_grid(torch.cat([f_cross, f_enhanced, f_vocab], dim=-1)))
    return out[0] if squeeze else out


def dice_loss(pred, gt, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps), averaged over a leading batch axis.

    Accepts tensors or ScoreMap/BinaryMask pairs.
    """
    if isinstance(pred, ScoreMap):
        pred = torch.from_numpy(pred.data.astype(np.float64))
    if isinstance(gt, BinaryMask):
        gt = torch.from_numpy(gt.data.astype(np.float64))
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    if pred.ndim <= 2:
        pred, gt = pred[None], gt[None]
    p = pred.reshape(pred.shape[0], -1)
    y = gt.reshape(gt.shape[0], -1)
    score = (2 * (p * y).sum(dim=1) + eps) / (p.sum(dim=1) + y.sum(dim=1) + eps)
    return (1 - score).mean()


# ---------------------------------------------------------------------------


class FLExpert(nn.Module):
    """Parameter namespaces: patch_enc, vocab_enc, text_tower (frozen towers
    apart from vocab_enc), proj, prompt_bank, decoder."""

    def __init__(self, cfg: ToyConfig, proj_init: str = "identity"):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.rng_seed)
            self.patch_enc = freeze(PatchEncoder(cfg))
            self.vocab_enc = make_vocab_encoder(self.patch_enc)
            self.text_tower = freeze(TextTower(cfg))
            self.prompt_bank = PromptBank(cfg, self.text_tower)
            self.proj = StageProjections(cfg, init=proj_init)
            self.decoder = DecoderNet(2 + 2 * cfg.embed_dim, cfg.image_size, cfg.decoder_widths)
        # the final-norm shift is inert for the same reason as the vocab projection bias
        self.vocab_enc.norm.bias.requires_grad_(False)
        if not cfg.use_vocab:
            freeze(self.vocab_enc)
        self.to(dtype_of(cfg.precision))

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.conv1.weight.dtype

    def frozen_features(self, x: torch.Tensor):
        with torch.no_grad():
            return self.patch_enc(x)

    def text_features(self) -> torch.Tensor:
        return encode_text_prompts(self.prompt_bank, self.text_tower, self.cfg.use_object_prompt)

    def forward(self, x: torch.Tensor, frozen=None) -> dict[str, torch.Tensor]:
        """Run on a B x 3 x H x W tensor in [-1, 1]."""
        patch_taps, patch_final = frozen if frozen is not None else self.frozen_features(x)
        if self.cfg.use_vocab:
            vocab_taps, f_vocab = self.vocab_enc(x)
        else:
            vocab_taps, f_vocab = patch_taps, patch_final
        patch_proj = self.proj.project_all(patch_taps, "patch")
        vocab_proj = self.proj.project_all(vocab_taps, "vocab")
        f_text = self.text_features()
        f_cross = cross_modal_reasoning(patch_proj, f_text)
        f_enhanced = attention_fusion(patch_proj, vocab_proj, key_dim=self.cfg.key_dim)
        score = decode_mask(f_cross, f_enhanced, f_vocab, self.decoder)
        return {"f_cross": f_cross, "f_enhanced": f_enhanced, "f_vocab": f_vocab, "f_text": f_text, "score": score}

    def predict(self, images: Sequence[RasterImage]) -> list[ScoreMap]:
        with torch.no_grad():
            out = self(images_to_tensor(images, self.dtype))["score"]
        return [ScoreMap(s.cpu().numpy()) for s in out]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(module_state(self), path, {"config": self.cfg.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> "FLExpert":
        tensors, meta = load_checkpoint(path)
        model = cls(ToyConfig.from_dict(meta["config"]))
        load_into(model, tensors)
        return model


def flexpert_forward(image: RasterImage, model: FLExpert) -> ScoreMap:
    return model.predict([image])[0]


# ---------------------------------------------------------------------------
# training


def param_groups(model: nn.Module, lr: float, feature_scale: float) -> list[dict]:
    """Decoder weights train at ``lr``; feature-side weights (vocabulary
    encoder, projections, prompts) at ``lr * feature_scale``."""
    dec, rest = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (dec if name.startswith("decoder.") else rest).append(p)
    return [g for g in ({"params": dec, "lr": lr}, {"params": rest, "lr": lr * feature_scale}) if g["params"]]


def warmup_cosine(opt, n_steps: int, warmup_frac: float = 0.1):
    """Linear warmup then cosine decay to zero over ``n_steps``."""
    warm = max(1, int(round(warmup_frac * n_steps)))

    def factor(step):
        if step < warm:
            return (step + 1) / warm
        t = (step - warm) / max(1, n_steps - warm)
        return 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def load_arrays(manifest: DatasetManifest, cfg: ToyConfig, dtype):
    if len(manifest) == 0:
        raise ConfigError("manifest is empty")
    images = [manifest.image(e) for e in manifest]
    masks = [manifest.mask(e) for e in manifest]
    for e, im in zip(manifest, images):
        if im.height != cfg.image_size or im.width != cfg.image_size:
            raise ShapeError(f"{e.id}: image is {im.height}x{im.width}, config expects {cfg.image_size}")
    x = images_to_tensor(images, dtype)
    y = torch.from_numpy(np.stack([m.data for m in masks])).to(dtype)
    return x, y


def batch_auc(scores: torch.Tensor, masks: torch.Tensor) -> float:
    from .metrics import mean_pixel_auc

    return mean_pixel_auc(
        [s.detach().cpu().numpy() for s in scores], [m.cpu().numpy().astype(np.uint8) for m in masks]
    )


@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float] = field(default_factory=list)
    aucs: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


def train_flexpert(
    manifest: DatasetManifest,
    cfg: ToyConfig,
    epochs: int,
    batch_size: int | None = None,
    checkpoint_out=None,
    model: FLExpert | None = None,
) -> TrainResult:
    """Optimize the localization term (lambda_loc * dice) with Adam.

    Trainable: object prompts, stage projections, vocabulary encoder, decoder.
    One optimizer step per minibatch; with the default full batch an epoch
    is one step. Per-epoch AUC is measured on that epoch's predictions.
    """
    model = model or FLExpert(cfg)
    x, y = load_arrays(manifest, cfg, model.dtype)
    frozen_taps, frozen_final = model.frozen_features(x)
    opt = torch.optim.Adam(param_groups(model, cfg.lr, cfg.encoder_lr_scale))
    n_steps = epochs * math.ceil(x.shape[0] / (batch_size or x.shape[0]))
    sched = warmup_cosine(opt, n_steps) if cfg.lr_schedule == "cosine" else None
    n = x.shape[0]
    bs = batch_size or n
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    result = TrainResult(model)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen) if bs < n else torch.arange(n)
        epoch_scores = torch.empty_like(y)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            frozen = ([t[idx] for t in frozen_taps], frozen_final[idx])
            out = model(x[idx], frozen=frozen)
            loss = cfg.lambda_loc * dice_loss(out["score"], y[idx])
            opt.zero_grad(set_to_none=True)
            if loss.requires_grad:
                loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            epoch_scores[idx] = out["score"].detach()
            epoch_loss += float(loss.detach()) * len(idx)
        result.losses.append(epoch_loss / n)
        result.aucs.append(batch_auc(epoch_scores, y))
        log.info("epoch %d loss %.5f auc %.4f", epoch + 1, result.losses[-1], result.aucs[-1])
    if checkpoint_out is not None:
        model.save(checkpoint_out, {"losses": result.losses, "aucs": result.aucs})
        result.checkpoint = Path(checkpoint_out)
    return result
