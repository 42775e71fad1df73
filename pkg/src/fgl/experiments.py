"""Evaluation harnesses: localization, detection and explanation scoring,
the distortion-robustness sweep, the object-embedding-size sweep and the
ablation tables."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

import torch

from .bridge import MaskBridge, cross_entropy, detect, render_explanation, train_bridge
from .datagen import ROBUSTNESS_LADDER, apply_distortion, resize_mask, resized_size, synthesize
from .domain import LABELS, BinaryMask, DatasetManifest, DistortionSpec, RasterImage, ScoreMap, ToyConfig
from .errors import ConfigError, ContractError, UndefinedMetricError
from .encoders import images_to_tensor
from .flexpert import FLExpert, dice_loss, train_flexpert
from .nn import GradCheckReport, grad_check
from .metrics import evaluate_localization, image_accuracy, pixel_auc, rouge

log = logging.getLogger(__name__)


def write_table(rows: list[dict], stem) -> tuple[Path, Path]:
    """Write ``rows`` to ``<stem>.csv`` and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        w.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=2))
    return csv_path, json_path


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)"
    cols = list(rows[0])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def forged_only(manifest: DatasetManifest) -> DatasetManifest:
    return manifest.subset(e for e in manifest if e.label == "forged")


# ---------------------------------------------------------------------------
# gradient audit


def gradient_audit(cfg: ToyConfig, seed: int = 0, **check_kw) -> dict[str, GradCheckReport]:
    """Finite-difference audit of the FL-Expert (dice loss) and the bridge
    (cross-entropy) on one synthetic forged and one authentic image.

    Runs in float64 regardless of ``cfg.precision``. The bridge check perturbs
    bridge parameters only: its mask input is the expert's detached score.
    """
    cfg = cfg.replace(precision="float64")
    kinds = [("splicing", "forged"), ("none", "authentic")]
    samples = [synthesize(k, seed + i, cfg.image_size) for i, (k, _) in enumerate(kinds)]
    x = images_to_tensor([s[1] for s in samples], torch.float64)
    y = torch.tensor(np.stack([s[2].data for s in samples]), dtype=torch.float64)
    labels = torch.tensor([LABELS.index(lab) for _, lab in kinds])
    expert = FLExpert(cfg)
    frozen = expert.frozen_features(x)
    check_kw.setdefault("n_directions", 1)
    reports = {"fl-expert": grad_check(expert, lambda: dice_loss(expert(x, frozen=frozen)["score"], y), **check_kw)}
    bridge = MaskBridge(cfg)
    with torch.no_grad():
        score = expert(x, frozen=frozen)["score"]
    reports["mask-bridge"] = grad_check(bridge, lambda: cross_entropy(bridge(frozen[1], score), labels), **check_kw)
    return reports


# ---------------------------------------------------------------------------
# evaluation


def evaluate_expert(expert: FLExpert, manifest: DatasetManifest, tau: float = 0.5, pooled: bool = False):
    images = [manifest.image(e) for e in manifest]
    masks = [manifest.mask(e) for e in manifest]
    scores = expert.predict(images)
    return evaluate_localization(scores, masks, [e.id for e in manifest], tau, pooled)


def evaluate_detection(bridge: MaskBridge, expert: FLExpert, manifest: DatasetManifest) -> dict:
    verdicts, _ = detect([manifest.image(e) for e in manifest], bridge, expert)
    predicted = [v.verdict for v in verdicts]
    return {
        "accuracy": image_accuracy(predicted, [e.label for e in manifest]),
        "verdicts": [{"id": e.id, "label": e.label, "verdict": p} for e, p in zip(manifest, predicted)],
    }


def reference_explanation(label: str, forgery_type: str, mask: BinaryMask) -> str:
    return render_explanation(label, forgery_type, ScoreMap(mask.data.astype(np.float32)))


def evaluate_explanations(bridge: MaskBridge, expert: FLExpert, manifest: DatasetManifest,
                          type_source: str = "unknown") -> dict:
    """ROUGE of generated explanations against ground-truth-rendered references.

    The models do not predict a forgery type, so by default candidates say the
    type could not be determined; ``type_source="oracle"`` copies it from the
    manifest. A forged verdict with an empty predicted region falls back to
    the no-forgery response.
    """
    if type_source not in ("unknown", "oracle"):
        raise ConfigError("type_source must be 'unknown' or 'oracle'")
    verdicts, scores = detect([manifest.image(e) for e in manifest], bridge, expert)
    rows = []
    for e, v, s in zip(manifest, verdicts, scores):
        ftype = e.forgery_type if type_source == "oracle" and e.forgery_type != "none" else "unknown"
        try:
            cand = render_explanation(v.verdict, ftype, s)
        except ContractError:
            cand = render_explanation("authentic", "none", s)
        ref = reference_explanation(e.label, e.forgery_type, manifest.mask(e))
        r = rouge(cand, ref)
        rows.append({"id": e.id, "rouge1": r.rouge1.f1, "rouge2": r.rouge2.f1, "rougeL": r.rougeL.f1})
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("rouge1", "rouge2", "rougeL")}
    return {"summary": summary, "per_image": rows}


# ---------------------------------------------------------------------------
# robustness


def _score_distorted(expert: FLExpert, img: RasterImage, size: int) -> RasterImage:
    if img.height == size and img.width == size:
        return img
    return RasterImage(cv2.resize(img.data, (size, size), interpolation=cv2.INTER_LINEAR))


def rung_auc(expert: FLExpert, manifest: DatasetManifest, spec: DistortionSpec | None) -> tuple[float, int]:
    """Mean pixel AUC over forged entries after applying ``spec``.

    Distorted images are resized back to the model's input size; for resize
    rungs the score map is resized (bilinear) to the distorted resolution and
    compared with a nearest-neighbour resized ground truth.
    """
    size = expert.cfg.image_size
    entries = [e for e in manifest if e.label == "forged"]
    images, masks = [], []
    for e in entries:
        img, mask = manifest.image(e), manifest.mask(e)
        if spec is not None:
            img = apply_distortion(img, spec, rng_seed=e.seed)
            if spec.kind == "resize":
                mask = resize_mask(mask, resized_size(spec, mask.width, mask.height))
        images.append(img)
        masks.append(mask)
    scores = expert.predict([_score_distorted(expert, im, size) for im in images])
    aucs = []
    for s, m in zip(scores, masks):
        data = s.data
        if data.shape != m.data.shape:
            data = np.clip(cv2.resize(data, (m.width, m.height), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
        try:
            aucs.append(pixel_auc(data, m))
        except UndefinedMetricError:
            continue
    return (float(np.mean(aucs)) if aucs else float("nan")), len(aucs)


def robustness_sweep(expert: FLExpert, manifest: DatasetManifest,
                     ladder: Sequence[DistortionSpec] = ROBUSTNESS_LADDER) -> list[dict]:
    base, n = rung_auc(expert, manifest, None)
    rows = [{"rung": "None", "auc": base, "drop": 0.0, "n_images": n}]
    for spec in ladder:
        auc, n = rung_auc(expert, manifest, spec)
        rows.append({"rung": spec.label(), "auc": auc, "drop": base - auc, "n_images": n})
        log.info("%s auc %.4f", spec.label(), auc)
    return rows


# ---------------------------------------------------------------------------
# sweeps and ablations


def embed_size_sweep(manifest: DatasetManifest, m_values: Sequence[int], cfg: ToyConfig, epochs: int = 200,
                     eval_manifest: DatasetManifest | None = None) -> list[dict]:
    """Train one expert per object-embedding length with a shared seed."""
    if not m_values:
        raise ConfigError("m_values must be non-empty")
    eval_manifest = eval_manifest or manifest
    rows = []
    for m in m_values:
        run_cfg = cfg.replace(object_embed_len=int(m))
        res = train_flexpert(manifest, run_cfg, epochs)
        loc = evaluate_expert(res.model, eval_manifest)
        rows.append({"m": int(m), "pixel_f1": loc.mean_f1, "pixel_auc": loc.mean_auc, "final_loss": res.losses[-1]})
        log.info("m=%d f1 %.4f auc %.4f", m, loc.mean_f1, loc.mean_auc)
    return rows


LOCALIZATION_ABLATIONS = {
    "w/o Object": {"use_object_prompt": False},
    "w/o Vocab": {"use_vocab": False},
    "w/o Multi-scale": "last_tap",
    "FL-Expert (full)": {},
}


def ablation_config(cfg: ToyConfig, variant: str) -> ToyConfig:
    change = LOCALIZATION_ABLATIONS[variant]
    if change == "last_tap":
        return cfg.replace(tap_blocks=[cfg.encoder_depth])
    return cfg.replace(**change)


def run_localization_ablations(manifest: DatasetManifest, cfg: ToyConfig, epochs: int = 200,
                               eval_manifest: DatasetManifest | None = None,
                               variants: Sequence[str] = tuple(LOCALIZATION_ABLATIONS)) -> list[dict]:
    eval_manifest = eval_manifest or manifest
    rows = []
    for variant in variants:
        res = train_flexpert(manifest, ablation_config(cfg, variant), epochs)
        loc = evaluate_expert(res.model, eval_manifest)
        rows.append({"method": variant, "pixel_f1": loc.mean_f1, "pixel_auc": loc.mean_auc})
        log.info("%s f1 %.4f auc %.4f", variant, loc.mean_f1, loc.mean_auc)
    return rows


DETECTION_ABLATIONS = {
    "w/o Extractor": {"use_mask_tokens": False},
    "w/o Prompt": {"use_prompt_tokens": False},
    "Full": {},
}


def run_detection_ablations(manifest: DatasetManifest, expert_checkpoint, cfg: ToyConfig, epochs: int = 300,
                            eval_manifest: DatasetManifest | None = None) -> list[dict]:
    eval_manifest = eval_manifest or manifest
    rows = []
    for variant, flags in DETECTION_ABLATIONS.items():
        expert = FLExpert.load(expert_checkpoint)
        res = train_bridge(manifest, expert, cfg, epochs, bridge=MaskBridge(cfg, **flags))
        acc = evaluate_detection(res.model, expert, eval_manifest)["accuracy"]
        rows.append({"method": variant, "accuracy": acc})
    return rows
