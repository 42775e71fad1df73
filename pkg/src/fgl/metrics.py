"""Pixel AUC / F1, image accuracy and ROUGE-1/2/L."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .domain import BinaryMask, ScoreMap
from .errors import ContractError, ShapeError, UndefinedMetricError


def _arrays(score, gt):
    s = score.data if isinstance(score, ScoreMap) else np.asarray(score)
    y = gt.data if isinstance(gt, BinaryMask) else np.asarray(gt)
    if s.shape != y.shape:
        raise ShapeError(f"score {s.shape} vs mask {y.shape}")
    return s.astype(np.float64).ravel(), y.astype(bool).ravel()


def pixel_auc(score, gt) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pixel pairs ordered
    correctly, ties counting one half."""
    s, y = _arrays(score, gt)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative pixel")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pixel_f1(score, gt, tau: float = 0.5) -> float:
    s, y = _arrays(score, gt)
    pred = s >= tau
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # nothing to find and nothing predicted
    return 2 * tp / denom


def mean_pixel_auc(scores, gts) -> float:
    vals = []
    for s, g in zip(scores, gts):
        try:
            vals.append(pixel_auc(s, g))
        except UndefinedMetricError:
            continue
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class LocalizationResult:
    per_image: list[dict]
    mean_auc: float
    mean_f1: float
    pooled_auc: float | None = None
    pooled_f1: float | None = None
    skipped: int = 0


def evaluate_localization(scores, gts, ids=None, tau: float = 0.5, pooled: bool = False) -> LocalizationResult:
    """Per-image AUC/F1 averaged over images; single-class masks are skipped."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(scores))]
    rows, skipped = [], 0
    for i, s, g in zip(ids, scores, gts):
        try:
            rows.append({"id": i, "pixel_auc": pixel_auc(s, g), "pixel_f1": pixel_f1(s, g, tau)})
        except UndefinedMetricError:
            skipped += 1
    res = LocalizationResult(
        rows,
        float(np.mean([r["pixel_auc"] for r in rows])) if rows else float("nan"),
        float(np.mean([r["pixel_f1"] for r in rows])) if rows else float("nan"),
        skipped=skipped,
    )
    if pooled and len(scores):
        s_all = np.concatenate([_arrays(s, g)[0] for s, g in zip(scores, gts)])
        y_all = np.concatenate([_arrays(s, g)[1] for s, g in zip(scores, gts)])
        res.pooled_auc = pixel_auc(s_all, y_all)
        res.pooled_f1 = pixel_f1(s_all, y_all, tau)
    return res


def image_accuracy(verdicts, labels) -> float:
    verdicts, labels = list(verdicts), list(labels)
    if len(verdicts) != len(labels):
        raise ContractError(f"{len(verdicts)} verdicts vs {len(labels)} labels")
    if not labels:
        raise ContractError("image_accuracy needs at least one sample")
    return sum(v == l for v, l in zip(verdicts, labels)) / len(labels)


# ---------------------------------------------------------------------------
# ROUGE


def rouge_tokens(text: str) -> list[str]:
    """Lowercase, split on anything non-alphanumeric, no stemming."""
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class RougeScores:
    rouge1: PRF
    rouge2: PRF
    rougeL: PRF


def _prf(overlap: int, n_cand: int, n_ref: int) -> PRF:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: str, reference: str) -> RougeScores:
    c, r = rouge_tokens(candidate), rouge_tokens(reference)
    if not c or not r:
        raise ContractError("candidate and reference must contain at least one token")
    out = []
    for n in (1, 2):
        cn, rn = _ngrams(c, n), _ngrams(r, n)
        overlap = sum((cn & rn).values())
        out.append(_prf(overlap, sum(cn.values()), sum(rn.values())))
    out.append(_prf(lcs_length(c, r), len(c), len(r)))
    return RougeScores(*out)
