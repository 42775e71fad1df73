"""
Evaluation protocol
===================

Pixel AUC and F1 for localization, accuracy for detection, ROUGE for the
explanations, and a sweep over distortions.
"""

import tempfile

from fgl.datagen import build_dataset
from fgl.domain import ToyConfig
from fgl.experiments import format_table, robustness_sweep
from fgl.flexpert import train_flexpert
from fgl.metrics import pixel_auc, pixel_f1, rouge

# AUC is pairwise concordance between tampered and clean pixels
print(pixel_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]))  # 0.75
print(round(pixel_f1([0.9, 0.8, 0.1, 0.0], [1, 0, 0, 0]), 3))  # 0.667

r = rouge("the cat sat", "the cat lay down")
print(f"rouge-1 {r.rouge1.f1:.4f}  rouge-2 {r.rouge2.f1:.4f}  rouge-L {r.rougeL.f1:.4f}")

# robustness of an overfit expert
with tempfile.TemporaryDirectory() as d:
    data = build_dataset(d, 8, 0, seed=7)
    expert = train_flexpert(data, ToyConfig(), 100).model
    print(format_table(robustness_sweep(expert, data)))
