"""
From masks to verdicts and explanations
=======================================

The predicted score map becomes four mask tokens. They sit between the
learned prompt tokens and the instruction words, and a small head reads the
whole sequence. The verdict is the argmax of two logits.
"""

import tempfile

import numpy as np
import torch

from fgl.bridge import MaskBridge, detect, render_explanation, train_bridge
from fgl.datagen import build_dataset
from fgl.domain import ScoreMap, ToyConfig
from fgl.flexpert import train_flexpert

cfg = ToyConfig()

# sequence layout for one image
bridge = MaskBridge(cfg)
seq = bridge.assemble(torch.zeros(1, 64, 64), torch.zeros(1, 64, 64))
print(len(seq), seq.boundaries())

# explanations are templated from the verdict and the predicted region
box = np.zeros((64, 64))
box[8:24, 30:50] = 1
print(render_explanation("forged", "copy-move", ScoreMap(box)))
print(render_explanation("authentic", "none", ScoreMap(box)))

with tempfile.TemporaryDirectory() as d:
    data = build_dataset(d, 8, 8, seed=11)
    expert = train_flexpert(data, cfg, 50).model
    res = train_bridge(data, expert, cfg, 60)
    print("training accuracy by step 10/30/60:", [res.extra["accuracy"][i] for i in (9, 29, 59)])
    verdicts, scores = detect([data.image(e) for e in data], res.model, res.extra["expert"])
    for e, v in list(zip(data, verdicts))[:4] + list(zip(data, verdicts))[-2:]:
        print(e.id, e.label, "->", v.verdict, np.round(v.logits, 2))
