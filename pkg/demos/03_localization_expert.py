"""
Training the localization expert
================================

Eight forged images, full-batch Adam, dice loss. The frozen towers never
move; only the vocabulary encoder, the object embeddings, the projections
and the decoder learn.
"""

import tempfile

from fgl.datagen import build_dataset
from fgl.domain import ToyConfig
from fgl.experiments import evaluate_expert
from fgl.flexpert import FLExpert, train_flexpert
from fgl.nn import snapshot

with tempfile.TemporaryDirectory() as d:
    data = build_dataset(d, 8, 0, seed=7)
    cfg = ToyConfig()
    model = FLExpert(cfg)
    frozen = snapshot(model, only_frozen=True)

    res = train_flexpert(data, cfg, 100, model=model)
    for step in (0, 24, 49, 99):
        print(f"step {step + 1:3d}  dice {res.losses[step]:.4f}  auc {res.aucs[step]:.4f}")

    params = dict(model.named_parameters())
    print("frozen tensors unchanged:", all((params[n] == t).all().item() for n, t in frozen.items()))

    loc = evaluate_expert(model, data)
    print(f"mean pixel AUC {loc.mean_auc:.3f}  mean pixel F1 {loc.mean_f1:.3f}")

    score = model.predict([data.image(data.entries[0])])[0]
    gt = data.mask(data.entries[0]).data
    print("predicted area", int((score.data >= 0.5).sum()), "true area", int(gt.sum()))
