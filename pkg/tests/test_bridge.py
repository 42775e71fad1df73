import math

import numpy as np
import pytest
import torch

from fgl.bridge import (
    NEGATIVE_RESPONSE,
    DecisionHead,
    MaskBridge,
    MaskEncoder,
    assemble_token_sequence,
    classify,
    cross_entropy,
    detect,
    joint_loss,
    load_bridge,
    render_explanation,
    train_bridge,
    verdict_from_logits,
)
from fgl.domain import RasterImage, ScoreMap, ToyConfig
from fgl.encoders import images_to_tensor
from fgl.errors import ConfigError, ContractError, ShapeError
from fgl.flexpert import FLExpert, load_arrays
from fgl.nn import snapshot

f64 = torch.float64


def _img(seed):
    return RasterImage(np.random.default_rng(seed).integers(0, 256, (64, 64, 3), dtype=np.uint8))


@pytest.fixture(scope="module")
def pair():
    cfg = ToyConfig(precision="float64")
    return MaskBridge(cfg), FLExpert(cfg)


# -- mask tokens ----------------------------------------------------------


def test_mask_tokens_shape_and_determinism(pair):
    bridge, _ = pair
    z, o = torch.zeros(1, 64, 64, dtype=f64), torch.ones(1, 64, 64, dtype=f64)
    tz, to = bridge.encode_mask_tokens(z), bridge.encode_mask_tokens(o)
    assert tz.shape == (1, 4, 64)
    assert not torch.allclose(tz, to)
    assert torch.equal(tz, bridge.encode_mask_tokens(z))


def test_mask_encoder_rejects_wrong_size():
    with pytest.raises(ShapeError):
        MaskEncoder(ToyConfig())(torch.zeros(1, 32, 32))


# -- token assembly -------------------------------------------------------


def test_assembly_lengths_and_boundaries():
    seq = assemble_token_sequence(torch.zeros(64, 8), torch.zeros(4, 8), torch.ones(4, 8), torch.zeros(8, 8))
    assert len(seq) == 80 and seq.tokens.shape == (1, 80, 8)
    assert seq.boundaries() == {"image": (0, 64), "prompt": (64, 68), "mask": (68, 72), "text": (72, 80)}
    assert torch.equal(seq.tokens[0, 68:72], torch.ones(4, 8))
    empty = assemble_token_sequence(torch.zeros(64, 8), torch.zeros(4, 8), torch.ones(4, 8), torch.zeros(0, 8))
    assert len(empty) == 72 and empty.boundaries()["text"] == (72, 72)


def test_assembly_width_mismatch():
    with pytest.raises(ShapeError):
        assemble_token_sequence(torch.zeros(64, 8), torch.zeros(4, 8), torch.zeros(4, 6), torch.zeros(8, 8))


def test_bridge_sequence_layout(pair):
    bridge, expert = pair
    x = images_to_tensor([_img(0)], f64)
    seq = bridge.assemble(expert.frozen_features(x)[1], torch.zeros(1, 64, 64, dtype=f64))
    assert seq.boundaries()["mask"] == (68, 72)
    assert len(seq) == 72 + 5  # five instruction words


# -- verdicts -------------------------------------------------------------


def test_verdict_is_argmax():
    assert verdict_from_logits([2.0, -1.0]) == "authentic"
    assert verdict_from_logits([-1.0, 2.0]) == "forged"
    assert verdict_from_logits([0.3, 0.3]) == "authentic"


def test_classify_reproducible(pair):
    bridge, expert = pair
    x = images_to_tensor([_img(1), _img(2)], f64)
    seq = bridge.assemble(expert.frozen_features(x)[1], torch.rand(2, 64, 64, dtype=f64))
    a, b = classify(seq, bridge.head), classify(seq, bridge.head)
    assert len(a) == 2
    assert all(np.array_equal(u.logits, v.logits) and u.verdict == v.verdict for u, v in zip(a, b))


def test_thresholdless_head():
    names = [n for n, _ in MaskBridge(ToyConfig()).named_parameters()]
    assert not any("threshold" in n or "bias_shift" in n for n in names)
    assert DecisionHead(ToyConfig()).readout.out_features == 2


def test_token_order_matters(pair):
    bridge, expert = pair
    x = images_to_tensor([_img(3)], f64)
    feats = expert.frozen_features(x)[1]
    score = torch.rand(1, 64, 64, dtype=f64)
    seq = bridge.assemble(feats, score)
    (i0, i1), (p0, p1), (m0, m1) = (seq.boundaries()[r] for r in ("image", "prompt", "mask"))
    swapped = seq.tokens.clone()
    swapped[:, p0:p1], swapped[:, m0:m1] = seq.tokens[:, m0:m1], seq.tokens[:, p0:p1]
    seq2 = type(seq)(swapped, seq.roles)
    with torch.no_grad():
        assert not torch.allclose(bridge.head(seq), bridge.head(seq2))


# -- explanations ---------------------------------------------------------


def test_negative_response_exact():
    assert render_explanation("authentic", "splicing", ScoreMap(np.ones((64, 64)))) == NEGATIVE_RESPONSE


def test_full_mask_explanation():
    text = render_explanation("forged", "splicing", ScoreMap(np.ones((64, 64))))
    assert "100%" in text and "x 0 to 63" in text and "y 0 to 63" in text
    assert "splicing" in text
    assert text == render_explanation("forged", "splicing", ScoreMap(np.ones((64, 64))))


def test_unknown_type_wording():
    text = render_explanation("forged", "unknown", ScoreMap(np.ones((64, 64))))
    assert "could not be determined" in text


def test_forged_needs_mask_pixels():
    with pytest.raises(ContractError):
        render_explanation("forged", "removal", ScoreMap(np.zeros((64, 64))))
    with pytest.raises(ContractError):
        render_explanation("maybe", "removal", ScoreMap(np.ones((64, 64))))


# -- training -------------------------------------------------------------


def test_cross_entropy_matches_hand_value():
    logits = torch.tensor([[2.0, -1.0], [0.5, 0.5]], dtype=f64)
    ref = (-math.log(math.exp(2) / (math.exp(2) + math.exp(-1))) - math.log(0.5)) / 2
    assert math.isclose(cross_entropy(logits, torch.tensor([0, 1])).item(), ref, rel_tol=1e-12)


def test_classification_term_never_reaches_expert(tiny4):
    cfg = ToyConfig(precision="float64")
    expert, bridge = FLExpert(cfg), MaskBridge(cfg)
    x, y = load_arrays(tiny4, cfg, f64)
    labels = torch.tensor([1 if e.label == "forged" else 0 for e in tiny4])
    total, *_ = joint_loss(bridge, expert, x, y, labels, expert.frozen_features(x), 1.0, 0.0)
    total.backward()
    assert all(p.grad is None or not p.grad.any() for p in expert.parameters())
    assert bridge.mask_enc.patch_embed.weight.grad.abs().sum() > 0


def test_training_keeps_image_projector_frozen(tiny4):
    cfg = ToyConfig(precision="float64")
    expert, bridge = FLExpert(cfg), MaskBridge(cfg)
    before = snapshot(bridge, only_frozen=True)
    res = train_bridge(tiny4, expert, cfg, 2, bridge=bridge)
    assert {n.split(".")[0] for n in before} == {"img_proj"}
    after = dict(bridge.named_parameters())
    assert all(torch.equal(t, after[n]) for n, t in before.items())
    assert len(res.extra["accuracy"]) == 2


def test_missing_expert_checkpoint(tiny4, tmp_path):
    with pytest.raises(ConfigError):
        train_bridge(tiny4, tmp_path / "nope.fgl", epochs=1)
    with pytest.raises(ConfigError):
        train_bridge(tiny4, FLExpert(ToyConfig()), epochs=1, mask_source="oracle")


def test_checkpoint_round_trip(tiny4, tmp_path):
    cfg = ToyConfig(precision="float64")
    res = train_bridge(tiny4, FLExpert(cfg), cfg, 1, checkpoint_out=tmp_path / "b.fgl")
    bridge, expert = load_bridge(res.checkpoint)
    imgs = [tiny4.image(e) for e in tiny4]
    v1, s1 = detect(imgs, res.model, res.extra["expert"])
    v2, s2 = detect(imgs, bridge, expert)
    assert [v.verdict for v in v1] == [v.verdict for v in v2]
    assert all(np.array_equal(a.logits, b.logits) for a, b in zip(v1, v2))
    assert all(np.array_equal(a.data, b.data) for a, b in zip(s1, s2))
