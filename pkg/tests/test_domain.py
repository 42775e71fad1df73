import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from fgl.domain import (
    BinaryMask,
    DatasetManifest,
    DistortionSpec,
    ManifestEntry,
    RasterImage,
    ScoreMap,
    ToyConfig,
    load_image,
    load_mask,
    load_scores,
    save_image,
    save_mask,
    save_scores,
    validate_manifest,
)
from fgl.errors import ConfigError, FormatError, ShapeError, SpecError


# -- types ----------------------------------------------------------------


def test_raster_image_contract():
    img = RasterImage(np.zeros((16, 20, 3), np.uint8))
    assert (img.width, img.height, img.channels) == (20, 16, 3)
    assert img.data.size == 16 * 20 * 3
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1  # read-only
    for bad in (np.zeros((15, 16, 3), np.uint8), np.zeros((16, 16), np.uint8), np.zeros((16, 16, 3), np.float32)):
        with pytest.raises(ShapeError):
            RasterImage(bad)


def test_binary_mask_values():
    assert BinaryMask(np.array([[0, 1], [1, 1]])).area == 3
    assert BinaryMask(np.ones((3, 3), bool)).area == 9
    with pytest.raises(ShapeError):
        BinaryMask(np.array([[0, 2]]))


@pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan, np.inf])
def test_score_map_rejects_out_of_range(bad):
    a = np.full((4, 4), 0.5, np.float32)
    a[1, 2] = bad
    with pytest.raises(ShapeError):
        ScoreMap(a)


def test_score_map_keeps_float32():
    s = ScoreMap(np.linspace(0, 1, 16).reshape(4, 4))
    assert s.data.dtype == np.float32 and (s.width, s.height) == (4, 4)


# -- config ---------------------------------------------------------------


def test_toy_config_defaults():
    c = ToyConfig()
    assert (c.image_size, c.patch_size, c.embed_dim, c.key_dim, c.encoder_depth) == (64, 8, 64, 64, 8)
    assert c.tap_blocks == [2, 4, 6, 8]
    assert (c.template_len, c.object_embed_len, c.mask_tokens, c.prompt_tokens) == (4, 12, 4, 4)
    assert (c.lambda_cls, c.lambda_loc) == (1.0, 1.0)
    assert c.num_patches == 64 and c.grid == 8


@pytest.mark.parametrize(
    "change",
    [
        {"image_size": 60},
        {"tap_blocks": [4, 2]},
        {"tap_blocks": [2, 4, 9]},
        {"object_embed_len": 0},
        {"lambda_cls": -1.0},
        {"lambda_loc": -0.5},
        {"precision": "float16"},
    ],
)
def test_toy_config_invariants(change):
    with pytest.raises(ConfigError):
        ToyConfig(**change)


def test_toy_config_dict_round_trip():
    c = ToyConfig(object_embed_len=24, rng_seed=5)
    assert ToyConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ConfigError):
        ToyConfig.from_dict({"bogus": 1})


# -- image / mask / score I/O ---------------------------------------------


def test_black_png_decodes_to_zeros(tmp_path):
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "b.png")
    img = load_image(tmp_path / "b.png")
    assert img.data.shape == (64, 64, 3) and not img.data.any()


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, (17, 23, 3)))
def test_png_round_trip_is_bit_exact(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("img") / "x.png"
    save_image(RasterImage(data), p)
    assert np.array_equal(load_image(p).data, data)


def test_jpeg_loads(tmp_path):
    Image.fromarray(np.full((32, 32, 3), 128, np.uint8)).save(tmp_path / "x.jpg", quality=95)
    assert load_image(tmp_path / "x.jpg").data.shape == (32, 32, 3)


def test_truncated_png_is_format_error(tmp_path):
    p = tmp_path / "t.png"
    save_image(RasterImage(np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)), p)
    p.write_bytes(p.read_bytes()[:200])
    with pytest.raises(FormatError):
        load_image(p)


def test_unsupported_format_and_missing_file(tmp_path):
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "x.bmp")
    with pytest.raises(FormatError):
        load_image(tmp_path / "x.bmp")
    with pytest.raises(OSError):
        load_image(tmp_path / "missing.png")


def test_save_mask_pixel_values(tmp_path):
    save_mask(BinaryMask(np.ones((4, 4), np.uint8)), tmp_path / "one.png")
    save_mask(BinaryMask(np.zeros((4, 4), np.uint8)), tmp_path / "zero.png")
    one = np.array(Image.open(tmp_path / "one.png"))
    zero = np.array(Image.open(tmp_path / "zero.png"))
    assert one.dtype == np.uint8 and one.ndim == 2 and (one == 255).all() and one.size == 16
    assert (zero == 0).all()


def test_checkerboard_mask_round_trip(tmp_path):
    m = BinaryMask(np.array([[1, 0], [0, 1]]))
    save_mask(m, tmp_path / "c.png")
    assert load_mask(tmp_path / "c.png") == m


def test_save_mask_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_mask(BinaryMask(np.zeros((4, 4), np.uint8)), tmp_path / "no" / "such" / "dir" / "m.png")


@settings(max_examples=20, deadline=None)
@given(arrays(np.float32, (5, 7), elements=st.floats(0, 1, width=32)))
def test_score_round_trip(tmp_path_factory, data):
    base = tmp_path_factory.mktemp("s") / "score"
    save_scores(ScoreMap(data), base)
    raw = (base.with_suffix(".f32")).read_bytes()
    assert raw == data.astype("<f4").tobytes()
    assert json.loads(base.with_suffix(".json").read_text()) == {"width": 7, "height": 5}
    assert np.array_equal(load_scores(base).data, data)


# -- distortion spec ------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"kind": "resize", "scale": 0.0},
        {"kind": "resize", "scale": 1.5},
        {"kind": "blur", "kernel": 4},
        {"kind": "blur", "kernel": 1},
        {"kind": "noise", "sigma": -1},
        {"kind": "jpeg", "quality": 0},
        {"kind": "jpeg", "quality": 101},
        {"kind": "sharpen"},
    ],
)
def test_distortion_spec_validation(kw):
    with pytest.raises(SpecError):
        DistortionSpec(**kw)


def test_distortion_labels():
    assert DistortionSpec("resize", scale=0.78).label() == "Resize(0.78x)"
    assert DistortionSpec("blur", kernel=15).label() == "Blur(k=15)"
    assert DistortionSpec("noise", sigma=3).label() == "Noise(sigma=3)"
    assert DistortionSpec("jpeg", quality=50).label() == "Compress(q=50)"


# -- manifest -------------------------------------------------------------


def _two_entry_manifest(root):
    (root / "images").mkdir()
    (root / "masks").mkdir()
    m1 = np.zeros((16, 16), np.uint8)
    m1[4:8, 4:8] = 1
    save_mask(BinaryMask(m1), root / "masks" / "a.png")
    save_mask(BinaryMask(np.zeros((16, 16), np.uint8)), root / "masks" / "b.png")
    entries = [
        ManifestEntry("a", "images/a.png", "masks/a.png", "forged", "splicing", [DistortionSpec("jpeg", quality=50)], 1, "x"),
        ManifestEntry("b", "images/b.png", "masks/b.png", "authentic", "none", [], 2, "y"),
    ]
    return DatasetManifest(entries, root)


def test_validate_clean_manifest(tmp_path):
    assert validate_manifest(_two_entry_manifest(tmp_path)) == []


def test_validate_forged_with_empty_mask(tmp_path):
    m = _two_entry_manifest(tmp_path)
    m.entries[0].mask_path = "masks/b.png"
    assert validate_manifest(m) == ["a: forged-needs-positive-mask"]


def test_validate_duplicate_ids(tmp_path):
    m = _two_entry_manifest(tmp_path)
    m.entries[1].id = "a"
    assert validate_manifest(m) == ["a: ids-unique"]


def test_validate_label_rules(tmp_path):
    m = _two_entry_manifest(tmp_path)
    m.entries[1].forgery_type = "removal"
    m.entries[0].forgery_type = "none"
    assert set(validate_manifest(m, check_files=False)) == {"b: authentic-has-type-none", "a: forged-needs-type"}
    m.entries[0].mask_path = "masks/missing.png"
    assert "a: mask-readable" in validate_manifest(m)


def test_manifest_json_round_trip(tmp_path):
    m = _two_entry_manifest(tmp_path)
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert [e.to_dict() for e in back] == [e.to_dict() for e in m]
    assert back.root == tmp_path
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        DatasetManifest.load(tmp_path / "bad.json")
