"""Core data model: images, masks, score maps, configuration and manifests."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, FormatError, ShapeError

MIN_SIDE = 16

LABELS = ("authentic", "forged")
FORGERY_TYPES = ("splicing", "copy-move", "removal", "none")


@dataclass(frozen=True)
class RasterImage:
    """H x W x 3 uint8 image."""

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data)
        if a.dtype != np.uint8:
            raise ShapeError(f"RasterImage needs uint8 data, got {a.dtype}")
        if a.ndim != 3 or a.shape[2] != 3:
            raise ShapeError(f"RasterImage needs shape (H, W, 3), got {a.shape}")
        if a.shape[0] < MIN_SIDE or a.shape[1] < MIN_SIDE:
            raise ShapeError(f"RasterImage sides must be >= {MIN_SIDE}, got {a.shape[:2]}")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class BinaryMask:
    """H x W mask with values in {0, 1}, stored as uint8."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ShapeError(f"BinaryMask needs a 2-D array, got shape {a.shape}")
        if a.dtype == bool:
            a = a.astype(np.uint8)
        elif not np.isin(a, (0, 1)).all():
            raise ShapeError("BinaryMask values must be 0 or 1")
        a = np.ascontiguousarray(a, dtype=np.uint8)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool((self.data == other.data).all())

    __hash__ = None


@dataclass(frozen=True)
class ScoreMap:
    """H x W float32 map of forgery probabilities.

    Values outside [0, 1] (or non-finite) raise instead of being clamped.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise ShapeError(f"ScoreMap needs a 2-D array, got shape {a.shape}")
        if not np.isfinite(a).all() or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
            raise ShapeError("ScoreMap values must be finite and lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def check_same_size(a, b, what: str = "inputs") -> None:
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ShapeError(f"{what} differ in size: {a.data.shape[:2]} vs {b.data.shape[:2]}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ToyConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    key_dim: int = 64
    encoder_depth: int = 8
    tap_blocks: list[int] = field(default_factory=lambda: [2, 4, 6, 8])
    num_heads: int = 4
    template_len: int = 4
    object_embed_len: int = 12
    mask_tokens: int = 4
    prompt_tokens: int = 4
    token_dim: int = 64
    lambda_cls: float = 1.0
    lambda_loc: float = 1.0
    rng_seed: int = 0
    precision: str = "float32"
    lr: float = 2e-3
    encoder_lr_scale: float = 1.0
    lr_schedule: str = "constant"
    decoder_widths: list[int] = field(default_factory=lambda: [64, 32, 32])
    use_object_prompt: bool = True
    use_vocab: bool = True

    def __post_init__(self):
        self.tap_blocks = [int(t) for t in self.tap_blocks]
        self.validate()

    def validate(self) -> None:
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.image_size < MIN_SIDE:
            raise ConfigError(f"image_size must be >= {MIN_SIDE}")
        taps = self.tap_blocks
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError("tap_blocks must be non-empty and strictly increasing")
        if taps[0] < 1 or taps[-1] > self.encoder_depth:
            raise ConfigError("tap_blocks must lie in 1..encoder_depth")
        if self.object_embed_len < 1:
            raise ConfigError("object_embed_len (m) must be >= 1")
        if self.template_len < 1:
            raise ConfigError("template_len must be >= 1")
        if self.lambda_cls < 0 or self.lambda_loc < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.key_dim != self.embed_dim:
            raise ConfigError("key_dim must equal embed_dim (queries and keys share the projected space)")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if len(self.decoder_widths) != 3:
            raise ConfigError("decoder_widths needs three entries")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.mask_tokens < 1 or self.prompt_tokens < 0:
            raise ConfigError("mask_tokens must be >= 1 and prompt_tokens >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def replace(self, **changes) -> "ToyConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ToyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# image / mask / score I/O


def load_image(path) -> RasterImage:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise FormatError(f"{path}: unsupported format {im.format}")
            im.load()
            return RasterImage(np.array(im.convert("RGB"), dtype=np.uint8))
    except (UnidentifiedImageError, SyntaxError) as e:
        raise FormatError(f"{path}: {e}") from e
    except OSError as e:
        # PIL reports truncated data as OSError; a readable file that fails to decode is a format problem.
        if path.is_file() and os.access(path, os.R_OK):
            raise FormatError(f"{path}: {e}") from e
        raise


def save_image(img: RasterImage, path) -> None:
    Image.fromarray(img.data, mode="RGB").save(path, format="PNG")


def save_mask(mask: BinaryMask, path) -> None:
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> BinaryMask:
    path = Path(path)
    try:
        with Image.open(path) as im:
            a = np.array(im.convert("L"))
    except (UnidentifiedImageError, SyntaxError) as e:
        raise FormatError(f"{path}: {e}") from e
    return BinaryMask((a >= 128).astype(np.uint8))


def save_scores(score: ScoreMap, path) -> None:
    """Write ``<path>.f32`` (little-endian float32) plus ``<path>.json``."""
    base = Path(path).with_suffix("")
    score.data.astype("<f4").tofile(base.with_suffix(".f32"))
    base.with_suffix(".json").write_text(json.dumps({"width": score.width, "height": score.height}))


def load_scores(path) -> ScoreMap:
    base = Path(path).with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    raw = np.fromfile(base.with_suffix(".f32"), dtype="<f4")
    if raw.size != meta["width"] * meta["height"]:
        raise FormatError(f"{base}: payload size does not match sidecar")
    return ScoreMap(raw.reshape(meta["height"], meta["width"]))


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DistortionSpec:
    """One image degradation. Only the parameter matching ``kind`` is used."""

    kind: str
    scale: float = 1.0
    kernel: int = 3
    sigma: float = 0.0
    quality: int = 100

    def __post_init__(self):
        from .errors import SpecError

        if self.kind == "resize":
            if not 0 < self.scale <= 1:
                raise SpecError(f"resize scale must be in (0, 1], got {self.scale}")
        elif self.kind == "blur":
            if self.kernel < 3 or self.kernel % 2 == 0:
                raise SpecError(f"blur kernel must be odd and >= 3, got {self.kernel}")
        elif self.kind == "noise":
            if self.sigma < 0:
                raise SpecError(f"noise sigma must be >= 0, got {self.sigma}")
        elif self.kind == "jpeg":
            if not 1 <= self.quality <= 100:
                raise SpecError(f"jpeg quality must be in [1, 100], got {self.quality}")
        else:
            raise SpecError(f"unknown distortion kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "resize":
            return f"Resize({self.scale:g}x)"
        if self.kind == "blur":
            return f"Blur(k={self.kernel})"
        if self.kind == "noise":
            return f"Noise(sigma={self.sigma:g})"
        return f"Compress(q={self.quality})"

    def to_dict(self) -> dict[str, Any]:
        key = {"resize": "scale", "blur": "kernel", "noise": "sigma", "jpeg": "quality"}[self.kind]
        return {"kind": self.kind, key: getattr(self, key)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DistortionSpec":
        return cls(**d)


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    label: str
    forgery_type: str
    distortions: list[DistortionSpec] = field(default_factory=list)
    seed: int = 0
    caption: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["distortions"] = [s.to_dict() for s in self.distortions]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ManifestEntry":
        d = dict(d)
        d["distortions"] = [DistortionSpec.from_dict(s) for s in d.get("distortions", [])]
        return cls(**d)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def image(self, entry: ManifestEntry) -> RasterImage:
        return load_image(self.resolve(entry.image_path))

    def mask(self, entry: ManifestEntry) -> BinaryMask:
        return load_mask(self.resolve(entry.mask_path))

    def subset(self, keep: Iterable[ManifestEntry]) -> "DatasetManifest":
        return DatasetManifest(list(keep), self.root)

    def to_json(self) -> str:
        return json.dumps({"entries": [e.to_dict() for e in self.entries]}, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from e
        entries = [ManifestEntry.from_dict(e) for e in raw["entries"]]
        return cls(entries, path.parent)


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> list[str]:
    """Return one ``"<id>: <rule>"`` string per violated invariant."""
    out = []
    seen = set()
    for e in manifest.entries:
        if e.id in seen:
            out.append(f"{e.id}: ids-unique")
        seen.add(e.id)
        if e.label not in LABELS:
            out.append(f"{e.id}: label-known")
        if e.forgery_type not in FORGERY_TYPES:
            out.append(f"{e.id}: forgery-type-known")
        if e.label == "authentic" and e.forgery_type != "none":
            out.append(f"{e.id}: authentic-has-type-none")
        if e.label == "forged" and e.forgery_type == "none":
            out.append(f"{e.id}: forged-needs-type")
        if not check_files:
            continue
        try:
            m = manifest.mask(e)
        except (OSError, FormatError):
            out.append(f"{e.id}: mask-readable")
            continue
        if e.label == "forged" and m.area == 0:
            out.append(f"{e.id}: forged-needs-positive-mask")
        if e.label == "authentic" and m.area != 0:
            out.append(f"{e.id}: authentic-needs-empty-mask")
    return out
