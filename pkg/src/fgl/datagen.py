"""Procedural forgery synthesis and image distortions."""

from __future__ import annotations

import heapq
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import polygon as draw_polygon

from .domain import (
    BinaryMask,
    DatasetManifest,
    DistortionSpec,
    ManifestEntry,
    RasterImage,
    check_same_size,
    load_image,
    save_image,
    save_mask,
    validate_manifest,
)
from .errors import ConfigError, GenerationError, GeometryError

MAX_ATTEMPTS = 100
DIFFUSION_ITERS = 200


@dataclass(frozen=True)
class MaskGranularity:
    lo: float
    hi: float
    regime: str = "blob"

    def __post_init__(self):
        if not 0 < self.lo < self.hi <= 0.5:
            raise ConfigError(f"granularity band must satisfy 0 < lo < hi <= 0.5, got [{self.lo}, {self.hi}]")
        if self.regime not in ("blob", "polygon"):
            raise ConfigError(f"unknown mask regime {self.regime!r}")


FINE = MaskGranularity(0.02, 0.06)
MEDIUM = MaskGranularity(0.06, 0.15)
COARSE = MaskGranularity(0.15, 0.30)


def textured_image(seed: int, size: int = 64) -> RasterImage:
    """Multi-frequency texture: random sinusoids plus smoothed noise per channel."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((size, size, 3))
    for c in range(3):
        acc = np.zeros((size, size))
        for freq in (1, 2, 4, 8):
            theta = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.5, 1.0) / freq * np.sin(
                2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase
            )
        acc += 0.3 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
        acc = (acc - acc.min()) / (np.ptp(acc) + 1e-12)
        lo, hi = sorted(rng.uniform(0, 255, 2))
        img[..., c] = lo + (hi - lo + 40) * acc
    return RasterImage(np.clip(np.rint(img), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# masks


def _grow_blob(field: np.ndarray, area: int) -> np.ndarray:
    """Priority flood from the field's maximum until ``area`` pixels are taken.

    The result is 4-connected and has exactly ``area`` pixels.
    """
    h, w = field.shape
    out = np.zeros((h, w), dtype=np.uint8)
    start = np.unravel_index(np.argmax(field), field.shape)
    heap = [(-field[start], start)]
    queued = {start}
    taken = 0
    while heap and taken < area:
        _, (r, c) = heapq.heappop(heap)
        out[r, c] = 1
        taken += 1
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and (rr, cc) not in queued:
                queued.add((rr, cc))
                heapq.heappush(heap, (-field[rr, cc], (rr, cc)))
    return out


def _polygon_mask(rng, size: int, target: int) -> np.ndarray:
    n = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.7, 1.3, n)
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)

    def raster(scale):
        m = np.zeros((size, size), dtype=np.uint8)
        rr, cc = draw_polygon(cy + scale * radii * np.sin(angles), cx + scale * radii * np.cos(angles), (size, size))
        m[rr, cc] = 1
        return m

    lo, hi = 0.5, float(size)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if raster(mid).sum() < target:
            lo = mid
        else:
            hi = mid
    return raster(hi)


def make_mask(seed: int, granularity: MaskGranularity, size: int = 64) -> BinaryMask:
    """Connected region whose area fraction lies in the granularity band."""
    rng = np.random.default_rng(seed)
    total = size * size
    lo_px, hi_px = math.ceil(granularity.lo * total), math.floor(granularity.hi * total)
    if lo_px > hi_px:
        raise GenerationError(f"no pixel count fits [{granularity.lo}, {granularity.hi}] on a {size}x{size} grid")
    for _ in range(MAX_ATTEMPTS):
        target = int(rng.integers(lo_px, hi_px + 1))
        if granularity.regime == "blob":
            sigma = rng.uniform(2.0, 5.0)
            field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
            m = _grow_blob(field, target)
        else:
            m = _polygon_mask(rng, size, target)
        area = int(m.sum())
        if lo_px <= area <= hi_px and ndimage.label(m)[1] == 1:
            return BinaryMask(m)
    raise GenerationError(f"no mask in band [{granularity.lo}, {granularity.hi}] after {MAX_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# manipulations


def splice(src: RasterImage, donor: RasterImage, mask: BinaryMask):
    check_same_size(src, donor, "source and donor")
    check_same_size(src, mask, "image and mask")
    out = np.where(mask.data[..., None].astype(bool), donor.data, src.data)
    return RasterImage(out), mask


def copy_move(src: RasterImage, mask: BinaryMask, shift: tuple[int, int]):
    """Paste the masked region of ``src`` at offset (dx, dy); returns the
    destination mask as ground truth."""
    check_same_size(src, mask, "image and mask")
    dx, dy = int(shift[0]), int(shift[1])
    if dx == 0 and dy == 0:
        raise GeometryError("shift (0, 0) puts the copy on top of its source")
    rows, cols = np.nonzero(mask.data)
    if rows.size == 0:
        raise GeometryError("empty source mask")
    h, w = mask.data.shape
    dr, dc = rows + dy, cols + dx
    if dr.min() < 0 or dc.min() < 0 or dr.max() >= h or dc.max() >= w:
        raise GeometryError(f"shift ({dx}, {dy}) moves the region out of bounds")
    out = src.data.copy()
    out[dr, dc] = src.data[rows, cols]
    dest = np.zeros_like(mask.data)
    dest[dr, dc] = 1
    return RasterImage(out), BinaryMask(dest)


def _neighbour_sum(x: np.ndarray) -> np.ndarray:
    """Sum of 4-neighbours over the leading two axes, zero outside the image."""
    out = np.zeros_like(x)
    out[1:] += x[:-1]
    out[:-1] += x[1:]
    out[:, 1:] += x[:, :-1]
    out[:, :-1] += x[:, 1:]
    return out


def diffusion_fill(values: np.ndarray, hole: np.ndarray, iters: int = DIFFUSION_ITERS) -> np.ndarray:
    """Solve the discrete Laplace equation inside ``hole`` with red-black SOR.

    ``values`` is H x W or H x W x C. Out-of-image neighbours are ignored
    (Neumann border). The initial guess is the mean of the pixels bordering
    the hole, so the fill depends only on them.
    """
    x = values.astype(np.float64).copy()
    if x.ndim == 2:
        return diffusion_fill(x[..., None], hole, iters)[..., 0]
    h, w = hole.shape
    ring = ndimage.binary_dilation(hole) & ~hole
    x[hole] = x[ring].mean(axis=0) if ring.any() else x[~hole].mean(axis=0)
    ys, xs = np.nonzero(hole)
    extent = max(np.ptp(ys), np.ptp(xs)) + 2
    omega = 2.0 / (1.0 + math.sin(math.pi / extent))
    count = _neighbour_sum(np.ones((h, w)))[..., None]
    parity = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(bool)
    sels = [hole & ~parity, hole & parity]
    for _ in range(iters):
        for sel in sels:
            avg = _neighbour_sum(x) / count
            x[sel] += omega * (avg[sel] - x[sel])
    return x


def removal_fill(src: RasterImage, mask: BinaryMask):
    check_same_size(src, mask, "image and mask")
    m = mask.data.astype(bool)
    if m.mean() > 0.25:
        raise GenerationError(f"removal mask covers {m.mean():.1%} of the image (max 25%)")
    if not m.any():
        raise GenerationError("empty removal mask")
    if m[0].any() and m[-1].any() and m[:, 0].any() and m[:, -1].any():
        raise GenerationError("removal mask touches all four borders")
    out = src.data.copy()
    filled = diffusion_fill(src.data, m)
    out[m] = np.clip(np.rint(filled[m]), 0, 255).astype(np.uint8)
    return RasterImage(out), mask


# ---------------------------------------------------------------------------
# distortions


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def blur_sigma(kernel: int) -> float:
    return 0.3 * ((kernel - 1) / 2 - 1) + 0.8


def resized_size(spec: DistortionSpec, w: int, h: int) -> tuple[int, int]:
    return round_half_up(spec.scale * w), round_half_up(spec.scale * h)


def apply_distortion(img: RasterImage, spec: DistortionSpec, rng_seed: int = 0) -> RasterImage:
    a = img.data
    if spec.kind == "resize":
        w, h = resized_size(spec, img.width, img.height)
        if (w, h) == (img.width, img.height):
            return img
        return RasterImage(cv2.resize(a, (w, h), interpolation=cv2.INTER_LINEAR))
    if spec.kind == "blur":
        s = blur_sigma(spec.kernel)
        return RasterImage(cv2.GaussianBlur(a, (spec.kernel, spec.kernel), sigmaX=s, sigmaY=s, borderType=cv2.BORDER_REFLECT_101))
    if spec.kind == "noise":
        if spec.sigma == 0:
            return img
        rng = np.random.default_rng(rng_seed)
        noisy = a.astype(np.float64) + rng.normal(0.0, spec.sigma, a.shape)
        return RasterImage(np.clip(np.rint(noisy), 0, 255).astype(np.uint8))
    buf = io.BytesIO()
    Image.fromarray(a).save(buf, format="JPEG", quality=int(spec.quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return RasterImage(np.array(im.convert("RGB")))


def resize_mask(mask: BinaryMask, size: tuple[int, int]) -> BinaryMask:
    w, h = size
    if (w, h) == (mask.width, mask.height):
        return mask
    return BinaryMask(cv2.resize(mask.data, (w, h), interpolation=cv2.INTER_NEAREST))


# Robustness ladder used in the evaluation tables.
ROBUSTNESS_LADDER = (
    DistortionSpec("resize", scale=0.78),
    DistortionSpec("resize", scale=0.25),
    DistortionSpec("blur", kernel=3),
    DistortionSpec("blur", kernel=15),
    DistortionSpec("noise", sigma=3),
    DistortionSpec("noise", sigma=15),
    DistortionSpec("jpeg", quality=100),
    DistortionSpec("jpeg", quality=50),
)

# Training-time corruption candidates.
DEFAULT_POLICY = (
    DistortionSpec("noise", sigma=3),
    DistortionSpec("noise", sigma=15),
    DistortionSpec("jpeg", quality=100),
    DistortionSpec("jpeg", quality=50),
)


# ---------------------------------------------------------------------------
# dataset


FORGERY_KINDS = ("splicing", "copy-move", "removal")

CAPTIONS = {
    "splicing": "A photo where a {where} region was spliced in from another image.",
    "copy-move": "A photo where a {where} region was copied from elsewhere in the same image.",
    "removal": "A photo where content in a {where} region was removed and filled in.",
    "none": "An authentic photo with no manipulated region.",
}


def describe_location(mask: np.ndarray) -> str:
    rows, cols = np.nonzero(mask)
    h, w = mask.shape
    cy, cx = rows.mean() / h, cols.mean() / w
    vert = "upper" if cy < 1 / 3 else "lower" if cy > 2 / 3 else "middle"
    horiz = "left" if cx < 1 / 3 else "right" if cx > 2 / 3 else "center"
    return "central" if (vert, horiz) == ("middle", "center") else f"{vert}-{horiz}"


def _pick_shift(rng, mask: BinaryMask) -> tuple[int, int]:
    rows, cols = np.nonzero(mask.data)
    h, w = mask.data.shape
    for _ in range(MAX_ATTEMPTS):
        dx = int(rng.integers(-cols.min(), w - cols.max()))
        dy = int(rng.integers(-rows.min(), h - rows.max()))
        # keep the copy mostly clear of its source so the tamper is visible
        if abs(dx) > np.ptp(cols) // 2 or abs(dy) > np.ptp(rows) // 2:
            return dx, dy
    raise GenerationError("no valid copy-move shift found")


def synthesize(kind: str, seed: int, size: int = 64, granularity: MaskGranularity = MEDIUM, pool=None):
    """Deterministically build one sample: returns (source, forged, mask).

    ``pool`` is an optional sequence of RasterImages to draw sources/donors from.
    """
    rng = np.random.default_rng(seed)

    def source(k):
        if pool:
            return pool[int(rng.integers(len(pool)))]
        return textured_image(int(rng.integers(2**31)) + k, size)

    src = source(0)
    if kind == "none":
        return src, src, BinaryMask(np.zeros((size, size), np.uint8))
    mask_seed = int(rng.integers(2**31))
    if kind == "removal":
        granularity = MaskGranularity(granularity.lo, min(granularity.hi, 0.25), granularity.regime)
    for attempt in range(MAX_ATTEMPTS):
        mask = make_mask(mask_seed + attempt, granularity, size)
        try:
            if kind == "splicing":
                forged, gt = splice(src, source(1), mask)
            elif kind == "copy-move":
                forged, gt = copy_move(src, mask, _pick_shift(rng, mask))
            elif kind == "removal":
                forged, gt = removal_fill(src, mask)
            else:
                raise ConfigError(f"unknown forgery type {kind!r}")
            return src, forged, gt
        except (GenerationError, GeometryError):
            continue
    raise GenerationError(f"could not synthesize {kind} sample for seed {seed}")


POOL_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_pool(pool_dir, size: int = 64) -> list[RasterImage]:
    """Load PNG/JPEG files from ``pool_dir`` (sorted by name), centre-cropped
    to a square and resized to ``size``."""
    pool_dir = Path(pool_dir)
    if not pool_dir.is_dir():
        raise ConfigError(f"pool directory not found: {pool_dir}")
    files = sorted(p for p in pool_dir.iterdir() if p.suffix.lower() in POOL_SUFFIXES)
    pool = []
    for f in files:
        a = load_image(f).data
        h, w = a.shape[:2]
        side = min(h, w)
        y0, x0 = (h - side) // 2, (w - side) // 2
        a = a[y0 : y0 + side, x0 : x0 + side]
        if side != size:
            a = cv2.resize(a, (size, size), interpolation=cv2.INTER_AREA)
        pool.append(RasterImage(np.ascontiguousarray(a)))
    if not pool:
        raise ConfigError(f"source pool {pool_dir} has no PNG/JPEG images")
    return pool


def _make_entry(args):
    idx, kind, seed, size, granularity, distortions, out_dir, pool = args
    label = "authentic" if kind == "none" else "forged"
    _, img, mask = synthesize(kind, seed, size, granularity, pool)
    for k, spec in enumerate(distortions):
        img = apply_distortion(img, spec, rng_seed=seed + k)
    entry_id = f"{idx:05d}"
    where = describe_location(mask.data) if mask.area else ""
    entry = ManifestEntry(
        id=entry_id,
        image_path=f"images/{entry_id}.png",
        mask_path=f"masks/{entry_id}.png",
        label=label,
        forgery_type=kind,
        distortions=list(distortions),
        seed=seed,
        caption=CAPTIONS[kind].format(where=where),
    )
    if out_dir is not None:
        save_image(img, Path(out_dir) / entry.image_path)
        save_mask(mask, Path(out_dir) / entry.mask_path)
    return entry


def plan_dataset(
    n_forged: int,
    n_authentic: int,
    seed: int = 0,
    types: Sequence[str] = FORGERY_KINDS,
    policy: Sequence[DistortionSpec] = (),
    distortion_prob: float = 0.5,
):
    """Decide (kind, seed, distortions) per entry; forged kinds cycle through ``types``."""
    if n_forged < 0 or n_authentic < 0 or n_forged + n_authentic == 0:
        raise ConfigError("dataset must contain at least one entry")
    if not types and n_forged:
        raise ConfigError("no forgery types requested")
    rng = np.random.default_rng(seed)
    kinds = [types[i % len(types)] for i in range(n_forged)] + ["none"] * n_authentic
    plan = []
    for kind in kinds:
        s = int(rng.integers(2**31))
        dist = []
        if policy and rng.random() < distortion_prob:
            dist = [policy[int(rng.integers(len(policy)))]]
        plan.append((kind, s, dist))
    return plan


def build_dataset(
    out_dir,
    n_forged: int,
    n_authentic: int,
    seed: int = 0,
    types: Sequence[str] = FORGERY_KINDS,
    policy: Sequence[DistortionSpec] = (),
    distortion_prob: float = 0.5,
    size: int = 64,
    granularity: MaskGranularity = MEDIUM,
    jobs: int = 1,
    pool_dir=None,
) -> DatasetManifest:
    """Synthesize images, masks and ``manifest.json`` under ``out_dir``.

    Build parameters needed for a rebuild (size, granularity, pool) go to
    ``build.json`` next to the manifest.
    """
    out_dir = Path(out_dir)
    pool = load_pool(pool_dir, size) if pool_dir is not None else None
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    plan = plan_dataset(n_forged, n_authentic, seed, types, policy, distortion_prob)
    work = [(i, k, s, size, granularity, d, out_dir, pool) for i, (k, s, d) in enumerate(plan)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            entries = list(ex.map(_make_entry, work))
    else:
        entries = [_make_entry(w) for w in work]
    manifest = DatasetManifest(entries, out_dir)
    manifest.save(out_dir / "manifest.json")
    info = {"seed": seed, "size": size, "pool_dir": None if pool_dir is None else str(Path(pool_dir).resolve()),
            "granularity": {"lo": granularity.lo, "hi": granularity.hi, "regime": granularity.regime}}
    (out_dir / "build.json").write_text(json.dumps(info, indent=2))
    bad = validate_manifest(manifest)
    if bad:
        raise GenerationError(f"synthesized manifest is invalid: {bad}")
    return manifest


def rebuild_entry(entry: ManifestEntry, size: int = 64, granularity: MaskGranularity = MEDIUM, pool=None):
    """Regenerate (image, mask) for a manifest entry from its seed."""
    _, img, mask = synthesize(entry.forgery_type, entry.seed, size, granularity, pool)
    for k, spec in enumerate(entry.distortions):
        img = apply_distortion(img, spec, rng_seed=entry.seed + k)
    return img, mask


def _png_bytes(save, obj) -> bytes:
    buf = io.BytesIO()
    save(obj, buf)
    return buf.getvalue()


def verify_rebuild(data_dir) -> list[str]:
    """Regenerate every entry of a built dataset in memory and return the ids
    whose encoded image or mask bytes differ from the files on disk."""
    data_dir = Path(data_dir)
    info_path = data_dir / "build.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    size = info.get("size", 64)
    g = info.get("granularity")
    granularity = MaskGranularity(g["lo"], g["hi"], g["regime"]) if g else MEDIUM
    pool = load_pool(info["pool_dir"], size) if info.get("pool_dir") else None
    manifest = DatasetManifest.load(data_dir / "manifest.json")
    bad = []
    for e in manifest:
        img, mask = rebuild_entry(e, size, granularity, pool)
        same = (_png_bytes(save_image, img) == manifest.resolve(e.image_path).read_bytes()
                and _png_bytes(save_mask, mask) == manifest.resolve(e.mask_path).read_bytes())
        if not same:
            bad.append(e.id)
    return bad
