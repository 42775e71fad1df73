"""
Synthesizing forgeries
======================

Every sample comes from a seed: a textured source image, a connected mask
drawn inside an area band, and one of three manipulations.
"""

import tempfile

from fgl.datagen import COARSE, FINE, MEDIUM, apply_distortion, build_dataset, make_mask, synthesize, verify_rebuild
from fgl.domain import DistortionSpec

# mask area fractions for each granularity band
for name, band in [("fine", FINE), ("medium", MEDIUM), ("coarse", COARSE)]:
    areas = [make_mask(s, band).area / 4096 for s in range(50)]
    print(f"{name:6s} band [{band.lo}, {band.hi}]  drawn {min(areas):.3f} .. {max(areas):.3f}")

# each manipulation only touches pixels under its ground-truth mask
for kind in ("splicing", "copy-move", "removal"):
    src, forged, mask = synthesize(kind, seed=3)
    changed = (forged.data != src.data).any(axis=-1)
    print(f"{kind:9s} mask {mask.area:4d} px, changed {changed.sum():4d} px, all inside: {not (changed & ~mask.data.astype(bool)).any()}")

# distortions happen after the mask is fixed
_, forged, _ = synthesize("splicing", seed=3)
small = apply_distortion(forged, DistortionSpec("resize", scale=0.78))
print("resized to", small.data.shape[:2])

# a dataset is a manifest of seeds, so it can be rebuilt byte for byte
with tempfile.TemporaryDirectory() as d:
    m = build_dataset(d, 6, 3, seed=0, policy=[DistortionSpec("jpeg", quality=50)], distortion_prob=0.5)
    print([(e.id, e.forgery_type, [s.label() for s in e.distortions]) for e in m])
    print("rebuild mismatches:", verify_rebuild(d))
