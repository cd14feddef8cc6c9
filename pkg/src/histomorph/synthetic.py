"""Synthetic H&E-like fixtures: pink stroma with dark, type-tinted nuclei."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .harmonizer import (DatasetManifest, ManifestEntry, RawSegmentationSample, SCHEMA_VERSION,
                         harmonize, save_manifest, write_sample)

BACKGROUND = np.array([232, 182, 208], dtype=np.float32)
# per-type nucleus colour; distinct enough for a tiny net to tell apart
NUCLEUS_COLORS = {
    1: (60, 30, 110),
    2: (120, 60, 150),
    3: (90, 20, 70),
    4: (40, 60, 140),
    5: (150, 40, 90),
    6: (100, 80, 120),
}


def disks(size, n, rng, r_range=(4, 8), min_gap=2):
    """Non-overlapping disks as an instance map (ids 1..k)."""
    inst = np.zeros((size, size), dtype=np.int32)
    yy, xx = np.mgrid[:size, :size]
    k = 0
    for _ in range(n * 20):
        if k == n:
            break
        r = rng.integers(r_range[0], r_range[1] + 1)
        cy, cx = rng.integers(r, size - r, size=2)
        d = (yy - cy) ** 2 + (xx - cx) ** 2 <= (r + min_gap) ** 2
        if inst[d].any():
            continue
        k += 1
        inst[(yy - cy) ** 2 + (xx - cx) ** 2 <= r**2] = k
    return inst


def render(inst, types, rng, size, tint=(0, 0, 0), noise=6.0):
    img = np.broadcast_to(BACKGROUND + np.asarray(tint, np.float32), (size, size, 3)).copy()
    for i in range(1, inst.max() + 1):
        img[inst == i] = NUCLEUS_COLORS.get(types.get(i, 1), NUCLEUS_COLORS[1])
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def segmentation_sample(rng, size=64, n_nuclei=(3, 7), typed=True, source_id="synthetic",
                        patient_id=None, magnification="20x") -> RawSegmentationSample:
    inst = disks(size, int(rng.integers(n_nuclei[0], n_nuclei[1] + 1)), rng)
    ids = range(1, inst.max() + 1)
    types = {i: int(rng.integers(1, 7)) for i in ids}
    image = render(inst, types, rng, size)
    return RawSegmentationSample(image, inst, types if typed else None, source_id, magnification, patient_id)


CATEGORY_STYLES = [
    dict(density=(1, 2), tint=(0, 0, 0), type=1),
    dict(density=(6, 9), tint=(0, 0, 0), type=2),
    dict(density=(3, 5), tint=(-40, 10, -30), type=6),
    dict(density=(3, 5), tint=(10, -50, 10), type=3),
]


def classification_image(rng, category: int, size=64) -> np.ndarray:
    style = CATEGORY_STYLES[category % len(CATEGORY_STYLES)]
    inst = disks(size, int(rng.integers(*style["density"]) + 1), rng, r_range=(3, 6))
    types = {i: style["type"] for i in range(1, inst.max() + 1)}
    return render(inst, types, rng, size, tint=style["tint"])


def write_segmentation_dataset(out_dir, n=8, size=64, seed=0, typed=True, source_id="synthetic",
                               patients=4) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        raw = segmentation_sample(rng, size, typed=typed, source_id=source_id, patient_id=f"p{i % patients}")
        h = harmonize(raw)
        write_sample(h, out_dir / f"{source_id}_{i:04d}.png")
        np.save(out_dir / f"{source_id}_{i:04d}_instances.npy", h.instance_map.astype(np.int32))
        entries.append(ManifestEntry(f"{source_id}_{i:04d}.png", f"{source_id}_{i:04d}_instances.npy",
                                     h.patient_id, source_id, "20x"))
    m = DatasetManifest(entries, SCHEMA_VERSION, out_dir)
    save_manifest(m, out_dir / "manifest.json")
    return m


def write_classification_dataset(out_dir, n=16, categories=4, size=64, seed=0, patients=8) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        c = i % categories
        Image.fromarray(classification_image(rng, c, size)).save(out_dir / f"img_{i:04d}.png")
        entries.append(ManifestEntry(f"img_{i:04d}.png", None, f"p{i % patients}", "synthetic", "20x",
                                     f"class_{c}"))
    m = DatasetManifest(entries, SCHEMA_VERSION, out_dir)
    save_manifest(m, out_dir / "manifest.json")
    return m


def write_raw_dataset(out_dir, n=4, size=64, seed=0, magnification="40x") -> DatasetManifest:
    """Unharmonized input for the ``harmonize`` command: RGB PNG + .npz instance/type arrays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        raw = segmentation_sample(rng, size, magnification=magnification, patient_id=f"p{i}")
        Image.fromarray(raw.image).save(out_dir / f"raw_{i:03d}.png")
        ids = np.array(sorted(raw.cell_types), dtype=np.int32)
        vals = np.array([raw.cell_types[k] for k in ids], dtype=np.int32)
        np.savez(out_dir / f"raw_{i:03d}.npz", instance_map=raw.instance_map, type_ids=ids, type_values=vals)
        entries.append(ManifestEntry(f"raw_{i:03d}.png", f"raw_{i:03d}.npz", f"p{i}", "synthetic", magnification))
    m = DatasetManifest(entries, SCHEMA_VERSION, out_dir)
    save_manifest(m, out_dir / "manifest.json")
    return m
