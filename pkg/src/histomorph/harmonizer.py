"""Unified sample format, manifests and patient-stratified splitting.

A harmonized sample is a 4-channel 8-bit PNG: RGB in the first three
channels and a fused label plane in the fourth, where 0 is background,
1-6 a nucleus of a known cell type and 7 a nucleus of unknown type.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, PngImagePlugin

log = logging.getLogger(__name__)

CELL_TYPE_NAMES = {
    1: "lymphocyte",
    2: "epithelial",
    3: "plasma",
    4: "neutrophil",
    5: "eosinophil",
    6: "connective",
}
UNKNOWN_TYPE = 7
MAGNIFICATIONS = ("20x", "40x")
SCHEMA_VERSION = 1


class HarmonizationError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class RawSegmentationSample:
    image: np.ndarray  # H x W x 3 uint8
    instance_map: np.ndarray  # H x W, 0 = background
    cell_types: dict | None = None  # instance id -> 1..6
    source_id: str = ""
    magnification: str = "20x"
    patient_id: str | None = None


@dataclass
class HarmonizedSample:
    image: np.ndarray  # H x W x 3 uint8
    label_plane: np.ndarray  # H x W uint8 in 0..7
    patient_id: str | None = None
    source_id: str = ""
    magnification: str = "20x"
    instance_map: np.ndarray | None = field(default=None, compare=False)

    @property
    def nuclei_mask(self) -> np.ndarray:
        return self.label_plane > 0

    def __eq__(self, other):
        if not isinstance(other, HarmonizedSample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.label_plane, other.label_plane)
            and self.label_plane.dtype == other.label_plane.dtype
            and (self.patient_id, self.source_id, self.magnification)
            == (other.patient_id, other.source_id, other.magnification)
        )


def encode_label_plane(mask: np.ndarray, type_map: np.ndarray | None = None) -> np.ndarray:
    """Fuse a nuclei mask and per-pixel types (0 = unknown) into the 0..7 plane."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=np.uint8)
    if type_map is None:
        out[mask] = UNKNOWN_TYPE
        return out
    t = np.asarray(type_map)
    known = mask & (t >= 1) & (t <= 6)
    out[mask] = UNKNOWN_TYPE
    out[known] = t[known]
    return out


def decode_label_plane(label_plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``encode_label_plane``: (nuclei mask, type map with 7 = unknown)."""
    label_plane = np.asarray(label_plane)
    return label_plane > 0, label_plane.copy()


def harmonize(sample: RawSegmentationSample) -> HarmonizedSample:
    image = np.asarray(sample.image)
    inst = np.asarray(sample.instance_map)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise HarmonizationError(f"image must be H x W x 3 uint8, got {image.shape} {image.dtype}")
    if inst.shape != image.shape[:2]:
        raise HarmonizationError(f"instance map {inst.shape} does not match image {image.shape[:2]}")
    if (inst < 0).any():
        raise HarmonizationError("instance ids must be non-negative")
    ids = np.unique(inst)
    ids = ids[ids > 0]
    types = sample.cell_types or {}
    present = set(ids.tolist())
    for k, t in types.items():
        if int(k) not in present:
            raise HarmonizationError(f"cell type given for instance {k}, which is absent from the map")
        if not 1 <= int(t) <= 6:
            raise HarmonizationError(f"instance {k}: cell type {t} outside 1..6")

    label = np.zeros(inst.shape, dtype=np.uint8)
    if ids.size:
        # ids can be sparse; index through the sorted unique ids
        lut = np.array([int(types.get(int(i), UNKNOWN_TYPE)) for i in ids], dtype=np.uint8)
        fg = inst > 0
        label[fg] = lut[np.searchsorted(ids, inst[fg])]
    return HarmonizedSample(image, label, sample.patient_id, sample.source_id,
                            sample.magnification, instance_map=inst)


def resample_to_reference_magnification(sample: HarmonizedSample) -> HarmonizedSample:
    """Bring 40x samples to the 20x reference scale (factor-2 downsampling)."""
    if sample.magnification == "20x":
        return sample
    if sample.magnification != "40x":
        raise HarmonizationError(f"unknown magnification {sample.magnification!r}")
    h, w = sample.label_plane.shape
    h2, w2 = h // 2, w // 2
    image = cv2.resize(sample.image, (w2, h2), interpolation=cv2.INTER_LINEAR)
    label = sample.label_plane[: 2 * h2 : 2, : 2 * w2 : 2].copy()
    inst = None
    if sample.instance_map is not None:
        inst = sample.instance_map[: 2 * h2 : 2, : 2 * w2 : 2].copy()
    return replace(sample, image=image, label_plane=label, magnification="20x", instance_map=inst)


def write_sample(sample: HarmonizedSample, path) -> Path:
    path = Path(path)
    rgba = np.dstack([sample.image, sample.label_plane]).astype(np.uint8)
    info = PngImagePlugin.PngInfo()
    info.add_text("patient_id", "" if sample.patient_id is None else sample.patient_id)
    info.add_text("patient_id_set", "0" if sample.patient_id is None else "1")
    info.add_text("source_id", sample.source_id)
    info.add_text("magnification", sample.magnification)
    Image.fromarray(rgba, mode="RGBA").save(path, pnginfo=info)
    return path


def read_sample(path) -> HarmonizedSample:
    with Image.open(path) as im:
        if im.mode != "RGBA":
            raise HarmonizationError(f"{path}: expected a 4-channel PNG, got mode {im.mode}")
        arr = np.asarray(im).copy()
        text = dict(getattr(im, "text", {}))
    patient = text.get("patient_id") if text.get("patient_id_set", "1") == "1" else None
    return HarmonizedSample(
        image=np.ascontiguousarray(arr[..., :3]),
        label_plane=np.ascontiguousarray(arr[..., 3]),
        patient_id=patient,
        source_id=text.get("source_id", ""),
        magnification=text.get("magnification", "20x"),
    )


def read_rgb(path) -> np.ndarray:
    """Read any PNG/JPEG as H x W x 3 uint8 (a 4th channel is dropped)."""
    with Image.open(path) as im:
        if im.mode == "RGBA":
            return np.asarray(im)[..., :3].copy()
        return np.asarray(im.convert("RGB")).copy()


# -- manifests ---------------------------------------------------------------

ENTRY_FIELDS = ("image_path", "label_path", "patient_id", "source_id", "magnification", "category_label")


@dataclass
class ManifestEntry:
    image_path: str
    label_path: str | None = None
    patient_id: str | None = None
    source_id: str = ""
    magnification: str = "20x"
    category_label: str | None = None

    @property
    def id(self) -> str:
        return self.image_path


@dataclass
class DatasetManifest:
    entries: list
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None  # directory relative paths resolve against

    @property
    def is_classification(self) -> bool:
        return bool(self.entries) and self.entries[0].category_label is not None

    def categories(self) -> list:
        return sorted({e.category_label for e in self.entries})

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.image_path in seen:
                raise ManifestError(f"duplicate image_path {e.image_path!r}")
            seen.add(e.image_path)
            if e.magnification not in MAGNIFICATIONS:
                raise ManifestError(f"{e.image_path}: unknown magnification {e.magnification!r}")
        has_cat = {e.category_label is not None for e in self.entries}
        if len(has_cat) > 1:
            raise ManifestError("category_label must be present on all entries or none")

    def subset(self, entries) -> "DatasetManifest":
        return DatasetManifest(list(entries), self.schema_version, self.root)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version,
                "entries": [asdict(e) for e in self.entries]}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
    entries = []
    for i, raw in enumerate(data.get("entries", [])):
        unknown = set(raw) - set(ENTRY_FIELDS)
        if unknown:
            raise ManifestError(f"{path}: entry {i} has unknown fields {sorted(unknown)}")
        if "image_path" not in raw:
            raise ManifestError(f"{path}: entry {i} lacks image_path")
        entries.append(ManifestEntry(**raw))
    m = DatasetManifest(entries, SCHEMA_VERSION, path.parent)
    m.validate()
    return m


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    manifest.validate()
    path.write_text(json.dumps(manifest.to_dict(), indent=1))
    return path


def split_stratified(manifest: DatasetManifest, ratios=(0.7, 0.15, 0.15), seed: int = 0):
    """Split by patient so no patient spans two parts.

    Patients are shuffled with ``seed`` and laid end to end; each goes to the
    part whose cumulative target interval contains the patient's midpoint,
    so every part is within one patient group of its target size.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    groups: dict = {}
    for e in manifest.entries:
        if e.patient_id is None:
            raise ManifestError(f"{e.image_path}: patient_id required for a stratified split")
        groups.setdefault(e.patient_id, []).append(e)
    total = len(manifest.entries)
    patients = sorted(groups)
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]

    largest = max((len(g) for g in groups.values()), default=0)
    if total and largest / total > max(ratios):
        warnings.warn(f"one patient holds {largest}/{total} entries, more than any split's share")

    bounds = np.cumsum(ratios) * total
    parts = ([], [], [])
    pos = 0
    for pid in order:
        n = len(groups[pid])
        mid = pos + n / 2
        k = int(np.searchsorted(bounds, mid, side="right"))
        k = min(k, 2)
        while ratios[k] == 0 and k > 0:
            k -= 1
        parts[k].extend(groups[pid])
        pos += n
    return tuple(manifest.subset(p) for p in parts)


# -- raw ingestion -------------------------------------------------------------

def load_raw_label(path) -> tuple[np.ndarray, dict | None]:
    """Instance map plus optional id->type dict from .npz, .npy or a 16-bit PNG.

    ``.npz`` files carry ``instance_map`` and optionally parallel arrays
    ``type_ids`` / ``type_values``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            inst = z["instance_map"]
            types = None
            if "type_ids" in z:
                types = {int(i): int(t) for i, t in zip(z["type_ids"], z["type_values"])}
        return inst, types
    if path.suffix == ".npy":
        return np.load(path), None
    inst = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if inst is None:
        raise HarmonizationError(f"cannot read label file {path}")
    if inst.ndim == 3:
        inst = inst[..., 0]
    return inst, None


def harmonize_manifest(manifest: DatasetManifest, out_dir, target_mag: str | None = "20x") -> DatasetManifest:
    """Convert every raw entry to a 4-channel PNG (+ instance map .npy) under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(manifest.entries):
        image = read_rgb(manifest.resolve(e.image_path))
        if e.label_path is not None:
            inst, types = load_raw_label(manifest.resolve(e.label_path))
        else:
            inst, types = np.zeros(image.shape[:2], dtype=np.int32), None
        raw = RawSegmentationSample(image, inst, types, e.source_id, e.magnification, e.patient_id)
        try:
            h = harmonize(raw)
        except HarmonizationError as exc:
            raise HarmonizationError(f"{e.image_path}: {exc}") from exc
        if target_mag == "20x":
            h = resample_to_reference_magnification(h)
        stem = f"{i:06d}_{Path(e.image_path).stem}"
        write_sample(h, out_dir / f"{stem}.png")
        np.save(out_dir / f"{stem}_instances.npy", h.instance_map.astype(np.int32))
        entries.append(ManifestEntry(f"{stem}.png", f"{stem}_instances.npy", e.patient_id,
                                     e.source_id, h.magnification, e.category_label))
    out = DatasetManifest(entries, SCHEMA_VERSION, out_dir)
    save_manifest(out, out_dir / "manifest.json")
    log.info("harmonized %d samples into %s", len(entries), out_dir)
    return out
