"""Torch datasets over manifests, plus target construction for the seg heads."""
from __future__ import annotations

import numpy as np
import torch
from torch.utils.data import Dataset

from .augment import AugmentationPolicy, augment, crop_random
from .harmonizer import UNKNOWN_TYPE, DatasetManifest, read_rgb, read_sample
from .segnet import NUM_TYPE_CLASSES


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for one epoch; depends only on (seed, epoch) so resumes line up."""
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def seg_targets(label_plane: torch.Tensor) -> dict:
    """Targets from an N x H x W label plane (0..7).

    Unknown-type nuclei (7) count as nuclei for BCE but are masked out of CCE.
    """
    lab = label_plane.long()
    nuclei = (lab > 0).unsqueeze(1).float()
    known = lab < UNKNOWN_TYPE
    cls = torch.where(known, lab, torch.zeros_like(lab))
    onehot = torch.nn.functional.one_hot(cls, NUM_TYPE_CLASSES).permute(0, 3, 1, 2).float()
    return {"nuclei": nuclei, "types": onehot, "type_mask": known.float()}


def to_chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


class SegmentationDataset(Dataset):
    """Harmonized 4-channel samples -> (image 3xHxW in [0,1], label HxW)."""

    def __init__(self, manifest: DatasetManifest, policy: AugmentationPolicy | None = None,
                 crop_size: int | None = 224, seed: int = 0, exclude_sources=()):
        self.manifest = manifest.subset(e for e in manifest.entries if e.source_id not in set(exclude_sources))
        self.policy = policy or AugmentationPolicy.from_mode("off")
        self.crop_size = crop_size
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest.entries)

    def __getitem__(self, i):
        e = self.manifest.entries[i]
        s = read_sample(self.manifest.resolve(e.image_path))
        rng = sample_rng(self.seed, self.epoch, i)
        pair = augment(s.image, s.label_plane, self.policy, rng)
        if self.crop_size:
            pair = crop_random(pair.image, pair.label_plane, self.crop_size, rng)
        return to_chw(pair.image), torch.from_numpy(np.ascontiguousarray(pair.label_plane)).long()


class ClassificationDataset(Dataset):
    """RGB images with category labels -> (image 3xHxW in [0,1], category index)."""

    def __init__(self, manifest: DatasetManifest, categories: list, policy: AugmentationPolicy | None = None,
                 crop_size: int | None = 224, seed: int = 0):
        missing = set(manifest.categories()) - set(categories)
        if missing:
            raise ValueError(f"manifest has categories not known to the model: {sorted(missing)}")
        self.manifest = manifest
        self.index = {c: k for k, c in enumerate(categories)}
        self.policy = policy or AugmentationPolicy.from_mode("off")
        self.crop_size = crop_size
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest.entries)

    def __getitem__(self, i):
        e = self.manifest.entries[i]
        image = read_rgb(self.manifest.resolve(e.image_path))
        rng = sample_rng(self.seed, self.epoch, i)
        pair = augment(image, None, self.policy, rng)
        if self.crop_size:
            pair = crop_random(pair.image, None, self.crop_size, rng)
        return to_chw(pair.image), self.index[e.category_label]


def collate(batch):
    images, targets = zip(*batch)
    images = torch.stack(images)
    if isinstance(targets[0], torch.Tensor):
        return images, torch.stack(targets)
    return images, torch.tensor(targets, dtype=torch.long)
