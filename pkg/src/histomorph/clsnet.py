"""Classification module over RGB + segmentation maps (11 channels)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, Encoder, get_config, inflate_stem, init_weights
from .segnet import Decoder, SegmentationOutput, ShapeError, check_multiple, reflect_pad

FUSED_CHANNELS = 11  # 3 RGB + 1 nuclei + 7 cell-type maps


@dataclass
class CategoryPrediction:
    probs: torch.Tensor  # N x C
    features: torch.Tensor  # N x F pooled features


def fuse(image: torch.Tensor, seg: SegmentationOutput | None = None, noise: bool = False,
         generator: torch.Generator | None = None) -> torch.Tensor:
    """Stack an N x 3 x H x W image in [0, 1] with segmentation maps.

    In noise mode the 8 segmentation channels are i.i.d. uniform [0, 1].
    """
    if noise:
        n, _, h, w = image.shape
        maps = torch.rand((n, 8, h, w), generator=generator, dtype=image.dtype).to(image.device)
    else:
        if seg is None:
            raise ValueError("fuse needs segmentation output unless noise=True")
        maps = seg.stacked()
        if maps.shape[0] != image.shape[0] or maps.shape[-2:] != image.shape[-2:]:
            raise ShapeError(
                f"image {tuple(image.shape)} and segmentation {tuple(maps.shape)} are not aligned"
            )
    return torch.cat([image, maps.to(image.dtype)], dim=1)


class ClassificationNet(nn.Module):
    def __init__(self, config: BackboneConfig, num_classes: int, dropout: float = 0.2,
                 rgb_stem: nn.Conv2d | None = None):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        self.encoder = Encoder(config, in_channels=3)
        stem = rgb_stem if rgb_stem is not None else self.encoder.stem[0]
        self.encoder.stem[0] = inflate_stem(stem, FUSED_CHANNELS)
        self.encoder.in_channels = FUSED_CHANNELS
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(config.final_width, num_classes)
        init_weights(self.fc)

    def pooled(self, x):
        feats, _ = self.encoder(x)
        return F.adaptive_avg_pool2d(feats, 1).flatten(1)

    def forward(self, x) -> CategoryPrediction:
        pooled = self.pooled(x)
        logits = self.fc(self.dropout(pooled))
        return CategoryPrediction(torch.softmax(logits, dim=1), pooled)

    def logits(self, x):
        return self.fc(self.dropout(self.pooled(x)))


class PretrainVariant(nn.Module):
    """Classification backbone with a skip-free decoder predicting segmentation maps.

    Shares the encoder object of the wrapped ClassificationNet.
    """

    def __init__(self, clsnet: ClassificationNet, decoder: Decoder | None = None):
        super().__init__()
        self.clsnet = clsnet
        cfg = clsnet.config
        self.decoder = decoder or Decoder(cfg.final_width, cfg.decoder_widths, cfg.stride, None, cfg.bn_eps)

    @property
    def encoder(self):
        return self.clsnet.encoder

    def forward(self, x) -> SegmentationOutput:
        feats, _ = self.encoder(x)
        nuc, typ = self.decoder(feats)
        return SegmentationOutput(torch.sigmoid(nuc), torch.softmax(typ, dim=1))

    def remove_decoder(self) -> ClassificationNet:
        return self.clsnet


def build_classification_model(config: BackboneConfig | str, num_classes: int,
                               dropout: float = 0.2, rgb_stem: nn.Conv2d | None = None) -> ClassificationNet:
    if isinstance(config, str):
        config = get_config(config)
    return ClassificationNet(config, num_classes, dropout, rgb_stem)


def build_pretrain_variant(model: ClassificationNet) -> PretrainVariant:
    return PretrainVariant(model)


def _check_fused(fused: torch.Tensor, pad: bool):
    if fused.ndim != 4 or fused.shape[1] != FUSED_CHANNELS:
        raise ShapeError(f"expected N x {FUSED_CHANNELS} x H x W, got {tuple(fused.shape)}")
    if pad:
        fused, _, _ = reflect_pad(fused)
    else:
        check_multiple(fused)
    return fused


def forward_classification(model: ClassificationNet, fused: torch.Tensor, pad: bool = False,
                           num_classes: int | None = None) -> CategoryPrediction:
    if num_classes is not None and num_classes != model.num_classes:
        raise ValueError(f"head predicts {model.num_classes} categories, caller expects {num_classes}")
    return model(_check_fused(fused, pad))


@torch.no_grad()
def extract_features(model: ClassificationNet, fused: torch.Tensor, pad: bool = False) -> torch.Tensor:
    """Pooled pre-head features, always computed in inference mode."""
    was_training = model.training
    model.eval()
    try:
        return model.pooled(_check_fused(fused, pad))
    finally:
        model.train(was_training)
