"""Segmentation module: encoder + 4-block decoder + nuclei/cell-type heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, Encoder, conv_bn_act, get_config, init_weights, pad_amount

NUM_TYPE_CLASSES = 7  # background + six cell types


class ShapeError(ValueError):
    pass


@dataclass
class SegmentationOutput:
    nuclei_prob: torch.Tensor  # N x 1 x H x W, sigmoid
    type_prob: torch.Tensor  # N x 7 x H x W, softmax over dim 1

    def crop(self, h: int, w: int) -> "SegmentationOutput":
        return SegmentationOutput(self.nuclei_prob[..., :h, :w], self.type_prob[..., :h, :w])

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.nuclei_prob, self.type_prob], dim=1)


class UpBlock(nn.Module):
    """Two 3x3 convs followed by a stride-2 transposed conv."""

    def __init__(self, cin, width, eps=1e-3):
        super().__init__()
        self.conv1 = conv_bn_act(cin, width, 3, eps=eps)
        self.conv2 = conv_bn_act(width, width, 3, eps=eps)
        self.up = nn.ConvTranspose2d(width, width, 2, stride=2)

    def forward(self, x):
        return self.up(self.conv2(self.conv1(x)))


class Decoder(nn.Module):
    """Four upscaling blocks; skips are concatenated after the block whose
    output stride matches the tap stride. Any remaining factor between the
    last block and the input resolution is bridged by bilinear upsampling.
    """

    def __init__(self, in_channels, widths, in_stride, skips=None, eps=1e-3):
        super().__init__()
        skips = skips or {}  # stride -> (name, channels)
        self.blocks = nn.ModuleList()
        self.merge_after = []
        cin, stride = in_channels, in_stride
        for w in widths:
            self.blocks.append(UpBlock(cin, w, eps))
            stride //= 2
            cin = w
            if stride in skips:
                name, ch = skips[stride]
                self.merge_after.append(name)
                cin += ch
            else:
                self.merge_after.append(None)
        if stride < 1:
            raise ValueError(f"decoder overshoots the input resolution (in_stride={in_stride})")
        self.final_upsample = stride
        self.out_channels = cin
        self.nuclei_head = nn.Conv2d(cin, 1, 1)
        self.type_head = nn.Conv2d(cin, NUM_TYPE_CLASSES, 1)
        init_weights(self)

    def forward(self, x, skips=None):
        for block, name in zip(self.blocks, self.merge_after):
            x = block(x)
            if name is not None:
                x = torch.cat([x, skips[name]], dim=1)
        if self.final_upsample > 1:
            x = F.interpolate(x, scale_factor=self.final_upsample, mode="bilinear", align_corners=False)
        return self.nuclei_head(x), self.type_head(x)


class SegmentationNet(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config, in_channels=3, num_stages=config.seg_stages, head=False)
        skips = {config.tap_stride(idx): (name, width) for name, idx, width in config.skip_taps}
        self.decoder = Decoder(self.encoder.out_channels, config.decoder_widths,
                               config.seg_stride, skips, config.bn_eps)
        self._frozen = False

    def forward(self, x) -> SegmentationOutput:
        feats, skips = self.encoder(x)
        nuclei_logit, type_logit = self.decoder(feats, skips)
        return SegmentationOutput(torch.sigmoid(nuclei_logit), torch.softmax(type_logit, dim=1))

    def train(self, mode=True):
        # a frozen net stays in inference mode so BN statistics never move
        return super().train(mode and not self._frozen)


def build_segmentation_model(config: BackboneConfig | str) -> SegmentationNet:
    if isinstance(config, str):
        config = get_config(config)
    return SegmentationNet(config)


def reflect_pad(x: torch.Tensor, multiple: int = 32) -> tuple[torch.Tensor, int, int]:
    """Pad an NCHW tensor on the bottom/right to a multiple of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = pad_amount(h, multiple), pad_amount(w, multiple)
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, h, w


def check_multiple(x: torch.Tensor, multiple: int = 32) -> None:
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"input {h}x{w} is not a multiple of {multiple}; pass pad=True")


def forward_segmentation(model: SegmentationNet, images: torch.Tensor, pad: bool = False) -> SegmentationOutput:
    """Run the segmentation net on an N x 3 x H x W batch scaled to [0, 1].

    With ``pad=True`` arbitrary sizes are reflect-padded to a multiple of 32
    and the outputs cropped back.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected N x 3 x H x W, got {tuple(images.shape)}")
    if pad:
        images, h, w = reflect_pad(images)
        return model(images).crop(h, w)
    check_multiple(images)
    return model(images)


def freeze(model: nn.Module) -> nn.Module:
    """Disable gradients and pin the model to inference mode (in place)."""
    for p in model.parameters():
        p.requires_grad_(False)
    if hasattr(model, "_frozen"):
        model._frozen = True
    model.eval()
    return model
