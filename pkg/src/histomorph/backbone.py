"""EfficientNet-style encoder with configurable topology.

The ``reference`` preset reproduces the EfficientNet-B7 layout (width 2.0,
depth 3.1): skip taps of 192/288/480 channels and a 2560-channel head.
The ``tiny`` preset keeps the same stride structure with a few dozen
channels so everything runs on a laptop CPU.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class BackboneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageSetting:
    expand_ratio: int
    kernel: int
    stride: int
    out_channels: int
    depth: int


# B0 base settings scaled by width 2.0 / depth 3.1 (ceil), as for B7.
_B7_STAGES = (
    StageSetting(1, 3, 1, 32, 4),
    StageSetting(6, 3, 2, 48, 7),
    StageSetting(6, 5, 2, 80, 7),
    StageSetting(6, 3, 2, 160, 10),
    StageSetting(6, 5, 1, 224, 10),
    StageSetting(6, 5, 2, 384, 13),
    StageSetting(6, 3, 1, 640, 4),
)

_TINY_STAGES = (
    StageSetting(1, 3, 1, 4, 1),
    StageSetting(3, 3, 2, 6, 1),
    StageSetting(3, 5, 2, 10, 1),
    StageSetting(3, 3, 2, 16, 1),
    StageSetting(3, 5, 1, 24, 1),
    StageSetting(3, 5, 2, 32, 1),
    StageSetting(3, 3, 1, 48, 1),
)


@dataclass(frozen=True)
class BackboneConfig:
    """Encoder/decoder topology shared by the segmentation and classification nets.

    ``skip_taps`` maps tap name to (stage index, expected width); the tap is
    the expanded activation at the start of that stage's first block.
    ``seg_stages`` is how many encoder stages the segmentation net keeps; its
    bottleneck then sits at stride 16 so four x2 decoder blocks land exactly
    on the input resolution.
    """

    preset: str
    stem_width: int
    stages: tuple[StageSetting, ...]
    final_width: int
    skip_taps: tuple[tuple[str, int, int], ...]
    seg_stages: int
    decoder_widths: tuple[int, int, int, int]
    drop_path: float = 0.0
    bn_eps: float = 1e-3
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def stride(self) -> int:
        s = 2
        for st in self.stages:
            s *= st.stride
        return s

    @property
    def seg_stride(self) -> int:
        s = 2
        for st in self.stages[: self.seg_stages]:
            s *= st.stride
        return s

    @property
    def skip_widths(self) -> tuple[int, ...]:
        return tuple(w for _, _, w in self.skip_taps)

    def stage_input_channels(self, index: int) -> int:
        return self.stem_width if index == 0 else self.stages[index - 1].out_channels

    def tap_stride(self, stage_index: int) -> int:
        s = 2
        for st in self.stages[:stage_index]:
            s *= st.stride
        return s

    def validate(self) -> None:
        if not self.stages:
            raise BackboneConfigError("backbone needs at least one stage")
        if not 1 <= self.seg_stages <= len(self.stages):
            raise BackboneConfigError(f"seg_stages={self.seg_stages} out of range")
        if len(self.skip_taps) != 3:
            raise BackboneConfigError("exactly three skip taps are required")
        for name, idx, width in self.skip_taps:
            if not 0 <= idx < self.seg_stages:
                raise BackboneConfigError(f"skip tap {name!r}: stage {idx} not in the segmentation encoder")
            st = self.stages[idx]
            if st.expand_ratio == 1:
                raise BackboneConfigError(f"skip tap {name!r}: stage {idx} has no expansion layer")
            actual = self.stage_input_channels(idx) * st.expand_ratio
            if actual != width:
                raise BackboneConfigError(
                    f"skip tap {name!r}: encoder provides {actual} channels, config expects {width}"
                )
        if self.seg_stride != 16:
            raise BackboneConfigError(f"segmentation bottleneck stride must be 16, got {self.seg_stride}")
        if self.stride != 32:
            raise BackboneConfigError(f"total encoder stride must be 32, got {self.stride}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["stages"] = tuple(StageSetting(**s) for s in d["stages"])
        d["skip_taps"] = tuple(tuple(t) for t in d["skip_taps"])
        d["decoder_widths"] = tuple(d["decoder_widths"])
        return cls(**d)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"preset": self.preset, "topology": self.to_dict(), "stride": self.stride},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def reference_config() -> BackboneConfig:
    return BackboneConfig(
        preset="reference",
        stem_width=64,
        stages=_B7_STAGES,
        final_width=2560,
        skip_taps=(("block2", 1, 192), ("block3", 2, 288), ("block4", 3, 480)),
        seg_stages=5,
        decoder_widths=(512, 256, 128, 64),
        drop_path=0.2,
    )


def tiny_config() -> BackboneConfig:
    return BackboneConfig(
        preset="tiny",
        stem_width=8,
        stages=_TINY_STAGES,
        final_width=160,
        skip_taps=(("block2", 1, 12), ("block3", 2, 18), ("block4", 3, 30)),
        seg_stages=5,
        decoder_widths=(32, 16, 16, 8),
    )


PRESETS = {"reference": reference_config, "tiny": tiny_config}


def get_config(preset: str) -> BackboneConfig:
    try:
        return PRESETS[preset]()
    except KeyError:
        raise BackboneConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


def conv_bn_act(cin, cout, kernel=3, stride=1, groups=1, eps=1e-3, act=True):
    layers = [
        nn.Conv2d(cin, cout, kernel, stride, padding=(kernel - 1) // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout, eps=eps),
    ]
    if act:
        layers.append(nn.SiLU(inplace=True))
    return nn.Sequential(*layers)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, squeeze):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, squeeze, 1)
        self.fc2 = nn.Conv2d(squeeze, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        s = self.fc2(F.silu(self.fc1(s)))
        return x * torch.sigmoid(s)


class MBConv(nn.Module):
    """Inverted residual block: 1x1 expand, depthwise conv, SE, 1x1 project."""

    def __init__(self, cin, cout, expand_ratio, kernel, stride, drop_path=0.0, eps=1e-3):
        super().__init__()
        hidden = cin * expand_ratio
        self.expand = conv_bn_act(cin, hidden, 1, eps=eps) if expand_ratio != 1 else None
        self.depthwise = conv_bn_act(hidden, hidden, kernel, stride, groups=hidden, eps=eps)
        self.se = SqueezeExcite(hidden, max(1, cin // 4))
        self.project = conv_bn_act(hidden, cout, 1, eps=eps, act=False)
        self.residual = stride == 1 and cin == cout
        self.drop_path = drop_path

    def forward(self, x, return_expanded=False):
        h = self.expand(x) if self.expand is not None else x
        expanded = h
        h = self.project(self.se(self.depthwise(h)))
        if self.residual:
            if self.training and self.drop_path > 0:
                keep = 1.0 - self.drop_path
                mask = x.new_empty(x.shape[0], 1, 1, 1).bernoulli_(keep) / keep
                h = h * mask
            h = h + x
        if return_expanded:
            return h, expanded
        return h


class Encoder(nn.Module):
    """Stem plus MBConv stages, optionally truncated and optionally with the 1x1 head.

    ``forward`` returns the final feature map and a dict of skip taps keyed
    by tap name.
    """

    def __init__(self, config: BackboneConfig, in_channels=3, num_stages=None, head=True):
        super().__init__()
        config.validate()
        self.config = config
        self.in_channels = in_channels
        num_stages = len(config.stages) if num_stages is None else num_stages
        self.stem = conv_bn_act(in_channels, config.stem_width, 3, stride=2, eps=config.bn_eps)

        total_blocks = sum(s.depth for s in config.stages)
        block_id = 0
        self.stages = nn.ModuleList()
        cin = config.stem_width
        for st in config.stages[:num_stages]:
            blocks = nn.ModuleList()
            for i in range(st.depth):
                dp = config.drop_path * block_id / total_blocks
                blocks.append(
                    MBConv(cin, st.out_channels, st.expand_ratio, st.kernel,
                           st.stride if i == 0 else 1, dp, config.bn_eps)
                )
                cin = st.out_channels
                block_id += 1
            self.stages.append(blocks)
        self.head = conv_bn_act(cin, config.final_width, 1, eps=config.bn_eps) if head else None
        self.out_channels = config.final_width if head else cin
        self._taps = {idx: name for name, idx, _ in config.skip_taps}
        init_weights(self)

    def forward(self, x):
        skips = {}
        x = self.stem(x)
        for idx, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                if j == 0 and idx in self._taps:
                    x, expanded = block(x, return_expanded=True)
                    skips[self._taps[idx]] = expanded
                else:
                    x = block(x)
        if self.head is not None:
            x = self.head(x)
        return x, skips


def init_weights(module: nn.Module) -> None:
    """EfficientNet initialisation: fan-out normal convs, unit BN, small uniform linears."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            r = 1.0 / math.sqrt(m.out_features)
            nn.init.uniform_(m.weight, -r, r)
            nn.init.zeros_(m.bias)


def inflate_stem(conv: nn.Conv2d, in_channels: int) -> nn.Conv2d:
    """Widen a 3-channel stem conv: RGB weights copied, new channels zeroed."""
    new = nn.Conv2d(in_channels, conv.out_channels, conv.kernel_size, conv.stride,
                    conv.padding, bias=conv.bias is not None)
    with torch.no_grad():
        new.weight.zero_()
        k = min(conv.in_channels, in_channels)
        new.weight[:, :k] = conv.weight[:, :k]
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


def count_parameters(module: nn.Module, trainable_only=True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def weights_fingerprint(module: nn.Module) -> str:
    """Hash of every parameter and buffer; changes iff any stored value changes."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def pad_amount(size: int, multiple: int) -> int:
    return int(math.ceil(size / multiple) * multiple) - size
