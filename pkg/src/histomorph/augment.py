"""Randomized geometric + photometric augmentations for image/label pairs.

Geometric transforms (rescale, aspect, rotation) move image and label
plane together; photometric transforms and noise touch the image only.
Every draw comes from an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import cv2
import numpy as np

MODES = ("extreme", "moderate", "off")

# upper bounds allowed for any policy (the extreme defaults)
_BOUNDS = dict(
    rescale_frac=0.20,
    aspect_frac=0.10,
    rotation_deg=360.0,
    sharpness_factor=1.0,  # blend factor drawn from [1 - s, 1 + s]; 1.0 means up to 2x
    brightness_frac=0.50,
    hue_frac=0.10,
    contrast_frac=0.70,
    saturation_frac=0.30,
    noise_std=0.04,
)


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationPolicy:
    mode: str = "extreme"
    rescale_frac: float = 0.20
    aspect_frac: float = 0.10
    rotation_deg: float = 360.0
    sharpness_factor: float = 1.0
    brightness_frac: float = 0.50
    hue_frac: float = 0.10
    contrast_frac: float = 0.70
    saturation_frac: float = 0.30
    noise_std: float = 0.04

    @classmethod
    def from_mode(cls, mode: str, **overrides) -> "AugmentationPolicy":
        if mode not in MODES:
            raise PolicyError(f"mode: unknown augmentation mode {mode!r}")
        scale = {"extreme": 1.0, "moderate": 0.5, "off": 0.0}[mode]
        base = {k: v * scale for k, v in _BOUNDS.items()}
        base.update(overrides)
        policy = cls(mode=mode, **base)
        policy.validate()
        return policy

    def validate(self) -> None:
        if self.mode not in MODES:
            raise PolicyError(f"mode: unknown augmentation mode {self.mode!r}")
        for name, bound in _BOUNDS.items():
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 <= v <= bound:
                raise PolicyError(f"{name}: {v!r} outside [0, {bound}]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    aspect: float = 1.0
    rotation: float = 0.0
    sharpness: float = 1.0
    brightness: float = 1.0
    hue_shift: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    noise_sigma: float = 0.0


IDENTITY = AugmentParams()


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentParams:
    if policy.mode == "off":
        return IDENTITY
    u = rng.uniform
    p = policy
    return AugmentParams(
        scale=u(1 - p.rescale_frac, 1 + p.rescale_frac),
        aspect=u(1 - p.aspect_frac, 1 + p.aspect_frac),
        rotation=u(0.0, p.rotation_deg),
        sharpness=u(1 - p.sharpness_factor, 1 + p.sharpness_factor),
        brightness=u(1 - p.brightness_frac, 1 + p.brightness_frac),
        hue_shift=u(-p.hue_frac, p.hue_frac),
        contrast=u(1 - p.contrast_frac, 1 + p.contrast_frac),
        saturation=u(1 - p.saturation_frac, 1 + p.saturation_frac),
        noise_sigma=u(0.0, p.noise_std),
    )


def params_within(params: AugmentParams, policy: AugmentationPolicy) -> bool:
    p = policy
    checks = [
        abs(params.scale - 1) <= p.rescale_frac,
        abs(params.aspect - 1) <= p.aspect_frac,
        0 <= params.rotation <= p.rotation_deg,
        abs(params.sharpness - 1) <= p.sharpness_factor,
        abs(params.brightness - 1) <= p.brightness_frac,
        abs(params.hue_shift) <= p.hue_frac,
        abs(params.contrast - 1) <= p.contrast_frac,
        abs(params.saturation - 1) <= p.saturation_frac,
        0 <= params.noise_sigma <= p.noise_std,
    ]
    return all(checks)


@dataclass
class AugmentedPair:
    image: np.ndarray  # H' x W' x 3 float32 in [0, 1]
    label_plane: np.ndarray | None = None


# -- geometric ---------------------------------------------------------------

def _resize(image, label, sx, sy):
    h, w = image.shape[:2]
    nw, nh = max(1, int(round(w * sx))), max(1, int(round(h * sy)))
    if (nw, nh) == (w, h):
        return image, label
    image = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    if label is not None:
        label = cv2.resize(label, (nw, nh), interpolation=cv2.INTER_NEAREST)
    return image, label


def _rotate(image, label, angle):
    quarter, rest = divmod(float(angle) % 360.0, 90.0)
    k = int(quarter)
    if k:
        # np.rot90 is counter-clockwise, matching cv2's positive angle
        image = np.ascontiguousarray(np.rot90(image, k))
        if label is not None:
            label = np.ascontiguousarray(np.rot90(label, k))
    if rest:
        h, w = image.shape[:2]
        m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), rest, 1.0)
        image = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
        if label is not None:
            label = cv2.warpAffine(label, m, (w, h), flags=cv2.INTER_NEAREST,
                                   borderMode=cv2.BORDER_REFLECT_101)
    return image, label


# -- photometric (float RGB in [0, 1]) -------------------------------------------

_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def _gray(img):
    return img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def adjust_sharpness(img, factor):
    blurred = cv2.filter2D(img, -1, _SMOOTH, borderType=cv2.BORDER_REFLECT_101)
    return np.clip(blurred + factor * (img - blurred), 0, 1)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0, 1)


def adjust_hue(img, shift):
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)  # float32 hue in degrees
    hsv[..., 0] = np.mod(hsv[..., 0] + 360.0 * shift, 360.0)
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0, 1)


def adjust_contrast(img, factor):
    mean = float(_gray(img).mean())
    return np.clip(mean + factor * (img - mean), 0, 1)


def adjust_saturation(img, factor):
    g = _gray(img)[..., None]
    return np.clip(g + factor * (img - g), 0, 1)


def augment(image, label_plane=None, policy: AugmentationPolicy | None = None,
            rng: np.random.Generator | None = None, params: AugmentParams | None = None) -> AugmentedPair:
    """Augment an 8-bit RGB image (and optional label plane).

    ``params`` forces specific transform strengths instead of sampling.
    """
    policy = policy or AugmentationPolicy.from_mode("extreme")
    policy.validate()
    if params is None:
        if rng is None:
            raise ValueError("augment needs an explicit rng (or forced params)")
        params = sample_params(policy, rng)
    img = np.asarray(image).astype(np.float32) / 255.0
    label = None if label_plane is None else np.asarray(label_plane).astype(np.uint8)
    if policy.mode == "off":
        return AugmentedPair(img, label)
    p = params

    img, label = _resize(img, label, p.scale * p.aspect, p.scale)
    img, label = _rotate(img, label, p.rotation)

    if p.sharpness != 1.0:
        img = adjust_sharpness(img, p.sharpness)
    if p.brightness != 1.0:
        img = adjust_brightness(img, p.brightness)
    if p.hue_shift != 0.0:
        img = adjust_hue(img, p.hue_shift)
    if p.contrast != 1.0:
        img = adjust_contrast(img, p.contrast)
    if p.saturation != 1.0:
        img = adjust_saturation(img, p.saturation)
    if p.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        img = np.clip(img + rng.normal(0.0, p.noise_sigma, img.shape).astype(np.float32), 0, 1)
    return AugmentedPair(np.ascontiguousarray(img, dtype=np.float32), label)


def crop_random(image, label_plane=None, size: int = 224, rng: np.random.Generator | None = None) -> AugmentedPair:
    """Aligned size x size crop; undersized inputs are reflect-padded first."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
        if label_plane is not None:
            label_plane = np.pad(np.asarray(label_plane), ((0, ph), (0, pw)),
                                 mode="reflect" if min(h, w) > 1 else "edge")
        h, w = image.shape[:2]
    rng = rng or np.random.default_rng()
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    img = image[y : y + size, x : x + size]
    lab = None if label_plane is None else np.asarray(label_plane)[y : y + size, x : x + size]
    return AugmentedPair(img, lab)


def policy_fields() -> list:
    return [f.name for f in fields(AugmentationPolicy)]
