import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histomorph.augment import (AugmentationPolicy, AugmentParams, PolicyError, augment, crop_random,
                                params_within, sample_params)
from histomorph.synthetic import segmentation_sample
from histomorph.harmonizer import harmonize


@pytest.fixture
def pair(rng):
    h = harmonize(segmentation_sample(rng, 96))
    return h.image, h.label_plane


def test_mode_off_is_identity(pair, rng):
    img, lab = pair
    out = augment(img, lab, AugmentationPolicy.from_mode("off"), rng)
    assert np.array_equal(out.image, img.astype(np.float32) / 255)
    assert np.array_equal(out.label_plane, lab)


def test_moderate_is_half_of_extreme():
    e, m = AugmentationPolicy.from_mode("extreme"), AugmentationPolicy.from_mode("moderate")
    assert m.rotation_deg == e.rotation_deg / 2 and m.noise_std == e.noise_std / 2


def test_right_angle_rotation_preserves_label_counts(pair):
    img, lab = pair
    policy = AugmentationPolicy.from_mode("extreme")
    for k, angle in enumerate((90.0, 180.0, 270.0), start=1):
        out = augment(img, lab, policy, params=AugmentParams(rotation=angle))
        assert np.array_equal(out.label_plane, np.rot90(lab, k))
        assert np.array_equal(np.bincount(out.label_plane.ravel(), minlength=8),
                              np.bincount(lab.ravel(), minlength=8))


def test_brightness_raises_mean_only(pair):
    img, lab = pair
    out = augment(img, lab, AugmentationPolicy.from_mode("extreme"), params=AugmentParams(brightness=1.5))
    assert out.image.mean() > img.mean() / 255
    assert np.array_equal(out.label_plane, lab)


def test_label_values_stay_in_range(pair, rng):
    img, lab = pair
    policy = AugmentationPolicy.from_mode("extreme")
    for _ in range(20):
        out = augment(img, lab, policy, rng)
        assert out.image.shape[:2] == out.label_plane.shape
        assert set(np.unique(out.label_plane)) <= set(range(8))
        assert 0 <= out.image.min() and out.image.max() <= 1


def test_augment_is_seeded(pair):
    img, lab = pair
    p = AugmentationPolicy.from_mode("extreme")
    a = augment(img, lab, p, np.random.default_rng(5))
    b = augment(img, lab, p, np.random.default_rng(5))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.label_plane, b.label_plane)


def test_out_of_range_policy_names_field():
    with pytest.raises(PolicyError, match="brightness_frac"):
        AugmentationPolicy.from_mode("extreme", brightness_frac=0.9)
    with pytest.raises(PolicyError, match="mode"):
        AugmentationPolicy.from_mode("wild")


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["extreme", "moderate"]), st.integers(0, 2**32 - 1))
def test_sampled_params_within_policy(mode, seed):
    policy = AugmentationPolicy.from_mode(mode)
    rng = np.random.default_rng(seed)
    assert all(params_within(sample_params(policy, rng), policy) for _ in range(50))


def test_crop_large_input(rng):
    img = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
    lab = np.arange(512 * 512).reshape(512, 512) % 8
    out = crop_random(img, lab, 224, rng)
    assert out.image.shape == (224, 224, 3) and out.label_plane.shape == (224, 224)
    # alignment: find the crop offset from the label pattern, then compare image pixels
    ys, xs = np.nonzero((img[..., 0] == out.image[0, 0, 0]) & (lab == out.label_plane[0, 0]))
    assert any(np.array_equal(img[y : y + 224, x : x + 224], out.image) and
               np.array_equal(lab[y : y + 224, x : x + 224], out.label_plane) for y, x in zip(ys, xs))


def test_crop_exact_size_is_full_image(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    assert np.array_equal(crop_random(img, None, 224, rng).image, img)


def test_crop_small_input_reflect_padded(rng):
    img = rng.integers(0, 256, (100, 100, 3), dtype=np.uint8)
    lab = rng.integers(0, 8, (100, 100)).astype(np.uint8)
    out = crop_random(img, lab, 224, rng)
    assert out.image.shape == (224, 224, 3)
    assert out.label_plane.max() <= 7
    padded = np.pad(lab, ((0, 124), (0, 124)), mode="reflect")
    assert np.array_equal(out.label_plane, padded)
