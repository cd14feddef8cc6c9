"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker with its runtime budget; the
terminal summary prints one PASS/FAIL line per criterion.
"""
import math
import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from histomorph.augment import AugmentationPolicy, AugmentParams, augment, sample_params
from histomorph.backbone import Encoder, count_parameters, get_config
from histomorph.checkpoint import load_checkpoint
from histomorph.clsnet import FUSED_CHANNELS, build_classification_model, extract_features, fuse
from histomorph.curriculum import (StageContext, default_classification_plan, default_segmentation_plan,
                                   fixed_epochs, run_plan)
from histomorph.data import seg_targets
from histomorph.harmonizer import (DatasetManifest, HarmonizedSample, ManifestEntry, harmonize, read_sample,
                                   split_stratified, write_sample)
from histomorph.losses import bce_loss, cce_loss, combined_seg_loss
from histomorph.metrics import dice_score, panoptic_quality
from histomorph.segnet import build_segmentation_model, forward_segmentation, freeze
from histomorph.synthetic import classification_image, segmentation_sample

from conftest import calibrate_bn, to_batch
from oracles import brute_force_pq, random_instance_pair

criterion = pytest.mark.criterion


@criterion(1, "metric oracles", 1)
def test_metric_oracles():
    assert abs(bce_loss([1.0, 0.0], [0.5, 0.5]).item() - math.log(2)) <= 1e-6

    onehot = torch.eye(7)
    uniform = torch.full((7, 7), 1 / 7)
    assert abs(cce_loss(onehot, uniform).item() - math.log(7)) <= 1e-6

    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    pred = np.zeros((4, 4), bool)
    pred[1:3] = True  # half of each mask overlaps
    assert dice_score(pred, gt) == 0.5

    gt_inst = np.zeros((10, 10), int)
    gt_inst[:, :8] = 1
    pred_inst = np.ones((10, 10), int)  # IoU 80 / 100
    assert abs(panoptic_quality(pred_inst, gt_inst)["binary_pq"] - 0.8) <= 1e-9


@criterion(2, "PQ equals exhaustive matching on 200 maps", 30)
def test_pq_brute_force_equivalence():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        pred, gt = random_instance_pair(rng, max_instances=6)
        assert pred.shape[0] <= 64 and pred.shape[1] <= 64
        assert len(np.unique(gt)) - 1 <= 6
        expected, _ = brute_force_pq(pred, gt)
        got = panoptic_quality(pred, gt)["binary_pq"]
        assert got == expected or (np.isnan(got) and np.isnan(expected))


@criterion(3, "fully convolutional shapes on the tiny preset", 120)
def test_fully_convolutional_shapes(tiny):
    torch.manual_seed(0)
    seg = calibrate_bn(build_segmentation_model(tiny), torch.rand(2, 3, 64, 64))
    cls = calibrate_bn(build_classification_model(tiny, 4), torch.rand(2, FUSED_CHANNELS, 64, 64))
    widths = set()
    for h, w in [(64, 64), (224, 224), (224, 320), (1824, 1824)]:
        x = torch.rand(1, 3, h, w)
        with torch.no_grad():
            out = forward_segmentation(seg, x)
            assert out.nuclei_prob.shape == (1, 1, h, w)
            assert out.type_prob.shape == (1, 7, h, w)
            assert (out.type_prob.sum(1) - 1).abs().max().item() <= 1e-5
            widths.add(extract_features(cls, fuse(x, out)).shape[1])
    assert widths == {tiny.final_width}


@criterion(4, "reference preset topology and size", 300)
def test_reference_topology():
    cfg = get_config("reference")
    enc = Encoder(cfg).eval()
    with torch.no_grad():
        out, skips = enc(torch.rand(1, 3, 64, 64))
    assert tuple(skips[name].shape[1] for name, _, _ in cfg.skip_taps) == (192, 288, 480)
    assert out.shape[1] == 2560
    del enc
    total = count_parameters(build_segmentation_model(cfg)) + count_parameters(build_classification_model(cfg, 32))
    assert abs(total - 89e6) <= 0.15 * 89e6, f"{total / 1e6:.2f}M parameters"


@criterion(5, "analytic gradients match finite differences", 300)
def test_gradient_check(tiny):
    torch.manual_seed(0)
    rng = np.random.default_rng(5)
    samples = [harmonize(segmentation_sample(rng, 64)) for _ in range(2)]
    x = to_batch([s.image for s in samples]).double()
    targets = {k: v.double() for k, v in seg_targets(torch.from_numpy(np.stack([s.label_plane for s in samples]))).items()}
    model = build_segmentation_model(tiny).double()
    calibrate_bn(model, x)

    def loss():
        return combined_seg_loss(targets, model(x))

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss().backward()
    sizes = np.array([p.numel() for p in params], float)
    picks = rng.choice(len(params), size=120, p=sizes / sizes.sum())
    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            p = params[k]
            i = int(rng.integers(p.numel()))
            flat = p.view(-1)
            analytic = p.grad.view(-1)[i].item()
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)
            worst = max(worst, err)
    assert len(picks) >= 100
    assert worst < 1e-2, f"max relative error {worst:.2e}"


@criterion(6, "tiny preset overfits small segmentation and classification sets", 600)
def test_overfit(tiny):
    rng = np.random.default_rng(6)

    torch.manual_seed(0)
    samples = [harmonize(segmentation_sample(rng, 64)) for _ in range(4)]
    x = to_batch([s.image for s in samples])
    labels = torch.from_numpy(np.stack([s.label_plane for s in samples]))
    targets = seg_targets(labels)
    gt = (labels > 0).numpy()
    seg = build_segmentation_model(tiny)
    opt = torch.optim.Adam(seg.parameters(), lr=3e-3)
    dice = 0.0
    for step in range(1, 501):
        seg.train()
        opt.zero_grad()
        combined_seg_loss(targets, seg(x)).backward()
        opt.step()
        if step % 25 == 0:
            seg.eval()
            with torch.no_grad():
                pred = seg(x).nuclei_prob[:, 0].numpy() > 0.5
            dice = dice_score(pred, gt)
            if dice > 0.95:
                break
    assert dice > 0.95, f"Dice {dice:.3f} after {step} steps"

    torch.manual_seed(1)
    cats = np.repeat(np.arange(4), 8)
    images = to_batch([classification_image(rng, int(c), 64) for c in cats])
    provider = freeze(calibrate_bn(build_segmentation_model(tiny), images))
    with torch.no_grad():
        fused = fuse(images, provider(images))
    y = torch.from_numpy(cats)
    cls = build_classification_model(tiny, 4)
    opt = torch.optim.Adam(cls.parameters(), lr=1e-3)
    acc = 0.0
    for step in range(1, 1001):
        cls.train()
        opt.zero_grad()
        F.cross_entropy(cls.logits(fused), y).backward()
        opt.step()
        if step % 25 == 0:
            cls.eval()
            with torch.no_grad():
                acc = (cls(fused).probs.argmax(1) == y).float().mean().item()
            if acc == 1.0:
                break
    assert acc == 1.0, f"train accuracy {acc:.3f} after {step} steps"


def _leaves(stage):
    return [leaf for s in stage.substages for leaf in _leaves(s)] if stage.substages else [stage]


@criterion(7, "curriculum structure and frozen parts", 600)
def test_curriculum_integrity(tiny, workspace, tmp_path):
    seg_plan = default_segmentation_plan()
    s = seg_plan.stages
    assert len(s) == 5
    assert [x.name.split("_")[0] for x in s] == ["stage1", "stage2", "stage3", "stage4", "stage5"]
    assert (s[1].loss.bce, s[1].loss.cce) == (1.0, 0.0)
    assert s[2].loss.bce == s[2].loss.cce > 0
    assert s[3].model_target == "encoder_only" and s[3].frozen == ("decoder",)
    assert [(x.loss.bce, x.loss.cce) for x in s[4].substages] == [(1.0, 0.0), (1.0, 1.0)]

    step1, step2, step3 = default_classification_plan(4).stages
    assert all(leaf.seg_input == "noise" for leaf in _leaves(step1))
    assert step2.seg_input == "frozen_segnet" and step2.stop == fixed_epochs(5)
    assert step3.model_target == "clsnet" and step3.seg_input == "frozen_segnet"

    names = ("pannuke", "pannuke_val", "segmentation", "segmentation_val", "tcga", "tcga_val",
             "classification", "classification_val")
    manifests = {n: workspace / n / "manifest.json" for n in names}
    ov = dict(seg_batch_size=4, cls_batch_size=4, crop_size=64, finetune_epochs=0, max_epochs=1,
              patience=1, steps_per_epoch=2)
    ctx = StageContext(tiny, manifests, tmp_path / "seg", policy=AugmentationPolicy.from_mode("moderate"))
    seg_results = run_plan(default_segmentation_plan(manifests, **ov), ctx)
    by_name = {r.name: r for r in seg_results}

    stage3 = load_checkpoint(by_name["stage3_bce_cce"].checkpoint).states["segnet"]
    stage4 = load_checkpoint(by_name["stage4_encoder_tcga"].checkpoint).states["segnet"]
    dec = [k for k in stage3 if k.startswith("decoder.")]
    assert dec and all(torch.equal(stage3[k], stage4[k]) for k in dec)
    assert by_name["stage4_encoder_tcga"].frozen_fingerprints

    seg_final = seg_results[-1].checkpoint
    cls_ctx = StageContext(tiny, manifests, tmp_path / "cls", segnet_checkpoint=seg_final,
                           policy=AugmentationPolicy.from_mode("moderate"))
    cls_plan = default_classification_plan(4, manifests, **ov)
    cls_results = run_plan(cls_plan, cls_ctx)
    segnet = load_checkpoint(seg_final).states["segnet"]
    for r in cls_results[1:]:
        provider = load_checkpoint(r.checkpoint).states["segnet_provider"]
        assert all(torch.equal(segnet[k], provider[k]) for k in segnet)
        assert r.frozen_fingerprints
    assert len([h for h in cls_results[1].history if h["phase"] == "main"]) == 5
    final = load_checkpoint(cls_results[-1].checkpoint)
    assert "pretrain_decoder" not in final.states and final.extra["categories"]


@criterion(8, "augmentation stays inside policy ranges", 60)
def test_augmentation_bounds(rng):
    for mode, scale in (("extreme", 1.0), ("moderate", 0.5)):
        policy = AugmentationPolicy.from_mode(mode)
        for _ in range(5000):
            p = sample_params(policy, rng)
            assert 1 - 0.2 * scale <= p.scale <= 1 + 0.2 * scale
            assert 1 - 0.1 * scale <= p.aspect <= 1 + 0.1 * scale
            assert 0 <= p.rotation <= 360 * scale
            assert 1 - scale <= p.sharpness <= 1 + scale
            assert 1 - 0.5 * scale <= p.brightness <= 1 + 0.5 * scale
            assert -0.1 * scale <= p.hue_shift <= 0.1 * scale
            assert 1 - 0.7 * scale <= p.contrast <= 1 + 0.7 * scale
            assert 1 - 0.3 * scale <= p.saturation <= 1 + 0.3 * scale
            assert 0 <= p.noise_sigma <= 0.04 * scale

    h = harmonize(segmentation_sample(rng, 96))
    off = augment(h.image, h.label_plane, AugmentationPolicy.from_mode("off"), rng)
    assert np.array_equal(off.image, h.image.astype(np.float32) / 255)
    assert np.array_equal(off.label_plane, h.label_plane)

    rot = augment(h.image, h.label_plane, AugmentationPolicy.from_mode("extreme"), params=AugmentParams(rotation=90.0))
    assert np.array_equal(np.bincount(rot.label_plane.ravel(), minlength=8),
                          np.bincount(h.label_plane.ravel(), minlength=8))


@criterion(9, "harmonized samples round-trip and splits never leak patients", 60)
def test_harmonizer_round_trip_and_split(tmp_path):
    rng = np.random.default_rng(9)
    for i in range(100):
        hgt, wid = rng.integers(1, 65, size=2)
        sample = HarmonizedSample(rng.integers(0, 256, (hgt, wid, 3), dtype=np.uint8),
                                  rng.integers(0, 8, (hgt, wid), dtype=np.uint8),
                                  f"patient-{i}", "synthetic", "20x")
        back = read_sample(write_sample(sample, tmp_path / f"s{i}.png"))
        assert np.array_equal(back.image, sample.image) and np.array_equal(back.label_plane, sample.label_plane)
        assert back == sample

    for seed in range(50):
        r = np.random.default_rng(seed)
        counts = {f"p{k}": int(r.integers(1, 12)) for k in range(int(r.integers(3, 25)))}
        manifest = DatasetManifest([ManifestEntry(f"{p}_{j}.png", patient_id=p)
                                    for p, n in counts.items() for j in range(n)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            parts = split_stratified(manifest, seed=seed)
        patients = [{e.patient_id for e in part.entries} for part in parts]
        assert not (patients[0] & patients[1] or patients[0] & patients[2] or patients[1] & patients[2])
        assert sum(len(p.entries) for p in parts) == len(manifest.entries)


@criterion(10, "padded inference equals inference on pre-padded input", 120)
def test_pad_and_crop_equivalence(tiny):
    torch.manual_seed(10)
    model = calibrate_bn(build_segmentation_model(tiny), torch.rand(2, 3, 64, 64))
    x = torch.rand(1, 3, 1812, 1812)
    with torch.no_grad():
        padded_run = forward_segmentation(model, x, pad=True)
        total = 1824 - 1812
        pre = np.pad(x.numpy(), ((0, 0), (0, 0), (0, total), (0, total)), mode="reflect")
        direct = model(torch.from_numpy(pre)).crop(1812, 1812)
    assert padded_run.type_prob.shape[-2:] == (1812, 1812)
    diff = (padded_run.stacked() - direct.stacked()).abs().max().item()
    assert diff <= 1e-5, f"max difference {diff:.2e}"
