"""Staged training: segmentation stages 1-5 and classification steps 1-3.

Each stage trains with Adam at ``lr`` until its stop rule fires, then
fine-tunes at ``finetune_lr`` for ``finetune_epochs`` more epochs, and
writes a fingerprinted checkpoint that the next stage consumes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentationPolicy
from .backbone import BackboneConfig, weights_fingerprint
from .checkpoint import atomic_save, load_checkpoint, save_checkpoint
from .clsnet import ClassificationNet, PretrainVariant, fuse
from .data import ClassificationDataset, SegmentationDataset, collate, epoch_order, seg_targets
from .harmonizer import DatasetManifest, load_manifest
from .losses import cce_loss, combined_seg_loss
from .metrics import accuracy, dice_counts
from .segnet import SegmentationNet, freeze, reflect_pad

log = logging.getLogger(__name__)

MODEL_TARGETS = ("segnet", "clsnet", "clsnet_pretrain_variant", "encoder_only")
SEG_INPUTS = ("none", "noise", "frozen_segnet")
FROZEN_PARTS = ("encoder", "decoder", "classifier")


class PlanError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class StopRule:
    kind: str = "convergence"  # or "fixed_epochs"
    patience: int = 5
    min_delta: float = 1e-4
    epochs: int = 0
    max_epochs: int = 100

    def validate(self, where=""):
        if self.kind == "convergence":
            if self.patience < 1 or self.max_epochs < 1:
                raise PlanError(f"{where}: convergence rule needs patience >= 1 and max_epochs >= 1")
        elif self.kind == "fixed_epochs":
            if self.epochs < 1:
                raise PlanError(f"{where}: fixed_epochs rule needs epochs >= 1")
        else:
            raise PlanError(f"{where}: unknown stop rule {self.kind!r}")


def convergence(patience=5, min_delta=1e-4, max_epochs=100) -> StopRule:
    return StopRule("convergence", patience, min_delta, 0, max_epochs)


def fixed_epochs(n: int) -> StopRule:
    return StopRule("fixed_epochs", epochs=n, max_epochs=n)


@dataclass
class DatasetSelector:
    manifest: str
    val_manifest: str | None = None
    exclude_sources: tuple = ()


@dataclass
class LossConfig:
    bce: float = 0.0
    cce: float = 0.0
    cls: float = 0.0


@dataclass
class StageSpec:
    name: str
    data: DatasetSelector | None = None
    model_target: str = "segnet"
    loss: LossConfig = field(default_factory=LossConfig)
    seg_input: str = "none"
    lr: float = 1e-4
    finetune_lr: float = 2e-5
    finetune_epochs: int = 2
    batch_size: int = 36
    crop_size: int = 224
    stop: StopRule = field(default_factory=convergence)
    frozen: tuple = ()
    seed: int = 0
    encoder_of: str = "segnet"
    steps_per_epoch: int | None = None
    substages: tuple = ()

    def validate(self):
        if self.substages:
            for s in self.substages:
                s.validate()
            return
        where = f"stage {self.name!r}"
        if self.data is None:
            raise PlanError(f"{where}: no dataset selector")
        if self.model_target not in MODEL_TARGETS:
            raise PlanError(f"{where}: unknown model target {self.model_target!r}")
        if self.seg_input not in SEG_INPUTS:
            raise PlanError(f"{where}: unknown seg input {self.seg_input!r}")
        if self.model_target in ("clsnet", "clsnet_pretrain_variant") and self.seg_input == "none":
            raise PlanError(f"{where}: classification backbone needs seg_input noise or frozen_segnet")
        if self.encoder_of == "clsnet" and self.seg_input == "none":
            raise PlanError(f"{where}: classification encoder needs seg_input noise or frozen_segnet")
        for part in self.frozen:
            if part not in FROZEN_PARTS:
                raise PlanError(f"{where}: unknown frozen part {part!r}")
        if self.lr <= 0 or self.finetune_lr <= 0 or self.finetune_epochs < 0:
            raise PlanError(f"{where}: learning rates must be positive")
        if self.batch_size < 1 or self.crop_size < 32 or self.crop_size % 32:
            raise PlanError(f"{where}: batch_size >= 1 and crop_size a multiple of 32 required")
        self.stop.validate(where)
        if self.model_target in ("segnet", "clsnet_pretrain_variant") and not (self.loss.bce or self.loss.cce):
            raise PlanError(f"{where}: segmentation target needs a BCE or CCE weight")

    def manifests(self) -> set:
        if self.substages:
            return set().union(*(s.manifests() for s in self.substages))
        names = {self.data.manifest}
        if self.data.val_manifest:
            names.add(self.data.val_manifest)
        return names

    def to_dict(self) -> dict:
        d = asdict(self)
        d["substages"] = [s.to_dict() for s in self.substages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"stage {d.get('name')!r}: unknown fields {sorted(unknown)}")
        if d.get("data") is not None:
            data = dict(d["data"])
            data["exclude_sources"] = tuple(data.get("exclude_sources", ()))
            d["data"] = DatasetSelector(**data)
        d["loss"] = LossConfig(**d.get("loss", {}))
        d["stop"] = StopRule(**d.get("stop", {}))
        d["frozen"] = tuple(d.get("frozen", ()))
        d["substages"] = tuple(cls.from_dict(s) for s in d.get("substages", ()))
        return cls(**d)


@dataclass
class CurriculumPlan:
    name: str
    stages: list
    category_count: int | None = None
    provenance: list = field(default_factory=list)

    def validate(self, manifests: dict | None = None):
        if not self.stages:
            raise PlanError(f"plan {self.name!r} has no stages")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise PlanError(f"plan {self.name!r}: duplicate stage names")
        for s in self.stages:
            s.validate()
            if manifests is not None:
                for m in sorted(s.manifests()):
                    if manifests.get(m) is None:
                        raise PlanError(f"stage {s.name!r}: manifest {m!r} not configured")

    def to_dict(self) -> dict:
        return {"name": self.name, "category_count": self.category_count,
                "stages": [s.to_dict() for s in self.stages], "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumPlan":
        return cls(d["name"], [StageSpec.from_dict(s) for s in d["stages"]],
                   d.get("category_count"), list(d.get("provenance", [])))


def _apply(spec: StageSpec, overrides: dict) -> StageSpec:
    ov = {k: v for k, v in overrides.items() if v is not None}
    stop = spec.stop
    if stop.kind == "convergence":
        stop = replace(stop, **{k: ov.pop(k) for k in ("patience", "max_epochs", "min_delta") if k in ov})
    for k in ("patience", "max_epochs", "min_delta"):
        ov.pop(k, None)
    if spec.finetune_epochs == 0:
        ov.pop("finetune_epochs", None)
    subs = tuple(_apply(s, overrides) for s in spec.substages)
    return replace(spec, stop=stop, substages=subs, **ov)


def default_segmentation_plan(manifests: dict | None = None, seg_batch_size=36, cls_batch_size=64,
                              **overrides) -> CurriculumPlan:
    """The five segmentation stages.

    Logical manifests: ``pannuke`` (stage 1 only), ``segmentation`` (combined
    nuclei datasets), ``tcga`` (cancer-type patches for encoder tuning),
    each with an optional ``<name>_val`` companion.
    """
    seg = DatasetSelector("segmentation", "segmentation_val", exclude_sources=("pannuke",))
    common = dict(batch_size=seg_batch_size)
    bce_only = StageSpec("stage2_bce", seg, "segnet", LossConfig(bce=1.0), **common)
    bce_cce = StageSpec("stage3_bce_cce", seg, "segnet", LossConfig(bce=1.0, cce=1.0), **common)
    stages = [
        StageSpec("stage1_pannuke_pretrain", DatasetSelector("pannuke", "pannuke_val"), "segnet",
                  LossConfig(bce=1.0, cce=1.0), **common),
        bce_only,
        bce_cce,
        StageSpec("stage4_encoder_tcga", DatasetSelector("tcga", "tcga_val"), "encoder_only",
                  LossConfig(cls=1.0), frozen=("decoder",), encoder_of="segnet", batch_size=cls_batch_size),
        StageSpec("stage5_repeat", substages=(replace(bce_only, name="stage5a_bce"),
                                              replace(bce_cce, name="stage5b_bce_cce"))),
    ]
    stages = [_apply(s, overrides) for s in stages]
    plan = CurriculumPlan("segmentation", stages)
    plan.validate(manifests)
    return plan


def default_classification_plan(category_count: int, manifests: dict | None = None, seg_batch_size=36,
                                cls_batch_size=64, **overrides) -> CurriculumPlan:
    """Steps 1-3 of the classification module.

    Step 1 runs the segmentation procedure on the decoder-augmented variant
    with noise in place of segmentation maps; step 2 swaps in the frozen
    segmentation module for 5 epochs; step 3 drops the decoder and trains
    the classifier on the ``classification`` manifest.
    """
    if category_count < 2:
        raise PlanError("classification plan needs at least 2 categories")
    seg = DatasetSelector("segmentation", "segmentation_val", exclude_sources=("pannuke",))
    variant = dict(model_target="clsnet_pretrain_variant", seg_input="noise", batch_size=seg_batch_size)
    step1 = StageSpec("step1_noise_pretrain", substages=(
        StageSpec("step1_1_pannuke", DatasetSelector("pannuke", "pannuke_val"),
                  loss=LossConfig(bce=1.0, cce=1.0), **variant),
        StageSpec("step1_2_bce", seg, loss=LossConfig(bce=1.0), **variant),
        StageSpec("step1_3_bce_cce", seg, loss=LossConfig(bce=1.0, cce=1.0), **variant),
        StageSpec("step1_4_encoder_tcga", DatasetSelector("tcga", "tcga_val"), "encoder_only",
                  LossConfig(cls=1.0), seg_input="noise", frozen=("decoder",), encoder_of="clsnet",
                  batch_size=cls_batch_size),
        StageSpec("step1_5a_bce", seg, loss=LossConfig(bce=1.0), **variant),
        StageSpec("step1_5b_bce_cce", seg, loss=LossConfig(bce=1.0, cce=1.0), **variant),
    ))
    step2 = StageSpec("step2_integrate_segmaps", seg, "clsnet_pretrain_variant", LossConfig(bce=1.0, cce=1.0),
                      seg_input="frozen_segnet", stop=fixed_epochs(5), finetune_epochs=0,
                      batch_size=seg_batch_size)
    step3 = StageSpec("step3_classifier", DatasetSelector("classification", "classification_val"), "clsnet",
                      LossConfig(cls=1.0), seg_input="frozen_segnet", batch_size=cls_batch_size)
    stages = [_apply(s, overrides) for s in (step1, step2, step3)]
    plan = CurriculumPlan("classification", stages, category_count)
    plan.validate(manifests)
    return plan


def monitor_validation(history, patience: int = 5, min_delta: float = 1e-4) -> str:
    """'stop' once ``patience`` epochs pass without beating the best value by > min_delta."""
    values = [float(v) for v in history]
    if not values:
        return "continue"
    best, since = values[0], 0
    for v in values[1:]:
        if v > best + min_delta:
            best, since = v, 0
        else:
            since += 1
    return "stop" if since >= patience else "continue"


# -- stage execution --------------------------------------------------------------

@dataclass
class StageContext:
    config: BackboneConfig
    manifests: dict  # logical name -> path
    out_dir: Path
    input_checkpoint: Path | None = None
    segnet_checkpoint: Path | None = None
    policy: AugmentationPolicy = field(default_factory=lambda: AugmentationPolicy.from_mode("extreme"))
    device: str = "cpu"
    categories: dict = field(default_factory=dict)  # manifest name -> category list
    num_workers: int = 0


@dataclass
class StageResult:
    name: str
    checkpoint: Path
    history: list
    parent: str | None
    frozen_fingerprints: dict


class _Models:
    """Everything a stage may touch, loaded from the input checkpoint chain."""

    def __init__(self, spec: StageSpec, ctx: StageContext, n_classes: int | None):
        cfg = ctx.config
        ck = load_checkpoint(ctx.input_checkpoint, expect=cfg) if ctx.input_checkpoint else None
        self.parent = ck.weights_fingerprint if ck else None
        states = ck.states if ck else {}
        self.extra = dict(ck.extra) if ck else {}
        self.categories = self.extra.get("categories")

        self.segnet = SegmentationNet(cfg)
        self.has_segnet = "segnet" in states or spec.model_target == "segnet" or (
            spec.model_target == "encoder_only" and spec.encoder_of == "segnet")
        if "segnet" in states:
            self.segnet.load_state_dict(states["segnet"])

        self.provider = None
        if spec.seg_input == "frozen_segnet":
            if "segnet_provider" in states:
                src = states["segnet_provider"]
            else:
                if ctx.segnet_checkpoint is None:
                    raise PlanError(f"stage {spec.name!r}: frozen segmentation checkpoint missing")
                src = load_checkpoint(ctx.segnet_checkpoint, expect=cfg).states.get("segnet")
                if src is None:
                    raise PlanError(f"{ctx.segnet_checkpoint}: no segmentation weights")
            self.provider = SegmentationNet(cfg)
            self.provider.load_state_dict(src)
            freeze(self.provider)
        elif "segnet_provider" in states:
            self.provider = SegmentationNet(cfg)
            self.provider.load_state_dict(states["segnet_provider"])
            freeze(self.provider)

        self.clsnet = None
        self.decoder = None
        uses_cls = spec.model_target in ("clsnet", "clsnet_pretrain_variant") or spec.encoder_of == "clsnet"
        if uses_cls or "clsnet" in states:
            head = n_classes or (states["clsnet"]["fc.weight"].shape[0] if "clsnet" in states else 2)
            self.clsnet = ClassificationNet(cfg, head)
            if "clsnet" in states:
                st = states["clsnet"]
                if st["fc.weight"].shape[0] != head:
                    # new downstream task: keep the backbone, start a fresh head
                    st = {k: v for k, v in st.items() if not k.startswith("fc.")}
                    self.clsnet.load_state_dict(st, strict=False)
                else:
                    self.clsnet.load_state_dict(st)
            if spec.model_target == "clsnet_pretrain_variant" or "pretrain_decoder" in states:
                self.decoder = PretrainVariant(self.clsnet).decoder
                if "pretrain_decoder" in states:
                    self.decoder.load_state_dict(states["pretrain_decoder"])

    def states(self, keep_decoder: bool) -> dict:
        out = {"segnet": self.segnet.state_dict()} if self.has_segnet else {}
        if self.provider is not None:
            out["segnet_provider"] = self.provider.state_dict()
        if self.clsnet is not None:
            out["clsnet"] = self.clsnet.state_dict()
        if self.decoder is not None and keep_decoder:
            out["pretrain_decoder"] = self.decoder.state_dict()
        return out


def _parts(spec: StageSpec, models: _Models, encoder_head: nn.Module | None) -> dict:
    """Named sub-modules of the network a stage trains."""
    if spec.model_target == "segnet":
        return {"encoder": models.segnet.encoder, "decoder": models.segnet.decoder}
    if spec.model_target == "encoder_only":
        net = models.segnet if spec.encoder_of == "segnet" else models.clsnet
        parts = {"encoder": net.encoder, "classifier": encoder_head}
        dec = models.segnet.decoder if spec.encoder_of == "segnet" else models.decoder
        if dec is not None:
            parts["decoder"] = dec
        return parts
    if spec.model_target == "clsnet_pretrain_variant":
        return {"encoder": models.clsnet.encoder, "decoder": models.decoder, "classifier": models.clsnet.fc}
    return {"encoder": models.clsnet.encoder, "classifier": models.clsnet.fc}


def _resolve_manifest(ctx: StageContext, name: str | None) -> DatasetManifest | None:
    if name is None:
        return None
    path = ctx.manifests.get(name)
    if path is None:
        return None
    return load_manifest(path)


class _Runner:
    def __init__(self, spec: StageSpec, ctx: StageContext):
        self.spec, self.ctx = spec, ctx
        self.device = torch.device(ctx.device)
        train_m = _resolve_manifest(ctx, spec.data.manifest)
        if train_m is None:
            raise PlanError(f"stage {spec.name!r}: manifest {spec.data.manifest!r} not configured")
        self.val_m = _resolve_manifest(ctx, spec.data.val_manifest)
        if spec.stop.kind == "convergence" and self.val_m is None:
            raise PlanError(f"stage {spec.name!r}: convergence stop rule needs validation manifest "
                            f"{spec.data.val_manifest!r}")
        self.is_cls_task = spec.model_target in ("clsnet", "encoder_only")
        n_classes = None
        if self.is_cls_task:
            if not train_m.is_classification:
                raise PlanError(f"stage {spec.name!r}: manifest {spec.data.manifest!r} has no category labels")
            self.categories = ctx.categories.get(spec.data.manifest) or train_m.categories()
            n_classes = len(self.categories)
        self.models = _Models(spec, ctx, n_classes if spec.model_target == "clsnet" else None)
        self.encoder_head = None
        if spec.model_target == "encoder_only":
            net = self.models.segnet if spec.encoder_of == "segnet" else self.models.clsnet
            self.encoder_head = nn.Linear(net.encoder.out_channels, n_classes)

        if self.is_cls_task:
            self.train_ds = ClassificationDataset(train_m, self.categories, ctx.policy, spec.crop_size, spec.seed)
            self.val_ds = ClassificationDataset(self.val_m, self.categories, None, None, spec.seed) if self.val_m else None
        else:
            ex = spec.data.exclude_sources
            self.train_ds = SegmentationDataset(train_m, ctx.policy, spec.crop_size, spec.seed, ex)
            self.val_ds = SegmentationDataset(self.val_m, None, None, spec.seed, ex) if self.val_m else None
        if len(self.train_ds) == 0:
            raise PlanError(f"stage {spec.name!r}: no training samples after filtering")

        self.parts = _parts(spec, self.models, self.encoder_head)
        for p in self.all_modules():
            p.to(self.device)
        for name in spec.frozen:
            if name in self.parts:
                for p in self.parts[name].parameters():
                    p.requires_grad_(False)
        self.params = [p for n, m in self.parts.items() if n not in spec.frozen for p in m.parameters()
                       if p.requires_grad]
        self.noise_gen = torch.Generator().manual_seed(spec.seed)

    def all_modules(self):
        mods = [m for m in self.parts.values()]
        if self.models.provider is not None:
            mods.append(self.models.provider)
        return mods

    def set_train(self, mode: bool):
        for name, m in self.parts.items():
            m.train(mode and name not in self.spec.frozen)

    def frozen_fingerprints(self) -> dict:
        fps = {n: weights_fingerprint(self.parts[n]) for n in self.spec.frozen if n in self.parts}
        if self.models.provider is not None:
            fps["segnet_provider"] = weights_fingerprint(self.models.provider)
        return fps

    # forward passes -----------------------------------------------------

    def _inputs(self, images):
        if self.spec.seg_input == "none" or (self.spec.model_target == "encoder_only" and self.spec.encoder_of == "segnet"):
            return images
        if self.spec.seg_input == "noise":
            return fuse(images, noise=True, generator=self.noise_gen)
        with torch.no_grad():
            seg = self.models.provider(images)
        return fuse(images, seg)

    def _seg_net(self):
        if self.spec.model_target == "segnet":
            return self.models.segnet
        return PretrainVariant(self.models.clsnet, self.models.decoder)

    def _logits(self, x):
        if self.spec.model_target == "encoder_only":
            enc = self.parts["encoder"]
            feats, _ = enc(x)
            return self.encoder_head(torch.nn.functional.adaptive_avg_pool2d(feats, 1).flatten(1))
        return self.models.clsnet.logits(x)

    def loss(self, images, targets):
        x = self._inputs(images)
        if self.is_cls_task:
            probs = torch.softmax(self._logits(x), dim=1)
            onehot = torch.nn.functional.one_hot(targets, probs.shape[1]).to(probs.dtype)
            return self.spec.loss.cls * cce_loss(onehot, probs)
        out = self._seg_net()(x)
        return combined_seg_loss(seg_targets(targets), out, (self.spec.loss.bce, self.spec.loss.cce))

    @torch.no_grad()
    def validate(self) -> float | None:
        if self.val_ds is None:
            return None
        self.set_train(False)
        if self.is_cls_task:
            preds, labels = [], []
            for i in range(len(self.val_ds)):
                img, y = self.val_ds[i]
                x, _, _ = reflect_pad(img[None].to(self.device))
                preds.append(int(self._logits(self._inputs(x)).argmax(1)))
                labels.append(y)
            return accuracy(preds, labels)
        num = den = 0
        for i in range(len(self.val_ds)):
            img, lab = self.val_ds[i]
            x, h, w = reflect_pad(img[None].to(self.device))
            out = self._seg_net()(self._inputs(x)).crop(h, w)
            n, d = dice_counts(out.nuclei_prob[0, 0].cpu().numpy() >= 0.5, lab.numpy() > 0)
            num, den = num + n, den + d
        return 1.0 if den == 0 else num / den

    def run_epoch(self, epoch: int, optimizer) -> float:
        self.set_train(True)
        self.train_ds.set_epoch(epoch)
        # dropout, drop-path and noise inputs replay identically after a resume
        epoch_seed = int(np.random.SeedSequence([self.spec.seed, epoch]).generate_state(1)[0])
        torch.manual_seed(epoch_seed)
        self.noise_gen.manual_seed(epoch_seed)
        order = epoch_order(self.spec.seed, epoch, len(self.train_ds))
        bs = self.spec.batch_size
        batches = [order[i : i + bs] for i in range(0, len(order), bs)]
        if self.spec.steps_per_epoch:
            batches = batches[: self.spec.steps_per_epoch]
        total, count = 0.0, 0
        for idx in batches:
            images, targets = collate([self.train_ds[int(i)] for i in idx])
            images, targets = images.to(self.device), targets.to(self.device)
            loss = self.loss(images, targets)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite loss in stage {self.spec.name!r} epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        return total / max(count, 1)

    def trainable_state(self) -> dict:
        st = {n: m.state_dict() for n, m in self.parts.items()}
        if self.models.decoder is not None and "decoder" not in st:
            st["decoder"] = self.models.decoder.state_dict()
        return st


def _stop(spec: StageSpec, history: list) -> bool:
    main = [h for h in history if h["phase"] == "main"]
    if spec.stop.kind == "fixed_epochs":
        return len(main) >= spec.stop.epochs
    if len(main) >= spec.stop.max_epochs:
        return True
    vals = [h["val_metric"] for h in main]
    return monitor_validation(vals, spec.stop.patience, spec.stop.min_delta) == "stop"


def run_stage(spec: StageSpec, ctx: StageContext, resume: bool = False) -> StageResult:
    """Train one stage (or a composite of sub-stages) and write its checkpoint."""
    spec.validate()
    out = Path(ctx.out_dir) / spec.name
    out.mkdir(parents=True, exist_ok=True)
    if spec.substages:
        history, ck, parent, frozen = [], ctx.input_checkpoint, None, {}
        for sub in spec.substages:
            sub_ctx = replace(ctx, out_dir=out, input_checkpoint=ck)
            res = run_stage(sub, sub_ctx, resume)
            history += [dict(h, substage=sub.name) for h in res.history]
            parent = parent or res.parent
            frozen[sub.name] = res.frozen_fingerprints
            ck = res.checkpoint
        return StageResult(spec.name, ck, history, parent, frozen)

    final = out / "final.pt"
    if resume and final.exists():
        meta = load_checkpoint(final).header
        return StageResult(spec.name, final, meta.get("history", []), meta.get("parent"),
                           meta.get("frozen_fingerprints", {}))

    torch.manual_seed(spec.seed)  # fresh heads/decoders initialise reproducibly
    r = _Runner(spec, ctx)
    before = r.frozen_fingerprints()
    optimizer = torch.optim.Adam(r.params, lr=spec.lr)
    history: list = []
    last = out / "last.pt"
    metrics_log = out / "metrics.jsonl"
    if resume and last.exists():
        state = torch.load(last, map_location="cpu", weights_only=False)
        for name, st in state["parts"].items():
            target = r.parts[name] if name in r.parts else r.models.decoder
            target.load_state_dict(st)
        optimizer.load_state_dict(state["optimizer"])
        history = state["history"]
        log.info("resuming %s at epoch %d", spec.name, len(history))
    elif metrics_log.exists():
        metrics_log.unlink()

    while True:
        main_done = _stop(spec, history)
        n_ft = sum(1 for h in history if h["phase"] == "finetune")
        if main_done and n_ft >= spec.finetune_epochs:
            break
        phase = "finetune" if main_done else "main"
        lr = spec.finetune_lr if phase == "finetune" else spec.lr
        for g in optimizer.param_groups:
            g["lr"] = lr
        epoch = len(history)
        try:
            train_loss = r.run_epoch(epoch, optimizer)
        except TrainingAborted as exc:
            hint = f"; last good checkpoint: {last}" if last.exists() else ""
            raise TrainingAborted(f"{exc}{hint}") from exc
        val = r.validate()
        if val is None and spec.stop.kind == "convergence":
            raise PlanError(f"stage {spec.name!r}: validation metric unavailable for the stop rule")
        rec = {"stage": spec.name, "epoch": epoch, "phase": phase, "lr": lr,
               "train_loss": train_loss, "val_metric": val}
        history.append(rec)
        with open(metrics_log, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        atomic_save({"parts": r.trainable_state(), "optimizer": optimizer.state_dict(), "history": history}, last)
        log.info("%s epoch %d (%s) loss %.4f val %s", spec.name, epoch, phase, train_loss, val)

    after = r.frozen_fingerprints()
    if after != before:
        changed = sorted(k for k in before if before[k] != after.get(k))
        raise TrainingAborted(f"stage {spec.name!r} modified frozen parts {changed}")

    keep_decoder = spec.model_target != "clsnet"
    extra = dict(r.models.extra)
    if spec.model_target == "clsnet":
        extra["categories"] = list(r.categories)
    meta = dict(stage=spec.name, parent=r.models.parent, frozen_fingerprints=after, history=history,
                spec=spec.to_dict())
    save_checkpoint(final, ctx.config, r.models.states(keep_decoder), extra, **meta)
    return StageResult(spec.name, final, history, r.models.parent, after)


def run_plan(plan: CurriculumPlan, ctx: StageContext, resume: bool = False) -> list:
    """Run every stage, chaining checkpoints; appends to ``plan.provenance``."""
    plan.validate(ctx.manifests)
    results = []
    ck = ctx.input_checkpoint
    for spec in plan.stages:
        res = run_stage(spec, replace(ctx, input_checkpoint=ck), resume)
        plan.provenance.append({"stage": spec.name, "input": str(ck) if ck else None,
                                "parent_fingerprint": res.parent, "output": str(res.checkpoint)})
        results.append(res)
        ck = res.checkpoint
    return results
