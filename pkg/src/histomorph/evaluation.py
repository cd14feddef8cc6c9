"""Evaluation protocols, arbitrary-size inference and feature export."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .clsnet import ClassificationNet, extract_features, forward_classification, fuse
from .harmonizer import CELL_TYPE_NAMES, DatasetManifest, read_rgb, read_sample
from .metrics import (PQStats, balanced_accuracy, confusion_matrix, dice_counts, extract_instances,
                      instance_types, per_category_recall, pq_stats, summarize_pq, accuracy)
from .segnet import SegmentationNet, SegmentationOutput, forward_segmentation, freeze
from . import plotting

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 -> 1 x 3 x H x W float in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()[None] / 255.0


@dataclass
class Pipeline:
    """Frozen segmentation net plus (optionally) the classifier, restored from one checkpoint."""

    segnet: SegmentationNet
    clsnet: ClassificationNet | None
    categories: list | None
    fingerprint: str
    weights_fingerprint: str

    @classmethod
    def load(cls, path) -> "Pipeline":
        ck = load_checkpoint(path)
        cfg = ck.config
        key = "segnet_provider" if "segnet_provider" in ck.states else "segnet"
        if key not in ck.states:
            raise CheckpointError(f"{path}: no segmentation weights")
        seg = SegmentationNet(cfg)
        ck.load_into(key, seg)
        freeze(seg)
        clsnet = None
        categories = ck.extra.get("categories")
        if "clsnet" in ck.states and categories:
            clsnet = ClassificationNet(cfg, len(categories))
            ck.load_into("clsnet", clsnet)
            freeze(clsnet)
        return cls(seg, clsnet, categories, ck.fingerprint, ck.weights_fingerprint)

    @torch.no_grad()
    def segment(self, image: np.ndarray) -> SegmentationOutput:
        return forward_segmentation(self.segnet, to_tensor(image), pad=True)

    @torch.no_grad()
    def classify(self, image: np.ndarray):
        if self.clsnet is None:
            raise EvaluationError("checkpoint carries no classification head")
        x = to_tensor(image)
        seg = forward_segmentation(self.segnet, x, pad=True)
        pred = forward_classification(self.clsnet, fuse(x, seg), pad=True)
        return pred, seg

    @torch.no_grad()
    def features(self, image: np.ndarray) -> np.ndarray:
        if self.clsnet is None:
            raise EvaluationError("checkpoint carries no classification backbone")
        x = to_tensor(image)
        seg = forward_segmentation(self.segnet, x, pad=True)
        return extract_features(self.clsnet, fuse(x, seg), pad=True)[0].numpy()


@dataclass
class EvaluationReport:
    dataset_id: str
    task: str
    metrics: dict
    per_category: list
    config_fingerprint: str
    weights_fingerprint: str
    seed: int = 0
    n_samples: int = 0
    confusion: list | None = None
    categories: list | None = None
    timestamp: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def to_text(self) -> str:
        lines = [
            "# evaluation report",
            f"dataset\t{self.dataset_id}",
            f"task\t{self.task}",
            f"samples\t{self.n_samples}",
            f"config_fingerprint\t{self.config_fingerprint}",
            f"weights_fingerprint\t{self.weights_fingerprint}",
            f"seed\t{self.seed}",
            f"timestamp\t{self.timestamp}",
            "",
            "metric\tvalue",
        ]
        lines += [f"{k}\t{_fmt(v)}" for k, v in self.metrics.items()]
        if self.per_category:
            cols = list(self.per_category[0])
            lines += ["", "\t".join(cols)]
            lines += ["\t".join(_fmt(row[c]) for c in cols) for row in self.per_category]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=float)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"text": out / "report.txt", "json": out / "report.json"}
        paths["text"].write_text(self.to_text())
        paths["json"].write_text(self.to_json())
        if self.task == "classification" and self.confusion is not None:
            paths["figure"] = plotting.confusion_figure(self.confusion, self.categories, out / "confusion.png")
        elif self.task == "segmentation":
            per = {r["type_id"]: r["pq"] for r in self.per_category if r["pq"] == r["pq"]}
            paths["figure"] = plotting.per_class_pq_figure(per, out / "per_class_pq.png")
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    return str(v)


def segmentation_metrics(samples) -> tuple[dict, list]:
    """Aggregate Dice / binary PQ / multi PQ over (output, label_plane, instance_map) triples."""
    num = den = 0
    binary = PQStats()
    per_class: dict = {}
    for nuclei_prob, type_prob, label_plane, gt_inst in samples:
        pred_mask = nuclei_prob >= 0.5
        n, d = dice_counts(pred_mask, label_plane > 0)
        num, den = num + n, den + d
        pred_inst = extract_instances(pred_mask)
        if gt_inst is None:
            gt_inst = extract_instances(label_plane > 0)
        pred_type_map = plotting.label_plane_from_output(nuclei_prob, type_prob)
        s = pq_stats(pred_inst, gt_inst, instance_types(pred_inst, pred_type_map),
                     instance_types(gt_inst, label_plane))
        binary = binary + s["binary"]
        for t, st in s["per_class"].items():
            per_class[t] = per_class.get(t, PQStats()) + st
    summary = summarize_pq(binary, per_class)
    metrics = {"dice": 1.0 if den == 0 else num / den,
               "binary_pq": summary["binary_pq"], "multi_pq": summary["multi_pq"]}
    table = []
    for t in sorted(CELL_TYPE_NAMES):
        st = per_class.get(t, PQStats())
        table.append({"type_id": t, "type": CELL_TYPE_NAMES[t], "pq": st.pq, "tp": st.tp, "fp": st.fp, "fn": st.fn})
    return metrics, table


def classification_metrics(preds, labels, categories) -> tuple[dict, list, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    metrics = {"accuracy": accuracy(preds, labels), "balanced_accuracy": balanced_accuracy(preds, labels)}
    recall = per_category_recall(preds, labels)
    table = [{"category": c, "support": int((labels == k).sum()), "recall": recall.get(k, float("nan"))}
             for k, c in enumerate(categories)]
    return metrics, table, confusion_matrix(preds, labels, len(categories))


def evaluate(checkpoint, manifest: DatasetManifest, task: str, dataset_id: str = "", seed: int = 0) -> EvaluationReport:
    pipe = Pipeline.load(checkpoint)
    torch.manual_seed(seed)
    if task == "segmentation":
        def gen():
            for e in manifest.entries:
                s = read_sample(manifest.resolve(e.image_path))
                inst = None
                if e.label_path and str(e.label_path).endswith(".npy"):
                    inst = np.load(manifest.resolve(e.label_path))
                out = pipe.segment(s.image)
                yield out.nuclei_prob[0, 0].numpy(), out.type_prob[0].numpy(), s.label_plane, inst
        metrics, table = segmentation_metrics(gen())
        return EvaluationReport(dataset_id, task, metrics, table, pipe.fingerprint, pipe.weights_fingerprint,
                                seed, len(manifest.entries))
    if task == "classification":
        if pipe.categories is None or pipe.clsnet is None:
            raise EvaluationError("checkpoint has no classification head")
        if not manifest.is_classification:
            raise EvaluationError("manifest has no category labels")
        unknown = set(manifest.categories()) - set(pipe.categories)
        if unknown:
            raise EvaluationError(
                f"category mismatch: manifest has {sorted(unknown)} not among the checkpoint's "
                f"{len(pipe.categories)} categories"
            )
        index = {c: k for k, c in enumerate(pipe.categories)}
        preds, labels = [], []
        for e in manifest.entries:
            pred, _ = pipe.classify(read_rgb(manifest.resolve(e.image_path)))
            preds.append(int(pred.probs.argmax(1)))
            labels.append(index[e.category_label])
        metrics, table, cm = classification_metrics(preds, labels, pipe.categories)
        return EvaluationReport(dataset_id, task, metrics, table, pipe.fingerprint, pipe.weights_fingerprint,
                                seed, len(labels), cm.tolist(), list(pipe.categories))
    raise EvaluationError(f"unknown task {task!r}")


def infer(checkpoint, image_paths, out_dir=None, overlays=False) -> list:
    """Per-image category probabilities; failures are recorded per file and the batch continues."""
    pipe = Pipeline.load(checkpoint)
    results = []
    for path in image_paths:
        path = Path(path)
        try:
            image = read_rgb(path)
        except Exception as exc:
            log.error("cannot read %s: %s", path, exc)
            results.append({"path": str(path), "error": str(exc)})
            continue
        h, w = image.shape[:2]
        rec = {"path": str(path), "height": h, "width": w, "padded": bool(h % 32 or w % 32)}
        if pipe.clsnet is not None:
            pred, seg = pipe.classify(image)
            probs = pred.probs[0].tolist()
            rec["probs"] = dict(zip(pipe.categories, probs))
            rec["category"] = pipe.categories[int(np.argmax(probs))]
        else:
            seg = pipe.segment(image)
        rec["seg_shape"] = list(seg.type_prob.shape[-2:])
        if overlays and out_dir is not None:
            plane = plotting.label_plane_from_output(seg.nuclei_prob[0, 0].numpy(), seg.type_prob[0].numpy())
            from PIL import Image

            target = Path(out_dir) / f"{path.stem}_overlay.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(plotting.overlay(image, plane)).save(target)
            rec["overlay"] = str(target)
        results.append(rec)
    return results


def export_features(checkpoint, manifest: DatasetManifest, path) -> dict:
    """One pooled feature vector per manifest entry, saved as .npz (ids, features, labels)."""
    pipe = Pipeline.load(checkpoint)
    ids, feats, labels = [], [], []
    for e in manifest.entries:
        ids.append(e.id)
        feats.append(pipe.features(read_rgb(manifest.resolve(e.image_path))))
        labels.append("" if e.category_label is None else e.category_label)
    table = {"ids": np.array(ids), "features": np.stack(feats).astype(np.float32), "labels": np.array(labels),
             "config_fingerprint": np.array(pipe.fingerprint)}
    np.savez(path, **table)
    return table


def fit_linear_protocol(train_x, train_y, test_x=None, test_y=None, seed: int = 0, C: float = 1.0,
                        test_fraction: float = 0.25) -> dict:
    """Max-margin linear classifier (standardized features, C=1) on frozen features."""
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import LinearSVC

    train_x, train_y = np.asarray(train_x), np.asarray(train_y)
    if len(np.unique(train_y)) < 2:
        raise EvaluationError("linear protocol needs at least two categories in the training data")
    if test_x is None:
        try:
            train_x, test_x, train_y, test_y = train_test_split(
                train_x, train_y, test_size=test_fraction, random_state=seed, stratify=train_y)
        except ValueError as exc:
            raise EvaluationError(f"cannot hold out a stratified test split: {exc}") from None
    clf = make_pipeline(StandardScaler(), LinearSVC(C=C, random_state=seed, max_iter=20000))
    clf.fit(train_x, train_y)
    pred = clf.predict(np.asarray(test_x))
    test_y = np.asarray(test_y)
    return {"accuracy": accuracy(pred, test_y), "balanced_accuracy": balanced_accuracy(pred, test_y),
            "n_train": int(len(train_y)), "n_test": int(len(test_y)), "C": C}
