"""Nuclei segmentation and tissue classification with morphology-aware feature fusion."""
from .backbone import BackboneConfig, get_config
from .segnet import SegmentationOutput, build_segmentation_model, forward_segmentation
from .clsnet import CategoryPrediction, build_classification_model, forward_classification, fuse
from .augment import AugmentationPolicy, augment
from .harmonizer import DatasetManifest, harmonize, load_manifest, save_manifest, split_stratified
from .curriculum import CurriculumPlan, StageSpec, default_classification_plan, default_segmentation_plan

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "BackboneConfig", "CategoryPrediction", "CurriculumPlan", "DatasetManifest",
    "SegmentationOutput", "StageSpec", "augment", "build_classification_model", "build_segmentation_model",
    "default_classification_plan", "default_segmentation_plan", "forward_classification",
    "forward_segmentation", "fuse", "get_config", "harmonize", "load_manifest", "save_manifest",
    "split_stratified",
]
