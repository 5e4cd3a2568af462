"""Zero-shot image classification that fuses image, LLM-description, and
LLM-prediction features in a shared cross-modal embedding space."""

from .backends import Backends, CacheStore, HttpEncoder, HttpLLM, MockEncoder, MockLLM, cached
from .classifier import ClassFeatureMode, ClassifierModel, build_classifier
from .evaluation import EvalConfig, emit_report, evaluate, load_manifest
from .pipeline import FeatureSelection, FusionStrategy, classify, classify_batch, extract_features
from .vectors import argmax_index, fuse_average, normalize, score

__version__ = "0.1.0"

__all__ = [
    "Backends",
    "CacheStore",
    "ClassFeatureMode",
    "ClassifierModel",
    "EvalConfig",
    "FeatureSelection",
    "FusionStrategy",
    "HttpEncoder",
    "HttpLLM",
    "MockEncoder",
    "MockLLM",
    "argmax_index",
    "build_classifier",
    "cached",
    "classify",
    "classify_batch",
    "emit_report",
    "evaluate",
    "extract_features",
    "fuse_average",
    "load_manifest",
    "normalize",
    "score",
]
