"""Adversarial image augmentation: smooth adversarial warps and edge-preserving recolorings."""

__version__ = "0.1.0"

from .tensor_core import Image, load_image, save_image, spatial_gradients, unvectorize, vectorize, vectorize_all
from .diffops import GridOperatorSet, apply_regularized_inverse, build_diff_ops
from .geoflow import FlowField, FlowParams, flow_data_terms, geometric_augment, solve_flow, warp
from .photometric import (
    RecolorOperator,
    RecolorParams,
    build_recolor_operator,
    edginess,
    penalty,
    photometric_augment,
    recolor_project,
    recolor_solve,
)
from .gradsource import AdvGradient, TinyClassifier, build_adv_gradient, input_gradient, load_gradient, train_tiny
from .pipeline import AugmentConfig, OperatorCache, augment_batch, iterate_augment, precompute

__all__ = [
    "AdvGradient",
    "AugmentConfig",
    "FlowField",
    "FlowParams",
    "GridOperatorSet",
    "Image",
    "OperatorCache",
    "RecolorOperator",
    "RecolorParams",
    "TinyClassifier",
    "apply_regularized_inverse",
    "augment_batch",
    "build_adv_gradient",
    "build_diff_ops",
    "build_recolor_operator",
    "edginess",
    "flow_data_terms",
    "geometric_augment",
    "input_gradient",
    "iterate_augment",
    "load_gradient",
    "load_image",
    "penalty",
    "photometric_augment",
    "precompute",
    "recolor_project",
    "recolor_solve",
    "save_image",
    "solve_flow",
    "spatial_gradients",
    "train_tiny",
    "unvectorize",
    "vectorize",
    "vectorize_all",
    "warp",
]
