"""Workbench for simultaneous ischemic core / penumbra segmentation from
color-coded CT-perfusion parametric maps.

Subpackages:
    data        patient studies, manifests, stratified splitting
    phantom     deterministic synthetic cohort generator
    loss        Tversky index and focal Tversky loss
    model       slow-fusion / early-fusion / inflated architectures
    train       Adam training loop with gradual fine-tuning
    inference   brain masking, argmax post-processing, volume assembly
    metrics     Dice / Hausdorff / volume-difference evaluation
    experiments config-driven sweeps and report tables
"""

from ctpseg.data import (
    DatasetManifest,
    LabelVolume,
    MipVolume,
    ParametricMapStack,
    PatientStudy,
    SeverityGroup,
    SplitAssignment,
    load_manifest,
    load_patient,
    split_dataset,
)
from ctpseg.loss import LossSpec, focal_tversky_loss, tversky_index

__all__ = [
    "DatasetManifest",
    "LabelVolume",
    "LossSpec",
    "MipVolume",
    "ParametricMapStack",
    "PatientStudy",
    "SeverityGroup",
    "SplitAssignment",
    "focal_tversky_loss",
    "load_manifest",
    "load_patient",
    "split_dataset",
    "tversky_index",
]

__version__ = "0.1.0"
