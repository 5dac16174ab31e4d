"""Patient-level inference: MIP brain masking, argmax labeling and 3D
volume assembly.

Segmentation is forced inside the brain: a binary mask is derived per
slice from the MIP (threshold, largest connected component, hole fill)
and every voxel outside it is labeled healthy regardless of the
predicted probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from ctpseg.data import (
    CORE,
    HEALTHY,
    PENUMBRA,
    DatasetError,
    LabelVolume,
    MipVolume,
    PatientStudy,
)
from ctpseg.model import ModelGraph

DEFAULT_MASK_THRESHOLD = 0.05

_CONNECTIVITY = np.ones((3, 3), dtype=bool)  # 8-connected components


@dataclass
class BrainMask:
    mask: np.ndarray  # (slices, height, width) bool

    def __post_init__(self):
        if self.mask.ndim != 3 or self.mask.dtype != bool:
            raise DatasetError("brain mask must be a 3D boolean array")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mask.shape


def brain_mask_from_mip(
    mip: MipVolume, threshold: float = DEFAULT_MASK_THRESHOLD
) -> BrainMask:
    """Per-slice mask: MIP > threshold, keep the largest connected
    component, fill holes.  An empty mask is permitted."""
    out = np.zeros(mip.shape, dtype=bool)
    for k in range(mip.shape[0]):
        raw = mip.data[k] > threshold
        if not raw.any():
            continue
        components, n = ndimage.label(raw, structure=_CONNECTIVITY)
        sizes = ndimage.sum_labels(raw, components, index=np.arange(1, n + 1))
        largest = components == (int(np.argmax(sizes)) + 1)
        out[k] = ndimage.binary_fill_holes(largest)
    return BrainMask(out)


def postprocess(probs: np.ndarray, mask_slice: np.ndarray) -> np.ndarray:
    """Argmax labels inside the mask (ties resolve to the lowest class
    index, i.e. healthy first); healthy everywhere outside the mask."""
    probs = np.asarray(probs)
    mask_slice = np.asarray(mask_slice, dtype=bool)
    if probs.ndim != 3 or probs.shape[-1] != 3:
        raise DatasetError(f"probabilities must be (H, W, 3), got {probs.shape}")
    if probs.shape[:2] != mask_slice.shape:
        raise DatasetError(
            f"mask shape {mask_slice.shape} != probability grid {probs.shape[:2]}"
        )
    labels = np.argmax(probs, axis=-1).astype(np.uint8)
    labels[~mask_slice] = HEALTHY
    return labels


def predict_patient(
    model: ModelGraph,
    study: PatientStudy,
    threshold: float = DEFAULT_MASK_THRESHOLD,
    chunk_size: int = 8,
) -> LabelVolume:
    """Run the model slice by slice (dropout disabled), apply the brain
    mask and stack the 2D labelings caudal to cranial."""
    mask = brain_mask_from_mip(study.mip, threshold)
    n = study.n_slices
    was_training = model.training
    model.eval()
    slices = []
    try:
        with torch.no_grad():
            for start in range(0, n, chunk_size):
                stop = min(start + chunk_size, n)
                batch = {
                    name: stack[start:stop]
                    for name, stack in study.maps.as_dict().items()
                }
                if "mip" in model.config.image_inputs:
                    batch["mip"] = study.mip.data[start:stop]
                if model.config.uses_nihss:
                    batch["nihss"] = [study.nihss] * (stop - start)
                probs = model(batch).cpu().numpy()
                for k in range(stop - start):
                    slices.append(postprocess(probs[k], mask.mask[start + k]))
    finally:
        if was_training:
            model.train()
    return LabelVolume(np.stack(slices, axis=0))


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------


def save_prediction(
    pred: LabelVolume, study: PatientStudy, out_dir: Path | str
) -> Path:
    """Write per-slice label rasters plus a JSON sidecar with the voxel
    spacing and per-class voxel counts; returns the sidecar path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(pred.shape[0]):
        Image.fromarray(pred.labels[k], mode="L").save(out_dir / f"{k:03d}.png")
    sidecar = {
        "patient_id": study.patient_id,
        "group": study.group.value,
        "spacing_mm": list(study.spacing),
        "slices": int(pred.shape[0]),
        "voxel_counts": {
            "healthy": int((pred.labels == HEALTHY).sum()),
            "penumbra": int((pred.labels == PENUMBRA).sum()),
            "core": int((pred.labels == CORE).sum()),
        },
    }
    sidecar_path = out_dir / "prediction.json"
    sidecar_path.write_text(json.dumps(sidecar, indent=2))
    return sidecar_path


def load_prediction(pred_dir: Path | str) -> tuple[LabelVolume, dict]:
    pred_dir = Path(pred_dir)
    sidecar = json.loads((pred_dir / "prediction.json").read_text())
    slices = [
        np.asarray(Image.open(pred_dir / f"{k:03d}.png"))
        for k in range(sidecar["slices"])
    ]
    return LabelVolume(np.stack(slices, axis=0)), sidecar
