"""Deterministic synthetic phantom cohorts.

Each phantom is an elliptical "brain" on a dark background.  A smooth
random field, thresholded at two quantiles over the brain voxels,
carves a penumbra blob with a core blob strictly nested inside it; the
realized class fractions track the requested targets.  The four
parametric maps are rendered through fixed per-map color lookup tables
driven by (distance to lesion, tissue class, within-class texture), so
lesions are statistically separable from healthy tissue, most strongly
in the TTP and TMax maps.

Everything is a pure function of (spec, seed): regenerating a cohort
with the same seed reproduces the image files byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ctpseg.data import (
    CORE,
    HEALTHY,
    PENUMBRA,
    PM_NAMES,
    DatasetManifest,
    LabelVolume,
    MipVolume,
    ParametricMapStack,
    PatientRecord,
    PatientStudy,
    SeverityGroup,
    save_manifest,
)

# Class pixel fractions (healthy, penumbra, core) reported for the two
# lesion-bearing severity groups; WIS has no lesion by definition.
LVO_FRACTIONS = (0.931, 0.062, 0.007)
NONLVO_FRACTIONS = (0.976, 0.022, 0.002)
WIS_FRACTIONS = (1.0, 0.0, 0.0)

DEFAULT_FRACTIONS = {
    SeverityGroup.LVO: LVO_FRACTIONS,
    SeverityGroup.NON_LVO: NONLVO_FRACTIONS,
    SeverityGroup.WIS: WIS_FRACTIONS,
}

# Relative tolerance on realized fractions; pixel grids cannot hit the
# targets exactly at desk-scale resolutions.
FRACTION_RTOL = 0.30

DEFAULT_SPACING = (1.0, 1.0, 5.0)

MAX_LESION_FRACTION = 0.5

# Per-map color LUT anchors over the composite signal s in [0, 1]:
# healthy tissue occupies s < ~0.65 (rising toward the lesion), penumbra
# ~[0.72, 0.82], core >= 0.90.  TTP/TMax swing hard between healthy and
# lesion; CBF inverts (low flow in lesion); CBV dips only in the core.
_LUTS: dict[str, list[tuple[float, tuple[float, float, float]]]] = {
    "ttp": [
        (0.00, (0.08, 0.10, 0.55)),
        (0.65, (0.15, 0.55, 0.45)),
        (0.72, (0.75, 0.70, 0.15)),
        (1.00, (0.95, 0.85, 0.05)),
    ],
    "tmax": [
        (0.00, (0.04, 0.06, 0.40)),
        (0.65, (0.10, 0.42, 0.38)),
        (0.72, (0.80, 0.25, 0.08)),
        (1.00, (0.95, 0.05, 0.05)),
    ],
    "cbf": [
        (0.00, (0.75, 0.60, 0.12)),
        (0.65, (0.45, 0.40, 0.25)),
        (0.72, (0.25, 0.22, 0.45)),
        (0.90, (0.18, 0.15, 0.50)),
        (1.00, (0.05, 0.05, 0.35)),
    ],
    "cbv": [
        (0.00, (0.55, 0.38, 0.28)),
        (0.65, (0.48, 0.34, 0.28)),
        (0.72, (0.45, 0.32, 0.30)),
        (0.90, (0.42, 0.30, 0.32)),
        (1.00, (0.08, 0.06, 0.40)),
    ],
}

_BACKGROUND_VALUE = 0.02


class PhantomError(ValueError):
    """Infeasible phantom specification or failed realization."""


@dataclass
class PhantomSpec:
    slices: int
    height: int
    width: int
    group: SeverityGroup
    target_fractions: tuple[float, float, float] | None = None
    noise_level: float = 0.03
    seed: int = 0
    annotators: int = 0  # 0 or 2 synthetic expert delineations

    def __post_init__(self):
        if min(self.slices, self.height, self.width) < 1:
            raise PhantomError("slices/height/width must be positive")
        if self.target_fractions is None:
            self.target_fractions = DEFAULT_FRACTIONS[self.group]
        fr = self.target_fractions
        if len(fr) != 3 or any(f < 0 for f in fr):
            raise PhantomError("target_fractions must be 3 nonnegative reals")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise PhantomError(f"target_fractions must sum to 1, got {sum(fr)!r}")
        if fr[CORE] > fr[PENUMBRA]:
            raise PhantomError(
                f"core fraction {fr[CORE]} exceeds penumbra fraction {fr[PENUMBRA]}"
            )
        if self.group is SeverityGroup.WIS and (fr[PENUMBRA] > 0 or fr[CORE] > 0):
            raise PhantomError("WIS phantoms must have zero penumbra and core")
        if fr[PENUMBRA] + fr[CORE] > MAX_LESION_FRACTION:
            raise PhantomError(
                f"lesion fraction {fr[PENUMBRA] + fr[CORE]:.3f} cannot fit in the brain "
                f"(limit {MAX_LESION_FRACTION})"
            )
        if self.noise_level < 0:
            raise PhantomError("noise_level must be >= 0")
        if self.annotators not in (0, 2):
            raise PhantomError("annotators must be 0 or 2")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.slices, self.height, self.width)


@dataclass
class CohortSpec:
    counts: dict[SeverityGroup, int]
    slices: int = 8
    height: int = 64
    width: int = 64
    noise_level: float = 0.03
    seed: int = 0
    annotators: int = 0
    fractions: dict[SeverityGroup, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_FRACTIONS)
    )
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        for group in SeverityGroup:
            self.counts.setdefault(group, 0)
            self.fractions.setdefault(group, DEFAULT_FRACTIONS[group])
        if any(c < 0 for c in self.counts.values()):
            raise PhantomError("cohort counts must be nonnegative")
        if sum(self.counts.values()) < 1:
            raise PhantomError("cohort must contain at least one patient")

    @classmethod
    def from_file(cls, path: Path | str) -> "CohortSpec":
        raw = json.loads(Path(path).read_text())
        counts = {SeverityGroup(k): int(v) for k, v in raw["counts"].items()}
        fractions = {
            SeverityGroup(k): tuple(v) for k, v in raw.get("fractions", {}).items()
        }
        for group in SeverityGroup:
            fractions.setdefault(group, DEFAULT_FRACTIONS[group])
        return cls(
            counts=counts,
            slices=raw.get("slices", 8),
            height=raw.get("height", 64),
            width=raw.get("width", 64),
            noise_level=raw.get("noise_level", 0.03),
            seed=raw.get("seed", 0),
            annotators=raw.get("annotators", 0),
            fractions=fractions,
            spacing=tuple(raw.get("spacing_mm", DEFAULT_SPACING)),
        )


def brain_ellipse_mask(slices: int, height: int, width: int) -> np.ndarray:
    """The exact brain region used by the generator: a per-slice ellipse,
    mildly narrower toward the first and last slices."""
    z = np.arange(slices)
    if slices > 1:
        zc = (slices - 1) / 2.0
        scale = np.sqrt(1.0 - 0.25 * ((z - zc) / (zc + 1.0)) ** 2)
    else:
        scale = np.ones(1)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ry, rx = 0.44 * height, 0.38 * width
    mask = np.empty((slices, height, width), dtype=bool)
    for k in range(slices):
        mask[k] = ((rows - cy) / (ry * scale[k])) ** 2 + (
            (cols - cx) / (rx * scale[k])
        ) ** 2 <= 1.0
    return mask


def _rank_normalize(values: np.ndarray) -> np.ndarray:
    """Map values to uniform [0, 1) by rank; ties broken by position."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(len(values))
    return ranks / max(len(values), 1)


def _smooth_field(shape: tuple[int, int, int], brain: np.ndarray, rng) -> np.ndarray:
    """Smooth random field with one dominant bump inside the brain."""
    s, h, w = shape
    noise = rng.standard_normal(shape)
    noise = ndimage.gaussian_filter(noise, sigma=(max(0.8, s / 10), h / 10, w / 10))

    centers = np.argwhere(brain)
    cz, cy, cx = centers[rng.integers(len(centers))]
    zz = (np.arange(s)[:, None, None] - cz) / max(s / 2.5, 1.0)
    yy = (np.arange(h)[None, :, None] - cy) / (0.22 * h)
    xx = (np.arange(w)[None, None, :] - cx) / (0.22 * w)
    bump = np.exp(-0.5 * (zz**2 + yy**2 + xx**2))

    def standardized(a):
        v = a[brain]
        return (a - v.mean()) / (v.std() + 1e-12)

    return standardized(bump) + 0.55 * standardized(noise)


def _carve_lesion(
    u: np.ndarray, brain: np.ndarray, fractions: tuple[float, float, float]
) -> np.ndarray:
    """Threshold the rank field into labels; core is restricted to the
    in-plane morphological interior of the lesion."""
    labels = np.zeros(brain.shape, dtype=np.uint8)
    f_lesion = fractions[PENUMBRA] + fractions[CORE]
    if f_lesion == 0:
        return labels
    lesion = brain & (u >= 1.0 - f_lesion)
    interior = ndimage.binary_erosion(lesion, structure=np.ones((1, 3, 3), dtype=bool))
    core = interior & (u >= 1.0 - 1.12 * fractions[CORE])
    labels[lesion] = PENUMBRA
    labels[core] = CORE
    return labels


def _realized_fractions(labels: np.ndarray, brain: np.ndarray) -> tuple[float, float, float]:
    n = int(brain.sum())
    pen = int((labels[brain] == PENUMBRA).sum())
    core = int((labels[brain] == CORE).sum())
    return ((n - pen - core) / n, pen / n, core / n)


def _within_tolerance(realized: float, target: float) -> bool:
    if target == 0:
        return realized == 0
    return abs(realized / target - 1.0) <= FRACTION_RTOL


def _render_maps(
    labels: np.ndarray, brain: np.ndarray, u: np.ndarray, noise_level: float, rng
) -> dict[str, np.ndarray]:
    """Composite signal -> fixed per-map LUT -> additive noise."""
    lesion = labels != HEALTHY
    if lesion.any():
        dist = ndimage.distance_transform_edt(~lesion, sampling=(2.0, 1.0, 1.0))
        prox = np.exp(-dist / (0.15 * min(labels.shape[1:])))
    else:
        prox = np.zeros(labels.shape)

    signal = 0.15 + 0.35 * prox + 0.15 * u
    pen = labels == PENUMBRA
    core = labels == CORE
    if pen.any():
        signal[pen] = 0.72 + 0.10 * _rank_normalize(u[pen])
    if core.any():
        signal[core] = 0.90 + 0.10 * _rank_normalize(u[core])

    maps = {}
    for name in PM_NAMES:
        anchors = _LUTS[name]
        pos = np.array([a[0] for a in anchors])
        rgb = np.array([a[1] for a in anchors])
        img = np.empty((*labels.shape, 3), dtype=np.float64)
        for c in range(3):
            img[..., c] = np.interp(signal, pos, rgb[:, c])
        img += rng.normal(0.0, noise_level, size=img.shape)
        img[~brain] = _BACKGROUND_VALUE
        maps[name] = np.clip(img, 0.0, 1.0).astype(np.float32)
    return maps


def _render_mip(brain: np.ndarray, u: np.ndarray, noise_level: float, rng) -> np.ndarray:
    mip = 0.55 + 0.12 * u + rng.normal(0.0, 0.5 * noise_level, size=brain.shape)
    mip = np.clip(mip, 0.35, 0.90)
    mip[~brain] = 0.0
    return mip.astype(np.float32)


def _sample_nihss(group: SeverityGroup, rng) -> int:
    if group is SeverityGroup.LVO:
        return int(10 + rng.integers(0, 16))
    if group is SeverityGroup.NON_LVO:
        return int(1 + rng.integers(0, 9))
    return int(rng.integers(0, 4))


def generate_patient(
    spec: PhantomSpec,
    patient_id: str = "phantom",
    spacing: tuple[float, float, float] = DEFAULT_SPACING,
) -> PatientStudy:
    """Generate one phantom study with ground truth; pure in (spec, seed)."""
    rng = np.random.default_rng(spec.seed)
    brain = brain_ellipse_mask(*spec.shape)

    labels = None
    for _ in range(10):
        field3d = _smooth_field(spec.shape, brain, rng)
        u = np.zeros(spec.shape)
        u[brain] = _rank_normalize(field3d[brain])
        candidate = _carve_lesion(u, brain, spec.target_fractions)
        realized = _realized_fractions(candidate, brain)
        if _within_tolerance(realized[PENUMBRA], spec.target_fractions[PENUMBRA]) and (
            _within_tolerance(realized[CORE], spec.target_fractions[CORE])
        ):
            labels = candidate
            break
    if labels is None:
        raise PhantomError(
            f"could not realize fractions {spec.target_fractions} within "
            f"±{FRACTION_RTOL:.0%} at shape {spec.shape}"
        )

    maps = _render_maps(labels, brain, u, spec.noise_level, rng)
    mip = _render_mip(brain, u, spec.noise_level, rng)
    nihss = _sample_nihss(spec.group, rng)

    annotator_truths = {}
    if spec.annotators == 2:
        annotator_truths = {
            "NR1": LabelVolume(labels.copy()),
            "NR2": LabelVolume(
                _carve_lesion(
                    u,
                    brain,
                    (
                        1.0
                        - 1.07 * spec.target_fractions[PENUMBRA]
                        - 0.93 * spec.target_fractions[CORE],
                        1.07 * spec.target_fractions[PENUMBRA],
                        0.93 * spec.target_fractions[CORE],
                    ),
                )
            ),
        }

    return PatientStudy(
        patient_id=patient_id,
        group=spec.group,
        nihss=nihss,
        maps=ParametricMapStack(**maps),
        mip=MipVolume(mip),
        spacing=spacing,
        ground_truth=LabelVolume(labels),
        annotator_truths=annotator_truths,
    )


# ---------------------------------------------------------------------------
# Cohort generation and on-disk layout
# ---------------------------------------------------------------------------


def _write_gray(path: Path, arr2d: np.ndarray) -> None:
    Image.fromarray(np.round(arr2d * 255.0).astype(np.uint8), mode="L").save(path)


def _write_rgb(path: Path, arr2d: np.ndarray) -> None:
    Image.fromarray(np.round(arr2d * 255.0).astype(np.uint8), mode="RGB").save(path)


def _write_labels(path: Path, arr2d: np.ndarray) -> None:
    Image.fromarray(arr2d.astype(np.uint8), mode="L").save(path)


def write_study(study: PatientStudy, patient_dir: Path) -> PatientRecord:
    """Write one study as per-slice PNGs and return its manifest record."""
    patient_dir.mkdir(parents=True, exist_ok=True)
    n = study.n_slices
    map_paths: dict[str, list[Path]] = {}
    for name, stack in study.maps.as_dict().items():
        sub = patient_dir / name
        sub.mkdir(exist_ok=True)
        paths = [sub / f"{k:03d}.png" for k in range(n)]
        for k, p in enumerate(paths):
            _write_rgb(p, stack[k])
        map_paths[name] = paths
    mip_dir = patient_dir / "mip"
    mip_dir.mkdir(exist_ok=True)
    map_paths["mip"] = [mip_dir / f"{k:03d}.png" for k in range(n)]
    for k, p in enumerate(map_paths["mip"]):
        _write_gray(p, study.mip.data[k])

    gt_paths = None
    if study.ground_truth is not None:
        gt_dir = patient_dir / "gt"
        gt_dir.mkdir(exist_ok=True)
        gt_paths = [gt_dir / f"{k:03d}.png" for k in range(n)]
        for k, p in enumerate(gt_paths):
            _write_labels(p, study.ground_truth.labels[k])

    annotator_paths = {}
    for key, vol in study.annotator_truths.items():
        a_dir = patient_dir / f"annot_{key.lower()}"
        a_dir.mkdir(exist_ok=True)
        paths = [a_dir / f"{k:03d}.png" for k in range(n)]
        for k, p in enumerate(paths):
            _write_labels(p, vol.labels[k])
        annotator_paths[key] = paths

    return PatientRecord(
        patient_id=study.patient_id,
        group=study.group,
        nihss=study.nihss,
        spacing=study.spacing,
        map_paths=map_paths,
        gt_paths=gt_paths,
        annotator_paths=annotator_paths,
    )


_GROUP_TAG = {
    SeverityGroup.LVO: "lvo",
    SeverityGroup.NON_LVO: "nonlvo",
    SeverityGroup.WIS: "wis",
}


def generate_cohort(spec: CohortSpec, out_dir: Path | str) -> DatasetManifest:
    """Write a full phantom cohort (images + manifest.json) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    total = sum(spec.counts.values())
    seeds = np.random.SeedSequence(spec.seed).generate_state(total)
    records = []
    i = 0
    for group in SeverityGroup:
        for k in range(spec.counts[group]):
            pid = f"{_GROUP_TAG[group]}{k + 1:03d}"
            pspec = PhantomSpec(
                slices=spec.slices,
                height=spec.height,
                width=spec.width,
                group=group,
                target_fractions=spec.fractions[group],
                noise_level=spec.noise_level,
                seed=int(seeds[i]),
                annotators=spec.annotators,
            )
            study = generate_patient(pspec, patient_id=pid, spacing=spec.spacing)
            records.append(write_study(study, out_dir / pid))
            i += 1

    manifest = DatasetManifest(patients=records)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
