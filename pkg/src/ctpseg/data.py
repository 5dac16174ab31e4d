"""Patient studies, on-disk manifests and stratified cohort splitting.

A patient study bundles four color-coded perfusion maps (CBF, CBV, TTP,
TMax), a grayscale MIP volume, an optional clinical severity score and
optional label volumes.  Studies are stored on disk as one lossless PNG
per slice per map, referenced by a JSON manifest (format below), and are
normalized to [0, 1] at load time by the maximum representable value of
the file's bit depth.

Manifest format (``format_version`` "1")::

    {
      "format_version": "1",
      "patients": [
        {
          "id": "p001",
          "group": "LVO" | "NON_LVO" | "WIS",
          "nihss": 14 | null,
          "spacing_mm": [0.45, 0.45, 5.0],
          "cbf": ["p001/cbf/00.png", ...],   # caudal -> cranial
          "cbv": [...], "ttp": [...], "tmax": [...], "mip": [...],
          "gt": [...] | null,
          "annotators": {"NR1": [...], "NR2": [...]} | null
        }
      ]
    }

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

PM_NAMES = ("cbf", "cbv", "ttp", "tmax")

HEALTHY, PENUMBRA, CORE = 0, 1, 2
CLASS_NAMES = {HEALTHY: "healthy", PENUMBRA: "penumbra", CORE: "core"}

MAX_SLICES = 64
CLINICAL_SLICE_RANGE = (13, 27)
NIHSS_RANGE = (0, 42)

MANIFEST_FORMAT_VERSION = "1"


class DatasetError(ValueError):
    """Base class for data-model violations."""


class ManifestError(DatasetError):
    pass


class MalformedManifestError(ManifestError):
    def __init__(self, field_name: str, detail: str):
        self.field_name = field_name
        super().__init__(f"malformed manifest field {field_name!r}: {detail}")


class DuplicatePatientIdError(ManifestError):
    def __init__(self, patient_id: str):
        self.patient_id = patient_id
        super().__init__(f"duplicate patient id {patient_id!r}")


class DanglingReferenceError(ManifestError):
    def __init__(self, patient_id: str, field_name: str, path: Path):
        self.patient_id = patient_id
        self.field_name = field_name
        self.path = path
        super().__init__(
            f"patient {patient_id!r} field {field_name!r} references missing file {path}"
        )


class DimensionMismatchError(DatasetError):
    pass


class InvalidLabelError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    pass


class SliceCountWarning(UserWarning):
    """Slice count outside the clinical 13-27 range (allowed for phantoms)."""


class SeverityGroup(Enum):
    """Vessel-occlusion severity group of a patient."""

    LVO = "LVO"
    NON_LVO = "NON_LVO"
    WIS = "WIS"

    @classmethod
    def from_string(cls, value: str) -> "SeverityGroup":
        try:
            return cls(value)
        except ValueError:
            raise MalformedManifestError(
                "group", f"{value!r} not one of {[g.value for g in cls]}"
            ) from None


@dataclass
class ParametricMapStack:
    """Four color parametric maps, each (slices, height, width, 3) in [0, 1]."""

    cbf: np.ndarray
    cbv: np.ndarray
    ttp: np.ndarray
    tmax: np.ndarray

    def __post_init__(self):
        ref = None
        for name in PM_NAMES:
            arr = getattr(self, name)
            if arr.ndim != 4 or arr.shape[-1] != 3:
                raise DimensionMismatchError(
                    f"{name} must be (slices, height, width, 3), got {arr.shape}"
                )
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DatasetError(f"{name} values outside [0, 1]")
            if ref is None:
                ref = arr.shape
            elif arr.shape != ref:
                raise DimensionMismatchError(
                    f"{name} shape {arr.shape} differs from cbf shape {ref}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        """(slices, height, width) shared by all four maps."""
        return self.cbf.shape[:3]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PM_NAMES}


@dataclass
class MipVolume:
    """Grayscale maximum-intensity-projection volume, (slices, height, width) in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionMismatchError(f"MIP must be 3D, got shape {self.data.shape}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise DatasetError("MIP values outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Per-voxel class labels (slices, height, width), values in {0, 1, 2}."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise DimensionMismatchError(
                f"labels must be 3D, got shape {self.labels.shape}"
            )
        bad = ~np.isin(self.labels, (HEALTHY, PENUMBRA, CORE))
        if bad.any():
            value = int(self.labels[bad][0])
            raise InvalidLabelError(f"label value {value} outside {{0, 1, 2}}")
        self.labels = self.labels.astype(np.uint8, copy=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def class_mask(self, class_index: int) -> np.ndarray:
        return self.labels == class_index


@dataclass
class PatientStudy:
    """One patient's loaded image data plus clinical metadata."""

    patient_id: str
    group: SeverityGroup
    maps: ParametricMapStack
    mip: MipVolume
    spacing: tuple[float, float, float]
    nihss: int | None = None
    ground_truth: LabelVolume | None = None
    annotator_truths: dict[str, LabelVolume] = field(default_factory=dict)

    def __post_init__(self):
        shape = self.maps.shape
        slices = shape[0]
        if not 1 <= slices <= MAX_SLICES:
            raise DimensionMismatchError(
                f"patient {self.patient_id!r}: slice count {slices} outside [1, {MAX_SLICES}]"
            )
        lo, hi = CLINICAL_SLICE_RANGE
        if not lo <= slices <= hi:
            warnings.warn(
                f"patient {self.patient_id!r}: {slices} slices outside the clinical "
                f"{lo}-{hi} range",
                SliceCountWarning,
                stacklevel=2,
            )
        if self.mip.shape != shape:
            raise DimensionMismatchError(
                f"patient {self.patient_id!r}: MIP shape {self.mip.shape} != maps {shape}"
            )
        if any(s <= 0 for s in self.spacing):
            raise DatasetError(
                f"patient {self.patient_id!r}: spacing must be strictly positive"
            )
        if self.nihss is not None and not NIHSS_RANGE[0] <= self.nihss <= NIHSS_RANGE[1]:
            raise DatasetError(
                f"patient {self.patient_id!r}: NIHSS {self.nihss} outside [0, 42]"
            )
        for name, vol in self._label_volumes():
            if vol.shape != shape:
                raise DimensionMismatchError(
                    f"patient {self.patient_id!r}: {name} shape {vol.shape} != maps {shape}"
                )

    def _label_volumes(self):
        if self.ground_truth is not None:
            yield "ground_truth", self.ground_truth
        for key, vol in self.annotator_truths.items():
            yield f"annotator {key!r}", vol

    @property
    def n_slices(self) -> int:
        return self.maps.shape[0]


@dataclass
class PatientRecord:
    """Manifest entry: file references for one patient, paths already resolved."""

    patient_id: str
    group: SeverityGroup
    nihss: int | None
    spacing: tuple[float, float, float]
    map_paths: dict[str, list[Path]]  # keys: cbf, cbv, ttp, tmax, mip
    gt_paths: list[Path] | None
    annotator_paths: dict[str, list[Path]]


@dataclass
class DatasetManifest:
    patients: list[PatientRecord]
    format_version: str = MANIFEST_FORMAT_VERSION

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.patients:
            if rec.patient_id in seen:
                raise DuplicatePatientIdError(rec.patient_id)
            seen.add(rec.patient_id)

    @property
    def patient_ids(self) -> list[str]:
        return [rec.patient_id for rec in self.patients]

    def record(self, patient_id: str) -> PatientRecord:
        for rec in self.patients:
            if rec.patient_id == patient_id:
                return rec
        raise KeyError(f"patient {patient_id!r} not in manifest")

    def ids_by_group(self) -> dict[SeverityGroup, list[str]]:
        out: dict[SeverityGroup, list[str]] = {g: [] for g in SeverityGroup}
        for rec in self.patients:
            out[rec.group].append(rec.patient_id)
        return out


@dataclass
class SplitAssignment:
    """Disjoint train/validation/test patient-id lists covering a manifest."""

    train: list[str]
    validation: list[str]
    test: list[str]

    def __post_init__(self):
        parts = [set(self.train), set(self.validation), set(self.test)]
        total = len(self.train) + len(self.validation) + len(self.test)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise DatasetError("split lists are not pairwise disjoint")

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2))

    @classmethod
    def load(cls, path: Path | str) -> "SplitAssignment":
        raw = json.loads(Path(path).read_text())
        return cls(train=raw["train"], validation=raw["validation"], test=raw["test"])


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _require(entry: dict, key: str, patient_id: str):
    if key not in entry:
        raise MalformedManifestError(key, f"missing in patient {patient_id!r}")
    return entry[key]


def _path_list(raw, field_name: str, patient_id: str, base: Path) -> list[Path]:
    if not isinstance(raw, list) or not raw or not all(isinstance(p, str) for p in raw):
        raise MalformedManifestError(
            field_name, f"patient {patient_id!r}: expected a non-empty list of paths"
        )
    return [base / p if not Path(p).is_absolute() else Path(p) for p in raw]


def load_manifest(path: Path | str) -> DatasetManifest:
    """Load and validate a manifest document.

    Raises FileNotFoundError for a missing file, MalformedManifestError /
    DuplicatePatientIdError / DanglingReferenceError for content problems.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifestError("<document>", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedManifestError("<document>", "top level must be an object")
    version = raw.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise MalformedManifestError(
            "format_version", f"expected {MANIFEST_FORMAT_VERSION!r}, got {version!r}"
        )
    if not isinstance(raw.get("patients"), list):
        raise MalformedManifestError("patients", "expected a list")

    base = path.parent
    records = []
    for entry in raw["patients"]:
        if not isinstance(entry, dict):
            raise MalformedManifestError("patients", "entries must be objects")
        pid = _require(entry, "id", "<unknown>")
        if not isinstance(pid, str) or not pid:
            raise MalformedManifestError("id", f"invalid id {pid!r}")
        group = SeverityGroup.from_string(_require(entry, "group", pid))
        nihss = entry.get("nihss")
        if nihss is not None and not isinstance(nihss, int):
            raise MalformedManifestError("nihss", f"patient {pid!r}: expected int or null")
        spacing_raw = _require(entry, "spacing_mm", pid)
        if (
            not isinstance(spacing_raw, list)
            or len(spacing_raw) != 3
            or not all(isinstance(v, (int, float)) and v > 0 for v in spacing_raw)
        ):
            raise MalformedManifestError(
                "spacing_mm", f"patient {pid!r}: expected 3 positive numbers"
            )

        map_paths = {}
        for name in (*PM_NAMES, "mip"):
            map_paths[name] = _path_list(_require(entry, name, pid), name, pid, base)
        n = len(map_paths["cbf"])
        for name in (*PM_NAMES, "mip"):
            if len(map_paths[name]) != n:
                raise MalformedManifestError(
                    name, f"patient {pid!r}: {len(map_paths[name])} paths, expected {n}"
                )

        gt_raw = entry.get("gt")
        gt_paths = None if gt_raw is None else _path_list(gt_raw, "gt", pid, base)
        annot_raw = entry.get("annotators") or {}
        if not isinstance(annot_raw, dict) or len(annot_raw) > 2:
            raise MalformedManifestError(
                "annotators", f"patient {pid!r}: expected a map of at most 2 annotators"
            )
        annotator_paths = {
            key: _path_list(paths, f"annotators.{key}", pid, base)
            for key, paths in annot_raw.items()
        }

        rec = PatientRecord(
            patient_id=pid,
            group=group,
            nihss=nihss,
            spacing=tuple(float(v) for v in spacing_raw),
            map_paths=map_paths,
            gt_paths=gt_paths,
            annotator_paths=annotator_paths,
        )
        for field_name, paths in _iter_record_paths(rec):
            for p in paths:
                if not p.exists():
                    raise DanglingReferenceError(pid, field_name, p)
        records.append(rec)

    return DatasetManifest(patients=records, format_version=version)


def _iter_record_paths(rec: PatientRecord):
    for name, paths in rec.map_paths.items():
        yield name, paths
    if rec.gt_paths is not None:
        yield "gt", rec.gt_paths
    for key, paths in rec.annotator_paths.items():
        yield f"annotators.{key}", paths


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write a manifest document; paths are stored relative to the target directory
    when possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return str(p.resolve().relative_to(base))
        except ValueError:
            return str(p)

    entries = []
    for rec in manifest.patients:
        entry = {
            "id": rec.patient_id,
            "group": rec.group.value,
            "nihss": rec.nihss,
            "spacing_mm": list(rec.spacing),
        }
        for name in (*PM_NAMES, "mip"):
            entry[name] = [rel(p) for p in rec.map_paths[name]]
        entry["gt"] = None if rec.gt_paths is None else [rel(p) for p in rec.gt_paths]
        entry["annotators"] = (
            {k: [rel(p) for p in v] for k, v in rec.annotator_paths.items()}
            if rec.annotator_paths
            else None
        )
        entries.append(entry)
    doc = {"format_version": manifest.format_version, "patients": entries}
    path.write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# Image decoding
# ---------------------------------------------------------------------------

_MODE_MAX = {"L": 255.0, "P": 255.0, "RGB": 255.0, "RGBA": 255.0, "I;16": 65535.0, "I": 65535.0}


def _decode(path: Path, *, color: bool) -> np.ndarray:
    """Decode one slice file to float in [0, 1]; color -> (H, W, 3), else (H, W)."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode not in _MODE_MAX:
                raise ImageDecodeError(f"{path}: unsupported image mode {mode!r}")
            max_value = _MODE_MAX[mode]
            if color:
                if mode == "P":
                    img = img.convert("RGB")
                    max_value = 255.0
                arr = np.asarray(img)
                if arr.ndim != 3 or arr.shape[-1] < 3:
                    raise ImageDecodeError(f"{path}: expected a 3-channel color image")
                arr = arr[..., :3]
            else:
                arr = np.asarray(img)
                if arr.ndim == 3:
                    raise ImageDecodeError(f"{path}: expected a single-channel image")
            return arr.astype(np.float32) / max_value
    except (OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc


def _decode_labels(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                img = img.convert("L")
            return np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode label image ({exc})") from exc


def _load_stack(paths: list[Path], *, color: bool) -> np.ndarray:
    slices = [_decode(p, color=color) for p in paths]
    first = slices[0].shape
    for p, s in zip(paths, slices):
        if s.shape != first:
            raise DimensionMismatchError(
                f"{p}: slice shape {s.shape} differs from first slice {first}"
            )
    return np.stack(slices, axis=0)


def _load_label_stack(paths: list[Path]) -> LabelVolume:
    return LabelVolume(np.stack([_decode_labels(p) for p in paths], axis=0))


def load_patient(manifest: DatasetManifest, patient_id: str) -> PatientStudy:
    """Decode and validate all image stacks for one patient."""
    rec = manifest.record(patient_id)
    maps = ParametricMapStack(
        **{name: _load_stack(rec.map_paths[name], color=True) for name in PM_NAMES}
    )
    mip = MipVolume(_load_stack(rec.map_paths["mip"], color=False))
    gt = None if rec.gt_paths is None else _load_label_stack(rec.gt_paths)
    annotators = {k: _load_label_stack(v) for k, v in rec.annotator_paths.items()}
    return PatientStudy(
        patient_id=rec.patient_id,
        group=rec.group,
        nihss=rec.nihss,
        maps=maps,
        mip=mip,
        spacing=rec.spacing,
        ground_truth=gt,
        annotator_truths=annotators,
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def largest_remainder_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Partition n items into len(ratios) bins by largest-remainder rounding."""
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    leftover = n - sum(sizes)
    # ties broken toward the earlier bin (train first)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        sizes[i] += 1
    return tuple(sizes)


def split_dataset(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> SplitAssignment:
    """Stratified train/validation/test split.

    Within each severity group, patient ids are shuffled by a generator
    seeded from ``seed`` and partitioned into sizes given by
    largest-remainder rounding of the ratios.  The per-group sizes are a
    deterministic function of group sizes and ratios; the seed only
    permutes membership.
    """
    if any(r < 0 for r in ratios) or len(ratios) != 3:
        raise DatasetError("ratios must be 3 nonnegative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)!r}")

    rng = np.random.default_rng(seed)
    train: list[str] = []
    validation: list[str] = []
    test: list[str] = []
    for group in SeverityGroup:
        ids = sorted(manifest.ids_by_group()[group])
        if not ids:
            continue
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        n_train, n_val, _ = largest_remainder_sizes(len(ids), ratios)
        train.extend(shuffled[:n_train])
        validation.extend(shuffled[n_train : n_train + n_val])
        test.extend(shuffled[n_train + n_val :])
    return SplitAssignment(train=train, validation=validation, test=test)
