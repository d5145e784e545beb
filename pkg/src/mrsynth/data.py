"""Domain types, the on-disk instance format, dataset splitting, downsampling.

An *instance* is one training example: a 5-sequence image slice stack, a
one-hot lesion mask, a 15-channel atlas stack (center slice plus the two
axially adjacent atlas slices per sequence), and 3-channel WM/GM/CSF tissue
priors. All tensors are float32 in [0, 1], stored on disk as raw
little-endian float32 in C order next to a ``meta.json`` sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

SEQUENCES = ("APTw", "T1w", "FLAIR", "T2w", "Gd-T1w")
MASK_LABELS = ("background", "normal_brain", "edema", "cavity", "tumor")
LESION_LABELS = ("edema", "cavity", "tumor")
PRIOR_LABELS = ("WM", "GM", "CSF")

N_SEQUENCES = len(SEQUENCES)
N_MASK_LABELS = len(MASK_LABELS)
ATLAS_CHANNELS = 3 * N_SEQUENCES

# Index of each label in the mask channel axis.
LABEL_INDEX = {name: i for i, name in enumerate(MASK_LABELS)}

_FIELD_FILES = ("images", "mask", "atlas", "tissue_priors")


class DataError(Exception):
    """Base error for instance / dataset format problems."""


class InstanceValidationError(DataError):
    """An instance violates a type invariant; the message names it."""


@dataclass
class Instance:
    """One example: images, one-hot mask, atlas triplets, tissue priors.

    Shapes: images [5,H,W], mask [5,H,W], atlas [15,H,W], tissue_priors
    [3,H,W]; H and W divisible by 16. The atlas layout is
    ``atlas[3*s + j]`` = atlas slice at position ``slice_index + (j - 1)``
    for sequence ``s`` (neighbors clamped at volume boundaries).
    """

    images: np.ndarray
    mask: np.ndarray
    atlas: np.ndarray
    tissue_priors: np.ndarray
    patient_id: str
    slice_index: int

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


@dataclass
class RoiMasks:
    """Background / normal-brain / lesion masks partitioning the pixel grid."""

    background: np.ndarray
    normal_brain: np.ndarray
    lesion: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.background, self.normal_brain, self.lesion])


@dataclass
class DatasetSplit:
    """Patient-disjoint train/test partition of a list of instances."""

    train: list[Instance] = field(default_factory=list)
    test: list[Instance] = field(default_factory=list)

    @property
    def train_patients(self) -> set[str]:
        return {inst.patient_id for inst in self.train}

    @property
    def test_patients(self) -> set[str]:
        return {inst.patient_id for inst in self.test}


def _check_unit_range(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise InstanceValidationError(f"{name} contains NaN/Inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InstanceValidationError(f"{name} values outside [0,1]")


def validate_instance(instance: Instance) -> None:
    """Raise :class:`InstanceValidationError` naming the violated invariant."""
    img = instance.images
    if img.ndim != 3 or img.shape[0] != N_SEQUENCES:
        raise InstanceValidationError(
            f"images must be [{N_SEQUENCES},H,W], got {img.shape}"
        )
    h, w = img.shape[1:]
    if h % 16 or w % 16:
        raise InstanceValidationError(f"H and W must be divisible by 16, got {h}x{w}")
    expected = {
        "images": (N_SEQUENCES, h, w),
        "mask": (N_MASK_LABELS, h, w),
        "atlas": (ATLAS_CHANNELS, h, w),
        "tissue_priors": (len(PRIOR_LABELS), h, w),
    }
    for name, shape in expected.items():
        arr = getattr(instance, name if name != "tissue_priors" else "tissue_priors")
        if arr.shape != shape:
            raise InstanceValidationError(f"{name} shape {arr.shape} != {shape}")
    _check_unit_range("images", img)
    _check_unit_range("atlas", instance.atlas)
    _check_unit_range("tissue_priors", instance.tissue_priors)
    mask = instance.mask
    if not np.isfinite(mask).all():
        raise InstanceValidationError("mask contains NaN/Inf")
    onehot = np.isin(mask, (0.0, 1.0)).all() and np.all(mask.sum(axis=0) == 1.0)
    if not onehot:
        raise InstanceValidationError("mask not one-hot")


def save_instance(instance: Instance, path: str | Path) -> Path:
    """Write one instance directory (meta.json + raw f32le .bin per field).

    The instance is validated first; round-trip through
    :func:`load_instance` is bit-exact.
    """
    validate_instance(instance)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "dtype": "f32le",
        "order": "C",
        "sequences": list(SEQUENCES),
        "mask_labels": list(MASK_LABELS),
        "prior_labels": list(PRIOR_LABELS),
        "patient_id": instance.patient_id,
        "slice_index": int(instance.slice_index),
        "shapes": {
            "images": list(instance.images.shape),
            "mask": list(instance.mask.shape),
            "atlas": list(instance.atlas.shape),
            "tissue_priors": list(instance.tissue_priors.shape),
        },
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name in _FIELD_FILES:
        arr = getattr(instance, name)
        (out / f"{name}.bin").write_bytes(
            np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
        )
    return out


def load_instance(path: str | Path) -> Instance:
    """Read and validate an instance directory written by :func:`save_instance`."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported version: {version!r}")
    arrays = {}
    for name in _FIELD_FILES:
        bin_path = root / f"{name}.bin"
        if not bin_path.is_file():
            raise DataError(f"missing file: {bin_path}")
        shape = tuple(meta["shapes"][name])
        raw = bin_path.read_bytes()
        expected_bytes = int(np.prod(shape)) * 4
        if len(raw) != expected_bytes:
            raise DataError(
                f"size mismatch: {bin_path} has {len(raw)} bytes, "
                f"expected {expected_bytes} for shape {shape}"
            )
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    instance = Instance(
        images=arrays["images"],
        mask=arrays["mask"],
        atlas=arrays["atlas"],
        tissue_priors=arrays["tissue_priors"],
        patient_id=str(meta["patient_id"]),
        slice_index=int(meta["slice_index"]),
    )
    validate_instance(instance)
    return instance


def save_dataset(instances: list[Instance], root: str | Path,
                 atlas_volume: np.ndarray | None = None) -> Path:
    """Write a dataset root: one directory per instance plus dataset.json.

    ``atlas_volume`` ([n_slices,5,H,W]) is stored as atlas.bin + atlas.json
    when given.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    patients = {}
    for i, inst in enumerate(instances):
        name = f"instance_{i:05d}"
        save_instance(inst, root / name)
        names.append(name)
        patients[name] = inst.patient_id
    manifest = {
        "format_version": FORMAT_VERSION,
        "instances": names,
        "patients": patients,
    }
    if atlas_volume is not None:
        (root / "atlas.bin").write_bytes(
            np.ascontiguousarray(atlas_volume, dtype="<f4").tobytes(order="C")
        )
        (root / "atlas.json").write_text(json.dumps(
            {"format_version": FORMAT_VERSION, "shape": list(atlas_volume.shape)},
            indent=2, sort_keys=True,
        ))
        manifest["atlas_file"] = "atlas.bin"
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root: str | Path) -> list[Instance]:
    """Load every instance listed in dataset.json, in manifest order."""
    root = Path(root)
    manifest_path = root / "dataset.json"
    if not manifest_path.is_file():
        raise DataError(f"missing file: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported version: {manifest.get('format_version')!r}")
    return [load_instance(root / name) for name in manifest["instances"]]


def load_atlas_volume(root: str | Path) -> np.ndarray:
    """Read the atlas volume ([n_slices,5,H,W]) stored next to dataset.json."""
    root = Path(root)
    meta_path = root / "atlas.json"
    if not meta_path.is_file():
        raise DataError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    shape = tuple(meta["shape"])
    raw = (root / "atlas.bin").read_bytes()
    if len(raw) != int(np.prod(shape)) * 4:
        raise DataError("size mismatch: atlas.bin does not match atlas.json shape")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def split_dataset(instances: list[Instance], test_fraction: float,
                  seed: int) -> DatasetSplit:
    """Patient-level train/test split, deterministic in (instances, seed).

    The number of test patients is round(test_fraction * n_patients),
    clamped so both sides are nonempty.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    patients = sorted({inst.patient_id for inst in instances})
    if len(patients) < 2:
        raise DataError(
            f"need at least 2 distinct patients to split, got {len(patients)}"
        )
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_test = int(round(test_fraction * len(patients)))
    n_test = min(max(n_test, 1), len(patients) - 1)
    test_ids = set(order[:n_test])
    split = DatasetSplit()
    for inst in instances:
        (split.test if inst.patient_id in test_ids else split.train).append(inst)
    return split


def reorganize_rois(mask: np.ndarray) -> RoiMasks:
    """Collapse the one-hot mask into background / normal-brain / lesion ROIs.

    Lesion is the union of the edema, cavity and tumor channels; the three
    outputs partition the pixel grid exactly.
    """
    if mask.ndim != 3 or mask.shape[0] != N_MASK_LABELS:
        raise InstanceValidationError(
            f"mask must be [{N_MASK_LABELS},H,W], got {mask.shape}"
        )
    if not (np.isin(mask, (0.0, 1.0)).all() and np.all(mask.sum(axis=0) == 1.0)):
        raise InstanceValidationError("mask not one-hot")
    lesion = mask[2] + mask[3] + mask[4]
    return RoiMasks(
        background=mask[0].astype(np.float32),
        normal_brain=mask[1].astype(np.float32),
        lesion=lesion.astype(np.float32),
    )


def downsample_half(image: np.ndarray) -> np.ndarray:
    """2x2 non-overlapping average pooling over the trailing two axes.

    This is the single x0.5 operator used for ground-truth half-scale
    targets and for multi-scale discriminator inputs (it matches
    ``torch.nn.functional.avg_pool2d(x, 2)`` exactly).
    """
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    lead = image.shape[:-2]
    pooled = image.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return pooled.astype(image.dtype, copy=False)
