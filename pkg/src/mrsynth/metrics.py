"""Evaluation metrics and report writers.

Pixel accuracy counts synthesized pixels whose absolute intensity error is
within a tolerance (default 16/255, the 8-bit "within 16" rule on the
normalized scale, inclusive). Dice and the 95th-percentile symmetric surface
distance follow the usual segmentation-challenge definitions; degenerate
cases use the conventions recorded in the report metadata.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .data import Instance, LABEL_INDEX, SEQUENCES, reorganize_rois

DEFAULT_TAU = 16.0 / 255.0
REPORT_VERSION = 1

REGIONS = ("edema", "cavity", "tumor", "lesion", "brain")


class MetricError(Exception):
    """A metric precondition failed (e.g. empty region)."""


def pixel_accuracy(y_hat: np.ndarray, y: np.ndarray, region: np.ndarray,
                   tau: float = DEFAULT_TAU) -> float:
    """Percentage of region pixels with |y_hat - y| <= tau."""
    if y_hat.shape != y.shape or region.shape != y.shape:
        raise ValueError(
            f"shape mismatch: {y_hat.shape} / {y.shape} / {region.shape}"
        )
    sel = region > 0
    n = int(sel.sum())
    if n == 0:
        raise MetricError("undefined accuracy: empty region")
    hits = int((np.abs(y_hat[sel] - y[sel]) <= tau).sum())
    return 100.0 * hits / n


def dice_score(pred_labels: np.ndarray, gt_labels: np.ndarray,
               label: int) -> float:
    """2|P∩G| / (|P|+|G|); both empty counts as perfect agreement (1.0)."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(
            f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}"
        )
    p = pred_labels == label
    g = gt_labels == label
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a 4-neighbor outside the mask."""
    if not mask.any():
        return np.empty((0, 2))
    eroded = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0
    )
    return np.argwhere(mask & ~eroded).astype(np.float64)


def hausdorff95(pred_labels: np.ndarray, gt_labels: np.ndarray, label: int,
                spacing: tuple[float, float] = (1.0, 1.0)) -> float:
    """95th percentile of the symmetric surface distances between the two
    boundaries. Conventions: both empty -> 0; exactly one empty -> image
    diagonal (penalty)."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(
            f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}"
        )
    p = _boundary_points(pred_labels == label) * np.asarray(spacing)
    g = _boundary_points(gt_labels == label) * np.asarray(spacing)
    if len(p) == 0 and len(g) == 0:
        return 0.0
    if len(p) == 0 or len(g) == 0:
        extent = np.asarray(pred_labels.shape) * np.asarray(spacing)
        return float(np.sqrt((extent ** 2).sum()))
    d = cdist(p, g)
    surface_distances = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(surface_distances, 95))


def region_masks(mask: np.ndarray) -> dict[str, np.ndarray]:
    """Evaluation regions from a one-hot mask. Brain is the whole brain:
    normal brain plus lesion."""
    rois = reorganize_rois(mask)
    return {
        "edema": mask[LABEL_INDEX["edema"]],
        "cavity": mask[LABEL_INDEX["cavity"]],
        "tumor": mask[LABEL_INDEX["tumor"]],
        "lesion": rois.lesion,
        "brain": rois.normal_brain + rois.lesion,
    }


@dataclass
class RegionReport:
    """Per-sequence x per-region pixel-accuracy table (percent).

    Accumulates correct/total pixel counts over instances; empty regions are
    skipped rather than counted.
    """

    tau: float = DEFAULT_TAU
    hits: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    def add(self, y_hat: np.ndarray, instance: Instance) -> None:
        regions = region_masks(instance.mask)
        for s, seq in enumerate(SEQUENCES):
            err_ok = np.abs(y_hat[s] - instance.images[s]) <= self.tau
            for region, sel in regions.items():
                n = int((sel > 0).sum())
                if n == 0:
                    continue
                key = (seq, region)
                self.hits[key] = self.hits.get(key, 0) + int(err_ok[sel > 0].sum())
                self.totals[key] = self.totals.get(key, 0) + n

    def accuracy(self, sequence: str, region: str) -> float | None:
        key = (sequence, region)
        if key not in self.totals:
            return None
        return 100.0 * self.hits[key] / self.totals[key]

    def average(self, region: str) -> float | None:
        vals = [self.accuracy(seq, region) for seq in SEQUENCES]
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    def to_rows(self) -> list[dict]:
        rows = []
        for seq in SEQUENCES:
            row = {"sequence": seq}
            for region in REGIONS:
                row[region] = self.accuracy(seq, region)
            rows.append(row)
        avg = {"sequence": "Avg."}
        for region in REGIONS:
            avg[region] = self.average(region)
        rows.append(avg)
        return rows

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# mrsynth-synthesis-report v{REPORT_VERSION} "
                     f"tau={self.tau:.6f} brain=normal_brain+lesion "
                     "lesion=edema+cavity+tumor unit=percent\n")
            writer = csv.DictWriter(fh, fieldnames=["sequence", *REGIONS])
            writer.writeheader()
            for row in self.to_rows():
                writer.writerow({k: ("" if v is None else
                                     v if isinstance(v, str) else f"{v:.2f}")
                                 for k, v in row.items()})
        return path


def segmentation_scores(pred_labels: np.ndarray, gt_labels: np.ndarray,
                        spacing: tuple[float, float] = (1.0, 1.0)) -> dict:
    """Dice and HD95 per lesion class (labels 1..3: edema, cavity, tumor)."""
    names = ("edema", "cavity", "tumor")
    return {
        "dice": {name: dice_score(pred_labels, gt_labels, i + 1)
                 for i, name in enumerate(names)},
        "hd95": {name: hausdorff95(pred_labels, gt_labels, i + 1, spacing)
                 for i, name in enumerate(names)},
    }


def write_augmentation_csv(rows: list[dict], path: str | Path) -> Path:
    """Write the augmentation-experiment table: one row per synthesized/real
    mix with per-class Dice and HD95 columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = ("edema", "cavity", "tumor")
    fields = ["mix", "n_synth", "n_real",
              *[f"dice_{n}" for n in names], *[f"hd95_{n}" for n in names],
              "mean_lesion_dice"]
    with path.open("w", newline="") as fh:
        fh.write(f"# mrsynth-augmentation-report v{REPORT_VERSION} "
                 "hd95_empty_penalty=image_diagonal both_empty_dice=1.0\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            flat = {
                "mix": row["mix"], "n_synth": row["n_synth"],
                "n_real": row["n_real"],
                "mean_lesion_dice": f"{row['mean_lesion_dice']:.4f}",
            }
            for n in names:
                flat[f"dice_{n}"] = f"{row['dice'][n]:.4f}"
                flat[f"hd95_{n}"] = f"{row['hd95'][n]:.4f}"
            writer.writerow(flat)
    return path


def write_json_report(payload: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"report_version": REPORT_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
