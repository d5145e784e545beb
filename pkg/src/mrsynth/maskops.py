"""Lesion-mask manipulation: area-targeted scaling, transplantation between
slices, translation, and seeded random composition of those ops.

All operations take and return one-hot [5,H,W] masks, never move lesion
pixels outside the brain, and respect the lesion nesting order (cavity
inside tumor inside edema inside normal brain): a growing class consumes the
next class outward first, a shrinking class cedes its pixels to that class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LABEL_INDEX, LESION_LABELS, N_MASK_LABELS

_BG = LABEL_INDEX["background"]
_NORMAL = LABEL_INDEX["normal_brain"]
_EDEMA = LABEL_INDEX["edema"]
_CAVITY = LABEL_INDEX["cavity"]
_TUMOR = LABEL_INDEX["tumor"]

# growth priority (first listed consumed first) and shrink target per label
_GROW_INTO = {
    _TUMOR: (_EDEMA, _NORMAL),
    _EDEMA: (_NORMAL,),
    _CAVITY: (_TUMOR,),
}
_SHRINK_INTO = {
    _TUMOR: _EDEMA,
    _EDEMA: _NORMAL,
    _CAVITY: _TUMOR,
}


class MaskOpError(Exception):
    """A manipulation cannot be applied to this mask."""


def _validate_onehot(mask: np.ndarray, name: str = "mask") -> None:
    if mask.ndim != 3 or mask.shape[0] != N_MASK_LABELS:
        raise MaskOpError(f"{name} must be [{N_MASK_LABELS},H,W], got {mask.shape}")
    if not (np.isin(mask, (0.0, 1.0)).all() and np.all(mask.sum(axis=0) == 1.0)):
        raise MaskOpError(f"{name} not one-hot")


def _label_index(label: str | int) -> int:
    if isinstance(label, str):
        if label not in LESION_LABELS:
            raise MaskOpError(f"label must be one of {LESION_LABELS}, got {label!r}")
        return LABEL_INDEX[label]
    if label not in (_EDEMA, _CAVITY, _TUMOR):
        raise MaskOpError(f"label index {label} is not a lesion class")
    return label


def _labels_of(mask: np.ndarray) -> np.ndarray:
    return mask.argmax(axis=0)


def _onehot_from_labels(labels: np.ndarray) -> np.ndarray:
    out = np.zeros((N_MASK_LABELS,) + labels.shape, dtype=np.float32)
    for c in range(N_MASK_LABELS):
        out[c][labels == c] = 1.0
    return out


def _distance_outside(region: np.ndarray) -> np.ndarray:
    """Euclidean distance of every pixel to the region (0 inside it)."""
    from scipy import ndimage
    return ndimage.distance_transform_edt(~region)


def _distance_inside(region: np.ndarray) -> np.ndarray:
    """Euclidean distance to the region's complement (0 outside it)."""
    from scipy import ndimage
    return ndimage.distance_transform_edt(region)


def scale_lesion(mask: np.ndarray, label: str | int, factor: float) -> np.ndarray:
    """Grow or shrink one lesion class to ``factor`` times its area.

    Pixels are added boundary-first (preferring the nesting-priority class)
    or removed boundary-first, so the result stays compact and hits the
    target area exactly whenever enough room exists.
    """
    if factor <= 0:
        raise MaskOpError(f"scale factor must be > 0, got {factor}")
    _validate_onehot(mask)
    ci = _label_index(label)
    labels = _labels_of(mask)
    region = labels == ci
    area = int(region.sum())
    if area == 0:
        raise MaskOpError(f"label absent from mask: {LESION_LABELS[ci - 2]}")
    target = max(1, int(round(factor * area)))
    if target == area:
        return mask.astype(np.float32).copy()
    if target > area:
        need = target - area
        dist = _distance_outside(region)
        chosen_rows = []
        for prio, into in enumerate(_GROW_INTO[ci]):
            cand = np.argwhere(labels == into)
            if len(cand) == 0:
                continue
            d = dist[cand[:, 0], cand[:, 1]]
            order = np.lexsort((cand[:, 1], cand[:, 0], d))
            chosen_rows.append(cand[order])
        pool = (np.concatenate(chosen_rows) if chosen_rows
                else np.empty((0, 2), dtype=int))
        if len(pool) < need:
            raise MaskOpError(
                f"growth exceeds brain extent: need {need} pixels, "
                f"only {len(pool)} available"
            )
        take = pool[:need]
        labels = labels.copy()
        labels[take[:, 0], take[:, 1]] = ci
    else:
        drop = area - target
        dist = _distance_inside(region)
        cand = np.argwhere(region)
        d = dist[cand[:, 0], cand[:, 1]]
        order = np.lexsort((cand[:, 1], cand[:, 0], d))
        take = cand[order][:drop]
        labels = labels.copy()
        labels[take[:, 0], take[:, 1]] = _SHRINK_INTO[ci]
    return _onehot_from_labels(labels)


def _lesion_channels(mask: np.ndarray) -> np.ndarray:
    return mask[2:5]


def _centroid(binary: np.ndarray) -> np.ndarray:
    pts = np.argwhere(binary)
    return pts.mean(axis=0)


def _clear_lesion(labels: np.ndarray) -> np.ndarray:
    out = labels.copy()
    out[(out == _EDEMA) | (out == _CAVITY) | (out == _TUMOR)] = _NORMAL
    return out


def transplant_lesion(src_mask: np.ndarray, dst_mask: np.ndarray) -> np.ndarray:
    """Replace the destination's lesion with the source's.

    The source lesion is stamped centroid-aligned: onto the old lesion's
    centroid when the destination had one, otherwise onto the brain centroid.
    """
    _validate_onehot(src_mask, "src_mask")
    _validate_onehot(dst_mask, "dst_mask")
    src_labels = _labels_of(src_mask)
    dst_labels = _labels_of(dst_mask)
    src_lesion = (src_labels >= _EDEMA)
    dst_lesion = (dst_labels >= _EDEMA)
    cleared = _clear_lesion(dst_labels)
    if not src_lesion.any():
        return _onehot_from_labels(cleared)
    target = (_centroid(dst_lesion) if dst_lesion.any()
              else _centroid(cleared == _NORMAL))
    shift = np.round(target - _centroid(src_lesion)).astype(int)
    pts = np.argwhere(src_lesion) + shift
    h, w = dst_labels.shape
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] < h)
              & (pts[:, 1] >= 0) & (pts[:, 1] < w))
    if not inside.all():
        raise MaskOpError("src lesion does not fit within dst brain")
    if (cleared[pts[:, 0], pts[:, 1]] != _NORMAL).any():
        raise MaskOpError("src lesion does not fit within dst brain")
    src_pts = np.argwhere(src_lesion)
    cleared[pts[:, 0], pts[:, 1]] = src_labels[src_pts[:, 0], src_pts[:, 1]]
    return _onehot_from_labels(cleared)


def translate_lesion(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift the whole lesion by (dy, dx) pixels within the brain."""
    _validate_onehot(mask)
    labels = _labels_of(mask)
    lesion = labels >= _EDEMA
    if not lesion.any():
        return mask.astype(np.float32).copy()
    cleared = _clear_lesion(labels)
    pts = np.argwhere(lesion) + np.array([dy, dx])
    h, w = labels.shape
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] < h)
              & (pts[:, 1] >= 0) & (pts[:, 1] < w))
    if not inside.all():
        raise MaskOpError("translated lesion leaves the image")
    if (cleared[pts[:, 0], pts[:, 1]] != _NORMAL).any():
        raise MaskOpError("translated lesion leaves the brain")
    src_pts = np.argwhere(lesion)
    cleared[pts[:, 0], pts[:, 1]] = labels[src_pts[:, 0], src_pts[:, 1]]
    return _onehot_from_labels(cleared)


@dataclass
class ManipulationPolicy:
    """Allowed random ops and their parameter ranges."""

    ops: tuple[str, ...] = ("scale", "translate")
    scale_labels: tuple[str, ...] = LESION_LABELS
    scale_range: tuple[float, float] = (0.5, 2.0)
    translate_max: int = 4
    n_ops: tuple[int, int] = (1, 2)
    donor_masks: list = field(default_factory=list)  # sources for "transplant"


@dataclass
class ManipulationResult:
    mask: np.ndarray
    applied: list[str]
    feasible: bool


def random_manipulation(mask: np.ndarray, seed: int,
                        policy: ManipulationPolicy | None = None
                        ) -> ManipulationResult:
    """Apply a seeded random composition of policy ops to a mask.

    Infeasible draws are skipped; if nothing could be applied the input mask
    is returned unchanged with ``feasible=False``.
    """
    policy = policy or ManipulationPolicy()
    _validate_onehot(mask)
    rng = np.random.default_rng(seed)
    current = mask.astype(np.float32).copy()
    applied: list[str] = []
    if not policy.ops:
        return ManipulationResult(current, applied, feasible=False)
    n_ops = int(rng.integers(policy.n_ops[0], policy.n_ops[1] + 1))
    for _ in range(n_ops):
        # up to a handful of fresh (op, parameter) draws per slot; a single
        # infeasible draw should not forfeit the manipulation
        for _attempt in range(6):
            op = str(rng.choice(policy.ops))
            try:
                if op == "scale":
                    present = [lbl for lbl in policy.scale_labels
                               if current[LABEL_INDEX[lbl]].sum() > 0]
                    if not present:
                        continue
                    lbl = str(rng.choice(present))
                    factor = float(rng.uniform(*policy.scale_range))
                    current = scale_lesion(current, lbl, factor)
                    applied.append(f"scale:{lbl}:{factor:.2f}")
                elif op == "translate":
                    if current[2:5].sum() == 0:
                        continue
                    m = policy.translate_max
                    dy = int(rng.integers(-m, m + 1))
                    dx = int(rng.integers(-m, m + 1))
                    current = translate_lesion(current, dy, dx)
                    applied.append(f"translate:{dy}:{dx}")
                elif op == "transplant":
                    if not policy.donor_masks:
                        continue
                    donor = policy.donor_masks[
                        int(rng.integers(len(policy.donor_masks)))]
                    current = transplant_lesion(donor, current)
                    applied.append("transplant")
                else:
                    raise ValueError(f"unknown op in policy: {op!r}")
                break
            except MaskOpError:
                continue
    return ManipulationResult(current, applied, feasible=bool(applied))
