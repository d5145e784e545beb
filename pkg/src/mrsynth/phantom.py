"""Procedural paired brain phantoms: desk-scale stand-ins for clinical slices.

Each phantom is a 2D axial slice: an elliptical brain with a gray-matter rim,
two CSF ventricle lobes whose size tracks the slice position, and optionally
a lesion made of a tumor core, a surrounding edema ring, and an interior
cavity. Per-sequence intensities come from a configurable table chosen so
that edema is bright on FLAIR/T2w, the tumor rim enhances on Gd-T1w, tumor
is bright on APTw, and cavity is dark on T1w. Masks and tissue priors are
consistent with the rendered geometry by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import (
    ATLAS_CHANNELS,
    Instance,
    N_SEQUENCES,
    SEQUENCES,
)

RENDER_CLASSES = (
    "background", "wm", "gm", "csf", "edema", "tumor", "tumor_rim", "cavity",
)

# mean intensity per (sequence, render class); one value per entry, shared noise
DEFAULT_INTENSITY_TABLE: dict[str, dict[str, float]] = {
    "APTw":   {"background": 0.02, "wm": 0.35, "gm": 0.42, "csf": 0.28,
               "edema": 0.55, "tumor": 0.85, "tumor_rim": 0.85, "cavity": 0.35},
    "T1w":    {"background": 0.02, "wm": 0.65, "gm": 0.45, "csf": 0.15,
               "edema": 0.35, "tumor": 0.45, "tumor_rim": 0.50, "cavity": 0.10},
    "FLAIR":  {"background": 0.02, "wm": 0.45, "gm": 0.55, "csf": 0.10,
               "edema": 0.85, "tumor": 0.60, "tumor_rim": 0.60, "cavity": 0.15},
    "T2w":    {"background": 0.02, "wm": 0.40, "gm": 0.50, "csf": 0.85,
               "edema": 0.80, "tumor": 0.62, "tumor_rim": 0.62, "cavity": 0.85},
    "Gd-T1w": {"background": 0.02, "wm": 0.60, "gm": 0.45, "csf": 0.15,
               "edema": 0.35, "tumor": 0.40, "tumor_rim": 0.90, "cavity": 0.12},
}


class PhantomGeometryError(Exception):
    """Configured lesion sizes cannot be placed inside the brain ellipse."""


@dataclass
class PhantomConfig:
    """Geometry ranges (pixels), intensity table, noise and blur settings."""

    height: int = 64
    width: int = 64
    lesion_probability: float = 0.75
    cavity_probability: float = 0.5
    # (low, high) sampling ranges, in pixels
    brain_semiaxis_y: tuple[float, float] = (20.0, 25.0)
    brain_semiaxis_x: tuple[float, float] = (18.0, 23.0)
    ventricle_semiaxis_y: tuple[float, float] = (4.0, 6.0)
    ventricle_semiaxis_x: tuple[float, float] = (1.5, 2.5)
    ventricle_offset_x: tuple[float, float] = (3.5, 5.5)
    tumor_radius: tuple[float, float] = (2.5, 4.5)
    edema_width: tuple[int, int] = (1, 3)
    cavity_radius: tuple[float, float] = (0.8, 1.8)
    gm_rim_fraction: float = 0.18          # outer band of the brain ellipse
    tumor_rim_width: int = 1               # Gd-enhancing rim, pixels
    noise_sigma: float = 0.02
    smoothness: float = 0.6                # gaussian blur radius, pixels
    intensity_table: dict[str, dict[str, float]] = field(
        default_factory=lambda: {s: dict(DEFAULT_INTENSITY_TABLE[s])
                                 for s in SEQUENCES})
    n_slice_positions: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height % 16 or self.width % 16:
            raise ValueError("height and width must be divisible by 16")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError("lesion_probability must be in [0,1]")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        for name in ("brain_semiaxis_y", "brain_semiaxis_x", "ventricle_semiaxis_y",
                     "ventricle_semiaxis_x", "ventricle_offset_x", "tumor_radius",
                     "cavity_radius"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} range must be positive and ordered")
        if self.cavity_radius[1] > self.tumor_radius[0]:
            raise ValueError("cavity must nest inside the smallest tumor core")
        for seq in SEQUENCES:
            for cls, mean in self.intensity_table[seq].items():
                if not 0.0 <= mean <= 1.0:
                    raise ValueError(f"intensity mean out of [0,1]: {seq}/{cls}")

    @classmethod
    def for_size(cls, height: int, width: int, **overrides) -> "PhantomConfig":
        """Scale the default 64x64 geometry ranges to another canvas size."""
        s = min(height, width) / 64.0
        scale2 = lambda r: (r[0] * s, r[1] * s)
        cfg = dict(
            height=height, width=width,
            brain_semiaxis_y=scale2((20.0, 25.0)),
            brain_semiaxis_x=scale2((18.0, 23.0)),
            ventricle_semiaxis_y=scale2((4.0, 6.0)),
            ventricle_semiaxis_x=scale2((1.5, 2.5)),
            ventricle_offset_x=scale2((3.5, 5.5)),
            tumor_radius=scale2((2.5, 4.5)),
            edema_width=(max(1, round(1 * s)), max(1, round(3 * s))),
            cavity_radius=scale2((0.8, 1.8)),
            tumor_rim_width=max(1, round(s)),
            smoothness=0.6 * s,
        )
        cfg.update(overrides)
        return cls(**cfg)


@dataclass
class PhantomGeometry:
    """Boolean component maps for one slice; lesion maps may be all-False."""

    brain: np.ndarray
    ventricles: np.ndarray
    gm_band: np.ndarray
    tumor: np.ndarray
    edema: np.ndarray
    cavity: np.ndarray
    slice_index: int


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
             theta: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - cy
    x = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * y + st * x) / ry
    v = (-st * y + ct * x) / rx
    return u * u + v * v <= 1.0


def _uniform(rng: np.random.Generator, lohi: tuple[float, float]) -> float:
    return float(rng.uniform(lohi[0], lohi[1]))


def _ventricle_scale(slice_index: int, n_positions: int) -> float:
    center = (n_positions - 1) / 2.0
    if center <= 0:
        return 1.0
    return 0.4 + 0.6 * max(0.0, 1.0 - abs(slice_index - center) / center)


def sample_geometry(config: PhantomConfig, rng: np.random.Generator,
                    slice_index: int,
                    patient_rng: np.random.Generator | None = None,
                    ) -> PhantomGeometry:
    """Draw one slice geometry. ``patient_rng`` fixes per-patient anatomy so
    that slices of the same patient share brain and ventricle placement."""
    h, w = config.height, config.width
    prng = patient_rng if patient_rng is not None else rng

    cy = h / 2.0 + prng.uniform(-0.03, 0.03) * h
    cx = w / 2.0 + prng.uniform(-0.03, 0.03) * w
    ry = _uniform(prng, config.brain_semiaxis_y)
    rx = _uniform(prng, config.brain_semiaxis_x)
    theta = float(prng.uniform(-0.2, 0.2))
    brain = _ellipse(h, w, cy, cx, ry, rx, theta)

    vscale = _ventricle_scale(slice_index, config.n_slice_positions)
    v_ry = _uniform(prng, config.ventricle_semiaxis_y) * vscale
    v_rx = _uniform(prng, config.ventricle_semiaxis_x) * vscale
    v_dx = _uniform(prng, config.ventricle_offset_x)
    ventricles = (_ellipse(h, w, cy, cx - v_dx, v_ry, v_rx, theta)
                  | _ellipse(h, w, cy, cx + v_dx, v_ry, v_rx, theta))
    ventricles &= brain

    # gray matter rim: outer band of the brain ellipse in normalized radius
    yy, xx = np.mgrid[0:h, 0:w]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    rho2 = ((ct * y + st * x) / ry) ** 2 + ((-st * y + ct * x) / rx) ** 2
    gm_band = brain & (rho2 > (1.0 - config.gm_rim_fraction) ** 2)

    tumor = np.zeros((h, w), dtype=bool)
    edema = np.zeros((h, w), dtype=bool)
    cavity = np.zeros((h, w), dtype=bool)
    if rng.uniform() < config.lesion_probability:
        t_r = _uniform(rng, config.tumor_radius)
        e_w = int(rng.integers(config.edema_width[0], config.edema_width[1] + 1))
        ratio = float(rng.uniform(0.75, 1.25))
        angle = float(rng.uniform(0, np.pi))
        # lesion may reach the cortical band but never the ventricles or
        # the skull boundary; shrink within the configured range if this
        # particular brain cannot host the sampled size
        allowed = brain & ~ventricles
        edt = ndimage.distance_transform_edt(allowed)
        stretch = max(ratio, 1.0 / ratio)
        room = float(edt.max()) - 0.5
        if t_r * stretch + e_w > room:
            e_w = config.edema_width[0]
            t_r = max(config.tumor_radius[0], (room - e_w) / stretch)
        margin = t_r * stretch + e_w + 0.5
        valid = np.argwhere(edt >= margin)
        if valid.size == 0:
            raise PhantomGeometryError(
                f"smallest configured lesion (extent {margin:.1f}px) cannot "
                "fit inside the brain ellipse"
            )
        t_cy, t_cx = (float(v) for v in valid[int(rng.integers(len(valid)))])
        tumor = _ellipse(h, w, t_cy, t_cx, t_r * ratio, t_r / ratio, angle)
        edema = ndimage.binary_dilation(tumor, iterations=e_w) & ~tumor
        if rng.uniform() < config.cavity_probability:
            c_r = _uniform(rng, config.cavity_radius)
            core = ndimage.binary_erosion(tumor)
            cav = _ellipse(h, w, t_cy + rng.uniform(-1, 1),
                           t_cx + rng.uniform(-1, 1), c_r, c_r)
            cavity = cav & core
    return PhantomGeometry(brain=brain, ventricles=ventricles, gm_band=gm_band,
                           tumor=tumor, edema=edema, cavity=cavity,
                           slice_index=slice_index)


def geometry_mask(geom: PhantomGeometry) -> np.ndarray:
    """One-hot [5,H,W] mask: background, normal brain, edema, cavity, tumor."""
    tumor_ch = geom.tumor & ~geom.cavity
    lesion = geom.tumor | geom.edema | geom.cavity
    normal = geom.brain & ~lesion
    mask = np.stack([
        ~geom.brain, normal, geom.edema, geom.cavity, tumor_ch,
    ]).astype(np.float32)
    return mask


def tissue_priors(geom: PhantomGeometry, smoothness: float = 0.6) -> np.ndarray:
    """Smooth WM/GM/CSF probability maps [3,H,W] from the lesion-free anatomy."""
    csf = geom.ventricles.astype(np.float32)
    gm = (geom.gm_band & ~geom.ventricles).astype(np.float32)
    wm = (geom.brain & ~geom.gm_band & ~geom.ventricles).astype(np.float32)
    priors = np.stack([wm, gm, csf])
    if smoothness > 0:
        priors = np.stack([ndimage.gaussian_filter(p, smoothness) for p in priors])
    return np.clip(priors, 0.0, 1.0).astype(np.float32)


def render_class_map(geom: PhantomGeometry, tumor_rim_width: int = 1) -> np.ndarray:
    """Integer map of RENDER_CLASSES codes; later classes override earlier."""
    h, w = geom.brain.shape
    cmap = np.zeros((h, w), dtype=np.int64)  # background = 0
    order = {name: i for i, name in enumerate(RENDER_CLASSES)}
    cmap[geom.brain] = order["wm"]
    cmap[geom.gm_band] = order["gm"]
    cmap[geom.ventricles] = order["csf"]
    cmap[geom.edema] = order["edema"]
    tumor_all = geom.tumor | geom.cavity
    cmap[tumor_all] = order["tumor"]
    if tumor_all.any() and tumor_rim_width > 0:
        rim = tumor_all & ~ndimage.binary_erosion(tumor_all,
                                                  iterations=tumor_rim_width)
        cmap[rim] = order["tumor_rim"]
    cmap[geom.cavity] = order["cavity"]
    return cmap


def render_images(config: PhantomConfig, geom: PhantomGeometry,
                  rng: np.random.Generator) -> np.ndarray:
    """Render the 5-sequence stack [5,H,W] in [0,1] from the class map."""
    cmap = render_class_map(geom, config.tumor_rim_width)
    images = np.empty((N_SEQUENCES, config.height, config.width), dtype=np.float32)
    for s, seq in enumerate(SEQUENCES):
        means = config.intensity_table[seq]
        lut = np.array([means[c] for c in RENDER_CLASSES], dtype=np.float32)
        img = lut[cmap]
        if config.noise_sigma > 0:
            img = img + rng.normal(0.0, config.noise_sigma,
                                   size=img.shape).astype(np.float32)
        if config.smoothness > 0:
            img = ndimage.gaussian_filter(img, config.smoothness)
        images[s] = np.clip(img, 0.0, 1.0)
    return images


def generate_phantom(config: PhantomConfig, seed: int, *,
                     patient_id: str | None = None,
                     slice_index: int | None = None,
                     patient_seed: int | None = None) -> Instance:
    """Generate one phantom instance, deterministic in (config, seed).

    The atlas channels are filled with the instance's own images as a
    placeholder triplet; :func:`make_dataset` replaces them with proper
    group averages.
    """
    sl = slice_index if slice_index is not None else (config.n_slice_positions - 1) // 2
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, sl]))
    prng = (np.random.default_rng(np.random.SeedSequence([patient_seed & 0x7FFFFFFF]))
            if patient_seed is not None else None)
    geom = sample_geometry(config, rng, sl, patient_rng=prng)
    images = render_images(config, geom, rng)
    mask = geometry_mask(geom)
    priors = tissue_priors(geom, config.smoothness)
    atlas = np.repeat(images, 3, axis=0)
    assert atlas.shape[0] == ATLAS_CHANNELS
    return Instance(
        images=images, mask=mask, atlas=atlas, tissue_priors=priors,
        patient_id=patient_id if patient_id is not None else f"P{seed:05d}",
        slice_index=sl,
    )


@dataclass
class AtlasVolume:
    """Per-slice-position group-average images, shape [n_positions,5,H,W]."""

    data: np.ndarray

    @property
    def n_positions(self) -> int:
        return self.data.shape[0]

    def triplet(self, slice_index: int) -> np.ndarray:
        """Atlas channels [15,H,W] for a slice: previous, center, next per
        sequence, with neighbors clamped at the volume boundaries."""
        p = int(np.clip(slice_index, 0, self.n_positions - 1))
        lo = max(p - 1, 0)
        hi = min(p + 1, self.n_positions - 1)
        chans = []
        for s in range(N_SEQUENCES):
            chans.extend([self.data[lo, s], self.data[p, s], self.data[hi, s]])
        return np.stack(chans).astype(np.float32)


def build_atlas(instances: list[Instance],
                n_positions: int | None = None) -> AtlasVolume:
    """Pixel-wise mean of images per sequence and slice position.

    Positions with no instances fall back to the global mean over all
    instances.
    """
    if not instances:
        raise ValueError("need at least one instance to build an atlas")
    shape = instances[0].images.shape
    for inst in instances:
        if inst.images.shape != shape:
            raise ValueError(
                f"shape mismatch: {inst.images.shape} != {shape}"
            )
    if n_positions is None:
        n_positions = max(inst.slice_index for inst in instances) + 1
    sums = np.zeros((n_positions,) + shape, dtype=np.float64)
    counts = np.zeros(n_positions, dtype=np.int64)
    total = np.zeros(shape, dtype=np.float64)
    for inst in instances:
        sums[inst.slice_index] += inst.images
        counts[inst.slice_index] += 1
        total += inst.images
    global_mean = total / len(instances)
    data = np.empty_like(sums, dtype=np.float32)
    for p in range(n_positions):
        data[p] = (sums[p] / counts[p] if counts[p] else global_mean).astype(np.float32)
    return AtlasVolume(data=data)


# slice positions are handed out in this order so small patient counts still
# cover the center of the volume first
_POSITION_CYCLE = (7, 5, 9, 3, 11, 1, 13, 0, 14, 6, 8, 2, 12, 4, 10)


def make_dataset(config: PhantomConfig, count: int, seed: int,
                 slices_per_patient: int = 5,
                 ) -> tuple[list[Instance], AtlasVolume]:
    """Generate ``count`` instances grouped into patients, plus their atlas.

    Patients share anatomy; slices vary ventricle size and lesion content.
    Every instance's atlas triplet is populated from the built atlas volume.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    slices_per_patient = max(1, min(slices_per_patient, config.n_slice_positions))
    instances: list[Instance] = []
    for i in range(count):
        patient_idx = i // slices_per_patient
        pos = _POSITION_CYCLE[(i % slices_per_patient) % len(_POSITION_CYCLE)]
        inst = generate_phantom(
            config,
            seed=seed + i,
            patient_id=f"P{patient_idx:04d}",
            slice_index=pos,
            patient_seed=(seed * 100003 + patient_idx) & 0x7FFFFFFF,
        )
        instances.append(inst)
    atlas = build_atlas(instances, n_positions=config.n_slice_positions)
    for inst in instances:
        inst.atlas = atlas.triplet(inst.slice_index)
    return instances, atlas


def class_separability(instances: list[Instance],
                       classes: tuple[int, ...] = (1, 2, 3, 4)) -> float:
    """Worst-case contrast between mask classes across sequences.

    For every pair of mask classes present in the corpus, take the largest
    per-sequence difference of mean intensities; return the minimum over
    pairs. A learnable corpus keeps this above a few noise sigmas.
    """
    sums = np.zeros((len(classes), N_SEQUENCES))
    counts = np.zeros(len(classes))
    for inst in instances:
        for ci, c in enumerate(classes):
            sel = inst.mask[c] > 0
            if sel.any():
                sums[ci] += inst.images[:, sel].mean(axis=1)
                counts[ci] += 1
    means = sums / np.maximum(counts[:, None], 1)
    present = [i for i in range(len(classes)) if counts[i] > 0]
    worst = np.inf
    for a in range(len(present)):
        for b in range(a + 1, len(present)):
            contrast = np.abs(means[present[a]] - means[present[b]]).max()
            worst = min(worst, contrast)
    return float(worst)
