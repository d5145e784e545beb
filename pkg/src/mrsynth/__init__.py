"""Confidence-guided synthesis of multi-sequence brain MR slices from lesion masks.

The package provides:

- ``data``: instance/dataset types, the on-disk format, patient-level splits,
  and the canonical 2x2 average-pooling downsampler.
- ``phantom``: procedural paired brain phantoms (images, masks, atlas, priors).
- ``generator``: encoder / residual trunk / five-branch stretch-out decoder
  with per-branch synthesis and confidence modules.
- ``discriminator``: ROI-masked multi-scale patch discriminators.
- ``segmenter``: U-net lesion segmenter used for shape consistency and for
  augmentation experiments.
- ``losses``: every training objective as a pure, testable function.
- ``metrics``: within-tolerance pixel accuracy, Dice, HD95, report writers.
- ``maskops``: lesion mask scaling / transplantation / random manipulation.
- ``training``: paired and unpaired loops, schedules, checkpoints,
  augmentation experiment driver.
- ``cli``: the ``mrsynth`` command-line surface.
"""

from .data import (
    Instance,
    DatasetSplit,
    RoiMasks,
    downsample_half,
    load_instance,
    reorganize_rois,
    save_instance,
    split_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "Instance",
    "DatasetSplit",
    "RoiMasks",
    "downsample_half",
    "load_instance",
    "reorganize_rois",
    "save_instance",
    "split_dataset",
    "__version__",
]
