"""Every training objective as a pure, independently testable function.

Reductions: the confidence-map loss and the plain L1 stream losses sum over
channels and pixels per sample and average over the batch (their weighted-L1
and log-regularizer forms are written as sums; the per-pixel confidence
optimum c* = lambda_cm/|err| is reduction-invariant). Feature matching
normalizes each layer by its element count, adversarial terms are batch
means, and the generalized Dice loss is a scale-free ratio. The convention
is recorded in :class:`LossReport.reduction`. Adversarial terms use sigmoid
cross-entropy on the *mean patch logit* of each member, with the
non-saturating form on the generator side. All functions accept float32 or
float64 tensors and preserve autograd graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .discriminator import PatchResponse

REDUCTION = "sum_per_sample_mean_batch"

Scalar = torch.Tensor | float


def _sum_per_sample(t: torch.Tensor) -> torch.Tensor:
    """Sum over channels+pixels per sample, mean over the batch; tensors
    without a batch axis ([C,H,W] or lower) reduce to a plain sum."""
    if t.ndim >= 4:
        return t.flatten(1).sum(dim=1).mean()
    return t.sum()


def l1_sum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample summed absolute difference, batch-averaged."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _sum_per_sample((a - b).abs())


@dataclass
class LossWeights:
    """Objective weights: fm, sc, cm are the three term weights; the cm_reg_*
    values are the confidence regularizer constant before and after the
    mean-confidence trigger."""

    fm: float = 5.0
    sc: float = 1.0
    cm: float = 1.0
    cm_reg_initial: float = 0.1
    cm_reg_triggered: float = 0.03
    cm_trigger: float = 0.7

    def __post_init__(self) -> None:
        for name in ("fm", "sc", "cm", "cm_reg_initial", "cm_reg_triggered"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    """Named scalar terms plus their weighted total.

    Fields may hold tensors (inside a training step) or plain floats; absent
    terms stay None. ``total`` always equals the configured weighted sum of
    the present terms.
    """

    gan_g: Scalar | None = None
    gan_d: Scalar | None = None
    fm: Scalar | None = None
    sc: Scalar | None = None
    cm: Scalar | None = None
    recon1: Scalar | None = None
    recon2: Scalar | None = None
    cyc1: Scalar | None = None
    cyc2: Scalar | None = None
    total: Scalar = 0.0
    reduction: str = REDUCTION
    weights: dict = field(default_factory=dict)

    _TERMS = ("gan_g", "gan_d", "fm", "sc", "cm",
              "recon1", "recon2", "cyc1", "cyc2", "total")

    def to_dict(self) -> dict:
        """Plain-float view for JSON logging."""
        out = {}
        for name in self._TERMS:
            value = getattr(self, name)
            if isinstance(value, torch.Tensor):
                value = float(value.detach())
            out[name] = value
        out["reduction"] = self.reduction
        out["weights"] = dict(self.weights)
        return out


def confidence_map_loss(y_hat_half: torch.Tensor, conf_half: torch.Tensor,
                        y_half: torch.Tensor, lambda_cm: float) -> torch.Tensor:
    """Confidence-weighted L1 against the half-scale target, with a
    -lambda_cm * mean(log c) regularizer that rules out the all-zero
    confidence solution."""
    if y_hat_half.shape != y_half.shape or conf_half.shape != y_half.shape:
        raise ValueError(
            f"shape mismatch: {tuple(y_hat_half.shape)} / "
            f"{tuple(conf_half.shape)} / {tuple(y_half.shape)}"
        )
    if conf_half.min() <= 0.0 or conf_half.max() > 1.0:
        raise ValueError("confidence outside (0,1]")
    weighted_l1 = _sum_per_sample(conf_half * (y_hat_half - y_half).abs())
    regularizer = _sum_per_sample(torch.log(conf_half))
    return weighted_l1 - lambda_cm * regularizer


def _mean_patch_logit(response: PatchResponse) -> torch.Tensor:
    return response.logits.mean(dim=(1, 2, 3))


def discriminator_adversarial_loss(real: list[PatchResponse],
                                   fake: list[PatchResponse]) -> torch.Tensor:
    """Cross-entropy the discriminators minimize: real toward 1, fake toward
    0, summed over members, batch-averaged. Patch logits are averaged within
    each member before the cross-entropy."""
    if len(real) != len(fake):
        raise ValueError("misaligned member responses")
    total = 0.0
    for r, f_ in zip(real, fake):
        zr = _mean_patch_logit(r)
        zf = _mean_patch_logit(f_)
        total = total + (F.softplus(-zr) + F.softplus(zf)).mean()
    return total


def generator_adversarial_loss(fake: list[PatchResponse]) -> torch.Tensor:
    """Non-saturating generator term: -log D(fake), summed over members."""
    total = 0.0
    for f_ in fake:
        total = total + F.softplus(-_mean_patch_logit(f_)).mean()
    return total


def adversarial_losses(disc_set, x: torch.Tensor, y_real: torch.Tensor,
                       y_fake: torch.Tensor, rois) -> tuple[torch.Tensor, torch.Tensor]:
    """Convenience wrapper returning (generator term, discriminator term).

    The discriminator term sees the fake detached, so its gradients touch
    only discriminator parameters; the generator term is non-saturating.
    """
    real = disc_set.respond_all(x, y_real, rois)
    fake_for_g = disc_set.respond_all(x, y_fake, rois)
    fake_for_d = disc_set.respond_all(x, y_fake.detach(), rois)
    return (generator_adversarial_loss(fake_for_g),
            discriminator_adversarial_loss(real, fake_for_d))


def feature_matching_loss(real: list[PatchResponse],
                          fake: list[PatchResponse]) -> torch.Tensor:
    """Per-layer mean squared feature difference, summed over layers and
    members. The real side is detached: gradients flow to the generator only."""
    if len(real) != len(fake):
        raise ValueError("misaligned feature lists: member counts differ")
    total = 0.0
    for r, f_ in zip(real, fake):
        if len(r.features) != len(f_.features):
            raise ValueError("misaligned feature lists: layer counts differ")
        for fr, ff in zip(r.features, f_.features):
            if fr.shape != ff.shape:
                raise ValueError(
                    f"misaligned feature lists: {tuple(fr.shape)} vs "
                    f"{tuple(ff.shape)}"
                )
            total = total + ((fr.detach() - ff) ** 2).mean()
    return total


def generalized_dice_loss(r: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """1 - 2*sum(r*s) / (sum(r) + sum(s)) over probability maps in [0,1].

    Two identically-zero maps agree perfectly on absence: loss 0.
    """
    if r.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(s.shape)}")
    for name, t in (("r", r), ("s", s)):
        if t.min() < 0.0 or t.max() > 1.0:
            raise ValueError(f"{name} values outside [0,1]")
    denom = r.sum() + s.sum()
    if denom == 0:
        return (r * s).sum()  # zero, but keeps the autograd graph alive
    return 1.0 - 2.0 * (r * s).sum() / denom


def multiclass_generalized_dice_loss(r: torch.Tensor, s: torch.Tensor,
                                     class_dim: int = 1) -> torch.Tensor:
    """Class-wise GDL averaged over classes ([B,C,H,W] or [C,H,W] maps)."""
    if r.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(s.shape)}")
    n_classes = r.shape[class_dim]
    per_class = [
        generalized_dice_loss(r.select(class_dim, c), s.select(class_dim, c))
        for c in range(n_classes)
    ]
    return torch.stack(per_class).mean()


def shape_consistency_loss(segmenter, y_real: torch.Tensor,
                           y_fake: torch.Tensor,
                           s_true: torch.Tensor) -> torch.Tensor:
    """GDL(s, U(y)) + GDL(s, U(G(x))): ties predicted lesion shape on both
    real and synthesized stacks to the ground-truth lesion map. Gradients
    reach the segmenter through both terms and the generator through the
    second."""
    probs_real = segmenter(y_real)
    probs_fake = segmenter(y_fake)
    return (multiclass_generalized_dice_loss(s_true, probs_real)
            + multiclass_generalized_dice_loss(s_true, probs_fake))


def paired_objective(gan_g, gan_d=None, fm=None, sc=None, cm=None,
                     weights: LossWeights | None = None) -> LossReport:
    """Compose the paired multi-task objective.

    total = gan_g + fm_weight*fm + sc_weight*sc + cm_weight*cm over the
    terms present (an absent term means its ablation switch is off).
    ``gan_d`` is carried for reporting; discriminators maximize the
    adversarial objective separately.
    """
    w = weights or LossWeights()
    total = gan_g
    if fm is not None:
        total = total + w.fm * fm
    if sc is not None:
        total = total + w.sc * sc
    if cm is not None:
        total = total + w.cm * cm
    return LossReport(
        gan_g=gan_g, gan_d=gan_d, fm=fm, sc=sc, cm=cm, total=total,
        weights={"fm": w.fm, "sc": w.sc, "cm": w.cm},
    )


def unpaired_objective(recon1, recon2, gan1_g, gan2_g, cyc1, cyc2,
                       gan_d=None) -> LossReport:
    """Compose the unpaired objective: both domains' reconstruction,
    adversarial and cycle terms, equally weighted. ``recon2`` and ``cyc2``
    must already include their confidence-map additions."""
    streams = {"recon1": recon1, "recon2": recon2, "gan1_g": gan1_g,
               "gan2_g": gan2_g, "cyc1": cyc1, "cyc2": cyc2}
    missing = [name for name, value in streams.items() if value is None]
    if missing:
        raise ValueError(f"missing stream: {', '.join(missing)}")
    gan_g = gan1_g + gan2_g
    total = recon1 + recon2 + gan_g + cyc1 + cyc2
    return LossReport(
        gan_g=gan_g, gan_d=gan_d, recon1=recon1, recon2=recon2,
        cyc1=cyc1, cyc2=cyc2, total=total,
        weights={"recon1": 1.0, "recon2": 1.0, "gan": 1.0,
                 "cyc1": 1.0, "cyc2": 1.0},
    )
