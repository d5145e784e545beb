"""Training loops (paired and unpaired), schedules, checkpoints, and the
augmentation-by-synthesis experiment driver.

Both trainers follow the same contract: one Adam optimizer per side,
discriminator step before generator step on every batch, learning rate
constant then linearly decaying to zero, the confidence regularizer weight
latched down once mean confidence first exceeds its trigger, every iteration
logged as one JSON line, and checkpoints that resume bitwise-identically in
deterministic mode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .data import Instance, reorganize_rois
from .discriminator import DiscriminatorSet, MultiScaleDiscriminator
from .generator import (
    Decoder,
    Encoder,
    Generator,
    GeneratorConfig,
    MaskPriorDecoder,
    PAIRED_IN_CHANNELS,
    UNPAIRED_IN_CHANNELS,
    init_weights,
)
from .losses import LossWeights
from .maskops import ManipulationPolicy, random_manipulation
from .metrics import RegionReport, dice_score, segmentation_scores
from .segmenter import SegmenterConfig, UNet, build_segmenter, lesion_targets

CHECKPOINT_VERSION = 1
CONF_EMA_DECAY = 0.99
ADAM_BETAS = (0.5, 0.999)

_MODE_DEFAULTS = {
    # mode: (epochs_constant, epochs_total, batch)
    "paired": (250, 500, 8),
    "unpaired": (400, 800, 1),
    "segmenter": (100, 200, 16),
}


class TrainingDiverged(Exception):
    """A loss went non-finite; a checkpoint of the last finite state exists."""


@dataclass
class Ablations:
    """Component switches mirroring the ablation study rows."""

    stretch_out: bool = True
    labelwise_d: bool = True
    atlas: bool = True
    l_sc: bool = True
    l_cm: bool = True

    @classmethod
    def from_flags(cls, disabled: str) -> "Ablations":
        """Build from a comma-separated list of components to disable."""
        ab = cls()
        for name in filter(None, (s.strip() for s in disabled.split(","))):
            if not hasattr(ab, name):
                raise ValueError(f"unknown ablation flag: {name!r}")
            setattr(ab, name, False)
        return ab


@dataclass
class TrainConfig:
    """All hyperparameters of one training run."""

    mode: str = "paired"
    lr: float = 2e-4
    epochs_constant: int | None = None
    epochs_total: int | None = None
    batch: int | None = None
    seed: int = 0
    base_width: int = 64
    base_width_d: int = 64
    seg_base_width: int = 32
    norm: str = "batch"
    deterministic: bool = True
    share_latent: bool = False
    device: str = "cpu"
    checkpoint_every: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self) -> None:
        if self.mode not in _MODE_DEFAULTS:
            raise ValueError(f"unknown mode {self.mode!r}")
        defaults = _MODE_DEFAULTS[self.mode]
        if self.epochs_constant is None:
            self.epochs_constant = defaults[0]
        if self.epochs_total is None:
            self.epochs_total = defaults[1]
        if self.batch is None:
            self.batch = defaults[2]
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.ablations, dict):
            self.ablations = Ablations(**self.ablations)
        if not self.epochs_constant < self.epochs_total:
            raise ValueError("epochs_constant must be < epochs_total")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Constant ``lr`` for the first epochs, then linear to exactly 0."""
    if epoch < config.epochs_constant:
        return config.lr
    if epoch >= config.epochs_total:
        return 0.0
    span = config.epochs_total - config.epochs_constant
    return config.lr * (config.epochs_total - epoch) / span


@dataclass
class LambdaCmState:
    triggered: bool = False


def lambda_cm_schedule(mean_confidence: float, state: LambdaCmState,
                       weights: LossWeights | None = None
                       ) -> tuple[float, LambdaCmState]:
    """Confidence regularizer weight: initial value until mean confidence
    first exceeds the trigger, then the lower value forever (one-way)."""
    w = weights or LossWeights()
    if state.triggered or mean_confidence > w.cm_trigger:
        return w.cm_reg_triggered, LambdaCmState(triggered=True)
    return w.cm_reg_initial, state


# ---------------------------------------------------------------------------
# tensor preparation
# ---------------------------------------------------------------------------

def paired_tensors(instances: list[Instance], use_atlas: bool = True) -> dict:
    """Stack instances into training tensors.

    x: mask+atlas [N,20,H,W] (atlas zeroed under the atlas ablation),
    y: images, s: 4-class lesion targets, rois: background/normal/lesion.
    """
    xs, ys, ss, rs = [], [], [], []
    for inst in instances:
        atlas = inst.atlas if use_atlas else np.zeros_like(inst.atlas)
        xs.append(np.concatenate([inst.mask, atlas]))
        ys.append(inst.images)
        ss.append(lesion_targets(inst.mask))
        rs.append(reorganize_rois(inst.mask).stack())
    return {
        "x": torch.from_numpy(np.stack(xs)),
        "y": torch.from_numpy(np.stack(ys)),
        "s": torch.from_numpy(np.stack(ss)),
        "rois": torch.from_numpy(np.stack(rs)),
    }


def domain1_tensors(instances: list[Instance]) -> torch.Tensor:
    """Mask + tissue-prior stacks [N,8,H,W] (unpaired domain 1)."""
    return torch.from_numpy(np.stack(
        [np.concatenate([inst.mask, inst.tissue_priors]) for inst in instances]
    ))


def domain2_tensors(instances: list[Instance]) -> torch.Tensor:
    """Image stacks [N,5,H,W] (unpaired domain 2)."""
    return torch.from_numpy(np.stack([inst.images for inst in instances]))


def _rng_state_hex(state: torch.Tensor) -> str:
    return bytes(state.numpy().tobytes()).hex()


def _rng_state_from_hex(blob: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(bytes.fromhex(blob), dtype=np.uint8).copy())


class _TrainerBase:
    """Shared plumbing: schedules, logging, checkpoint manifest handling."""

    mode = "base"

    def __init__(self, config: TrainConfig, out_dir: str | Path):
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.epoch = 0
        self.iteration = 0
        self.lambda_state = LambdaCmState()
        self.conf_ema: float | None = None
        self.history: list[dict] = []
        self._log_path = self.out_dir / "train_log.jsonl"
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.set_flush_denormal(True)  # GAN activations hit denormals on CPU
        torch.manual_seed(config.seed)
        self.batch_rng = torch.Generator()
        self.batch_rng.manual_seed(config.seed ^ 0x5EED)

    # -- schedule state ----------------------------------------------------
    def _set_lr(self, lr: float) -> None:
        for opt in self._optimizers().values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _current_lambda_cm(self) -> float:
        mc = self.conf_ema if self.conf_ema is not None else 0.0
        value, self.lambda_state = lambda_cm_schedule(
            mc, self.lambda_state, self.config.weights)
        return value

    def _update_conf_ema(self, mean_confidence: float) -> None:
        if self.conf_ema is None:
            self.conf_ema = mean_confidence
        else:
            self.conf_ema = (CONF_EMA_DECAY * self.conf_ema
                             + (1.0 - CONF_EMA_DECAY) * mean_confidence)

    def _log(self, record: dict) -> None:
        self.history.append(record)
        with self._log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def _check_finite(self, named: dict) -> None:
        bad = [name for name, v in named.items()
               if v is not None and not math.isfinite(float(v))]
        if bad:
            ckpt = self.save_checkpoint(self.out_dir / "checkpoint_diverged")
            raise TrainingDiverged(
                f"non-finite loss terms {bad} at epoch {self.epoch}, "
                f"iteration {self.iteration}; last finite state saved to {ckpt}"
            )

    def _batches(self, n: int) -> list[torch.Tensor]:
        perm = torch.randperm(n, generator=self.batch_rng)
        bs = self.config.batch
        return [perm[i:i + bs] for i in range(0, n, bs)]

    # -- checkpointing -----------------------------------------------------
    def _networks(self) -> dict:
        raise NotImplementedError

    def _optimizers(self) -> dict:
        raise NotImplementedError

    def save_checkpoint(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.out_dir / "checkpoint"
        path.mkdir(parents=True, exist_ok=True)
        blobs = {**self._networks(), **self._optimizers()}
        for name, obj in blobs.items():
            torch.save(obj.state_dict(), path / f"{name}.pt")
        manifest = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "mode": self.mode,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "lambda_cm_triggered": self.lambda_state.triggered,
            "conf_ema": self.conf_ema,
            "torch_rng_state": _rng_state_hex(torch.get_rng_state()),
            "batch_rng_state": _rng_state_hex(self.batch_rng.get_state()),
            "networks": sorted(blobs),
        }
        (path / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True))
        return path

    def _restore(self, ckpt_dir: Path) -> None:
        manifest = load_manifest(ckpt_dir)
        blobs = {**self._networks(), **self._optimizers()}
        for name, obj in blobs.items():
            obj.load_state_dict(torch.load(ckpt_dir / f"{name}.pt",
                                           weights_only=True))
        self.epoch = manifest["epoch"]
        self.iteration = manifest["iteration"]
        self.lambda_state = LambdaCmState(manifest["lambda_cm_triggered"])
        self.conf_ema = manifest["conf_ema"]
        torch.set_rng_state(_rng_state_from_hex(manifest["torch_rng_state"]))
        self.batch_rng.set_state(_rng_state_from_hex(manifest["batch_rng_state"]))


def load_manifest(ckpt_dir: str | Path) -> dict:
    manifest_path = Path(ckpt_dir) / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing file: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version: {manifest.get('checkpoint_version')!r}"
        )
    return manifest


# ---------------------------------------------------------------------------
# paired training
# ---------------------------------------------------------------------------

class PairedTrainer(_TrainerBase):
    """Adversarial paired training of generator, discriminator set and the
    shape-consistency segmenter."""

    mode = "paired"

    def __init__(self, instances: list[Instance], config: TrainConfig,
                 out_dir: str | Path):
        if config.mode != "paired":
            raise ValueError("config.mode must be 'paired'")
        super().__init__(config, out_dir)
        self.instances = instances
        self.tensors = paired_tensors(instances, use_atlas=config.ablations.atlas)
        self.generator = init_weights(Generator(GeneratorConfig(
            in_channels=PAIRED_IN_CHANNELS, base_width=config.base_width,
            norm=config.norm, stretch_out=config.ablations.stretch_out)))
        self.discriminators = init_weights(DiscriminatorSet(
            PAIRED_IN_CHANNELS, 5, base_width=config.base_width_d,
            norm=config.norm, labelwise=config.ablations.labelwise_d))
        self.segmenter = build_segmenter(
            SegmenterConfig(base_width=config.seg_base_width))
        g_params = list(self.generator.parameters())
        if config.ablations.l_sc:
            g_params += list(self.segmenter.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=config.lr, betas=ADAM_BETAS)
        self.opt_d = torch.optim.Adam(self.discriminators.parameters(),
                                      lr=config.lr, betas=ADAM_BETAS)

    def _networks(self) -> dict:
        return {"generator": self.generator,
                "discriminators": self.discriminators,
                "segmenter": self.segmenter}

    def _optimizers(self) -> dict:
        return {"optimizer_g": self.opt_g, "optimizer_d": self.opt_d}

    @classmethod
    def resume(cls, ckpt_dir: str | Path,
               instances: list[Instance]) -> "PairedTrainer":
        ckpt_dir = Path(ckpt_dir)
        manifest = load_manifest(ckpt_dir)
        config = TrainConfig.from_dict(manifest["config"])
        trainer = cls(instances, config, ckpt_dir.parent)
        trainer._restore(ckpt_dir)
        return trainer

    def train(self, until_epoch: int | None = None) -> list[dict]:
        """Run epochs [current, until_epoch); returns the iteration log."""
        cfg = self.config
        until = cfg.epochs_total if until_epoch is None else until_epoch
        n = self.tensors["x"].shape[0]
        self.generator.train()
        self.discriminators.train()
        self.segmenter.train()
        while self.epoch < until:
            lr = lr_schedule(self.epoch, cfg)
            self._set_lr(lr)
            for idx in self._batches(n):
                record = self._iteration(idx)
                record.update(epoch=self.epoch, iteration=self.iteration, lr=lr)
                self._log(record)
                self.iteration += 1
            self.epoch += 1
            if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save_checkpoint()
        self.save_checkpoint()
        return self.history

    def _iteration(self, idx: torch.Tensor) -> dict:
        cfg = self.config
        x = self.tensors["x"][idx]
        y = self.tensors["y"][idx]
        s = self.tensors["s"][idx]
        rois = self.tensors["rois"][idx]

        out = self.generator(x)
        y_fake = out.y_hat

        # discriminator ascent on the adversarial objective
        real_resp = self.discriminators.respond_all(x, y, rois)
        fake_resp = self.discriminators.respond_all(x, y_fake.detach(), rois)
        d_loss = losses.discriminator_adversarial_loss(real_resp, fake_resp)
        self._check_finite({"gan_d": float(d_loss.detach())})
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        # generator (+ segmenter) descent against the updated discriminators
        mean_conf = float(out.confidence_half.detach().mean())
        self._update_conf_ema(mean_conf)
        lambda_cm = self._current_lambda_cm()
        real_g = self.discriminators.respond_all(x, y, rois)
        fake_g = self.discriminators.respond_all(x, y_fake, rois)
        gan_g = losses.generator_adversarial_loss(fake_g)
        fm = losses.feature_matching_loss(real_g, fake_g)
        sc = (losses.shape_consistency_loss(self.segmenter, y, y_fake, s)
              if cfg.ablations.l_sc else None)
        cm = (losses.confidence_map_loss(
                  out.y_hat_half, out.confidence_half, F.avg_pool2d(y, 2),
                  lambda_cm)
              if cfg.ablations.l_cm else None)
        report = losses.paired_objective(gan_g, gan_d=d_loss.detach(), fm=fm,
                                         sc=sc, cm=cm, weights=cfg.weights)
        self.opt_g.zero_grad()
        report.total.backward()

        record = report.to_dict()
        record.update(lambda_cm=lambda_cm, mean_confidence=mean_conf,
                      conf_ema=self.conf_ema)
        self._check_finite({k: record[k] for k in
                            ("gan_g", "gan_d", "fm", "sc", "cm", "total")})
        self.opt_g.step()
        return record

    def synthesize(self, x: torch.Tensor):
        """Inference-mode synthesis (no gradient, eval-mode normalization)."""
        was_training = self.generator.training
        self.generator.eval()
        with torch.no_grad():
            out = self.generator(x)
        self.generator.train(was_training)
        return out

    def evaluate(self, instances: list[Instance],
                 tau: float | None = None) -> RegionReport:
        """RegionReport of pixel accuracies over the given instances."""
        tensors = paired_tensors(instances,
                                 use_atlas=self.config.ablations.atlas)
        report = RegionReport(**({"tau": tau} if tau is not None else {}))
        bs = max(self.config.batch, 1)
        for i in range(0, len(instances), bs):
            out = self.synthesize(tensors["x"][i:i + bs])
            for j, inst in enumerate(instances[i:i + bs]):
                report.add(out.y_hat[j].numpy(), inst)
        return report


def train_paired(split_or_instances, config: TrainConfig,
                 out_dir: str | Path) -> tuple[Path, list[dict]]:
    """Train on a DatasetSplit's train side (or a plain instance list);
    returns (checkpoint directory, iteration log)."""
    instances = getattr(split_or_instances, "train", split_or_instances)
    trainer = PairedTrainer(instances, config, out_dir)
    history = trainer.train()
    return trainer.out_dir / "checkpoint", history


# ---------------------------------------------------------------------------
# unpaired training
# ---------------------------------------------------------------------------

class UnpairedNets(torch.nn.Module):
    """E1/F1/D1 for the mask+prior domain, E2/F2/D2 for the image domain.

    F2 is the confidence-guided stretch-out decoder. With ``share_latent``
    the two encoders share their residual trunks (the conv stems stay
    separate)."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        gc1 = GeneratorConfig(in_channels=UNPAIRED_IN_CHANNELS,
                              base_width=config.base_width, norm=config.norm,
                              stretch_out=config.ablations.stretch_out)
        gc2 = GeneratorConfig(in_channels=5, base_width=config.base_width,
                              norm=config.norm,
                              stretch_out=config.ablations.stretch_out)
        self.e1 = Encoder(gc1)
        self.f1 = MaskPriorDecoder(gc1)
        self.e2 = Encoder(gc2)
        self.f2 = Decoder(gc2)
        if config.share_latent:
            n_res = gc1.n_resblocks_enc
            shared = list(self.e1.net.children())[-n_res:]
            layers = list(self.e2.net.children())
            self.e2.net = torch.nn.Sequential(*layers[:-n_res], *shared)
        self.d1 = MultiScaleDiscriminator(UNPAIRED_IN_CHANNELS,
                                          base_width=config.base_width_d,
                                          norm=config.norm)
        self.d2 = MultiScaleDiscriminator(5, base_width=config.base_width_d,
                                          norm=config.norm)
        init_weights(self)


class UnpairedTrainer(_TrainerBase):
    """Cycle-constrained training on two unaligned pools."""

    mode = "unpaired"

    def __init__(self, domain1: list[Instance], domain2: list[Instance],
                 config: TrainConfig, out_dir: str | Path):
        if config.mode != "unpaired":
            raise ValueError("config.mode must be 'unpaired'")
        super().__init__(config, out_dir)
        self.x_pool = domain1_tensors(domain1)
        self.y_pool = domain2_tensors(domain2)
        self.nets = UnpairedNets(config)
        gen_params = list(dict.fromkeys(
            list(self.nets.e1.parameters()) + list(self.nets.f1.parameters())
            + list(self.nets.e2.parameters()) + list(self.nets.f2.parameters())
        ))
        self.opt_g = torch.optim.Adam(gen_params, lr=config.lr, betas=ADAM_BETAS)
        self.opt_d = torch.optim.Adam(
            list(self.nets.d1.parameters()) + list(self.nets.d2.parameters()),
            lr=config.lr, betas=ADAM_BETAS)

    def _networks(self) -> dict:
        return {"nets": self.nets}

    def _optimizers(self) -> dict:
        return {"optimizer_g": self.opt_g, "optimizer_d": self.opt_d}

    @classmethod
    def resume(cls, ckpt_dir: str | Path, domain1: list[Instance],
               domain2: list[Instance]) -> "UnpairedTrainer":
        ckpt_dir = Path(ckpt_dir)
        manifest = load_manifest(ckpt_dir)
        config = TrainConfig.from_dict(manifest["config"])
        trainer = cls(domain1, domain2, config, ckpt_dir.parent)
        trainer._restore(ckpt_dir)
        return trainer

    def train(self, until_epoch: int | None = None) -> list[dict]:
        cfg = self.config
        until = cfg.epochs_total if until_epoch is None else until_epoch
        n = min(self.x_pool.shape[0], self.y_pool.shape[0])
        self.nets.train()
        while self.epoch < until:
            lr = lr_schedule(self.epoch, cfg)
            self._set_lr(lr)
            x_perm = torch.randperm(self.x_pool.shape[0], generator=self.batch_rng)
            y_perm = torch.randperm(self.y_pool.shape[0], generator=self.batch_rng)
            bs = cfg.batch
            for i in range(0, n, bs):
                x_u = self.x_pool[x_perm[i:i + bs]]
                y_u = self.y_pool[y_perm[i:i + bs]]
                record = self._iteration(x_u, y_u)
                record.update(epoch=self.epoch, iteration=self.iteration, lr=lr)
                self._log(record)
                self.iteration += 1
            self.epoch += 1
            if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save_checkpoint()
        self.save_checkpoint()
        return self.history

    def _iteration(self, x_u: torch.Tensor, y_u: torch.Tensor) -> dict:
        nets = self.nets
        z1 = nets.e1(x_u)
        z2 = nets.e2(y_u)
        x11 = nets.f1(z1)                      # reconstruction, domain 1
        out22 = nets.f2(z2)                    # reconstruction, domain 2
        out12 = nets.f2(z1)                    # cross-domain, into images
        x21 = nets.f1(z2)                      # cross-domain, into masks
        x_cyc = nets.f1(nets.e2(out12.y_hat))  # cycle back to domain 1
        out_ycyc = nets.f2(nets.e1(x21))       # cycle back to domain 2

        mean_conf = float(torch.cat([out22.confidence_half,
                                     out_ycyc.confidence_half]).detach().mean())
        self._update_conf_ema(mean_conf)
        lambda_cm = self._current_lambda_cm()
        y_half = F.avg_pool2d(y_u, 2)

        recon1 = losses.l1_sum(x_u, x11)
        recon2 = (losses.l1_sum(y_u, out22.y_hat)
                  + losses.confidence_map_loss(out22.y_hat_half,
                                               out22.confidence_half,
                                               y_half, lambda_cm))
        cyc1 = losses.l1_sum(x_u, x_cyc)
        cyc2 = (losses.l1_sum(y_u, out_ycyc.y_hat)
                + losses.confidence_map_loss(out_ycyc.y_hat_half,
                                             out_ycyc.confidence_half,
                                             y_half, lambda_cm))

        # discriminators first, on detached cross-domain outputs
        d_loss = (losses.discriminator_adversarial_loss(
                      nets.d1.respond_all(x_u),
                      nets.d1.respond_all(x21.detach()))
                  + losses.discriminator_adversarial_loss(
                      nets.d2.respond_all(y_u),
                      nets.d2.respond_all(out12.y_hat.detach())))
        self._check_finite({"gan_d": float(d_loss.detach())})
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        gan1_g = losses.generator_adversarial_loss(nets.d1.respond_all(x21))
        gan2_g = losses.generator_adversarial_loss(
            nets.d2.respond_all(out12.y_hat))
        report = losses.unpaired_objective(
            recon1=recon1, recon2=recon2, gan1_g=gan1_g, gan2_g=gan2_g,
            cyc1=cyc1, cyc2=cyc2, gan_d=d_loss.detach())
        self.opt_g.zero_grad()
        report.total.backward()

        record = report.to_dict()
        record.update(lambda_cm=lambda_cm, mean_confidence=mean_conf,
                      conf_ema=self.conf_ema)
        self._check_finite({k: record[k] for k in
                            ("recon1", "recon2", "cyc1", "cyc2",
                             "gan_g", "gan_d", "total")})
        self.opt_g.step()
        return record

    def translate_to_images(self, x: torch.Tensor):
        """Domain 1 -> domain 2 synthesis (eval mode)."""
        was_training = self.nets.training
        self.nets.eval()
        with torch.no_grad():
            out = self.nets.f2(self.nets.e1(x))
        self.nets.train(was_training)
        return out

    def translate_to_masks(self, y: torch.Tensor) -> torch.Tensor:
        """Domain 2 -> domain 1: mask+prior prediction (eval mode)."""
        was_training = self.nets.training
        self.nets.eval()
        with torch.no_grad():
            out = self.nets.f1(self.nets.e2(y))
        self.nets.train(was_training)
        return out

    def evaluate(self, instances: list[Instance]) -> dict:
        """Held-out paired evaluation of both directions.

        Returns mean lesion Dice of the segmentation direction and mean
        lesion pixel accuracy (over sequences, percent) of the synthesis
        direction.
        """
        from .metrics import DEFAULT_TAU, pixel_accuracy

        x = domain1_tensors(instances)
        y = domain2_tensors(instances)
        dices, accs = [], []
        for i in range(len(instances)):
            pred = self.translate_to_masks(y[i:i + 1])[0]
            labels = pred[:5].argmax(dim=0).numpy()
            true_labels = instances[i].mask.argmax(axis=0)
            dices.append(dice_score((labels >= 2).astype(int),
                                    (true_labels >= 2).astype(int), 1))
            out = self.translate_to_images(x[i:i + 1])
            lesion = (true_labels >= 2).astype(np.float32)
            if lesion.sum() == 0:
                continue
            seq_accs = [pixel_accuracy(out.y_hat[0, s].numpy(),
                                       instances[i].images[s], lesion,
                                       DEFAULT_TAU)
                        for s in range(5)]
            accs.append(float(np.mean(seq_accs)))
        return {
            "lesion_dice": float(np.mean(dices)),
            "lesion_accuracy": float(np.mean(accs)) if accs else None,
        }


def train_unpaired(domain1: list[Instance], domain2: list[Instance],
                   config: TrainConfig,
                   out_dir: str | Path) -> tuple[Path, list[dict]]:
    trainer = UnpairedTrainer(domain1, domain2, config, out_dir)
    history = trainer.train()
    return trainer.out_dir / "checkpoint", history


# ---------------------------------------------------------------------------
# segmenter training and the augmentation experiment
# ---------------------------------------------------------------------------

def _synth_count(mix: float, n_real: int) -> int:
    """Synthesized instances needed for a given share of the training pool
    while keeping all real data (mix 1.0 swaps in an equal-size synth set)."""
    if mix >= 1.0:
        return n_real
    return int(round(mix / (1.0 - mix) * n_real))


def train_segmenter(split, synth_pool: list[Instance], mix: float,
                    config: TrainConfig) -> tuple[UNet, list[dict]]:
    """Train a fresh U-net on all real training data plus enough synthesized
    instances for a ``mix`` share of synthesized data; deterministic in
    config.seed.

    mix = n_synth / (n_synth + n_real); mix 0 is the real-only baseline.
    """
    if config.mode != "segmenter":
        raise ValueError("config.mode must be 'segmenter'")
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0,1], got {mix}")
    real = list(getattr(split, "train", split))
    if not real:
        raise ValueError("empty training pool")
    n_synth = _synth_count(mix, len(real))
    if n_synth and not synth_pool:
        raise ValueError("mix > 0 requires a synthesized pool")
    synth = [synth_pool[i % len(synth_pool)] for i in range(n_synth)]
    pool = (real if mix < 1.0 else []) + synth

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    model = build_segmenter(SegmenterConfig(base_width=config.seg_base_width))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS)
    batch_rng = torch.Generator()
    batch_rng.manual_seed(config.seed ^ 0x5EED)

    y = torch.from_numpy(np.stack([inst.images for inst in pool]))
    s = torch.from_numpy(np.stack([lesion_targets(inst.mask) for inst in pool]))
    history = []
    model.train()
    for epoch in range(config.epochs_total):
        lr = lr_schedule(epoch, config)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(len(pool), generator=batch_rng)
        epoch_loss = 0.0
        n_batches = 0
        for i in range(0, len(pool), config.batch):
            idx = perm[i:i + config.batch]
            probs = model(y[idx])
            loss = losses.multiclass_generalized_dice_loss(s[idx], probs)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.append({"epoch": epoch, "lr": lr,
                        "gdl": epoch_loss / max(n_batches, 1)})
    return model, history


def synthesize_pool(generator: Generator, instances: list[Instance],
                    count: int, seed: int,
                    policy: ManipulationPolicy | None = None,
                    use_atlas: bool = True) -> list[Instance]:
    """Synthesize ``count`` instances from randomly manipulated lesion masks.

    Each synthetic instance pairs the generator output with the manipulated
    mask as its ground-truth labels, keeping the source instance's atlas and
    priors.
    """
    was_training = generator.training
    generator.eval()
    pool = []
    for i in range(count):
        src = instances[i % len(instances)]
        manip = random_manipulation(src.mask, seed=seed + i, policy=policy)
        atlas = src.atlas if use_atlas else np.zeros_like(src.atlas)
        x = torch.from_numpy(
            np.concatenate([manip.mask, atlas])[None])
        with torch.no_grad():
            out = generator(x)
        pool.append(Instance(
            images=np.clip(out.y_hat[0].numpy(), 0.0, 1.0),
            mask=manip.mask,
            atlas=src.atlas,
            tissue_priors=src.tissue_priors,
            patient_id=f"synth_{src.patient_id}",
            slice_index=src.slice_index,
        ))
    generator.train(was_training)
    return pool


def evaluate_segmenter(model: UNet, instances: list[Instance]) -> dict:
    """Per-class Dice and HD95, averaged over instances."""
    from .segmenter import segment

    names = ("edema", "cavity", "tumor")
    acc = {"dice": {n: [] for n in names}, "hd95": {n: [] for n in names}}
    for inst in instances:
        probs = segment(model, torch.from_numpy(inst.images))
        pred = probs.argmax(dim=0).numpy()
        true = lesion_targets(inst.mask).argmax(axis=0)
        scores = segmentation_scores(pred, true)
        for metric in ("dice", "hd95"):
            for n in names:
                acc[metric][n].append(scores[metric][n])
    summary = {metric: {n: float(np.mean(vals)) for n, vals in per.items()}
               for metric, per in acc.items()}
    summary["mean_lesion_dice"] = float(
        np.mean([summary["dice"][n] for n in names]))
    return summary


def augmentation_experiment(real_split, generator: "Generator | str | Path",
                            mix_fractions: list[float],
                            config: TrainConfig,
                            synth_seed: int = 0,
                            policy: ManipulationPolicy | None = None,
                            ) -> list[dict]:
    """Train one segmenter per mix fraction and score the untouched test
    split; returns one result row per mix. ``generator`` may be a module or
    a paired checkpoint directory."""
    if not isinstance(generator, Generator):
        generator, _ = load_generator(generator)
    real_train = real_split.train
    max_synth = max((_synth_count(m, len(real_train)) for m in mix_fractions),
                    default=0)
    pool = synthesize_pool(generator, real_train, max_synth, seed=synth_seed,
                           policy=policy) if max_synth else []
    rows = []
    for mix in mix_fractions:
        n_synth = _synth_count(mix, len(real_train))
        model, _ = train_segmenter(real_split, pool[:n_synth], mix, config)
        scores = evaluate_segmenter(model, real_split.test)
        rows.append({
            "mix": mix, "n_synth": n_synth, "n_real": len(real_train),
            **scores,
        })
    return rows


# ---------------------------------------------------------------------------
# checkpoint loading for inference
# ---------------------------------------------------------------------------

def load_generator(ckpt_dir: str | Path) -> tuple[Generator, TrainConfig]:
    """Rebuild the paired generator from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    manifest = load_manifest(ckpt_dir)
    if manifest["mode"] != "paired":
        raise ValueError(f"not a paired checkpoint: mode={manifest['mode']!r}")
    config = TrainConfig.from_dict(manifest["config"])
    gen = Generator(GeneratorConfig(
        in_channels=PAIRED_IN_CHANNELS, base_width=config.base_width,
        norm=config.norm, stretch_out=config.ablations.stretch_out))
    gen.load_state_dict(torch.load(ckpt_dir / "generator.pt",
                                   weights_only=True))
    gen.eval()
    return gen, config


def load_unpaired_nets(ckpt_dir: str | Path) -> tuple[UnpairedNets, TrainConfig]:
    ckpt_dir = Path(ckpt_dir)
    manifest = load_manifest(ckpt_dir)
    if manifest["mode"] != "unpaired":
        raise ValueError(f"not an unpaired checkpoint: mode={manifest['mode']!r}")
    config = TrainConfig.from_dict(manifest["config"])
    nets = UnpairedNets(config)
    nets.load_state_dict(torch.load(ckpt_dir / "nets.pt", weights_only=True))
    nets.eval()
    return nets, config
