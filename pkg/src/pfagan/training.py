"""Age-estimator pre-training and alternating LSGAN training of the aging generator."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import AGING, DIRECTIONS, AgeGroupPartition, build_gates, orient
from .data import PairSampler
from .errors import ConfigError, NumericalError
from .losses import (AGE_REDUCTIONS, FeatureExtractor, LossWeights, adv_loss_D, adv_loss_G,
                     age_loss, age_objective, identity_loss, total_G_loss)
from .networks import (AgeEstimator, ConditionalGenerator, PatchDiscriminator,
                       ProgressiveGenerator, freeze, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

MODES = ("pfa_end_to_end", "pfa_independent", "cgan_single")
AGE_NETS = ("dex_multitask", "classification_only")
CLASSIFICATION_ONLY_LAMBDA_AGE = 8.0
LOSS_COLUMNS = ("iteration", "d", "adv", "age", "pixel", "ssim", "feature", "ide", "total")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


@dataclass
class AgePretrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    lr_decay: float = 0.7
    decay_every: int = 15
    seed: int = 0
    base_channels: int = 64
    reduction: str = "mean_abs"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("pretraining epochs, batch size and learning rate must be positive")


@dataclass
class TrainConfig:
    max_iterations: int = 2000
    batch_size: int = 12
    lr_G: float = 1e-4
    lr_D: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    mode: str = "pfa_end_to_end"
    age_net: str = "dex_multitask"
    direction: str = AGING
    checkpoint_every: int = 500
    keep_last: int = 3
    seed: int = 0
    d_steps_per_g: int = 1
    image_size: int = 64
    target_age: str = "group_mean"
    age_reduction: str = "mean_abs"
    flip: bool = True
    base_channels: int = 32
    n_residual: int = 4
    upsample: str = "deconv"
    disc_channels: int = 64
    feature_layer: int = 10
    feature_seed: int = 0
    feature_weights: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    lambda_age_override: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.max_iterations <= 0 or self.batch_size <= 0:
            raise ConfigError("max_iterations and batch_size must be positive")
        if self.lr_G <= 0 or self.lr_D <= 0:
            raise ConfigError("learning rates must be positive")
        for name, value, allowed in (("mode", self.mode, MODES), ("age_net", self.age_net, AGE_NETS),
                                     ("direction", self.direction, DIRECTIONS),
                                     ("age_reduction", self.age_reduction, AGE_REDUCTIONS)):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        if self.age_net == "classification_only" and not self.lambda_age_override:
            self.weights = LossWeights(**{**asdict(self.weights),
                                          "lambda_age": CLASSIFICATION_ONLY_LAMBDA_AGE})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)


# -- age estimator -----------------------------------------------------------

def pretrain_age_estimator(images: torch.Tensor, ages: Sequence[int], groups: Sequence[int],
                           cfg: AgePretrainConfig = AgePretrainConfig(), n_groups: int = 4,
                           val_images: torch.Tensor | None = None, val_ages=None,
                           progress: Callable[[int, float], None] | None = None):
    """Train the DEX estimator on real faces with the age loss; return ``(estimator, report)``.

    The estimator comes back frozen. ``report`` holds the final training loss
    and, when validation faces are given, their mean absolute age error.
    """
    if len(images) == 0:
        raise ConfigError("no training faces for the age estimator")
    seed_everything(cfg.seed)
    net = AgeEstimator(n_groups, images.shape[-1], cfg.base_channels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.decay_every, cfg.lr_decay)
    ages_t = torch.as_tensor(np.asarray(ages), dtype=torch.float32)
    groups_t = torch.as_tensor(np.asarray(groups), dtype=torch.long)
    rng = np.random.default_rng(cfg.seed)
    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.as_tensor(rng.permutation(len(images)))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            expected, _, group_logits = net(images[idx])
            loss = age_objective(expected, group_logits, ages_t[idx], groups_t[idx], cfg.reduction)
            if not torch.isfinite(loss):
                raise NumericalError(f"age estimator loss diverged at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        sched.step()
        epoch_loss = total / max(count, 1)
        if progress is not None:
            progress(epoch + 1, epoch_loss)
    freeze(net)
    report = {"epochs": cfg.epochs, "train_loss": epoch_loss}
    if val_images is not None and len(val_images):
        pred = predict_ages(net, val_images)
        report["val_mae"] = float(np.mean(np.abs(pred - np.asarray(val_ages, dtype=np.float64))))
    report["train_mae"] = float(np.mean(np.abs(predict_ages(net, images) - np.asarray(ages, dtype=np.float64))))
    return net, report


@torch.no_grad()
def predict_ages(estimator: AgeEstimator, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    estimator.eval()
    out = [estimator(images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy()


# -- GAN training ------------------------------------------------------------

class PFATrainer:
    """Owns the generator, discriminator and their optimisers for one training run.

    ``images`` are the training faces in [-1, 1]; ``groups`` their natural
    (youngest = 1) group indices and ``ages`` their labels in years.
    """

    def __init__(self, cfg: TrainConfig, partition: AgeGroupPartition, age_estimator: AgeEstimator,
                 images: torch.Tensor, groups: Sequence[int], ages: Sequence[int],
                 features: torch.nn.Module | None = None):
        self.cfg = cfg
        self.partition = partition
        self.n_groups = partition.n_groups
        seed_everything(cfg.seed)
        self.generator = build_generator(cfg, self.n_groups)
        self.discriminator = PatchDiscriminator(self.n_groups, cfg.disc_channels)
        self.age_estimator = freeze(age_estimator)
        self.features = features if features is not None else FeatureExtractor(
            cfg.feature_layer, seed=cfg.feature_seed, weights_path=cfg.feature_weights)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_G = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr_G, betas=betas)
        self.opt_D = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.lr_D, betas=betas)
        self.images = images
        self.sampler = PairSampler(groups, ages, partition, seed=cfg.seed, direction=cfg.direction,
                                   target_age=cfg.target_age, adjacent=cfg.mode == "pfa_independent")
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.iteration = 0

    def _augment(self, x: torch.Tensor) -> torch.Tensor:
        if not self.cfg.flip:
            return x
        flip = torch.as_tensor(self.rng.random(len(x)) < 0.5)
        return torch.where(flip[:, None, None, None], x.flip(-1), x)

    def sample_batch(self) -> dict:
        pairs = [self.sampler.sample_pair() for _ in range(self.cfg.batch_size)]
        reals = [self.sampler.sample_real() for _ in range(self.cfg.batch_size)]
        return {
            "x_s": self._augment(self.images[[p.index for p in pairs]]),
            "source": [p.source for p in pairs],
            "target": [p.target for p in pairs],
            "target_group": [p.target_group for p in pairs],
            "target_age": [p.target_age for p in pairs],
            "x_real": self._augment(self.images[[i for i, _ in reals]]),
            "real_group": [g for _, g in reals],
        }

    def gates_for(self, sources, targets) -> torch.Tensor:
        k = self.n_groups - 1
        rows = [build_gates(s, t, self.n_groups) if s <= t else np.zeros(k, dtype=np.int64)
                for s, t in zip(sources, targets)]
        return torch.as_tensor(np.stack(rows))

    def fake(self, batch: dict) -> torch.Tensor:
        x_s = batch["x_s"]
        if self.cfg.mode == "cgan_single":
            return self.generator(x_s, batch["target_group"])
        if self.cfg.mode == "pfa_independent":
            x_s = x_s.detach()
        return self.generator(x_s, self.gates_for(batch["source"], batch["target"]))

    def train_step(self, batch: dict | None = None) -> dict:
        """One discriminator update followed by one generator update; returns the loss report."""
        if batch is None:
            batch = self.sample_batch()
        cfg, D = self.cfg, self.discriminator
        self.generator.train()
        D.train()
        fake = self.fake(batch)

        D.requires_grad_(True)
        for _ in range(cfg.d_steps_per_g):
            loss_D = adv_loss_D(D(batch["x_real"], batch["real_group"]),
                                D(fake.detach(), batch["target_group"]))
            self._check(loss_D, "discriminator")
            self.opt_D.zero_grad(set_to_none=True)
            loss_D.backward()
            self.opt_D.step()

        D.requires_grad_(False)
        adv = adv_loss_G(D(fake, batch["target_group"]))
        age = age_loss(fake, batch["target_age"], batch["target_group"], self.age_estimator,
                       cfg.age_reduction, cfg.age_net)
        ide, parts = identity_loss(batch["x_s"], fake, self.features, cfg.weights)
        total = total_G_loss({"adv": adv, "age": age, "ide": ide}, cfg.weights)
        self._check(total, "generator")
        self.opt_G.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            self.opt_G.step()
        D.requires_grad_(True)
        self.iteration += 1
        values = {"d": loss_D, "adv": adv, "age": age, **parts, "ide": ide, "total": total}
        return {"iteration": self.iteration, **{k: float(v.detach()) for k, v in values.items()}}

    def _check(self, loss: torch.Tensor, name: str) -> None:
        if not torch.isfinite(loss):
            where = f"; last good checkpoint: {self.last_checkpoint}" if getattr(self, "last_checkpoint", None) else ""
            raise NumericalError(f"{name} loss is {float(loss.detach())} at iteration {self.iteration + 1}{where}")

    def arch(self) -> dict:
        cfg = self.cfg
        return {"n_groups": self.n_groups, "image_size": cfg.image_size,
                "base_channels": cfg.base_channels, "n_residual": cfg.n_residual, "upsample": cfg.upsample}

    def metadata(self) -> dict:
        return {"iteration": self.iteration, "mode": self.cfg.mode, "direction": self.cfg.direction,
                "age_net": self.cfg.age_net, "bounds": list(self.partition.bounds),
                "n_groups": self.n_groups, "image_size": self.cfg.image_size}

    def save(self, directory, tag: str) -> Path:
        directory = Path(directory)
        path = save_checkpoint(self.generator, directory / f"generator_{tag}.pt", self.arch(), self.metadata())
        save_checkpoint(self.discriminator, directory / f"discriminator_{tag}.pt",
                        {"n_groups": self.n_groups, "base_channels": self.cfg.disc_channels},
                        self.metadata())
        self.last_checkpoint = path
        return path


def build_generator(cfg: TrainConfig, n_groups: int):
    cls = ConditionalGenerator if cfg.mode == "cgan_single" else ProgressiveGenerator
    return cls(n_groups, cfg.image_size, cfg.base_channels, cfg.n_residual, cfg.upsample)


def train_step(batch: dict, trainer: PFATrainer) -> dict:
    return trainer.train_step(batch)


def _prune(directory: Path, keep: int) -> None:
    tags = sorted(p.stem.split("_")[1] for p in directory.glob("generator_*.pt")
                  if p.stem.split("_")[1].isdigit())
    for tag in tags[:-keep] if keep > 0 else []:
        for prefix in ("generator", "discriminator"):
            for suffix in (".pt", ".json"):
                (directory / f"{prefix}_{tag}{suffix}").unlink(missing_ok=True)


def train(trainer: PFATrainer, run_dir, on_checkpoint: Callable[[PFATrainer], float | None] | None = None,
          log_every: int = 100) -> Path:
    """Run ``trainer`` for ``cfg.max_iterations`` steps inside ``run_dir``.

    Writes ``losses.csv`` row by row and checkpoints every ``checkpoint_every``
    iterations (keeping the last ``keep_last``) plus a final one. When
    ``on_checkpoint`` returns a score (PCC), the best-scoring generator is
    also kept as ``generator_best.pt``.
    """
    cfg = trainer.cfg
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "eval").mkdir(exist_ok=True)
    best = -math.inf
    with (run_dir / "losses.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        while trainer.iteration < cfg.max_iterations:
            report = trainer.train_step()
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in report.items()})
            it = trainer.iteration
            if log_every and it % log_every == 0:
                fh.flush()
                log.info("iter %d  d=%.4f adv=%.4f age=%.3f ide=%.4f", it, report["d"], report["adv"],
                         report["age"], report["ide"])
            if it % cfg.checkpoint_every == 0 or it == cfg.max_iterations:
                path = trainer.save(ckpt_dir, f"{it:07d}")
                _prune(ckpt_dir, cfg.keep_last)
                score = on_checkpoint(trainer) if on_checkpoint else None
                if score is not None and score > best:
                    best = score
                    for prefix in ("generator", "discriminator"):
                        for suffix in (".pt", ".json"):
                            src = ckpt_dir / f"{prefix}_{it:07d}{suffix}"
                            shutil.copyfile(src, ckpt_dir / f"{prefix}_best{suffix}")
                    (ckpt_dir / "best.json").write_text(json.dumps({"iteration": it, "pcc": score}))
                log.info("checkpoint %s", path.name)
    return run_dir


def load_generator(path):
    """Rebuild a trained generator (progressive or conditional) from its checkpoint."""
    generator, meta = load_checkpoint(path)
    generator.eval()
    return generator, meta


def natural_group(position: int, n_groups: int, direction: str) -> int:
    return orient(position, n_groups, direction)
