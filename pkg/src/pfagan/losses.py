"""Least-squares adversarial terms, DEX age loss and the mixed identity loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import AgeEstimator, freeze

AGE_REDUCTIONS = ("mean_abs", "batch_l2")
AGE_TERMS = ("dex_multitask", "classification_only")


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 100.0
    lambda_age: float = 0.4
    lambda_ide: float = 0.02
    alpha_ssim: float = 0.15
    alpha_fea: float = 0.025

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.alpha_ssim > 1:
            raise ValueError(f"alpha_ssim must lie in [0, 1], got {self.alpha_ssim}")


def adv_loss_G(scores_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((scores_fake - 1) ** 2).mean()


def adv_loss_D(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((scores_real - 1) ** 2).mean() + 0.5 * (scores_fake ** 2).mean()


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor, window_size: int = 11, sigma: float = 1.5,
         data_range: float = 2.0) -> torch.Tensor:
    """Per-sample SSIM with a Gaussian window, zero padded, averaged over channels and pixels."""
    if x.shape != y.shape:
        raise ValueError(f"SSIM inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    c = x.shape[1]
    win = gaussian_window(window_size, sigma, x.dtype).to(x.device)
    win = win.expand(c, 1, window_size, window_size)
    pad = window_size // 2

    def blur(t):
        return F.conv2d(t, win, padding=pad, groups=c)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return (num / den).flatten(1).mean(dim=1)


class FeatureExtractor(nn.Module):
    """Frozen VGG-style conv stack; ``forward`` returns the activation after conv ``layer``.

    Without ``weights_path`` the weights are a seeded random He initialisation,
    which is enough for a distance-preserving feature space at small scale.
    """

    plan = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512)

    def __init__(self, layer: int = 10, width_divisor: int = 4, seed: int = 0,
                 weights_path: str | Path | None = None):
        super().__init__()
        self.layer = layer
        self.seed = seed
        mods, cin, n_conv = [], 3, 0
        for item in self.plan:
            if item == "M":
                mods.append(nn.MaxPool2d(2))
                continue
            cout = item // width_divisor
            mods += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
            cin, n_conv = cout, n_conv + 1
            if n_conv == layer:
                break
        if n_conv < layer:
            raise ValueError(f"feature stack has only {n_conv} conv layers, asked for layer {layer}")
        self.features = nn.Sequential(*mods)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        if weights_path is not None:
            self.features.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        freeze(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def age_loss(x_fake: torch.Tensor, target_age, target_group, estimator: AgeEstimator,
             reduction: str = "mean_abs", terms: str = "dex_multitask") -> torch.Tensor:
    """Regression gap to ``target_age`` plus group cross-entropy, averaged over the batch."""
    expected, _, group_logits = estimator(x_fake)
    return age_objective(expected, group_logits, target_age, target_group, reduction, terms)


def age_objective(expected_age: torch.Tensor, group_logits: torch.Tensor, target_age, target_group,
                  reduction: str = "mean_abs", terms: str = "dex_multitask") -> torch.Tensor:
    n_groups = group_logits.shape[1]
    target_group = torch.as_tensor(target_group, device=group_logits.device).long().reshape(-1)
    if bool(((target_group < 1) | (target_group > n_groups)).any()):
        raise ValueError(f"target groups must lie in 1..{n_groups}, got {target_group.tolist()}")
    ce = F.cross_entropy(group_logits, target_group - 1)
    if terms == "classification_only":
        return ce
    if terms != "dex_multitask":
        raise ValueError(f"terms must be one of {AGE_TERMS}, got {terms!r}")
    target_age = torch.as_tensor(target_age, dtype=expected_age.dtype, device=expected_age.device)
    gap = target_age.reshape(-1) - expected_age
    if reduction == "mean_abs":
        reg = gap.abs().mean()
    elif reduction == "batch_l2":
        reg = torch.linalg.vector_norm(gap)
    else:
        raise ValueError(f"reduction must be one of {AGE_REDUCTIONS}, got {reduction!r}")
    return reg + ce


def identity_loss(x_in: torch.Tensor, x_out: torch.Tensor, features: nn.Module,
                  weights: LossWeights = LossWeights()):
    """Return ``(total, {"pixel", "ssim", "feature"})`` for the mixed identity loss."""
    if x_in.shape != x_out.shape:
        raise ValueError(f"identity loss inputs differ in shape: {tuple(x_in.shape)} vs {tuple(x_out.shape)}")
    pix = (x_out - x_in).abs().mean()
    l_ssim = (1 - ssim(x_out, x_in)).mean()
    fea = ((features(x_out) - features(x_in)) ** 2).mean()
    total = (1 - weights.alpha_ssim) * pix + weights.alpha_ssim * l_ssim + weights.alpha_fea * fea
    return total, {"pixel": pix, "ssim": l_ssim, "feature": fea}


def total_G_loss(parts, weights: LossWeights = LossWeights()):
    return (weights.lambda_adv * parts["adv"] + weights.lambda_age * parts["age"]
            + weights.lambda_ide * parts["ide"])
