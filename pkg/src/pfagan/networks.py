"""Progressive generator, conditioned patch discriminator and DEX age estimator."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .core import build_condition_batch

N_AGES = 101
LEAK = 0.2


def he_init(module: nn.Module, leak: float = LEAK) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            weight = m.parametrizations.weight.original if hasattr(m, "parametrizations") else m.weight
            nn.init.kaiming_normal_(weight, a=leak, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _conv(cin, cout, kernel, stride=1):
    # odd kernels keep the size with reflection padding, strided 4x4 use zero padding
    if stride == 1 and kernel % 2 == 1:
        return nn.Sequential(nn.ReflectionPad2d(kernel // 2), nn.Conv2d(cin, cout, kernel, stride))
    return nn.Conv2d(cin, cout, kernel, stride, padding=1)


def _norm_act(cout):
    return [nn.InstanceNorm2d(cout), nn.LeakyReLU(LEAK)]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            _conv(channels, channels, 3), *_norm_act(channels),
            _conv(channels, channels, 3), nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class SubGenerator(nn.Module):
    """Residual encoder-decoder producing the aging effect between two adjacent groups.

    The output has no activation: it is an additive residual in pixel space.
    ``upsample="resize"`` swaps the transposed convolutions for
    nearest-neighbour resize followed by a 3x3 convolution.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 32, n_residual: int = 4,
                 upsample: str = "deconv"):
        super().__init__()
        if upsample not in ("deconv", "resize"):
            raise ValueError(f"upsample must be 'deconv' or 'resize', got {upsample!r}")
        c1, c2, c3 = base_channels, base_channels * 2, base_channels * 4

        def up(cin, cout):
            if upsample == "deconv":
                return nn.ConvTranspose2d(cin, cout, 4, 2, padding=1)
            return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _conv(cin, cout, 3))

        self.in_channels = in_channels
        self.model = nn.Sequential(
            _conv(in_channels, c1, 9), *_norm_act(c1),
            _conv(c1, c2, 4, 2), *_norm_act(c2),
            _conv(c2, c3, 4, 2), *_norm_act(c3),
            *[ResidualBlock(c3) for _ in range(n_residual)],
            up(c3, c2), *_norm_act(c2),
            up(c2, c1), *_norm_act(c1),
            _conv(c1, 3, 9),
        )

    @property
    def final_layer(self) -> nn.Conv2d:
        return self.model[-1][-1]

    def forward(self, x):
        return self.model(x)


def _check_images(x: torch.Tensor, channels: int = 3, size: int | None = None) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValueError(f"expected a (b, {channels}, h, w) batch, got shape {tuple(x.shape)}")
    if size is not None and (x.shape[2] != size or x.shape[3] != size):
        raise ValueError(f"expected {size}x{size} images, got {x.shape[2]}x{x.shape[3]}")


def subgen_step(x: torch.Tensor, subnet: nn.Module, gate) -> torch.Tensor:
    """``x + gate * subnet(x)``; rows whose gate is 0 skip the sub-network entirely.

    ``gate`` is either a scalar 0/1 shared by the batch or a per-row 0/1 vector.
    """
    _check_images(x)
    mask = torch.as_tensor(gate).to(device=x.device)
    if mask.ndim == 0:
        return x + subnet(x) if bool(mask) else x
    if mask.shape != (x.shape[0],):
        raise ValueError(f"per-row gates must have shape ({x.shape[0]},), got {tuple(mask.shape)}")
    mask = mask.bool()
    if bool(mask.all()):
        return x + subnet(x)
    if not bool(mask.any()):
        return x
    rows = mask.nonzero().squeeze(1)
    return x.index_add(0, rows, subnet(x.index_select(0, rows)))


class ProgressiveGenerator(nn.Module):
    """Chain of ``n_groups - 1`` gated residual sub-generators, evaluated in ascending order."""

    def __init__(self, n_groups: int = 4, image_size: int | None = None, base_channels: int = 32,
                 n_residual: int = 4, upsample: str = "deconv"):
        super().__init__()
        if n_groups < 2:
            raise ValueError(f"need at least two age groups, got {n_groups}")
        self.n_groups = n_groups
        self.image_size = image_size
        self.subnets = nn.ModuleList(
            SubGenerator(3, base_channels, n_residual, upsample) for _ in range(n_groups - 1)
        )
        he_init(self)

    def forward(self, x: torch.Tensor, gates) -> torch.Tensor:
        _check_images(x, size=self.image_size)
        gates = torch.as_tensor(np.asarray(gates) if not torch.is_tensor(gates) else gates)
        k = self.n_groups - 1
        if gates.shape[-1] != k or gates.ndim not in (1, 2):
            raise ValueError(f"gates must have shape ({k},) or (b, {k}), got {tuple(gates.shape)}")
        for i, subnet in enumerate(self.subnets):
            x = subgen_step(x, subnet, gates[..., i])
        return x


def generate(x_s: torch.Tensor, gates, generator: ProgressiveGenerator) -> torch.Tensor:
    return generator(x_s, gates)


class ConditionalGenerator(nn.Module):
    """Single sub-generator-shaped network fed ``[x; C_t]`` (no progressive chain)."""

    def __init__(self, n_groups: int = 4, image_size: int | None = None, base_channels: int = 32,
                 n_residual: int = 4, upsample: str = "deconv"):
        super().__init__()
        self.n_groups = n_groups
        self.image_size = image_size
        self.net = SubGenerator(3 + n_groups, base_channels, n_residual, upsample)
        he_init(self)

    @property
    def in_channels(self) -> int:
        return self.net.in_channels

    def forward(self, x: torch.Tensor, targets: Sequence[int]) -> torch.Tensor:
        _check_images(x, size=self.image_size)
        cond = build_condition_batch(targets, self.n_groups, x.shape[2], x.shape[3], x.dtype)
        return self.net(torch.cat([x, cond.to(x.device)], dim=1))


class PatchDiscriminator(nn.Module):
    """Six 4x4 conv layers; the target condition joins the features after layer 1."""

    widths = (64, 128, 256, 512, 512)

    def __init__(self, n_groups: int = 4, base_channels: int = 64):
        super().__init__()
        self.n_groups = n_groups
        w = [base_channels * m // 64 for m in self.widths]
        self.layer1 = nn.Conv2d(3, w[0], 4, 2, padding=1)
        body = []
        cin = w[0] + n_groups
        for cout, stride in zip(w[1:], (2, 2, 2, 1)):
            body += [spectral_norm(nn.Conv2d(cin, cout, 4, stride, padding=1)), nn.LeakyReLU(LEAK)]
            cin = cout
        body.append(nn.Conv2d(cin, 1, 4, 1, padding=1))
        self.body = nn.Sequential(*body)
        he_init(self)

    def condition_size(self, image_size: int) -> int:
        return (image_size + 2 - 4) // 2 + 1

    def forward(self, x: torch.Tensor, targets=None, cond: torch.Tensor | None = None) -> torch.Tensor:
        _check_images(x)
        h = F.leaky_relu(self.layer1(x), LEAK)
        if cond is None:
            cond = build_condition_batch(targets, self.n_groups, h.shape[2], h.shape[3], h.dtype)
        elif cond.ndim == 3:
            cond = cond.unsqueeze(0).expand(h.shape[0], -1, -1, -1)
        if cond.shape[1] != self.n_groups or cond.shape[2:] != h.shape[2:]:
            raise ValueError(
                f"condition of shape {tuple(cond.shape[1:])} does not match post-layer-1 "
                f"features ({self.n_groups}, {h.shape[2]}, {h.shape[3]})"
            )
        return self.body(torch.cat([h, cond.to(h)], dim=1))


def discriminate(x: torch.Tensor, cond: torch.Tensor, discriminator: PatchDiscriminator) -> torch.Tensor:
    return discriminator(x, cond=cond)


def dex_expectation(age_logits: torch.Tensor) -> torch.Tensor:
    """Softmax-weighted mean over the per-year age bins 0..100."""
    ages = torch.arange(age_logits.shape[-1], dtype=age_logits.dtype, device=age_logits.device)
    return (F.softmax(age_logits, dim=-1) * ages).sum(dim=-1)


class AgeEstimator(nn.Module):
    """Six stride-2 conv layers with batch norm, a 101-way age head and a linear group head."""

    widths = (64, 128, 256, 512, 512, 512)

    def __init__(self, n_groups: int = 4, image_size: int = 64, base_channels: int = 64):
        super().__init__()
        if image_size < 64 or image_size % 64:
            raise ValueError(f"image size must be a multiple of 64, got {image_size}")
        self.n_groups = n_groups
        self.image_size = image_size
        layers, cin = [], 3
        for m in self.widths:
            cout = base_channels * m // 64
            layers += [nn.Conv2d(cin, cout, 4, 2, padding=1), nn.BatchNorm2d(cout), nn.ReLU()]
            cin = cout
        self.features = nn.Sequential(*layers)
        side = image_size // 64
        self.age_head = nn.Linear(cin * side * side, N_AGES)
        self.group_head = nn.Linear(N_AGES, n_groups, bias=False)
        he_init(self)

    def forward(self, x: torch.Tensor):
        """Return ``(expected_age, age_logits, group_logits)``."""
        _check_images(x, size=self.image_size)
        age_logits = self.age_head(self.features(x).flatten(1))
        return dex_expectation(age_logits), age_logits, self.group_head(age_logits)


def estimate_age(x: torch.Tensor, estimator: AgeEstimator):
    return estimator(x)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# -- checkpoints -------------------------------------------------------------

_KINDS = {
    "progressive_generator": ProgressiveGenerator,
    "conditional_generator": ConditionalGenerator,
    "patch_discriminator": PatchDiscriminator,
    "age_estimator": AgeEstimator,
}


def kind_of(module: nn.Module) -> str:
    for kind, cls in _KINDS.items():
        if type(module) is cls:
            return kind
    raise TypeError(f"no checkpoint kind registered for {type(module).__name__}")


def save_checkpoint(module: nn.Module, path, arch: dict, metadata: dict | None = None) -> Path:
    """Write ``path`` (torch archive of named tensors) plus a ``.json`` sidecar.

    ``arch`` holds the constructor arguments needed to rebuild the network.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"kind": kind_of(module), "arch": dict(arch), **(metadata or {})}
    state = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
    torch.save({"state_dict": state, "metadata": meta}, path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, module: nn.Module | None = None):
    """Load a checkpoint; rebuild the network from its metadata unless ``module`` is given."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    meta = blob["metadata"]
    if module is None:
        module = _KINDS[meta["kind"]](**meta["arch"])
    module.load_state_dict(blob["state_dict"])
    return module, meta


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
