"""Aging wrappers for inference and the full evaluation report."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .core import AGING, AgeGroupPartition, build_gates, orient
from .data import to_uint8
from .metrics import (IdentityEmbedder, age_estimation_error, calibrate_threshold,
                      identity_preservation, inception_score, pcc)
from .networks import AgeEstimator, ConditionalGenerator, ProgressiveGenerator


class ProgressiveAger:
    """Apply the gated chain from chain position ``source`` to ``target``; outputs are clipped."""

    def __init__(self, generator: ProgressiveGenerator, direction: str = AGING):
        self.generator = generator.eval()
        self.n_groups = generator.n_groups
        self.direction = direction

    @torch.no_grad()
    def __call__(self, x: torch.Tensor, source: int, target: int) -> torch.Tensor:
        gates = build_gates(source, target, self.n_groups)
        return self.generator(x, gates).clamp(-1, 1)


class ConditionalAger:
    """One-shot conditional generator: ``G([x; C_t])`` regardless of the source group."""

    def __init__(self, generator: ConditionalGenerator, direction: str = AGING):
        self.generator = generator.eval()
        self.n_groups = generator.n_groups
        self.direction = direction

    @torch.no_grad()
    def __call__(self, x: torch.Tensor, source: int, target: int) -> torch.Tensor:
        build_gates(source, target, self.n_groups)
        if source == target:
            return x.clone()
        g = orient(target, self.n_groups, self.direction)
        return self.generator(x, [g] * len(x)).clamp(-1, 1)


class SequentialAger(ConditionalAger):
    """Sequential cGAN baseline: one single-group step per call, ``target - source`` calls."""

    def __init__(self, generator: ConditionalGenerator, direction: str = AGING):
        super().__init__(generator, direction)
        self.calls = 0

    @torch.no_grad()
    def __call__(self, x: torch.Tensor, source: int, target: int) -> torch.Tensor:
        build_gates(source, target, self.n_groups)
        for position in range(source + 1, target + 1):
            g = orient(position, self.n_groups, self.direction)
            x = self.generator(x, [g] * len(x)).clamp(-1, 1)
            self.calls += 1
        return x


def make_ager(generator, direction: str = AGING, sequential: bool = False):
    if isinstance(generator, ProgressiveGenerator):
        return ProgressiveAger(generator, direction)
    return (SequentialAger if sequential else ConditionalAger)(generator, direction)


@torch.no_grad()
def oracle_outputs(oracle: AgeEstimator, images: torch.Tensor, batch_size: int = 128):
    """Expected ages and group probabilities from the evaluation age oracle."""
    oracle.eval()
    ages, probs = [], []
    for i in range(0, len(images), batch_size):
        age, _, group_logits = oracle(images[i:i + batch_size])
        ages.append(age.double())
        probs.append(F.softmax(group_logits.double(), dim=1))
    return torch.cat(ages).numpy(), torch.cat(probs).numpy()


def _batched(ager, x, source, target, batch_size):
    return torch.cat([ager(x[i:i + batch_size], source, target) for i in range(0, len(x), batch_size)])


def evaluate(ager, images: torch.Tensor, groups: Sequence[int], identities: Sequence[str],
             oracle: AgeEstimator, embedder: IdentityEmbedder, partition: AgeGroupPartition,
             direction: str = AGING, splits: int = 10, threshold: float | None = None,
             far: float = 1e-3, batch_size: int = 64, max_inputs: int | None = None):
    """Age the youngest-position test faces to every later group and score the results.

    Returns ``(report, fakes)`` where ``fakes[t]`` holds the aged faces for
    chain position ``t``.
    """
    n = partition.n_groups
    groups = np.asarray(groups)
    labels = partition.labels()
    start = orient(1, n, direction)
    inputs = images[torch.as_tensor(np.flatnonzero(groups == start))]
    if max_inputs is not None:
        inputs = inputs[:max_inputs]
    if len(inputs) == 0:
        raise ValueError(f"no test faces in source group {labels[start - 1]}")

    real_ages, real_probs = oracle_outputs(oracle, images)
    real_by_group = {g: real_ages[groups == g] for g in range(1, n + 1)}
    input_ages, _ = oracle_outputs(oracle, inputs)

    fakes, fake_ages, fake_probs = {}, {}, []
    for t in range(2, n + 1):
        fakes[t] = _batched(ager, inputs, 1, t, batch_size)
        ages, probs = oracle_outputs(oracle, fakes[t])
        fake_ages[orient(t, n, direction)] = ages
        fake_probs.append(probs)

    errors = age_estimation_error({g: real_by_group[g] for g in fake_ages}, fake_ages)
    generic = [float(real_by_group[orient(p, n, direction)].mean()) if real_by_group[orient(p, n, direction)].size
               else float("nan") for p in range(1, n + 1)]
    sequences = np.column_stack([input_ages] + [fake_ages[orient(t, n, direction)] for t in range(2, n + 1)])
    smoothness = pcc(sequences, generic) if np.all(np.isfinite(generic)) else None

    probs = np.concatenate(fake_probs)
    n_splits = max(1, min(splits, len(probs) // 2))
    is_mean, is_std = inception_score(probs, n_splits)

    if threshold is None:
        threshold = calibrate_threshold(images, identities, embedder, far)
    verification = {}
    for t, aged in fakes.items():
        conf, rate = identity_preservation(inputs, aged, embedder, threshold)
        verification[labels[orient(t, n, direction) - 1]] = {"confidence": conf, "rate": rate}

    report = {
        "direction": direction,
        "groups": labels,
        "n_inputs": int(len(inputs)),
        "n_test": int(len(images)),
        "age_error": {labels[g - 1]: v for g, v in errors.items()},
        "real_mean_age": {labels[g - 1]: float(a.mean()) if a.size else None for g, a in real_by_group.items()},
        "fake_mean_age": {labels[g - 1]: float(a.mean()) for g, a in fake_ages.items()},
        "generic_sequence": generic,
        "pcc": smoothness,
        "inception_score": {"mean": is_mean, "std": is_std, "splits": n_splits},
        "identity_threshold": float(threshold),
        "verification": verification,
        "real_inception_score": inception_score(real_probs, max(1, min(splits, len(real_probs) // 2)))[0],
    }
    return report, fakes


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_report(report: dict, out_dir) -> Path:
    """Write ``report.json`` and a flat ``report.csv`` (metric, group, value)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    rows = []
    for group, value in report["age_error"].items():
        rows.append(("age_error", group, value))
    for group, value in report["fake_mean_age"].items():
        rows.append(("fake_mean_age", group, value))
    rows.append(("pcc", "all", report["pcc"]))
    rows.append(("inception_score_mean", "all", report["inception_score"]["mean"]))
    rows.append(("inception_score_std", "all", report["inception_score"]["std"]))
    for group, v in report["verification"].items():
        rows.append(("verification_confidence", group, v["confidence"]))
        rows.append(("verification_rate", group, v["rate"]))
    with (out_dir / "report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "group", "value"))
        writer.writerows((metric, group, "" if v is None else repr(float(v))) for metric, group, v in rows)
    return out_dir / "report.json"


def save_montage(columns: Sequence[torch.Tensor], labels: Sequence[str], path, rows: int = 8) -> Path:
    """Grid image: one row per face, one labelled column per group."""
    rows = min(rows, len(columns[0]))
    side = columns[0].shape[-1]
    pad = 14
    canvas = Image.new("RGB", (side * len(columns), side * rows + pad), "white")
    draw = ImageDraw.Draw(canvas)
    for c, (col, label) in enumerate(zip(columns, labels)):
        draw.text((c * side + 2, 1), label, fill="black")
        for r in range(rows):
            canvas.paste(Image.fromarray(to_uint8(col[r])), (c * side, pad + r * side))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    return path
