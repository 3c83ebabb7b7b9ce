"""Manifest ingestion, identity-disjoint splits, image normalisation and pair sampling."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .core import AGING, AgeGroupPartition, group_of, orient, round_age
from .errors import ConfigError, DataError, IngestError

log = logging.getLogger(__name__)

TRAIN, TEST = "train", "test"
TARGET_AGE_RULES = ("group_mean", "group_midpoint")


@dataclass(frozen=True)
class FaceRecord:
    image_path: str
    identity_id: str
    age: int
    group: int
    split: str = TRAIN


@dataclass(frozen=True)
class PairSample:
    """One training pair. ``source``/``target`` are positions in the chain order."""

    index: int
    source: int
    target: int
    target_group: int
    target_age: float


def split_identities(identities: Sequence[str], seed: int = 0, train_fraction: float = 0.8):
    """Seeded identity-level split: ceil(fraction * n) identities go to train."""
    unique = sorted(set(identities))
    order = np.random.default_rng(seed).permutation(len(unique))
    n_train = math.ceil(train_fraction * len(unique))
    train = {unique[i] for i in order[:n_train]}
    return train, set(unique) - train


def ingest(manifest, images_root, partition: AgeGroupPartition = AgeGroupPartition(),
           seed: int = 0, train_fraction: float = 0.8) -> list[FaceRecord]:
    """Read ``id,image,age[,split]`` rows into records with groups and splits assigned."""
    manifest, root = Path(manifest), Path(images_root)
    if not manifest.is_file():
        raise IngestError(f"manifest not found: {manifest}")
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = {"id", "image", "age"} - set(header)
        if missing:
            raise IngestError(f"{manifest}: header lacks columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise IngestError(f"{manifest}: manifest has no rows")
    has_split = "split" in header
    records = []
    for line, row in enumerate(rows, start=2):
        try:
            age = round_age(float(row["age"]))
            if age < 0:
                raise ValueError("negative")
        except (TypeError, ValueError):
            raise IngestError(f"{manifest}:{line}: unparseable age {row['age']!r}") from None
        path = root / row["image"]
        if not path.is_file():
            raise IngestError(f"{manifest}:{line}: image not found: {path}")
        split = (row.get("split") or "").strip().lower() if has_split else TRAIN
        if split not in (TRAIN, TEST):
            raise IngestError(f"{manifest}:{line}: split must be 'train' or 'test', got {split!r}")
        records.append(FaceRecord(str(path), str(row["id"]), age, group_of(age, partition), split))

    if not has_split:
        train_ids, _ = split_identities([r.identity_id for r in records], seed, train_fraction)
        records = [replace(r, split=TRAIN if r.identity_id in train_ids else TEST) for r in records]
    check_disjoint(records)
    return records


def check_disjoint(records: Sequence[FaceRecord]) -> None:
    train = {r.identity_id for r in records if r.split == TRAIN}
    test = {r.identity_id for r in records if r.split == TEST}
    shared = train & test
    if shared:
        raise IngestError(f"identities appear in both splits: {sorted(shared)[:5]}")


def to_unit_range(pixels: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float (3, H, W) tensor, 0 -> -1 and 255 -> +1."""
    arr = np.asarray(pixels, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Clip a (3, H, W) tensor to [-1, 1] and map it back to a uint8 HxWx3 array."""
    arr = (x.detach().clamp(-1, 1).cpu().double().numpy() + 1.0) * 127.5
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def center_square(img: Image.Image) -> Image.Image:
    w, h = img.size
    if w == h:
        return img
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def load_normalized(record, size: int) -> torch.Tensor:
    """Decode, centre-crop, resize to ``size`` and map pixels linearly into [-1, 1]."""
    path = record.image_path if isinstance(record, FaceRecord) else record
    try:
        with Image.open(path) as img:
            img = center_square(img.convert("RGB"))
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return to_unit_range(np.asarray(img))
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def load_images(records: Sequence[FaceRecord], size: int):
    """Load every decodable record; undecodable ones are skipped with a warning.

    Returns ``(images, kept_records, n_skipped)``.
    """
    images, kept, skipped = [], [], 0
    for rec in records:
        try:
            images.append(load_normalized(rec, size))
        except DataError as exc:
            log.warning("skipping %s", exc)
            skipped += 1
            continue
        kept.append(rec)
    if not images:
        raise DataError("no decodable images")
    return torch.stack(images), kept, skipped


def target_ages(ages: Sequence[int], groups: Sequence[int], partition: AgeGroupPartition,
                rule: str = "group_mean") -> dict[int, float]:
    """Scalar regression target per natural group."""
    ages, groups = np.asarray(ages, dtype=np.float64), np.asarray(groups)
    out = {}
    for g in range(1, partition.n_groups + 1):
        if rule == "group_mean":
            sel = ages[groups == g]
            if sel.size == 0:
                raise ConfigError(f"age group {g} has no training faces")
            out[g] = float(sel.mean())
        elif rule == "group_midpoint":
            out[g] = partition.midpoint(g)
        else:
            raise ConfigError(f"target_age must be one of {TARGET_AGE_RULES}, got {rule!r}")
    return out


class PairSampler:
    """Draws (source face, target group) pairs from training faces.

    Progressive pairs draw the source chain position uniformly from 1..N-1
    and the target uniformly above it; adjacent pairs fix ``target = source + 1``.
    Positions follow the chain order, so rejuvenation reverses the groups.
    """

    def __init__(self, groups: Sequence[int], ages: Sequence[int], partition: AgeGroupPartition,
                 seed: int = 0, direction: str = AGING, target_age: str = "group_mean",
                 adjacent: bool = False):
        self.n_groups = partition.n_groups
        self.direction = direction
        self.adjacent = adjacent
        self.rng = np.random.default_rng(seed)
        groups = np.asarray(groups)
        self.by_group = {g: np.flatnonzero(groups == g) for g in range(1, self.n_groups + 1)}
        empty = [g for g, idx in self.by_group.items() if idx.size == 0]
        if empty:
            raise ConfigError(f"age groups {empty} have no training faces")
        self.targets = target_ages(ages, groups, partition, target_age)

    def natural(self, position: int) -> int:
        return orient(position, self.n_groups, self.direction)

    def sample_pair(self) -> PairSample:
        n = self.n_groups
        s = int(self.rng.integers(1, n))
        t = s + 1 if self.adjacent else int(self.rng.integers(s + 1, n + 1))
        pool = self.by_group[self.natural(s)]
        index = int(pool[self.rng.integers(pool.size)])
        g = self.natural(t)
        return PairSample(index, s, t, g, self.targets[g])

    def sample_real(self) -> tuple[int, int]:
        """A real face drawn uniformly over groups: ``(index, natural group)``."""
        g = int(self.rng.integers(1, self.n_groups + 1))
        pool = self.by_group[g]
        return int(pool[self.rng.integers(pool.size)]), g


def sample_pair(sampler: PairSampler) -> PairSample:
    return sampler.sample_pair()
