"""Toy face-aging dataset in which age is carried by simple image statistics.

Each identity is a coloured ellipse with a few fixed blobs on a background.
Age darkens the skin, adds horizontal "wrinkle" stripes of growing
contrast and greys the hair band, so both an age estimator and a
generator have a learnable, identity-independent signal.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

MIN_AGE, MAX_AGE = 15, 75


def age_strength(age) -> np.ndarray:
    return np.clip((np.asarray(age, dtype=np.float64) - MIN_AGE) / (MAX_AGE - MIN_AGE), 0.0, 1.0)


def make_identity(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform(0.45, 0.9, size=3),
        "background": rng.uniform(0.05, 0.6, size=3),
        "hair": rng.uniform(0.0, 0.35, size=3),
        "center": rng.uniform(-0.08, 0.08, size=2),
        "radii": rng.uniform(0.28, 0.38, size=2),
        "blobs": rng.uniform(-0.2, 0.2, size=(3, 2)),
        "blob_color": rng.uniform(0.0, 0.4, size=3),
    }


def render_face(identity: dict, age: float, size: int = 64, noise: float = 0.02,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one face as a uint8 ``size x size x 3`` array."""
    a = float(age_strength(age))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    cy, cx = identity["center"]
    ry, rx = identity["radii"] * 2
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    hair = face & (yy < cy - 0.55 * ry)

    img = np.empty((size, size, 3))
    img[:] = identity["background"]
    skin = identity["skin"] * (1.0 - 0.35 * a)
    img[face] = skin
    for by, bx in identity["blobs"]:
        blob = ((yy - cy - by) ** 2 + (xx - cx - bx) ** 2) <= 0.012
        img[blob & face] = identity["blob_color"]
    stripes = np.sin(2 * np.pi * yy * size / 6.0)[..., None]
    img = np.where(face[..., None] & ~hair[..., None], img + 0.22 * a * stripes, img)
    grey = identity["hair"] * (1 - a) + 0.85 * a
    img[hair] = grey
    if rng is not None and noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def make_dataset(root, n_identities: int = 200, images_per_identity: int = 6, size: int = 64,
                 seed: int = 0, with_split: bool = False, train_fraction: float = 0.8) -> Path:
    """Write ``root/images/*.png`` and ``root/manifest.csv``; return the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(np.ceil(train_fraction * n_identities))
    rows = []
    for k in range(n_identities):
        ident = make_identity(rng)
        ages = rng.integers(MIN_AGE, MAX_AGE + 1, size=images_per_identity)
        for j, age in enumerate(ages):
            name = f"images/id{k:04d}_{j:02d}_{int(age)}.png"
            Image.fromarray(render_face(ident, age, size, rng=rng)).save(root / name)
            row = {"id": f"id{k:04d}", "image": name, "age": int(age)}
            if with_split:
                row["split"] = "train" if k < n_train else "test"
            rows.append(row)
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return manifest
