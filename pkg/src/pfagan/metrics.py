"""Aging accuracy, PCC aging smoothness, inception score and identity preservation."""
from __future__ import annotations

import logging
import warnings
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .losses import FeatureExtractor

log = logging.getLogger(__name__)


def age_estimation_error(real_ages: dict, fake_ages: dict) -> dict:
    """``|mean(real) - mean(fake)|`` per group; groups lacking either set map to None."""
    out = {}
    for g in sorted(set(real_ages) | set(fake_ages)):
        real, fake = np.asarray(real_ages.get(g, ())), np.asarray(fake_ages.get(g, ()))
        out[g] = None if real.size == 0 or fake.size == 0 else float(abs(real.mean() - fake.mean()))
    return out


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation; 0.0 (with a warning) when either sequence is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        warnings.warn("constant age sequence; correlation taken as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def pcc(sequences, generic: Sequence[float]) -> float:
    """Mean Pearson correlation of each age sequence with the generic (per-group mean) sequence."""
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.float64))
    generic = np.asarray(generic, dtype=np.float64)
    if seqs.shape[0] < 1 or seqs.shape[1] != generic.shape[0]:
        raise ValueError(f"need m >= 1 sequences of length {generic.shape[0]}, got {seqs.shape}")
    if np.ptp(generic) == 0:
        raise ValueError("generic age sequence has zero variance")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rhos = [pearson(s, generic) for s in seqs]
    if caught:
        log.warning("%d constant age sequences scored as 0", len(caught))
    return float(np.mean(rhos))


def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """Inception score from an (n, K) matrix of class probabilities; returns (mean, std)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-5):
        raise ValueError("classifier output rows must be probability distributions")
    if splits < 1 or p.shape[0] < 2 * splits:
        raise ValueError(f"need at least {2 * splits} images for {splits} splits, got {p.shape[0]}")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


class IdentityEmbedder:
    """Frozen random conv features, flattened; compared by cosine similarity."""

    def __init__(self, seed: int = 1, layer: int = 10):
        self.net = FeatureExtractor(layer=layer, seed=seed)

    @torch.no_grad()
    def embed(self, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
        out = [self.net(images[i:i + batch_size].float()).flatten(1) for i in range(0, len(images), batch_size)]
        return F.normalize(torch.cat(out).double(), dim=1)

    def similarity(self, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
        return (self.embed(a) * self.embed(b)).sum(dim=1).numpy()


def identity_preservation(inputs: torch.Tensor, ageds: torch.Tensor, embedder: IdentityEmbedder,
                          threshold: float) -> tuple[float, float]:
    """Mean cosine similarity of (input, aged) pairs and the fraction at or above ``threshold``."""
    if len(inputs) != len(ageds):
        raise ValueError(f"paired lists differ in length: {len(inputs)} vs {len(ageds)}")
    sims = embedder.similarity(inputs, ageds)
    return float(sims.mean()), float((sims >= threshold).mean())


def calibrate_threshold(images: torch.Tensor, identities: Sequence[str], embedder: IdentityEmbedder,
                        far: float = 1e-3) -> float:
    """Cosine threshold accepting a fraction ``far`` of impostor (different-identity) pairs."""
    emb = embedder.embed(images)
    sims = (emb @ emb.T).numpy()
    ids = np.asarray(identities)
    iu = np.triu_indices(len(ids), k=1)
    impostor = sims[iu][ids[iu[0]] != ids[iu[1]]]
    if impostor.size == 0:
        raise ValueError("need faces from at least two identities to calibrate")
    return float(np.quantile(impostor, 1.0 - far))
