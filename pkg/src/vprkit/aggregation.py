"""Global-descriptor aggregation: GAP/GMP/GeM pooling and VLAD.

All operations are pure functions of their inputs; per-image work can be
parallelized freely. Internals run in float64, outputs are float32.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .distances import (
    l2_normalize,
    nearest_center_labels,
    soft_assignment_weights,
    squared_distances,
)
from .errors import ConfigError, ValidationError
from .feature_store import DescriptorSet, FeatureMap
from .vocabulary import Vocabulary

__all__ = [
    "PoolingConfig",
    "VladConfig",
    "GlobalDescriptor",
    "MethodConfig",
    "pool",
    "vlad",
    "aggregate",
    "aggregate_dataset",
    "nearest_center_labels",
    "soft_assignment_weights",
    "squared_distances",
]

POOLING_KINDS = ("gap", "gmp", "gem")
ASSIGNMENTS = ("hard", "soft")


@dataclass(frozen=True)
class PoolingConfig:
    """Pooling family: power mean with p=1 (gap), p (gem), or max (gmp)."""

    kind: str = "gem"
    p: float = 3.0
    normalize_output: bool = True

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ConfigError(f"unknown pooling kind {self.kind!r}")
        if self.kind == "gap":
            object.__setattr__(self, "p", 1.0)
        if self.kind == "gem" and self.p < 1:
            raise ConfigError(f"gem requires p >= 1, got {self.p}")

    @property
    def method_tag(self) -> str:
        if self.kind == "gem":
            return f"gem-p{self.p:g}"
        return self.kind


@dataclass(frozen=True)
class VladConfig:
    """VLAD over a fixed vocabulary, hard or soft assignment.

    `normalize_features` optionally L2-normalizes each per-pixel feature
    before assignment (off by default; exposed for experiments).
    """

    vocabulary: Vocabulary
    assignment: str = "hard"
    soft_temperature: float = 1.0
    normalize_features: bool = False

    def __post_init__(self):
        if self.assignment not in ASSIGNMENTS:
            raise ConfigError(f"unknown assignment {self.assignment!r}")
        if not self.soft_temperature > 0:
            raise ConfigError(
                f"soft_temperature must be > 0, got {self.soft_temperature}"
            )

    @property
    def method_tag(self) -> str:
        tag = f"vlad-{self.assignment}"
        if self.assignment == "soft":
            tag += f"-t{self.soft_temperature:g}"
        if self.normalize_features:
            tag += "-fn"
        return tag


MethodConfig = Union[PoolingConfig, VladConfig]


@dataclass(frozen=True)
class GlobalDescriptor:
    """One flat vector per image plus the aggregation that produced it."""

    image_id: str
    method_tag: str
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if arr.size < 1:
            raise ValidationError(f"{self.image_id}: empty descriptor")
        if not np.isfinite(arr).all():
            raise ValidationError(f"{self.image_id}: descriptor must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def pool(fmap: FeatureMap, cfg: PoolingConfig) -> GlobalDescriptor:
    """Pool one feature map down to a D-vector.

    gap: per-channel mean; gmp: per-channel max; gem: signed power mean,
    sign-preserving so it stays total on signed ViT features.
    """
    feats = fmap.pixels.astype(np.float64)
    if cfg.kind == "gmp":
        out = feats.max(axis=0)
    elif cfg.kind == "gap":
        out = feats.mean(axis=0)
    else:
        powered = np.sign(feats) * np.abs(feats) ** cfg.p
        m = powered.mean(axis=0)
        out = np.sign(m) * np.abs(m) ** (1.0 / cfg.p)
    if cfg.normalize_output:
        out = l2_normalize(out)
    return GlobalDescriptor(
        image_id=fmap.image_id, method_tag=cfg.method_tag, values=out
    )


def _hard_residual_sums(feats: np.ndarray, centers: np.ndarray) -> np.ndarray:
    labels = nearest_center_labels(feats, centers)
    k = centers.shape[0]
    acc = np.zeros((k, centers.shape[1]), dtype=np.float64)
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    boundaries = np.flatnonzero(np.diff(sorted_labels)) + 1
    starts = np.concatenate(([0], boundaries))
    sums = np.add.reduceat(feats[order], starts, axis=0)
    acc[sorted_labels[starts]] = sums
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    acc -= counts[:, None] * centers
    return acc


def _soft_residual_sums(
    feats: np.ndarray, centers: np.ndarray, temperature: float
) -> np.ndarray:
    weights = soft_assignment_weights(feats, centers, temperature)
    return weights.T @ feats - weights.sum(axis=0)[:, None] * centers


def vlad(fmap: FeatureMap, cfg: VladConfig) -> GlobalDescriptor:
    """Sum of residuals per cluster center, then intra-/inter-normalization.

    Each per-cluster residual block is L2-normalized (zero blocks stay
    zero), the blocks are concatenated in cluster order, and the whole
    vector is L2-normalized. Output dim is K*D.
    """
    vocab = cfg.vocabulary
    if fmap.dim != vocab.dim:
        raise ConfigError(
            f"{fmap.image_id}: feature dim {fmap.dim} != vocabulary dim {vocab.dim}"
        )
    feats = fmap.pixels.astype(np.float64)
    if cfg.normalize_features:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = np.divide(feats, norms, out=feats.copy(), where=norms > 0)
    centers = vocab.centers.astype(np.float64)
    if cfg.assignment == "hard":
        blocks = _hard_residual_sums(feats, centers)
    else:
        blocks = _soft_residual_sums(feats, centers, cfg.soft_temperature)
    norms = np.linalg.norm(blocks, axis=1, keepdims=True)
    blocks = np.divide(blocks, norms, out=blocks, where=norms > 0)
    out = l2_normalize(blocks.reshape(-1))
    return GlobalDescriptor(
        image_id=fmap.image_id, method_tag=cfg.method_tag, values=out
    )


def aggregate(fmap: FeatureMap, method: MethodConfig) -> GlobalDescriptor:
    if isinstance(method, VladConfig):
        return vlad(fmap, method)
    return pool(fmap, method)


def aggregate_dataset(
    maps: Iterable[FeatureMap], method: MethodConfig, jobs: int = 1
) -> DescriptorSet:
    """One descriptor per map, in input order regardless of worker count."""
    maps = list(maps)
    expected_dim = None
    for m in maps:
        if expected_dim is None:
            expected_dim = m.dim
        elif m.dim != expected_dim:
            raise ConfigError(
                f"{m.image_id}: feature dim {m.dim} differs from first map's "
                f"dim {expected_dim}"
            )
    fingerprint = None
    if isinstance(method, VladConfig):
        fingerprint = method.vocabulary.fingerprint
        out_dim = method.vocabulary.k * method.vocabulary.dim
        if maps and expected_dim != method.vocabulary.dim:
            raise ConfigError(
                f"feature dim {expected_dim} != vocabulary dim "
                f"{method.vocabulary.dim}"
            )
    else:
        out_dim = expected_dim if expected_dim is not None else 1
    if jobs > 1 and len(maps) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_:
            descriptors = list(pool_.map(lambda m: aggregate(m, method), maps))
    else:
        descriptors = [aggregate(m, method) for m in maps]
    return DescriptorSet(
        method_tag=method.method_tag,
        dim=out_dim,
        vectors={d.image_id: d.values for d in descriptors},
        vocab_fingerprint=fingerprint,
    )
