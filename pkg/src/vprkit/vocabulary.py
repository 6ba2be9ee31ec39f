"""VLAD vocabularies: seeded k-means over database features.

Vocabularies are built from database-role images only; queries never
contribute. Clustering is Lloyd's algorithm with k-means++ initialization,
fully deterministic for a given seed (fixed reduction order, no
worker-count dependence).

Vocabulary file layout (version 1, little-endian):

    magic ``ANYLVOCB``, u32 version, u32 k, u32 dim, i64 seed,
    k*dim f32 centers (row-major), 32-byte SHA-256 of the centers bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .distances import squared_distances
from .errors import ConfigError, FormatError, InfeasibleError, ValidationError
from .feature_store import DatasetManifest, FeatureMap

ANYV_MAGIC = b"ANYLVOCB"
VOCAB_VERSION = 1
VOCAB_FILE_SUFFIX = ".anyv"

DEFAULT_SEED = 42
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6
DEFAULT_SAMPLE_CAP = 500_000

# Cluster-count presets by feature width: 128 clusters for 384-dim
# (ViT-S-class) features, 32 for 1536-dim (ViT-G-class) features.
DEFAULT_CLUSTERS_BY_DIM = {384: 128, 1536: 32}


def centers_fingerprint(centers: np.ndarray) -> str:
    """Deterministic content hash (SHA-256 hex) of the center bytes."""
    payload = np.ascontiguousarray(centers, dtype="<f4").tobytes()
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class VocabSource:
    dataset: str
    stride: int


@dataclass(frozen=True)
class Vocabulary:
    """K cluster centers in feature space, with build provenance."""

    centers: np.ndarray  # (k, dim) float32
    seed: int = DEFAULT_SEED
    source: tuple[VocabSource, ...] = ()
    fingerprint: str = ""

    def __post_init__(self):
        arr = np.asarray(self.centers, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(
                f"centers must be a K x D array with K, D >= 1, got shape {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("centers must be finite")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "centers", arr)
        expected = centers_fingerprint(arr)
        if self.fingerprint and self.fingerprint != expected:
            raise ValidationError("fingerprint does not match centers content")
        object.__setattr__(self, "fingerprint", expected)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class VocabPart:
    """One dataset's contribution: every stride-th database image."""

    manifest: DatasetManifest
    stride: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class VocabAssembly:
    parts: tuple[VocabPart, ...]
    k: int
    sample_cap: int | None = DEFAULT_SAMPLE_CAP

    def __post_init__(self):
        if not self.parts:
            raise ConfigError("assembly needs at least one part")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.sample_cap is not None and self.sample_cap < 1:
            raise ConfigError(f"sample_cap must be >= 1, got {self.sample_cap}")


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray  # (k, dim) float64
    inertia: float
    inertia_history: tuple[float, ...]
    n_iters: int


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest_sq = squared_distances(points, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest_sq.sum()
        if total <= 0:
            raise InfeasibleError(
                f"fewer than {k} distinct points; cannot place {k} centers"
            )
        idx = int(rng.choice(n, p=closest_sq / total))
        centers[i] = points[idx]
        np.minimum(
            closest_sq, squared_distances(points, centers[i : i + 1])[:, 0],
            out=closest_sq,
        )
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = DEFAULT_SEED,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> KMeansResult:
    """Seeded k-means++ / Lloyd iterations.

    Stops when the max center shift drops below `tol` or after `max_iters`.
    Empty clusters are re-seeded to the point farthest from its current
    center, which keeps K fixed. The recorded inertia sequence (sum of
    squared distances to the nearest center, after each center update) is
    non-increasing.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ConfigError(f"points must be an M x D array, got shape {pts.shape}")
    m = pts.shape[0]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if m < k:
        raise InfeasibleError(f"need at least k={k} points, got {m}")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {max_iters}")
    if tol < 0:
        raise ConfigError(f"tol must be >= 0, got {tol}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(pts, k, rng)
    d2 = squared_distances(pts, centers)
    history = [float(d2.min(axis=1).sum())]

    n_iters = 0
    for _ in range(max_iters):
        labels = np.argmin(d2, axis=1)
        nearest_sq = d2[np.arange(m), labels]
        counts = np.bincount(labels, minlength=k)
        new_centers = np.zeros_like(centers)
        # Sum per cluster over label-sorted points: deterministic reduction
        # order, much faster than scattered adds at vocabulary scale.
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        starts = np.concatenate(
            ([0], np.flatnonzero(np.diff(sorted_labels)) + 1)
        )
        new_centers[sorted_labels[starts]] = np.add.reduceat(
            pts[order], starts, axis=0
        )
        nonempty = counts > 0
        new_centers[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            spare = nearest_sq.copy()
            for j in np.flatnonzero(~nonempty):
                idx = int(np.argmax(spare))
                new_centers[j] = pts[idx]
                spare[idx] = -1.0
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        n_iters += 1
        d2 = squared_distances(pts, centers)
        history.append(float(d2.min(axis=1).sum()))
        if shift < tol:
            break

    return KMeansResult(
        centers=centers,
        inertia=history[-1],
        inertia_history=tuple(history),
        n_iters=n_iters,
    )


def collect_database_features(
    assembly: VocabAssembly,
    features: Mapping[str, FeatureMap],
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    """Pool every pixel feature of the selected database images.

    Selection: role=database only, every stride-th entry in manifest order.
    If `sample_cap` is set, uniformly subsamples (seeded) while preserving
    collection order.
    """
    chunks = []
    dim = None
    for part in assembly.parts:
        selected = part.manifest.database_entries()[:: part.stride]
        for entry in selected:
            fmap = features[entry.image_id]
            if dim is None:
                dim = fmap.dim
            elif fmap.dim != dim:
                raise ConfigError(
                    f"{entry.image_id}: feature dim {fmap.dim} != expected {dim}"
                )
            chunks.append(fmap.pixels)
    if not chunks:
        raise InfeasibleError("no database images selected")
    pooled = np.concatenate(chunks, axis=0)
    cap = assembly.sample_cap
    if cap is not None and pooled.shape[0] > cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(pooled.shape[0], size=cap, replace=False))
        pooled = pooled[keep]
    return pooled


def build_vocabulary(
    assembly: VocabAssembly,
    features: Mapping[str, FeatureMap],
    seed: int = DEFAULT_SEED,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Vocabulary:
    """Cluster pooled database features into a VLAD vocabulary.

    Deterministic: identical inputs and seed give byte-identical centers.
    """
    pooled = collect_database_features(assembly, features, seed=seed)
    if pooled.shape[0] < assembly.k:
        raise InfeasibleError(
            f"{pooled.shape[0]} pooled features < k={assembly.k}"
        )
    result = kmeans(pooled, assembly.k, seed=seed, max_iters=max_iters, tol=tol)
    centers = result.centers.astype(np.float32)
    return Vocabulary(
        centers=centers,
        seed=seed,
        source=tuple(
            VocabSource(dataset=p.manifest.name, stride=p.stride)
            for p in assembly.parts
        ),
    )


@dataclass(frozen=True)
class PresetPart:
    dataset: str
    stride: int


@dataclass(frozen=True)
class VocabPreset:
    """Domain recipe as data; dataset names are placeholders resolved
    against user-provided manifests."""

    domain: str
    parts: tuple[PresetPart, ...]

    def stride_for(self, dataset: str) -> int | None:
        for part in self.parts:
            if part.dataset == dataset:
                return part.stride
        return None


def domain_vocab_presets() -> dict[str, VocabPreset]:
    """The six domain recipes, keyed by domain name.

    Urban keeps reference-image frequencies near-similar by thinning the
    larger Pitts-30k to every 4th image; aerial thins VP-Air to every 2nd;
    the remaining domains use their full reference databases.
    """
    return {
        "urban": VocabPreset(
            "urban",
            (
                PresetPart("oxford", 1),
                PresetPart("st-lucia", 1),
                PresetPart("pitts-30k", 4),
            ),
        ),
        "aerial": VocabPreset(
            "aerial",
            (PresetPart("nardo-air", 1), PresetPart("vp-air", 2)),
        ),
        "indoor": VocabPreset(
            "indoor",
            (
                PresetPart("baidu-mall", 1),
                PresetPart("gardens-point", 1),
                PresetPart("17-places", 1),
            ),
        ),
        "subterranean": VocabPreset(
            "subterranean", (PresetPart("laurel-caverns", 1),)
        ),
        "degraded": VocabPreset("degraded", (PresetPart("hawkins", 1),)),
        "underwater": VocabPreset(
            "underwater", (PresetPart("mid-atlantic-ridge", 1),)
        ),
    }


def default_cluster_count(dim: int) -> int | None:
    """Preset k for a feature width, or None when no preset applies."""
    return DEFAULT_CLUSTERS_BY_DIM.get(dim)


def write_vocabulary(vocab: Vocabulary, destination: BinaryIO | str | Path) -> None:
    blob = (
        ANYV_MAGIC
        + struct.pack("<III", VOCAB_VERSION, vocab.k, vocab.dim)
        + struct.pack("<q", vocab.seed)
        + vocab.centers.astype("<f4", copy=False).tobytes()
        + bytes.fromhex(vocab.fingerprint)
    )
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)


def read_vocabulary(source: BinaryIO | str | Path) -> Vocabulary:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return _read_vocabulary_stream(fh)
    return _read_vocabulary_stream(source)


def _read_vocabulary_stream(fh: BinaryIO) -> Vocabulary:
    magic = fh.read(len(ANYV_MAGIC))
    if magic != ANYV_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ANYV_MAGIC!r}")
    head = fh.read(12)
    if len(head) != 12:
        raise FormatError("truncated vocabulary header")
    version, k, dim = struct.unpack("<III", head)
    if version != VOCAB_VERSION:
        raise FormatError(f"unsupported vocabulary version {version}")
    seed_raw = fh.read(8)
    if len(seed_raw) != 8:
        raise FormatError("truncated vocabulary seed")
    (seed,) = struct.unpack("<q", seed_raw)
    payload = fh.read(k * dim * 4)
    if len(payload) != k * dim * 4:
        raise FormatError(
            f"centers payload {len(payload)} bytes, header claims {k * dim * 4}"
        )
    stored_fp = fh.read(32)
    if len(stored_fp) != 32:
        raise FormatError("truncated fingerprint")
    centers = np.frombuffer(payload, dtype="<f4").reshape(k, dim)
    vocab = Vocabulary(centers=centers, seed=seed)
    if bytes.fromhex(vocab.fingerprint) != stored_fp:
        raise ValidationError(
            "stored fingerprint does not match centers content (corrupt file?)"
        )
    return vocab
