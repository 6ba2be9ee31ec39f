"""PCA over global descriptors: domain discovery and descriptor whitening.

Fitting is single-threaded and deterministic (fixed reduction order, sign
convention per component). The eigendecomposition runs on the Gram matrix
when there are fewer vectors than dimensions (the usual case for 49k-dim
VLAD descriptors at desk scale), otherwise on the covariance matrix.

PCA model file layout (version 1, little-endian):

    magic ``ANYLPCAM``, u32 version, u32 dim D, u32 rank R, u8 whiten,
    f64 epsilon, f64 total_variance, D f64 mean, R*D f64 components
    (row-major), R f64 eigenvalues.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ValidationError
from .feature_store import DescriptorSet

ANYP_MAGIC = b"ANYLPCAM"
PCA_VERSION = 1
PCA_FILE_SUFFIX = ".anyp"

DEFAULT_EPSILON = 1e-12
DEFAULT_TARGET_DIM = 512


@dataclass(frozen=True)
class PcaModel:
    """Mean, orthonormal components (descending variance), eigenvalues."""

    mean: np.ndarray  # (D,) float64
    components: np.ndarray  # (R, D) float64, rows orthonormal
    eigenvalues: np.ndarray  # (R,) float64, non-increasing
    whiten: bool
    epsilon: float = DEFAULT_EPSILON
    total_variance: float = 0.0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        comps = np.asarray(self.components, dtype=np.float64)
        eig = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if comps.ndim != 2 or comps.shape[1] != mean.shape[0]:
            raise ValidationError(
                f"components shape {comps.shape} incompatible with mean "
                f"dim {mean.shape[0]}"
            )
        if comps.shape[0] != eig.shape[0]:
            raise ValidationError("one eigenvalue per component required")
        if comps.shape[0] > comps.shape[1]:
            raise ValidationError("rank R must not exceed input dim D")
        if np.any(eig < 0):
            raise ValidationError("eigenvalues must be non-negative")
        if np.any(np.diff(eig) > 0):
            raise ValidationError("eigenvalues must be non-increasing")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-5):
            raise ValidationError("component rows must be orthonormal (1e-5)")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        for name, arr in (("mean", mean), ("components", comps), ("eigenvalues", eig)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / self.total_variance

    def transform(self, vectors: np.ndarray, normalize: bool = False) -> np.ndarray:
        """Project rows into PCA coordinates (whitened if the model whitens)."""
        x = np.asarray(vectors, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ConfigError(
                f"vector dim {x.shape[1]} != model dim {self.dim}"
            )
        y = (x - self.mean) @ self.components.T
        if self.whiten:
            y = y / np.sqrt(self.eigenvalues + self.epsilon)
        if normalize:
            norms = np.linalg.norm(y, axis=1, keepdims=True)
            y = np.divide(y, norms, out=y, where=norms > 0)
        return y[0] if squeeze else y

    def inverse_transform(self, coords: np.ndarray) -> np.ndarray:
        """Map PCA coordinates back to the original space."""
        y = np.asarray(coords, dtype=np.float64)
        squeeze = y.ndim == 1
        if squeeze:
            y = y[None, :]
        if self.whiten:
            y = y * np.sqrt(self.eigenvalues + self.epsilon)
        x = y @ self.components + self.mean
        return x[0] if squeeze else x

    @property
    def method_suffix(self) -> str:
        return f"-pcaw{self.rank}" if self.whiten else f"-pca{self.rank}"


def _fix_component_signs(components: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: largest-|entry| coordinate positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(
    descriptors: DescriptorSet,
    target_dim: int,
    whiten: bool = False,
    epsilon: float = DEFAULT_EPSILON,
) -> PcaModel:
    """Fit mean + top `target_dim` principal directions on a descriptor set.

    Whitening divides each projected coordinate by sqrt(eigenvalue +
    epsilon). Eigenvalues follow the unbiased (n-1) covariance convention.
    If the data is rank-deficient beyond `target_dim`, the rank is shrunk
    with a warning.
    """
    n = len(descriptors)
    if n < 2:
        raise ConfigError(f"need at least 2 vectors to fit PCA, got {n}")
    dim = descriptors.dim
    if target_dim < 1:
        raise ConfigError(f"target_dim must be >= 1, got {target_dim}")
    if target_dim > min(n - 1, dim):
        raise ConfigError(
            f"target_dim {target_dim} exceeds min(count-1, dim) = "
            f"{min(n - 1, dim)}"
        )
    x = descriptors.matrix().astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    total_variance = float((xc * xc).sum() / (n - 1))

    if n < dim:
        gram = (xc @ xc.T) / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals, kind="stable")[::-1][:target_dim]
        eigvals = eigvals[order]
        eigvecs = eigvecs[:, order]
        keep = eigvals > max(eigvals[0], 0.0) * 1e-12
        eigvals = np.clip(eigvals[keep], 0.0, None)
        eigvecs = eigvecs[:, keep]
        scale = np.sqrt(eigvals * (n - 1))
        components = (xc.T @ eigvecs / scale).T
    else:
        cov = (xc.T @ xc) / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals, kind="stable")[::-1][:target_dim]
        eigvals = eigvals[order]
        eigvecs = eigvecs[:, order]
        keep = eigvals > max(eigvals[0], 0.0) * 1e-12
        eigvals = np.clip(eigvals[keep], 0.0, None)
        components = eigvecs[:, keep].T

    if components.shape[0] < target_dim:
        warnings.warn(
            f"data rank {components.shape[0]} below target_dim {target_dim}; "
            "shrinking model rank",
            stacklevel=2,
        )
    components = _fix_component_signs(components)
    return PcaModel(
        mean=mean,
        components=components,
        eigenvalues=eigvals,
        whiten=whiten,
        epsilon=epsilon,
        total_variance=total_variance,
    )


def project(
    model: PcaModel, descriptors: DescriptorSet, normalize: bool = True
) -> DescriptorSet:
    """Project a DescriptorSet into model coordinates (dim R).

    Output vectors are L2-normalized by default so cosine retrieval stays
    well-scaled; pass normalize=False for raw coordinates.
    """
    if descriptors.dim != model.dim:
        raise ConfigError(
            f"descriptor dim {descriptors.dim} != model dim {model.dim}"
        )
    projected = model.transform(descriptors.matrix(), normalize=normalize)
    ids = descriptors.ids
    return DescriptorSet(
        method_tag=descriptors.method_tag + model.method_suffix,
        dim=model.rank,
        vectors={ids[i]: projected[i].astype(np.float32) for i in range(len(ids))},
        vocab_fingerprint=descriptors.vocab_fingerprint,
    )


@dataclass(frozen=True)
class ScatterRow:
    image_id: str
    label: str
    x: float
    y: float


def export_domain_scatter(
    model: PcaModel, sets: Sequence[tuple[str, DescriptorSet]]
) -> list[ScatterRow]:
    """2-D coordinates (first two components) per image, for external plotting.

    Rows are ordered by (label, image_id); deterministic for fixed inputs.
    """
    if not sets:
        raise ConfigError("need at least one labeled descriptor set")
    if model.rank < 2:
        raise ConfigError(f"model rank {model.rank} < 2; cannot make 2-D scatter")
    rows = []
    for label, dset in sets:
        if dset.dim != model.dim:
            raise ConfigError(
                f"set {label!r}: descriptor dim {dset.dim} != model dim {model.dim}"
            )
        coords = model.transform(dset.matrix(), normalize=False)
        for i, image_id in enumerate(dset.ids):
            rows.append(
                ScatterRow(
                    image_id=image_id,
                    label=label,
                    x=float(coords[i, 0]),
                    y=float(coords[i, 1]),
                )
            )
    rows.sort(key=lambda r: (r.label, r.image_id))
    return rows


def format_scatter_table(rows: Sequence[ScatterRow]) -> str:
    """Tab-separated UTF-8 table with a header row."""
    lines = ["image_id\tlabel\tx\ty"]
    for r in rows:
        lines.append(f"{r.image_id}\t{r.label}\t{r.x!r}\t{r.y!r}")
    return "\n".join(lines) + "\n"


def write_pca_model(model: PcaModel, destination: BinaryIO | str | Path) -> None:
    blob = (
        ANYP_MAGIC
        + struct.pack("<III", PCA_VERSION, model.dim, model.rank)
        + struct.pack("<B", 1 if model.whiten else 0)
        + struct.pack("<dd", model.epsilon, model.total_variance)
        + model.mean.astype("<f8", copy=False).tobytes()
        + model.components.astype("<f8", copy=False).tobytes()
        + model.eigenvalues.astype("<f8", copy=False).tobytes()
    )
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)


def read_pca_model(source: BinaryIO | str | Path) -> PcaModel:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return _read_pca_model_stream(fh)
    return _read_pca_model_stream(source)


def _read_pca_model_stream(fh: BinaryIO) -> PcaModel:
    magic = fh.read(len(ANYP_MAGIC))
    if magic != ANYP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ANYP_MAGIC!r}")
    head = fh.read(12 + 1 + 16)
    if len(head) != 29:
        raise FormatError("truncated PCA header")
    version, dim, rank = struct.unpack("<III", head[:12])
    if version != PCA_VERSION:
        raise FormatError(f"unsupported PCA model version {version}")
    whiten = bool(head[12])
    epsilon, total_variance = struct.unpack("<dd", head[13:29])
    need = (dim + rank * dim + rank) * 8
    payload = fh.read(need)
    if len(payload) != need:
        raise FormatError(f"payload {len(payload)} bytes, header claims {need}")
    floats = np.frombuffer(payload, dtype="<f8")
    mean = floats[:dim]
    components = floats[dim : dim + rank * dim].reshape(rank, dim)
    eigenvalues = floats[dim + rank * dim :]
    return PcaModel(
        mean=mean,
        components=components,
        eigenvalues=eigenvalues,
        whiten=whiten,
        epsilon=epsilon,
        total_variance=total_variance,
    )
