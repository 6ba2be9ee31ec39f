"""Interchange formats: dense feature maps, dataset manifests, descriptor sets.

All binary formats are little-endian and carry an explicit version field.
Every other module consumes data exclusively through the types defined here.

`.anyf` feature-map layout (version 1):

    offset  size  field
    0       8     magic ``ANYLFEAT``
    8       4     u32 format version = 1
    12      4     u32 height
    16      4     u32 width
    20      4     u32 dim
    24      ...   height*width*dim f32, row-major (row, col, channel)

`.anyd` descriptor-set layout (version 1):

    magic ``ANYLDESC``, u32 version = 1, u32 count, u32 dim,
    u16 tag_len + method_tag (utf-8),
    u16 fp_len + vocab_fingerprint (utf-8 hex, fp_len 0 when absent),
    count * (u16 id_len + image_id utf-8)   -- index header, defines order
    count * dim f32                         -- vectors, index order

Manifests are hand-editable YAML (see `load_manifest` for the schema).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping

import numpy as np
import yaml

from .errors import FormatError, ValidationError

ANYF_MAGIC = b"ANYLFEAT"
ANYD_MAGIC = b"ANYLDESC"
FORMAT_VERSION = 1

MANIFEST_ROLES = ("database", "query")
GT_MODES = ("metric", "frame", "explicit")

FEATURE_FILE_SUFFIX = ".anyf"
DESCRIPTOR_FILE_SUFFIX = ".anyd"


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W grid of D-dimensional per-pixel features for one image."""

    image_id: str
    data: np.ndarray  # (height, width, dim) float32, row-major

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValidationError(
                f"{self.image_id}: data must be a height x width x dim array, "
                f"got ndim={arr.ndim}"
            )
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        h, w, d = arr.shape
        if h < 1 or w < 1 or d < 1:
            raise ValidationError(
                f"{self.image_id}: height, width, dim must be >= 1, got {h}x{w}x{d}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError(
                f"{self.image_id}: every element must be finite (found NaN/Inf)"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, image_id: str, height: int, width: int, dim: int, flat) -> "FeatureMap":
        """Build a map from a flat row-major (row, col, channel) array."""
        arr = np.asarray(flat, dtype=np.float32).reshape(-1)
        if arr.size != height * width * dim:
            raise ValidationError(
                f"{image_id}: data length {arr.size} != "
                f"height*width*dim = {height * width * dim}"
            )
        return cls(image_id=image_id, data=arr.reshape(height, width, dim))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def pixels(self) -> np.ndarray:
        """All features flattened to (height*width, dim), row-major."""
        return self.data.reshape(-1, self.data.shape[2])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


def write_feature_map(fmap: FeatureMap, destination: BinaryIO | str | Path) -> None:
    """Serialize one FeatureMap in the `.anyf` binary format (bit-exact)."""
    header = ANYF_MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, fmap.height, fmap.width, fmap.dim
    )
    payload = fmap.data.astype("<f4", copy=False).tobytes(order="C")
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    else:
        destination.write(header)
        destination.write(payload)


def read_feature_map(source: BinaryIO | str | Path, image_id: str | None = None) -> FeatureMap:
    """Parse a `.anyf` byte source back into a FeatureMap.

    `image_id` defaults to the file stem when reading from a path.
    """
    if isinstance(source, (str, Path)):
        if image_id is None:
            image_id = Path(source).stem
        with open(source, "rb") as fh:
            return _read_feature_map_stream(fh, image_id)
    return _read_feature_map_stream(source, image_id or "")


def _read_feature_map_stream(fh: BinaryIO, image_id: str) -> FeatureMap:
    magic = fh.read(len(ANYF_MAGIC))
    if magic != ANYF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ANYF_MAGIC!r}")
    head = fh.read(16)
    if len(head) != 16:
        raise FormatError("truncated header")
    version, h, w, d = struct.unpack("<IIII", head)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if h < 1 or w < 1 or d < 1:
        raise ValidationError(f"height, width, dim must be >= 1, got {h}x{w}x{d}")
    expected = h * w * d * 4
    payload = fh.read(expected)
    if len(payload) != expected:
        raise FormatError(
            f"payload length {len(payload)} bytes, header claims {expected} "
            f"({h}x{w}x{d} f32)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    return FeatureMap(image_id=image_id, data=data)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    role: str  # "database" | "query"
    position: tuple[float, float] | None = None  # meters
    frame_index: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered database/query entries with ground-truth mode and radius.

    Entry order is stable and equals file order; frame-radius semantics
    depend on it (database and queries are parallel traverses, indexed
    from 0).
    """

    name: str
    gt_mode: str  # "metric" | "frame" | "explicit"
    radius: float  # meters (metric) or frame count (frame)
    entries: tuple[ManifestEntry, ...]
    explicit_positives: Mapping[str, tuple[str, ...]] | None = None

    def __post_init__(self):
        if self.gt_mode not in GT_MODES:
            raise ValidationError(f"unknown gt_mode {self.gt_mode!r}")
        if not self.radius > 0:
            raise ValidationError(f"radius must be > 0, got {self.radius}")
        seen: set[str] = set()
        for e in self.entries:
            if e.role not in MANIFEST_ROLES:
                raise ValidationError(f"{e.image_id}: unknown role {e.role!r}")
            if e.image_id in seen:
                raise ValidationError(f"duplicate image_id {e.image_id!r}")
            seen.add(e.image_id)
            if self.gt_mode == "metric" and e.position is None:
                raise ValidationError(
                    f"{e.image_id}: metric mode requires a position on every entry"
                )
            if self.gt_mode == "frame" and e.frame_index is None:
                raise ValidationError(
                    f"{e.image_id}: frame mode requires a frame_index on every entry"
                )
            if e.frame_index is not None and e.frame_index < 0:
                raise ValidationError(f"{e.image_id}: frame_index must be >= 0")
        db_ids = {e.image_id for e in self.entries if e.role == "database"}
        query_ids = [e.image_id for e in self.entries if e.role == "query"]
        if not db_ids or not query_ids:
            raise ValidationError(
                "manifest needs at least one database and one query entry"
            )
        if self.gt_mode == "explicit":
            positives = self.explicit_positives or {}
            for qid in query_ids:
                if qid not in positives:
                    raise ValidationError(
                        f"explicit mode: query {qid!r} missing from explicit_positives"
                    )
            for qid, pos in positives.items():
                if qid not in seen:
                    raise ValidationError(
                        f"explicit_positives references unknown query {qid!r}"
                    )
                for pid in pos:
                    if pid not in db_ids:
                        raise ValidationError(
                            f"explicit_positives[{qid!r}] references unknown "
                            f"database id {pid!r}"
                        )

    def database_entries(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.role == "database")

    def query_entries(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.role == "query")

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


def load_manifest(source: BinaryIO | str | Path) -> DatasetManifest:
    """Load a YAML dataset manifest.

    Schema (version 1)::

        version: 1
        name: my-dataset
        gt_mode: metric | frame | explicit
        radius: 10.0
        entries:
          - {image_id: db_000, role: database, position: [1.5, 0.0]}
          - {image_id: q_000, role: query, position: [2.0, 0.0]}
        explicit_positives:      # explicit mode only
          q_000: [db_000]

    Entries carry `position` in metric mode and `frame_index` in frame mode.
    Entry order in the file is preserved.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            doc = yaml.safe_load(fh)
    else:
        doc = yaml.safe_load(source)
    if not isinstance(doc, dict):
        raise FormatError("manifest must be a YAML mapping")
    version = doc.get("version")
    if version != 1:
        raise FormatError(f"manifest version must be 1, got {version!r}")
    missing = [k for k in ("name", "gt_mode", "radius", "entries") if k not in doc]
    if missing:
        raise ValidationError(f"manifest missing keys: {', '.join(missing)}")
    raw_entries = doc["entries"]
    if not isinstance(raw_entries, list):
        raise ValidationError("entries must be a list")
    entries = []
    for i, raw in enumerate(raw_entries):
        if not isinstance(raw, dict) or "image_id" not in raw or "role" not in raw:
            raise ValidationError(f"entry {i}: needs image_id and role")
        position = raw.get("position")
        if position is not None:
            if not isinstance(position, (list, tuple)) or len(position) != 2:
                raise ValidationError(
                    f"entry {raw['image_id']!r}: position must be [x, y]"
                )
            position = (float(position[0]), float(position[1]))
        frame_index = raw.get("frame_index")
        if frame_index is not None:
            if not isinstance(frame_index, int) or isinstance(frame_index, bool):
                raise ValidationError(
                    f"entry {raw['image_id']!r}: frame_index must be an integer"
                )
        entries.append(
            ManifestEntry(
                image_id=str(raw["image_id"]),
                role=str(raw["role"]),
                position=position,
                frame_index=frame_index,
            )
        )
    positives = doc.get("explicit_positives")
    if positives is not None:
        if not isinstance(positives, dict):
            raise ValidationError("explicit_positives must be a mapping")
        positives = {
            str(q): tuple(str(p) for p in ps) for q, ps in positives.items()
        }
    try:
        radius = float(doc["radius"])
    except (TypeError, ValueError):
        raise ValidationError(f"radius must be a number, got {doc['radius']!r}")
    return DatasetManifest(
        name=str(doc["name"]),
        gt_mode=str(doc["gt_mode"]),
        radius=radius,
        entries=tuple(entries),
        explicit_positives=positives,
    )


def save_manifest(manifest: DatasetManifest, destination: str | Path) -> None:
    """Write a manifest back out in the schema accepted by `load_manifest`."""
    doc: dict = {
        "version": 1,
        "name": manifest.name,
        "gt_mode": manifest.gt_mode,
        "radius": manifest.radius,
        "entries": [],
    }
    for e in manifest.entries:
        row: dict = {"image_id": e.image_id, "role": e.role}
        if e.position is not None:
            row["position"] = [float(e.position[0]), float(e.position[1])]
        if e.frame_index is not None:
            row["frame_index"] = int(e.frame_index)
        doc["entries"].append(row)
    if manifest.explicit_positives is not None:
        doc["explicit_positives"] = {
            q: list(ps) for q, ps in manifest.explicit_positives.items()
        }
    with open(destination, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


@dataclass
class DescriptorSet:
    """One flat vector per image plus which aggregation produced it.

    `vectors` preserves insertion order; when built by the pipeline that is
    the manifest order, which downstream ranking uses for tie-breaking.
    """

    method_tag: str
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    vocab_fingerprint: str | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.method_tag.startswith("vlad") and not self.vocab_fingerprint:
            raise ValidationError(
                "vlad method tags require a non-empty vocab_fingerprint"
            )
        fixed = {}
        for image_id, vec in self.vectors.items():
            arr = np.asarray(vec, dtype=np.float32).reshape(-1)
            if arr.shape[0] != self.dim:
                raise ValidationError(
                    f"{image_id}: vector length {arr.shape[0]} != dim {self.dim}"
                )
            if not np.isfinite(arr).all():
                raise ValidationError(f"{image_id}: vector must be finite")
            arr.flags.writeable = False
            fixed[image_id] = arr
        self.vectors = fixed

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def ids(self) -> list[str]:
        return list(self.vectors.keys())

    def matrix(self) -> np.ndarray:
        """Vectors stacked in set order, shape (len(self), dim)."""
        if not self.vectors:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.vectors[i] for i in self.vectors])

    def subset(self, image_ids) -> "DescriptorSet":
        missing = [i for i in image_ids if i not in self.vectors]
        if missing:
            raise ValidationError(f"descriptor set missing ids: {missing[:5]}")
        return DescriptorSet(
            method_tag=self.method_tag,
            dim=self.dim,
            vectors={i: self.vectors[i] for i in image_ids},
            vocab_fingerprint=self.vocab_fingerprint,
        )


def write_descriptor_set(dset: DescriptorSet, destination: BinaryIO | str | Path) -> None:
    """Serialize a DescriptorSet in the `.anyd` format (index order = set order)."""
    tag = dset.method_tag.encode("utf-8")
    fp = (dset.vocab_fingerprint or "").encode("utf-8")
    parts = [
        ANYD_MAGIC,
        struct.pack("<III", FORMAT_VERSION, len(dset.vectors), dset.dim),
        struct.pack("<H", len(tag)),
        tag,
        struct.pack("<H", len(fp)),
        fp,
    ]
    for image_id in dset.vectors:
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    for vec in dset.vectors.values():
        parts.append(vec.astype("<f4", copy=False).tobytes())
    blob = b"".join(parts)
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)


def read_descriptor_set(source: BinaryIO | str | Path) -> DescriptorSet:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return _read_descriptor_set_stream(fh)
    return _read_descriptor_set_stream(source)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_descriptor_set_stream(fh: BinaryIO) -> DescriptorSet:
    magic = fh.read(len(ANYD_MAGIC))
    if magic != ANYD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ANYD_MAGIC!r}")
    version, count, dim = struct.unpack("<III", _read_exact(fh, 12, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (tag_len,) = struct.unpack("<H", _read_exact(fh, 2, "tag length"))
    tag = _read_exact(fh, tag_len, "method tag").decode("utf-8")
    (fp_len,) = struct.unpack("<H", _read_exact(fh, 2, "fingerprint length"))
    fp = _read_exact(fh, fp_len, "fingerprint").decode("utf-8") or None
    ids = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "id length"))
        ids.append(_read_exact(fh, id_len, "image id").decode("utf-8"))
    payload = _read_exact(fh, count * dim * 4, "vector payload")
    mat = np.frombuffer(payload, dtype="<f4").reshape(count, dim) if count else None
    vectors = {ids[i]: mat[i] for i in range(count)} if count else {}
    return DescriptorSet(
        method_tag=tag, dim=dim, vectors=vectors, vocab_fingerprint=fp
    )


class FeatureDirectory(Mapping):
    """Lazy read-only mapping image_id -> FeatureMap over a dataset directory.

    Feature files are one-image-per-file, named `<image_id>.anyf`; the
    manifest is the single source of truth for ordering.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, image_id: str) -> Path:
        return self.root / f"{image_id}{FEATURE_FILE_SUFFIX}"

    def __getitem__(self, image_id: str) -> FeatureMap:
        path = self.path_for(image_id)
        if not path.is_file():
            raise KeyError(image_id)
        return read_feature_map(path, image_id=image_id)

    def __contains__(self, image_id) -> bool:
        return self.path_for(image_id).is_file()

    def __iter__(self) -> Iterator[str]:
        for p in sorted(self.root.glob(f"*{FEATURE_FILE_SUFFIX}")):
            yield p.stem

    def __len__(self) -> int:
        return sum(1 for _ in self)
