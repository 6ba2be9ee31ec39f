"""Writers for the vprkit interchange formats.

Implements the documented external surface of the retrieval toolkit so this
package never imports it: `.anyf` dense feature maps, `.anyd` descriptor
sets, and the YAML dataset-manifest schema. All binary fields are
little-endian; format version is 1.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import yaml

FORMAT_VERSION = 1
ANYF_MAGIC = b"ANYLFEAT"
ANYD_MAGIC = b"ANYLDESC"


def write_feature_map(data: np.ndarray, destination: str | Path) -> None:
    """Write one (height, width, dim) float map as `.anyf` bytes."""
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-d feature map, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("feature map contains non-finite values")
    h, w, d = arr.shape
    with open(destination, "wb") as fh:
        fh.write(ANYF_MAGIC + struct.pack("<IIII", FORMAT_VERSION, h, w, d))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def write_descriptor_set(
    vectors: dict[str, np.ndarray],
    dim: int,
    method_tag: str,
    destination: str | Path,
) -> None:
    """Write per-image vectors as an `.anyd` descriptor set, in dict order."""
    tag = method_tag.encode("utf-8")
    parts = [
        ANYD_MAGIC,
        struct.pack("<III", FORMAT_VERSION, len(vectors), dim),
        struct.pack("<H", len(tag)),
        tag,
        struct.pack("<H", 0),  # no vocabulary fingerprint for raw model output
    ]
    for image_id, vec in vectors.items():
        arr = np.asarray(vec).reshape(-1)
        if arr.shape[0] != dim:
            raise ValueError(f"{image_id}: expected dim {dim}, got {arr.shape[0]}")
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    for vec in vectors.values():
        parts.append(np.asarray(vec).reshape(-1).astype("<f4", copy=False).tobytes())
    with open(destination, "wb") as fh:
        fh.write(b"".join(parts))


def write_manifest_stub(image_ids: list[str], name: str, destination: str | Path) -> None:
    """Write a starting-point dataset manifest listing ids in input order.

    Every entry is marked `database` with a sequential frame index; users
    flip the query rows (and the ground-truth mode) before evaluating.
    """
    doc = {
        "version": FORMAT_VERSION,
        "name": name,
        "gt_mode": "frame",
        "radius": 1,
        "entries": [
            {"image_id": image_id, "role": "database", "frame_index": i}
            for i, image_id in enumerate(image_ids)
        ],
    }
    with open(destination, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
