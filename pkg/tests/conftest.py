import numpy as np
import pytest

from vprkit import DatasetManifest, FeatureMap, ManifestEntry, write_feature_map


def make_map(rng, image_id, h=4, w=4, d=8, scale=1.0):
    data = rng.normal(scale=scale, size=(h, w, d)).astype(np.float32)
    return FeatureMap(image_id=image_id, data=data)


def frame_manifest(n_db, n_q, radius=1, name="synth"):
    """Parallel traverses: db i and query i share frame index i."""
    entries = [
        ManifestEntry(image_id=f"db{i:03d}", role="database", frame_index=i)
        for i in range(n_db)
    ] + [
        ManifestEntry(image_id=f"q{i:03d}", role="query", frame_index=i)
        for i in range(n_q)
    ]
    return DatasetManifest(
        name=name, gt_mode="frame", radius=radius, entries=tuple(entries)
    )


def paired_dataset(rng, n, h=4, w=4, d=8, noise=0.01):
    """n db maps plus n queries, each query a perturbed copy of its db mate."""
    maps = {}
    for i in range(n):
        base = rng.normal(size=(h, w, d)).astype(np.float32)
        maps[f"db{i:03d}"] = FeatureMap(f"db{i:03d}", base)
        bumped = base + rng.normal(scale=noise, size=base.shape).astype(np.float32)
        maps[f"q{i:03d}"] = FeatureMap(f"q{i:03d}", bumped)
    return maps


def write_dataset(directory, maps):
    directory.mkdir(parents=True, exist_ok=True)
    for image_id, fmap in maps.items():
        write_feature_map(fmap, directory / f"{image_id}.anyf")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
