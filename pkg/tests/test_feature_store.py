import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vprkit import (
    DatasetManifest,
    DescriptorSet,
    FeatureDirectory,
    FeatureMap,
    FormatError,
    ManifestEntry,
    ValidationError,
    load_manifest,
    read_descriptor_set,
    read_feature_map,
    save_manifest,
    write_descriptor_set,
    write_feature_map,
)

from conftest import frame_manifest


class TestFeatureMapType:
    def test_basic_properties(self, rng):
        data = rng.normal(size=(3, 4, 8)).astype(np.float32)
        m = FeatureMap("img", data)
        assert (m.height, m.width, m.dim) == (3, 4, 8)
        assert m.pixels.shape == (12, 8)
        np.testing.assert_array_equal(m.pixels[5], data[1, 1])

    def test_nan_rejected(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            FeatureMap("bad", data)

    def test_inf_rejected(self):
        data = np.full((1, 1, 1), np.inf, dtype=np.float32)
        with pytest.raises(ValidationError):
            FeatureMap("bad", data)

    def test_wrong_rank_rejected(self):
        with pytest.raises(ValidationError):
            FeatureMap("bad", np.zeros((2, 2), dtype=np.float32))

    def test_empty_axis_rejected(self):
        with pytest.raises(ValidationError):
            FeatureMap("bad", np.zeros((0, 2, 2), dtype=np.float32))

    def test_from_flat_length_checked(self):
        flat = np.arange(8, dtype=np.float32)
        m = FeatureMap.from_flat("a", 2, 2, 2, flat)
        assert m.data.shape == (2, 2, 2)
        with pytest.raises(ValidationError):
            FeatureMap.from_flat("a", 2, 2, 3, flat)

    def test_data_is_read_only(self, rng):
        m = FeatureMap("img", rng.normal(size=(2, 2, 2)).astype(np.float32))
        with pytest.raises(ValueError):
            m.data[0, 0, 0] = 5.0


class TestFeatureMapIO:
    def test_1x1x2_file_layout(self, tmp_path):
        # magic(8) + version(4) + h/w/dim(12) = 24-byte header, 8 payload
        m = FeatureMap("tiny", np.array([[[0.0, 1.0]]], dtype=np.float32))
        path = tmp_path / "tiny.anyf"
        write_feature_map(m, path)
        blob = path.read_bytes()
        assert len(blob) == 32
        assert blob[:8] == b"ANYLFEAT"
        assert struct.unpack("<IIII", blob[8:24]) == (1, 1, 1, 2)
        assert blob[24:] == struct.pack("<ff", 0.0, 1.0)

    def test_round_trip_identity(self, tmp_path, rng):
        m = FeatureMap("m", rng.normal(size=(3, 4, 8)).astype(np.float32))
        path = tmp_path / "m.anyf"
        write_feature_map(m, path)
        back = read_feature_map(path)
        assert back == m
        assert back.image_id == "m"  # defaults to the file stem

    def test_handcrafted_little_endian_bytes(self):
        blob = (
            b"ANYLFEAT"
            + struct.pack("<IIII", 1, 1, 1, 1)
            + b"\x00\x00\x80?"  # 1.0f little-endian
        )
        m = read_feature_map(io.BytesIO(blob), image_id="x")
        assert m.data[0, 0, 0] == 1.0

    def test_bad_magic(self):
        blob = b"XXXXXXXX" + struct.pack("<IIII", 1, 1, 1, 1) + b"\x00" * 4
        with pytest.raises(FormatError):
            read_feature_map(io.BytesIO(blob))

    def test_bad_version(self):
        blob = b"ANYLFEAT" + struct.pack("<IIII", 9, 1, 1, 1) + b"\x00" * 4
        with pytest.raises(FormatError):
            read_feature_map(io.BytesIO(blob))

    def test_truncated_payload(self):
        # header claims 2x2x2 (32 payload bytes) but carries only 24
        blob = b"ANYLFEAT" + struct.pack("<IIII", 1, 2, 2, 2) + b"\x00" * 24
        with pytest.raises(FormatError):
            read_feature_map(io.BytesIO(blob))

    def test_nonfinite_payload_rejected(self):
        payload = struct.pack("<f", float("nan"))
        blob = b"ANYLFEAT" + struct.pack("<IIII", 1, 1, 1, 1) + payload
        with pytest.raises(ValidationError):
            read_feature_map(io.BytesIO(blob))

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(1, 6),
        w=st.integers(1, 6),
        d=st.integers(1, 9),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, h, w, d, seed):
        data = (
            np.random.default_rng(seed)
            .normal(scale=100.0, size=(h, w, d))
            .astype(np.float32)
        )
        m = FeatureMap("p", data)
        buf = io.BytesIO()
        write_feature_map(m, buf)
        buf.seek(0)
        back = read_feature_map(buf, image_id="p")
        assert back.data.tobytes() == m.data.tobytes()


class TestManifest:
    def test_minimal_frame_manifest(self):
        m = frame_manifest(2, 1, radius=2)
        assert len(m.database_entries()) == 2
        assert len(m.query_entries()) == 1

    def test_metric_missing_position(self):
        entries = (
            ManifestEntry("a", "database", position=(0.0, 0.0)),
            ManifestEntry("b", "query"),
        )
        with pytest.raises(ValidationError):
            DatasetManifest(name="x", gt_mode="metric", radius=5.0, entries=entries)

    def test_explicit_unknown_database_id(self):
        entries = (
            ManifestEntry("a", "database"),
            ManifestEntry("b", "query"),
        )
        with pytest.raises(ValidationError):
            DatasetManifest(
                name="x",
                gt_mode="explicit",
                radius=1.0,
                entries=entries,
                explicit_positives={"b": ("nope",)},
            )

    def test_explicit_missing_query_key(self):
        entries = (
            ManifestEntry("a", "database"),
            ManifestEntry("b", "query"),
        )
        with pytest.raises(ValidationError):
            DatasetManifest(
                name="x",
                gt_mode="explicit",
                radius=1.0,
                entries=entries,
                explicit_positives={},
            )

    def test_duplicate_ids(self):
        entries = (
            ManifestEntry("a", "database", frame_index=0),
            ManifestEntry("a", "query", frame_index=0),
        )
        with pytest.raises(ValidationError):
            DatasetManifest(name="x", gt_mode="frame", radius=1, entries=entries)

    def test_needs_both_roles(self):
        entries = (ManifestEntry("a", "database", frame_index=0),)
        with pytest.raises(ValidationError):
            DatasetManifest(name="x", gt_mode="frame", radius=1, entries=entries)

    def test_radius_positive(self):
        entries = (
            ManifestEntry("a", "database", frame_index=0),
            ManifestEntry("b", "query", frame_index=0),
        )
        with pytest.raises(ValidationError):
            DatasetManifest(name="x", gt_mode="frame", radius=0, entries=entries)

    def test_yaml_round_trip_preserves_order(self, tmp_path):
        entries = tuple(
            ManifestEntry(f"e{i}", "database" if i % 2 else "query", frame_index=i)
            for i in range(6)
        )
        m = DatasetManifest(name="rt", gt_mode="frame", radius=3, entries=entries)
        path = tmp_path / "m.yaml"
        save_manifest(m, path)
        back = load_manifest(path)
        assert back == m
        assert [e.image_id for e in back.entries] == [f"e{i}" for i in range(6)]

    def test_version_required(self, tmp_path):
        path = tmp_path / "m.yaml"
        path.write_text("name: x\ngt_mode: frame\nradius: 1\nentries: []\n")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_metric_round_trip(self, tmp_path):
        entries = (
            ManifestEntry("a", "database", position=(1.5, -2.0)),
            ManifestEntry("b", "query", position=(1.0, 0.0)),
        )
        m = DatasetManifest(name="pos", gt_mode="metric", radius=10.0, entries=entries)
        path = tmp_path / "m.yaml"
        save_manifest(m, path)
        assert load_manifest(path).entry("a").position == (1.5, -2.0)


class TestDescriptorSet:
    def test_vlad_tag_requires_fingerprint(self):
        with pytest.raises(ValidationError):
            DescriptorSet(method_tag="vlad-hard", dim=2, vectors={"a": [1.0, 2.0]})

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            DescriptorSet(method_tag="gem-p3", dim=3, vectors={"a": [1.0, 2.0]})

    def test_matrix_order_is_insertion_order(self):
        d = DescriptorSet(
            method_tag="gap",
            dim=1,
            vectors={"z": [1.0], "a": [2.0], "m": [3.0]},
        )
        assert d.ids == ["z", "a", "m"]
        np.testing.assert_array_equal(d.matrix()[:, 0], [1.0, 2.0, 3.0])

    def test_subset_keeps_requested_order(self):
        d = DescriptorSet(
            method_tag="gap", dim=1, vectors={"a": [1.0], "b": [2.0], "c": [3.0]}
        )
        s = d.subset(["c", "a"])
        assert s.ids == ["c", "a"]
        with pytest.raises(ValidationError):
            d.subset(["a", "missing"])

    def test_file_round_trip(self, tmp_path, rng):
        vectors = {f"img{i}": rng.normal(size=5).astype(np.float32) for i in range(7)}
        d = DescriptorSet(
            method_tag="vlad-hard",
            dim=5,
            vectors=vectors,
            vocab_fingerprint="ab" * 32,
        )
        path = tmp_path / "d.anyd"
        write_descriptor_set(d, path)
        back = read_descriptor_set(path)
        assert back.method_tag == d.method_tag
        assert back.vocab_fingerprint == d.vocab_fingerprint
        assert back.ids == d.ids
        np.testing.assert_array_equal(back.matrix(), d.matrix())

    def test_truncated_file(self, tmp_path, rng):
        d = DescriptorSet(method_tag="gap", dim=4, vectors={"a": rng.normal(size=4)})
        path = tmp_path / "d.anyd"
        write_descriptor_set(d, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_descriptor_set(path)


class TestFeatureDirectory:
    def test_lookup_and_iteration(self, tmp_path, rng):
        for name in ("b", "a"):
            write_feature_map(
                FeatureMap(name, rng.normal(size=(1, 1, 2)).astype(np.float32)),
                tmp_path / f"{name}.anyf",
            )
        d = FeatureDirectory(tmp_path)
        assert list(d) == ["a", "b"]
        assert len(d) == 2
        assert "a" in d and "zz" not in d
        assert d["b"].image_id == "b"
        with pytest.raises(KeyError):
            d["zz"]
