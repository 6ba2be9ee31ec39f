import numpy as np
import pytest
from PIL import Image

from vprkit import (
    DEFAULT_PALETTE,
    AssignmentMap,
    ConfigError,
    FeatureMap,
    ValidationError,
    Vocabulary,
    assign_map,
    export_label_image,
    export_montage,
)


def vocab_from(centers):
    return Vocabulary(centers=np.asarray(centers, dtype=np.float32))


class TestAssignMap:
    def test_single_cluster_all_zero_labels(self, rng):
        fmap = FeatureMap("a", rng.normal(size=(3, 5, 4)).astype(np.float32))
        amap = assign_map(fmap, vocab_from(rng.normal(size=(1, 4))))
        assert amap.k == 1
        assert np.all(amap.labels == 0)

    def test_pixels_placed_at_centers_get_own_index(self, rng):
        centers = rng.normal(size=(4, 6)) * 10
        data = centers[[2, 0, 3, 1]].reshape(2, 2, 6).astype(np.float32)
        amap = assign_map(FeatureMap("a", data), vocab_from(centers))
        assert amap.labels.tolist() == [[2, 0], [3, 1]]

    def test_matches_per_pixel_argmin_loops(self, rng):
        fmap = FeatureMap("a", rng.normal(size=(4, 6, 5)).astype(np.float32))
        centers = rng.normal(size=(3, 5))
        amap = assign_map(fmap, vocab_from(centers))
        for y in range(4):
            for x in range(6):
                d = [float(np.sum((fmap.data[y, x] - c) ** 2)) for c in centers]
                assert amap.labels[y, x] == int(np.argmin(d))

    def test_dim_mismatch(self, rng):
        fmap = FeatureMap("a", rng.normal(size=(2, 2, 5)).astype(np.float32))
        with pytest.raises(ConfigError):
            assign_map(fmap, vocab_from(rng.normal(size=(2, 4))))

    def test_label_bounds_validated(self):
        with pytest.raises(ValidationError):
            AssignmentMap("a", np.array([[0, 3]], dtype=np.int32), k=3)
        with pytest.raises(ValidationError):
            AssignmentMap("a", np.array([[-1, 0]], dtype=np.int32), k=3)


class TestExport:
    def test_checkerboard_colors(self, tmp_path):
        labels = np.array([[0, 1], [1, 0]], dtype=np.int32)
        amap = AssignmentMap("board", labels, k=2)
        out = tmp_path / "board.png"
        export_label_image(amap, out)
        img = np.asarray(Image.open(out))
        assert img.shape == (2, 2, 3)
        assert tuple(img[0, 0]) == DEFAULT_PALETTE[0]
        assert tuple(img[0, 1]) == DEFAULT_PALETTE[1]
        assert tuple(img[1, 0]) == DEFAULT_PALETTE[1]
        assert tuple(img[1, 1]) == DEFAULT_PALETTE[0]

    def test_upscale_repeats_blocks(self, tmp_path, rng):
        labels = rng.integers(0, 5, size=(16, 16)).astype(np.int32)
        amap = AssignmentMap("big", labels, k=5)
        out = tmp_path / "big.png"
        export_label_image(amap, out, upscale=14)
        img = np.asarray(Image.open(out))
        assert img.shape == (224, 224, 3)
        # every 14x14 block is a single flat color
        blocks = img.reshape(16, 14, 16, 14, 3)
        assert np.all(blocks == blocks[:, :1, :, :1, :])

    def test_reexport_byte_identical(self, tmp_path, rng):
        labels = rng.integers(0, 8, size=(6, 9)).astype(np.int32)
        amap = AssignmentMap("twice", labels, k=8)
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        export_label_image(amap, a)
        export_label_image(amap, b)
        assert a.read_bytes() == b.read_bytes()

    def test_palette_too_small(self, tmp_path):
        amap = AssignmentMap("a", np.zeros((2, 2), dtype=np.int32), k=9)
        with pytest.raises(ConfigError):
            export_label_image(amap, tmp_path / "x.png")

    def test_custom_palette(self, tmp_path):
        amap = AssignmentMap("a", np.array([[0]], dtype=np.int32), k=1)
        out = tmp_path / "c.png"
        export_label_image(amap, out, palette=((9, 8, 7),))
        assert tuple(np.asarray(Image.open(out))[0, 0]) == (9, 8, 7)

    def test_montage_layout(self, tmp_path):
        a = AssignmentMap("a", np.zeros((2, 2), dtype=np.int32), k=1)
        b = AssignmentMap("b", np.ones((2, 2), dtype=np.int32), k=2)
        out = tmp_path / "row.png"
        export_montage([a, b], out, upscale=2, gutter=2)
        img = np.asarray(Image.open(out))
        # 2 tiles of 4px plus one 2px gutter: 10 wide, 4 tall
        assert img.shape == (4, 10, 3)
        assert tuple(img[0, 0]) == DEFAULT_PALETTE[0]
        assert tuple(img[0, 9]) == DEFAULT_PALETTE[1]
        assert np.all(img[:, 4:6] == 255)  # white gutter

    def test_montage_height_mismatch(self, tmp_path):
        a = AssignmentMap("a", np.zeros((2, 2), dtype=np.int32), k=1)
        b = AssignmentMap("b", np.zeros((3, 2), dtype=np.int32), k=1)
        with pytest.raises(ConfigError):
            export_montage([a, b], tmp_path / "x.png")

    def test_montage_empty(self, tmp_path):
        with pytest.raises(ConfigError):
            export_montage([], tmp_path / "x.png")
