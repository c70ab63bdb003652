"""
tests/test_synthetic.py — generated worlds, rotation, dataset store.

Run with: pytest tests/test_synthetic.py -v
"""
import numpy as np
import pytest

from app.db.container import ContainerError, decode_tensors, encode_tensors, read_manifest, write_manifest
from app.db.dataset_store import TENSORS, DatasetIntegrityError, load_dataset, save_dataset
from app.services.synthetic import (
    attribute_pooling,
    block_grid,
    gen_attribute_world,
    gen_shapes,
    regenerate,
    rotate,
    rotate_each,
)


# ---------------------------------------------------------------------------
# Shapes world
# ---------------------------------------------------------------------------

class TestShapes:
    def test_same_seed_is_bit_identical(self):
        a = gen_shapes(seed=3, count=50, m=4)
        b = gen_shapes(seed=3, count=50, m=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.train_idx, b.train_idx)

    def test_different_seed_differs(self):
        assert not np.array_equal(gen_shapes(seed=1, count=20, m=3).images,
                                  gen_shapes(seed=2, count=20, m=3).images)

    def test_balanced_and_in_range(self):
        ds = gen_shapes(seed=0, count=100, m=5, noise=0.3)
        np.testing.assert_array_equal(np.bincount(ds.labels), [20] * 5)
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0

    def test_split_partitions_indices(self):
        ds = gen_shapes(seed=0, count=50, m=2, train_fraction=0.8)
        assert len(ds.train_idx) == 40
        assert sorted(ds.train_idx.tolist() + ds.test_idx.tolist()) == list(range(50))
        images, labels = ds.split("test")
        assert images.shape == (10, 8, 8) and labels.shape == (10,)

    def test_regenerate_from_manifest(self):
        ds = gen_shapes(seed=8, count=30, m=3, style="B", name="shapes-b")
        again = regenerate(ds.manifest)
        np.testing.assert_array_equal(again.images, ds.images)
        assert again.manifest == ds.manifest

    @pytest.mark.parametrize("style,side", [("A", 5), ("A", 6), ("B", 6), ("B", 7)])
    def test_smallest_sides_draw_every_glyph(self, style, side):
        ds = gen_shapes(seed=0, count=200, m=5, H=side, W=side, style=style)
        assert ds.images.shape == (200, side, side)
        assert np.all((ds.images > 0).any(axis=(1, 2)))

    def test_thick_style_rejects_five_pixel_side(self):
        with pytest.raises(ValueError, match="style B"):
            gen_shapes(seed=0, count=10, m=5, H=5, W=5, style="B")

    @pytest.mark.parametrize("kwargs", [{"m": 6}, {"m": 3, "H": 4}, {"m": 3, "style": "C"}])
    def test_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            gen_shapes(seed=0, count=10, **kwargs)


# ---------------------------------------------------------------------------
# Rotation
# ---------------------------------------------------------------------------

class TestRotate:
    def test_quarter_turn_is_clockwise(self):
        img = np.zeros((4, 4))
        img[0, 0] = 1.0
        out = rotate(img, 90)
        assert out[0, 3] == 1.0
        assert out.sum() == 1.0

    def test_full_turn_is_identity(self):
        img = np.arange(16.0).reshape(4, 4)
        out = img
        for _ in range(4):
            out = rotate(out, 90)
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(rotate(img, 0), img)
        np.testing.assert_array_equal(rotate(rotate(img, 90), 270), img)

    def test_batch_and_per_image(self):
        imgs = np.arange(32.0).reshape(2, 4, 4)
        np.testing.assert_array_equal(rotate(imgs, 180)[1], rotate(imgs[1], 180))
        each = rotate_each(imgs, np.array([0, 90]))
        np.testing.assert_array_equal(each[0], imgs[0])
        np.testing.assert_array_equal(each[1], rotate(imgs[1], 90))

    @pytest.mark.parametrize("shape,r", [((4, 4), 45), ((4, 5), 90)])
    def test_rejects(self, shape, r):
        with pytest.raises(ValueError):
            rotate(np.zeros(shape), r)


# ---------------------------------------------------------------------------
# Attribute world
# ---------------------------------------------------------------------------

class TestAttributeWorld:
    def test_zero_shot_classes_have_no_images(self):
        ds = gen_attribute_world(seed=0, K=5, p=8, seen_fraction=0.6, count=90)
        assert ds.zero_shot_classes == (3, 4)
        assert ds.seen_classes == (0, 1, 2)
        assert set(ds.labels.tolist()) == {0, 1, 2}

    def test_signatures_are_distinct(self):
        ds = gen_attribute_world(seed=4, K=6, p=8)
        sigs = ds.signatures
        dist = np.abs(sigs[:, None, :] - sigs[None, :, :]).sum(axis=2)
        np.fill_diagonal(dist, 8)
        assert dist.min() >= 2
        np.testing.assert_array_equal(ds.attributes, sigs[ds.labels])

    def test_condition_table_is_unit_rows(self):
        ds = gen_attribute_world(seed=0)
        np.testing.assert_allclose(np.linalg.norm(ds.condition_table, axis=1), 1.0)

    def test_block_grid(self):
        assert block_grid(8, 8, 8) == (2, 4)
        assert block_grid(4, 8, 8) == (2, 2)
        with pytest.raises(ValueError):
            block_grid(8, 6, 6)

    def test_pooling_columns_average_blocks(self):
        pool = attribute_pooling(4, 8, 8)
        np.testing.assert_allclose(pool.sum(axis=0), 1.0)
        assert np.count_nonzero(pool[:, 0]) == 16

    def test_regenerate_attribute_world(self):
        ds = gen_attribute_world(seed=2, count=40, noise=0.1)
        again = regenerate(ds.manifest)
        np.testing.assert_array_equal(again.images, ds.images)
        np.testing.assert_array_equal(again.signatures, ds.signatures)


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

class TestDatasetStore:
    def test_round_trip_shapes(self, tmp_path):
        ds = gen_shapes(seed=1, count=30, m=3)
        loaded = load_dataset(save_dataset(ds, tmp_path / "ds"))
        np.testing.assert_array_equal(loaded.images, ds.images)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        np.testing.assert_array_equal(loaded.test_idx, ds.test_idx)
        assert loaded.manifest == ds.manifest
        assert loaded.attributes is None

    def test_round_trip_attributes(self, tmp_path):
        ds = gen_attribute_world(seed=1, count=30)
        loaded = load_dataset(save_dataset(ds, tmp_path / "ds"))
        np.testing.assert_array_equal(loaded.attributes, ds.attributes)
        np.testing.assert_array_equal(loaded.condition_table, ds.condition_table)
        assert loaded.zero_shot_classes == ds.zero_shot_classes

    def test_tampered_tensors_are_detected(self, tmp_path):
        d = save_dataset(gen_shapes(seed=1, count=10, m=2), tmp_path / "ds")
        raw = bytearray((d / TENSORS).read_bytes())
        raw[-1] ^= 0xFF
        (d / TENSORS).write_bytes(bytes(raw))
        with pytest.raises(DatasetIntegrityError):
            load_dataset(d)


class TestContainer:
    def test_decode_rejects_bad_magic(self):
        with pytest.raises(ContainerError):
            decode_tensors(b"NOPE" + b"\x00" * 8)

    def test_decode_rejects_truncation(self):
        data = encode_tensors({"w": np.ones((3, 3))})
        with pytest.raises(ContainerError):
            decode_tensors(data[:-8])

    def test_empty_tensor_survives(self):
        out = decode_tensors(encode_tensors({"e": np.zeros(0), "s": np.array(2.5)}))
        assert out["e"].shape == (0,)
        assert float(out["s"]) == 2.5

    def test_manifest_is_sorted(self, tmp_path):
        path = tmp_path / "m.txt"
        write_manifest(path, {"b": 2, "a": "x"})
        assert path.read_text(encoding="utf-8") == "a=x\nb=2\n"
        assert read_manifest(path) == {"a": "x", "b": "2"}

    def test_manifest_rejects_multiline(self, tmp_path):
        with pytest.raises(ValueError):
            write_manifest(tmp_path / "m.txt", {"a": "x\ny"})
