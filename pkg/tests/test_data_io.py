"""Dataset ingestion and checkpoint persistence contracts."""

import os

import numpy as np
import pytest

from conftest import small_critic, small_extractor, small_purifier
from nrp.checkpoint import (CheckpointError, deserialize_state, load_checkpoint, load_state,
                            save_checkpoint, serialize_state)
from nrp.data import (DataError, Dataset, DatasetHandle, load_cifar10, load_dataset,
                      make_synthetic, random_crop, read_imgb, write_imgb)
from nrp.networks import count_parameters, build_purifier, PurifierConfig
from nrp.rng import SeededRng


class TestSynthetic:
    def test_same_seed_identical_stream(self):
        a = load_dataset(DatasetHandle(source="synthetic", size=32, seed=5))
        b = load_dataset(DatasetHandle(source="synthetic", size=32, seed=5))
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_splits_differ(self):
        tr = load_dataset(DatasetHandle(source="synthetic", size=32, seed=5, split="train"))
        te = load_dataset(DatasetHandle(source="synthetic", size=32, seed=5, split="test"))
        assert not np.array_equal(tr.images, te.images)

    def test_range_and_labels(self):
        ds = make_synthetic(64, seed=1)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.labels.min() >= 0 and ds.labels.max() <= 3
        assert ds.num_classes == 4

    def test_batches_deterministic_with_rng(self):
        ds = make_synthetic(40, seed=2)
        order1 = [b.labels for b in ds.batches(16, SeededRng(3))]
        order2 = [b.labels for b in ds.batches(16, SeededRng(3))]
        for a, b in zip(order1, order2):
            assert np.array_equal(a, b)

    def test_random_crop_shapes_and_determinism(self):
        ds = make_synthetic(8, seed=3)
        a = random_crop(ds.images, 16, SeededRng(4))
        b = random_crop(ds.images, 16, SeededRng(4))
        assert a.shape == (8, 3, 16, 16)
        assert np.array_equal(a, b)
        with pytest.raises(DataError):
            random_crop(ds.images, 64, SeededRng(4))


class TestCifar10Binary:
    def _write_fake(self, tmp_path, n=10, label_fn=lambda i: i % 10):
        rng = SeededRng(7)
        records = []
        for i in range(n):
            label = np.array([label_fn(i)], dtype=np.uint8)
            pixels = rng.integers(0, 256, size=3072).astype(np.uint8)
            records.append(np.concatenate([label, pixels]))
        blob = np.concatenate(records).tobytes()
        for name in [f"data_batch_{j}.bin" for j in range(1, 6)] + ["test_batch.bin"]:
            (tmp_path / name).write_bytes(blob)
        return tmp_path

    def test_roundtrip_geometry(self, tmp_path):
        d = self._write_fake(tmp_path)
        ds = load_cifar10(str(d), "train")
        assert ds.images.shape == (50, 3, 32, 32)
        assert load_cifar10(str(d), "test").images.shape == (10, 3, 32, 32)

    def test_zero_record_and_255_normalization(self, tmp_path):
        rec = np.zeros(3073, dtype=np.uint8)
        rec[0] = 3
        rec2 = np.full(3073, 255, dtype=np.uint8)
        rec2[0] = 9
        blob = np.concatenate([rec, rec2]).tobytes()
        for name in [f"data_batch_{j}.bin" for j in range(1, 6)] + ["test_batch.bin"]:
            (tmp_path / name).write_bytes(blob)
        ds = load_cifar10(str(tmp_path), "test")
        assert np.array_equal(ds.labels, [3, 9])
        assert ds.images[0].max() == 0.0
        assert ds.images[1].min() == 1.0  # byte 255 -> exactly 1.0

    def test_truncated_rejected(self, tmp_path):
        d = self._write_fake(tmp_path)
        path = d / "test_batch.bin"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataError, match="truncated"):
            load_cifar10(str(d), "test")

    def test_label_out_of_range_rejected(self, tmp_path):
        d = self._write_fake(tmp_path, label_fn=lambda i: 200)
        with pytest.raises(DataError, match="label"):
            load_cifar10(str(d), "test")

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_cifar10(str(tmp_path), "train")


class TestImgb:
    def test_roundtrip(self, tmp_path):
        ds = make_synthetic(12, seed=8)
        path = str(tmp_path / "batch.imgb")
        write_imgb(path, ds.images, ds.labels)
        back = read_imgb(path)
        assert back.images.shape == ds.images.shape
        assert np.array_equal(back.labels, ds.labels)
        # u8 quantization: within half a step
        assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6

    def test_u8_exact_endpoints(self, tmp_path):
        images = np.stack([np.zeros((3, 4, 4), np.float32), np.ones((3, 4, 4), np.float32)])
        path = str(tmp_path / "ends.imgb")
        write_imgb(path, images, np.array([0, 1]))
        back = read_imgb(path)
        assert back.images[0].max() == 0.0 and back.images[1].min() == 1.0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.imgb"
        path.write_bytes(b"JUNK" + b"\x00" * 64)
        with pytest.raises(DataError, match="IMGB"):
            read_imgb(str(path))

    def test_truncation_rejected(self, tmp_path):
        ds = make_synthetic(4, seed=9)
        path = str(tmp_path / "t.imgb")
        write_imgb(path, ds.images, ds.labels)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-7])
        with pytest.raises(DataError, match="expected"):
            read_imgb(path)

    def test_write_is_atomic(self, tmp_path):
        ds = make_synthetic(4, seed=10)
        path = str(tmp_path / "a.imgb")
        write_imgb(path, ds.images, ds.labels)
        leftovers = [f for f in os.listdir(tmp_path) if ".tmp." in f]
        assert not leftovers


class TestDatasetValidation:
    def test_pixel_range_enforced(self):
        with pytest.raises(DataError):
            Dataset(np.full((1, 3, 2, 2), 1.5, np.float32), None)

    def test_label_shape_enforced(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 3, 2, 2), np.float32), np.array([1]))

    def test_unknown_source_rejected(self):
        with pytest.raises(DataError):
            DatasetHandle(source="webdataset")


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, tmp_path):
        net = small_extractor(seed=4)
        p1, p2 = str(tmp_path / "a.nrpc"), str(tmp_path / "b.nrpc")
        save_checkpoint(net, p1)
        other = small_extractor(seed=9)
        load_checkpoint(other, p1)
        save_checkpoint(other, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_roundtrip_bit_identical(self, tmp_path):
        net = small_critic(seed=5)  # exercises buffers too
        path = str(tmp_path / "c.nrpc")
        save_checkpoint(net, path)
        state = load_state(path)
        for name, arr in net.state().items():
            assert np.array_equal(state[name], arr), name

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.nrpc"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_state(str(path))

    def test_unknown_version_rejected(self):
        blob = bytearray(serialize_state({"t": np.zeros(3, np.float32)}))
        blob[4] = 99
        with pytest.raises(CheckpointError, match="version"):
            deserialize_state(bytes(blob))

    def test_truncated_rejected(self):
        blob = serialize_state({"t": np.arange(8, dtype=np.float32)})
        with pytest.raises(CheckpointError):
            deserialize_state(blob[:-5])

    def test_mismatched_architecture_names_offender(self, tmp_path):
        src = small_purifier(seed=6)
        path = str(tmp_path / "p.nrpc")
        save_checkpoint(src, path)
        wrong = small_extractor(seed=7)
        with pytest.raises(Exception) as err:
            load_checkpoint(wrong, path)
        assert "b1c1" in str(err.value) or "head" in str(err.value)

    def test_f64_tensors_roundtrip(self):
        state = {"a": np.linspace(0, 1, 7, dtype=np.float64),
                 "b": np.ones((2, 3), np.float32)}
        back = deserialize_state(serialize_state(state))
        assert back["a"].dtype == np.float64 and np.array_equal(back["a"], state["a"])
        assert back["b"].dtype == np.float32

    def test_purifier_tensor_count_matches_declared_parameters(self, tmp_path):
        cfg = PurifierConfig(width=6, basic_blocks=1, dense_blocks=2, growth=3)
        net = build_purifier(cfg)
        path = str(tmp_path / "count.nrpc")
        save_checkpoint(net, path)
        state = load_state(path)
        # purifier has no batch-norm buffers: tensor count == parameter tensors
        assert len(state) == len(net.params)
        assert sum(a.size for a in state.values()) == count_parameters(net)

    def test_scalar_rank_zero_roundtrip(self):
        state = {"s": np.asarray(3.25, dtype=np.float32)}
        back = deserialize_state(serialize_state(state))
        assert back["s"].shape == () and float(back["s"]) == 3.25
