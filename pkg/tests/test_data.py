import numpy as np
import pytest

from advlab.data import DataFormatError, Dataset, batch_indices, batch_iter, load_cifar10, synth_dataset


def write_records(path, labels, fill=255):
    rec = bytearray()
    for lab in labels:
        rec.append(lab)
        rec.extend(bytes([fill]) * 3072)
    path.write_bytes(bytes(rec))
    return path


def test_cifar_single_record(tmp_path):
    ds = load_cifar10([write_records(tmp_path / "b.bin", [7])])
    assert len(ds) == 1 and ds.class_count == 10
    assert ds[0].label == 7
    assert ds.images.shape == (1, 3, 32, 32)
    assert np.all(ds[0].pixels == 1.0)


def test_cifar_channel_planes_and_order(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, size=(3, 3073), dtype=np.uint8)
    raw[:, 0] = [3, 0, 9]
    (tmp_path / "a.bin").write_bytes(raw.tobytes())
    ds = load_cifar10([tmp_path / "a.bin"])
    assert list(ds.labels) == [3, 0, 9]
    # red plane occupies the first 1024 bytes, row-major
    assert ds.images[1, 0, 0, 5] == np.float32(raw[1, 1 + 5]) / 255
    assert ds.images[2, 2, 31, 31] == np.float32(raw[2, 3072]) / 255
    requant = np.round(ds.images * 255).astype(np.uint8).reshape(3, -1)
    assert np.array_equal(requant, raw[:, 1:])


def test_cifar_multiple_files_concatenate(tmp_path):
    a = write_records(tmp_path / "a.bin", [1, 2])
    b = write_records(tmp_path / "b.bin", [5])
    assert list(load_cifar10([a, b]).labels) == [1, 2, 5]


@pytest.mark.parametrize("size", [0, 3072, 3074])
def test_cifar_bad_length(tmp_path, size):
    p = tmp_path / "bad.bin"
    p.write_bytes(bytes(size))
    with pytest.raises(DataFormatError):
        load_cifar10([p])


def test_cifar_bad_label(tmp_path):
    with pytest.raises(DataFormatError, match="label"):
        load_cifar10([write_records(tmp_path / "x.bin", [4, 10])])


def test_synth_deterministic_and_bounded():
    a = synth_dataset(4, 5, 16, seed=3)
    b = synth_dataset(4, 5, 16, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(4, 5, 16, seed=4).images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [5] * 4


@pytest.mark.parametrize("kw", [dict(K=1), dict(side=15), dict(n_per_class=0), dict(K=20, side=16)])
def test_synth_rejects_bad_args(kw):
    args = dict(K=4, n_per_class=2, side=16, seed=0) | kw
    with pytest.raises(ValueError):
        synth_dataset(**args)


def test_synth_linear_probe_separates_two_classes():
    ds = synth_dataset(2, 200, 16, seed=0)
    X = np.c_[ds.images.reshape(len(ds), -1).astype(np.float64), np.ones(len(ds))]
    t = np.where(ds.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(X, t, rcond=None)
    assert np.mean(np.sign(X @ w) == t) >= 0.95


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3, 4, 4), np.float32), np.zeros(0, int), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 3, 4, 4), np.float32), np.array([2]), 2)


def test_batch_sizes_and_order():
    ds = synth_dataset(2, 5, 8, seed=0)
    batches = list(batch_iter(ds, 4))
    assert [len(y) for _, y in batches] == [4, 4, 2]
    assert np.array_equal(np.concatenate([x for x, _ in batches]), ds.images)


def test_seeded_batches_cover_every_index_once():
    idx = np.concatenate(batch_indices(37, 8, shuffle_seed=11))
    assert sorted(idx.tolist()) == list(range(37))
    assert not np.array_equal(idx, np.arange(37))
    assert np.array_equal(idx, np.concatenate(batch_indices(37, 8, shuffle_seed=11)))


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        next(batch_iter(synth_dataset(2, 1, 8, seed=0), 0))
