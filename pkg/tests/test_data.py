import numpy as np
import pytest

from cramnet.data import (
    RECORD_BYTES, Dataset, DatasetFormatError, batches, encode_cifar_records, load_cifar10,
    parse_cifar_records, split, synth_dataset, write_cifar10,
)


def random_records(rng, n):
    raw = rng.integers(0, 256, size=(n, RECORD_BYTES), dtype=np.uint8)
    raw[:, 0] = rng.integers(0, 10, size=n)
    return raw.tobytes()


def test_record_layout_is_channel_planar():
    rec = np.zeros(RECORD_BYTES, dtype=np.uint8)
    rec[0] = 7
    rec[1] = 255            # R at (0, 0)
    rec[1 + 1024 + 33] = 51  # G at (1, 1)
    rec[1 + 2048 + 1023] = 102  # B at (31, 31)
    images, labels = parse_cifar_records(rec.tobytes())
    assert labels.tolist() == [7]
    assert images[0, 0, 0, 0] == 1.0 and images[0, 1, 1, 1] == 0.2 and images[0, 31, 31, 2] == 0.4
    assert np.count_nonzero(images) == 3


def test_all_zero_record():
    images, labels = parse_cifar_records(bytes(RECORD_BYTES))
    assert labels.tolist() == [0] and images.shape == (1, 32, 32, 3) and not images.any()


def test_format_errors():
    with pytest.raises(DatasetFormatError):
        parse_cifar_records(bytes(RECORD_BYTES + 1))
    bad = bytearray(RECORD_BYTES)
    bad[0] = 10
    with pytest.raises(DatasetFormatError):
        parse_cifar_records(bytes(bad))


def test_record_round_trip(rng):
    raw = random_records(rng, 20)
    images, labels = parse_cifar_records(raw)
    assert encode_cifar_records(images, labels) == raw
    assert images.min() >= 0.0 and images.max() <= 1.0


@pytest.mark.slow
def test_load_full_sized_cifar_layout(tmp_path, rng):
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(bytes(10_000 * RECORD_BYTES))
    (tmp_path / "test_batch.bin").write_bytes(random_records(rng, 10_000))
    train, test = load_cifar10(tmp_path)
    assert train.images.shape == (50_000, 32, 32, 3) and len(test) == 10_000
    assert test.classes == 10
    tr, val = split(train, 0.1, seed=0)
    assert (len(tr), len(val)) == (45_000, 5_000)


def test_write_then_load_cifar(tmp_path):
    train = synth_dataset(10, 3, 32, 32, 3, seed=4)
    test = synth_dataset(10, 1, 32, 32, 3, seed=5)
    write_cifar10(tmp_path, train, test)
    tr, te = load_cifar10(tmp_path)
    assert np.array_equal(tr.labels, train.labels) and np.array_equal(te.labels, test.labels)
    assert np.max(np.abs(tr.images - train.images)) <= 0.5 / 255 + 1e-12


def test_synth_dataset_properties():
    a = synth_dataset(8, 10, 16, 16, 3, seed=3)
    b = synth_dataset(8, 10, 16, 16, 3, seed=3)
    assert a.images.shape == (80, 16, 16, 3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert np.bincount(a.labels).tolist() == [10] * 8
    assert not np.array_equal(a.images, synth_dataset(8, 10, 16, 16, 3, seed=4).images)
    empty = synth_dataset(4, 0)
    assert len(empty) == 0 and empty.images.shape == (0, 16, 16, 3)


def test_batches():
    d = Dataset(np.arange(10.0).reshape(10, 1), np.arange(10) % 3, 3)
    sizes = [len(x) for x, _ in batches(d, 3, shuffle=True, seed=1)]
    assert sizes == [3, 3, 3, 1]
    ordered = np.concatenate([x for x, _ in batches(d, 3, shuffle=False)])
    assert np.array_equal(ordered[:, 0], np.arange(10.0))
    one = [x[:, 0].tolist() for x, _ in batches(d, 3, seed=5)]
    two = [x[:, 0].tolist() for x, _ in batches(d, 3, seed=5)]
    assert one == two and sorted(sum(one, [])) == list(range(10))
    _, y = next(batches(d, 4, shuffle=False))
    assert np.array_equal(y, np.eye(3)[[0, 1, 2, 0]])


def test_split_disjoint_exhaustive_deterministic():
    d = Dataset(np.arange(100.0).reshape(100, 1), np.zeros(100, dtype=int), 1)
    tr, val = split(d, 0.1, seed=3)
    assert (len(tr), len(val)) == (90, 10)
    a, b = set(tr.images[:, 0]), set(val.images[:, 0])
    assert not a & b and a | b == set(range(100))
    tr2, val2 = split(d, 0.1, seed=3)
    assert np.array_equal(val.images, val2.images)
    with pytest.raises(ValueError):
        split(d, 1.0)


def test_dataset_label_range():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), [0, 3], 3)
