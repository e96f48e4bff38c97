import numpy as np
import pytest
import torch

from herdkit.data import (
    DataError, Dataset, ImageBatch, decode_records, epoch_batches, load_cifar10, make_batch,
    normalize, random_hflip, sha256_file, verify_archive,
)


def reference_decode(raw: bytes, index: int):
    """Decode one record with plain byte indexing (no numpy reshapes)."""
    rec = raw[index * 3073:(index + 1) * 3073]
    label = rec[0]
    img = [[[rec[1 + c * 1024 + r * 32 + col] for col in range(32)] for r in range(32)]
           for c in range(3)]
    return label, img


def test_load_tiny_splits(tiny_cifar):
    train = load_cifar10(tiny_cifar, "train")
    test = load_cifar10(tiny_cifar, "test")
    assert len(train) == 200 and len(test) == 40
    assert train.images.shape == (200, 3, 32, 32) and train.images.dtype == np.uint8
    assert set(np.unique(test.labels)) <= set(range(10))


def test_record_order_and_decode(tiny_cifar):
    raw = (tiny_cifar / "data_batch_2.bin").read_bytes()
    train = load_cifar10(tiny_cifar, "train")
    for i in (0, 1, 17, 39):
        label, img = reference_decode(raw, i)
        assert train.labels[40 + i] == label
        assert train.images[40 + i].tolist() == img


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_cifar10(tmp_path, "test")


def test_bad_length(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(b"\x00" * 3074)
    with pytest.raises(DataError, match="multiple of 3073"):
        load_cifar10(tmp_path, "test")


def test_bad_label():
    raw = bytearray(3073 * 2)
    raw[3073] = 10
    with pytest.raises(DataError, match="label byte 10"):
        decode_records(bytes(raw))


def test_normalize_values():
    out = normalize(np.array([0, 255, 51], dtype=np.uint8))
    assert out.dtype == np.float32
    assert out[0] == 0.0 and out[1] == 1.0
    assert out[2] == np.float32(0.2)


def _dataset(m):
    rng = np.random.default_rng(0)
    return Dataset(rng.integers(0, 256, (m, 3, 32, 32), dtype=np.uint8),
                   rng.integers(0, 10, m), "train")


def test_epoch_batches_chunking_and_permutation():
    ds = _dataset(10)
    batches = list(epoch_batches(ds, 4, rng_seed=3))
    assert [len(b) for b in batches] == [4, 4, 2]
    idx = np.concatenate([b.indices for b in batches])
    assert sorted(idx.tolist()) == list(range(10))
    again = np.concatenate([b.indices for b in epoch_batches(ds, 4, rng_seed=3)])
    assert np.array_equal(idx, again)
    other = np.concatenate([b.indices for b in epoch_batches(ds, 4, rng_seed=4)])
    assert not np.array_equal(idx, other)


def test_epoch_batches_contents_match_indices():
    ds = _dataset(7)
    for b in epoch_batches(ds, 3, rng_seed=1):
        assert torch.equal(b.pixels, torch.from_numpy(ds.images[b.indices] / np.float32(255)))
        assert b.pixels.min() >= 0 and b.pixels.max() <= 1


def test_epoch_batches_errors():
    with pytest.raises(DataError):
        list(epoch_batches(_dataset(0), 4, 0))
    with pytest.raises(DataError):
        list(epoch_batches(_dataset(3), 0, 0))


def test_subset_takes_canonical_prefix():
    ds = _dataset(10)
    sub = ds.subset(4)
    assert np.array_equal(sub.images, ds.images[:4])
    assert ds.subset(None) is ds


def test_hflip_p0_identity():
    batch = make_batch(_dataset(5), np.arange(5))
    out = random_hflip(batch, 0.0, rng_seed=9)
    assert torch.equal(out.pixels, batch.pixels)


def test_hflip_p1_mirror_definition():
    batch = make_batch(_dataset(3), np.arange(3))
    out = random_hflip(batch, 1.0, rng_seed=9).pixels
    src = batch.pixels
    for r in (0, 5, 31):
        for c in (0, 7, 31):
            assert torch.equal(out[:, :, r, c], src[:, :, r, 31 - c])


def test_hflip_involution_and_input_untouched():
    batch = make_batch(_dataset(4), np.arange(4))
    before = batch.pixels.clone()
    once = random_hflip(batch, 1.0, 1)
    twice = random_hflip(once, 1.0, 2)
    assert torch.equal(twice.pixels, batch.pixels)
    assert torch.equal(batch.pixels, before)


def test_hflip_per_image_rate():
    batch = ImageBatch(torch.arange(32.0).repeat(2000, 3, 32, 1), torch.zeros(2000))
    out = random_hflip(batch, 0.5, rng_seed=11).pixels
    flipped = (out[:, 0, 0, 0] == 31).float().mean().item()
    assert 0.45 < flipped < 0.55


def test_hflip_rejects_bad_p():
    batch = make_batch(_dataset(1), [0])
    with pytest.raises(ValueError):
        random_hflip(batch, 1.5, 0)


def test_archive_digest(tmp_path):
    path = tmp_path / "a.bin"
    path.write_bytes(b"abc")
    digest = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert sha256_file(path) == digest
    assert verify_archive(path, digest.upper())
    assert not verify_archive(path, "0" * 64)
