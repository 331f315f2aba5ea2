import gzip
import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfspeckle import dataio as d

MNIST_DIR = os.environ.get("MNIST_DIR", "")


def idx_images(n, rows, cols, payload=None, magic=0x803):
    payload = bytes(range(256)) * (n * rows * cols // 256 + 1) if payload is None else payload
    return struct.pack(">IIII", magic, n, rows, cols) + payload[: n * rows * cols]


def test_idx_images_header():
    data = bytes.fromhex("00000803 00000002 0000001C 0000001C") + bytes(2 * 28 * 28)
    imgs = d.parse_idx_images(data)
    assert imgs.shape == (2, 28, 28) and imgs.dtype == np.uint8


def test_idx_payload_order():
    data = idx_images(1, 2, 3, bytes([1, 2, 3, 4, 5, 6]))
    assert d.parse_idx(data).tolist() == [[[1, 2, 3], [4, 5, 6]]]


def test_idx_labels():
    data = bytes.fromhex("00000801 00000003 070209")
    assert d.parse_idx_labels(data).tolist() == [7, 2, 9]


def test_idx_errors():
    with pytest.raises(d.BadMagic):
        d.parse_idx_images(bytes.fromhex("00000804 00000001 00000001 00000001 00"))
    with pytest.raises(d.BadMagic):
        d.parse_idx_labels(idx_images(1, 1, 1))
    with pytest.raises(d.TruncatedStream):
        d.parse_idx(b"\x00\x00\x08")
    with pytest.raises(d.TruncatedStream):
        d.parse_idx(idx_images(2, 4, 4)[:-1])
    with pytest.raises(d.TruncatedStream):
        d.parse_idx(bytes.fromhex("00000803 00000001 0000"))
    with pytest.raises(d.DimOverflow):
        d.parse_idx(struct.pack(">IIII", 0x803, 0xFFFFFFFF, 0xFFFF, 0xFFFF))


def test_load_mnist_from_gz(tmp_path):
    imgs = np.arange(3 * 28 * 28, dtype=np.uint32).astype(np.uint8).tobytes()
    (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(idx_images(3, 28, 28, imgs)))
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 3) + bytes([4, 0, 9]))
    images, labels = d.load_mnist(tmp_path, "test")
    assert images.shape == (3, 28, 28) and labels.tolist() == [4, 0, 9]
    digits = d.mnist_digits(tmp_path, "test", 2, (16, 16), offset=1)
    assert [x.label for x in digits] == [0, 9] and digits[0].pixels.shape == (16, 16)


def test_load_mnist_count_mismatch(tmp_path):
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(idx_images(2, 28, 28))
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(d.FormatError):
        d.load_mnist(tmp_path, "test")


@pytest.mark.skipif(not MNIST_DIR, reason="set MNIST_DIR to check the canonical files")
def test_canonical_mnist():
    for split, n in (("train", 60000), ("test", 10000)):
        images, labels = d.load_mnist(MNIST_DIR, split)
        assert images.shape == (n, 28, 28) and labels.shape == (n,)
    images, _ = d.load_mnist(MNIST_DIR, "train")
    frac = d.binarize(images[:1000]).reshape(1000, -1).mean(axis=1)
    assert np.mean((frac >= 0.05) & (frac <= 0.40)) >= 0.95


def test_binarize():
    g = np.array([[127, 128], [0, 255]], dtype=np.uint8)
    assert d.binarize(g, 128).tolist() == [[0, 1], [0, 1]]
    assert d.binarize(g, 0).all()


@given(st.lists(st.integers(0, 255), min_size=1, max_size=30), st.integers(0, 255))
def test_binarize_idempotent(values, t):
    b = d.binarize(np.array(values, dtype=np.uint8), t)
    assert np.array_equal(d.binarize(b, 1), b)


def test_resize_binary_examples():
    img = (np.random.default_rng(0).random((8, 8)) < 0.5).astype(np.uint8)
    assert np.array_equal(d.resize_binary(img, (8, 8)), img)
    assert d.resize_binary(np.ones((8, 8)), (4, 4)).tolist() == np.ones((4, 4)).tolist()
    checker = np.indices((28, 28)).sum(axis=0) % 2
    # every 2x2 block is half covered, and ties go to 1
    assert d.resize_binary(checker, (14, 14)).all()
    with pytest.raises(ValueError):
        d.resize_binary(img, (2, 2))


def test_resize_binary_majority():
    img = np.zeros((8, 8), np.uint8)
    img[0, 0] = 1  # one of four pixels in the first block
    img[2:4, 2] = 1  # two of four in block (1, 1)
    img[4:6, 4:6] = 1
    img[4, 4] = 0  # three of four in block (2, 2)
    out = d.resize_binary(img, (4, 4))
    assert out[0, 0] == 0 and out[1, 1] == 1 and out[2, 2] == 1 and out.sum() == 2


def test_upscale_replicates():
    img = np.array([[[1, 0, 0, 1], [0, 1, 1, 0], [0, 0, 0, 0], [1, 1, 1, 1]]], np.uint8)
    assert np.array_equal(d.upscale_targets(img, (8, 8))[0], np.kron(img[0], np.ones((2, 2))))


def test_quantize_u8():
    assert not d.quantize_u8(np.zeros((3, 3))).any()
    s = np.random.default_rng(1).random((5, 5))
    q = d.quantize_u8(s)
    assert q.dtype == np.uint8 and q.max() == 255 and q.flat[s.argmax()] == 255
    assert np.array_equal(d.quantize_u8(3.7 * s), q)
    # half up: 0.5/255 of the peak rounds to 1
    assert d.quantize_u8(np.array([0.5 / 255, 1.0])).tolist() == [1, 255]


def test_standardize():
    s = np.random.default_rng(2).random((3, 4, 4)) * 10
    z = d.standardize(s)
    assert z.dtype == np.float32
    assert np.allclose(z.reshape(3, -1).mean(axis=1), 0, atol=1e-6)
    assert np.allclose(z.reshape(3, -1).std(axis=1), 1, atol=1e-5)
    assert not d.standardize(np.ones((1, 2, 2))).any()


def test_synth_digits():
    a = d.synth_digits(np.random.default_rng(3), 1000, (16, 16))
    b = d.synth_digits(np.random.default_rng(3), 1000, (16, 16))
    assert all(x.label == y.label and np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    counts = np.bincount([x.label for x in a], minlength=10)
    assert counts.min() >= 50
    frac = np.array([x.pixels.mean() for x in a])
    assert np.mean((frac >= 0.05) & (frac <= 0.40)) >= 0.95
    assert all(set(np.unique(x.pixels)) <= {0, 1} for x in a)
    with pytest.raises(ValueError):
        d.synth_digits(np.random.default_rng(0), 0)


def test_digit_image_validation():
    with pytest.raises(ValueError):
        d.DigitImage(np.array([[2]]), 1)
    with pytest.raises(ValueError):
        d.DigitImage(np.zeros((2, 2)), 10)


def random_container(rng, n, hw=(6, 5), dhw=(4, 11), k=3):
    return d.DatasetContainer(
        rng.integers(0, 256, (n, *hw), dtype=np.uint8),
        rng.standard_normal((n, *hw)).astype(np.float32),
        rng.integers(0, 2, (n, *dhw), dtype=np.uint8),
        rng.integers(0, 10, n).astype(np.uint8),
        rng.integers(0, 2**32, n, dtype=np.uint64).astype(np.uint32),
        rng.random((n, k)).astype(np.float32),
    )


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 12), h=st.integers(1, 9), w=st.integers(1, 9),
       dh=st.integers(1, 9), dw=st.integers(1, 17), k=st.integers(1, 6))
def test_container_roundtrip(seed, n, h, w, dh, dw, k):
    c = random_container(np.random.default_rng(seed), n, (h, w), (dh, dw), k)
    data = d.encode_dataset(c)
    back = d.decode_dataset(data)
    assert back.equals(c)
    assert d.encode_dataset(back) == data


def test_container_layout():
    c = random_container(np.random.default_rng(0), 2, (3, 4), (2, 9), 5)
    data = d.encode_dataset(c)
    magic, version, n, w, h, dw, dh, k = struct.unpack_from("<4sIQHHHHH", data)
    assert (magic, version, n, w, h, dw, dh, k) == (b"MMFD", 1, 2, 4, 3, 9, 2, 5)
    record = 12 + 12 * 4 + 2 * 2 + 1 + 4 + 5 * 4
    assert len(data) == 26 + 2 * record + 4
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[26:-4])
    # first record: u8 speckle bytes, then raw floats
    assert data[26:38] == c.speckle_u8[0].tobytes()
    assert data[38:86] == c.speckle_raw[0].astype("<f4").tobytes()


def test_container_errors(tmp_path):
    c = random_container(np.random.default_rng(1), 3)
    path = tmp_path / "x.mmfd"
    d.write_dataset(path, c)
    assert d.read_dataset(path).equals(c)
    data = path.read_bytes()
    with pytest.raises(d.BadMagic):
        d.decode_dataset(b"XXXX" + data[4:])
    with pytest.raises(d.VersionMismatch):
        d.decode_dataset(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(d.TruncatedStream):
        d.decode_dataset(data[:-10])
    with pytest.raises(d.TruncatedStream):
        d.decode_dataset(data[:10])
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(d.ChecksumError):
        d.decode_dataset(bytes(flipped))


def test_container_helpers():
    rng = np.random.default_rng(4)
    a, b = random_container(rng, 3), random_container(rng, 2)
    both = d.DatasetContainer.concat([a, b])
    assert len(both) == 5 and both.subset(slice(0, 3)).equals(a)
    assert both.inputs().shape == (5, 1, 6, 5)
    with pytest.raises(ValueError):
        d.DatasetContainer(a.speckle_u8, a.speckle_raw, a.digits, a.labels[:2], a.config_ids, a.thetas)


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "m.manifest"
    d.write_manifest(path, {"run": {"seed": 7, "sigma": 0.1 + 0.2, "dims": (16, 16)}, "results": {"ok": "yes"}})
    m = d.read_manifest(path)
    assert m["run"] == {"seed": "7", "sigma": repr(0.1 + 0.2), "dims": "16,16"}
    assert float(m["run"]["sigma"]) == 0.1 + 0.2
    assert m["results"]["ok"] == "yes"
    path.write_text("oops\n")
    with pytest.raises(d.FormatError):
        d.read_manifest(path)
