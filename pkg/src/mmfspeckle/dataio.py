"""Digit ingestion, binarization, and the speckle dataset container.

IDX files are big-endian (images magic 0x00000803, labels 0x00000801). The
dataset container is little-endian::

    "MMFD" | u32 version | u64 count | u16 W,H speckle | u16 W,H digit | u16 K
    count * record | u32 CRC-32 of the record payload

and each record is ``speckle u8 (W*H) | speckle f32 (W*H) | digit bits
(rows padded to a byte) | label u8 | config id u32 | theta f32 (K)``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_MAX_ITEMS = 1 << 28

CONTAINER_MAGIC = b"MMFD"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sIQHHHHH")
_CRC = struct.Struct("<I")

DEFAULT_THRESHOLD = 128


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedStream(FormatError):
    pass


class DimOverflow(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ChecksumError(FormatError):
    pass


@dataclass(frozen=True)
class DigitImage:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if np.any(px > 1):
            raise ValueError("digit pixels must be binary")
        if not 0 <= int(self.label) <= 9:
            raise ValueError(f"label {self.label} outside 0-9")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "label", int(self.label))


# --------------------------------------------------------------------------- IDX


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX image (n, rows, cols) or label (n,) stream into uint8."""
    if len(data) < 8:
        raise TruncatedStream("IDX stream shorter than its 8-byte header")
    magic, count = struct.unpack(">II", data[:8])
    if magic == IDX_LABELS_MAGIC:
        dims = (count,)
        offset = 8
    elif magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise TruncatedStream("IDX image header truncated")
        rows, cols = struct.unpack(">II", data[8:16])
        dims = (count, rows, cols)
        offset = 16
    else:
        raise BadMagic(f"unknown IDX magic 0x{magic:08x}")
    total = 1
    for d in dims:
        total *= d
    if count > IDX_MAX_ITEMS or total > IDX_MAX_ITEMS * 1024:
        raise DimOverflow(f"IDX dimensions {dims} are implausibly large")
    if len(data) - offset < total:
        raise TruncatedStream(f"IDX payload has {len(data) - offset} bytes, expected {total}")
    return np.frombuffer(data, dtype=np.uint8, count=total, offset=offset).reshape(dims).copy()


def parse_idx_images(data: bytes) -> np.ndarray:
    if len(data) >= 4 and struct.unpack(">I", data[:4])[0] != IDX_IMAGES_MAGIC:
        raise BadMagic("expected an IDX image file (magic 0x00000803)")
    return parse_idx(data)


def parse_idx_labels(data: bytes) -> np.ndarray:
    if len(data) >= 4 and struct.unpack(">I", data[:4])[0] != IDX_LABELS_MAGIC:
        raise BadMagic("expected an IDX label file (magic 0x00000801)")
    return parse_idx(data)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        import gzip

        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(path)


def load_mnist(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Read the canonical MNIST split from ``directory`` (plain or .gz)."""
    img_name, lbl_name = MNIST_FILES[split]
    directory = Path(directory)
    images = parse_idx_images(_read_maybe_gz(directory / img_name))
    labels = parse_idx_labels(_read_maybe_gz(directory / lbl_name))
    if len(images) != len(labels):
        raise FormatError("image and label counts differ")
    return images, labels


def mnist_digits(directory, split: str, n: int, dims, threshold: int = DEFAULT_THRESHOLD, offset: int = 0):
    images, labels = load_mnist(directory, split)
    out = []
    for img, lab in zip(images[offset:offset + n], labels[offset:offset + n]):
        out.append(DigitImage(resize_binary(binarize(img, threshold), dims), int(lab)))
    return out


# ---------------------------------------------------------------- image helpers


def binarize(gray, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    return (np.asarray(gray) >= threshold).astype(np.uint8)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of fractional overlaps between output and input cells."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def resize_binary(img, out_dims) -> np.ndarray:
    """Area-average onto the new grid, then keep pixels with coverage >= 0.5.

    Integer downscaling is an exact block average (ties go to 1) and integer
    upscaling replicates pixels. ``out_dims`` is (W, H).
    """
    img = np.asarray(img)
    w, h = out_dims
    if min(w, h) < 4:
        raise ValueError("output dimensions must be at least 4")
    if img.shape == (h, w):
        return (img > 0).astype(np.uint8)
    rows = _area_weights(img.shape[0], h)
    cols = _area_weights(img.shape[1], w)
    avg = rows @ (img > 0).astype(np.float64) @ cols.T
    return (avg >= 0.5 - 1e-9).astype(np.uint8)


def upscale_targets(digits: np.ndarray, out_shape) -> np.ndarray:
    """Resize a (n, h, w) stack of binary digits to ``out_shape`` = (H, W)."""
    digits = np.asarray(digits)
    if digits.shape[1:] == tuple(out_shape):
        return digits.astype(np.uint8)
    h, w = out_shape
    return np.stack([resize_binary(d, (w, h)) for d in digits])


def quantize_u8(intensity) -> np.ndarray:
    """Per-image linear map [0, max] -> [0, 255], rounding half up."""
    x = np.asarray(getattr(intensity, "intensity", intensity), dtype=np.float64)
    peak = x.max() if x.size else 0.0
    if peak <= 0:
        return np.zeros(x.shape, dtype=np.uint8)
    return np.floor(x / peak * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def standardize(speckle: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image; returns float32."""
    s = np.asarray(speckle, dtype=np.float64)
    flat = s.reshape(len(s), -1)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    return ((flat - mu) / sd).reshape(s.shape).astype(np.float32)


# ------------------------------------------------------------ synthetic digits


def _arc(cx, cy, rx, ry, a0, a1, n=24):
    t = np.radians(np.linspace(a0, a1, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _poly(*pts):
    return np.asarray(pts, dtype=np.float64)


# Stroke skeletons in a unit box (x right, y down).
DIGIT_STROKES = {
    0: [_arc(0.5, 0.5, 0.28, 0.38, 0, 360, 40)],
    1: [_poly((0.38, 0.25), (0.55, 0.12), (0.55, 0.88))],
    2: [np.vstack([_arc(0.5, 0.33, 0.26, 0.21, 200, 385), _poly((0.7, 0.48), (0.24, 0.88), (0.78, 0.88))])],
    3: [_arc(0.48, 0.31, 0.25, 0.19, 200, 450), _arc(0.48, 0.69, 0.27, 0.19, 270, 520)],
    4: [_poly((0.62, 0.88), (0.62, 0.12), (0.2, 0.64), (0.8, 0.64))],
    5: [np.vstack([_poly((0.76, 0.12), (0.32, 0.12), (0.28, 0.46)), _arc(0.49, 0.66, 0.27, 0.22, 240, 500)])],
    6: [np.vstack([_poly((0.68, 0.12), (0.38, 0.42)), _arc(0.5, 0.66, 0.25, 0.22, 210, 570)])],
    7: [_poly((0.22, 0.12), (0.78, 0.12), (0.42, 0.88))],
    8: [_arc(0.5, 0.3, 0.22, 0.18, 0, 360), _arc(0.5, 0.69, 0.26, 0.2, 0, 360)],
    9: [np.vstack([_arc(0.5, 0.34, 0.24, 0.22, 0, 360), _poly((0.74, 0.34), (0.64, 0.88))])],
}


def _segment_distance(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def render_digit(label: int, dims, rng) -> np.ndarray:
    """Rasterize one jittered stroke template. ``dims`` is (W, H)."""
    w, h = dims
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)
    sx = rng.uniform(0.85, 1.1)
    sy = rng.uniform(0.85, 1.05)
    shear = rng.uniform(-0.2, 0.2)
    thickness = rng.uniform(0.04, 0.09)
    shift = np.array([rng.integers(-2, 3) / w, rng.integers(-2, 3) / h])
    dist = np.full(len(pts), np.inf)
    for stroke in DIGIT_STROKES[label]:
        s = stroke - 0.5
        s = np.stack([sx * s[:, 0] + shear * s[:, 1], sy * s[:, 1]], axis=1) + 0.5 + shift
        for a, b in zip(s[:-1], s[1:]):
            dist = np.minimum(dist, _segment_distance(pts, a, b))
    return (dist <= thickness / 2 + 0.5 / w).reshape(h, w).astype(np.uint8)


def synth_digits(rng, n: int, dims=(16, 16)) -> list[DigitImage]:
    """Procedural handwritten-style digits with uniformly drawn labels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = rng.integers(0, 10, size=n)
    return [DigitImage(render_digit(int(lab), dims, rng), int(lab)) for lab in labels]


def digit_arrays(digits) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([d.pixels for d in digits]).astype(np.uint8),
        np.array([d.label for d in digits], dtype=np.uint8),
    )


# ------------------------------------------------------------------ container


@dataclass
class DatasetContainer:
    speckle_u8: np.ndarray  # (n, H, W) uint8
    speckle_raw: np.ndarray  # (n, H, W) float32
    digits: np.ndarray  # (n, h, w) uint8 in {0, 1}
    labels: np.ndarray  # (n,) uint8
    config_ids: np.ndarray  # (n,) uint32
    thetas: np.ndarray  # (n, K) float32

    def __post_init__(self):
        n = len(self.labels)
        for name in ("speckle_u8", "speckle_raw", "digits", "config_ids", "thetas"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} records, expected {n}")

    def __len__(self):
        return len(self.labels)

    @property
    def n_actuators(self) -> int:
        return self.thetas.shape[1]

    def subset(self, index) -> "DatasetContainer":
        return DatasetContainer(
            self.speckle_u8[index],
            self.speckle_raw[index],
            self.digits[index],
            self.labels[index],
            self.config_ids[index],
            self.thetas[index],
        )

    def inputs(self) -> np.ndarray:
        """Network inputs: standardized raw speckle, shape (n, 1, H, W)."""
        return standardize(self.speckle_raw)[:, None]

    def target_images(self, out_shape) -> np.ndarray:
        return upscale_targets(self.digits, out_shape)

    @classmethod
    def concat(cls, parts) -> "DatasetContainer":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("speckle_u8", "speckle_raw", "digits", "labels", "config_ids", "thetas")))

    def equals(self, other: "DatasetContainer") -> bool:
        fields = ("speckle_u8", "speckle_raw", "digits", "labels", "config_ids", "thetas")
        return all(
            getattr(self, f).dtype == getattr(other, f).dtype
            and getattr(self, f).shape == getattr(other, f).shape
            and getattr(self, f).tobytes() == getattr(other, f).tobytes()
            for f in fields
        )


def _record_dtype(speckle_shape, digit_shape, k) -> np.dtype:
    h, w = speckle_shape
    dh, dw = digit_shape
    return np.dtype(
        [
            ("u8", np.uint8, (h * w,)),
            ("raw", "<f4", (h * w,)),
            ("bits", np.uint8, (dh * ((dw + 7) // 8),)),
            ("label", np.uint8),
            ("config", "<u4"),
            ("theta", "<f4", (k,)),
        ]
    )


def encode_dataset(container: DatasetContainer) -> bytes:
    n = len(container)
    h, w = container.speckle_u8.shape[1:]
    dh, dw = container.digits.shape[1:]
    k = container.n_actuators
    rec = np.zeros(n, dtype=_record_dtype((h, w), (dh, dw), k))
    rec["u8"] = container.speckle_u8.reshape(n, h * w)
    rec["raw"] = container.speckle_raw.reshape(n, h * w)
    rec["bits"] = np.packbits(container.digits.astype(np.uint8), axis=2).reshape(n, dh * ((dw + 7) // 8))
    rec["label"] = container.labels
    rec["config"] = container.config_ids
    rec["theta"] = container.thetas
    payload = rec.tobytes()
    header = _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, n, w, h, dw, dh, k)
    return header + payload + _CRC.pack(zlib.crc32(payload))


def decode_dataset(data: bytes) -> DatasetContainer:
    if len(data) < _HEADER.size:
        raise TruncatedStream("container shorter than its header")
    magic, version, n, w, h, dw, dh, k = _HEADER.unpack_from(data)
    if magic != CONTAINER_MAGIC:
        raise BadMagic(f"bad container magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise VersionMismatch(f"container version {version}, expected {CONTAINER_VERSION}")
    dtype = _record_dtype((h, w), (dh, dw), k)
    size = n * dtype.itemsize
    end = _HEADER.size + size
    if len(data) < end + _CRC.size:
        raise TruncatedStream(f"container holds {len(data)} bytes, header implies {end + _CRC.size}")
    payload = data[_HEADER.size:end]
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("container payload CRC-32 mismatch")
    rec = np.frombuffer(payload, dtype=dtype, count=n)
    digits = np.unpackbits(rec["bits"].reshape(n, dh, (dw + 7) // 8), axis=2, count=dw)
    return DatasetContainer(
        speckle_u8=rec["u8"].reshape(n, h, w).copy(),
        speckle_raw=rec["raw"].reshape(n, h, w).astype(np.float32),
        digits=digits.astype(np.uint8),
        labels=rec["label"].copy(),
        config_ids=rec["config"].astype(np.uint32),
        thetas=rec["theta"].reshape(n, k).astype(np.float32),
    )


def write_dataset(path, container: DatasetContainer) -> None:
    Path(path).write_bytes(encode_dataset(container))


def read_dataset(path) -> DatasetContainer:
    return decode_dataset(Path(path).read_bytes())


# ------------------------------------------------------------------- manifest


def write_manifest(path, sections: dict[str, dict]) -> None:
    """Write ``[section]`` blocks of ``key = value`` lines."""
    lines = []
    for name, entries in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{key} = {_manifest_value(value)}" for key, value in entries.items()]
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def _manifest_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_manifest_value(v) for v in value)
    return str(value)


def read_manifest(path) -> dict[str, dict[str, str]]:
    """Sections of a manifest; lines before any header land in section ""."""
    out: dict[str, dict[str, str]] = {}
    section = out.setdefault("", {})
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = out.setdefault(line[1:-1].strip(), {})
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed manifest line: {line!r}")
        section[key.strip()] = value.strip()
    if not out[""]:
        del out[""]
    return out
