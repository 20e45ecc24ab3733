"""Image and dataset value types plus the on-disk formats.

Pixels live in [0, 1] as float64; 8-bit files map in by v/255 and out by
clamp(round(v*255), 0, 255). Two persistent forms exist: P6 PPM files with
a CSV manifest, and a packed single-file format (.mfd) for large degraded
sets. Both load to identical in-memory datasets.
"""

from __future__ import annotations

import csv
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MFD_MAGIC = b"MFD1"
_MFD_HEADER = struct.Struct("<IHHBB")  # count, width, height, channels, reserved


class FormatError(ValueError):
    """Malformed image or dataset file."""


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map unit-interval floats to 8-bit: clamp(round(v*255), 0, 255)."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


@dataclass(frozen=True)
class Image:
    """One RGB image as a flat row-major, channel-interleaved float vector."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray  # shape (width*height*channels,), float64 in [0, 1]

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise ValueError("image dimensions must be positive")
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 1 or px.size != self.width * self.height * self.channels:
            raise ValueError(
                f"pixel count {px.size} does not match "
                f"{self.width}x{self.height}x{self.channels}"
            )
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    def as_array(self) -> np.ndarray:
        """(height, width, channels) view of the pixel data."""
        return self.pixels.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, pixels=arr.reshape(-1))


class LabeledDataset:
    """Homogeneous image set with integer class labels in [0, k-1].

    Stored as one stacked (n, h, w, c) array; heterogeneous image sizes are
    rejected at construction (no silent resizing).
    """

    def __init__(self, pixels: np.ndarray, labels, k: int | None = None,
                 class_names: list[str] | None = None):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 4:
            raise ValueError("pixels must have shape (n, height, width, channels)")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != pixels.shape[0]:
            raise ValueError("labels must be one integer per image")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if k is None:
            k = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k - 1}]")
        if class_names is not None and len(class_names) != k:
            raise ValueError("class_names length must equal k")
        self.pixels = pixels
        self.labels = labels
        self.k = int(k)
        self.class_names = list(class_names) if class_names is not None else None

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])  # (h, w, c)

    def image(self, i: int) -> Image:
        return Image.from_array(self.pixels[i])

    @property
    def images(self) -> list[Image]:
        return [self.image(i) for i in range(len(self))]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.pixels[idx], self.labels[idx], k=self.k,
                              class_names=self.class_names)

    @classmethod
    def from_images(cls, images: list[Image], labels, k: int | None = None,
                    class_names: list[str] | None = None) -> "LabeledDataset":
        if not images:
            return cls(np.zeros((0, 0, 0, 0)), [], k=k or 0, class_names=class_names)
        shape = (images[0].height, images[0].width, images[0].channels)
        for im in images:
            if (im.height, im.width, im.channels) != shape:
                raise ValueError(
                    f"heterogeneous image dimensions: expected {shape}, "
                    f"got {(im.height, im.width, im.channels)}"
                )
        stacked = np.stack([im.as_array() for im in images])
        return cls(stacked, labels, k=k, class_names=class_names)


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)

def read_ppm(data: bytes) -> Image:
    if data[:2] != b"P6":
        raise FormatError("not a P6 PPM (bad magic at byte offset 0)")
    pos = 2

    def next_token() -> tuple[int, int]:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":  # comment runs to end of line
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"malformed PPM header at byte offset {start}")
        return int(data[start:pos]), start

    width, _ = next_token()
    height, _ = next_token()
    maxval, maxval_at = next_token()
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte offset {maxval_at} (expected 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after maxval at byte offset {pos}")
    pos += 1  # exactly one whitespace byte separates header from payload
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated pixel payload at byte offset {pos + len(payload)}: "
            f"expected {need} bytes, got {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8)
    return Image(width=width, height=height, channels=3, pixels=dequantize(raw))


def write_ppm(image: Image) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + quantize(image.pixels).tobytes()


def read_ppm_file(path) -> Image:
    with open(path, "rb") as f:
        return read_ppm(f.read())


def write_ppm_file(image: Image, path) -> None:
    with open(path, "wb") as f:
        f.write(write_ppm(image))


# ---------------------------------------------------------------------------
# Packed dataset (.mfd): little-endian, magic "MFD1", u32 count, u16 width,
# u16 height, u8 channels, u8 reserved=0, u32 CRC32 over all records; each
# record is u16 label + 8-bit pixels (row-major, channel-interleaved).

def _record_bytes(label: int, raw: np.ndarray) -> bytes:
    return struct.pack("<H", label) + raw.tobytes()


def dataset_crc32(dataset: LabeledDataset) -> int:
    """CRC32 over the packed record stream; doubles as a content checksum."""
    crc = 0
    q = quantize(dataset.pixels.reshape(len(dataset), -1))
    for i in range(len(dataset)):
        crc = zlib.crc32(_record_bytes(int(dataset.labels[i]), q[i]), crc)
    return crc


def write_packed(dataset: LabeledDataset) -> bytes:
    n = len(dataset)
    h, w, c = dataset.image_shape if n else (0, 0, 0)
    if n and dataset.labels.max() > 0xFFFF:
        raise ValueError("labels exceed u16 range")
    q = quantize(dataset.pixels.reshape(n, -1))
    records = bytearray()
    for i in range(n):
        records += _record_bytes(int(dataset.labels[i]), q[i])
    crc = zlib.crc32(bytes(records))
    out = bytearray(MFD_MAGIC)
    out += _MFD_HEADER.pack(n, w, h, c, 0)
    out += struct.pack("<I", crc)
    out += records
    return bytes(out)


def read_packed(data: bytes, k: int | None = None,
                class_names: list[str] | None = None) -> LabeledDataset:
    if data[:4] != MFD_MAGIC:
        raise FormatError("bad magic: not a packed dataset file")
    if len(data) < 4 + _MFD_HEADER.size + 4:
        raise FormatError("truncated header")
    n, w, h, c, reserved = _MFD_HEADER.unpack_from(data, 4)
    if reserved != 0:
        raise FormatError(f"reserved header byte is {reserved}, expected 0")
    (crc_expect,) = struct.unpack_from("<I", data, 4 + _MFD_HEADER.size)
    body = data[4 + _MFD_HEADER.size + 4:]
    rec_len = 2 + w * h * c
    if len(body) != n * rec_len:
        raise FormatError(
            f"size mismatch: {n} records of {rec_len} bytes need {n * rec_len}, got {len(body)}"
        )
    if zlib.crc32(body) != crc_expect:
        raise FormatError("checksum mismatch: record payload is corrupt")
    labels = np.empty(n, dtype=np.int64)
    pixels = np.empty((n, h, w, c), dtype=np.float64)
    for i in range(n):
        off = i * rec_len
        (labels[i],) = struct.unpack_from("<H", body, off)
        raw = np.frombuffer(body, dtype=np.uint8, count=w * h * c, offset=off + 2)
        pixels[i] = dequantize(raw).reshape(h, w, c)
    if k is not None and n and labels.max() >= k:
        raise FormatError(f"label {int(labels.max())} out of range for k={k}")
    return LabeledDataset(pixels, labels, k=k, class_names=class_names)


def write_packed_file(dataset: LabeledDataset, path) -> None:
    with open(path, "wb") as f:
        f.write(write_packed(dataset))


def read_packed_file(path, k: int | None = None,
                     class_names: list[str] | None = None) -> LabeledDataset:
    with open(path, "rb") as f:
        return read_packed(f.read(), k=k, class_names=class_names)


# ---------------------------------------------------------------------------
# Manifest (CSV `path,label`) + PPM tree

@dataclass
class DatasetManifest:
    base_dir: str
    entries: list[tuple[str, int]] = field(default_factory=list)


def read_manifest(path) -> DatasetManifest:
    base = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest(base_dir=base)
    seen = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise FormatError(f"manifest header must be 'path,label', got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"manifest row {row_no} must have 2 fields, got {len(row)}")
            rel, label_text = row
            if rel in seen:
                raise FormatError(f"duplicate path in manifest row {row_no}: {rel}")
            seen.add(rel)
            try:
                label = int(label_text)
            except ValueError:
                raise FormatError(f"bad label {label_text!r} in manifest row {row_no}") from None
            manifest.entries.append((rel, label))
    return manifest


def load_manifest(path, k: int | None = None,
                  class_names: list[str] | None = None) -> LabeledDataset:
    """Load a manifest CSV plus its referenced PPM files, in manifest order."""
    manifest = read_manifest(path)
    images: list[Image] = []
    labels: list[int] = []
    for rel, label in manifest.entries:
        full = os.path.join(manifest.base_dir, rel)
        if not os.path.exists(full):
            raise FormatError(f"manifest references missing file: {rel}")
        images.append(read_ppm_file(full))
        labels.append(label)
    if k is not None:
        bad = [l for l in labels if not 0 <= l < k]
        if bad:
            raise FormatError(f"label {bad[0]} out of range for k={k}")
    return LabeledDataset.from_images(images, labels, k=k, class_names=class_names)


def save_manifest_tree(dataset: LabeledDataset, dirpath) -> str:
    """Write dataset as PPM files plus manifest.csv; returns the manifest path."""
    os.makedirs(dirpath, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        rel = f"img_{i:05d}_c{int(dataset.labels[i])}.ppm"
        write_ppm_file(dataset.image(i), os.path.join(dirpath, rel))
        rows.append((rel, int(dataset.labels[i])))
    manifest_path = os.path.join(dirpath, "manifest.csv")
    with open(manifest_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    return manifest_path
