"""File formats: raw float32 images, PGM previews, TIFF, CSV, checkpoints.

Raw image format ("PSCN-IMG"): magic, u32 version, u32 height, u32 width,
then height*width little-endian float32 samples.

Checkpoint format ("PSCN-CKP"): magic, u32 version, u32 entry count, then
per entry a u32 name length, the utf-8 name, u32 rank, u32 extents, and the
float32 payload.  Everything little-endian.
"""

from __future__ import annotations

import csv
import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

IMG_MAGIC = b"PSCN-IMG"
CKP_MAGIC = b"PSCN-CKP"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# raw float32 images


def write_f32(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DataError(f"raw image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(IMG_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, h, w))
        f.write(image.astype("<f4").tobytes())


def read_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != IMG_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version, h, w = struct.unpack("<III", f.read(12))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        payload = f.read(4 * h * w)
        if len(payload) != 4 * h * w:
            raise DataError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


# ---------------------------------------------------------------------------
# PGM previews (binary P5; 16-bit samples are big-endian per the format)


def write_pgm(path, image: np.ndarray, maxval: int = 255):
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"PGM image must be 2-D, got shape {image.shape}")
    if maxval == 255:
        data = image.astype(np.uint8)
    elif maxval == 65535:
        data = image.astype(">u2")
    else:
        raise DataError(f"maxval must be 255 or 65535, got {maxval}")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise DataError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(parts[3], dtype=dtype, count=h * w).reshape(h, w)
    return arr.astype(np.uint16 if maxval >= 256 else np.uint8)


def write_mask_pgm(path, weights: np.ndarray):
    """Binary-mask preview: on-path pixels map to 255."""
    write_pgm(path, np.where(np.asarray(weights) > 0, 255, 0), maxval=255)


def write_map_pgm16(path, values: np.ndarray):
    """16-bit preview of a non-negative map, scaled so the max hits 65535."""
    v = np.asarray(values, dtype=np.float64)
    peak = float(v.max())
    scaled = np.zeros_like(v) if peak <= 0 else v / peak * 65535.0
    write_pgm(path, np.round(scaled), maxval=65535)


# ---------------------------------------------------------------------------
# TIFF (32-bit float; other integer depths are converted with a note)


def write_tiff(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.float32)
    Image.fromarray(image, mode="F").save(path, format="TIFF")


def read_tiff(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "F":
            log.info("%s: converting %s TIFF to float32", path, img.mode)
            img = img.convert("F")
        return np.asarray(img, dtype=np.float32).copy()


def read_image(path) -> np.ndarray:
    """Read either a raw .f32 image or a TIFF, by extension."""
    p = Path(path)
    if p.suffix == ".f32":
        return read_f32(p)
    if p.suffix in (".tif", ".tiff"):
        return read_tiff(p)
    raise DataError(f"{path}: unsupported image extension {p.suffix!r}")


# ---------------------------------------------------------------------------
# CSV (floats are written with repr so parse(emit(x)) == x)


def write_csv(path, header: list[str], rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                             else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader]
    return header, rows


def write_traversal_csv(path, traversal: np.ndarray):
    rows = [(i, float(r), float(c)) for i, (r, c) in enumerate(np.asarray(traversal))]
    write_csv(path, ["index", "row", "col"], rows)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(CKP_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value, dtype="<f4")
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(8) != CKP_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode()
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise DataError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors
