"""Synthetic attribute images, the TensorArchive container, and IDX ingestion.

Synthetic images show one colored shape on a dark background. Each image
carries three attributes drawn independently:

* ``shape``: ``square`` or ``disc``
* ``hue``: ``warm`` (red to yellow) or ``cool`` (cyan to blue)
* ``quadrant``: ``0`` top-left, ``1`` top-right, ``2`` bottom-left, ``3`` bottom-right

:func:`oracle` recovers each attribute from pixels alone, so it can judge
generated images too.
"""

from __future__ import annotations

import colorsys
import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, CorruptHeader, InvalidParameter, TruncatedPayload

ARCHIVE_MAGIC = b"D2CD"
ARCHIVE_VERSION = 1
BACKGROUND = 0.08
ATTRIBUTES = ("shape", "hue", "quadrant")
ATTRIBUTE_VALUES = {"shape": ("square", "disc"), "hue": ("warm", "cool"), "quadrant": ("0", "1", "2", "3")}


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 16
    channels: int = 3
    disc_rate: float = 0.5
    warm_rate: float = 0.5
    quadrant_probs: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    count: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.size < 8 or self.channels not in (1, 3):
            raise InvalidParameter("need size >= 8 and 1 or 3 channels")
        for r in (self.disc_rate, self.warm_rate):
            if not 0 <= r <= 1:
                raise InvalidParameter("base rates must lie in [0, 1]")
        q = np.asarray(self.quadrant_probs, dtype=float)
        if q.shape != (4,) or np.any(q < 0) or abs(q.sum() - 1) > 1e-9:
            raise InvalidParameter("quadrant_probs must be 4 probabilities summing to 1")
        if self.count < 1:
            raise InvalidParameter("count must be >= 1")


@dataclass
class TensorArchive:
    images: np.ndarray  # (count, H, W, C) float32 in [0, 1]
    attributes: list[dict[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def labels(self, attribute: str, value: str) -> np.ndarray:
        """Binary indicator of ``attribute == value`` per image."""
        return np.array([a[attribute] == value for a in self.attributes], dtype=int)

    def subset(self, idx) -> "TensorArchive":
        idx = np.asarray(idx)
        return TensorArchive(self.images[idx], [self.attributes[i] for i in idx])


def _render(size: int, channels: int, shape: str, hue: str, quadrant: int, rng: np.random.Generator) -> np.ndarray:
    half = size // 2
    radius = rng.uniform(0.42, 0.5) * half
    cy = (quadrant // 2) * half + half / 2 + rng.uniform(-0.6, 0.6)
    cx = (quadrant % 2) * half + half / 2 + rng.uniform(-0.6, 0.6)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "disc":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    else:
        side = radius * 0.9
        mask = (np.abs(yy - cy) <= side) & (np.abs(xx - cx) <= side)
    h = rng.uniform(0.0, 0.12) if hue == "warm" else rng.uniform(0.5, 0.66)
    rgb = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0)))
    img = np.full((size, size, 3), BACKGROUND)
    img[mask] = rgb
    if channels == 1:
        img = img.mean(axis=-1, keepdims=True)
    return img


def generate_synthetic(spec: SyntheticSpec) -> TensorArchive:
    """Render ``spec.count`` images; per-image streams are derived from ``spec.seed``."""
    master = np.random.default_rng(spec.seed)
    shapes = np.where(master.uniform(size=spec.count) < spec.disc_rate, "disc", "square")
    hues = np.where(master.uniform(size=spec.count) < spec.warm_rate, "warm", "cool")
    quads = master.choice(4, size=spec.count, p=np.asarray(spec.quadrant_probs))
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.count)
    images = np.empty((spec.count, spec.size, spec.size, spec.channels), dtype=np.float32)
    attrs = []
    for i in range(spec.count):
        images[i] = _render(spec.size, spec.channels, shapes[i], hues[i], int(quads[i]), np.random.default_rng(seeds[i]))
        attrs.append({"shape": str(shapes[i]), "hue": str(hues[i]), "quadrant": str(int(quads[i]))})
    return TensorArchive(images, attrs)


def _foreground_weight(img: np.ndarray) -> np.ndarray:
    dev = np.abs(np.asarray(img, dtype=np.float64) - BACKGROUND).max(axis=-1)
    return np.clip(dev - 0.1, 0.0, None)


def oracle(img: np.ndarray) -> dict[str, str]:
    """Attributes read back from pixels (the ground-truth property function)."""
    img = np.asarray(img, dtype=np.float64)
    size = img.shape[0]
    wgt = _foreground_weight(img)
    total = wgt.sum()
    if total <= 0:
        wgt = np.ones_like(wgt)
        total = wgt.sum()
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy = (wgt * yy).sum() / total
    cx = (wgt * xx).sum() / total
    quadrant = 2 * int(cy >= size / 2) + int(cx >= size / 2)

    if img.shape[-1] == 3:
        r = (wgt * img[..., 0]).sum() / total
        b = (wgt * img[..., 2]).sum() / total
        hue = "warm" if r >= b else "cool"
    else:
        hue = "cool"

    # a square fills the corners of its bounding box, a disc leaves them empty
    mask = wgt > 0.5 * wgt.max() if wgt.max() > 0 else wgt > 0
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    if rows.size and cols.size:
        corners = mask[np.ix_([rows[0], rows[-1]], [cols[0], cols[-1]])].sum()
    else:
        corners = 4
    shape = "square" if corners >= 3 else "disc"
    return {"shape": shape, "hue": hue, "quadrant": str(quadrant)}


def oracle_labels(images: np.ndarray, attribute: str, value: str) -> np.ndarray:
    return np.array([oracle(img)[attribute] == value for img in images], dtype=int)


# -- TensorArchive container ------------------------------------------------------


def _attributes_csv(attrs: list[dict[str, str]]) -> bytes:
    if not attrs:
        return b""
    keys = list(attrs[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", *keys])
    for i, a in enumerate(attrs):
        w.writerow([i, *(a[k] for k in keys)])
    return buf.getvalue().encode("utf-8")


def archive_bytes(archive: TensorArchive) -> bytes:
    """Serialize: magic, u32 version, u32 count, u8 rank, u32 dims, f32 payload, CSV block, CRC32."""
    images = np.ascontiguousarray(archive.images, dtype="<f4")
    dims = images.shape[1:]
    body = bytearray(ARCHIVE_MAGIC)
    body += struct.pack("<IIB", ARCHIVE_VERSION, images.shape[0], len(dims))
    body += struct.pack(f"<{len(dims)}I", *dims)
    body += images.tobytes()
    table = _attributes_csv(archive.attributes)
    body += struct.pack("<I", len(table)) + table
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return bytes(body)


def save_archive(archive: TensorArchive, path) -> None:
    Path(path).write_bytes(archive_bytes(archive))


def parse_archive(data: bytes) -> TensorArchive:
    if len(data) < 17 or data[:4] != ARCHIVE_MAGIC:
        raise CorruptHeader("not a TensorArchive (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptFile("TensorArchive CRC mismatch")
    version, count, rank = struct.unpack_from("<IIB", data, 4)
    if version != ARCHIVE_VERSION:
        raise CorruptHeader(f"unsupported TensorArchive version {version}")
    off = 13
    dims = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    n_values = count * int(np.prod(dims))
    end = off + 4 * n_values
    if end + 4 > len(data) - 4:
        raise TruncatedPayload("payload shorter than the header declares")
    images = np.frombuffer(data, dtype="<f4", count=n_values, offset=off).reshape(count, *dims).astype(np.float32)
    (tlen,) = struct.unpack_from("<I", data, end)
    table = data[end + 4 : end + 4 + tlen].decode("utf-8")
    if end + 4 + tlen != len(data) - 4:
        raise CorruptFile("attribute block length disagrees with file size")
    attrs: list[dict[str, str]] = []
    if table:
        rows = list(csv.DictReader(io.StringIO(table)))
        for r in rows:
            r.pop("index")
            attrs.append(dict(r))
    return TensorArchive(images, attrs)


def load_archive(path) -> TensorArchive:
    return parse_archive(Path(path).read_bytes())


# -- IDX ----------------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def load_idx(path) -> TensorArchive:
    """Read an IDX image file (``[0, 0, dtype, ndim]`` magic, big-endian dims).

    Integer data is scaled by the type's maximum; a rank-3 ``(count, rows,
    cols)`` file gains a trailing channel axis.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise CorruptHeader("bad IDX magic")
    dtype = np.dtype(_IDX_TYPES[data[2]])
    ndim = data[3]
    if ndim < 1 or len(data) < 4 + 4 * ndim:
        raise CorruptHeader("IDX header truncated")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    n_values = int(np.prod(dims))
    off = 4 + 4 * ndim
    if len(data) - off < n_values * dtype.itemsize:
        raise TruncatedPayload(f"IDX declares {n_values} values, payload holds {(len(data) - off) // dtype.itemsize}")
    raw = np.frombuffer(data, dtype=dtype, count=n_values, offset=off).reshape(dims)
    if dtype.kind in "iu":
        images = raw.astype(np.float64) / np.iinfo(dtype).max
    else:
        images = raw.astype(np.float64)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    if images.ndim == 3:
        images = images[..., None]
    return TensorArchive(images, [])


def write_idx(images: np.ndarray, path) -> None:
    """Write a uint8 IDX file (test fixtures and export)."""
    arr = np.asarray(images, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


# -- image grids --------------------------------------------------------------------------


def image_grid(images: np.ndarray, cols: int = 8, pad: int = 1, scale: int = 2) -> np.ndarray:
    """Tile ``(n, H, W, C)`` images into one uint8 RGB canvas."""
    images = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    if images.ndim != 4 or len(images) == 0:
        raise InvalidParameter("need a nonempty (n, H, W, C) batch")
    if images.shape[-1] == 1:
        images = np.repeat(images, 3, axis=-1)
    images = images.repeat(scale, axis=1).repeat(scale, axis=2)
    n, h, w, _ = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    canvas = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        canvas[pad + r * (h + pad) : pad + r * (h + pad) + h, pad + c * (w + pad) : pad + c * (w + pad) + w] = img
    return np.round(canvas * 255).astype(np.uint8)


def write_ppm(path, images: np.ndarray, cols: int = 8) -> None:
    """Binary (P6) PPM of an image grid."""
    grid = image_grid(images, cols)
    header = f"P6\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + grid.tobytes())
