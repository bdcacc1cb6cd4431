"""Self-describing binary containers and PNG helpers.

All multi-byte values are little-endian.

Weight file (``EDGW``)::

    magic "EDGW" | version u32 | tensor count u32
    per tensor: name length u16 | name UTF-8 | rank u8 | dims u32[rank] | data f32[]

Raster file (``BTGT`` boundary targets, ``HGHT`` heights, ``SCOR`` scores)::

    magic (4 bytes) | version u32 | width u32 | height u32     -- 16-byte header
    plane count u32 | planes f32[count, height, width]
    trailer: kind-specific metadata (see the writers below)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

WEIGHT_MAGIC = b"EDGW"
WEIGHT_VERSION = 1
RASTER_VERSION = 1

# legend order: impervious, building, low vegetation, tree, car, clutter
PALETTE = [
    (255, 255, 255),
    (0, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 0),
]
IGNORE_COLOR = (0, 0, 0)


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# --------------------------------------------------------------------------
# weights


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {WEIGHT_MAGIC!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    version, count = struct.unpack_from("<II", buf, 4)
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight format version {version}", 4)
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise FormatError(f"tensor {name!r} data truncated", off)
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated tensor record: {exc}", off) from None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return out


# --------------------------------------------------------------------------
# rasters


def _write_planes(path, magic: bytes, planes: np.ndarray, trailer: bytes = b"") -> None:
    planes = np.ascontiguousarray(planes, dtype="<f4")
    if planes.ndim == 2:
        planes = planes[None]
    count, height, width = planes.shape
    header = magic + struct.pack("<III", RASTER_VERSION, width, height)
    Path(path).write_bytes(header + struct.pack("<I", count) + planes.tobytes() + trailer)


def _read_planes(path, magic: bytes) -> tuple[np.ndarray, bytes]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}", 0)
    if len(buf) < 20:
        raise FormatError("truncated header", len(buf))
    version, width, height, count = struct.unpack_from("<IIII", buf, 4)
    if version != RASTER_VERSION:
        raise FormatError(f"unsupported raster version {version}", 4)
    nbytes = 4 * count * width * height
    if 20 + nbytes > len(buf):
        raise FormatError("plane data truncated", len(buf))
    planes = np.frombuffer(buf, dtype="<f4", count=count * width * height, offset=20)
    return planes.reshape(count, height, width).astype(np.float32), buf[20 + nbytes :]


_BTGT_TRAILER = struct.Struct("<dIfB")


def write_boundary_target(path, values: np.ndarray, beta: float, radius: int, truncation: float, boundary_free: bool) -> None:
    """Trailer: beta f64 | radius u32 | truncation f32 | boundary-free flag u8."""
    trailer = _BTGT_TRAILER.pack(beta, radius, truncation, int(boundary_free))
    _write_planes(path, b"BTGT", values, trailer)


def read_boundary_target(path) -> dict:
    planes, trailer = _read_planes(path, b"BTGT")
    if len(trailer) != _BTGT_TRAILER.size:
        raise FormatError("bad boundary-target trailer", 20 + planes.nbytes)
    beta, radius, truncation, flag = _BTGT_TRAILER.unpack(trailer)
    return {"values": planes[0], "beta": beta, "radius": radius, "truncation": truncation, "boundary_free": bool(flag)}


def write_heights(path, dsm: np.ndarray, ndsm: np.ndarray) -> None:
    _write_planes(path, b"HGHT", np.stack([dsm, ndsm]))


def read_heights(path) -> tuple[np.ndarray, np.ndarray]:
    planes, _ = _read_planes(path, b"HGHT")
    if planes.shape[0] != 2:
        raise FormatError(f"expected 2 height planes, found {planes.shape[0]}", 16)
    return planes[0], planes[1]


def write_scores(path, scores: np.ndarray, coverage: np.ndarray) -> None:
    """Per-class score planes followed by a u32 coverage plane."""
    cov = np.ascontiguousarray(coverage, dtype="<u4")
    _write_planes(path, b"SCOR", scores, cov.tobytes())


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    planes, trailer = _read_planes(path, b"SCOR")
    h, w = planes.shape[1:]
    if len(trailer) != 4 * h * w:
        raise FormatError("coverage plane missing or truncated", 20 + planes.nbytes)
    return planes, np.frombuffer(trailer, dtype="<u4").reshape(h, w).astype(np.int64)


# --------------------------------------------------------------------------
# PNG


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "P":
            return np.asarray(im, dtype=np.uint8).copy()
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path, array: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, optimize=False)


def write_label_png(path, labels: np.ndarray, ignore_label: int = 255) -> None:
    """8-bit paletted PNG; index ``ignore_label`` is drawn black."""
    im = Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint8), mode="P")
    pal = [IGNORE_COLOR] * 256
    pal[: len(PALETTE)] = PALETTE
    pal[ignore_label] = IGNORE_COLOR
    im.putpalette([v for rgb in pal for v in rgb])
    im.save(path, optimize=False)


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise FormatError(f"label PNG must be paletted or grayscale, got mode {im.mode}", 0)
        return np.asarray(im, dtype=np.uint8).astype(np.int64)
