"""Binary and image file formats.

Activation maps (``MIAM``) and score matrices (``MISM``) share one layout:
4 magic bytes, a u16 version, the extents as u32, a u8 precision tag (bytes
per value, 4 or 8), then row-major little-endian values.

Checkpoints (``MICK``) hold named, length-prefixed sections of named arrays
plus one JSON metadata section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
_PRECISION_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def _tag_for(dtype) -> int:
    size = np.dtype(dtype).itemsize
    if size not in _PRECISION_TAGS:
        raise FormatError(f"unsupported value type {dtype}; use float32 or float64")
    return size


def _write_grid(path, magic: bytes, dims: tuple[int, ...], values: np.ndarray) -> None:
    tag = _tag_for(values.dtype)
    header = magic + struct.pack("<H", VERSION) + struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<B", tag)
    payload = np.ascontiguousarray(values, dtype=_PRECISION_TAGS[tag]).tobytes()
    Path(path).write_bytes(header + payload)


def _read_grid(path, magic: bytes, ndims: int, shape_of=None) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    head = 4 + 2 + 4 * ndims + 1
    if len(raw) < 4 or raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} of {head} bytes)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this reader handles {VERSION}")
    dims = struct.unpack_from(f"<{ndims}I", raw, 6)
    (tag,) = struct.unpack_from("<B", raw, 6 + 4 * ndims)
    if tag not in _PRECISION_TAGS:
        raise FormatError(f"{path}: unknown precision tag {tag}")
    count = int(np.prod(shape_of(dims) if shape_of else dims))
    need = head + count * tag
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: payload truncated ({len(raw) - head} of {count * tag} bytes)")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after payload")
    values = np.frombuffer(raw, dtype=_PRECISION_TAGS[tag], count=count, offset=head)
    return dims, values.astype(values.dtype.newbyteorder("="))


ACTIVATION_HEADER_BYTES = 4 + 2 + 4 + 4 + 1


def save_activation_map(values: np.ndarray, path) -> None:
    values = np.asarray(values)
    if values.ndim != 3 or values.shape[0] != values.shape[1]:
        raise FormatError(f"activation map must be K x K x D, got {values.shape}")
    k, _, d = values.shape
    _write_grid(path, b"MIAM", (k, d), values)


def load_activation_map(path) -> np.ndarray:
    (k, d), values = _read_grid(path, b"MIAM", 2, lambda dims: (dims[0], dims[0], dims[1]))
    return values.reshape(k, k, d)


def save_score_matrix(scores: np.ndarray, path) -> None:
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise FormatError(f"score matrix must be 2-D, got {scores.shape}")
    _write_grid(path, b"MISM", scores.shape, scores)


def load_score_matrix(path) -> np.ndarray:
    (r, c), values = _read_grid(path, b"MISM", 2)
    return values.reshape(r, c)


# checkpoints ---------------------------------------------------------------

_DTYPE_CODES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = {4: "f4", 8: "f8"}[arr.dtype.itemsize] if arr.dtype.kind == "f" else "i8"
        data = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        out.append(_pack_str(name))
        out.append(code.encode("ascii"))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<Q", len(data)) + data)
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.pos}")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _unpack_arrays(payload: bytes, path) -> dict[str, np.ndarray]:
    r = _Reader(payload, path)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        code = r.take(2).decode("ascii")
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown array type {code!r} for {name}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPE_CODES[code]).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays


def save_checkpoint(path, sections: dict[str, dict[str, np.ndarray]], meta: dict) -> None:
    """Write ``meta`` (JSON) followed by one length-prefixed section per group of arrays."""
    blobs = [(b"meta", "meta", json.dumps(meta, sort_keys=True).encode("utf-8"))]
    for name, arrays in sections.items():
        blobs.append((b"arrs", name, _pack_arrays(arrays)))
    out = [b"MICK", struct.pack("<H", VERSION), struct.pack("<I", len(blobs))]
    for kind, name, payload in blobs:
        out.append(kind + _pack_str(name) + struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != b"MICK":
        raise BadMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    r = _Reader(raw, path)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader handles {VERSION}")
    (count,) = r.unpack("<I")
    meta, sections = {}, {}
    for _ in range(count):
        kind = r.take(4)
        name = r.string()
        (n,) = r.unpack("<Q")
        payload = r.take(n)
        if kind == b"meta":
            meta = json.loads(payload.decode("utf-8"))
        elif kind == b"arrs":
            sections[name] = _unpack_arrays(payload, path)
        else:
            raise FormatError(f"{path}: unknown section kind {kind!r}")
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return sections, meta


# images --------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write an 8-bit ``H x W x 3`` (P6) or ``H x W`` / ``H x W x 1`` (P5) image."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise FormatError(f"PPM writer expects uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"PPM writer handles gray or RGB images, got shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into ``H x W x C`` uint8."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: not a binary PGM/PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: header truncated")
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(raw) - pos < need:
        raise TruncatedFileError(f"{path}: pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c).copy()
