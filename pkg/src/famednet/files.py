"""Image codecs, the FMDN weight-file format and atomic file writes.

Weight file layout (all integers little-endian)::

    b"FMDN" | u32 version | u32 len | NetConfig JSON
    u32 count | count x (u16 len | name | u8 ndim | ndim x u32 | u64 offset | u8 learnable)
    u64 data length | float32 data (little-endian, directory order)

Offsets are relative to the start of the data section.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .network import FamedNet, NetConfig, build_network

MAGIC = b"FMDN"
VERSION = 1


class ImageFormatError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


# ---------------------------------------------------------------- atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- images

_FORMATS = {".png": "PNG", ".ppm": "PPM"}


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM as a (3, h, w) float32 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported image format {im.format!r} (PNG or PPM only)")
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise ImageFormatError(f"{path}: unsupported pixel mode {im.mode!r}; need 8-bit RGB")
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except ImageFormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(f"{path}: cannot decode image ({e})") from e
    return (arr.transpose(2, 0, 1).astype(np.float32)) / np.float32(255)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, h, w) [0, 1] -> (h, w, 3) uint8, rounding half away from zero."""
    v = np.clip(np.asarray(img, np.float64), 0, 1) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def encode_image(img: np.ndarray, fmt: str = "PNG") -> bytes:
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format=fmt)
    return buf.getvalue()


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported extension (use .png or .ppm)")
    atomic_write_bytes(path, encode_image(img, fmt))


def list_images(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in _FORMATS and p.is_file())


# ---------------------------------------------------------------- weights


def encode_weights(net: FamedNet) -> bytes:
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    header = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(net.weights))]
    blobs = []
    offset = 0
    for name, p in net.weights.items():
        raw = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb)
        header.append(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        header.append(struct.pack("<QB", offset, int(p.learnable)))
        blobs.append(raw)
        offset += len(raw)
    header.append(struct.pack("<Q", offset))
    return b"".join(header + blobs)


def save_weights(net: FamedNet, path) -> None:
    atomic_write_bytes(path, encode_weights(net))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise WeightFileError(f"{self.path}: truncated header")
        v = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return v

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise WeightFileError(f"{self.path}: truncated header")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b


def read_weight_file(path) -> tuple[NetConfig, list[tuple[str, np.ndarray, bool]]]:
    """Parse and validate a weight file; returns the config and (name, array, learnable) entries."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.raw(4) != MAGIC:
        raise WeightFileError(f"{path}: not an FMDN weight file (bad magic)")
    version, cfg_len = r.take("<II")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version} (expected {VERSION})")
    try:
        config = NetConfig.from_dict(json.loads(r.raw(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise WeightFileError(f"{path}: invalid network config ({e})") from e
    (count,) = r.take("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode("utf-8")
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        offset, learnable = r.take("<QB")
        entries.append((name, tuple(shape), offset, bool(learnable)))
    (data_len,) = r.take("<Q")
    start = r.pos
    if start + data_len != len(data):
        raise WeightFileError(f"{path}: data section length {data_len} does not match file size")
    out = []
    expected = 0
    for name, shape, offset, learnable in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset != expected or offset + nbytes > data_len:
            raise WeightFileError(f"{path}: tensor {name!r} has inconsistent offset {offset}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=start + offset).reshape(shape)
        out.append((name, arr.astype(np.float32), learnable))
        expected = offset + nbytes
    if expected != data_len:
        raise WeightFileError(f"{path}: {data_len - expected} trailing bytes in data section")
    return config, out


def load_weights(path, into: FamedNet | None = None) -> FamedNet:
    """Build the stored network (or fill ``into``) from a weight file."""
    config, entries = read_weight_file(path)
    net = into if into is not None else build_network(config, initialize=False)
    store = net.weights
    names = list(store.keys())
    for i, (name, arr, _) in enumerate(entries):
        if i >= len(names) or names[i] != name:
            raise WeightFileError(f"{path}: tensor {name!r} does not exist in the target network")
        if store[name].value.shape != arr.shape:
            raise WeightFileError(
                f"{path}: tensor {name!r} has shape {arr.shape}, network expects {store[name].value.shape}"
            )
    if len(entries) != len(names):
        missing = names[len(entries)]
        raise WeightFileError(f"{path}: tensor {missing!r} missing from the weight file")
    for name, arr, _ in entries:
        store[name].value[...] = arr
    store.initialized = True
    return net
