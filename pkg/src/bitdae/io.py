"""Persistence formats.

Checkpoint file (all integers little-endian)::

    magic    8 bytes  b"BDAECKPT"
    version  u32
    meta_len u32      length of the JSON metadata blob
    body_len u64      length of the tensor section
    sha256   32 bytes over meta + body
    meta     JSON (specs, config, schedule, step counter, ...)
    body     repeated: u16 name_len, name, u8 dtype_len, dtype (numpy str),
             u8 ndim, u64 * ndim shape, u64 nbytes, raw little-endian data

Codes file::

    magic b"BDAECODE", u32 version, u32 n_bits, u64 count, u32 crc32,
    then ``count`` rows of ``ceil(n_bits / 8)`` bytes from ``np.packbits``.
"""
from __future__ import annotations

import ast
import csv
import hashlib
import json
import os
import struct
import tempfile
import zipfile
import zlib
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .errors import CorruptionError, DataError, ShapeError, VersionError

CKPT_MAGIC = b"BDAECKPT"
CODES_MAGIC = b"BDAECODE"
FORMAT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIIQ32s")
_CODES_HEAD = struct.Struct("<8sIIQI")


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
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


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def encode_checkpoint(tensors: Mapping[str, object], meta: dict, version: int = FORMAT_VERSION) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = []
    for name, value in tensors.items():
        arr = np.require(_to_numpy(value), requirements="C")
        name_b, dtype_b = name.encode(), arr.dtype.str.encode()
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", len(dtype_b)) + dtype_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        parts.append(struct.pack("<Q", len(data)) + data)
    body = b"".join(parts)
    digest = hashlib.sha256(meta_bytes + body).digest()
    return _CKPT_HEAD.pack(CKPT_MAGIC, version, len(meta_bytes), len(body), digest) + meta_bytes + body


def decode_checkpoint(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < _CKPT_HEAD.size:
        raise CorruptionError("checkpoint truncated: header incomplete")
    magic, version, meta_len, body_len, digest = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)")
    if version > FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}")
    start = _CKPT_HEAD.size
    if len(blob) != start + meta_len + body_len:
        raise CorruptionError(
            f"checkpoint size {len(blob)} does not match header ({start + meta_len + body_len})")
    payload = blob[start:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    meta = json.loads(payload[:meta_len].decode())
    body = memoryview(payload)[meta_len:]
    tensors = {}
    pos = 0
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<H", body, pos); pos += 2
            name = bytes(body[pos:pos + n]).decode(); pos += n
            (n,) = struct.unpack_from("<B", body, pos); pos += 1
            dtype = np.dtype(bytes(body[pos:pos + n]).decode()); pos += n
            (ndim,) = struct.unpack_from("<B", body, pos); pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos); pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos); pos += 8
            if pos + nbytes > len(body):
                raise CorruptionError(f"tensor {name!r} runs past end of file")
            arr = np.frombuffer(body[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
            tensors[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CorruptionError(f"malformed tensor section: {e}") from e
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, object], meta: dict) -> None:
    atomic_write(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors are numpy arrays."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)


# ---------------------------------------------------------------- codes


def save_codes(path, codes) -> None:
    """Write hard codes (count, n_bits) as packed bits."""
    if not isinstance(codes, (torch.Tensor, np.ndarray)) and hasattr(codes, "values"):
        codes = codes.values  # LatentCode
    arr = _to_numpy(codes)
    if arr.ndim != 2:
        raise ShapeError(f"codes must be 2-D (count, n_bits), got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError("only hard (0/1) codes can be saved")
    packed = np.packbits(arr.astype(np.uint8), axis=1)
    body = packed.tobytes()
    head = _CODES_HEAD.pack(CODES_MAGIC, FORMAT_VERSION, arr.shape[1], arr.shape[0], zlib.crc32(body))
    atomic_write(path, head + body)


def load_codes(path) -> np.ndarray:
    """Read a codes file back as a uint8 array of 0/1, shape (count, n_bits)."""
    blob = Path(path).read_bytes()
    if len(blob) < _CODES_HEAD.size:
        raise CorruptionError("codes file truncated: header incomplete")
    magic, version, n_bits, count, crc = _CODES_HEAD.unpack_from(blob)
    if magic != CODES_MAGIC:
        raise CorruptionError("not a codes file (bad magic)")
    if version > FORMAT_VERSION:
        raise VersionError(f"codes format version {version} is newer than supported {FORMAT_VERSION}")
    row = (n_bits + 7) // 8
    body = blob[_CODES_HEAD.size:]
    if len(body) != row * count:
        raise CorruptionError(f"codes body is {len(body)} bytes, header implies {row * count}")
    if zlib.crc32(body) != crc:
        raise CorruptionError("codes checksum mismatch")
    packed = np.frombuffer(body, dtype=np.uint8).reshape(count, row)
    return np.unpackbits(packed, axis=1)[:, :n_bits].copy()


# ---------------------------------------------------------------- images


def to_uint8(batch) -> np.ndarray:
    """[-1, 1] -> [0, 255]: clip, affine map, round half away from zero."""
    x = np.clip(_to_numpy(batch).astype(np.float64), -1.0, 1.0)
    return np.floor((x + 1.0) * 127.5 + 0.5).astype(np.uint8)


def image_grid(batch, nrow: int = 8, padding: int = 1, pad_value: int = 0) -> np.ndarray:
    """Tile (B, C, H, W) into an (H', W', C) uint8 grid."""
    u8 = to_uint8(batch)
    if u8.ndim != 4 or u8.shape[0] == 0:
        raise ShapeError(f"expected a nonempty (B, C, H, W) batch, got {u8.shape}")
    B, C, H, W = u8.shape
    ncol = min(nrow, B)
    nrows = -(-B // ncol)
    grid = np.full((nrows * (H + padding) + padding, ncol * (W + padding) + padding, C),
                   pad_value, dtype=np.uint8)
    for i in range(B):
        r, c = divmod(i, ncol)
        y, x = padding + r * (H + padding), padding + c * (W + padding)
        grid[y:y + H, x:x + W] = u8[i].transpose(1, 2, 0)
    return grid


def export_images(batch, path, nrow: int = 8, padding: int = 1) -> tuple[Path, Path]:
    """Write a PNG grid and a ``.npy`` sidecar holding the raw float tensor."""
    from PIL import Image

    path = Path(path)
    grid = image_grid(batch, nrow=nrow, padding=padding)
    img = Image.fromarray(grid[..., 0] if grid.shape[-1] == 1 else grid)
    raw_path = path.with_suffix(".npy")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG")
        np.save(raw_path, _to_numpy(batch))
    except OSError as e:
        raise OSError(f"failed to write images to {path}: {e}") from e
    return path, raw_path


def load_raw(path) -> np.ndarray:
    return np.load(Path(path).with_suffix(".npy"))


def read_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path))


# ---------------------------------------------------------------- text formats


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        return text


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def write_config(path, values: Mapping) -> None:
    lines = [f"{k} = {v!r}" for k, v in values.items()]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_report(path, rows: list[dict]) -> None:
    """Tab-separated metric report; columns are the union of row keys, ``metric`` first."""
    cols = ["metric", "value"]
    for row in rows:
        cols += [k for k in row if k not in cols]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, delimiter="\t", restval="")
        w.writeheader()
        w.writerows(rows)


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: parse_value(v) if v != "" else None for k, v in row.items()}
                for row in csv.DictReader(f, delimiter="\t")]


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- datasets


def save_dataset(path, images, labels: Optional[Mapping] = None) -> None:
    """Store [-1, 1] images as uint8 plus integer label columns in an ``.npz``."""
    arrays = {"images": to_uint8(images)}
    for k, v in (labels or {}).items():
        arrays[f"label_{k}"] = np.asarray(v)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, suffix=".npz", delete=False) as f:
        np.savez_compressed(f, **arrays)
    os.replace(f.name, path)


def load_dataset(path) -> tuple[torch.Tensor, dict]:
    """Images in [-1, 1] and labels from an ``.npz``, a raw ``.npy`` dump or a directory of PNGs.

    8-bit sources are mapped with x / 127.5 - 1; ``.npy`` dumps are taken as-is.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DataError(f"no .png files in {path}")
        imgs = [read_png(p) for p in files]
        imgs = [im[..., None] if im.ndim == 2 else im for im in imgs]
        if len({im.shape for im in imgs}) != 1:
            raise ShapeError(f"images in {path} differ in size")
        u8 = np.stack(imgs).transpose(0, 3, 1, 2).astype(np.uint8)
        return torch.from_numpy(u8.astype(np.float32) / 127.5 - 1.0), {}
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 4:
            raise ShapeError(f"{path} holds shape {arr.shape}, expected (N, C, H, W)")
        return torch.from_numpy(arr.astype(np.float32)), {}
    try:
        with np.load(path) as f:
            u8 = f["images"]
            labels = {k[len("label_"):]: f[k] for k in f.files if k.startswith("label_")}
    except FileNotFoundError:
        raise
    except (KeyError, ValueError, OSError, zlib.error, zipfile.BadZipFile) as e:
        raise DataError(f"{path} is not a dataset file: {e}") from e
    return torch.from_numpy(u8.astype(np.float32) / 127.5 - 1.0), labels
