"""File formats: tensor files, 8-bit masks, PNG previews, atomic writes."""

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

TENSOR_MAGIC = "MDT1"


def atomic_write_bytes(path, data):
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def tensor_bytes(array):
    arr = np.asarray(array, dtype="<f4")
    header = {"magic": TENSOR_MAGIC, "dims": list(arr.shape), "dtype": "f32", "byte_order": "LE"}
    return json.dumps(header).encode() + b"\n" + np.ascontiguousarray(arr).tobytes()


def parse_tensor_bytes(raw):
    line, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ValueError("tensor file has no header line")
    header = json.loads(line)
    if header.get("magic") != TENSOR_MAGIC or header.get("dtype") != "f32":
        raise ValueError(f"unsupported tensor header: {header}")
    if header.get("byte_order") != "LE":
        raise ValueError("only little-endian tensor files are supported")
    dims = tuple(header["dims"])
    if len(payload) != 4 * int(np.prod(dims)):
        raise ValueError(f"payload holds {len(payload)} bytes, expected {4 * int(np.prod(dims))}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, array):
    atomic_write_bytes(path, tensor_bytes(array))


def load_tensor(path):
    return parse_tensor_bytes(Path(path).read_bytes())


def save_mask(path, mask):
    """Masks are stored as 8-bit 0/255 PNG grids."""
    grid = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    _save_png(path, grid)


def load_mask(path):
    return np.asarray(Image.open(path)) > 127


def to_uint8(image):
    """Linear map of [-1, 1] to [0, 255] (clipped)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(path, image):
    _save_png(path, to_uint8(image))


def _save_png(path, grid):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(grid).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def contact_sheet(path, rows, scale=4):
    """Save a grid of images/masks; each row is a list of 2-D arrays in [-1, 1]."""
    tiles = [[to_uint8(img) for img in row] for row in rows]
    h, w = tiles[0][0].shape
    ncol = max(len(r) for r in tiles)
    sheet = np.zeros((len(tiles) * (h + 1), ncol * (w + 1)), dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            sheet[i * (h + 1) : i * (h + 1) + h, j * (w + 1) : j * (w + 1) + w] = tile
    sheet = np.kron(sheet, np.ones((scale, scale), dtype=np.uint8))
    _save_png(path, sheet)


def array_digest(*arrays):
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode() + str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
