"""IDX image/label files and the 20x20 digit preprocessing used by the MLP demos."""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"


class DatasetError(ValueError):
    pass


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: not an IDX file (bad magic)")
    code, ndim = raw[2], raw[3]
    if code not in _DTYPES:
        raise DatasetError(f"{path}: unknown IDX element type 0x{code:02x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - head != need:
        raise DatasetError(f"{path}: expected {need} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    code = _CODES.get(a.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {a.dtype} has no IDX encoding")
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    data = a.astype(_DTYPES[code]).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + data)


def to_input(images: np.ndarray, size: int = 20) -> np.ndarray:
    """(N, H, W) images -> (N, size, size, 1) floats in [0, 1].

    Larger images are center-cropped (28x28 digits carry their strokes in the
    central 20x20 box); smaller ones are rescaled up.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 3:
        raise DatasetError(f"expected (N, H, W) images, got shape {x.shape}")
    _, h, w = x.shape
    if h >= size and w >= size:
        top, left = (h - size) // 2, (w - size) // 2
        x = x[:, top : top + size, left : left + size]
    else:
        from scipy.ndimage import zoom

        x = zoom(x, (1, size / h, size / w), order=1)
    peak = x.max()
    if peak > 0:
        x = x / peak
    return np.clip(x, 0.0, 1.0)[..., None]


def load_digits_idx(directory, limit: int | None = None, size: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Read ``train-images``/``train-labels`` IDX files (optionally gzipped)."""
    d = Path(directory)
    found = {}
    for stem in (TRAIN_IMAGES, TRAIN_LABELS):
        for cand in (d / stem, d / (stem + ".gz")):
            if cand.exists():
                found[stem] = cand
                break
        else:
            raise DatasetError(f"missing {stem}[.gz] in {d}")
    images = read_idx(found[TRAIN_IMAGES])
    labels = read_idx(found[TRAIN_LABELS])
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DatasetError(f"image/label shapes disagree: {images.shape} vs {labels.shape}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return to_input(images, size), labels.astype(np.int64)


def make_digits_idx(directory, size: int = 20) -> tuple[Path, Path]:
    """Write the scikit-learn 8x8 digits, rescaled to ``size`` pixels, as IDX files."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs = zoom(digits.images.astype(np.float64), (1, size / 8, size / 8), order=1)
    imgs = np.clip(np.rint(imgs * 255.0 / 16.0), 0, 255).astype(np.uint8)
    os.makedirs(directory, exist_ok=True)
    d = Path(directory)
    write_idx(d / TRAIN_IMAGES, imgs)
    write_idx(d / TRAIN_LABELS, digits.target.astype(np.uint8))
    return d / TRAIN_IMAGES, d / TRAIN_LABELS
