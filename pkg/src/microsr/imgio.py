"""PNG image and CSV manifest input/output.

Images on disk are 8-bit or 16-bit PNG; in memory they are float
arrays in [0, 1], (H, W) grayscale or (H, W, 3) RGB. Writes go to a
temp file in the target directory and are renamed into place, so a
failed write never leaves a partial file.

A dataset manifest is a CSV with header pair_id, lr_path, hr_path,
split; paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from typing import Optional, Sequence

import cv2
import numpy as np

from .errors import ManifestError

MANIFEST_FIELDS = ("pair_id", "lr_path", "hr_path", "split")
SPLITS = ("train", "val", "test")


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_image(path: str, img: np.ndarray, bits: int = 16) -> None:
    """Write [0,1] float image as PNG; 16-bit by default."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    peak = 2 ** bits - 1
    quant = np.round(np.clip(img, 0.0, 1.0) * peak)
    quant = quant.astype(np.uint8 if bits == 8 else np.uint16)
    if quant.ndim == 3:
        quant = quant[:, :, ::-1]  # cv2 stores channels as BGR
    ok, buf = cv2.imencode(".png", quant)
    if not ok:
        raise IOError(f"PNG encoding failed for {path}")
    _atomic_write(path, buf.tobytes())


def read_image(path: str) -> np.ndarray:
    """Read a PNG into a [0,1] float64 image; color comes back as RGB."""
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float64) / 65535.0
    else:
        raise IOError(f"unsupported image dtype {raw.dtype} in {path}")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        if img.shape[2] != 3:
            raise IOError(f"unsupported channel count {img.shape[2]} in {path}")
        img = img[:, :, ::-1].copy()
    return img


def write_manifest(path: str, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        if row.get("split") not in SPLITS:
            raise ManifestError(f"bad split {row.get('split')!r} in row {row}")
        writer.writerow({k: row[k] for k in MANIFEST_FIELDS})
    _atomic_write(path, buf.getvalue().encode())


def read_manifest(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"manifest {path} missing columns {sorted(missing)}")
        rows = list(reader)
    for row in rows:
        if row["split"] not in SPLITS:
            raise ManifestError(f"bad split {row['split']!r} in manifest {path}")
    return rows


def load_pairs(manifest_path: str, split: Optional[str] = None) -> list:
    """Load (lr, hr) image pairs listed in a manifest as PatchPair items.

    Paths resolve relative to the manifest location. Images load as
    float32. Pass split to filter to one of train/val/test.
    """
    from .data import PatchPair

    base = os.path.dirname(os.path.abspath(manifest_path))
    pairs = []
    for row in read_manifest(manifest_path):
        if split is not None and row["split"] != split:
            continue
        lr = read_image(os.path.join(base, row["lr_path"])).astype(np.float32)
        hr = read_image(os.path.join(base, row["hr_path"])).astype(np.float32)
        pairs.append(PatchPair(lr=lr, hr=hr, source_id=row["pair_id"]))
    return pairs


def write_text(path: str, text: str) -> None:
    _atomic_write(path, text.encode())
