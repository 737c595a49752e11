"""File formats: tensor container, PPM images, keypoint CSV, descriptor records.

Container layout (little-endian throughout): magic ``UFT`` + version byte
0x01, uint32 rank (max 4), rank uint32 dims, then row-major float32 payload.
All writers go through an atomic temp-file + rename so readers never see a
partial file.
"""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile

import numpy as np

from .errors import DataError

MAGIC = b"UFT\x01"
MAX_RANK = 4


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes to `path` via a temp file + rename in the same directory."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def tensor_bytes(array) -> bytes:
    """Serialize an array to the container format."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise DataError(f"tensor rank {arr.ndim} outside supported range 1..{MAX_RANK}")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.tobytes(order="C"))
    return out.getvalue()


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, tensor_bytes(array))


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise DataError("not a tensor container (bad magic or truncated header)")
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank == 0 or rank > MAX_RANK:
        raise DataError(f"tensor rank {rank} outside supported range 1..{MAX_RANK}")
    header_end = 8 + 4 * rank
    if len(data) < header_end:
        raise DataError("tensor container truncated in dims")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + 4 * count
    if len(data) != expected:
        raise DataError(
            f"tensor payload length {len(data) - header_end} does not match dims {dims}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=header_end, count=count)
    return flat.reshape(dims).copy()


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise DataError(f"cannot read tensor file {path}: {e}") from e
    return tensor_from_bytes(data)


# --- PPM (P6, 8-bit) ---------------------------------------------------------

def ppm_bytes(image01) -> bytes:
    """Encode an H x W x 3 float image in [0,1] as binary PPM."""
    img = np.asarray(image01, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM writer expects H x W x 3, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + data.tobytes(order="C")


def write_ppm(path, image01) -> None:
    atomic_write_bytes(path, ppm_bytes(image01))


def _ppm_tokens(data: bytes, n: int, start: int):
    """Read n whitespace-separated header tokens, skipping '#' comments."""
    tokens = []
    i = start
    while len(tokens) < n:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise DataError("truncated PPM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i


def ppm_from_bytes(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise DataError("not a binary PPM (P6) file")
    try:
        (w, h, maxval), i = _ppm_tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, DataError) as e:
        raise DataError(f"bad PPM header: {e}") from e
    if maxval != 255:
        raise DataError(f"only 8-bit PPM supported (maxval 255, got {maxval})")
    i += 1  # single whitespace byte after maxval
    need = w * h * 3
    raw = data[i : i + need]
    if len(raw) != need:
        raise DataError("PPM pixel data truncated")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise DataError(f"cannot read PPM file {path}: {e}") from e
    return ppm_from_bytes(data)


# --- keypoint CSV ------------------------------------------------------------

def write_keypoints_csv(path, keypoints) -> None:
    """Rows of x,y,score; floats serialized with repr for lossless round-trip."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "score"])
    for kp in keypoints:
        x, y, score = kp.x, kp.y, kp.score
        writer.writerow([repr(float(x)), repr(float(y)), repr(float(score))])
    atomic_write_text(path, buf.getvalue())


def read_keypoints_csv(path):
    from .heads import Keypoint

    out = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [c.strip() for c in header[:3]] != ["x", "y", "score"]:
                raise DataError(f"{path}: expected header x,y,score")
            for row in reader:
                if not row:
                    continue
                if len(row) < 3:
                    raise DataError(f"{path}: short keypoint row {row!r}")
                out.append(Keypoint(x=float(row[0]), y=float(row[1]), score=float(row[2])))
    except OSError as e:
        raise DataError(f"cannot read keypoint file {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"{path}: bad keypoint value: {e}") from e
    return out


# --- packed descriptor records ----------------------------------------------

def write_descriptor_records(path, packed) -> None:
    """Packed descriptors as fixed-width binary records (one per row)."""
    arr = np.ascontiguousarray(packed, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"descriptor records expect N x record_bytes, got {arr.shape}")
    atomic_write_bytes(path, arr.tobytes(order="C"))


def read_descriptor_records(path, record_bytes: int = 32) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise DataError(f"cannot read descriptor file {path}: {e}") from e
    if record_bytes <= 0 or len(data) % record_bytes != 0:
        raise DataError(
            f"descriptor file size {len(data)} not a multiple of record size {record_bytes}"
        )
    n = len(data) // record_bytes
    return np.frombuffer(data, dtype=np.uint8).reshape(n, record_bytes).copy()


# --- homography text rows ----------------------------------------------------

def write_homographies_text(path, matrices) -> None:
    """One 3x3 matrix per line as 9 row-major numbers."""
    lines = []
    for m in matrices:
        arr = np.asarray(m, dtype=np.float64)
        if arr.shape != (3, 3):
            raise DataError(f"homography must be 3x3, got {arr.shape}")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_homographies_text(path):
    mats = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = line.split()
                if len(vals) != 9:
                    raise DataError(f"{path}:{lineno}: expected 9 numbers, got {len(vals)}")
                mats.append(np.array([float(v) for v in vals]).reshape(3, 3))
    except OSError as e:
        raise DataError(f"cannot read homography file {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"{path}: bad homography value: {e}") from e
    return mats
