"""Binary and text file formats: FLD1, DPT1, EVT1, RAW1, CSV, PGM/PPM.

All binary formats are little-endian. Writes go to a temporary file in the
destination directory and are renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .fields import ComplexField

FLD_MAGIC = b"FLD1"
DPT_MAGIC = b"DPT1"
EVT_MAGIC = b"EVT1"
RAW_MAGIC = b"RAW1"

_GRID_HEADER = struct.Struct("<4sIIdd")
_COUNT_HEADER = struct.Struct("<4sI")

EVENT_DTYPE = np.dtype(
    [("cam", "<u1"), ("x_px", "<f4"), ("y_px", "<f4"), ("t_ns", "<u8"), ("cluster_size", "<u2")]
)
RAW_DTYPE = np.dtype(
    [("cam", "<u1"), ("x", "<u2"), ("y", "<u2"), ("t_ns", "<u8"), ("amplitude", "<f4")]
)


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
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


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- FLD1 / DPT1 -----------------------------------------------------------------


def field_to_bytes(field: ComplexField) -> bytes:
    header = _GRID_HEADER.pack(FLD_MAGIC, field.width, field.height, field.pitch_um, field.wavelength_um)
    body = np.empty((field.height, field.width, 2), dtype="<f4")
    body[..., 0] = field.values.real
    body[..., 1] = field.values.imag
    return header + body.tobytes()


def field_from_bytes(data: bytes) -> ComplexField:
    if len(data) < _GRID_HEADER.size:
        raise FormatError("truncated FLD1 header")
    magic, width, height, pitch, wavelength = _GRID_HEADER.unpack_from(data)
    if magic != FLD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FLD_MAGIC!r}")
    expected = _GRID_HEADER.size + width * height * 8
    if len(data) != expected:
        raise FormatError(f"FLD1 payload is {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_GRID_HEADER.size).reshape(height, width, 2)
    # assign parts separately; ``re + 1j * im`` would lose the sign of zeros
    values = np.empty((height, width), dtype=np.complex128)
    values.real = body[..., 0]
    values.imag = body[..., 1]
    return ComplexField(values, pitch, wavelength)


def write_field(path, field: ComplexField) -> None:
    atomic_write_bytes(path, field_to_bytes(field))


def read_field(path) -> ComplexField:
    return field_from_bytes(Path(path).read_bytes())


def depth_to_bytes(depth: np.ndarray, pitch_um: float, wavelength_um: float) -> bytes:
    depth = np.asarray(depth, dtype="<f4")
    height, width = depth.shape
    return _GRID_HEADER.pack(DPT_MAGIC, width, height, pitch_um, wavelength_um) + depth.tobytes()


def depth_from_bytes(data: bytes) -> tuple[np.ndarray, float, float]:
    if len(data) < _GRID_HEADER.size:
        raise FormatError("truncated DPT1 header")
    magic, width, height, pitch, wavelength = _GRID_HEADER.unpack_from(data)
    if magic != DPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DPT_MAGIC!r}")
    expected = _GRID_HEADER.size + width * height * 4
    if len(data) != expected:
        raise FormatError(f"DPT1 payload is {len(data)} bytes, expected {expected}")
    depth = np.frombuffer(data, dtype="<f4", offset=_GRID_HEADER.size).reshape(height, width)
    return depth.astype(np.float64), pitch, wavelength


def write_depth(path, depth, pitch_um, wavelength_um) -> None:
    atomic_write_bytes(path, depth_to_bytes(depth, pitch_um, wavelength_um))


def read_depth(path):
    return depth_from_bytes(Path(path).read_bytes())


# --- EVT1 / RAW1 / CSV -----------------------------------------------------------


def _records_to_bytes(magic: bytes, records: np.ndarray, dtype: np.dtype) -> bytes:
    records = np.asarray(records, dtype=dtype)
    return _COUNT_HEADER.pack(magic, len(records)) + records.tobytes()


def _records_from_bytes(magic: bytes, data: bytes, dtype: np.dtype) -> np.ndarray:
    if len(data) < _COUNT_HEADER.size:
        raise FormatError(f"truncated {magic.decode()} header")
    got, count = _COUNT_HEADER.unpack_from(data)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    expected = _COUNT_HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{magic.decode()} payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=_COUNT_HEADER.size).copy()


def events_to_bytes(records: np.ndarray) -> bytes:
    return _records_to_bytes(EVT_MAGIC, records, EVENT_DTYPE)


def events_from_bytes(data: bytes) -> np.ndarray:
    return _records_from_bytes(EVT_MAGIC, data, EVENT_DTYPE)


def write_events(path, records: np.ndarray) -> None:
    atomic_write_bytes(path, events_to_bytes(records))


def read_events(path) -> np.ndarray:
    return events_from_bytes(Path(path).read_bytes())


def raw_to_bytes(records: np.ndarray) -> bytes:
    return _records_to_bytes(RAW_MAGIC, records, RAW_DTYPE)


def raw_from_bytes(data: bytes) -> np.ndarray:
    return _records_from_bytes(RAW_MAGIC, data, RAW_DTYPE)


def write_raw(path, records: np.ndarray) -> None:
    atomic_write_bytes(path, raw_to_bytes(records))


def read_raw(path) -> np.ndarray:
    return raw_from_bytes(Path(path).read_bytes())


def write_csv(path, header: list[str], columns) -> None:
    """Write equal-length columns under ``header``; floats use ``repr`` precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in zip(*columns):
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return str(int(v))
    return str(v)


def write_events_csv(path, records: np.ndarray) -> None:
    write_csv(
        path,
        ["cam", "x_px", "y_px", "t_ns", "cluster_size"],
        [records["cam"], records["x_px"].astype(float), records["y_px"].astype(float),
         records["t_ns"], records["cluster_size"]],
    )


# --- previews ----------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    finite = np.isfinite(image)
    if not finite.any():
        return np.zeros(image.shape, dtype=np.uint8)
    lo, hi = image[finite].min(), image[finite].max()
    scaled = np.zeros(image.shape)
    if hi > lo:
        scaled[finite] = (image[finite] - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def pgm_bytes(image: np.ndarray) -> bytes:
    data = to_uint8(image)
    return f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode() + data.tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)
    return f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode() + rgb.tobytes()


def write_pgm(path, image) -> None:
    atomic_write_bytes(path, pgm_bytes(image))


def write_ppm(path, rgb) -> None:
    atomic_write_bytes(path, ppm_bytes(rgb))


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = []
    pos = 0
    while len(header) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        header.append(data[pos:end])
        pos = end
    kind, width, height = header[0], int(header[1]), int(header[2])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos + 1)
    if kind == b"P5":
        return pixels.reshape(height, width)
    if kind == b"P6":
        return pixels.reshape(height, width, 3)
    raise FormatError(f"unsupported PNM type {kind!r}")
