"""Shared reader/writer for the text/binary grid file formats.

Layout common to height-map and MAT-map files::

    <MAGIC> <version>\\n
    <key> <values...>\\n          # header lines
    data\\n
    <payload>

Small grids use a ``csv`` payload (rows of comma-separated ``repr`` floats,
which round-trip float64 exactly); large grids use raw little-endian binary.
Parse failures raise MapFormatError carrying the byte offset of the failure.
"""

from __future__ import annotations

import numpy as np

from .errors import MapFormatError

# Grids up to this many cells are written as text by default.
CSV_CELL_LIMIT = 4096


class GridReader:
    """Cursor over raw file bytes with offset-tracked line/blob reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def fail(self, message):
        raise MapFormatError(message, self.offset)

    def read_line(self) -> str:
        end = self.data.find(b"\n", self.offset)
        if end < 0:
            self.fail("unexpected end of file while reading line")
        raw = self.data[self.offset : end]
        self.offset = end + 1
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError:
            self.fail("non-ascii bytes in header")

    def read_blob(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            self.fail(f"payload truncated: wanted {n} bytes, "
                      f"{len(self.data) - self.offset} remain")
        blob = self.data[self.offset : self.offset + n]
        self.offset += n
        return blob

    def read_header(self, magic: str) -> dict[str, list[str]]:
        """Parse the magic line and key/value lines up to the ``data`` marker."""
        first = self.read_line().split()
        if len(first) != 2 or first[0] != magic:
            raise MapFormatError(f"expected magic {magic!r}", 0)
        if first[1] != "1":
            raise MapFormatError(f"unsupported {magic} version {first[1]}", 0)
        header: dict[str, list[str]] = {}
        while True:
            start = self.offset
            line = self.read_line()
            if line == "data":
                return header
            parts = line.split()
            if len(parts) < 2:
                self.offset = start
                self.fail(f"malformed header line {line!r}")
            header[parts[0]] = parts[1:]

    def read_csv_array(self, rows: int, cols: int, dtype=np.float64) -> np.ndarray:
        out = np.empty((rows, cols), dtype=dtype)
        for r in range(rows):
            start = self.offset
            fields = self.read_line().split(",")
            if len(fields) != cols:
                self.offset = start
                self.fail(f"row {r} has {len(fields)} values, expected {cols}")
            try:
                out[r, :] = [float(f) for f in fields]
            except ValueError:
                self.offset = start
                self.fail(f"row {r} contains a non-numeric value")
        return out

    def read_binary_array(self, rows: int, cols: int, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        blob = self.read_blob(rows * cols * dtype.itemsize)
        return np.frombuffer(blob, dtype=dtype).reshape(rows, cols)


def header_int(reader: GridReader, header, key, count=1):
    vals = header_fields(reader, header, key, count)
    try:
        return [int(v) for v in vals]
    except ValueError:
        reader.fail(f"header key {key!r} has non-integer value {vals}")


def header_float(reader: GridReader, header, key, count=1):
    vals = header_fields(reader, header, key, count)
    try:
        return [float(v) for v in vals]
    except ValueError:
        reader.fail(f"header key {key!r} has non-numeric value {vals}")


def header_fields(reader: GridReader, header, key, count):
    if key not in header:
        reader.fail(f"missing header key {key!r}")
    vals = header[key]
    if len(vals) != count:
        reader.fail(f"header key {key!r} expects {count} values, got {len(vals)}")
    return vals


def format_csv_array(arr: np.ndarray, as_int=False) -> bytes:
    lines = []
    for row in arr:
        if as_int:
            lines.append(",".join(str(int(v)) for v in row))
        else:
            lines.append(",".join(repr(float(v)) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def pick_encoding(cells: int, binary_name: str, requested=None) -> str:
    if requested is not None:
        return requested
    return "csv" if cells <= CSV_CELL_LIMIT else binary_name
