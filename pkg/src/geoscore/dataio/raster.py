"""NLR1 nightlight raster file format.

Layout (bit-exact): one ASCII header line
``NLR1 <rows> <cols> <origin_lat> <origin_lon> <step>\n`` followed by
rows*cols little-endian IEEE-754 float32 values, row-major, row 0 at the
north edge. NaN encodes a missing cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from geoscore.geo import RasterMeta

MAGIC = b"NLR1"


class RasterFormatError(ValueError):
    """File is not a well-formed NLR1 raster."""


@dataclass
class NightlightRaster:
    meta: RasterMeta
    values: np.ndarray  # [rows, cols] float32, NaN = missing

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.meta.rows, self.meta.cols):
            raise RasterFormatError(
                f"values shape {self.values.shape} != meta ({self.meta.rows}, {self.meta.cols})"
            )


def save_nightlight_raster(raster: NightlightRaster, path: str | Path) -> None:
    meta = raster.meta
    header = f"NLR1 {meta.rows} {meta.cols} {meta.origin_lat!r} {meta.origin_lon!r} {meta.step!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(raster.values, dtype="<f4").tobytes(order="C"))


def load_nightlight_raster(path: str | Path) -> NightlightRaster:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline()
        if not header.startswith(MAGIC + b" "):
            raise RasterFormatError(f"{path}: bad magic, expected NLR1 header")
        fields = header.decode("ascii", errors="replace").split()
        if len(fields) != 6:
            raise RasterFormatError(f"{path}: header needs 6 fields, got {len(fields)}")
        try:
            rows, cols = int(fields[1]), int(fields[2])
            origin_lat, origin_lon, step = float(fields[3]), float(fields[4]), float(fields[5])
        except ValueError as exc:
            raise RasterFormatError(f"{path}: unparseable header: {exc}") from exc
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise RasterFormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    meta = RasterMeta(origin_lat=origin_lat, origin_lon=origin_lon, step=step, rows=rows, cols=cols)
    return NightlightRaster(meta=meta, values=values)
