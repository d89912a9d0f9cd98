"""Volumetric scan data model and raw/header file I/O.

Voxels are stored as ``uint8`` in ``(iy, iz, ix)`` order: B-scan index,
axial (depth) index, lateral index.  One B-scan is therefore a contiguous
``(n_z, n_x)`` image.

File format
-----------
A volume is a pair of files sharing a stem:

``<stem>.hdr``  plain text, one ``key = value`` per line::

    format = octvol-1
    n_x = 512
    n_y = 128
    n_z = 512
    extent_x_mm = 3.01
    extent_y_mm = 3.1
    extent_z_mm = 2.6
    dtype = uint8
    order = iy,iz,ix
    raw = <stem>.raw

``<stem>.raw``  ``n_x * n_y * n_z`` unsigned bytes in ``(iy, iz, ix)``
C order.  Lines starting with ``#`` in the header are ignored.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_TAG = "octvol-1"


class VolumeFormatError(ValueError):
    """Raised when a header/raw pair is malformed or inconsistent."""


@dataclass(frozen=True)
class ScanGeometry:
    extent_x_mm: float = 3.01
    extent_y_mm: float = 3.10
    extent_z_mm: float = 2.60
    n_x: int = 512
    n_y: int = 128
    n_z: int = 512

    def __post_init__(self):
        for name in ("extent_x_mm", "extent_y_mm", "extent_z_mm"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be finite and > 0, got {val!r}")
        for name in ("n_x", "n_y", "n_z"):
            val = getattr(self, name)
            if int(val) != val or val < 2:
                raise ValueError(f"{name} must be an integer >= 2, got {val!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape of the voxel grid, ``(n_y, n_z, n_x)``."""
        return (self.n_y, self.n_z, self.n_x)

    @property
    def pitch(self) -> np.ndarray:
        """Voxel pitch in mm as ``(x, y, z)``."""
        return np.array(
            [
                self.extent_x_mm / self.n_x,
                self.extent_y_mm / self.n_y,
                self.extent_z_mm / self.n_z,
            ]
        )

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.extent_x_mm, self.extent_y_mm, self.extent_z_mm])

    @property
    def counts(self) -> np.ndarray:
        return np.array([self.n_x, self.n_y, self.n_z])


@dataclass(frozen=True, eq=False)
class Volume:
    """A stack of B-scans with its physical scan geometry.

    The voxel array is made read-only on construction.
    """

    geometry: ScanGeometry
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.dtype != np.uint8:
            if vox.size and (vox.min() < 0 or vox.max() > 255):
                raise ValueError("voxel intensities must lie in [0, 255]")
            vox = vox.astype(np.uint8)
        if vox.shape != self.geometry.shape:
            raise ValueError(
                f"voxel array shape {vox.shape} does not match geometry {self.geometry.shape}"
            )
        vox = np.ascontiguousarray(vox)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)

    def bscan(self, iy: int) -> np.ndarray:
        return self.voxels[iy]

    @property
    def n_bscans(self) -> int:
        return self.geometry.n_y


def _header_path(path) -> Path:
    p = Path(path)
    if p.suffix == ".raw":
        return p.with_suffix(".hdr")
    if p.suffix != ".hdr":
        return p.with_name(p.name + ".hdr")
    return p


def save_volume(v: Volume, path) -> Path:
    """Write ``v`` as a header/raw pair.  Returns the header path."""
    hdr = _header_path(path)
    raw = hdr.with_suffix(".raw")
    g = v.geometry
    lines = [
        f"format = {FORMAT_TAG}",
        f"n_x = {g.n_x}",
        f"n_y = {g.n_y}",
        f"n_z = {g.n_z}",
        f"extent_x_mm = {g.extent_x_mm!r}",
        f"extent_y_mm = {g.extent_y_mm!r}",
        f"extent_z_mm = {g.extent_z_mm!r}",
        "dtype = uint8",
        "order = iy,iz,ix",
        f"raw = {raw.name}",
    ]
    hdr.parent.mkdir(parents=True, exist_ok=True)
    with open(raw, "wb") as fh:
        fh.write(v.voxels.tobytes(order="C"))
    hdr.write_text("\n".join(lines) + "\n")
    return hdr


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"header line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_volume(path) -> Volume:
    hdr = _header_path(path)
    if not hdr.is_file():
        raise FileNotFoundError(f"volume header not found: {hdr}")
    meta = _parse_header(hdr.read_text())
    try:
        dims = {k: int(meta[k]) for k in ("n_x", "n_y", "n_z")}
        extents = {k: float(meta[k]) for k in ("extent_x_mm", "extent_y_mm", "extent_z_mm")}
    except KeyError as exc:
        raise VolumeFormatError(f"header missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise VolumeFormatError(f"bad numeric header field: {exc}") from None
    if meta.get("dtype", "uint8") != "uint8":
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r}")
    if meta.get("order", "iy,iz,ix").replace(" ", "") != "iy,iz,ix":
        raise VolumeFormatError(f"unsupported voxel order {meta['order']!r}")
    if any(n <= 0 for n in dims.values()) or any(e <= 0 for e in extents.values()):
        raise VolumeFormatError("non-positive dimensions in header")
    try:
        geom = ScanGeometry(**extents, **dims)
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from None

    raw = hdr.parent / meta.get("raw", hdr.with_suffix(".raw").name)
    if not raw.is_file():
        raise FileNotFoundError(f"raw voxel file not found: {raw}")
    expected = geom.n_x * geom.n_y * geom.n_z
    actual = os.path.getsize(raw)
    if actual != expected:
        raise VolumeFormatError(
            f"raw file holds {actual} bytes, header declares {expected}"
        )
    data = np.fromfile(raw, dtype=np.uint8).reshape(geom.shape)
    return Volume(geom, data)


def voxel_to_mm(v: Volume | ScanGeometry, ix: int, iy: int, iz: int) -> np.ndarray:
    """Physical position (x, y, z) in mm of the center of voxel ``(ix, iy, iz)``."""
    g = v.geometry if isinstance(v, Volume) else v
    idx = np.array([ix, iy, iz])
    if np.any(idx < 0) or np.any(idx >= g.counts):
        raise IndexError(f"voxel index {(ix, iy, iz)} outside grid {tuple(g.counts)}")
    return (idx + 0.5) * g.pitch


def mm_to_voxel(v: Volume | ScanGeometry, p) -> tuple[int, int, int]:
    """Index ``(ix, iy, iz)`` of the voxel containing physical point ``p``."""
    g = v.geometry if isinstance(v, Volume) else v
    idx = np.floor(np.asarray(p, dtype=float) / g.pitch).astype(int)
    if np.any(idx < 0) or np.any(idx >= g.counts):
        raise IndexError(f"point {tuple(p)} lies outside the scan field")
    return int(idx[0]), int(idx[1]), int(idx[2])


def index_grid_to_mm(geometry: ScanGeometry, ix, iy, iz) -> np.ndarray:
    """Vectorized voxel-center positions; returns an ``(N, 3)`` array."""
    pitch = geometry.pitch
    return np.column_stack(
        [
            (np.asarray(ix, dtype=float) + 0.5) * pitch[0],
            (np.asarray(iy, dtype=float) + 0.5) * pitch[1],
            (np.asarray(iz, dtype=float) + 0.5) * pitch[2],
        ]
    )
