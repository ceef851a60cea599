"""Volumetric grid data model, interpolation and the MGRID container format.

Conventions used throughout the package:

* arrays are indexed ``(x, y, z)``; short-axis slices are ``arr[:, :, k]``
* voxel ``(i, j, k)`` has physical centre ``origin + (i*sx, j*sy, k*sz)`` mm
  (axis-aligned mapping, no direction cosines)
* the MGRID payload is little-endian and x-fastest, i.e. Fortran order for
  an ``(nx, ny, nz)`` array
* out-of-support interpolation clamps to the nearest edge value
* grids are treated as immutable once constructed
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MGRID_MAGIC = "MGRID"
MGRID_VERSION = 1

SEG_CLASS_COUNT = 5
SEG_CLASS_NAMES = ("background", "LVC", "LVW", "RVC", "RVW")

#: landmark class k (1-based) rasterises to LANDMARK_NAMES[k - 1]
LANDMARK_NAMES = (
    "RV-insert-1",
    "RV-insert-2",
    "RV-lateral-turning",
    "LV-lateral-mid",
    "apex",
    "mitral-centre",
)
LANDMARK_CLASS_COUNT = len(LANDMARK_NAMES) + 1  # 6 landmarks + background


class GridFormatError(ValueError):
    """Malformed MGRID header or payload encoding."""


class GridSizeError(ValueError):
    """Payload length does not match the header dims."""


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be three counts >= 1, got {dims}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return dims, spacing


@dataclass
class VolumeGrid:
    """3D scalar intensity field with physical spacing.

    ``voxels`` has shape (nx, ny, nz) and dtype float32.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        _, self.spacing = _check_geometry(self.voxels.shape, self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


@dataclass
class LabelGrid:
    """3D categorical field; every stored label is < class_count.

    ``labels`` has shape (nx, ny, nz) and dtype uint8. ``meta`` carries
    runtime annotations (e.g. the warp mode that produced the grid) and is
    not serialised.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    class_count: int = SEG_CLASS_COUNT
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {self.labels.shape}")
        _, self.spacing = _check_geometry(self.labels.shape, self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.class_count = int(self.class_count)
        if self.class_count < 1 or self.class_count > 256:
            raise ValueError(f"class_count out of range: {self.class_count}")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise ValueError(
                f"label {int(self.labels.max())} >= class_count {self.class_count}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


@dataclass
class ProbGrid:
    """Per-voxel probability channels, stored channel-first.

    ``probs`` has shape (C, nx, ny, nz), dtype float32. After a softmax the
    per-voxel channel sum is within 1e-5 of 1.
    """

    probs: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 4:
            raise ValueError(f"probs must be 4D (C, nx, ny, nz), got {self.probs.shape}")
        _, self.spacing = _check_geometry(self.probs.shape[1:], self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def channels(self) -> int:
        return self.probs.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]


@dataclass
class LandmarkSet:
    """Exactly six named points, millimetres, in the grid's physical frame."""

    points: dict[str, tuple[float, float, float]]

    def __post_init__(self):
        pts = {}
        for name, pos in self.points.items():
            pos = tuple(float(c) for c in pos)
            if len(pos) != 3 or not all(np.isfinite(pos)):
                raise ValueError(f"landmark {name!r} has invalid position {pos}")
            pts[name] = pos
        if set(pts) != set(LANDMARK_NAMES):
            missing = sorted(set(LANDMARK_NAMES) - set(pts))
            extra = sorted(set(pts) - set(LANDMARK_NAMES))
            raise ValueError(f"landmark names wrong: missing={missing} extra={extra}")
        self.points = {name: pts[name] for name in LANDMARK_NAMES}

    def positions(self) -> np.ndarray:
        """(6, 3) array in canonical name order."""
        return np.array([self.points[n] for n in LANDMARK_NAMES], dtype=np.float64)

    @staticmethod
    def from_positions(positions) -> "LandmarkSet":
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (6, 3):
            raise ValueError(f"expected (6, 3) positions, got {positions.shape}")
        return LandmarkSet({n: tuple(p) for n, p in zip(LANDMARK_NAMES, positions)})


@dataclass
class Atlas:
    """Reference triple of intensity volume, labels and landmarks."""

    volume: VolumeGrid
    labels: LabelGrid
    landmarks: LandmarkSet
    id: str

    def __post_init__(self):
        if not self.volume.same_geometry(self.labels):
            raise ValueError(f"atlas {self.id!r}: volume/labels geometry mismatch")


# ---------------------------------------------------------------------------
# coordinate helpers

def voxel_to_world(grid, ijk) -> np.ndarray:
    """Physical mm coordinates of (possibly fractional) voxel indices.

    ``ijk`` is (..., 3) or (3, N); returns the matching shape as float64.
    """
    ijk = np.asarray(ijk, dtype=np.float64)
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    if ijk.ndim == 2 and ijk.shape[0] == 3 and ijk.shape[1] != 3:
        return origin[:, None] + ijk * spacing[:, None]
    return origin + ijk * spacing


def world_to_voxel(grid, xyz) -> np.ndarray:
    """Continuous voxel coordinates of physical mm points (inverse of voxel_to_world)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    if xyz.ndim == 2 and xyz.shape[0] == 3 and xyz.shape[1] != 3:
        return (xyz - origin[:, None]) / spacing[:, None]
    return (xyz - origin) / spacing


def voxel_centers(grid) -> np.ndarray:
    """(3, nx*ny*nz) physical coordinates of every voxel centre, x-fastest last axis C-order.

    Flattening order matches ``arr.reshape(-1)`` on an (nx, ny, nz) C-ordered array.
    """
    nx, ny, nz = grid.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ii.reshape(-1), jj.reshape(-1), kk.reshape(-1)])
    return voxel_to_world(grid, idx)


# ---------------------------------------------------------------------------
# interpolation

def _axis_indices(coord, n):
    c = np.clip(coord, 0.0, n - 1.0)
    i0 = np.floor(c).astype(np.intp)
    i0 = np.minimum(i0, max(n - 2, 0))
    t = c - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, t


def sample_trilinear(vox: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates.

    ``pts`` is (3, N); out-of-support points clamp to the edge value.
    """
    nx, ny, nz = vox.shape
    x0, x1, tx = _axis_indices(pts[0], nx)
    y0, y1, ty = _axis_indices(pts[1], ny)
    z0, z1, tz = _axis_indices(pts[2], nz)
    v = vox.astype(np.float64, copy=False)
    c000 = v[x0, y0, z0]
    c100 = v[x1, y0, z0]
    c010 = v[x0, y1, z0]
    c110 = v[x1, y1, z0]
    c001 = v[x0, y0, z1]
    c101 = v[x1, y0, z1]
    c011 = v[x0, y1, z1]
    c111 = v[x1, y1, z1]
    c00 = c000 + (c100 - c000) * tx
    c10 = c010 + (c110 - c010) * tx
    c01 = c001 + (c101 - c001) * tx
    c11 = c011 + (c111 - c011) * tx
    c0 = c00 + (c10 - c00) * ty
    c1 = c01 + (c11 - c01) * ty
    return c0 + (c1 - c0) * tz


def sample_trilinear_with_grad(vox: np.ndarray, pts: np.ndarray):
    """Trilinear values plus the gradient w.r.t. continuous voxel coordinates.

    Returns ``(values, grads)`` with grads shaped (3, N). The gradient is the
    in-cell derivative; clamped points report the edge cell's derivative
    along clamped axes (zero pull past the boundary is handled by clipping
    the sample point itself).
    """
    nx, ny, nz = vox.shape
    x0, x1, tx = _axis_indices(pts[0], nx)
    y0, y1, ty = _axis_indices(pts[1], ny)
    z0, z1, tz = _axis_indices(pts[2], nz)
    v = vox.astype(np.float64, copy=False)
    c000 = v[x0, y0, z0]
    c100 = v[x1, y0, z0]
    c010 = v[x0, y1, z0]
    c110 = v[x1, y1, z0]
    c001 = v[x0, y0, z1]
    c101 = v[x1, y0, z1]
    c011 = v[x0, y1, z1]
    c111 = v[x1, y1, z1]
    mx, my, mz = 1.0 - tx, 1.0 - ty, 1.0 - tz
    vals = (
        c000 * mx * my * mz
        + c100 * tx * my * mz
        + c010 * mx * ty * mz
        + c110 * tx * ty * mz
        + c001 * mx * my * tz
        + c101 * tx * my * tz
        + c011 * mx * ty * tz
        + c111 * tx * ty * tz
    )
    gx = (
        (c100 - c000) * my * mz
        + (c110 - c010) * ty * mz
        + (c101 - c001) * my * tz
        + (c111 - c011) * ty * tz
    )
    gy = (
        (c010 - c000) * mx * mz
        + (c110 - c100) * tx * mz
        + (c011 - c001) * mx * tz
        + (c111 - c101) * tx * tz
    )
    gz = (
        (c001 - c000) * mx * my
        + (c101 - c100) * tx * my
        + (c011 - c010) * mx * ty
        + (c111 - c110) * tx * ty
    )
    return vals, np.stack([gx, gy, gz])


def sample_nearest(arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup at continuous voxel coordinates, edge-clamped."""
    nx, ny, nz = arr.shape
    i = np.clip(np.rint(pts[0]), 0, nx - 1).astype(np.intp)
    j = np.clip(np.rint(pts[1]), 0, ny - 1).astype(np.intp)
    k = np.clip(np.rint(pts[2]), 0, nz - 1).astype(np.intp)
    return arr[i, j, k]


def resample_trilinear(v: VolumeGrid, new_spacing) -> VolumeGrid:
    """Resample onto a grid with the given spacing over the same physical extent.

    The output keeps the input origin; dim n maps to floor((n-1)*s_old/s_new)+1
    so the voxel-centre span is preserved to within one voxel.
    """
    new_spacing = tuple(float(s) for s in new_spacing)
    if any(not (s > 0) for s in new_spacing):
        raise ValueError(f"new_spacing must be positive, got {new_spacing}")
    new_dims = tuple(
        int(np.floor((n - 1) * so / sn + 1e-9)) + 1
        for n, so, sn in zip(v.dims, v.spacing, new_spacing)
    )
    out_geom = VolumeGrid(np.zeros(new_dims, np.float32), new_spacing, v.origin)
    pts_world = voxel_centers(out_geom)
    pts = world_to_voxel(v, pts_world)
    vals = sample_trilinear(v.voxels, pts)
    return VolumeGrid(vals.reshape(new_dims).astype(np.float32), new_spacing, v.origin)


def resample_labels(l: LabelGrid, geom, fill: str = "clamp") -> LabelGrid:
    """Nearest-neighbour resample of a label grid onto another grid's geometry.

    ``geom`` is any grid-like with dims/spacing/origin. ``fill='clamp'``
    replicates edge labels outside the source support (the package-wide
    policy); ``fill='background'`` writes class 0 there instead.
    """
    pts_world = voxel_centers(geom)
    pts = world_to_voxel(l, pts_world)
    vals = sample_nearest(l.labels, pts)
    if fill == "background":
        nx, ny, nz = l.dims
        inside = (
            (pts[0] >= -0.5) & (pts[0] <= nx - 0.5)
            & (pts[1] >= -0.5) & (pts[1] <= ny - 0.5)
            & (pts[2] >= -0.5) & (pts[2] <= nz - 0.5)
        )
        vals = np.where(inside, vals, 0)
    elif fill != "clamp":
        raise ValueError(f"unknown fill mode {fill!r}")
    return LabelGrid(
        vals.reshape(geom.dims).astype(np.uint8),
        geom.spacing,
        geom.origin,
        class_count=l.class_count,
    )


# ---------------------------------------------------------------------------
# label/probability conversions

def one_hot(l: LabelGrid) -> ProbGrid:
    """Indicator channels: channel k is 1 where label == k."""
    nx, ny, nz = l.dims
    out = np.zeros((l.class_count, nx, ny, nz), dtype=np.float32)
    for k in range(l.class_count):
        out[k] = l.labels == k
    return ProbGrid(out, l.spacing, l.origin)


def argmax_labels(p: ProbGrid, class_count: int | None = None) -> LabelGrid:
    """Per-voxel index of the maximal channel; ties break toward the lowest index."""
    if p.channels < 2:
        raise ValueError("argmax_labels needs at least 2 channels")
    lab = np.argmax(p.probs, axis=0).astype(np.uint8)
    return LabelGrid(lab, p.spacing, p.origin, class_count=class_count or p.channels)


# ---------------------------------------------------------------------------
# MGRID v1 container

def _header_field(header: dict, name: str, kind):
    if name not in header:
        raise GridFormatError(f"header missing field {name!r}")
    value = header[name]
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise GridFormatError(f"header field {name!r} invalid: {value!r}") from exc


def _triple(header, name, cast):
    raw = _header_field(header, name, list)
    if len(raw) != 3:
        raise GridFormatError(f"header field {name!r} must have 3 entries, got {raw!r}")
    try:
        return tuple(cast(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise GridFormatError(f"header field {name!r} invalid: {raw!r}") from exc


def write_grid(g: VolumeGrid | LabelGrid, path) -> None:
    """Write a grid in the MGRID v1 container (JSON header line + raw payload)."""
    if isinstance(g, VolumeGrid):
        kind = "f32"
        payload = np.asfortranarray(g.voxels.astype("<f4", copy=False)).tobytes(order="F")
    elif isinstance(g, LabelGrid):
        kind = "u8"
        payload = np.asfortranarray(g.labels).tobytes(order="F")
    else:
        raise TypeError(f"cannot write grid of type {type(g).__name__}")
    header = {
        "magic": MGRID_MAGIC,
        "version": MGRID_VERSION,
        "kind": kind,
        "dims": list(g.dims),
        "spacing": list(g.spacing),
        "origin": list(g.origin),
    }
    if kind == "u8":
        header["class_count"] = g.class_count
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(payload)


def read_grid(path) -> VolumeGrid | LabelGrid:
    """Read an MGRID v1 file; returns a VolumeGrid (f32) or LabelGrid (u8)."""
    with open(path, "rb") as fh:
        raw = fh.readline(1 << 16)
        if not raw.endswith(b"\n"):
            raise GridFormatError("header line missing terminating newline")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GridFormatError(f"header is not valid JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise GridFormatError("header must be a JSON object")
        if header.get("magic") != MGRID_MAGIC:
            raise GridFormatError(f"header field 'magic' invalid: {header.get('magic')!r}")
        if _header_field(header, "version", int) != MGRID_VERSION:
            raise GridFormatError(f"header field 'version' unsupported: {header['version']!r}")
        kind = _header_field(header, "kind", str)
        if kind not in ("f32", "u8"):
            raise GridFormatError(f"header field 'kind' invalid: {kind!r}")
        dims = _triple(header, "dims", int)
        spacing = _triple(header, "spacing", float)
        origin = _triple(header, "origin", float)
        if any(d < 1 for d in dims):
            raise GridFormatError(f"header field 'dims' invalid: {dims!r}")
        if any(not (s > 0) for s in spacing):
            raise GridFormatError(f"header field 'spacing' invalid: {spacing!r}")
        count = dims[0] * dims[1] * dims[2]
        itemsize = 4 if kind == "f32" else 1
        payload = fh.read()
    if len(payload) != count * itemsize:
        raise GridSizeError(
            f"payload has {len(payload)} bytes, expected {count * itemsize} "
            f"for dims {dims} kind {kind}"
        )
    if kind == "f32":
        vox = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
        return VolumeGrid(vox.copy(), spacing, origin)
    class_count = _header_field(header, "class_count", int)
    lab = np.frombuffer(payload, dtype=np.uint8).reshape(dims, order="F")
    return LabelGrid(lab.copy(), spacing, origin, class_count=class_count)


def write_landmarks(lm: LandmarkSet, path) -> None:
    doc = {
        "landmarks": [
            {"name": name, "pos_mm": list(lm.points[name])} for name in LANDMARK_NAMES
        ]
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def read_landmarks(path) -> LandmarkSet:
    doc = json.loads(Path(path).read_text())
    try:
        entries = doc["landmarks"]
        points = {e["name"]: tuple(e["pos_mm"]) for e in entries}
    except (TypeError, KeyError) as exc:
        raise GridFormatError(f"landmark file malformed: {exc}") from exc
    return LandmarkSet(points)
