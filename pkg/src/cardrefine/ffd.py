"""Free-form deformation on a cubic B-spline control lattice.

The lattice covers the image domain plus one control-point margin per side;
displacements are millimetre 3-vectors stored per control point. The dense
field and its adjoint (scattering per-voxel gradients back onto the lattice)
are separable tensor contractions, so both run as small dense matmuls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .landmarks import AffineTransform
from .volgrid import GridFormatError


def bspline_weights(t: np.ndarray) -> np.ndarray:
    """Cubic B-spline basis values (4, ...) at in-cell parameter t."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            (1 - t) ** 3 / 6.0,
            (3 * t3 - 6 * t2 + 4) / 6.0,
            (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0,
            t3 / 6.0,
        ]
    )


@dataclass
class DomainGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    @staticmethod
    def of(grid) -> "DomainGeometry":
        return DomainGeometry(tuple(grid.dims), tuple(grid.spacing), tuple(grid.origin))


@dataclass
class FfdTransform:
    """B-spline displacement lattice over a fixed image domain.

    displacements: (3, ncx, ncy, ncz) mm. ``init_affine`` is the global
    initialisation the local field composes with: the full sampling map is
    src(x) = init_affine^-1(x) + u(x).
    """

    control_spacing: tuple[float, float, float]
    lattice_origin: tuple[float, float, float]
    displacements: np.ndarray
    domain: DomainGeometry
    init_affine: AffineTransform | None = None

    def __post_init__(self):
        self.control_spacing = tuple(float(s) for s in self.control_spacing)
        self.lattice_origin = tuple(float(o) for o in self.lattice_origin)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.displacements.ndim != 4 or self.displacements.shape[0] != 3:
            raise ValueError(
                f"displacements must be (3, ncx, ncy, ncz), got {self.displacements.shape}"
            )
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("displacements must be finite")

    @property
    def lattice_dims(self) -> tuple[int, int, int]:
        return self.displacements.shape[1:]


def lattice_for_domain(domain: DomainGeometry, control_spacing) -> FfdTransform:
    """Zero-displacement lattice covering the domain plus a one-point margin."""
    control_spacing = tuple(float(s) for s in control_spacing)
    if any(not (s > 0) for s in control_spacing):
        raise ValueError(f"control spacing must be positive, got {control_spacing}")
    dims = []
    origin = []
    for n, vox_s, o, delta in zip(
        domain.dims, domain.spacing, domain.origin, control_spacing
    ):
        extent = (n - 1) * vox_s
        ncells = max(int(np.ceil(extent / delta - 1e-9)), 1)
        dims.append(ncells + 3)
        origin.append(o - delta)
    return FfdTransform(
        control_spacing,
        tuple(origin),
        np.zeros((3, *dims), dtype=np.float64),
        domain,
    )


def _axis_basis_matrix(n: int, vox_spacing: float, origin: float, lat_origin: float,
                       delta: float, ncp: int) -> np.ndarray:
    """(n, ncp) matrix of B-spline weights for each voxel along one axis."""
    coords = origin + np.arange(n) * vox_spacing
    s = (coords - lat_origin) / delta
    cell = np.clip(np.floor(s).astype(np.intp), 1, ncp - 3)
    t = s - cell
    w = bspline_weights(t)  # (4, n)
    B = np.zeros((n, ncp))
    rows = np.arange(n)
    for l in range(4):
        B[rows, cell - 1 + l] = w[l]
    return B


def basis_matrices(ffd: FfdTransform):
    """Per-axis (n, ncp) weight matrices for the transform's own domain."""
    return tuple(
        _axis_basis_matrix(
            ffd.domain.dims[a],
            ffd.domain.spacing[a],
            ffd.domain.origin[a],
            ffd.lattice_origin[a],
            ffd.control_spacing[a],
            ffd.lattice_dims[a],
        )
        for a in range(3)
    )


def dense_displacement(ffd: FfdTransform, basis=None) -> np.ndarray:
    """(3, nx, ny, nz) displacement field over the domain voxels."""
    Bx, By, Bz = basis if basis is not None else basis_matrices(ffd)
    return np.einsum(
        "pabc,xa,yb,zc->pxyz", ffd.displacements, Bx, By, Bz, optimize=True
    )


def scatter_to_lattice(ffd: FfdTransform, voxel_grad: np.ndarray, basis=None) -> np.ndarray:
    """Adjoint of dense_displacement: accumulate per-voxel 3-vectors onto the
    lattice with the same weights (shape like displacements)."""
    Bx, By, Bz = basis if basis is not None else basis_matrices(ffd)
    return np.einsum(
        "pxyz,xa,yb,zc->pabc", voxel_grad, Bx, By, Bz, optimize=True
    )


def displacement_at_points(ffd: FfdTransform, pts_mm: np.ndarray) -> np.ndarray:
    """Displacement (3, N) at arbitrary physical points (3, N)."""
    phi = ffd.displacements
    idx = []
    wts = []
    for a in range(3):
        ncp = ffd.lattice_dims[a]
        s = (pts_mm[a] - ffd.lattice_origin[a]) / ffd.control_spacing[a]
        cell = np.clip(np.floor(s).astype(np.intp), 1, ncp - 3)
        idx.append(cell)
        wts.append(bspline_weights(s - cell))
    out = np.zeros((3, pts_mm.shape[1]))
    for l in range(4):
        for m in range(4):
            for n in range(4):
                w = wts[0][l] * wts[1][m] * wts[2][n]
                out += w * phi[:, idx[0] - 1 + l, idx[1] - 1 + m, idx[2] - 1 + n]
    return out


def _subdivide_axis(phi: np.ndarray, axis: int) -> np.ndarray:
    """Uniform cubic B-spline knot insertion along one lattice axis.

    Input is zero-padded by 2 controls per side first, so the returned
    sequence is exact wherever the original field was defined.
    """
    phi = np.moveaxis(phi, axis, -1)
    pad = [(0, 0)] * phi.ndim
    pad[-1] = (2, 2)
    q = np.pad(phi, pad)
    p = q.shape[-1]
    out = np.zeros(q.shape[:-1] + (2 * p - 1,))
    # even entries sit on old control positions, odd entries between them
    out[..., 2 : 2 * p - 2 : 2] = (q[..., :-2] + 6.0 * q[..., 1:-1] + q[..., 2:]) / 8.0
    out[..., 1::2] = (q[..., :-1] + q[..., 1:]) / 2.0
    return np.moveaxis(out, -1, axis)


def subdivide(ffd: FfdTransform) -> FfdTransform:
    """Halve the control spacing without changing the displacement field."""
    new_spacing = tuple(s / 2.0 for s in ffd.control_spacing)
    fine = lattice_for_domain(ffd.domain, new_spacing)
    phi = ffd.displacements
    for axis in range(3):
        phi = _subdivide_axis(phi, axis + 1)
    # padded-by-2 subdivided axis starts at lattice_origin - 2*delta with step
    # delta/2; the fine lattice origin sits at lattice_origin + delta/2
    slices = [slice(None)]
    for a in range(3):
        start = 5
        slices.append(slice(start, start + fine.lattice_dims[a]))
    fine.displacements[...] = phi[tuple(slices)]
    fine.init_affine = ffd.init_affine
    return fine


def resample_lattice(ffd: FfdTransform, control_spacing) -> FfdTransform:
    """Re-initialise on a new lattice by sampling the current field at the new
    control points (approximate; use subdivide for exact halving)."""
    fine = lattice_for_domain(ffd.domain, control_spacing)
    ncx, ncy, ncz = fine.lattice_dims
    ax = [
        fine.lattice_origin[a] + np.arange(fine.lattice_dims[a]) * fine.control_spacing[a]
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)])
    u = displacement_at_points(ffd, pts)
    fine.displacements[...] = u.reshape(3, ncx, ncy, ncz)
    fine.init_affine = ffd.init_affine
    return fine


# ---------------------------------------------------------------------------
# serialisation: JSON lattice header + f32 displacement payload

def write_ffd(ffd: FfdTransform, path) -> None:
    header = {
        "magic": "MGRID",
        "version": 1,
        "kind": "ffd",
        "control_spacing": list(ffd.control_spacing),
        "lattice_origin": list(ffd.lattice_origin),
        "lattice_dims": list(ffd.lattice_dims),
        "domain_dims": list(ffd.domain.dims),
        "domain_spacing": list(ffd.domain.spacing),
        "domain_origin": list(ffd.domain.origin),
        "init_affine": ffd.init_affine.to_flat() if ffd.init_affine else None,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(ffd.displacements.astype("<f4").tobytes())


def read_ffd(path) -> FfdTransform:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GridFormatError(f"ffd header is not valid JSON: {exc}") from exc
        if header.get("kind") != "ffd":
            raise GridFormatError(f"not an ffd file: kind={header.get('kind')!r}")
        dims = tuple(int(d) for d in header["lattice_dims"])
        count = 3 * dims[0] * dims[1] * dims[2]
        payload = fh.read()
    if len(payload) != count * 4:
        raise GridFormatError(
            f"ffd payload has {len(payload)} bytes, expected {count * 4}"
        )
    disp = np.frombuffer(payload, dtype="<f4").reshape(3, *dims)
    init = header.get("init_affine")
    return FfdTransform(
        tuple(header["control_spacing"]),
        tuple(header["lattice_origin"]),
        disp.astype(np.float64),
        DomainGeometry(
            tuple(int(d) for d in header["domain_dims"]),
            tuple(float(s) for s in header["domain_spacing"]),
            tuple(float(o) for o in header["domain_origin"]),
        ),
        AffineTransform.from_flat(init) if init else None,
    )
