"""Intensity normalisation, geometric standardisation, augmentation and
low-resolution acquisition artefact simulation.

All randomised operations are pure functions of (inputs, seed): the RNG is
constructed locally from the explicit seed, never from global state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volgrid import (
    LabelGrid,
    LandmarkSet,
    VolumeGrid,
    sample_nearest,
    sample_trilinear,
    voxel_centers,
    world_to_voxel,
)


@dataclass
class LrSimParams:
    """Low-resolution acquisition artefact settings.

    target_slice_thickness must exceed the source slice thickness;
    apical_truncation_slices drops that many slices from the apical (low-z)
    end of the stack.
    """

    target_slice_thickness: float = 10.0
    max_shift: float = 5.0
    apical_truncation_slices: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        if self.apical_truncation_slices < 0:
            raise ValueError("apical_truncation_slices must be >= 0")


@dataclass
class AugmentParams:
    """Random similarity augmentation ranges (one draw per call)."""

    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_max: float = 15.0
    translation_max: float = 5.0
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_range", "intensity_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must have lo <= hi, got ({lo}, {hi})")


@dataclass
class ShiftLog:
    """Applied per-slice in-plane translations (mm), in output slice order."""

    shifts_mm: list[tuple[float, float]]

    def to_json(self) -> str:
        return json.dumps([[dx, dy] for dx, dy in self.shifts_mm])

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @staticmethod
    def from_json(text: str) -> "ShiftLog":
        return ShiftLog([(float(dx), float(dy)) for dx, dy in json.loads(text)])


def normalize_intensity(v: VolumeGrid) -> VolumeGrid:
    """Clip to the [1st, 99th] percentile range and scale to [0, 1].

    A constant input maps to all zeros.
    """
    if v.voxels.size == 0:
        raise ValueError("volume is empty")
    lo, hi = np.percentile(v.voxels, [1.0, 99.0])
    if hi <= lo:
        return VolumeGrid(np.zeros(v.dims, np.float32), v.spacing, v.origin)
    out = np.clip(v.voxels, lo, hi)
    out = (out - lo) / (hi - lo)
    return VolumeGrid(out.astype(np.float32), v.spacing, v.origin)


def pad_crop_to(g: VolumeGrid | LabelGrid, target_dims) -> VolumeGrid | LabelGrid:
    """Centre the grid in a field of target_dims voxels.

    Pads with 0 (volumes) or background class 0 (labels); the origin is
    adjusted so retained voxels keep their physical positions.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise ValueError(f"target_dims must be >= 1, got {target_dims}")
    is_labels = isinstance(g, LabelGrid)
    src = g.labels if is_labels else g.voxels
    out = np.zeros(target_dims, dtype=src.dtype)
    src_slices = []
    dst_slices = []
    shifts = []
    for n_in, n_out in zip(src.shape, target_dims):
        shift = (n_in - n_out) // 2  # input index = output index + shift
        shifts.append(shift)
        src_lo = max(shift, 0)
        dst_lo = max(-shift, 0)
        span = min(n_in - src_lo, n_out - dst_lo)
        src_slices.append(slice(src_lo, src_lo + span))
        dst_slices.append(slice(dst_lo, dst_lo + span))
    out[tuple(dst_slices)] = src[tuple(src_slices)]
    origin = tuple(o + shift * s for o, shift, s in zip(g.origin, shifts, g.spacing))
    if is_labels:
        return LabelGrid(out, g.spacing, origin, class_count=g.class_count)
    return VolumeGrid(out, g.spacing, origin)


def _decimate_z(hr_vol: VolumeGrid, hr_lab: LabelGrid, target_thickness: float):
    """Through-plane decimation: boxcar averaging for the volume, centre
    slice for labels. Falls back to resampling for non-integer factors."""
    sz = hr_vol.spacing[2]
    factor = target_thickness / sz
    nz = hr_vol.dims[2]
    new_spacing = (hr_vol.spacing[0], hr_vol.spacing[1], float(target_thickness))
    if abs(factor - round(factor)) < 1e-6:
        f = int(round(factor))
        n_out = nz // f
        if n_out < 1:
            raise ValueError("volume too thin for target slice thickness")
        vox = hr_vol.voxels[:, :, : n_out * f]
        vol_out = vox.reshape(vox.shape[0], vox.shape[1], n_out, f).mean(
            axis=3, dtype=np.float64
        )
        lab_out = hr_lab.labels[:, :, np.arange(n_out) * f + f // 2]
        origin = (
            hr_vol.origin[0],
            hr_vol.origin[1],
            hr_vol.origin[2] + (f - 1) / 2.0 * sz,
        )
        return (
            VolumeGrid(vol_out.astype(np.float32), new_spacing, origin),
            LabelGrid(lab_out, new_spacing, origin, class_count=hr_lab.class_count),
        )
    # non-integer factor: plain through-plane resampling
    n_out = max(int(np.floor((nz - 1) * sz / target_thickness)) + 1, 1)
    new_dims = (hr_vol.dims[0], hr_vol.dims[1], n_out)
    geom = VolumeGrid(np.zeros(new_dims, np.float32), new_spacing, hr_vol.origin)
    pts = world_to_voxel(hr_vol, voxel_centers(geom))
    vol_out = sample_trilinear(hr_vol.voxels, pts).reshape(new_dims)
    lab_out = sample_nearest(hr_lab.labels, pts).reshape(new_dims)
    return (
        VolumeGrid(vol_out.astype(np.float32), new_spacing, hr_vol.origin),
        LabelGrid(lab_out, new_spacing, hr_vol.origin, class_count=hr_lab.class_count),
    )


def _shift_slice(plane: np.ndarray, kx: int, ky: int, fill) -> np.ndarray:
    """Integer in-plane shift of one (nx, ny) plane; vacated voxels take fill."""
    out = np.full_like(plane, fill)
    nx, ny = plane.shape
    sx_lo, sx_hi = max(-kx, 0), min(nx - kx, nx)
    sy_lo, sy_hi = max(-ky, 0), min(ny - ky, ny)
    if sx_lo < sx_hi and sy_lo < sy_hi:
        out[sx_lo + kx : sx_hi + kx, sy_lo + ky : sy_hi + ky] = plane[
            sx_lo:sx_hi, sy_lo:sy_hi
        ]
    return out


def simulate_lr(
    hr_vol: VolumeGrid, hr_lab: LabelGrid, p: LrSimParams
) -> tuple[VolumeGrid, LabelGrid, ShiftLog]:
    """Simulate a low-resolution acquisition from a high-resolution pair.

    1. decimate through-plane to p.target_slice_thickness
    2. translate every output slice in-plane by an independent uniform draw
       in [-max_shift, +max_shift] per axis (rounded to whole voxels and
       applied identically to volume and labels)
    3. drop p.apical_truncation_slices slices from the apical (low-z) end
    """
    if not hr_vol.same_geometry(hr_lab):
        raise ValueError("volume/labels geometry mismatch")
    if p.target_slice_thickness <= hr_vol.spacing[2]:
        raise ValueError(
            f"target_slice_thickness {p.target_slice_thickness} must exceed "
            f"source slice thickness {hr_vol.spacing[2]}"
        )
    vol, lab = _decimate_z(hr_vol, hr_lab, p.target_slice_thickness)
    rng = np.random.default_rng(p.seed)
    sx, sy = vol.spacing[0], vol.spacing[1]
    nz = vol.dims[2]
    vox = vol.voxels.copy()
    labs = lab.labels.copy()
    shifts: list[tuple[float, float]] = []
    for k in range(nz):
        dx, dy = rng.uniform(-p.max_shift, p.max_shift, size=2)
        kx = int(np.rint(dx / sx))
        ky = int(np.rint(dy / sy))
        shifts.append((kx * sx, ky * sy))
        if kx or ky:
            vox[:, :, k] = _shift_slice(vox[:, :, k], kx, ky, 0.0)
            labs[:, :, k] = _shift_slice(labs[:, :, k], kx, ky, 0)
    t = p.apical_truncation_slices
    if t >= nz:
        raise ValueError(f"truncation of {t} slices removes the whole {nz}-slice stack")
    if t:
        vox = vox[:, :, t:]
        labs = labs[:, :, t:]
        shifts = shifts[t:]
    origin = (
        vol.origin[0],
        vol.origin[1],
        vol.origin[2] + t * p.target_slice_thickness,
    )
    return (
        VolumeGrid(vox, vol.spacing, origin),
        LabelGrid(labs, vol.spacing, origin, class_count=lab.class_count),
        ShiftLog(shifts),
    )


def shift_landmarks_for_lr(
    lm: LandmarkSet, lr_geom, shift_log: ShiftLog
) -> LandmarkSet:
    """Carry landmark positions into the simulated LR frame.

    Each landmark inherits the in-plane shift of the LR slice nearest to its
    z position. Landmarks whose slice was truncated away clamp to the nearest
    surviving slice's shift.
    """
    nz = lr_geom.dims[2]
    sz = lr_geom.spacing[2]
    oz = lr_geom.origin[2]
    pos = lm.positions()
    out = pos.copy()
    for i in range(pos.shape[0]):
        k = int(np.clip(np.rint((pos[i, 2] - oz) / sz), 0, nz - 1))
        dx, dy = shift_log.shifts_mm[k]
        out[i, 0] += dx
        out[i, 1] += dy
    return LandmarkSet.from_positions(out)


# ---------------------------------------------------------------------------
# similarity-transform augmentation

_AXES = {"x": 0, "y": 1, "z": 2}


def _rotation_matrix(axis: str, angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    raise ValueError(f"unknown axis {axis!r}")


def apply_similarity(
    v: VolumeGrid,
    l: LabelGrid,
    lm: LandmarkSet,
    scale: float,
    axis: str,
    angle_deg: float,
    translation_mm: tuple[float, float],
    intensity_scale: float = 1.0,
) -> tuple[VolumeGrid, LabelGrid, LandmarkSet]:
    """Deterministic core of augment_affine: one similarity transform about
    the central voxel (isotropic scale, single-axis rotation, in-plane
    translation), applied forward to landmarks and by backward warping to the
    grids (volume trilinear, labels nearest)."""
    if not v.same_geometry(l):
        raise ValueError("volume/labels geometry mismatch")
    centre = np.array(v.origin) + (np.array(v.dims) - 1) / 2.0 * np.array(v.spacing)
    M = scale * _rotation_matrix(axis, angle_deg)
    t = np.array([translation_mm[0], translation_mm[1], 0.0])
    # forward map: p' = M (p - c) + c + t
    Minv = np.linalg.inv(M)

    pts_world = voxel_centers(v)  # (3, N)
    src_world = Minv @ (pts_world - centre[:, None] - t[:, None]) + centre[:, None]
    src_vox = world_to_voxel(v, src_world)
    vox = sample_trilinear(v.voxels, src_vox).reshape(v.dims)
    vox = np.clip(vox * intensity_scale, 0.0, 1.0)
    labs = sample_nearest(l.labels, src_vox).reshape(l.dims)

    pos = lm.positions()
    new_pos = (M @ (pos.T - centre[:, None]) + centre[:, None] + t[:, None]).T
    return (
        VolumeGrid(vox.astype(np.float32), v.spacing, v.origin),
        LabelGrid(labs, l.spacing, l.origin, class_count=l.class_count),
        LandmarkSet.from_positions(new_pos),
    )


def augment_affine(
    v: VolumeGrid, l: LabelGrid, lm: LandmarkSet, p: AugmentParams
) -> tuple[VolumeGrid, LabelGrid, LandmarkSet]:
    """One random similarity augmentation (no shearing, no flips).

    Draw order is fixed: scale, axis, angle, translation x/y, intensity.
    """
    rng = np.random.default_rng(p.seed)
    scale = rng.uniform(*p.scale_range)
    axis = ("x", "y", "z")[rng.integers(0, 3)]
    angle = rng.uniform(-p.rotation_max, p.rotation_max)
    tx = rng.uniform(-p.translation_max, p.translation_max)
    ty = rng.uniform(-p.translation_max, p.translation_max)
    gain = rng.uniform(*p.intensity_scale_range)
    return apply_similarity(v, l, lm, scale, axis, angle, (tx, ty), gain)
