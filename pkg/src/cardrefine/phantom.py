"""Synthetic bi-ventricular phantoms.

Each phantom is two nested ellipsoidal shells (cavity inside wall) for the
left ventricle abutting a crescent right-ventricular cavity inside a thin
wall. Pose (rotation, scale, translation) and shape (semi-axes, wall
thicknesses) are randomised per seed so cohort variability exists and atlas
selection is non-trivial. The apex points toward low z (the apical end of
the stack). Six landmarks are placed analytically on the subject's shapes
and carried through the pose transform.

Intensities use distinct per-class bands, a gentle fixed shading ramp and
seeded Gaussian noise: classes stay separable by local intensity while every
landmark neighbourhood is spatially distinctive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import (
    LabelGrid,
    LandmarkSet,
    SEG_CLASS_COUNT,
    VolumeGrid,
    voxel_centers,
)

# canonical template, millimetres, LV centred at the origin. The LV cavity
# fills > 1% of a 64^3 acquisition so the 1st-99th percentile clip of the
# normaliser lands inside the cavity band instead of between cavities
# (which would merge the two blood pools into one intensity).
LV_OUTER = np.array([16.0, 16.0, 26.0])
RV_CENTRE = np.array([13.0, 0.0, -2.0])
RV_OUTER = np.array([18.5, 16.5, 19.0])

CLASS_INTENSITY = {0: 0.12, 1: 0.88, 2: 0.50, 3: 0.72, 4: 0.32}
SHADING = (0.05, 0.04, 0.05)  # per-axis ramp amplitude over the half-extent
NOISE_SD = 0.02


@dataclass
class PhantomShape:
    """Per-subject geometry: jittered semi-axes and wall thicknesses."""

    lv_outer: np.ndarray
    lv_wall: float
    rv_centre: np.ndarray
    rv_outer: np.ndarray
    rv_wall: float

    @property
    def lv_inner(self) -> np.ndarray:
        return self.lv_outer - self.lv_wall

    @property
    def rv_inner(self) -> np.ndarray:
        return self.rv_outer - self.rv_wall


@dataclass
class PhantomPose:
    rotation_deg: float
    scale: float
    translation: tuple[float, float, float]


def draw_shape(rng: np.random.Generator) -> PhantomShape:
    return PhantomShape(
        lv_outer=LV_OUTER * rng.uniform(0.93, 1.07, size=3),
        lv_wall=float(rng.uniform(3.8, 5.2)),
        rv_centre=RV_CENTRE + np.array([rng.uniform(-2.0, 2.0), 0.0, rng.uniform(-2.0, 2.0)]),
        rv_outer=RV_OUTER * rng.uniform(0.93, 1.07, size=3),
        rv_wall=float(rng.uniform(3.0, 4.5)),
    )


def draw_pose(rng: np.random.Generator) -> PhantomPose:
    return PhantomPose(
        rotation_deg=float(rng.uniform(-15.0, 15.0)),
        scale=float(rng.uniform(0.95, 1.05)),
        translation=(
            float(rng.uniform(-3.0, 3.0)),
            float(rng.uniform(-3.0, 3.0)),
            float(rng.uniform(-4.0, 4.0)),
        ),
    )


def _ellipsoid(pts, centre, radii) -> np.ndarray:
    q = np.zeros(pts.shape[1])
    for a in range(3):
        q += ((pts[a] - centre[a]) / radii[a]) ** 2
    return q <= 1.0


def _rv_insert_angle(shape: PhantomShape) -> float:
    """Polar angle (radians, y > 0) where the LV outer surface meets the RV
    outer surface in the z = 0 plane, found by bisection."""
    rhs = 1.0 - (shape.rv_centre[2] / shape.rv_outer[2]) ** 2

    def f(phi):
        x = shape.lv_outer[0] * np.cos(phi)
        y = shape.lv_outer[1] * np.sin(phi)
        return (
            ((x - shape.rv_centre[0]) / shape.rv_outer[0]) ** 2
            + (y / shape.rv_outer[1]) ** 2
            - rhs
        )

    lo, hi = 0.0, np.pi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _landmarks_for(shape: PhantomShape) -> np.ndarray:
    """(6, 3) canonical positions in the fixed landmark-name order."""
    phi = _rv_insert_angle(shape)
    insert_1 = (shape.lv_outer[0] * np.cos(phi), shape.lv_outer[1] * np.sin(phi), 0.0)
    insert_2 = (shape.lv_outer[0] * np.cos(phi), -shape.lv_outer[1] * np.sin(phi), 0.0)
    rv_lateral = (
        shape.rv_centre[0] + shape.rv_outer[0],
        shape.rv_centre[1],
        shape.rv_centre[2],
    )
    lv_lateral = (-shape.lv_outer[0], 0.0, 0.0)
    apex = (0.0, 0.0, -shape.lv_outer[2])
    mitral = (0.0, 0.0, shape.lv_inner[2])
    return np.array([insert_1, insert_2, rv_lateral, lv_lateral, apex, mitral])


def generate_phantom(
    seed: int,
    dims: tuple[int, int, int] = (64, 64, 64),
    spacing: tuple[float, float, float] = (1.25, 1.25, 2.0),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> tuple[VolumeGrid, LabelGrid, LandmarkSet]:
    rng = np.random.default_rng(seed)
    shape = draw_shape(rng)
    pose = draw_pose(rng)
    geom = VolumeGrid(np.zeros(dims, np.float32), spacing, origin)
    centre = np.array(origin) + (np.array(dims) - 1) / 2.0 * np.array(spacing)

    theta = np.deg2rad(pose.rotation_deg)
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = np.array(pose.translation)

    # map voxel world coordinates back into the canonical frame
    world = voxel_centers(geom)
    canonical = (R.T @ (world - centre[:, None] - t[:, None])) / pose.scale

    zero = np.zeros(3)
    lv_outer = _ellipsoid(canonical, zero, shape.lv_outer)
    lv_inner = _ellipsoid(canonical, zero, shape.lv_inner)
    rv_outer = _ellipsoid(canonical, shape.rv_centre, shape.rv_outer)
    rv_inner = _ellipsoid(canonical, shape.rv_centre, shape.rv_inner)

    labels = np.zeros(world.shape[1], dtype=np.uint8)
    labels[rv_outer & ~rv_inner & ~lv_outer] = 4
    labels[rv_inner & ~lv_outer] = 3
    labels[lv_outer & ~lv_inner] = 2
    labels[lv_inner] = 1

    intensity = np.empty(world.shape[1])
    for k, level in CLASS_INTENSITY.items():
        intensity[labels == k] = level
    half = (np.array(dims) - 1) / 2.0 * np.array(spacing)
    for a in range(3):
        intensity += SHADING[a] * (world[a] - centre[a]) / half[a]
    intensity += rng.normal(0.0, NOISE_SD, size=intensity.shape)
    intensity = np.clip(intensity, 0.0, 1.0)

    lm_world = (pose.scale * (R @ _landmarks_for(shape).T) + centre[:, None] + t[:, None]).T
    return (
        VolumeGrid(intensity.reshape(dims).astype(np.float32), spacing, origin),
        LabelGrid(labels.reshape(dims), spacing, origin, class_count=SEG_CLASS_COUNT),
        LandmarkSet.from_positions(lm_world),
    )


def cohort_seeds(seed: int, count: int) -> list[int]:
    """Stable per-subject seeds derived from a master seed."""
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]
