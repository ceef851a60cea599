"""Landmark extraction, 12-DOF affine estimation from landmark pairs, and
point-to-point error statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volgrid import LANDMARK_NAMES, LabelGrid, LandmarkSet, voxel_to_world


class IncompleteLandmarksError(ValueError):
    """One or more landmark classes have no voxels."""

    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"missing landmark classes: {', '.join(missing)}")


class RankDeficiencyError(ValueError):
    """Source landmarks do not span 3D; the affine fit is not well-posed."""


@dataclass
class AffineTransform:
    """Physical-space affine map p -> matrix @ p + translation."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.matrix.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("affine needs a 3x3 matrix and a 3-vector")
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.translation))):
            raise ValueError("affine entries must be finite")

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform points given as (3, N) or (N, 3) or (3,)."""
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            return self.matrix @ pts + self.translation
        if pts.shape[0] == 3 and (pts.ndim == 2 and pts.shape[1] != 3):
            return self.matrix @ pts + self.translation[:, None]
        return (self.matrix @ pts.T + self.translation[:, None]).T

    def inverse(self) -> "AffineTransform":
        det = np.linalg.det(self.matrix)
        if abs(det) < 1e-12:
            raise ValueError(f"affine is singular (det={det:g})")
        minv = np.linalg.inv(self.matrix)
        return AffineTransform(minv, -minv @ self.translation)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """self after inner: x -> self(inner(x))."""
        return AffineTransform(
            self.matrix @ inner.matrix,
            self.matrix @ inner.translation + self.translation,
        )

    def to_flat(self) -> list[float]:
        """12 numbers, matrix row-major then translation."""
        return [*self.matrix.reshape(-1).tolist(), *self.translation.tolist()]

    @staticmethod
    def from_flat(values) -> "AffineTransform":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError("expected 12 numbers")
        return AffineTransform(values[:9].reshape(3, 3), values[9:])


@dataclass
class AffineFit:
    transform: AffineTransform
    residuals: np.ndarray  # per-landmark distance, canonical name order
    rms: float


def centroid_landmarks(l: LabelGrid) -> LandmarkSet:
    """Landmark positions as unweighted centroids of each class's voxels.

    Classes 1..6 map to the canonical landmark names; a class with no voxels
    raises IncompleteLandmarksError naming the absent landmarks.
    """
    missing = []
    positions = np.zeros((6, 3))
    for k, name in enumerate(LANDMARK_NAMES, start=1):
        idx = np.argwhere(l.labels == k)
        if idx.size == 0:
            missing.append(name)
            continue
        positions[k - 1] = voxel_to_world(l, idx).mean(axis=0)
    if missing:
        raise IncompleteLandmarksError(missing)
    return LandmarkSet.from_positions(positions)


def fit_affine_12dof(src: LandmarkSet, dst: LandmarkSet) -> AffineFit:
    """Least-squares affine (12 degrees of freedom) mapping src points onto
    dst points, solved by the normal equations.

    The problem is convex, so an affine-consistent pair is recovered exactly.
    Coplanar or otherwise degenerate sources raise RankDeficiencyError rather
    than silently pseudo-solving.
    """
    s = src.positions()
    d = dst.positions()
    centred = s - s.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[2] < 1e-8 * max(sv[0], 1.0):
        raise RankDeficiencyError(
            f"source landmarks are coplanar (singular values {sv})"
        )
    X = np.hstack([s, np.ones((s.shape[0], 1))])  # (6, 4)
    xtx = X.T @ X
    xtd = X.T @ d
    B = np.linalg.solve(xtx, xtd)  # (4, 3)
    matrix = B[:3].T
    translation = B[3]
    fitted = (matrix @ s.T + translation[:, None]).T
    residuals = np.linalg.norm(fitted - d, axis=1)
    rms = float(np.sqrt(np.mean(residuals**2)))
    return AffineFit(AffineTransform(matrix, translation), residuals, rms)


# ---------------------------------------------------------------------------
# error statistics

SD_CONVENTION = "population"


@dataclass
class LandmarkErrorReport:
    """Per-landmark point-to-point distances with cohort aggregates.

    distances maps landmark name to the list of per-subject errors (a single
    entry for a one-subject report); mean/sd use the population convention.
    """

    distances: dict[str, list[float]]
    metadata: dict = field(default_factory=lambda: {"sd_convention": SD_CONVENTION})

    def mean(self, name: str) -> float:
        return float(np.mean(self.distances[name]))

    def sd(self, name: str) -> float:
        return float(np.std(self.distances[name]))  # population (divide by n)

    def cdf(self, name: str) -> list[float]:
        return sorted(self.distances[name])

    def to_json(self) -> str:
        doc = {
            "metadata": self.metadata,
            "landmarks": {
                name: {
                    "distances_mm": self.distances[name],
                    "mean_mm": self.mean(name),
                    "sd_mm": self.sd(name),
                    "cdf_mm": self.cdf(name),
                }
                for name in LANDMARK_NAMES
            },
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def write_cdf_csv(self, name: str, path) -> None:
        """Two-column CSV (error_mm, cumulative_fraction) for curve plotting."""
        errors = self.cdf(name)
        n = len(errors)
        with open(path, "w") as fh:
            fh.write("error_mm,cumulative_fraction\n")
            for i, e in enumerate(errors, start=1):
                fh.write(f"{e},{i / n}\n")


def p2p_errors(predicted: LandmarkSet, reference: LandmarkSet) -> LandmarkErrorReport:
    """Euclidean point-to-point distance per matching landmark name."""
    dist = {
        name: [
            float(
                np.linalg.norm(
                    np.array(predicted.points[name]) - np.array(reference.points[name])
                )
            )
        ]
        for name in LANDMARK_NAMES
    }
    return LandmarkErrorReport(dist)


def reduce_reports(reports: list[LandmarkErrorReport]) -> LandmarkErrorReport:
    """Cohort reducer: concatenate per-landmark distances in a fixed order."""
    if not reports:
        raise ValueError("no reports to reduce")
    merged: dict[str, list[float]] = {name: [] for name in LANDMARK_NAMES}
    for rep in reports:
        for name in LANDMARK_NAMES:
            merged[name].extend(rep.distances[name])
    return LandmarkErrorReport(merged)
