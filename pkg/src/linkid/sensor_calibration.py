"""Sensor-frame to machine-frame transform from a calibration grid."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import VolumetricError

GAIN_FLAG = 0.01
PROJECTION_FLAG = 0.05
OFFSET_FLAG_UM = 10.0


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class DisplacementSet:
    """4xN homogeneous matrix of displacements (mm) with a row of ones."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != 4:
            raise CalibrationError(f"displacement set must be 4xN, got {m.shape}")
        if not np.all(m[3] == 1.0):
            raise CalibrationError("bottom row of a displacement set must be all ones")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_points(cls, points) -> DisplacementSet:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if p.shape[1] != 3:
            raise CalibrationError(f"points must be (N, 3), got {p.shape}")
        return cls(np.vstack((p.T, np.ones(len(p)))))

    @property
    def points(self) -> np.ndarray:
        return self.matrix[:3].T

    def __len__(self) -> int:
        return self.matrix.shape[1]


def _as_set(x) -> DisplacementSet:
    if isinstance(x, DisplacementSet):
        return x
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[0] == 4 and x.shape[1] != 3:
        return DisplacementSet(x)
    return DisplacementSet.from_points(x)


@dataclass(frozen=True)
class FrameTransform:
    matrix: np.ndarray
    residuals: np.ndarray | None = field(default=None, compare=False)  # (N, 3) mm

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise CalibrationError(f"transform must be 4x4, got {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> FrameTransform:
        return cls(np.eye(4))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def column(self, i: int) -> np.ndarray:
        return self.matrix[:3, i]

    def inverse(self) -> FrameTransform:
        return FrameTransform(np.linalg.inv(self.matrix))

    def residual_std_um(self) -> np.ndarray | None:
        """Per-axis standard deviation of fit residuals, um."""
        if self.residuals is None:
            return None
        return np.std(self.residuals, axis=0, ddof=1) * 1e3

    def to_dict(self) -> dict:
        return {
            "matrix": [float(v) for v in self.matrix.ravel()],
            "quality": transform_quality(self).to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FrameTransform:
        vals = doc["matrix"]
        if len(vals) != 16:
            raise CalibrationError(f"transform JSON needs 16 numbers, got {len(vals)}")
        return cls(np.array(vals, dtype=float).reshape(4, 4))


def fit_frame_transform(programmed, measured) -> FrameTransform:
    """Least-squares M with M @ measured ~= programmed (pseudo-inverse fit)."""
    dt, ds = _as_set(programmed), _as_set(measured)
    if len(dt) != len(ds):
        raise CalibrationError(f"column counts differ: {len(dt)} programmed vs {len(ds)} measured")
    s = np.linalg.svd(ds.matrix, compute_uv=False)
    rank = int(np.sum(s > 1e-12 * s[0]))
    if rank < 4:
        raise CalibrationError(
            f"measured set spans rank {rank} < 4 (points are "
            f"{['coincident', 'collinear', 'coplanar'][max(rank - 1, 0)]}); "
            "the transform is not determined"
        )
    M = dt.matrix @ np.linalg.pinv(ds.matrix)
    M[3] = (0.0, 0.0, 0.0, 1.0)
    residuals = (dt.matrix - M @ ds.matrix)[:3].T
    return FrameTransform(M, residuals)


@dataclass(frozen=True)
class TransformQuality:
    norms: tuple[float, float, float]
    projections: tuple[float, float, float]  # e1.e2, e1.e3, e2.e3
    offset_um: tuple[float, float, float]
    gain_flag: bool
    projection_flag: bool
    offset_flag: bool

    @property
    def flagged(self) -> bool:
        return self.gain_flag or self.projection_flag or self.offset_flag

    def to_dict(self) -> dict:
        return {
            "norms": list(self.norms),
            "projections": {"e1.e2": self.projections[0], "e1.e3": self.projections[1], "e2.e3": self.projections[2]},
            "offset_um": list(self.offset_um),
            "flags": {
                "gain": self.gain_flag,
                "projection": self.projection_flag,
                "offset": self.offset_flag,
            },
        }


def transform_quality(M: FrameTransform) -> TransformQuality:
    e = [M.column(i) for i in range(3)]
    norms = tuple(float(np.linalg.norm(v)) for v in e)
    proj = (float(e[0] @ e[1]), float(e[0] @ e[2]), float(e[1] @ e[2]))
    d_um = tuple(float(v) * 1e3 for v in M.offset)
    return TransformQuality(
        norms,
        proj,
        d_um,
        gain_flag=any(abs(n - 1.0) > GAIN_FLAG for n in norms),
        projection_flag=any(abs(p) > PROJECTION_FLAG for p in proj),
        offset_flag=any(abs(d) > OFFSET_FLAG_UM for d in d_um),
    )


def apply_transform(M: FrameTransform, reading) -> VolumetricError:
    """Sensor reading (3-vector or (n, 3), mm) to machine-frame error."""
    r = np.asarray(reading, dtype=float)
    out = r @ M.linear.T + M.offset
    return VolumetricError(out, "machine")


def synthetic_instrument(
    norms=(0.998, 0.996, 0.996),
    projections=(-0.030, -0.029, -0.021),
    offset_um=(4.0, -6.0, 7.5),
    rotation=None,
) -> FrameTransform:
    """Affine instrument with prescribed column norms and pairwise projections."""
    n = np.asarray(norms, dtype=float)
    p12, p13, p23 = projections
    gram = np.array([
        [n[0] ** 2, p12, p13],
        [p12, n[1] ** 2, p23],
        [p13, p23, n[2] ** 2],
    ])
    E = np.linalg.cholesky(gram).T  # E.T @ E == gram
    if rotation is not None:
        E = np.asarray(rotation, dtype=float) @ E
    M = np.eye(4)
    M[:3, :3] = E
    M[:3, 3] = np.asarray(offset_um, dtype=float) * 1e-3
    return FrameTransform(M)


def save_transform(M: FrameTransform, path) -> None:
    Path(path).write_text(json.dumps(M.to_dict(), indent=2))


def load_transform(path) -> FrameTransform:
    return FrameTransform.from_dict(json.loads(Path(path).read_text()))


def write_calibration_pairs_csv(programmed, measured, path) -> None:
    """Programmed offsets in mm, measured channels in um."""
    p = _as_set(programmed).points
    m = _as_set(measured).points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "prog_x_mm", "prog_y_mm", "prog_z_mm", "ch1_um", "ch2_um", "ch3_um"))
        for i, (a, b) in enumerate(zip(p, m), start=1):
            w.writerow([i] + [repr(float(v)) for v in a] + [repr(float(v) * 1e3) for v in b])


def read_calibration_pairs_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        p = np.array([[float(r[f"prog_{a}_mm"]) for a in "xyz"] for r in rows])
        m = np.array([[float(r[f"ch{i}_um"]) for i in (1, 2, 3)] for r in rows]) * 1e-3
    except (KeyError, ValueError) as exc:
        raise CalibrationError(f"{path}: malformed calibration CSV ({exc})") from exc
    return p, m
