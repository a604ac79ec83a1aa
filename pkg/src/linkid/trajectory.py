"""Identification, validation and calibration trajectories.

Rotary sense convention: ``clockwise`` means increasing joint angle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kinematics import (
    MachineTopology,
    Pose,
    SingularSystemError,
    StrokeError,
    assemble_identification_jacobian,
    check_strokes,
    condition_number,
    forward_nominal,
)

IDENTIFICATION_POSES = 807
DEFAULT_DWELL_INTERVAL_S = 0.74
SENSOR_LINEAR_RANGE_MM = 0.300


class TrajectoryError(ValueError):
    pass


class UnreachableError(TrajectoryError):
    def __init__(self, axis: str, required: float, available: tuple[float, float], a: float, c: float):
        self.axis = axis
        self.required = required
        self.available = available
        super().__init__(
            f"coincidence at a={a:g} deg, c={c:g} deg needs {axis}={required:.3f}, "
            f"available travel [{available[0]:g}, {available[1]:g}]"
        )


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "identification"  # identification | validation | calibration-grid
    n_poses: int = IDENTIFICATION_POSES
    a_range: tuple[float, float] = (0.0, 180.0)
    c_range: tuple[float, float] = (0.0, 1080.0)
    a_sense: str = "clockwise"
    c_sense: str = "clockwise"
    dwell_interval_s: float = DEFAULT_DWELL_INTERVAL_S
    cube_half_width_mm: float = 0.1
    mesh_count: int = 125
    # ceiling on the column-equilibrated condition number; None disables
    max_condition: float | None = 100.0

    @classmethod
    def identification(cls, **kw) -> TrajectorySpec:
        return cls(kind="identification", **kw)

    @classmethod
    def validation(cls, **kw) -> TrajectorySpec:
        kw.setdefault("a_sense", "counter-clockwise")
        kw.setdefault("c_range", (45.0, 765.0))
        kw.setdefault("max_condition", None)
        return cls(kind="validation", **kw)

    @classmethod
    def calibration_grid(cls, **kw) -> TrajectorySpec:
        return cls(kind="calibration-grid", **kw)


def inverse_kinematics_coincidence(
    topology: MachineTopology, a: float, c: float, k: int = 1, offset=(0.0, 0.0, 0.0)
) -> Pose:
    """Linear commands placing P_t at P_w + ``offset`` for rotary angles a, c (deg)."""
    probe = Pose(a, c, 0.0, 0.0, 0.0, k)
    g = forward_nominal(topology, probe, check=False)
    # P_t(x, z) - P_w(y) = offset, linear in (x, z, y)
    D = np.column_stack((
        topology.axis("X").direction,
        topology.axis("Z").direction,
        -np.asarray(topology.axis("Y").direction),
    ))
    rhs = g.ball_point - g.tool_point + np.asarray(offset, dtype=float)
    x, z, y = np.linalg.solve(D, rhs)
    pose = Pose(float(a), float(c), float(x), float(y), float(z), int(k))
    try:
        check_strokes(topology, pose)
    except StrokeError as exc:
        raise UnreachableError(exc.axis, exc.value, exc.limits, a, c) from exc
    return pose


def _sweep(lo_hi, sense: str, n: int) -> np.ndarray:
    lo, hi = sorted(map(float, lo_hi))
    if sense not in ("clockwise", "counter-clockwise"):
        raise TrajectoryError(f"unknown rotation sense {sense!r}")
    values = np.linspace(lo, hi, n)
    return values if sense == "clockwise" else values[::-1]


def _sweep_poses(topology: MachineTopology, spec: TrajectorySpec) -> list[Pose]:
    if spec.n_poses < 1:
        raise TrajectoryError("pose count must be positive")
    a = _sweep(spec.a_range, spec.a_sense, spec.n_poses)
    c = _sweep(spec.c_range, spec.c_sense, spec.n_poses)
    try:
        return [
            inverse_kinematics_coincidence(topology, ai, ci, k)
            for k, (ai, ci) in enumerate(zip(a, c), start=1)
        ]
    except UnreachableError as exc:
        raise TrajectoryError(f"infeasible sweep: {exc}") from exc


def trajectory_condition(topology: MachineTopology, poses: Sequence[Pose]) -> float:
    """Column-equilibrated condition number of the identification Jacobian."""
    J = assemble_identification_jacobian(topology, poses)
    try:
        return condition_number(J, equilibrate=True)
    except SingularSystemError:
        return float("inf")


def generate_identification_trajectory(spec: TrajectorySpec, topology: MachineTopology | None = None) -> list[Pose]:
    if spec.kind != "identification":
        raise TrajectoryError(f"expected an identification spec, got {spec.kind!r}")
    topology = topology or MachineTopology.default()
    poses = _sweep_poses(topology, spec)
    if spec.max_condition is not None and len(poses) >= 5:
        cond = trajectory_condition(topology, poses)
        if cond > spec.max_condition:
            raise TrajectoryError(
                f"condition number {cond:.1f} exceeds ceiling {spec.max_condition:g}"
            )
    return poses


def generate_validation_trajectory(spec: TrajectorySpec, topology: MachineTopology | None = None) -> list[Pose]:
    if spec.kind != "validation":
        raise TrajectoryError(f"expected a validation spec, got {spec.kind!r}")
    return _sweep_poses(topology or MachineTopology.default(), spec)


def generate_calibration_grid(spec: TrajectorySpec) -> np.ndarray:
    """Programmed offsets (N, 3) in mm on a regular lattice centred at 0.

    The x index varies fastest.
    """
    if spec.kind != "calibration-grid":
        raise TrajectoryError(f"expected a calibration-grid spec, got {spec.kind!r}")
    m = round(spec.mesh_count ** (1.0 / 3.0))
    if m ** 3 != spec.mesh_count or m < 2:
        raise TrajectoryError(f"mesh count {spec.mesh_count} is not a perfect cube >= 8")
    h = float(spec.cube_half_width_mm)
    if h > SENSOR_LINEAR_RANGE_MM:
        raise TrajectoryError(f"half-width {h} mm exceeds the sensor linear range")
    axis = np.linspace(-h, h, m)
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.column_stack((xx.ravel(), yy.ravel(), zz.ravel()))


def write_trajectory_csv(poses: Sequence[Pose], path, dwell_interval_s: float = DEFAULT_DWELL_INTERVAL_S) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("k", "a_deg", "c_deg", "x_mm", "y_mm", "z_mm", "t_offset_s"))
        for p in poses:
            w.writerow([p.k] + [repr(float(v)) for v in p.as_tuple()] + [repr(p.k * dwell_interval_s)])


def read_trajectory_csv(path) -> list[Pose]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        poses = []
        for line, row in enumerate(reader, start=2):
            try:
                poses.append(Pose(
                    float(row["a_deg"]), float(row["c_deg"]), float(row["x_mm"]),
                    float(row["y_mm"]), float(row["z_mm"]), int(row["k"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise TrajectoryError(f"{path}:{line}: bad trajectory row ({exc})") from exc
    return poses


def write_grid_csv(offsets, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "dx_mm", "dy_mm", "dz_mm"))
        for i, row in enumerate(np.asarray(offsets), start=1):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return np.array([[float(r["dx_mm"]), float(r["dy_mm"]), float(r["dz_mm"])] for r in reader])
