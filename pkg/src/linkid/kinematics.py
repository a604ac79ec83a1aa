"""Nominal and perturbed kinematics of a WCAYFXZT five-axis machine.

The machine is described as a product of exponentials: every axis direction,
anchor point and the two end points (master ball, sensing-head centre) are
given in the machine frame with all joints at zero.  The workpiece branch
runs F -> Y -> A -> C -> W and the tool branch F -> X -> Z -> T.

Link and setup errors are small displacements inserted in the chain:

* a linear-axis squareness error rotates the axis direction,
* a rotary-axis tilt rotates the joint (and everything it carries) about the
  axis anchor before the joint motion,
* a rotary-axis offset translates the joint before the joint motion,
* setup errors offset the ball (in the table frame) or the sensing head.

Lengths are in mm, angles in rad, joint commands in mm / deg.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHAIN_ORDER = ("W", "C", "A", "Y", "F", "X", "Z", "T")
WORKPIECE_BRANCH = ("Y", "A", "C")
TOOL_BRANCH = ("X", "Z")
JOINT_OF_AXIS = {"X": "x", "Y": "y", "Z": "z", "A": "a", "C": "c"}

PARAMETER_NAMES = (
    "dgamma_Y", "dalpha_Z", "dbeta_Z", "dbeta_A", "dgamma_A", "dalpha_C",
    "dbeta_C", "dy_C", "dx_T", "dy_T", "dz_T", "dx_W", "dy_W", "dz_W",
)
N_PARAMS = len(PARAMETER_NAMES)
ANGULAR = np.array([True] * 7 + [False] * 7)
LINK_ERRORS = PARAMETER_NAMES[:8]

# internal (rad, mm) -> report (um/m, um)
REPORT_SCALE = np.where(ANGULAR, 1e6, 1e3)
REPORT_UNITS = tuple("um/m" if a else "um" for a in ANGULAR)

# Identified values of the tested machine, report units.
TABLE1_REPORT = np.array([
    -8.8, 138.3, -35.7, -23.0, 6.9, -34.4, -9.9, -2.9,
    -1.1, -14.7, -21.5, 1.5, -25.7, 18.8,
])


class KinematicsError(ValueError):
    pass


class StrokeError(KinematicsError):
    """A joint command falls outside its stroke."""

    def __init__(self, axis: str, value: float, limits: tuple[float, float]):
        self.axis = axis
        self.value = value
        self.limits = limits
        super().__init__(
            f"axis {axis} command {value:.6g} outside stroke "
            f"[{limits[0]:.6g}, {limits[1]:.6g}]"
        )


class UnderdeterminedError(KinematicsError):
    pass


class SingularSystemError(KinematicsError):
    def __init__(self, rank: int, n_cols: int, null_direction=None):
        self.rank = rank
        self.n_cols = n_cols
        self.null_direction = null_direction
        msg = f"singular system: rank {rank} < {n_cols} columns"
        if null_direction is not None:
            top = np.argsort(-np.abs(null_direction))[:3]
            names = ", ".join(
                f"{PARAMETER_NAMES[i]}={null_direction[i]:+.3f}" for i in top
            )
            msg += f"; near-null direction dominated by {names}"
        super().__init__(msg)


def to_report_units(p) -> np.ndarray:
    return np.asarray(p, dtype=float) * REPORT_SCALE


def from_report_units(p) -> np.ndarray:
    return np.asarray(p, dtype=float) / REPORT_SCALE


def table1_parameters() -> np.ndarray:
    """Table of identified link and setup errors, internal units."""
    return from_report_units(TABLE1_REPORT)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit ``axis``."""
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta == 0.0:
        return np.eye(3)
    return rotation(w / theta, theta)


def homogeneous(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


@dataclass(frozen=True)
class Axis:
    name: str
    kind: str  # rotary | linear | fixed
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    location: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stroke: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("rotary", "linear", "fixed"):
            raise KinematicsError(f"axis {self.name}: unknown kind {self.kind!r}")
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-12:
            raise KinematicsError(f"axis {self.name}: direction not unit (|d|={n!r})")


@dataclass(frozen=True)
class ErrorDefinition:
    """Where a parameter enters the chain and along which unit vector."""

    name: str
    axis: str
    kind: str  # direction | tilt | offset | setup
    vector: tuple[float, float, float]


def _default_error_definitions() -> tuple[ErrorDefinition, ...]:
    ex, ey, ez = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    return (
        ErrorDefinition("dgamma_Y", "Y", "direction", ez),
        ErrorDefinition("dalpha_Z", "Z", "direction", ex),
        ErrorDefinition("dbeta_Z", "Z", "direction", ey),
        ErrorDefinition("dbeta_A", "A", "tilt", ey),
        ErrorDefinition("dgamma_A", "A", "tilt", ez),
        ErrorDefinition("dalpha_C", "C", "tilt", ex),
        ErrorDefinition("dbeta_C", "C", "tilt", ey),
        ErrorDefinition("dy_C", "C", "offset", ey),
        ErrorDefinition("dx_T", "T", "setup", ex),
        ErrorDefinition("dy_T", "T", "setup", ey),
        ErrorDefinition("dz_T", "T", "setup", ez),
        ErrorDefinition("dx_W", "W", "setup", ex),
        ErrorDefinition("dy_W", "W", "setup", ey),
        ErrorDefinition("dz_W", "W", "setup", ez),
    )


A_TILT_DEG = 45.0
# Tilted in the x-z plane: with a y-z tilt the C offset along y is not
# separable from the setup errors.
DEFAULT_A_DIRECTION = (
    math.sin(math.radians(A_TILT_DEG)), 0.0, math.cos(math.radians(A_TILT_DEG))
)


@dataclass(frozen=True)
class MachineTopology:
    """Serial two-branch chain W-C-A-Y-F-X-Z-T with nominal geometry.

    ``axes`` is ordered exactly as ``CHAIN_ORDER``.  The location of W is the
    master-ball centre and the location of T the sensing-head centre, both in
    the machine frame with every joint at zero.
    """

    axes: tuple[Axis, ...]
    errors: tuple[ErrorDefinition, ...] = field(default=())

    def __post_init__(self):
        names = tuple(ax.name for ax in self.axes)
        if names != CHAIN_ORDER:
            raise KinematicsError(f"chain order must be {CHAIN_ORDER}, got {names}")
        if not self.errors:
            object.__setattr__(self, "errors", _default_error_definitions())
        if tuple(e.name for e in self.errors) != PARAMETER_NAMES:
            raise KinematicsError("error definitions must follow the parameter order")

    def axis(self, name: str) -> Axis:
        for ax in self.axes:
            if ax.name == name:
                return ax
        raise KeyError(name)

    @property
    def ball(self) -> np.ndarray:
        return np.array(self.axis("W").location, dtype=float)

    @property
    def tool(self) -> np.ndarray:
        return np.array(self.axis("T").location, dtype=float)

    def with_locations(self, **locations) -> MachineTopology:
        axes = tuple(
            Axis(ax.name, ax.kind, ax.direction, tuple(map(float, locations[ax.name])), ax.stroke)
            if ax.name in locations else ax
            for ax in self.axes
        )
        return MachineTopology(axes, self.errors)

    @classmethod
    def default(
        cls,
        ball=(60.0, 40.0, 120.0),
        tool=(0.0, 0.0, 0.0),
        a_anchor=(0.0, 0.0, 0.0),
        c_anchor=(0.0, 0.0, 0.0),
    ) -> MachineTopology:
        """Huron-like WCAYFXZT layout; ball on the C table, axes intersecting."""
        axes = (
            Axis("W", "fixed", location=tuple(map(float, ball))),
            Axis("C", "rotary", (0.0, 0.0, 1.0), tuple(map(float, c_anchor))),
            Axis("A", "rotary", DEFAULT_A_DIRECTION, tuple(map(float, a_anchor)), (-5.0, 185.0)),
            Axis("Y", "linear", (0.0, 1.0, 0.0), stroke=(-350.0, 350.0)),
            Axis("F", "fixed"),
            Axis("X", "linear", (1.0, 0.0, 0.0), stroke=(-325.0, 325.0)),
            Axis("Z", "linear", (0.0, 0.0, 1.0), stroke=(-225.0, 225.0)),
            Axis("T", "fixed", location=tuple(map(float, tool))),
        )
        return cls(axes)

    def to_dict(self) -> dict:
        return {
            "axes": [
                {
                    "name": ax.name,
                    "kind": ax.kind,
                    "direction": list(ax.direction),
                    "location": list(ax.location),
                    "stroke": None if ax.stroke is None else list(ax.stroke),
                }
                for ax in self.axes
            ],
            "errors": [
                {"name": e.name, "axis": e.axis, "kind": e.kind, "vector": list(e.vector)}
                for e in self.errors
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MachineTopology:
        try:
            axes = tuple(
                Axis(
                    a["name"],
                    a["kind"],
                    tuple(map(float, a.get("direction", (0.0, 0.0, 1.0)))),
                    tuple(map(float, a.get("location", (0.0, 0.0, 0.0)))),
                    None if a.get("stroke") is None else tuple(map(float, a["stroke"])),
                )
                for a in doc["axes"]
            )
            errors = tuple(
                ErrorDefinition(e["name"], e["axis"], e["kind"], tuple(map(float, e["vector"])))
                for e in doc.get("errors", ())
            )
        except (KeyError, TypeError) as exc:
            raise KinematicsError(f"malformed topology document: {exc!r}") from exc
        return cls(axes, errors)


def load_topology(path) -> MachineTopology:
    return MachineTopology.from_dict(json.loads(Path(path).read_text()))


def save_topology(topology: MachineTopology, path) -> None:
    Path(path).write_text(json.dumps(topology.to_dict(), indent=2))


@dataclass(frozen=True)
class Pose:
    """Joint commands: a, c in deg; x, y, z in mm.  ``k`` is 1-based."""

    a: float
    c: float
    x: float
    y: float
    z: float
    k: int = 1

    def command(self, axis: str) -> float:
        return getattr(self, JOINT_OF_AXIS[axis])

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.a, self.c, self.x, self.y, self.z)


def check_strokes(topology: MachineTopology, pose: Pose) -> None:
    for name in JOINT_OF_AXIS:
        ax = topology.axis(name)
        if ax.stroke is None:
            continue
        v = pose.command(name)
        lo, hi = ax.stroke
        if not lo - 1e-9 <= v <= hi + 1e-9:
            raise StrokeError(name, v, ax.stroke)


def _joint_transform(ax: Axis, q: float, dir_rot=None) -> np.ndarray:
    d = np.asarray(ax.direction, dtype=float)
    if ax.kind == "linear":
        if dir_rot is not None:
            d = rotation_vector(dir_rot) @ d
        return homogeneous(t=q * d)
    R = rotation(d, math.radians(q))
    o = np.asarray(ax.location, dtype=float)
    return homogeneous(R, o - R @ o)


def _rotation_about_point(w, o) -> np.ndarray:
    R = rotation_vector(w)
    o = np.asarray(o, dtype=float)
    return homogeneous(R, o - R @ o)


def _branch_frames(topology, pose, branch, errors=None):
    """Cumulative transforms G_0 = I, G_1, ... along ``branch``."""
    frames = [np.eye(4)]
    G = np.eye(4)
    for name in branch:
        ax = topology.axis(name)
        dir_rot = None
        E = np.eye(4)
        if errors is not None:
            for j, ed in enumerate(topology.errors):
                if ed.axis != name or errors[j] == 0.0:
                    continue
                v = np.asarray(ed.vector) * errors[j]
                if ed.kind == "direction":
                    dir_rot = v if dir_rot is None else dir_rot + v
                elif ed.kind == "tilt":
                    E = E @ _rotation_about_point(v, ax.location)
                elif ed.kind == "offset":
                    E = E @ homogeneous(t=v)
        G = G @ E @ _joint_transform(ax, pose.command(name), dir_rot)
        frames.append(G)
    return frames


def _end_point(topology, name, errors=None) -> np.ndarray:
    p = np.asarray(topology.axis(name).location, dtype=float).copy()
    if errors is not None:
        for j, ed in enumerate(topology.errors):
            if ed.axis == name:
                p = p + np.asarray(ed.vector) * errors[j]
    return p


@dataclass(frozen=True)
class VolumetricError:
    """Tool-relative-to-workpiece displacement, (3,) or (n, 3) in mm."""

    vector: np.ndarray
    frame: str = "machine"  # machine | sensor

    def __post_init__(self):
        if self.frame not in ("machine", "sensor"):
            raise KinematicsError(f"unknown frame tag {self.frame!r}")


@dataclass(frozen=True)
class NominalGeometry:
    tool_point: np.ndarray
    ball_point: np.ndarray
    frames: dict


def forward_nominal(topology: MachineTopology, pose: Pose, errors=None, check=True) -> NominalGeometry:
    """Tool point P_t and ball centre P_w in the machine frame.

    ``errors`` (14-vector, internal units) evaluates the exact perturbed
    chain instead of the nominal one.
    """
    if check:
        check_strokes(topology, pose)
    wf = _branch_frames(topology, pose, WORKPIECE_BRANCH, errors)
    tf = _branch_frames(topology, pose, TOOL_BRANCH, errors)
    b = _end_point(topology, "W", errors)
    t = _end_point(topology, "T", errors)
    P_w = wf[-1][:3, :3] @ b + wf[-1][:3, 3]
    P_t = tf[-1][:3, :3] @ t + tf[-1][:3, 3]
    frames = dict(zip(WORKPIECE_BRANCH, wf[1:]))
    frames.update(zip(TOOL_BRANCH, tf[1:]))
    return NominalGeometry(P_t, P_w, frames)


def volumetric_error_exact(topology: MachineTopology, pose: Pose, errors) -> np.ndarray:
    """Nonlinear tool-relative-to-workpiece displacement for ``errors``."""
    g = forward_nominal(topology, pose, np.asarray(errors, dtype=float), check=False)
    g0 = forward_nominal(topology, pose, check=False)
    return (g.tool_point - g0.tool_point) - (g.ball_point - g0.ball_point)


def build_jacobian_row(topology: MachineTopology, pose: Pose) -> np.ndarray:
    """3x14 block mapping error parameters to volumetric error at ``pose``."""
    check_strokes(topology, pose)
    J = np.zeros((3, N_PARAMS))
    branches = (
        (WORKPIECE_BRANCH, -1.0, "W"),
        (TOOL_BRANCH, 1.0, "T"),
    )
    for branch, sign, end in branches:
        frames = _branch_frames(topology, pose, branch)
        G_end = frames[-1]
        P = G_end[:3, :3] @ _end_point(topology, end) + G_end[:3, 3]
        for j, ed in enumerate(topology.errors):
            v = np.asarray(ed.vector, dtype=float)
            if ed.axis == end:
                col = G_end[:3, :3] @ v
            elif ed.axis in branch:
                i = branch.index(ed.axis)
                G_prev = frames[i]
                R_prev = G_prev[:3, :3]
                ax = topology.axis(ed.axis)
                if ed.kind == "direction":
                    q = pose.command(ed.axis)
                    col = q * (R_prev @ np.cross(v, ax.direction))
                elif ed.kind == "tilt":
                    anchor = G_prev[:3, :3] @ np.asarray(ax.location) + G_prev[:3, 3]
                    col = np.cross(R_prev @ v, P - anchor)
                else:
                    col = R_prev @ v
            else:
                continue
            J[:, j] = sign * col
    return J


def jacobian_finite_difference(topology: MachineTopology, pose: Pose, step: float = 1e-7) -> np.ndarray:
    """Central differences of the exact perturbed chain."""
    J = np.zeros((3, N_PARAMS))
    for j in range(N_PARAMS):
        e = np.zeros(N_PARAMS)
        e[j] = step
        plus = forward_nominal(topology, pose, e, check=False)
        minus = forward_nominal(topology, pose, -e, check=False)
        J[:, j] = (
            (plus.tool_point - minus.tool_point) - (plus.ball_point - minus.ball_point)
        ) / (2 * step)
    return J


@dataclass(frozen=True)
class IdentificationJacobian:
    matrix: np.ndarray  # (3n, 14)
    pose_indices: tuple[int, ...]

    @property
    def n_poses(self) -> int:
        return len(self.pose_indices)

    def block(self, i: int) -> np.ndarray:
        return self.matrix[3 * i:3 * i + 3]


MIN_POSES = 5


def assemble_identification_jacobian(topology: MachineTopology, poses: Sequence[Pose]) -> IdentificationJacobian:
    if len(poses) < MIN_POSES:
        raise UnderdeterminedError(
            f"{len(poses)} poses give {3 * len(poses)} equations; "
            f"at least {MIN_POSES} poses are needed for {N_PARAMS} unknowns"
        )
    blocks = [build_jacobian_row(topology, p) for p in poses]
    M = np.vstack(blocks)
    M.flags.writeable = False
    return IdentificationJacobian(M, tuple(p.k for p in poses))


def condition_number(J, rtol: float = 1e-10, equilibrate: bool = False) -> float:
    """Ratio of extreme singular values.

    With ``equilibrate`` the columns are first scaled to unit norm, which
    removes the dependence on the mixed rad / mm units.
    """
    A = J.matrix if isinstance(J, IdentificationJacobian) else np.asarray(J, dtype=float)
    if equilibrate:
        norms = np.linalg.norm(A, axis=0)
        norms[norms == 0.0] = 1.0
        A = A / norms
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    if rank < A.shape[1]:
        raise SingularSystemError(rank, A.shape[1], Vt[-1] if Vt.shape[0] == A.shape[1] else None)
    return float(s[0] / s[-1])


def predict_volumetric_errors(J, p) -> np.ndarray:
    """Per-pose volumetric errors (n, 3), machine frame."""
    A = J.matrix if isinstance(J, IdentificationJacobian) else np.asarray(J, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape != (A.shape[1],):
        raise KinematicsError(f"parameter vector has shape {p.shape}, expected ({A.shape[1]},)")
    return (A @ p).reshape(-1, 3)


def write_jacobian_csv(J: IdentificationJacobian, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("k", "row") + PARAMETER_NAMES)
        for i, k in enumerate(J.pose_indices):
            for r, axis in enumerate("xyz"):
                w.writerow([k, axis] + [repr(float(v)) for v in J.matrix[3 * i + r]])


def read_jacobian_csv(path) -> IdentificationJacobian:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if tuple(header[2:]) != PARAMETER_NAMES:
        raise KinematicsError("jacobian CSV header does not name the 14 parameters in order")
    if len(body) % 3:
        raise KinematicsError(f"jacobian CSV has {len(body)} rows, not a multiple of 3")
    M = np.array([[float(v) for v in r[2:]] for r in body])
    ks = tuple(int(body[i][0]) for i in range(0, len(body), 3))
    M.flags.writeable = False
    return IdentificationJacobian(M, ks)
