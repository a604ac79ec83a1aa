"""Least-squares identification of link and setup errors."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import (
    N_PARAMS,
    PARAMETER_NAMES,
    REPORT_UNITS,
    IdentificationJacobian,
    KinematicsError,
    SingularSystemError,
    condition_number,
    from_report_units,
    to_report_units,
)

SINGULAR_RTOL = 1e-10


class ShapeError(KinematicsError):
    pass


@dataclass(frozen=True)
class ErrorVectorSet:
    """Stacked per-pose volumetric errors (n, 3) in mm."""

    values: np.ndarray
    pose_indices: tuple[int, ...] = ()
    timestamps: np.ndarray | None = None
    frame: str = "machine"
    flags: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            if v.size % 3:
                raise ShapeError(f"error vector length {v.size} is not divisible by 3")
            v = v.reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError(f"error vector set must be (n, 3), got {v.shape}")
        object.__setattr__(self, "values", v)
        if not self.pose_indices:
            object.__setattr__(self, "pose_indices", tuple(range(1, len(v) + 1)))
        if len(self.pose_indices) != len(v):
            raise ShapeError("pose index map does not cover every pose")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def stacked(self) -> np.ndarray:
        return self.values.ravel()


def _matrix(J) -> np.ndarray:
    return J.matrix if isinstance(J, IdentificationJacobian) else np.asarray(J, dtype=float)


def pseudo_inverse(J, rtol: float = SINGULAR_RTOL) -> np.ndarray:
    """SVD pseudo-inverse; refuses rank-deficient systems."""
    A = _matrix(J)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    if rank < A.shape[1]:
        raise SingularSystemError(rank, A.shape[1], Vt[-1])
    return (Vt.T / s) @ U.T


@dataclass(frozen=True)
class IdentificationResult:
    parameters: np.ndarray  # internal units
    residual: np.ndarray  # (n, 3) mm
    rms_um: np.ndarray  # (3,)
    max_abs_um: float
    condition: float
    pose_indices: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        rep = to_report_units(self.parameters)
        return {
            "parameters": {
                name: {"value": float(v), "unit": u}
                for name, v, u in zip(PARAMETER_NAMES, rep, REPORT_UNITS)
            },
            "rms_x_um": float(self.rms_um[0]),
            "rms_y_um": float(self.rms_um[1]),
            "rms_z_um": float(self.rms_um[2]),
            "max_abs_residual_um": float(self.max_abs_um),
            "condition_number": float(self.condition),
            "n_poses": len(self.residual),
        }


def _rms_um(residual: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(residual ** 2, axis=0)) * 1e3


def identify(J: IdentificationJacobian, chi: ErrorVectorSet) -> IdentificationResult:
    A = _matrix(J)
    if chi.frame != "machine":
        raise ShapeError("error vector set must be expressed in the machine frame")
    if A.shape[0] != chi.stacked.size:
        raise ShapeError(
            f"jacobian has {A.shape[0]} rows but the error vector set has {chi.stacked.size}"
        )
    P = pseudo_inverse(A)
    p = P @ chi.stacked
    r = (chi.stacked - A @ p).reshape(-1, 3)
    return IdentificationResult(
        p, r, _rms_um(r), float(np.abs(r).max(initial=0.0) * 1e3),
        condition_number(A), chi.pose_indices,
    )


def residual_report(result: IdentificationResult) -> dict:
    r_um = result.residual * 1e3
    return {
        "k": list(result.pose_indices),
        "series_um": r_um,
        "rms_um": result.rms_um.copy(),
        "max_abs_um": result.max_abs_um,
    }


def write_residual_csv(result: IdentificationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("k", "rx_um", "ry_um", "rz_um"))
        for k, row in zip(result.pose_indices, result.residual * 1e3):
            w.writerow([k] + [repr(float(v)) for v in row])


def read_residual_csv(path) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r["k"]) for r in rows], np.array([[float(r[f"r{a}_um"]) for a in "xyz"] for r in rows])


def validate(p, J_val, chi_val: ErrorVectorSet) -> np.ndarray:
    """Per-axis RMS (um) of validation residuals chi_val - J_val p."""
    A = _matrix(J_val)
    p = np.asarray(p, dtype=float)
    if p.shape != (N_PARAMS,) or A.shape[0] != chi_val.stacked.size:
        raise ShapeError(
            f"validation shapes disagree: jacobian {A.shape}, parameters {p.shape}, "
            f"{chi_val.stacked.size} measurements"
        )
    r = (chi_val.stacked - A @ p).reshape(-1, 3)
    return _rms_um(r)


def save_result(result: IdentificationResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2))


def load_parameters(path) -> np.ndarray:
    """Parameter vector (internal units) from a result JSON."""
    doc = json.loads(Path(path).read_text())
    params = doc.get("parameters", doc)
    try:
        rep = [float(params[n]["value"] if isinstance(params[n], dict) else params[n]) for n in PARAMETER_NAMES]
    except KeyError as exc:
        raise ShapeError(f"{path}: missing parameter {exc}") from exc
    return from_report_units(rep)


def write_error_vector_csv(chi: ErrorVectorSet, path) -> None:
    t = chi.timestamps if chi.timestamps is not None else np.full(len(chi), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("k", "t_s", "ex_um", "ey_um", "ez_um"))
        for k, ti, row in zip(chi.pose_indices, t, chi.values * 1e3):
            w.writerow([k, repr(float(ti))] + [repr(float(v)) for v in row])


def read_error_vector_csv(path, frame: str = "machine") -> ErrorVectorSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        ks = tuple(int(r["k"]) for r in rows)
        t = np.array([float(r["t_s"]) for r in rows])
        v = np.array([[float(r[f"e{a}_um"]) for a in "xyz"] for r in rows]) * 1e-3
    except (KeyError, ValueError) as exc:
        raise ShapeError(f"{path}: malformed error vector CSV ({exc})") from exc
    return ErrorVectorSet(v, ks, None if np.all(np.isnan(t)) else t, frame)
