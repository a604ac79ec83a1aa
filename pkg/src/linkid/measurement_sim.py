"""In-silico measurement runs: errors -> sensors -> noisy volumetric errors.

A run maps the true error parameters through the machine Jacobian to the
volumetric error at each pose, into sensor channels through the inverse of
the true instrument transform, subtracts drift, adds sensor noise, maps back
through the fitted transform and finally adds transform noise.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .identification import ErrorVectorSet
from .kinematics import (
    IdentificationJacobian,
    MachineTopology,
    Pose,
    build_jacobian_row,
)
from .sensor_calibration import FrameTransform, apply_transform, synthetic_instrument
from .uncertainty_sources import (
    TABLE3_SIGMA_UM,
    CyclicDriftModel,
    MeasurementClock,
    StatisticalDriftModel,
    UncertaintySourceSet,
    cyclic_drift_value,
)

SENSOR_RANGE_UM = 300.0
SAMPLING_RATE_HZ = 1000.0
DEFAULT_DWELL_S = 0.5


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationScenario:
    true_parameters: np.ndarray
    poses: tuple[Pose, ...]
    topology: MachineTopology = field(default_factory=MachineTopology.default)
    instrument: FrameTransform = field(default_factory=synthetic_instrument)
    fitted: FrameTransform | None = None  # None: fitted == instrument
    sources: UncertaintySourceSet = field(default_factory=UncertaintySourceSet)
    seed: int = 0
    clock: MeasurementClock | None = None
    trial: int = 1
    exact_stop_um: float = 0.0
    nonlinearity: float = 0.0

    def __post_init__(self):
        if not self.poses:
            raise SimulationError("scenario trajectory is empty")
        if self.seed is None:
            raise SimulationError("scenario seed must be set")
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "true_parameters", np.asarray(self.true_parameters, dtype=float))
        if self.clock is None:
            object.__setattr__(self, "clock", MeasurementClock(n_poses=len(self.poses)))
        elif self.clock.n_poses != len(self.poses):
            object.__setattr__(self, "clock", MeasurementClock(self.clock.t0, self.clock.t_i, len(self.poses)))

    def model(self) -> MeasurementModel:
        return MeasurementModel(
            self.topology, self.poses, self.true_parameters, self.instrument,
            self.fitted, self.sources, self.exact_stop_um, self.nonlinearity,
        )


class MeasurementModel:
    """Precomputed deterministic part of a run; perturbations are drawn per call."""

    def __init__(self, topology, poses, true_parameters, instrument, fitted=None,
                 sources=None, exact_stop_um=0.0, nonlinearity=0.0, jacobian=None):
        self.poses = tuple(poses)
        self.n = len(self.poses)
        if jacobian is None:
            # the forward model works for any pose count; only identification needs >= 5
            rows = np.vstack([build_jacobian_row(topology, p) for p in self.poses])
            rows.flags.writeable = False
            jacobian = IdentificationJacobian(rows, tuple(p.k for p in self.poses))
        self.jacobian: IdentificationJacobian = jacobian
        self.p_true = np.asarray(true_parameters, dtype=float)
        self.sources = sources or UncertaintySourceSet()
        self.exact_stop_um = float(exact_stop_um)
        self.tau = (self.jacobian.matrix @ self.p_true).reshape(-1, 3)  # mm
        inst = instrument.matrix
        self.true_inv = np.linalg.inv(inst[:3, :3])
        s0 = (self.tau - inst[:3, 3]) @ self.true_inv.T * 1e3  # um
        if nonlinearity:
            s0 = s0 * (1.0 + nonlinearity * (s0 / SENSOR_RANGE_UM) ** 2)
        self.s0_um = s0
        fitted = fitted or instrument
        self.fit_linear = fitted.matrix[:3, :3]
        if fitted is instrument and not nonlinearity:
            self.systematic = np.zeros_like(self.tau)
        else:
            self.systematic = (s0 * 1e-3) @ self.fit_linear.T + fitted.matrix[:3, 3] - self.tau

    def draws(self, rng) -> tuple[np.ndarray, np.ndarray]:
        """Fixed-order draws: normals for sensor / transform / statistical drift, uniform stop error."""
        z = rng.standard_normal((3, self.n, 3))
        u = rng.uniform(-1.0, 1.0, (self.n, 3))
        return z, u

    def sensor_perturbation(self, z, u, times) -> np.ndarray:
        """Change of sensor readings (..., n, 3) in um for given draws."""
        src = self.sources
        ds = np.zeros(z.shape[:-3] + (self.n, 3))
        if self.exact_stop_um:
            ds = ds + (u * self.exact_stop_um) @ self.true_inv.T
        if isinstance(src.drift, StatisticalDriftModel):
            ds = ds - z[..., 2, :, :] * src.drift.u_eve_um
        elif isinstance(src.drift, CyclicDriftModel):
            ds = ds - cyclic_drift_value(src.drift, times)
        if src.sensor is not None:
            ds = ds + z[..., 0, :, :] * np.asarray(src.sensor.sigma_um)
        return ds

    def error_perturbation(self, z, u, times) -> tuple[np.ndarray, np.ndarray]:
        """Measured minus true volumetric error (..., n, 3) in mm, and saturation flags."""
        ds = self.sensor_perturbation(z, u, times)
        flags = np.any(np.abs(self.s0_um + ds) > SENSOR_RANGE_UM, axis=-1)
        de = (ds * 1e-3) @ self.fit_linear.T + self.systematic
        if self.sources.transform is not None:
            de = de + z[..., 1, :, :] * (np.asarray(self.sources.transform.u_um) * 1e-3)
        return de, flags

    def measure(self, rng, times) -> tuple[np.ndarray, np.ndarray]:
        z, u = self.draws(rng)
        de, flags = self.error_perturbation(z, u, times)
        return self.tau + de, flags


def simulate_measurement_run(scenario: SimulationScenario) -> ErrorVectorSet:
    model = scenario.model()
    times = scenario.clock.times(scenario.trial)
    chi, flags = model.measure(np.random.default_rng(scenario.seed), times)
    return ErrorVectorSet(chi, tuple(p.k for p in scenario.poses), times, "machine", flags)


@dataclass(frozen=True)
class RawSensorLog:
    rate_hz: float
    samples: np.ndarray  # (N, 3) um
    t_start: float = 0.0
    markers: np.ndarray | None = None  # (n, 2) dwell [start, stop) sample indices
    pose_levels_um: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3:
            raise SimulationError(f"raw log must be (N, 3), got {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate_hz

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(len(self.samples)) / self.rate_hz


def simulate_raw_log(
    scenario: SimulationScenario,
    rate_hz: float = SAMPLING_RATE_HZ,
    dwell_s: float | None = None,
    transition_um: float = 20.0,
) -> RawSensorLog:
    """Continuous sensor log: one plateau per pose joined by motion transients.

    Sensor noise is drawn per sample; cyclic drift is evaluated per sample.
    """
    dwell_s = DEFAULT_DWELL_S if dwell_s is None else float(dwell_s)
    if dwell_s < 0.2:
        raise SimulationError(f"dwell {dwell_s} s is shorter than 0.2 s")
    model = scenario.model()
    clock = scenario.clock
    src = scenario.sources
    rng = np.random.default_rng(scenario.seed)
    n = model.n
    n_dwell = int(round(dwell_s * rate_hz))
    n_move = max(int(round((clock.t_i - dwell_s) * rate_hz)), 0) if n > 1 else 0

    z, u = model.draws(rng)
    levels = model.s0_um.copy()
    if model.exact_stop_um:
        levels += (u * model.exact_stop_um) @ model.true_inv.T
    if isinstance(src.drift, StatisticalDriftModel):
        levels -= z[2] * src.drift.u_eve_um

    total = n * n_dwell + (n - 1) * n_move
    t_start = clock.times(scenario.trial)[0] - dwell_s / 2
    t = t_start + np.arange(total) / rate_hz
    signal = np.empty((total, 3))
    markers = np.empty((n, 2), dtype=int)
    bump_sign = np.array([1.0, -1.0, 1.0])
    pos = 0
    for k in range(n):
        signal[pos:pos + n_dwell] = levels[k]
        markers[k] = (pos, pos + n_dwell)
        pos += n_dwell
        if k < n - 1 and n_move:
            w = (np.arange(n_move) + 1) / (n_move + 1)
            ramp = levels[k] + np.outer(w, levels[k + 1] - levels[k])
            signal[pos:pos + n_move] = ramp + np.outer(np.sin(np.pi * w), bump_sign * transition_um)
            pos += n_move
    pose_levels = levels.copy()
    if isinstance(src.drift, CyclicDriftModel):
        signal -= cyclic_drift_value(src.drift, t)
        mid = t[(markers[:, 0] + markers[:, 1]) // 2]
        pose_levels -= cyclic_drift_value(src.drift, mid)
    if src.sensor is not None:
        signal += rng.standard_normal((total, 3)) * np.asarray(src.sensor.sigma_um)
    return RawSensorLog(rate_hz, signal, t_start, markers, pose_levels)


class PlateauCountError(SimulationError):
    def __init__(self, detected: int, expected: int, merge_candidates=()):
        self.detected = detected
        self.expected = expected
        self.merge_candidates = list(merge_candidates)
        msg = f"detected {detected} plateaus, expected {expected}"
        if self.merge_candidates:
            pairs = ", ".join(f"({a}, {b})" for a, b in self.merge_candidates)
            msg += f"; ambiguous, merge candidates: {pairs}"
        super().__init__(msg)


def _rolling_std(x: np.ndarray, width: int) -> np.ndarray:
    """Centred rolling standard deviation, window truncated at the ends."""
    n = len(x)
    x = x - np.median(x, axis=0)
    cs = np.vstack((np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)))
    cs2 = np.vstack((np.zeros((1, x.shape[1])), np.cumsum(x * x, axis=0)))
    i = np.arange(n)
    lo = np.clip(i - width // 2, 0, n)
    hi = np.clip(i - width // 2 + width, 0, n)
    cnt = (hi - lo)[:, None]
    mean = (cs[hi] - cs[lo]) / cnt
    var = (cs2[hi] - cs2[lo]) / cnt - mean ** 2
    return np.sqrt(np.maximum(var, 0.0))


def detect_plateaus(samples, rate_hz, sigma_um=TABLE3_SIGMA_UM, window_s=0.1,
                    threshold=3.0, min_plateau_s=0.3) -> list[tuple[int, int]]:
    """[start, stop) sample ranges where every channel stays steady."""
    x = np.asarray(samples, dtype=float)
    width = max(int(round(window_s * rate_hz)), 2)
    std = _rolling_std(x, width)
    steady = np.all(std <= threshold * np.asarray(sigma_um), axis=1)
    edges = np.diff(np.concatenate(([0], steady.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    min_len = int(round(min_plateau_s * rate_hz))
    return [(int(a), int(b)) for a, b in zip(starts, stops) if b - a >= min_len]


def extract_steady_values(
    log: RawSensorLog,
    expected_poses: int,
    sigma_um=TABLE3_SIGMA_UM,
    window_s: float = 0.1,
    threshold: float = 3.0,
    min_plateau_s: float = 0.3,
    central_fraction: float = 0.6,
    transform: FrameTransform | None = None,
) -> ErrorVectorSet:
    """One averaged reading per pose, in sensor frame unless ``transform`` is given."""
    runs = detect_plateaus(log.samples, log.rate_hz, sigma_um, window_s, threshold, min_plateau_s)
    if len(runs) != expected_poses:
        candidates = []
        if len(runs) > expected_poses:
            gaps = [runs[i + 1][0] - runs[i][1] for i in range(len(runs) - 1)]
            order = np.argsort(gaps, kind="stable")[: len(runs) - expected_poses]
            candidates = sorted((int(i) + 1, int(i) + 2) for i in order)
        raise PlateauCountError(len(runs), expected_poses, candidates)
    trim = (1.0 - central_fraction) / 2
    values = np.empty((len(runs), 3))
    centres = np.empty(len(runs))
    for i, (a, b) in enumerate(runs):
        cut = int(round(trim * (b - a)))
        values[i] = log.samples[a + cut:b - cut].mean(axis=0)
        centres[i] = log.t_start + 0.5 * (a + b - 1) / log.rate_hz
    values_mm = values * 1e-3
    ks = tuple(range(1, len(runs) + 1))
    if transform is None:
        return ErrorVectorSet(values_mm, ks, centres, "sensor")
    return ErrorVectorSet(apply_transform(transform, values_mm).vector, ks, centres, "machine")


def write_raw_log_csv(log: RawSensorLog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t_s", "ch1_um", "ch2_um", "ch3_um"))
        for t, row in zip(log.times, log.samples):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_raw_log_csv(path, rate_hz: float | None = None) -> RawSensorLog:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    if rate_hz is None:
        rate_hz = 1.0 / float(np.median(np.diff(t))) if len(t) > 1 else SAMPLING_RATE_HZ
    return RawSensorLog(float(rate_hz), data[:, 1:4], float(t[0]) if len(t) else 0.0)


# Framed binary: magic, version u16, channel count u16, rate f64, t_start f64,
# sample count u64, then count x 3 little-endian float64 (um).
RAW_MAGIC = b"LRAW"
RAW_HEADER = struct.Struct("<4sHHddQ")


def write_raw_log_binary(log: RawSensorLog, path) -> None:
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, 1, 3, log.rate_hz, log.t_start, len(log.samples)))
        fh.write(np.ascontiguousarray(log.samples, dtype="<f8").tobytes())


def read_raw_log_binary(path) -> RawSensorLog:
    with open(path, "rb") as fh:
        head = fh.read(RAW_HEADER.size)
        magic, version, nch, rate, t_start, count = RAW_HEADER.unpack(head)
        if magic != RAW_MAGIC or version != 1 or nch != 3:
            raise SimulationError(f"{path}: not a raw sensor log (magic {magic!r}, version {version})")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != 3 * count:
        raise SimulationError(f"{path}: expected {count} samples, found {data.size / 3:g}")
    return RawSensorLog(rate, data.reshape(count, 3).copy(), t_start)

