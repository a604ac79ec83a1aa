"""Sensor noise, transform noise and drift models.

All magnitudes are in um.  Sensor noise and drift live in sensor-channel
space, transform noise in machine-frame axes.

Random streams
--------------
Every draw comes from a generator derived from the root seed through
``numpy.random.SeedSequence`` spawn keys:

* ``(0, h)`` -- sequence ``h`` (start time ``t_0`` of the cyclic drift),
* ``(1, h, n)`` -- trial ``n`` of sequence ``h``; within a trial the point
  index ``k`` addresses row ``k - 1`` of each fixed-order block of draws.

Any trial can therefore be regenerated, or evaluated on another worker,
without replaying the ones before it.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

TABLE3_SIGMA_UM = (0.28, 0.28, 0.40)
FIG6_TRANSFORM_UM = (0.56, 0.27, 0.69)
TABLE4_EVE_UM = (6.95, 3.42, 6.63)
DEFAULT_PERIOD_S = 420.0
DEFAULT_WAVEFORM = "cyclic_drift_default.csv"


class SourceConfigError(ValueError):
    pass


def compute_u_eve(e_ve):
    """Standard uncertainty of a drift of peak-to-valley magnitude ``e_ve``."""
    e = np.asarray(e_ve, dtype=float)
    if np.any(e < 0):
        raise SourceConfigError(f"drift magnitude must be non-negative, got {e_ve}")
    u = e / (2.0 * math.sqrt(3.0))
    return float(u) if u.ndim == 0 else u


def _vec3(v, name) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise SourceConfigError(f"{name} needs 3 components, got {len(t)}")
    if any(x < 0 for x in t):
        raise SourceConfigError(f"{name} must be non-negative, got {t}")
    return t


@dataclass(frozen=True)
class SensorNoiseModel:
    sigma_um: tuple[float, float, float] = TABLE3_SIGMA_UM

    def __post_init__(self):
        object.__setattr__(self, "sigma_um", _vec3(self.sigma_um, "sensor sigma"))


@dataclass(frozen=True)
class TransformNoiseModel:
    u_um: tuple[float, float, float] = FIG6_TRANSFORM_UM

    def __post_init__(self):
        object.__setattr__(self, "u_um", _vec3(self.u_um, "transform u"))


@dataclass(frozen=True)
class StatisticalDriftModel:
    e_ve_um: tuple[float, float, float] = TABLE4_EVE_UM

    def __post_init__(self):
        object.__setattr__(self, "e_ve_um", _vec3(self.e_ve_um, "E_VE"))

    @property
    def u_eve_um(self) -> np.ndarray:
        return compute_u_eve(self.e_ve_um)


@dataclass(frozen=True)
class CyclicDriftModel:
    """One period of a per-channel drift waveform, linearly interpolated.

    ``times`` starts at 0 and ends at the period; the closing sample equals
    the first one.
    """

    times: np.ndarray
    values: np.ndarray  # (n, 3) um

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.shape != (t.size, 3) or t.size < 2:
            raise SourceConfigError("waveform needs matching (n,) times and (n, 3) values, n >= 2")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise SourceConfigError("waveform times must start at 0 and increase")
        if not np.allclose(v[0], v[-1], atol=1e-12):
            raise SourceConfigError("waveform must close: last sample equal to first")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def period(self) -> float:
        return float(self.times[-1])

    @property
    def peak_to_valley(self) -> np.ndarray:
        return self.values.max(axis=0) - self.values.min(axis=0)

    @classmethod
    def default(cls) -> CyclicDriftModel:
        text = resources.files("linkid.data").joinpath(DEFAULT_WAVEFORM).read_text()
        return read_waveform_csv(io.StringIO(text))

    @classmethod
    def constant(cls, value_um, period: float = DEFAULT_PERIOD_S) -> CyclicDriftModel:
        v = np.tile(np.asarray(value_um, dtype=float), (2, 1))
        return cls(np.array([0.0, period]), v)

    @classmethod
    def sine(cls, amplitude_um, period: float = DEFAULT_PERIOD_S, samples: int = 4201) -> CyclicDriftModel:
        t = np.linspace(0.0, period, samples)
        v = np.outer(np.sin(2 * np.pi * t / period), np.asarray(amplitude_um, dtype=float))
        v[-1] = v[0]
        return cls(t, v)

    def scaled_to(self, e_ve_um) -> CyclicDriftModel:
        """Same shape, peak-to-valley rescaled per channel."""
        ptv = self.peak_to_valley
        target = np.asarray(e_ve_um, dtype=float)
        gain = np.divide(target, ptv, out=np.zeros(3), where=ptv > 0)
        return CyclicDriftModel(self.times, self.values * gain)


def sawtooth_waveform(
    e_ve_um=TABLE4_EVE_UM, period: float = DEFAULT_PERIOD_S, rise_fraction: float = 0.2,
    decay_constant: float = 0.3, dt: float = 1.0,
) -> CyclicDriftModel:
    """Fast half-cosine rise, slow exponential decay, zero mean, given peak-to-valley."""
    n = int(round(period / dt))
    t = np.linspace(0.0, period, n + 1)
    phi = t / period
    r = rise_fraction
    tail = math.exp(-(1.0 - r) / decay_constant)
    rise = 0.5 * (1.0 - np.cos(np.pi * phi / r))
    decay = (np.exp(-(phi - r) / decay_constant) - tail) / (1.0 - tail)
    shape = np.where(phi < r, rise, decay)
    shape[-1] = shape[0]
    shape = shape - shape[:-1].mean()
    return CyclicDriftModel(t, np.outer(shape, np.asarray(e_ve_um, dtype=float)))


def cyclic_drift_value(model: CyclicDriftModel, t):
    """Drift (um) at time(s) ``t`` >= 0: shape (3,) or (len(t), 3)."""
    ts = np.asarray(t, dtype=float)
    if np.any(ts < 0):
        raise SourceConfigError("drift time must be non-negative")
    phase = np.mod(ts, model.period)
    out = np.stack([np.interp(phase, model.times, model.values[:, i]) for i in range(3)], axis=-1)
    return out


@dataclass(frozen=True)
class MeasurementClock:
    t0: float = 0.0
    t_i: float = 0.74
    n_poses: int = 807

    @property
    def t_m(self) -> float:
        return self.n_poses * self.t_i

    def times(self, n: int = 1) -> np.ndarray:
        k = np.arange(1, self.n_poses + 1)
        return self.t0 + (n - 1) * self.t_m + k * self.t_i


def measurement_time(clock: MeasurementClock, n: int, k: int) -> float:
    """Time of point ``k`` in trial ``n`` (both 1-based)."""
    if n < 1 or not 1 <= k <= clock.n_poses:
        raise SourceConfigError(f"indices out of range: n={n}, k={k} (pose count {clock.n_poses})")
    return clock.t0 + (n - 1) * clock.t_m + k * clock.t_i


def sample_sensor_noise(model: SensorNoiseModel, rng, size=None) -> np.ndarray:
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    return rng.standard_normal(shape) * np.asarray(model.sigma_um)


def sample_transform_noise(model: TransformNoiseModel, rng, size=None) -> np.ndarray:
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    return rng.standard_normal(shape) * np.asarray(model.u_um)


def sample_statistical_drift(model: StatisticalDriftModel, rng, size=None) -> np.ndarray:
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    return rng.standard_normal(shape) * model.u_eve_um


def sequence_stream(root_seed: int, h: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=(0, h)))


def trial_stream(root_seed: int, h: int, n: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=(1, h, n)))


@dataclass(frozen=True)
class UncertaintySourceSet:
    sensor: SensorNoiseModel | None = None
    transform: TransformNoiseModel | None = None
    drift: StatisticalDriftModel | CyclicDriftModel | None = None

    @classmethod
    def none(cls) -> UncertaintySourceSet:
        return cls()

    @classmethod
    def paper(cls, drift: str = "cyclic") -> UncertaintySourceSet:
        return cls(SensorNoiseModel(), TransformNoiseModel(), default_drift(drift))

    @property
    def drift_kind(self) -> str | None:
        if self.drift is None:
            return None
        return "cyclic" if isinstance(self.drift, CyclicDriftModel) else "statistical"

    def enabled(self) -> tuple[str, ...]:
        return tuple(n for n in ("drift", "sensor", "transform") if getattr(self, n) is not None)

    def only(self, name: str) -> UncertaintySourceSet:
        if name not in ("drift", "sensor", "transform"):
            raise SourceConfigError(f"unknown source {name!r}")
        return UncertaintySourceSet(**{name: getattr(self, name)})

    def with_drift(self, kind: str | None) -> UncertaintySourceSet:
        """Swap the drift model keeping the same E_VE magnitudes."""
        if kind is None:
            return replace(self, drift=None)
        e_ve = drift_magnitude(self.drift) if self.drift is not None else TABLE4_EVE_UM
        if kind == "statistical":
            return replace(self, drift=StatisticalDriftModel(tuple(e_ve)))
        if kind == "cyclic":
            base = self.drift if isinstance(self.drift, CyclicDriftModel) else CyclicDriftModel.default()
            return replace(self, drift=base.scaled_to(e_ve))
        raise SourceConfigError(f"unknown drift model {kind!r}")

    def to_dict(self) -> dict:
        doc: dict = {
            "sensor": {"enabled": self.sensor is not None,
                       "sigma_um": list((self.sensor or SensorNoiseModel()).sigma_um)},
            "transform": {"enabled": self.transform is not None,
                          "u_um": list((self.transform or TransformNoiseModel()).u_um)},
        }
        if self.drift is None:
            doc["drift"] = {"enabled": False}
        else:
            doc["drift"] = {"enabled": True, "model": self.drift_kind,
                            "e_ve_um": [float(v) for v in drift_magnitude(self.drift)]}
            if isinstance(self.drift, CyclicDriftModel):
                doc["drift"]["waveform"] = {
                    "time_s": self.drift.times.tolist(),
                    "values_um": self.drift.values.tolist(),
                }
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> UncertaintySourceSet:
        try:
            s = doc.get("sensor", {})
            sensor = SensorNoiseModel(tuple(s.get("sigma_um", TABLE3_SIGMA_UM))) if s.get("enabled", True) else None
            t = doc.get("transform", {})
            transform = TransformNoiseModel(tuple(t.get("u_um", FIG6_TRANSFORM_UM))) if t.get("enabled", True) else None
            d = doc.get("drift", {})
            drift = None
            if d.get("enabled", True):
                kind = d.get("model", "cyclic")
                e_ve = tuple(d.get("e_ve_um", TABLE4_EVE_UM))
                if kind == "statistical":
                    drift = StatisticalDriftModel(e_ve)
                elif kind == "cyclic":
                    wf = d.get("waveform")
                    if isinstance(wf, dict):
                        drift = CyclicDriftModel(wf["time_s"], wf["values_um"])
                    elif isinstance(wf, str):
                        path = Path(wf) if base_dir is None else Path(base_dir) / wf
                        drift = read_waveform_csv(path)
                        if "e_ve_um" in d:
                            drift = drift.scaled_to(e_ve)
                    else:
                        drift = CyclicDriftModel.default().scaled_to(e_ve)
                else:
                    raise SourceConfigError(f"unknown drift model {kind!r}")
        except (TypeError, KeyError) as exc:
            raise SourceConfigError(f"malformed source-set document: {exc!r}") from exc
        return cls(sensor, transform, drift)


def default_drift(kind: str = "cyclic") -> StatisticalDriftModel | CyclicDriftModel:
    if kind == "statistical":
        return StatisticalDriftModel()
    if kind == "cyclic":
        return CyclicDriftModel.default()
    raise SourceConfigError(f"unknown drift model {kind!r}")


def drift_magnitude(drift) -> np.ndarray:
    if isinstance(drift, StatisticalDriftModel):
        return np.asarray(drift.e_ve_um)
    return drift.peak_to_valley


def load_source_set(path) -> UncertaintySourceSet:
    path = Path(path)
    return UncertaintySourceSet.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def save_source_set(sources: UncertaintySourceSet, path) -> None:
    Path(path).write_text(json.dumps(sources.to_dict(), indent=2))


def write_waveform_csv(model: CyclicDriftModel, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh)
        w.writerow(("time_s", "ch1_um", "ch2_um", "ch3_um"))
        for t, v in zip(model.times, model.values):
            w.writerow([f"{t:.6f}"] + [f"{x:.9f}" for x in v])
    finally:
        if own:
            fh.close()


def read_waveform_csv(path_or_buf) -> CyclicDriftModel:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        rows = list(csv.DictReader(fh))
    finally:
        if own:
            fh.close()
    try:
        t = [float(r["time_s"]) for r in rows]
        v = [[float(r[f"ch{i}_um"]) for i in (1, 2, 3)] for r in rows]
    except (KeyError, ValueError) as exc:
        raise SourceConfigError(f"malformed waveform CSV ({exc})") from exc
    return CyclicDriftModel(np.array(t), np.array(v))
