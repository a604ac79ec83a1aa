"""Adaptive multi-output Monte Carlo propagation to the identified errors.

Sequences of ``M`` simulated measure-and-identify trials are run until the
standard deviation of the average of each control variable (mean, standard
uncertainty, lower and upper coverage endpoint, for every output) falls
below the numerical tolerance.  Final statistics pool all trials.

Outputs are handled in report units: um/m for angles, um for lengths, so a
single tolerance applies to both kinds.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .identification import pseudo_inverse
from .kinematics import (
    LINK_ERRORS,
    N_PARAMS,
    PARAMETER_NAMES,
    REPORT_SCALE,
    REPORT_UNITS,
    MachineTopology,
    Pose,
    table1_parameters,
)
from .measurement_sim import MeasurementModel
from .sensor_calibration import FrameTransform, synthetic_instrument
from .trajectory import (
    DEFAULT_DWELL_INTERVAL_S,
    IDENTIFICATION_POSES,
    TrajectorySpec,
    generate_identification_trajectory,
)
from .uncertainty_sources import (
    DEFAULT_PERIOD_S,
    CyclicDriftModel,
    UncertaintySourceSet,
    sequence_stream,
    trial_stream,
)

PAPER_M = 10_000
PAPER_DELTA = 0.05  # um or um/m
DESK_M = 1_000
DESK_POSES = 100
CONTROL_VARIABLES = ("mean", "u", "low", "high")
CHUNK = 500


class McError(ValueError):
    pass


@dataclass(frozen=True)
class McConfig:
    M: int = PAPER_M
    coverage: float = 0.95
    delta: float = PAPER_DELTA
    max_sequences: int = 50
    min_sequences: int = 2
    sources: UncertaintySourceSet = field(default_factory=lambda: UncertaintySourceSet.paper("cyclic"))
    seed: int = 0
    n_poses: int = 807
    t_i: float = DEFAULT_DWELL_INTERVAL_S
    criterion: str = "paper"  # paper: s < delta; gum: 2 s <= delta
    interval: str = "shortest"  # shortest | symmetric
    true_parameters: np.ndarray | None = None
    topology: MachineTopology | None = None
    instrument: FrameTransform | None = None
    fitted: FrameTransform | None = None
    poses: tuple[Pose, ...] | None = None
    workers: int = 1
    keep_samples: bool = True
    profile: str = "paper"

    def __post_init__(self):
        if self.M < 2:
            raise McError(f"M must be >= 2, got {self.M}")
        if not 0.0 < self.coverage < 1.0:
            raise McError(f"coverage probability must be in (0, 1), got {self.coverage}")
        if self.delta <= 0:
            raise McError(f"tolerance must be positive, got {self.delta}")
        if self.criterion not in ("paper", "gum"):
            raise McError(f"unknown convergence criterion {self.criterion!r}")
        if self.interval not in ("shortest", "symmetric"):
            raise McError(f"unknown interval type {self.interval!r}")
        if self.min_sequences < 2 or self.max_sequences < self.min_sequences:
            raise McError("need 2 <= min_sequences <= max_sequences")

    @classmethod
    def paper(cls, **kw) -> McConfig:
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> McConfig:
        M = kw.pop("M", DESK_M)
        kw.setdefault("n_poses", DESK_POSES)
        kw.setdefault("t_i", desk_interval(kw["n_poses"]))
        kw.setdefault("delta", desk_delta(M))
        return cls(M=M, profile="desk", **kw)

    @classmethod
    def for_profile(cls, profile: str, **kw) -> McConfig:
        if profile == "paper":
            return cls.paper(**kw)
        if profile == "desk":
            return cls.desk(**kw)
        raise McError(f"unknown profile {profile!r}")

    def summary(self) -> dict:
        return {
            "M": self.M, "coverage": self.coverage, "delta": self.delta,
            "max_sequences": self.max_sequences, "seed": self.seed, "n_poses": self.n_poses,
            "t_i": self.t_i, "criterion": self.criterion, "interval": self.interval,
            "profile": self.profile, "sources": list(self.sources.enabled()),
            "drift_model": self.sources.drift_kind,
        }


def desk_interval(n_poses: int) -> float:
    """Pose interval that keeps a shortened run as long as the full one.

    The cyclic drift acts through its phase over a run, so a run with fewer
    poses must still span the same number of drift cycles.
    """
    return IDENTIFICATION_POSES * DEFAULT_DWELL_INTERVAL_S / n_poses


def desk_delta(M: int) -> float:
    """Tolerance scaled to a smaller sequence size."""
    return PAPER_DELTA * math.sqrt(PAPER_M / M)


def coverage_interval(samples, p: float = 0.95, kind: str = "shortest"):
    """Coverage interval of a sample (1-D) or of each column of a 2-D sample."""
    x = np.sort(np.asarray(samples, dtype=float), axis=0)
    N = x.shape[0]
    if N < 100:
        raise McError(f"coverage interval needs >= 100 samples, got {N}")
    if kind == "symmetric":
        low, high = np.quantile(x, [(1 - p) / 2, (1 + p) / 2], axis=0)
    elif kind == "shortest":
        q = min(math.ceil(p * N - 1e-9), N)
        widths = x[q - 1:] - x[: N - q + 1]
        i = np.argmin(widths, axis=0)
        low = np.take_along_axis(x, np.atleast_1d(i)[None, ...] if x.ndim > 1 else np.atleast_1d(i), axis=0)
        high = np.take_along_axis(x, (np.atleast_1d(i) + q - 1)[None, ...] if x.ndim > 1 else np.atleast_1d(i) + q - 1, axis=0)
        low, high = low.reshape(x.shape[1:]), high.reshape(x.shape[1:])
    else:
        raise McError(f"unknown interval type {kind!r}")
    if x.ndim == 1:
        return float(low), float(high)
    return low, high


def normality(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample skewness and excess kurtosis per column."""
    x = np.asarray(samples, dtype=float)
    return stats.skew(x, axis=0), stats.kurtosis(x, axis=0, fisher=True)


def is_normal(samples, max_skew: float = 0.1, max_kurtosis: float = 0.2) -> np.ndarray:
    sk, ku = normality(samples)
    return (np.abs(sk) < max_skew) & (np.abs(ku) < max_kurtosis)


class _Context:
    """Per-config precomputation shared by all trials."""

    def __init__(self, config: McConfig):
        topology = config.topology or MachineTopology.default()
        poses = config.poses
        if poses is None:
            poses = tuple(generate_identification_trajectory(
                TrajectorySpec.identification(n_poses=config.n_poses, dwell_interval_s=config.t_i),
                topology,
            ))
        self.poses = tuple(poses)
        p_true = table1_parameters() if config.true_parameters is None else np.asarray(config.true_parameters, float)
        instrument = config.instrument or synthetic_instrument()
        self.model = MeasurementModel(
            topology, self.poses, p_true, instrument, config.fitted, config.sources,
        )
        self.pinv = pseudo_inverse(self.model.jacobian)
        self.p_true_report = p_true * REPORT_SCALE
        drift = config.sources.drift
        self.period = drift.period if isinstance(drift, CyclicDriftModel) else DEFAULT_PERIOD_S
        self.n = len(self.poses)
        self.t_m = self.n * config.t_i
        self.k_times = np.arange(1, self.n + 1) * config.t_i

    def sequence_start(self, config: McConfig, h: int) -> float:
        return float(sequence_stream(config.seed, h).uniform(0.0, self.period))

    def trials(self, config: McConfig, h: int, t0: float, first: int, last: int):
        """Report-unit samples and saturation mask for trials first..last (1-based)."""
        ns = np.arange(first, last + 1)
        draws = [self.model.draws(trial_stream(config.seed, h, int(n))) for n in ns]
        z = np.stack([d[0] for d in draws])
        u = np.stack([d[1] for d in draws])
        times = t0 + (ns[:, None] - 1) * self.t_m + self.k_times[None, :]
        de, flags = self.model.error_perturbation(z, u, times)
        dp = de.reshape(len(ns), -1) @ self.pinv.T
        return self.p_true_report + dp * REPORT_SCALE, flags.any(axis=1)


def run_trial(config: McConfig, sequence_index: int, trial_index: int, _ctx=None) -> np.ndarray:
    """One simulated run identified into a 14-vector (internal units)."""
    ctx = _ctx or _Context(config)
    t0 = ctx.sequence_start(config, sequence_index)
    y, flag = ctx.trials(config, sequence_index, t0, trial_index, trial_index)
    if flag[0]:
        raise McError(f"trial ({sequence_index}, {trial_index}) saturated the sensors")
    return y[0] / REPORT_SCALE


def _run_sequence(ctx: _Context, config: McConfig, h: int) -> tuple[np.ndarray, int]:
    t0 = ctx.sequence_start(config, h)
    bounds = [(a, min(a + CHUNK - 1, config.M)) for a in range(1, config.M + 1, CHUNK)]
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(lambda b: ctx.trials(config, h, t0, *b), bounds))
    else:
        parts = [ctx.trials(config, h, t0, *b) for b in bounds]
    y = np.vstack([p[0] for p in parts])
    bad = np.concatenate([p[1] for p in parts])
    return y[~bad], int(bad.sum())


def sample_sequence(config: McConfig, sequence_index: int = 1) -> tuple[np.ndarray, int]:
    """All usable trials (report units) of one sequence and the excluded count."""
    return _run_sequence(_Context(config), config, sequence_index)


def _control_variables(y: np.ndarray, config: McConfig) -> dict:
    low, high = coverage_interval(y, config.coverage, config.interval)
    # centred on the first sample: exact when all trials agree
    d = y - y[0]
    return {"mean": y[0] + d.mean(axis=0), "u": d.std(axis=0, ddof=1), "low": low, "high": high}


@dataclass
class McResult:
    mean: np.ndarray
    u: np.ndarray
    low: np.ndarray
    high: np.ndarray
    sequences: int
    converged: bool
    trace: list
    n_trials: int
    excluded: int
    config: dict
    samples: np.ndarray | None = None

    @property
    def interval_size(self) -> np.ndarray:
        return self.high - self.low

    def control(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def satisfied_at(self) -> dict:
        """First sequence from which each control-variable class stays converged."""
        limit = 0.5 if self.config.get("criterion") == "gum" else 1.0
        out = {}
        for cv in CONTROL_VARIABLES:
            h_ok = None
            for rec in self.trace:
                ok = rec["max_ratio"][cv] < limit if limit == 1.0 else rec["max_ratio"][cv] <= limit
                if ok and h_ok is None:
                    h_ok = rec["h"]
                elif not ok:
                    h_ok = None
            out[cv] = h_ok
        return out

    def last_to_converge(self) -> str:
        """Control-variable class that satisfied the criterion last.

        Ties are broken by the larger tolerance ratio at the final sequence.
        """
        sat = self.satisfied_at()
        final = self.trace[-1]["max_ratio"] if self.trace else {cv: 0.0 for cv in CONTROL_VARIABLES}
        never = max(r["h"] for r in self.trace) + 1 if self.trace else 0
        return max(CONTROL_VARIABLES, key=lambda cv: (sat[cv] if sat[cv] is not None else never, final[cv]))

    def histograms(self, bins: int = 50) -> list:
        if self.samples is None:
            raise McError("samples were not kept")
        out = []
        for j in range(N_PARAMS):
            counts, edges = np.histogram(self.samples[:, j], bins=bins)
            out.append((edges[:-1], edges[1:], counts))
        return out

    def to_dict(self) -> dict:
        params = {
            name: {
                "unit": unit,
                "mean": float(self.mean[j]),
                "u": float(self.u[j]),
                "low": float(self.low[j]),
                "high": float(self.high[j]),
                "interval_size": float(self.interval_size[j]),
            }
            for j, (name, unit) in enumerate(zip(PARAMETER_NAMES, REPORT_UNITS))
        }
        trace = [
            {
                "h": rec["h"],
                "max_ratio": {k: float(v) for k, v in rec["max_ratio"].items()},
                "s": {k: [float(x) for x in v] for k, v in rec["s"].items()},
            }
            for rec in self.trace
        ]
        return {
            "converged": self.converged,
            "sequences": self.sequences,
            "n_trials": self.n_trials,
            "excluded_trials": self.excluded,
            "config": self.config,
            "parameters": params,
            "trace": trace,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> McResult:
        p = doc["parameters"]
        get = lambda key: np.array([p[n][key] for n in PARAMETER_NAMES])
        trace = [
            {"h": r["h"], "max_ratio": r["max_ratio"], "s": {k: np.array(v) for k, v in r["s"].items()}}
            for r in doc["trace"]
        ]
        return cls(get("mean"), get("u"), get("low"), get("high"), doc["sequences"],
                   doc["converged"], trace, doc["n_trials"], doc["excluded_trials"], doc["config"])


def run_adaptive(config: McConfig) -> McResult:
    ctx = _Context(config)
    per_seq = {cv: [] for cv in CONTROL_VARIABLES}
    pooled = []
    trace = []
    excluded = 0
    converged = False
    h = 0
    while h < config.max_sequences:
        h += 1
        y, bad = _run_sequence(ctx, config, h)
        excluded += bad
        if len(y) < 100:
            raise McError(f"sequence {h}: only {len(y)} usable trials")
        pooled.append(y)
        cv = _control_variables(y, config)
        for name in CONTROL_VARIABLES:
            per_seq[name].append(cv[name])
        if h < 2:
            continue
        s = {
            name: np.std(np.array(per_seq[name]), axis=0, ddof=1) / math.sqrt(h)
            for name in CONTROL_VARIABLES
        }
        ratio = {name: float(np.max(s[name]) / config.delta) for name in CONTROL_VARIABLES}
        trace.append({"h": h, "s": s, "max_ratio": ratio})
        worst = max(ratio.values())
        ok = worst < 1.0 if config.criterion == "paper" else 2.0 * worst <= 1.0
        if ok and h >= config.min_sequences:
            converged = True
            break
    y_all = np.vstack(pooled)
    final = _control_variables(y_all, config)
    return McResult(
        final["mean"], final["u"], final["low"], final["high"], h, converged, trace,
        len(y_all), excluded, config.summary(), y_all if config.keep_samples else None,
    )


@dataclass
class ContributionTable:
    delta_eve: np.ndarray | None
    delta_sensors: np.ndarray | None
    delta_trans: np.ndarray | None
    delta_total: np.ndarray
    results: dict

    @property
    def quadratic_sum(self) -> np.ndarray:
        parts = [d for d in (self.delta_eve, self.delta_sensors, self.delta_trans) if d is not None]
        return np.sqrt(np.sum(np.square(parts), axis=0))

    def rows(self, names=LINK_ERRORS) -> list[dict]:
        out = []
        for name in names:
            j = PARAMETER_NAMES.index(name)
            pick = lambda d: None if d is None else float(d[j])
            out.append({
                "parameter": name, "unit": REPORT_UNITS[j],
                "delta_eve": pick(self.delta_eve), "delta_sensors": pick(self.delta_sensors),
                "delta_trans": pick(self.delta_trans), "quadratic_sum": float(self.quadratic_sum[j]),
                "delta_95": float(self.delta_total[j]),
            })
        return out


def contribution_analysis(config: McConfig) -> ContributionTable:
    results = {}
    for name in config.sources.enabled():
        results[name] = run_adaptive(replace(config, sources=config.sources.only(name)))
    results["all"] = run_adaptive(config)
    size = lambda key: results[key].interval_size if key in results else None
    return ContributionTable(size("drift"), size("sensor"), size("transform"), size("all"), results)


@dataclass
class DriftComparison:
    statistical: McResult
    cyclic: McResult

    @property
    def ratio(self) -> np.ndarray:
        s = self.statistical.interval_size
        c = self.cyclic.interval_size
        return np.divide(c, s, out=np.full_like(c, np.nan), where=s > 0)

    def summary(self) -> dict:
        return {
            name: {
                "statistical_interval": float(self.statistical.interval_size[j]),
                "cyclic_interval": float(self.cyclic.interval_size[j]),
                "ratio": float(self.ratio[j]),
            }
            for j, name in enumerate(PARAMETER_NAMES)
        }


def compare_drift_methods(config: McConfig) -> DriftComparison:
    return DriftComparison(
        run_adaptive(replace(config, sources=config.sources.with_drift("statistical"))),
        run_adaptive(replace(config, sources=config.sources.with_drift("cyclic"))),
    )


def save_result(result: McResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2))


def load_result(path) -> McResult:
    return McResult.from_dict(json.loads(Path(path).read_text()))


def write_histograms(result: McResult, directory, bins: int = 50) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (lo, hi, counts) in zip(PARAMETER_NAMES, result.histograms(bins)):
        path = directory / f"hist_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bin_low", "bin_high", "count"))
            for a, b, c in zip(lo, hi, counts):
                w.writerow([repr(float(a)), repr(float(b)), int(c)])
        paths.append(path)
    return paths


def read_histogram_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2].astype(int)
