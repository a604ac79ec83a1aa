import numpy as np
import pytest

from linkid.identification import identify
from linkid.kinematics import (
    PARAMETER_NAMES,
    build_jacobian_row,
    table1_parameters,
)
from linkid.measurement_sim import (
    PlateauCountError,
    RawSensorLog,
    SimulationError,
    SimulationScenario,
    extract_steady_values,
    read_raw_log_binary,
    read_raw_log_csv,
    simulate_measurement_run,
    simulate_raw_log,
    write_raw_log_binary,
    write_raw_log_csv,
)
from linkid.sensor_calibration import synthetic_instrument
from linkid.uncertainty_sources import (
    CyclicDriftModel,
    MeasurementClock,
    SensorNoiseModel,
    UncertaintySourceSet,
)


def test_closed_loop_exact(id_poses, id_jacobian):
    p = table1_parameters()
    chi = simulate_measurement_run(SimulationScenario(p, id_poses))
    np.testing.assert_allclose(chi.stacked, id_jacobian.matrix @ p, rtol=0, atol=1e-15)
    res = identify(id_jacobian, chi)
    assert np.max(np.abs(res.parameters - p) / np.abs(p)) < 1e-9
    assert chi.timestamps[0] == pytest.approx(0.74)


def test_single_setup_error(topology, id_poses):
    p = np.zeros(14)
    j = PARAMETER_NAMES.index("dz_W")
    p[j] = 0.0188
    chi = simulate_measurement_run(SimulationScenario(p, id_poses[:50]))
    for k in range(50):
        np.testing.assert_allclose(chi.values[k], build_jacobian_row(topology, id_poses[k])[:, j] * 0.0188, atol=1e-12)


def test_scenario_validation(id_poses):
    with pytest.raises(SimulationError):
        SimulationScenario(table1_parameters(), ())
    with pytest.raises(SimulationError):
        SimulationScenario(table1_parameters(), id_poses, seed=None)


def test_fitted_differs_from_instrument(id_poses):
    p = table1_parameters()
    sc = SimulationScenario(p, id_poses[:30], fitted=synthetic_instrument(offset_um=(0, 0, 0)))
    chi = simulate_measurement_run(sc)
    true = SimulationScenario(p, id_poses[:30]).model().tau
    assert np.abs(chi.values - true).max() > 1e-3  # offset moved


def test_saturation_flagged(id_poses):
    p = table1_parameters() * 10
    chi = simulate_measurement_run(SimulationScenario(p, id_poses))
    assert chi.flags.any() and len(chi) == 807


def test_seed_reproducible(id_poses):
    sc = SimulationScenario(table1_parameters(), id_poses, sources=UncertaintySourceSet.paper(), seed=3)
    a, b = simulate_measurement_run(sc), simulate_measurement_run(sc)
    np.testing.assert_array_equal(a.values, b.values)


def test_raw_log_single_pose(id_poses):
    sc = SimulationScenario(table1_parameters(), id_poses[:1], sources=UncertaintySourceSet(sensor=SensorNoiseModel()))
    log = simulate_raw_log(sc, dwell_s=1.0)
    assert log.samples.shape == (1000, 3)
    n = len(log.samples)
    np.testing.assert_allclose(log.samples.mean(axis=0), log.pose_levels_um[0],
                               atol=4 * 0.40 / np.sqrt(n))


def test_raw_log_duration(id_poses):
    sc = SimulationScenario(table1_parameters(), id_poses)
    log = simulate_raw_log(sc)
    assert log.duration == pytest.approx(807 * 0.74, abs=1.0)
    assert 9.0 < log.duration / 60 < 11.0
    assert len(log.samples) == round(log.duration * log.rate_hz)


def test_raw_log_dwell_minimum(id_poses):
    with pytest.raises(SimulationError):
        simulate_raw_log(SimulationScenario(table1_parameters(), id_poses[:3]), dwell_s=0.1)


def test_extract_round_trip(id_poses):
    src = UncertaintySourceSet(sensor=SensorNoiseModel())
    sc = SimulationScenario(table1_parameters(), id_poses[:40], sources=src, seed=5)
    log = simulate_raw_log(sc)
    ev = extract_steady_values(log, 40)
    assert ev.frame == "sensor"
    n_used = 0.6 * 0.3 * 1000  # worst-case plateau length after trimming
    err = np.abs(ev.values * 1e3 - log.pose_levels_um)
    assert err.max() < 5 * 0.40 / np.sqrt(n_used)


def test_extract_to_machine_frame(id_poses):
    inst = synthetic_instrument()
    sc = SimulationScenario(table1_parameters(), id_poses[:20], instrument=inst)
    ev = extract_steady_values(simulate_raw_log(sc), 20, transform=inst)
    np.testing.assert_allclose(ev.values, sc.model().tau, atol=1e-9)


def test_constant_log():
    log = RawSensorLog(1000.0, np.tile([1.0, 2.0, 3.0], (800, 1)))
    ev = extract_steady_values(log, 1)
    np.testing.assert_allclose(ev.values * 1e3, [[1.0, 2.0, 3.0]])


def test_plateau_count_mismatch(id_poses):
    log = simulate_raw_log(SimulationScenario(table1_parameters(), id_poses[:10]))
    with pytest.raises(PlateauCountError) as exc:
        extract_steady_values(log, 11)
    assert exc.value.detected == 10 and exc.value.expected == 11
    with pytest.raises(PlateauCountError) as exc:
        extract_steady_values(log, 9)
    assert exc.value.merge_candidates


def test_drift_sign(id_poses):
    c = np.array([0.0, 2.5, 0.0])
    base = SimulationScenario(table1_parameters(), id_poses[:10])
    drift = SimulationScenario(table1_parameters(), id_poses[:10],
                               sources=UncertaintySourceSet(drift=CyclicDriftModel.constant(c)))
    a = extract_steady_values(simulate_raw_log(base), 10).values * 1e3
    b = extract_steady_values(simulate_raw_log(drift), 10).values * 1e3
    np.testing.assert_allclose(b - a, np.tile(-c, (10, 1)), atol=1e-9)


def test_extraction_unbiased(id_poses):
    src = UncertaintySourceSet(sensor=SensorNoiseModel())
    errs = []
    for seed in range(100):
        sc = SimulationScenario(table1_parameters(), id_poses[:5], sources=src, seed=seed)
        log = simulate_raw_log(sc)
        errs.append(extract_steady_values(log, 5).values * 1e3 - log.pose_levels_um)
    assert np.abs(np.mean(errs, axis=0)).max() < 0.05


def test_raw_log_csv_and_binary_round_trip(tmp_path, id_poses):
    sc = SimulationScenario(table1_parameters(), id_poses[:3], sources=UncertaintySourceSet(sensor=SensorNoiseModel()))
    log = simulate_raw_log(sc)
    write_raw_log_binary(log, tmp_path / "l.bin")
    b = read_raw_log_binary(tmp_path / "l.bin")
    np.testing.assert_array_equal(b.samples, log.samples)
    assert b.rate_hz == log.rate_hz and b.t_start == log.t_start
    write_raw_log_csv(log, tmp_path / "l.csv")
    c = read_raw_log_csv(tmp_path / "l.csv")
    np.testing.assert_allclose(c.samples, log.samples, rtol=1e-15)
    assert c.rate_hz == pytest.approx(1000.0)


def test_binary_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"XXXX" + bytes(28))
    with pytest.raises(SimulationError):
        read_raw_log_binary(tmp_path / "x.bin")


def test_clock_resized_to_trajectory(id_poses):
    sc = SimulationScenario(table1_parameters(), id_poses[:10], clock=MeasurementClock(1.0, 0.5, 807))
    assert sc.clock.n_poses == 10 and sc.clock.t0 == 1.0
