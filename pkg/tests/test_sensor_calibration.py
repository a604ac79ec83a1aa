import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linkid.kinematics import rotation
from linkid.sensor_calibration import (
    CalibrationError,
    DisplacementSet,
    FrameTransform,
    apply_transform,
    fit_frame_transform,
    load_transform,
    read_calibration_pairs_csv,
    save_transform,
    synthetic_instrument,
    transform_quality,
    write_calibration_pairs_csv,
)
from linkid.trajectory import TrajectorySpec, generate_calibration_grid

GRID = generate_calibration_grid(TrajectorySpec.calibration_grid())


def readings(M: FrameTransform, programmed):
    inv = np.linalg.inv(M.matrix)
    return (np.column_stack((programmed, np.ones(len(programmed)))) @ inv.T)[:, :3]


def test_displacement_set_checks_ones_row():
    with pytest.raises(CalibrationError):
        DisplacementSet(np.zeros((4, 5)))
    assert len(DisplacementSet.from_points(GRID)) == 125


def test_identity_fit():
    M = fit_frame_transform(GRID, GRID)
    np.testing.assert_allclose(M.matrix, np.eye(4), atol=1e-12)
    assert M.matrix[3].tolist() == [0.0, 0.0, 0.0, 1.0]


def test_rotation_offset_recovered():
    R = rotation(np.array([1.0, 2.0, 3.0]) / np.sqrt(14), 0.3)
    d = np.array([0.004, -0.002, 0.006])
    measured = (GRID - d) @ R  # R^-1 (p - d) row-wise
    M = fit_frame_transform(GRID, measured)
    np.testing.assert_allclose(M.linear, R, atol=1e-10)
    np.testing.assert_allclose(M.offset, d, atol=1e-10)


def test_gain_only():
    M = fit_frame_transform(GRID, GRID / 0.998)
    np.testing.assert_allclose([np.linalg.norm(M.column(i)) for i in range(3)], 0.998, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.05, 0.05), min_size=12, max_size=12))
def test_any_affine_recovered(vals):
    M0 = np.eye(4)
    M0[:3, :3] += np.array(vals[:9]).reshape(3, 3)
    M0[:3, 3] = vals[9:]
    true = FrameTransform(M0)
    M = fit_frame_transform(GRID, readings(true, GRID))
    np.testing.assert_allclose(M.matrix, M0, atol=1e-10)


def test_coplanar_rejected():
    flat = GRID.copy()
    flat[:, 2] = 0.0
    with pytest.raises(CalibrationError, match="coplanar"):
        fit_frame_transform(GRID, flat)


def test_count_mismatch():
    with pytest.raises(CalibrationError, match="125 programmed vs 124"):
        fit_frame_transform(GRID, GRID[:-1])


def test_quality_identity_and_offset():
    q = transform_quality(FrameTransform.identity())
    assert q.norms == (1.0, 1.0, 1.0) and q.projections == (0.0, 0.0, 0.0) and not q.flagged
    M = np.eye(4)
    M[:3, 3] = (0.005, -0.003, 0.008)
    q = transform_quality(FrameTransform(M))
    np.testing.assert_allclose(q.offset_um, (5, -3, 8))
    assert not q.flagged


def test_quality_flags():
    inst = synthetic_instrument()
    q = transform_quality(inst)
    assert q.projections[0] == pytest.approx(-0.030)
    assert not q.projection_flag and not q.gain_flag and not q.offset_flag
    assert transform_quality(synthetic_instrument(norms=(0.98, 1, 1))).gain_flag
    assert transform_quality(synthetic_instrument(projections=(0.06, 0, 0))).projection_flag
    assert transform_quality(synthetic_instrument(offset_um=(0, 12, 0))).offset_flag


def test_synthetic_instrument_matches_prescription():
    q = transform_quality(synthetic_instrument())
    np.testing.assert_allclose(q.norms, (0.998, 0.996, 0.996), atol=1e-12)
    np.testing.assert_allclose(q.projections, (-0.030, -0.029, -0.021), atol=1e-12)


def test_apply_transform():
    out = apply_transform(FrameTransform.identity(), np.array([1e-3, 2e-3, 3e-3]))
    assert out.frame == "machine"
    np.testing.assert_allclose(out.vector, (1e-3, 2e-3, 3e-3))
    M = np.eye(4)
    M[:3, 3] = (1, 2, 3)
    np.testing.assert_allclose(apply_transform(FrameTransform(M), np.zeros(3)).vector, (1, 2, 3))


def test_closure_under_fit(rng):
    inst = synthetic_instrument()
    meas = readings(inst, GRID) + rng.normal(0, 0.3e-3, GRID.shape)
    M = fit_frame_transform(GRID, meas)
    back = apply_transform(M, meas).vector
    np.testing.assert_allclose(GRID - back, M.residuals, atol=1e-15)


def test_fit_is_local_minimum(rng):
    meas = readings(synthetic_instrument(), GRID) + rng.normal(0, 0.3e-3, GRID.shape)
    M = fit_frame_transform(GRID, meas)
    H = np.column_stack((meas, np.ones(len(meas))))
    sse = lambda A: np.sum((GRID - (H @ A.T)[:, :3]) ** 2)
    base = sse(M.matrix)
    for _ in range(100):
        D = np.zeros((4, 4))
        D[:3] = rng.normal(size=(3, 4))
        D *= 1e-6 / np.linalg.norm(D)
        assert sse(M.matrix + D) >= base - 1e-18


def test_rotation_equivariance(rng):
    meas = readings(synthetic_instrument(), GRID) + rng.normal(0, 0.3e-3, GRID.shape)
    R = rotation(np.array([0.0, 0.6, 0.8]), 0.7)
    r1 = fit_frame_transform(GRID, meas).residuals
    r2 = fit_frame_transform(GRID @ R.T, meas @ R.T).residuals
    np.testing.assert_allclose(np.linalg.norm(r1, axis=1), np.linalg.norm(r2, axis=1), atol=1e-12)


def test_residual_std_tracks_noise(rng):
    meas = readings(FrameTransform.identity(), GRID) + rng.normal(0, 0.5e-3, GRID.shape)
    std = fit_frame_transform(GRID, meas).residual_std_um()
    assert np.all((std > 0.35) & (std < 0.6))


def test_json_round_trip(tmp_path):
    M = fit_frame_transform(GRID, readings(synthetic_instrument(), GRID))
    save_transform(M, tmp_path / "m.json")
    back = load_transform(tmp_path / "m.json")
    np.testing.assert_array_equal(back.matrix, M.matrix)


def test_from_dict_wrong_length():
    with pytest.raises(CalibrationError):
        FrameTransform.from_dict({"matrix": [1.0] * 15})


def test_pairs_csv_round_trip(tmp_path):
    meas = readings(synthetic_instrument(), GRID)
    write_calibration_pairs_csv(GRID, meas, tmp_path / "p.csv")
    p, m = read_calibration_pairs_csv(tmp_path / "p.csv")
    np.testing.assert_allclose(p, GRID, rtol=1e-15)
    np.testing.assert_allclose(m, meas, rtol=1e-12)
