import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linkid.kinematics import (
    CHAIN_ORDER,
    N_PARAMS,
    PARAMETER_NAMES,
    Axis,
    KinematicsError,
    MachineTopology,
    Pose,
    SingularSystemError,
    StrokeError,
    UnderdeterminedError,
    assemble_identification_jacobian,
    build_jacobian_row,
    condition_number,
    forward_nominal,
    from_report_units,
    homogeneous,
    jacobian_finite_difference,
    load_topology,
    predict_volumetric_errors,
    read_jacobian_csv,
    rotation,
    save_topology,
    table1_parameters,
    to_report_units,
    volumetric_error_exact,
    write_jacobian_csv,
)
from linkid.trajectory import inverse_kinematics_coincidence


def random_pose(topology, rng, k=1):
    a = rng.uniform(0, 180)
    c = rng.uniform(0, 360)
    p = inverse_kinematics_coincidence(topology, a, c, k)
    d = rng.uniform(-20, 20, 3)
    return Pose(p.a, p.c, p.x + d[0], p.y + d[1], p.z + d[2], k)


def test_chain_order_and_unit_directions(topology):
    assert tuple(ax.name for ax in topology.axes) == CHAIN_ORDER
    for ax in topology.axes:
        assert abs(np.linalg.norm(ax.direction) - 1.0) < 1e-12


def test_linear_strokes_match_machine():
    t = MachineTopology.default()
    spans = {n: t.axis(n).stroke[1] - t.axis(n).stroke[0] for n in "XYZ"}
    assert spans == {"X": 650.0, "Y": 700.0, "Z": 450.0}


def test_a_axis_tilted_45_degrees(topology):
    d = np.asarray(topology.axis("A").direction)
    assert math.isclose(math.degrees(math.acos(d @ (0, 0, 1))), 45.0, abs_tol=1e-9)


def test_rejects_non_unit_direction():
    with pytest.raises(KinematicsError):
        Axis("X", "linear", direction=(1.0, 0.1, 0.0), stroke=(-1, 1))


def test_rejects_wrong_chain_order(topology):
    axes = list(topology.axes)
    axes[1], axes[2] = axes[2], axes[1]
    with pytest.raises(KinematicsError):
        MachineTopology(tuple(axes), topology.errors)


def test_home_coincidence(topology):
    p = inverse_kinematics_coincidence(topology, 0.0, 0.0)
    g = forward_nominal(topology, p)
    assert np.linalg.norm(g.tool_point - g.ball_point) < 1e-9


def test_z_shift_moves_tool_up(topology):
    p = inverse_kinematics_coincidence(topology, 20.0, 50.0)
    g = forward_nominal(topology, Pose(p.a, p.c, p.x, p.y, p.z + 1.0))
    np.testing.assert_allclose(g.tool_point - g.ball_point, (0, 0, 1), atol=1e-12)


def test_a90_against_matrix_composition(topology):
    pose = Pose(90.0, 0.0, 0.0, 10.0, 0.0)
    g = forward_nominal(topology, pose, check=False)
    A = topology.axis("A")
    # independent composition: Trans(y) * Rot_A(90 about its anchor) * ball
    o = np.asarray(A.location)
    RA = homogeneous(rotation(np.asarray(A.direction), math.pi / 2))
    T = homogeneous(t=10.0 * np.asarray(topology.axis("Y").direction)) @ homogeneous(t=o) @ RA @ homogeneous(t=-o)
    expected = (T @ np.append(topology.ball, 1.0))[:3]
    np.testing.assert_allclose(g.ball_point, expected, atol=1e-12)


def test_out_of_stroke_names_axis(topology):
    with pytest.raises(StrokeError) as exc:
        forward_nominal(topology, Pose(0, 0, 400.0, 0, 0))
    assert exc.value.axis == "X"
    assert "X" in str(exc.value)


def test_tool_setup_column_is_unit_x(topology, rng):
    for _ in range(5):
        J = build_jacobian_row(topology, random_pose(topology, rng))
        np.testing.assert_allclose(J[:, PARAMETER_NAMES.index("dx_T")], (1, 0, 0), atol=1e-15)


def test_zero_lever_arm_gives_zero_tilt_column():
    # tool point at the A anchor: no moment arm for either A tilt
    topo = MachineTopology.default(ball=(0.0, 0.0, 0.0), a_anchor=(0.0, 0.0, 0.0))
    pose = inverse_kinematics_coincidence(topo, 35.0, 0.0)
    J = build_jacobian_row(topo, pose)
    for name in ("dbeta_A", "dgamma_A"):
        np.testing.assert_allclose(J[:, PARAMETER_NAMES.index(name)], 0.0, atol=1e-12)


def test_translation_columns_are_direction_cosines(topology, rng):
    for _ in range(20):
        J = build_jacobian_row(topology, random_pose(topology, rng))
        assert np.all(np.abs(J[:, 7:]) <= 1.0 + 1e-12)


def test_jacobian_matches_finite_differences(topology, rng):
    for _ in range(10):
        pose = random_pose(topology, rng)
        dev = np.abs(build_jacobian_row(topology, pose) - jacobian_finite_difference(topology, pose))
        assert dev.max() < 1e-6


def test_linear_model_matches_exact_for_small_errors(topology, rng):
    p = table1_parameters()
    pose = random_pose(topology, rng)
    lin = build_jacobian_row(topology, pose) @ p
    exact = volumetric_error_exact(topology, pose, p)
    # second-order terms only: |p|^2 times the lever arm
    assert np.abs(lin - exact).max() < 1e-4 * np.abs(exact).max()


def test_assemble_shapes_and_order(topology, id_poses):
    J5 = assemble_identification_jacobian(topology, id_poses[:5])
    assert J5.matrix.shape == (15, 14)
    np.testing.assert_array_equal(J5.block(2), build_jacobian_row(topology, id_poses[2]))


def test_assemble_full_trajectory(id_jacobian):
    assert id_jacobian.matrix.shape == (2421, 14)
    assert id_jacobian.n_poses == 807


def test_assemble_rejects_too_few(topology, id_poses):
    with pytest.raises(UnderdeterminedError):
        assemble_identification_jacobian(topology, id_poses[:4])


def test_pose_permutation_permutes_blocks(topology, id_poses, rng):
    sub = id_poses[:12]
    perm = rng.permutation(len(sub))
    J = assemble_identification_jacobian(topology, sub).matrix
    Jp = assemble_identification_jacobian(topology, [sub[i] for i in perm]).matrix
    np.testing.assert_array_equal(Jp.reshape(-1, 3, 14), J.reshape(-1, 3, 14)[perm])


def test_condition_number_oracles():
    assert condition_number(np.eye(14)) == pytest.approx(1.0)
    A = np.zeros((5, 2))
    A[0, 0], A[1, 1] = 10.0, 1.0
    assert condition_number(A) == pytest.approx(10.0)


def test_condition_number_rank_deficient():
    A = np.ones((20, 14))
    with pytest.raises(SingularSystemError) as exc:
        condition_number(A)
    assert exc.value.rank == 1


def test_condition_number_baseline(id_jacobian):
    assert condition_number(id_jacobian) == pytest.approx(2169.6, rel=1e-3)
    assert condition_number(id_jacobian, equilibrate=True) < 100


def test_predict_zero_and_single(topology, id_poses, id_jacobian):
    assert not predict_volumetric_errors(id_jacobian, np.zeros(14)).any()
    p = np.zeros(14)
    j = PARAMETER_NAMES.index("dz_W")
    p[j] = 0.010
    pred = predict_volumetric_errors(id_jacobian, p)
    for k in (0, 100, 806):
        np.testing.assert_allclose(pred[k], build_jacobian_row(topology, id_poses[k])[:, j] * 0.010)


def test_predict_table1_magnitude(id_jacobian):
    pred = predict_volumetric_errors(id_jacobian, table1_parameters()) * 1e3
    assert 10 < np.abs(pred).max() < 100


def test_predict_dimension_mismatch(id_jacobian):
    with pytest.raises(KinematicsError):
        predict_volumetric_errors(id_jacobian, np.zeros(13))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
def test_prediction_linearity(alpha, beta, seed):
    J = _small_jacobian()
    r = np.random.default_rng(seed)
    p1, p2 = r.normal(size=14) * 1e-5, r.normal(size=14) * 1e-5
    lhs = predict_volumetric_errors(J, alpha * p1 + beta * p2)
    rhs = alpha * predict_volumetric_errors(J, p1) + beta * predict_volumetric_errors(J, p2)
    scale = max(np.abs(lhs).max(), 1e-300)
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale + 1e-300


_J_CACHE = {}


def _small_jacobian():
    if "J" not in _J_CACHE:
        from linkid.trajectory import TrajectorySpec, generate_identification_trajectory
        topo = MachineTopology.default()
        poses = generate_identification_trajectory(TrajectorySpec.identification(n_poses=60, max_condition=None), topo)
        _J_CACHE["J"] = assemble_identification_jacobian(topo, poses)
    return _J_CACHE["J"]


def test_lever_arm_doubling_pure():
    # with the A anchor at the ball's projection the arm is purely radial
    perp = np.array([0.0, 1.0, 0.0])
    j = [PARAMETER_NAMES.index("dbeta_A"), PARAMETER_NAMES.index("dgamma_A")]
    n1 = np.linalg.norm(build_jacobian_row(MachineTopology.default(ball=tuple(40 * perp)), Pose(0, 0, 0, 0, 0))[:, j], axis=0)
    n2 = np.linalg.norm(build_jacobian_row(MachineTopology.default(ball=tuple(80 * perp)), Pose(0, 0, 0, 0, 0))[:, j], axis=0)
    np.testing.assert_allclose(n2, 2 * n1, rtol=1e-12)


def test_report_unit_round_trip():
    p = table1_parameters()
    np.testing.assert_allclose(from_report_units(to_report_units(p)), p, rtol=1e-15)
    assert to_report_units(p)[1] == pytest.approx(138.3)


def test_topology_json_round_trip(tmp_path, topology):
    path = tmp_path / "topo.json"
    save_topology(topology, path)
    again = load_topology(path)
    assert again.to_dict() == topology.to_dict()
    json.loads(path.read_text())


def test_jacobian_csv_round_trip(tmp_path, topology, id_poses):
    J = assemble_identification_jacobian(topology, id_poses[:20])
    path = tmp_path / "J.csv"
    write_jacobian_csv(J, path)
    back = read_jacobian_csv(path)
    np.testing.assert_array_equal(back.matrix, J.matrix)
    assert back.pose_indices == J.pose_indices
    assert path.read_text().splitlines()[0].split(",")[2:] == list(PARAMETER_NAMES)


def test_parameter_count():
    assert N_PARAMS == len(PARAMETER_NAMES) == 14
