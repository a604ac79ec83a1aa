import numpy as np
import pytest

from linkid.kinematics import MachineTopology, assemble_identification_jacobian
from linkid.trajectory import (
    TrajectorySpec,
    generate_identification_trajectory,
    generate_validation_trajectory,
)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def topology():
    return MachineTopology.default()


@pytest.fixture(scope="session")
def id_poses(topology):
    return generate_identification_trajectory(TrajectorySpec.identification(), topology)


@pytest.fixture(scope="session")
def val_poses(topology):
    return generate_validation_trajectory(TrajectorySpec.validation(), topology)


@pytest.fixture(scope="session")
def id_jacobian(topology, id_poses):
    return assemble_identification_jacobian(topology, id_poses)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
