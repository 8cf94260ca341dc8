import numpy as np
import pytest

import reference as ref
from delay_stab.certification import certify
from delay_stab.simulation import Scenario, run_closed_loop
from delay_stab.spectral import Coefficient, PlantSpec, build_plant_model
from delay_stab.synthesis import DesignParameters, GainSet, design_controller

ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def make_plant(p=(ref.P_COEF,), q=(ref.Q_TILDE,), theta1=ref.THETA1, theta2=ref.THETA2):
    return PlantSpec(Coefficient(poly=list(p)), Coefficient(poly=list(q)), theta1, theta2)


@pytest.fixture(scope="session")
def ref_model():
    return build_plant_model(make_plant())


def _design(model, variant, l, n=3, h_o=ref.H, h_i=0.0):
    params = DesignParameters(ref.DELTA, n, variant, h_o, h_i, n0=ref.N0)
    return design_controller(model, params, gains=GainSet(np.array([ref.K]), np.array([l])))


@pytest.fixture(scope="session")
def design_dirichlet(ref_model):
    return _design(ref_model, "dirichlet", ref.L_DIRICHLET)


@pytest.fixture(scope="session")
def design_neumann(ref_model):
    return _design(ref_model, "neumann", ref.L_NEUMANN)


@pytest.fixture(scope="session")
def design_joint(ref_model):
    return _design(ref_model, "joint", ref.L_DIRICHLET, h_o=1.0, h_i=1.0)


@pytest.fixture(scope="session")
def cert_dirichlet(design_dirichlet):
    return certify(design_dirichlet)


@pytest.fixture(scope="session")
def cert_neumann(design_neumann):
    return certify(design_neumann)


@pytest.fixture(scope="session")
def cert_joint(design_joint):
    return certify(design_joint)


@pytest.fixture(scope="session")
def trace_dirichlet(design_dirichlet, cert_dirichlet):
    scenario = Scenario(design_dirichlet, ref.z0, ref.y0, T=15.0, certificate=cert_dirichlet,
                        artstein_stride=100)
    return run_closed_loop(scenario)


@pytest.fixture(scope="session")
def profile_pair(design_dirichlet, cert_dirichlet):
    """The reference run on both plants, profiles every 0.1 s."""
    runs = {}
    for kind in ("modal", "fd"):
        scenario = Scenario(design_dirichlet, ref.z0, ref.y0, T=15.0, plant_kind=kind,
                            certificate=cert_dirichlet, keep_profiles=True, record_stride=100)
        runs[kind] = run_closed_loop(scenario)
    return runs


@pytest.fixture(scope="session")
def trace_joint(design_joint, cert_joint):
    scenario = Scenario(design_joint, ref.z0_joint, ref.y0_joint, T=15.0, certificate=cert_joint,
                        artstein_stride=100)
    return run_closed_loop(scenario)
