import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import reference as ref
from delay_stab.config import parse_config, parse_config_text, resolve_config, shipped_configs, with_parameter
from delay_stab.errors import ParseError, ValidationError
from delay_stab.expr import compile_expression, evaluate_number

# --- expressions -------------------------------------------------------------------


def test_expression_examples():
    z0 = compile_expression("5*x^2*(x - 3/4)", "x")
    assert z0(1.0) == 1.25
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(z0(x), ref.z0(x), rtol=1e-15)
    y0 = compile_expression("3*cos(10*pi*(tau + 2))*sin(3*pi*tau)", "tau")
    assert y0(-0.3) == pytest.approx(ref.y0(-0.3), rel=1e-14)
    assert evaluate_number("pi/5") == pytest.approx(math.pi / 5)
    assert evaluate_number("-2**2") == -4.0
    assert evaluate_number("sqrt(abs(-16)) + exp(0) + log(e)") == 6.0


def test_constant_expression_broadcasts():
    out = compile_expression("2", "x")(np.zeros(4))
    np.testing.assert_array_equal(out, [2.0] * 4)


@pytest.mark.parametrize("text", ["", "   ", "x +", "import os", "__import__('os')", "y", "sin(x, x)",
                                  "[1, 2]", "x if x else 1", "'a'", "True", "lambda: 1", "x.real"])
def test_rejected_expressions(text):
    with pytest.raises(ParseError):
        compile_expression(text, "x")


def test_non_finite_constant():
    with pytest.raises(ParseError):
        evaluate_number("log(0)")


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_arithmetic_matches_python(a, b):
    f = compile_expression(f"({a!r}) * x - ({b!r})", "x")
    assert f(2.0) == a * 2.0 - b


# --- configuration files -------------------------------------------------------------

BASE = """
[plant]
p.poly = 1
q_tilde.poly = -5
theta1 = pi/5
theta2 = 0

[design]
variant = dirichlet
delta = 0.5
h_o = 2
gains.k = -1.6037
gains.l = 4.0832
"""


def test_shipped_reference_configuration():
    cfg = parse_config("paper_dirichlet.cfg")
    assert cfg.plant.theta1 == pytest.approx(ref.THETA1)
    assert cfg.plant.theta2 == 0.0
    assert cfg.design.delta == ref.DELTA and cfg.design.h_o == ref.H and cfg.design.n == 3
    assert cfg.gains.k[0] == ref.K and cfg.gains.l[0] == ref.L_DIRICHLET
    x = np.linspace(0, 1, 5)
    np.testing.assert_allclose(cfg.simulation.z0(x), ref.z0(x), rtol=1e-15)
    assert cfg.simulation.T == 15.0
    assert cfg.stem == "paper_dirichlet"
    neu = parse_config("paper_neumann")
    assert neu.gains.l[0] == ref.L_NEUMANN and neu.design.variant.value == "neumann"
    assert {"paper_dirichlet.cfg", "paper_neumann.cfg", "paper_joint.cfg", "paper_sweep.cfg"} <= set(shipped_configs())


def test_missing_configuration_names_the_shipped_ones(tmp_path):
    with pytest.raises(ParseError) as info:
        resolve_config(tmp_path / "nowhere.cfg")
    assert "paper_dirichlet.cfg" in str(info.value)


def test_local_file_wins_over_shipped(tmp_path):
    path = tmp_path / "paper_dirichlet.cfg"
    path.write_text(BASE.replace("delta = 0.5", "delta = 0.25"))
    assert parse_config(path).design.delta == 0.25


def test_minimal_configuration():
    cfg = parse_config_text(BASE)
    assert cfg.sections == ("plant", "design")
    assert cfg.design.n0 == 1 and cfg.design.n == 2
    assert cfg.simulation is None and cfg.certification is None
    with pytest.raises(ValidationError):
        cfg.require("certify")
    assert cfg.require("design") is cfg


@pytest.mark.parametrize("text", ["", "  \n# only a comment\n", "no sections here", "[plant\np = 1"])
def test_unreadable_configuration(text):
    with pytest.raises(ParseError):
        parse_config_text(text)


def test_out_of_range_angle():
    with pytest.raises(ValidationError) as info:
        parse_config_text(BASE.replace("theta1 = pi/5", "theta1 = 2.0"))
    assert any("theta1" in v for v in info.value.violations)


def test_unknown_key_and_section():
    with pytest.raises(ValidationError) as info:
        parse_config_text(BASE + "colour = blue\n\n[extras]\nx = 1\n")
    assert "[design] colour: unknown key" in info.value.violations
    assert "[extras]: unknown section" in info.value.violations


def test_every_violation_is_reported():
    text = BASE.replace("delta = 0.5", "delta = -1").replace("gains.l = 4.0832", "") + """
[simulation]
z0 = 5*x^^2
y0 = 0
T = 0
dt = 0.3
"""
    with pytest.raises(ValidationError) as info:
        parse_config_text(text)
    v = info.value.violations
    assert len(v) >= 4
    for key in ("delta", "gains", "z0", "[simulation] t"):
        assert any(key in s for s in v), key


def test_joint_requires_input_delay():
    with pytest.raises(ValidationError) as info:
        parse_config_text(BASE.replace("variant = dirichlet", "variant = joint"))
    assert any("h_i" in s for s in info.value.violations)
    cfg = parse_config_text(BASE.replace("variant = dirichlet", "variant = joint\nh_i = 1"))
    assert cfg.design.horizon == 3.0


def test_with_parameter_replaces_one_field():
    cfg = parse_config_text(BASE)
    changed = with_parameter(cfg.design, "h_o", 3)
    assert changed.h_o == 3.0 and changed.delta == cfg.design.delta
    assert cfg.design.h_o == 2.0
