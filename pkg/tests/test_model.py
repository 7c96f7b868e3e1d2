from pathlib import Path

import numpy as np
import pytest

from ldgkit import expr, model
from ldgkit.model import (
    BUILTIN_NAMES,
    ModelError,
    ModelFileError,
    PdeModel,
    builtin_model,
    format_model,
    load_model,
    parse_model_text,
    reserved_symbols,
    save_model,
    validate,
)

FIXTURES = Path(__file__).parent / "fixtures"


def test_reserved_symbols_spelling():
    syms = reserved_symbols(ncu=2, nd=2, nw=1, nparam=1)
    assert syms == ("x1", "x2", "t", "u1", "u2",
                    "q1_1", "q1_2", "q2_1", "q2_2",
                    "w1", "mu1", "n1", "n2")


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def test_load_poisson3d_fixture():
    m = load_model(FIXTURES / "poisson3d.model")
    assert m.kind == "D" and m.ncu == 1 and m.nd == 3
    assert m.flux == ["q1_1", "q1_2", "q1_3"]
    assert m.is_steady()
    assert validate(m) == []


def test_model_roundtrip(tmp_path):
    m = load_model(FIXTURES / "poisson3d.model")
    path = tmp_path / "copy.model"
    save_model(m, path)
    m2 = load_model(path)
    assert m2.kind == m.kind and m2.flux == m.flux and m2.source == m.source
    assert sorted(m2.bcs) == sorted(m.bcs)
    # semantically equal after parsing: compiled plans agree
    b = {"x1": [0.3], "x2": [0.7], "x3": [0.1]}
    v1 = expr.evaluate(m.source_plan(), b)
    v2 = expr.evaluate(m2.source_plan(), b)
    np.testing.assert_array_equal(v1, v2)


def test_convection_model_rejects_gradients():
    text = """
[model] kind=C ncu=1 nd=1 nparam=0
[mass]
m1=1
[flux]
f1_1=q1_1
[source]
s1=0
"""
    m = parse_model_text(text)
    diags = validate(m)
    assert any(d.code == "q-in-convection-model" for d in diags)


def test_mu_from_file():
    text = """
[model] kind=C ncu=3 nd=2 nparam=1
[mu] mu1=1e4
[mass]
m1=1
m2=1
m3=1
[flux]
f1_1=u2
f1_2=u3
f2_1=u2*u2/u1 + mu1*u1*u1/2
f2_2=u2*u3/u1
f3_1=u2*u3/u1
f3_2=u3*u3/u1 + mu1*u1*u1/2
[source]
s1=0
s2=0
s3=0
"""
    m = parse_model_text(text)
    assert m.nparam >= 1 and m.mu[0] == 1e4
    assert validate(m) == []


def test_file_error_reports_line():
    with pytest.raises(ModelFileError) as e:
        parse_model_text("[model] kind=D ncu=1 nd=1\n[flux]\nnonsense\n")
    assert e.value.line == 3


def test_missing_flux_entry():
    with pytest.raises(ModelFileError):
        parse_model_text(
            "[model] kind=D ncu=1 nd=2\n[flux]\nf1_1=q1_1\n")


def test_golden_format(tmp_path):
    # the normative sectioned grammar: format then reload reproduces values
    m = builtin_model("shallow_water", mu=[1e4])
    text = format_model(m)
    assert text.splitlines()[0].startswith("[model] kind=C ncu=3 nd=2")
    m2 = parse_model_text(text)
    assert m2.flux == m.flux
    assert m2.mu[0] == 1e4


# ---------------------------------------------------------------------------
# builtins
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_validate_clean(name):
    m = builtin_model(name)
    assert validate(m) == []


def test_builtin_burgers():
    m = builtin_model("burgers", nd=1)
    assert m.kind == "C" and m.ncu == 1
    assert m.flux == ["u1*u1/2"]


def test_builtin_poisson_steady():
    m = builtin_model("poisson", nd=3)
    assert m.kind == "D"
    assert m.mass == ["0"]
    assert m.is_steady()


def test_builtin_shallow_water_x_flux():
    # oracle: textbook shallow-water flux in the x direction for (h, hu, hv)
    m = builtin_model("shallow_water")
    xflux = [m.flux[i * m.nd] for i in range(m.ncu)]
    assert xflux == ["u2", "u2*u2/u1 + mu1*u1*u1/2", "u2*u3/u1"]
    # numeric check against hand-computed values at (h, hu, hv) = (2, 3, 1), g=10
    plan = m.flux_plan()
    out = expr.evaluate(plan, {
        "x1": [0.0], "x2": [0.0], "t": [0.0],
        "u1": [2.0], "u2": [3.0], "u3": [1.0],
        "mu1": [10.0], "n1": [1.0], "n2": [0.0]})
    f = out[:, 0].reshape(3, 2)
    assert f[0, 0] == 3.0
    assert f[1, 0] == pytest.approx(3 * 3 / 2 + 10 * 4 / 2)
    assert f[2, 0] == pytest.approx(3 * 1 / 2)


def test_builtin_wave_kind():
    m = builtin_model("wave", nd=2)
    assert m.kind == "W" and m.nw == 1
    assert m.ode.sw == ["u1"]
    assert m.flux == ["mu1*mu1*q1_1", "mu1*mu1*q1_2"]


def test_builtin_unknown():
    with pytest.raises(ModelError):
        builtin_model("heat_pump")


def test_builtin_bad_nd():
    with pytest.raises(ModelError):
        builtin_model("shallow_water", nd=3)


# ---------------------------------------------------------------------------
# validation diagnostics
# ---------------------------------------------------------------------------

def test_validate_dimension_mismatch():
    m = PdeModel(kind="D", ncu=1, nd=3, mass=["0"], flux=["q1_1", "q1_2"],
                 source=["0"])
    diags = validate(m)
    assert any(d.code == "dimension-mismatch" for d in diags)


def test_validate_missing_ode_state():
    m = PdeModel(kind="W", ncu=1, nd=2, nw=0, mass=["1"],
                 flux=["q1_1", "q1_2"], source=["0"],
                 init={"u1": "0", "w1": "0"})
    diags = validate(m)
    assert any(d.code == "missing-ode-state" for d in diags)


def test_validate_alpha_beta_zero():
    m = PdeModel(kind="D", ncu=1, nd=1, nw=1, mass=["1"], flux=["q1_1"],
                 source=["0"], ode=model.OdeSpec(alpha=0.0, beta=0.0, sw=["0"]))
    diags = validate(m)
    assert any(d.code == "alpha-beta-zero" for d in diags)


def test_validate_unknown_symbol():
    m = PdeModel(kind="C", ncu=1, nd=1, mass=["1"], flux=["u7"], source=["0"])
    diags = validate(m)
    assert any(d.code == "unknown-symbol" for d in diags)


def test_cd_reduction():
    # a D model with no q references re-validates cleanly as kind C
    m = PdeModel(kind="D", ncu=1, nd=2, mass=["1"],
                 flux=["mu1*u1", "mu2*u1"], source=["0"], nparam=2,
                 mu=np.array([1.0, 0.5]))
    assert validate(m) == []
    as_c = PdeModel(kind="C", ncu=1, nd=2, mass=["1"],
                    flux=["mu1*u1", "mu2*u1"], source=["0"], nparam=2,
                    mu=np.array([1.0, 0.5]))
    assert validate(as_c) == []
    # and one that does reference q fails the reduction
    md = PdeModel(kind="D", ncu=1, nd=2, mass=["1"],
                  flux=["q1_1", "q1_2"], source=["0"])
    as_c2 = PdeModel(kind="C", ncu=1, nd=2, mass=["1"],
                     flux=["q1_1", "q1_2"], source=["0"])
    assert validate(md) == []
    assert any(d.code == "q-in-convection-model" for d in validate(as_c2))
