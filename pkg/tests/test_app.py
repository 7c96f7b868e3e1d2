import json
import os
from pathlib import Path

import numpy as np
import pytest

from ldgkit import cli
from ldgkit.config import ConfigError, RunConfig, const_eval, parse_config_text
from ldgkit.diagnostics import (
    compute_functional,
    compute_l2_error,
    format_table,
    observed_rate,
)
from ldgkit.disc import LdgSystem, SolverState
from ldgkit.driver import run_convergence, run_simulation
from ldgkit.master import build_master
from ldgkit.mesh import build_face_topology, generate_structured, import_msh
from ldgkit.model import BoundaryCondition, builtin_model
from ldgkit.vtu import export_vtu, state_fields

FIXTURES = Path(__file__).parent / "fixtures"

TWO_TRI = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
6
1 1 2 10 10 1 2
2 1 2 11 11 2 3
3 1 2 12 12 3 4
4 1 2 13 13 4 1
5 2 2 0 0 1 2 3
6 2 2 0 0 1 3 4
$EndElements
"""

DECAY_CONFIG = """
[model] builtin=burgers
[mesh] kind=line nx=2 xmin=0 xmax=1 periodic=x
[run] p=1 stages=1 order=1 dt=0.1 nt=10
[solver] abs_tol=1e-12 forcing=1e-12 precond=identity jv_mode=tangent
[output] dir={out} reproducible=1
"""


def unit_square_system(n=2, p=2, kind="quad"):
    m = builtin_model("burgers", nd=2)
    for tag in range(1, 5):
        m.bcs[tag] = BoundaryCondition(type="dirichlet", data=["0"])
    mesh = generate_structured([(0, 1), (0, 1)], [n, n], kind)
    topo = build_face_topology(mesh)
    return LdgSystem(m, mesh, topo, build_master(kind, p))


# ---------------------------------------------------------------------------
# error norms and functionals
# ---------------------------------------------------------------------------

def test_l2_error_of_interpolant_polynomial():
    sys = unit_square_system(p=2)
    x = sys.disc.node_x
    u = (1.0 + x[..., 0] + x[..., 1] ** 2)[..., None]
    st = SolverState(u=u, q=None, w=None, t=0.0)
    norms = compute_l2_error(sys, st, ["1 + x1 + x2^2"])
    assert norms.error_u <= 1e-12


def test_l2_error_zero_vs_one():
    sys = unit_square_system()
    u = np.zeros((sys.n_elements, sys.n_nodes, 1))
    st = SolverState(u=u, q=None, w=None, t=0.0)
    norms = compute_l2_error(sys, st, ["1"])
    assert norms.error_u == pytest.approx(1.0, rel=1e-12)


def test_l2_error_zero_exact_flagged():
    sys = unit_square_system()
    u = np.full((sys.n_elements, sys.n_nodes, 1), 0.5)
    st = SolverState(u=u, q=None, w=None, t=0.0)
    norms = compute_l2_error(sys, st, ["0"])
    assert norms.absolute_u
    assert norms.error_u == pytest.approx(0.5, rel=1e-12)


def test_l2_error_self_is_zero():
    sys = unit_square_system(p=1)
    x = sys.disc.node_x
    u = (0.25 + 2 * x[..., 0] - x[..., 1])[..., None]
    st = SolverState(u=u, q=None, w=None, t=0.0)
    norms = compute_l2_error(sys, st, ["0.25 + 2*x1 - x2"])
    assert norms.error_u <= 1e-13


def test_functional_constant_and_linear():
    sys = unit_square_system()
    u = np.zeros((sys.n_elements, sys.n_nodes, 1))
    st = SolverState(u=u, q=None, w=None, t=0.0)
    assert compute_functional(sys, st, "1") == pytest.approx(1.0, abs=1e-12)
    assert compute_functional(sys, st, "x1") == pytest.approx(0.5, abs=1e-12)


def test_observed_rate_synthetic():
    # E = C h^r recovers r exactly
    r = 2.37
    e1, e2 = 3.0 * 0.5 ** r, 3.0 * 0.25 ** r
    assert observed_rate(e1, e2, 0.5, 0.25) == pytest.approx(r, abs=1e-10)


# ---------------------------------------------------------------------------
# vtu export
# ---------------------------------------------------------------------------

def test_vtu_single_p2_quad(tmp_path):
    mesh = generate_structured([(0, 1), (0, 1)], [1, 1], "quad")
    master = build_master("quad", 2)
    u = np.arange(9.0)[None, :]
    path = tmp_path / "one.vtu"
    export_vtu(mesh, master, {"u1": u}, path)
    text = path.read_text()
    assert 'NumberOfPoints="9"' in text
    assert 'NumberOfCells="4"' in text
    assert 'Name="u1"' in text


def test_vtu_field_length_checked(tmp_path):
    mesh = generate_structured([(0, 1), (0, 1)], [1, 1], "quad")
    master = build_master("quad", 2)
    with pytest.raises(ValueError):
        export_vtu(mesh, master, {"u1": np.zeros((1, 4))}, tmp_path / "x.vtu")


def test_vtu_golden_two_triangles(tmp_path):
    msh = tmp_path / "two_tri.msh"
    msh.write_text(TWO_TRI)
    mesh = import_msh(msh)
    master = build_master("tri", 1)
    u = np.array([[0.0, 1.0, 2.0], [0.0, 2.0, 3.0]])
    out = tmp_path / "two_tri_p1.vtu"
    export_vtu(mesh, master, {"u1": u}, out)
    golden = (FIXTURES / "two_tri_p1.vtu").read_bytes()
    assert out.read_bytes() == golden


def test_state_fields_names():
    sys = unit_square_system()
    st = sys.interpolate_initial()
    fields = state_fields(sys, st)
    assert "u1" in fields and fields["u1"].shape == (sys.n_elements,
                                                     sys.n_nodes)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_const_eval_pi():
    assert const_eval("2*pi") == pytest.approx(2 * np.pi, rel=1e-15)


def test_config_parse_and_validate(tmp_path):
    cfg = parse_config_text(DECAY_CONFIG.format(out=tmp_path))
    cfg.validate()
    assert cfg.model_builtin == "burgers"
    assert cfg.mesh.kind == "line" and cfg.mesh.counts == (2,)
    assert cfg.mesh.periodic_axes == ("x",)
    assert cfg.dt == 0.1 and cfg.nt == 10
    assert cfg.reproducible


def test_config_dt_nt_tf_consistency():
    cfg = RunConfig(model_builtin="burgers", dt=0.1, nt=10, tf=2.0)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_requires_model():
    cfg = RunConfig(dt=0.1, nt=1)
    with pytest.raises(ConfigError):
        cfg.validate()


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def decay_config(tmp_path):
    text = """
[model] path={model}
[mesh] kind=line nx=2 xmin=0 xmax=1 periodic=x
[run] p=1 stages=1 order=1 dt=0.1 nt=10
[solver] abs_tol=1e-13 forcing=1e-12 precond=identity jv_mode=tangent
[output] dir={out} reproducible=1
"""
    model_text = """
[model] kind=C ncu=1 nd=1 nparam=0
[mass]
m1=1
[flux]
f1_1=0
[source]
s1=0-u1
[numflux] tau=0
wavespeed=0
[init]
u1=1
"""
    mp = tmp_path / "decay.model"
    mp.write_text(model_text)
    cfg = parse_config_text(text.format(model=mp, out=tmp_path / "out"))
    cfg.validate()
    return cfg


def test_run_simulation_decay(tmp_path):
    cfg = decay_config(tmp_path)
    result = run_simulation(cfg)
    # implicit Euler: u(1) = (1/1.1)^10
    want = (1 / 1.1) ** 10
    np.testing.assert_allclose(result.state.u, want, rtol=1e-10)
    assert result.summary["all_finite"]
    assert os.path.exists(result.stats_csv)
    with open(result.stats_csv) as f:
        lines = f.read().splitlines()
    assert lines[0] == "step,newton_iters,gmres_iters,residual"
    assert len(lines) == 11


def test_run_simulation_deterministic_csv(tmp_path):
    cfg1 = decay_config(tmp_path)
    cfg1.out_dir = str(tmp_path / "a")
    r1 = run_simulation(cfg1)
    cfg2 = decay_config(tmp_path)
    cfg2.out_dir = str(tmp_path / "b")
    r2 = run_simulation(cfg2)
    assert open(r1.stats_csv, "rb").read() == open(r2.stats_csv, "rb").read()


def test_run_simulation_writes_vtu_and_summary(tmp_path):
    cfg = decay_config(tmp_path)
    cfg.cadence = 5
    result = run_simulation(cfg)
    assert any(f.endswith("sol_000000.vtu") for f in result.vtu_files)
    assert any(f.endswith("sol_final.vtu") for f in result.vtu_files)
    summary = json.load(open(os.path.join(cfg.out_dir, "summary.json")))
    assert summary["all_finite"] is True


def test_run_convergence_steady_poisson(tmp_path):
    text = f"""
[model] path={FIXTURES / 'poisson2d.model'}
[mesh] kind=tri nx=2 ny=2 xmin=0 xmax=1 ymin=0 ymax=1
[run] p=1 steady=1
[solver] abs_tol=1e-10 rel_tol=3e-8 forcing=1e-8 precond=block_jacobi
[output] dir={tmp_path / 'conv'}
[exact]
u1=sin(pi*x1)*sin(pi*x2)
q1_1=0-pi*cos(pi*x1)*sin(pi*x2)
q1_2=0-pi*sin(pi*x1)*cos(pi*x2)
"""
    cfg = parse_config_text(text)
    rows = run_convergence(cfg, [2, 4, 8], [1], quiet=True)
    assert len(rows) == 3
    assert not any(r.failed for r in rows)
    assert rows[-1].rate_u > 1.6
    assert rows[-1].rate_q > 0.6
    csv_path = os.path.join(cfg.out_dir, "convergence.csv")
    lines = open(csv_path).read().splitlines()
    assert lines[0] == "p,n,error_u,rate_u,error_q,rate_q"
    assert len(lines) == 4


def test_run_convergence_exact_in_space(tmp_path):
    # exact solution inside the FE space: errors at roundoff, rates marked x
    text = f"""
[model] path={FIXTURES / 'laplace2d.model'}
[mesh] kind=quad nx=2 ny=2 xmin=0 xmax=1 ymin=0 ymax=1
[run] p=2 steady=1
[solver] abs_tol=1e-12 rel_tol=1e-11 forcing=1e-11 precond=block_jacobi
[output] dir={tmp_path / 'conv2'}
[exact]
u1=x1
q1_1=0-1
q1_2=0
"""
    cfg = parse_config_text(text)
    rows = run_convergence(cfg, [2, 4], [2], quiet=True)
    assert all(r.error_u <= 1e-10 for r in rows)
    assert rows[-1].rate_u is None
    assert "x" in format_table(rows)


def test_run_simulation_missing_mesh_fails(tmp_path):
    text = """
[model] builtin=burgers
[mesh] kind=quad msh=/nonexistent/mesh.msh
[run] p=1 dt=0.1 nt=1
[output] dir={out}
""".format(out=tmp_path)
    cfg = parse_config_text(text)
    with pytest.raises(Exception):
        run_simulation(cfg)


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

def test_cli_run_decay(tmp_path, capsys):
    cfg = decay_config(tmp_path)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("""
[model] path={model}
[mesh] kind=line nx=2 xmin=0 xmax=1 periodic=x
[run] p=1 stages=1 order=1 dt=0.1 nt=2
[solver] abs_tol=1e-13 forcing=1e-12 precond=identity jv_mode=tangent
[output] dir={out}
""".format(model=tmp_path / "decay.model", out=tmp_path / "cliout"))
    rc = cli.main(["run", str(cfg_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "all_finite: True" in out


def test_cli_missing_mesh_exit_code(tmp_path, capsys):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text("""
[model] builtin=burgers
[mesh] kind=quad msh=/nonexistent.msh
[run] p=1 dt=0.1 nt=1
""")
    rc = cli.main(["run", str(cfg_path)])
    assert rc != 0
    assert "error:" in capsys.readouterr().err


def test_cli_codegen(tmp_path, capsys):
    rc = cli.main(["codegen", str(FIXTURES / "poisson3d.model"),
                   "--out", str(tmp_path / "gen")])
    assert rc == 0
    text = (tmp_path / "gen" / "flux.kernel").read_text()
    assert "out0 = q1_1;" in text
    src = (tmp_path / "gen" / "source.kernel").read_text()
    assert "sin" in src


def test_cli_mesh_info(tmp_path, capsys):
    msh = tmp_path / "two.msh"
    msh.write_text(TWO_TRI)
    rc = cli.main(["mesh-info", str(msh)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "elements: 2" in out
    assert "boundary tags: [10, 11, 12, 13]" in out


def test_cli_mu_override(tmp_path, capsys):
    cfg_path = tmp_path / "sw.cfg"
    cfg_path.write_text("""
[model] builtin=shallow_water
[mesh] kind=quad nx=2 ny=2 xmin=0 xmax=2*pi ymin=0 ymax=2*pi periodic=x,y
[run] p=1 stages=1 order=1 dt=0.001 nt=1
[solver] abs_tol=1e-9 forcing=1e-9 precond=mass jv_mode=tangent
[output] dir={out}
""".format(out=tmp_path / "swout"))
    rc = cli.main(["run", str(cfg_path), "--mu", "mu1=1e4"])
    assert rc == 0


def test_run_convergence_rejects_msh_mesh(tmp_path):
    from ldgkit.config import ConfigError, MeshSpec
    cfg = RunConfig(model_builtin="poisson", steady=True,
                    mesh=MeshSpec(kind="tri", msh_path="some.msh"),
                    exact={"u1": "0"})
    with pytest.raises(ConfigError):
        run_convergence(cfg, [2, 4], [1], quiet=True)
