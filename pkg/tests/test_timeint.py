import numpy as np
import pytest

from ldgkit.disc import LdgSystem
from ldgkit.master import build_master
from ldgkit.mesh import build_face_topology, generate_structured
from ldgkit.model import BoundaryCondition, OdeSpec, PdeModel, builtin_model
from ldgkit.solver import NewtonOptions
from ldgkit.timeint import (
    TimeIntError,
    advance_step,
    dirk_tableau,
    solve_steady,
)

TABLEAUX = [(1, 1), (2, 2), (3, 3), (3, 4)]


def decay_system(p=1, n=1, rate="0-u1", u0="1"):
    """du/dt = -u as a zero-flux PDE model on a periodic 1D mesh."""
    m = PdeModel(kind="C", ncu=1, nd=1, nparam=0, mass=["1"], flux=["0"],
                 source=[rate], wavespeed="0", init={"u1": u0})
    mesh = generate_structured([(0.0, 1.0)], [n], "line")
    topo = build_face_topology(mesh, [(1, 2, (1.0,))])
    return LdgSystem(m, mesh, topo, build_master("line", p))


def run_decay(sys, dt, nt, tableau):
    st = sys.interpolate_initial()
    opts = NewtonOptions(abs_tol=1e-13, rel_tol=1e-13, forcing=1e-12)
    for _ in range(nt):
        st, _ = advance_step(sys, st, dt, tableau, opts)
    return st


# ---------------------------------------------------------------------------
# tableaux
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stages,order", TABLEAUX)
def test_tableau_row_sums(stages, order):
    tb = dirk_tableau(stages, order)
    assert tb.row_sum_defect() <= 1e-14


@pytest.mark.parametrize("stages,order", TABLEAUX)
def test_tableau_order_conditions(stages, order):
    # oracle: direct evaluation of the order conditions
    tb = dirk_tableau(stages, order)
    for name, defect in tb.order_residuals().items():
        assert abs(defect) <= 1e-12, (name, defect)


def test_implicit_euler_tableau():
    tb = dirk_tableau(1, 1)
    np.testing.assert_array_equal(tb.A, [[1.0]])
    assert tb.is_stiffly_accurate


def test_stiffly_accurate_detection():
    assert dirk_tableau(2, 2).is_stiffly_accurate
    assert dirk_tableau(3, 3).is_stiffly_accurate
    assert not dirk_tableau(3, 4).is_stiffly_accurate


def test_unsupported_pair():
    with pytest.raises(TimeIntError):
        dirk_tableau(4, 5)


def test_dirk34_scalar_ode_observed_order():
    # oracle: exp(-1) for u' = -u on [0, 1]
    tb = dirk_tableau(3, 4)
    sys = decay_system()
    errs = []
    for nt in (4, 8, 16):
        st = run_decay(sys, 1.0 / nt, nt, tb)
        errs.append(abs(st.u.ravel()[0] - np.exp(-1.0)))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    assert abs(orders[-1] - 4.0) <= 0.3, (errs, orders)


# ---------------------------------------------------------------------------
# advance_step on the scalar decay model
# ---------------------------------------------------------------------------

def test_implicit_euler_closed_form():
    sys = decay_system()
    st = run_decay(sys, 0.1, 1, dirk_tableau(1, 1))
    np.testing.assert_allclose(st.u, 1.0 / 1.1, atol=1e-12)


def test_dirk33_third_order():
    sys = decay_system()
    tb = dirk_tableau(3, 3)
    errs = []
    for nt in (10, 20):
        st = run_decay(sys, 1.0 / nt, nt, tb)
        errs.append(abs(st.u.ravel()[0] - np.exp(-1.0)))
    order = np.log2(errs[0] / errs[1])
    assert abs(order - 3.0) <= 0.3, (errs, order)


@pytest.mark.parametrize("stages,order", TABLEAUX)
def test_observed_temporal_orders(stages, order):
    sys = decay_system()
    tb = dirk_tableau(stages, order)
    dts = [0.2, 0.1, 0.05, 0.025]
    errs = []
    for dt in dts:
        nt = int(round(1.0 / dt))
        st = run_decay(sys, dt, nt, tb)
        errs.append(abs(st.u.ravel()[0] - np.exp(-1.0)))
    obs = [np.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    tol = 0.5 if order == 4 else 0.3
    assert abs(obs[-1] - order) <= tol, (errs, obs)


def test_step_halving_consistency():
    sys = decay_system()
    tb = dirk_tableau(2, 2)
    st1 = run_decay(sys, 0.1, 1, tb)
    st2 = run_decay(sys, 0.05, 2, tb)
    # single step vs two half steps agree to O(dt^{order+1})
    assert abs(st1.u.ravel()[0] - st2.u.ravel()[0]) < 0.1 ** 3


def test_ode_block_decay():
    # eq. for w alone: alpha=1, beta=2, s_w=0 -> w = e^{-2t}
    m = PdeModel(kind="C", ncu=1, nd=1, nw=1, nparam=0, mass=["1"],
                 flux=["0"], source=["0"], wavespeed="0",
                 ode=OdeSpec(alpha=1.0, beta=2.0, sw=["0"]),
                 init={"u1": "0", "w1": "1"})
    mesh = generate_structured([(0.0, 1.0)], [1], "line")
    topo = build_face_topology(mesh, [(1, 2, (1.0,))])
    sys = LdgSystem(m, mesh, topo, build_master("line", 1))
    tb = dirk_tableau(3, 3)
    errs = []
    for nt in (8, 16):
        st = sys.interpolate_initial()
        opts = NewtonOptions(abs_tol=1e-13, forcing=1e-12)
        for _ in range(nt):
            st, _ = advance_step(sys, st, 1.0 / nt, tb, opts)
        errs.append(abs(st.w.ravel()[0] - np.exp(-2.0)))
    order = np.log2(errs[0] / errs[1])
    assert abs(order - 3.0) <= 0.4, (errs, order)


def test_nonlinear_source_newton_iterations():
    # linear stage systems converge in one Newton iteration
    sys = decay_system()
    st = sys.interpolate_initial()
    _, stats = advance_step(sys, st, 0.1, dirk_tableau(1, 1),
                            NewtonOptions(abs_tol=1e-12, forcing=1e-12))
    assert stats.stage_stats[0].newton_iters == 1


def test_bad_dt():
    sys = decay_system()
    st = sys.interpolate_initial()
    with pytest.raises(TimeIntError):
        advance_step(sys, st, 0.0, dirk_tableau(1, 1))


# ---------------------------------------------------------------------------
# steady driver
# ---------------------------------------------------------------------------

def steady_poisson_system(nd=2, n=2, p=1, kind="tri"):
    m = builtin_model("poisson", nd=nd)
    m.source = ["2"] if nd == 1 else [
        f"{nd}*pi^2*" + "*".join(f"sin(pi*x{k + 1})" for k in range(nd))]
    for tag in range(1, 2 * nd + 1):
        m.bcs[tag] = BoundaryCondition(type="dirichlet", data=["0"])
    mesh = generate_structured([(0.0, 1.0)] * nd, [n] * nd, kind)
    topo = build_face_topology(mesh)
    return LdgSystem(m, mesh, topo, build_master(kind, p))


def test_steady_zero_source_zero_solution():
    sys = steady_poisson_system()
    sys.model.source = ["0"]
    sys.model._plans.clear()
    st = sys.interpolate_initial()
    out, stats = solve_steady(sys, st, NewtonOptions(abs_tol=1e-12))
    assert stats.converged
    assert np.max(np.abs(out.u)) < 1e-10


def test_steady_linear_one_newton_iteration():
    sys = steady_poisson_system(nd=2, n=2, p=2, kind="quad")
    st = sys.interpolate_initial()
    out, stats = solve_steady(sys, st,
                              NewtonOptions(abs_tol=1e-10, forcing=1e-12,
                                            gmres_restart=100,
                                            gmres_max_iter=2000))
    assert stats.converged
    assert stats.newton_iters == 1


def test_steady_rejects_unsteady_model():
    m = builtin_model("burgers", nd=1)
    mesh = generate_structured([(0.0, 1.0)], [2], "line")
    topo = build_face_topology(mesh, [(1, 2, (1.0,))])
    sys = LdgSystem(m, mesh, topo, build_master("line", 1))
    st = sys.interpolate_initial()
    with pytest.raises(TimeIntError):
        solve_steady(sys, st)
