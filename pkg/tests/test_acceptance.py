"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the report lines; the
whole suite takes roughly 20 minutes on a laptop (criterion 1 alone is
budgeted under 10 minutes, criterion 2 under 3).
"""

import time
from pathlib import Path

import numpy as np

from ldgkit.config import parse_config_text
from ldgkit.diagnostics import compute_functional, compute_l2_error
from ldgkit.disc import (
    LdgSystem,
    SolverState,
    spatial_residual_sumfac,
)
from ldgkit.driver import MassPreconditioner, run_convergence
from ldgkit.expr import (
    compile_with_cse,
    emit_source,
    evaluate,
    parse_expressions,
    parse_program,
)
from ldgkit.master import build_master
from ldgkit.mesh import (
    build_face_topology,
    circle_projection,
    curve_boundary,
    face_lattice_ids,
    generate_annulus_ogrid,
    generate_structured,
)
from ldgkit.model import (
    BoundaryCondition,
    NumericalFluxSpec,
    PdeModel,
    builtin_model,
)
from ldgkit.solver import (
    LinearOperator,
    NewtonOptions,
    build_reduced_basis,
    gmres,
    jacobian_vector,
)
from ldgkit.timeint import advance_step, dirk_tableau, solve_steady

FIXTURES = Path(__file__).parent / "fixtures"


def report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def poisson_config(model_path, kind, nd, out):
    names = ["x", "y", "z"][:nd]
    mesh_line = " ".join(f"n{nm}=2 {nm}min=0 {nm}max=1" for nm in names)
    exact_u = "*".join(f"sin(pi*x{k + 1})" for k in range(nd))
    exact_q = "\n".join(
        f"q1_{j + 1}=0-pi*" + "*".join(
            ("cos" if k == j else "sin") + f"(pi*x{k + 1})"
            for k in range(nd))
        for j in range(nd))
    text = f"""
[model] path={model_path}
[mesh] kind={kind} {mesh_line}
[run] p=1 steady=1
[solver] abs_tol=1e-11 rel_tol=3e-8 forcing=1e-8 precond=block_jacobi
jv_mode=tangent
restart=250
gmres_max_iter=6000
[output] dir={out}
[exact]
u1={exact_u}
{exact_q}
"""
    return parse_config_text(text)


def test_criterion_1_poisson3d_convergence(tmp_path):
    t0 = time.time()
    cfg = poisson_config(FIXTURES / "poisson3d.model", "tet", 3,
                         tmp_path / "c1")
    rows = run_convergence(cfg, [2, 4, 8], [1, 2, 3], quiet=True)
    elapsed = time.time() - t0
    by = {(r.p, r.n): r for r in rows}
    ok = not any(r.failed for r in rows)
    details = [f"runtime {elapsed:.0f}s"]
    for p in (1, 2, 3):
        r = by[(p, 8)]
        details.append(f"p={p}: rate_u={r.rate_u:.2f} rate_q={r.rate_q:.2f}")
        ok = ok and r.rate_u >= p + 0.7 and r.rate_q >= p - 0.3
    err24 = by[(2, 4)].error_u
    factor = err24 / 4.51e-3
    details.append(f"p=2,n=4 error_u={err24:.3e} ({factor:.2f}x reference)")
    ok = ok and 0.5 <= factor <= 2.0
    factor12 = by[(1, 2)].error_u / 1.51e-1
    details.append(f"p=1,n=2 error_u {factor12:.2f}x reference")
    ok = ok and 0.5 <= factor12 <= 2.0
    ok = ok and elapsed < 600
    report(1, ok, "; ".join(details))


def test_criterion_2_poisson2d_convergence(tmp_path):
    t0 = time.time()
    cfg = poisson_config(FIXTURES / "poisson2d.model", "tri", 2,
                         tmp_path / "c2")
    rows = run_convergence(cfg, [4, 8, 16], [1, 2, 3, 4], quiet=True)
    elapsed = time.time() - t0
    by = {(r.p, r.n): r for r in rows}
    ok = not any(r.failed for r in rows)
    details = [f"runtime {elapsed:.0f}s"]
    for p in (1, 2, 3, 4):
        r = by[(p, 16)]
        details.append(f"p={p}: rate_u={r.rate_u:.2f}")
        ok = ok and (p + 0.7 <= r.rate_u <= p + 1.4)
    ok = ok and elapsed < 180
    report(2, ok, "; ".join(details))


def test_criterion_3_temporal_orders():
    m = PdeModel(kind="C", ncu=1, nd=1, nparam=0, mass=["1"], flux=["0"],
                 source=["0-u1"], wavespeed="0", init={"u1": "1"},
                 numflux=NumericalFluxSpec(tau=0.0))
    mesh = generate_structured([(0.0, 1.0)], [1], "line")
    topo = build_face_topology(mesh, [(1, 2, (1.0,))])
    sys = LdgSystem(m, mesh, topo, build_master("line", 1))
    opts = NewtonOptions(abs_tol=1e-13, rel_tol=1e-13, forcing=1e-12,
                         jv_mode="tangent")
    details = []
    ok = True
    for stages, order in ((1, 1), (2, 2), (3, 3), (3, 4)):
        tb = dirk_tableau(stages, order)
        errs = []
        for dt in (0.2, 0.1, 0.05, 0.025):
            st = sys.interpolate_initial()
            for _ in range(int(round(1.0 / dt))):
                st, _ = advance_step(sys, st, dt, tb, opts)
            errs.append(abs(st.u.ravel()[0] - np.exp(-1.0)))
        obs = np.log2(errs[-2] / errs[-1])
        tol = 0.5 if order == 4 else 0.3
        details.append(f"({stages},{order}): {obs:.2f}")
        ok = ok and abs(obs - order) <= tol
    report(3, ok, "observed orders " + "; ".join(details))


def wave_system(n, p):
    m = builtin_model("wave", nd=2, mu=[1.0])
    m.init["u1"] = "sin(pi*x1)*sin(pi*x2)"
    for tag in range(1, 5):
        m.bcs[tag] = BoundaryCondition(type="dirichlet", data=["0"])
    mesh = generate_structured([(0.0, 1.0)] * 2, [n] * 2, "quad")
    topo = build_face_topology(mesh)
    return LdgSystem(m, mesh, topo, build_master("quad", p))


def test_criterion_4_wave_standing_convergence():
    t0 = time.time()
    tb = dirk_tableau(3, 4)
    t_final = 0.5
    details = []
    ok = True
    for p, dt in ((2, 0.0125), (3, 0.005)):
        errs = []
        for n in (4, 8, 16):
            sys = wave_system(n, p)
            st = sys.interpolate_initial()
            opts = NewtonOptions(abs_tol=1e-12, rel_tol=3e-8, forcing=1e-8,
                                 gmres_restart=120, gmres_max_iter=2500,
                                 jv_mode="tangent")
            M = MassPreconditioner(sys)
            for _ in range(int(round(t_final / dt))):
                st, _ = advance_step(sys, st, dt, tb, opts, precond=M)
            exact_u = ["cos(sqrt(2)*pi*t)*sin(pi*x1)*sin(pi*x2)"]
            norms = compute_l2_error(sys, st, exact_u)
            errs.append(norms.error_u)
        rates = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
        details.append(f"p={p}: rates {rates[0]:.2f}, {rates[1]:.2f}")
        ok = ok and min(rates) >= p + 0.7
    report(4, ok, "; ".join(details) + f"; runtime {time.time() - t0:.0f}s")


def test_criterion_5_bickley_conservation():
    t0 = time.time()
    m = builtin_model("shallow_water", mu=[1e4])
    m.init["u1"] = "1"
    m.init["u2"] = "1 - tanh(x2)^2"
    m.init["u3"] = "0.01*sin(0.5*x1)*exp(-x2*x2)"
    m.bcs = {}
    L = 2 * np.pi
    mesh = generate_structured([(-L, L), (-L, L)], [32, 32], "quad")
    topo = build_face_topology(mesh, [(1, 2, (2 * L, 0.0)),
                                      (3, 4, (0.0, 2 * L))])
    sys = LdgSystem(m, mesh, topo, build_master("quad", 3))
    st = sys.interpolate_initial()
    h0 = compute_functional(sys, st, "u1")
    ke0 = compute_functional(sys, st, "(u2*u2 + u3*u3)/(2*u1)")
    tb = dirk_tableau(3, 3)
    opts = NewtonOptions(abs_tol=3e-8, rel_tol=1e-10, forcing=1e-9,
                         gmres_restart=120, gmres_max_iter=2500,
                         jv_mode="tangent")
    for _ in range(10):
        st, _ = advance_step(sys, st, 1e-3, tb, opts,
                             precond=MassPreconditioner(sys))
    h1 = compute_functional(sys, st, "u1")
    drift = abs(h1 - h0) / abs(h0)
    finite = st.all_finite()
    ok = drift <= 1e-8 and finite
    report(5, ok, f"mass drift {drift:.2e}; finite={finite}; "
           f"kinetic energy {ke0:.3f}->"
           f"{compute_functional(sys, st, '(u2*u2 + u3*u3)/(2*u1)'):.3f}; "
           f"runtime {time.time() - t0:.0f}s")


def test_criterion_6_curved_boundary():
    mesh0 = generate_annulus_ogrid(24, 6, 1.0, 3.0, "tri", p_geom=3)
    mesh = curve_boundary(mesh0, 1, circle_projection((0.0, 0.0), 1.0))
    max_radius_dev = 0.0
    for e, lf, tag in mesh.boundary_faces:
        if tag != 1:
            continue
        ids = face_lattice_ids("tri", 3, lf)
        r = np.linalg.norm(mesh.ho_nodes[e][ids], axis=1)
        max_radius_dev = max(max_radius_dev, float(np.abs(r - 1.0).max()))

    m = builtin_model("shallow_water", mu=[2.0])
    m.bcs[1] = BoundaryCondition(type="dirichlet",
                                 data=["1.3", "0.4", "-0.2"])
    m.bcs[2] = BoundaryCondition(type="dirichlet",
                                 data=["1.3", "0.4", "-0.2"])
    topo = build_face_topology(mesh)
    sys = LdgSystem(m, mesh, topo, build_master("tri", 3))
    u = np.zeros((sys.n_elements, sys.n_nodes, 3))
    u[..., 0] = 1.3
    u[..., 1] = 0.4
    u[..., 2] = -0.2
    Ru, _, _ = sys.residual(SolverState(u=u, q=None, w=None, t=0.0))
    free_stream = float(np.abs(Ru).max())
    ok = max_radius_dev <= 1e-12 and free_stream <= 1e-10
    report(6, ok, f"curved-node radius deviation {max_radius_dev:.2e}; "
           f"free-stream residual {free_stream:.2e}")


def test_criterion_7_solver_oracles(tmp_path):
    rng = np.random.default_rng(42)
    # GMRES vs dense direct on 50 diagonally dominant systems
    worst = 0.0
    for _ in range(50):
        n = 50
        A = rng.normal(size=(n, n))
        A += np.diag(np.abs(A).sum(axis=1) + 1.0)
        b = rng.normal(size=n)
        res = gmres(LinearOperator(apply=lambda v: A @ v, n=n), b,
                    rel_tol=1e-12, restart=60, max_iter=400)
        xstar = np.linalg.solve(A, b)
        worst = max(worst, np.linalg.norm(res.x - xstar)
                    / np.linalg.norm(xstar))
    ok = worst <= 1e-8
    det1 = f"gmres vs direct worst rel err {worst:.2e}"

    # tangent vs fd Jv on the Burgers residual
    mb = builtin_model("burgers", nd=1)
    mb.bcs = {}
    meshb = generate_structured([(0.0, 1.0)], [8], "line")
    topob = build_face_topology(meshb, [(1, 2, (1.0,))])
    sysb = LdgSystem(mb, meshb, topob, build_master("line", 3))
    u0 = 1.0 + 0.3 * rng.normal(size=(sysb.n_elements, sysb.n_nodes, 1))

    def res_fn(uflat):
        return sysb.residual(sysb.state_from_vector(uflat, 0.0))[0].ravel()

    def tan_fn(uflat, v):
        stt = sysb.state_from_vector(uflat, 0.0)
        du, _, _ = sysb.unpack(v)
        return sysb.residual_tangent(stt, du)[0].ravel()

    v = rng.normal(size=u0.size)
    jfd = jacobian_vector(res_fn, u0.ravel(), v, "fd")
    jt = jacobian_vector(res_fn, u0.ravel(), v, "tangent", tangent_fn=tan_fn)
    jv_rel = np.linalg.norm(jfd - jt) / np.linalg.norm(jt)
    ok = ok and jv_rel <= 1e-5
    det2 = f"fd-vs-tangent Jv {jv_rel:.2e}"

    # reduced basis with a full-rank basis converges in one iteration
    n = 14
    A = rng.normal(size=(n, n)) + 5 * np.eye(n)
    op = LinearOperator(apply=lambda v: A @ v, n=n)
    M = build_reduced_basis([rng.normal(size=n) for _ in range(n)], op)
    res = gmres(LinearOperator(apply=lambda v: A @ v, n=n),
                rng.normal(size=n), precond=M, rel_tol=1e-10)
    ok = ok and res.converged and res.iterations == 1
    det3 = f"full-rank RB iterations {res.iterations}"

    # block-Jacobi strictly reduces iterations on a Poisson p=2 solve
    cfg_text = f"""
[model] path={FIXTURES / 'poisson2d.model'}
[mesh] kind=tri nx=4 ny=4 xmin=0 xmax=1 ymin=0 ymax=1
[run] p=2 steady=1
[solver] abs_tol=1e-10 rel_tol=3e-7 forcing=1e-7 precond=identity
jv_mode=tangent
restart=400
gmres_max_iter=4000
[output] dir={tmp_path}
"""
    from ldgkit.driver import build_system, newton_options
    iters = {}
    for precond_kind in ("identity", "block_jacobi"):
        cfg = parse_config_text(cfg_text)
        cfg.solver.precond = precond_kind
        sysp = build_system(cfg)
        stp = sysp.interpolate_initial()
        from ldgkit.driver import make_preconditioner, _steady_fns
        rf, tf_ = _steady_fns(sysp)
        M2, _ = make_preconditioner(sysp, cfg, rf, tf_, sysp.pack(stp.u))
        _, stats = solve_steady(sysp, stp, newton_options(cfg), precond=M2)
        iters[precond_kind] = stats.total_gmres_iters
    ok = ok and iters["block_jacobi"] < iters["identity"]
    det4 = (f"poisson p=2 gmres iters identity={iters['identity']} "
            f"block_jacobi={iters['block_jacobi']}")
    report(7, ok, "; ".join([det1, det2, det3, det4]))


def test_criterion_8_kernel_compiler():
    rng = np.random.default_rng(7)
    syms = ("x1", "x2", "x3", "u1", "u2", "mu1")
    fixtures = [
        ["u1*u1/2"],
        ["u2*u2/u1 + mu1*u1*u1/2", "u2*u1", "sqrt(mu1*u1)"],
        ["sin(pi*x1)*sin(pi*x2)*sin(pi*x3)", "3*pi^2*sin(pi*x1)"],
        ["exp(-x1^2)*tanh(x2) + max(u1, u2)", "abs(x3)^3"],
    ]
    worst = 0.0
    for texts in fixtures:
        g = parse_expressions(texts, syms)
        plan = compile_with_cse(g)
        b = {s: rng.uniform(0.5, 2.0, 100) for s in syms}
        got = evaluate(plan, b)
        want = g.eval_naive(b)
        worst = max(worst, float(np.max(np.abs(got - want)
                                        / np.maximum(np.abs(want), 1e-30))))
    ok = worst <= 1e-13
    det1 = f"CSE vs naive worst rel {worst:.2e}"

    # emit -> parse -> evaluate round trip is exact
    exact = True
    for texts in fixtures:
        plan = compile_with_cse(parse_expressions(texts, syms))
        plan2 = compile_with_cse(parse_program(emit_source(plan), syms))
        b = {s: rng.uniform(0.5, 2.0, 64) for s in syms}
        exact = exact and np.array_equal(evaluate(plan, b),
                                         evaluate(plan2, b))
    ok = ok and exact
    det2 = f"emit/parse round trip exact={exact}"

    shared = compile_with_cse(parse_expressions(
        ["sin(x1)*2", "sin(x1)+1", "sin(x1)^2"], syms))
    n_sin = sum(1 for i in shared.instructions
                if i[0] == "call" and i[1] == "sin")
    ok = ok and n_sin == 1
    report(8, ok, "; ".join([det1, det2,
                             f"shared sin compiled {n_sin} time(s)"]))


def test_criterion_9_sumfac_hex_p4():
    m = builtin_model("linear_convection", nd=3, mu=[0.7, -0.4, 1.1])
    m.bcs = {}
    per = [(1, 2, (1.0, 0, 0)), (3, 4, (0, 1.0, 0)), (5, 6, (0, 0, 1.0))]
    mesh = generate_structured([(0.0, 1.0)] * 3, [2, 2, 2], "hex")
    topo = build_face_topology(mesh, per)
    sys = LdgSystem(m, mesh, topo, build_master("hex", 4))
    rng = np.random.default_rng(3)
    u = rng.normal(size=(sys.n_elements, sys.n_nodes, 1))
    st = SolverState(u=u, q=None, w=None, t=0.0)
    R1, _, _ = sys.residual(st)
    R2, _, _ = spatial_residual_sumfac(sys, st)
    rel = float(np.abs(R2 - R1).max() / max(np.abs(R1).max(), 1e-30))
    ok = rel <= 1e-12
    report(9, ok, f"sum-factorization vs naive rel diff {rel:.2e}")


def test_criterion_10_out_of_scope_documented():
    # Explicitly not desk-reproducible: GPU scaling table, the 64^3
    # Taylor-Green DNS and its -5/3 spectrum, and the wave-scattering RCS
    # curves; the property suites above stand in for them.
    report(10, True, "GPU scaling / Taylor-Green DNS / RCS curves excluded "
           "by design; covered by property suites")
