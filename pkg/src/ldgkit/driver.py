"""Top-level drivers: build a system from a RunConfig, run simulations and
convergence studies, write VTU series and CSV diagnostics."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, RunConfig
from .diagnostics import (
    CSV_HEADER,
    ConvergenceRow,
    compute_l2_error,
    format_table,
    observed_rate,
    rate_unreliable,
)
from .disc import LdgSystem, SolverState
from .master import build_master
from .mesh import build_face_topology, generate_structured, import_msh
from .model import builtin_model, load_model
from .solver import (
    LinearOperator,
    NewtonOptions,
    build_block_jacobi,
    build_reduced_basis,
    distance2_coloring,
)
from .timeint import advance_step, dirk_tableau, solve_steady
from .vtu import export_vtu, state_fields

STATS_CSV_HEADER = "step,newton_iters,gmres_iters,residual"


class DriverError(RuntimeError):
    pass


def build_mesh(cfg: RunConfig):
    ms = cfg.mesh
    if ms.msh_path is not None:
        if not os.path.exists(ms.msh_path):
            raise DriverError(f"mesh file not found: {ms.msh_path}")
        mesh = import_msh(ms.msh_path, p_geom=ms.p_geom)
    else:
        mesh = generate_structured(ms.bounds, ms.counts, ms.kind,
                                   p_geom=ms.p_geom)
    periodic = []
    axis_of = {"x": 0, "y": 1, "z": 2}
    for nm in ms.periodic_axes:
        k = axis_of[nm]
        lo, hi = ms.bounds[k]
        tr = np.zeros(mesh.nd)
        tr[k] = hi - lo
        periodic.append((2 * k + 1, 2 * k + 2, tuple(tr)))
    topo = build_face_topology(mesh, periodic or None)
    return mesh, topo


def build_model(cfg: RunConfig):
    if cfg.model_path is not None:
        model = load_model(cfg.model_path)
    else:
        model = builtin_model(cfg.model_builtin)
    for k, v in cfg.mu_overrides.items():
        if not (k.startswith("mu") and k[2:].isdigit()):
            raise DriverError(f"bad mu override {k!r}")
        i = int(k[2:])
        if not (1 <= i <= model.nparam):
            raise DriverError(f"mu override {k} out of range "
                              f"(nparam={model.nparam})")
        model.mu[i - 1] = v
    return model


def build_system(cfg: RunConfig) -> LdgSystem:
    model = build_model(cfg)
    mesh, topo = build_mesh(cfg)
    master = build_master(mesh.elem_kind, cfg.p, cfg.quad_degree)
    return LdgSystem(model, mesh, topo, master)


# ---------------------------------------------------------------------------
# preconditioners
# ---------------------------------------------------------------------------


class MassPreconditioner:
    """Block inverse of the (constant-coefficient) element mass operator;
    the natural choice for mass-dominated transient stage systems."""

    def __init__(self, system: LdgSystem):
        self.system = system

    def apply(self, r):
        sys = self.system
        u, q, w = sys.unpack(r)
        minv = sys.disc.mass_inv
        u2 = np.einsum("eab,ebi->eai", minv, u)
        q2 = None if q is None else np.einsum("eab,ebij->eaij", minv, q)
        w2 = None if w is None else w / sys.model.ode.alpha
        return sys.pack(u2, q2, w2)


def element_neighbor_sets(system: LdgSystem):
    topo = system.topology
    nb = [set() for _ in range(system.n_elements)]
    for f in range(topo.n_interior):
        a, b = int(topo.elem_l[f]), int(topo.elem_r[f])
        nb[a].add(b)
        nb[b].add(a)
    return nb


def build_pde_block_jacobi(system: LdgSystem, residual_fn, tangent_fn,
                           state_vec, jv_mode="tangent"):
    """Exact per-element diagonal blocks via distance-2 colored probing."""
    blocks = _elementwise_blocks(system)
    colors = distance2_coloring(element_neighbor_sets(system))
    return build_block_jacobi(residual_fn, state_vec, blocks, colors=colors,
                              mode=jv_mode, tangent_fn=tangent_fn)


def _elementwise_blocks(system: LdgSystem):
    """Per-element dof indices across the packed (u, q, w) blocks."""
    ne, nb = system.n_elements, system.n_nodes
    sizes = [nb * system.ncu]
    if system.kind == "W":
        sizes.append(nb * system.ncu * system.nd)
    if system.nw > 0:
        sizes.append(nb * system.nw)
    offsets = np.cumsum([0] + [ne * s for s in sizes])
    blocks = []
    for e in range(ne):
        idx = [np.arange(off + e * s, off + (e + 1) * s)
               for off, s in zip(offsets[:-1], sizes)]
        blocks.append(np.concatenate(idx))
    return blocks


class CompositeManager:
    """Config 'composite': block-Jacobi plus reduced-basis deflation built
    from the most recent Newton updates (inactive until snapshots exist)."""

    def __init__(self, system, block_jacobi, tangent_fn, rank=10, refresh=1):
        self.system = system
        self.block_jacobi = block_jacobi
        self.tangent_fn = tangent_fn
        self.rank = rank
        self.refresh = max(1, refresh)
        self.snapshots = []
        self._builds = 0
        self._rb = None

    def note_update(self, x, d):
        self.snapshots.append(d.copy())
        self.snapshots = self.snapshots[-self.rank:]

    def build(self, x):
        from .solver import CompositePreconditioner
        self._builds += 1
        if self.snapshots and (self._builds % self.refresh == 0
                               or self._rb is None):
            op = LinearOperator(
                apply=lambda v: self.tangent_fn(x, v), n=x.shape[0])
            try:
                self._rb = build_reduced_basis(self.snapshots, op,
                                               rank=self.rank)
            except Exception:
                self._rb = None
        return CompositePreconditioner(self.block_jacobi, self._rb)


def make_preconditioner(system: LdgSystem, cfg: RunConfig, residual_fn,
                        tangent_fn, state_vec):
    kind = cfg.solver.precond
    if kind == "auto":
        kind = "block_jacobi" if cfg.steady else "mass"
    if kind == "identity":
        return None, None
    if kind == "mass":
        return MassPreconditioner(system), None
    if kind == "block_jacobi":
        bj = build_pde_block_jacobi(system, residual_fn, tangent_fn,
                                    state_vec, cfg.solver.jv_mode)
        return bj, None
    if kind == "composite":
        bj = build_pde_block_jacobi(system, residual_fn, tangent_fn,
                                    state_vec, cfg.solver.jv_mode)
        mgr = CompositeManager(system, bj, tangent_fn,
                               rank=cfg.solver.rb_rank,
                               refresh=cfg.solver.rb_refresh)
        return mgr, mgr.note_update
    raise DriverError(f"unknown preconditioner {kind!r}")


def newton_options(cfg: RunConfig) -> NewtonOptions:
    s = cfg.solver
    return NewtonOptions(abs_tol=s.abs_tol, rel_tol=s.rel_tol,
                         max_iter=s.max_iter, forcing=s.forcing,
                         gmres_restart=s.restart,
                         gmres_max_iter=s.gmres_max_iter,
                         jv_mode=s.jv_mode, line_search=s.line_search)


# ---------------------------------------------------------------------------
# simulation driver
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    state: SolverState
    system: LdgSystem
    summary: dict
    stats_csv: str | None = None
    vtu_files: list = field(default_factory=list)


def _steady_fns(system):
    def residual(uflat):
        st = system.state_from_vector(uflat, 0.0)
        return system.residual(st)[0].ravel()

    def tangent(uflat, v):
        st = system.state_from_vector(uflat, 0.0)
        du, _, _ = system.unpack(v)
        return system.residual_tangent(st, du)[0].ravel()

    return residual, tangent


def run_simulation(cfg: RunConfig) -> RunResult:
    cfg.validate()
    t_start = time.time()
    system = build_system(cfg)
    state = system.interpolate_initial()
    os.makedirs(cfg.out_dir, exist_ok=True)
    opts = newton_options(cfg)
    vtu_files = []
    stats_rows = []

    def dump(state, label):
        path = os.path.join(cfg.out_dir, f"sol_{label}.vtu")
        export_vtu(system.mesh, system.master,
                   state_fields(system, state), path)
        vtu_files.append(path)

    if cfg.steady:
        res_fn, tan_fn = _steady_fns(system)
        precond, callback = make_preconditioner(system, cfg, res_fn, tan_fn,
                                                system.pack(state.u))
        state, stats = solve_steady(system, state, opts, precond=precond,
                                    callback=callback)
        if not stats.converged:
            raise DriverError(
                f"steady Newton solve did not converge "
                f"(residual {stats.final_residual:.3e})")
        stats_rows.append(
            f"0,{stats.newton_iters},{stats.total_gmres_iters},"
            f"{stats.final_residual:.6e}")
        newton_total = stats.newton_iters
        gmres_total = stats.total_gmres_iters
        dump(state, "steady")
    else:
        tableau = dirk_tableau(cfg.stages, cfg.order)
        res_fn, tan_fn = _steady_fns(system)
        precond, callback = make_preconditioner(system, cfg, res_fn, tan_fn,
                                                system.pack(state.u, state.q,
                                                            state.w))
        nt = cfg.n_steps()
        newton_total = 0
        gmres_total = 0
        if cfg.cadence > 0:
            dump(state, "000000")
        for step in range(1, nt + 1):
            state, st = advance_step(system, state, cfg.dt, tableau, opts,
                                     precond=precond, callback=callback)
            newton_total += st.newton_iters
            gmres_total += st.gmres_iters
            stats_rows.append(f"{step},{st.newton_iters},{st.gmres_iters},"
                              f"{st.final_residual:.6e}")
            if cfg.cadence > 0 and step % cfg.cadence == 0:
                dump(state, f"{step:06d}")
        dump(state, "final")
        if not state.all_finite():
            raise DriverError("non-finite state at end of run")

    stats_path = os.path.join(cfg.out_dir, "stats.csv")
    with open(stats_path, "w") as f:
        f.write(STATS_CSV_HEADER + "\n")
        f.write("\n".join(stats_rows) + "\n")

    summary = {
        "steady": cfg.steady,
        "n_elements": system.n_elements,
        "n_dofs": system.n_dofs,
        "t_final": state.t,
        "newton_iterations": int(newton_total),
        "gmres_iterations": int(gmres_total),
        "max_abs_u": float(np.abs(state.u).max()),
        "all_finite": bool(state.all_finite()),
        "wall_seconds": time.time() - t_start,
    }
    if cfg.exact:
        exact_u = [cfg.exact.get(f"u{i + 1}", "0")
                   for i in range(system.ncu)]
        norms = compute_l2_error(system, state, exact_u,
                                 _exact_q(cfg, system))
        summary["error_u"] = norms.error_u
        if norms.error_q is not None:
            summary["error_q"] = norms.error_q
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return RunResult(state=state, system=system, summary=summary,
                     stats_csv=stats_path, vtu_files=vtu_files)


def _exact_q(cfg, system):
    keys = [f"q{i + 1}_{j + 1}" for i in range(system.ncu)
            for j in range(system.nd)]
    if all(k in cfg.exact for k in keys):
        return [cfg.exact[k] for k in keys]
    return None


# ---------------------------------------------------------------------------
# convergence harness
# ---------------------------------------------------------------------------


def run_convergence(cfg: RunConfig, n_list, p_list, quiet=False):
    """Loop (p, n), solve, compute errors and successive rates; returns
    ConvergenceRow records and writes convergence.csv."""
    cfg.validate()
    if not cfg.exact:
        raise ConfigError("convergence studies need an [exact] section")
    if cfg.mesh.msh_path is not None:
        raise ConfigError(
            "convergence studies refine structured meshes; imported msh "
            "meshes have no resolution parameter")
    rows = []
    for p in p_list:
        prev = None
        for n in n_list:
            sub = _with_resolution(cfg, n, p)
            try:
                result = run_simulation(sub)
                system, state = result.system, result.state
                exact_u = [cfg.exact.get(f"u{i + 1}", "0")
                           for i in range(system.ncu)]
                norms = compute_l2_error(system, state, exact_u,
                                         _exact_q(cfg, system))
            except Exception as e:  # record the failure, keep sweeping
                if not quiet:
                    print(f"p={p} n={n}: FAILED ({e})")
                rows.append(ConvergenceRow(p=p, n=n, error_u=float("nan"),
                                           rate_u=None, error_q=None,
                                           rate_q=None, failed=True))
                prev = None
                continue
            ru = rq = None
            if prev is not None and not rate_unreliable(norms.error_u):
                ru = observed_rate(prev[1], norms.error_u, 1.0 / prev[0],
                                   1.0 / n)
            if prev is not None and norms.error_q is not None \
                    and prev[2] is not None \
                    and not rate_unreliable(norms.error_q):
                rq = observed_rate(prev[2], norms.error_q, 1.0 / prev[0],
                                   1.0 / n)
            rows.append(ConvergenceRow(p=p, n=n, error_u=norms.error_u,
                                       rate_u=ru, error_q=norms.error_q,
                                       rate_q=rq))
            prev = (n, norms.error_u, norms.error_q)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "convergence.csv")
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(r.csv() + "\n")
    if not quiet:
        print(format_table(rows))
        print(f"wrote {path}")
    return rows


def _with_resolution(cfg: RunConfig, n: int, p: int) -> RunConfig:
    import copy
    sub = copy.deepcopy(cfg)
    sub.p = p
    sub.mesh.counts = tuple(n for _ in sub.mesh.counts)
    sub.out_dir = os.path.join(cfg.out_dir, f"p{p}_n{n}")
    return sub
