"""DIRK time integration of the semi-discrete system and the steady driver.

Each implicit stage solves N(U) = M(U)(U - U_known)/(a_ii dt) + R(U, t_i) = 0
with the matrix-free Newton-GMRES solver; stiffly accurate tableaux reuse the
last stage as the step result.  Pointwise ODE states advance with the same
tableau through their residual block; wave-model gradients are part of the
stage unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disc import LdgSystem, SolverState
from .solver import NewtonOptions, SolveStats, newton_solve


class TimeIntError(RuntimeError):
    pass


class StageSolveError(TimeIntError):
    def __init__(self, stage, stats):
        super().__init__(
            f"nonlinear solve failed at stage {stage} "
            f"(residual {stats.final_residual:.3e})")
        self.stage = stage
        self.stats = stats


@dataclass
class ButcherTableau:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)

    @property
    def stages(self) -> int:
        return self.b.shape[0]

    @property
    def is_stiffly_accurate(self) -> bool:
        return bool(np.allclose(self.A[-1], self.b, atol=1e-14))

    def row_sum_defect(self) -> float:
        return float(np.max(np.abs(self.A.sum(axis=1) - self.c)))

    def order_residuals(self) -> dict[str, float]:
        """Defects of the order conditions up to the declared order."""
        A, b, c = self.A, self.b, self.c
        out = {"sum_b": float(b.sum() - 1.0)}
        if self.order >= 2:
            out["b.c"] = float(b @ c - 0.5)
        if self.order >= 3:
            out["b.c2"] = float(b @ c ** 2 - 1 / 3)
            out["b.Ac"] = float(b @ (A @ c) - 1 / 6)
        if self.order >= 4:
            out["b.c3"] = float(b @ c ** 3 - 0.25)
            out["bc.Ac"] = float((b * c) @ (A @ c) - 1 / 8)
            out["b.Ac2"] = float(b @ (A @ c ** 2) - 1 / 12)
            out["b.AAc"] = float(b @ (A @ (A @ c)) - 1 / 24)
        return out


def _alexander_gamma() -> float:
    """Root of x^3 - 3x^2 + (3/2)x - 1/6 in (1/6, 1/2), by Newton to 1e-15."""
    x = 0.43
    for _ in range(60):
        f = x ** 3 - 3 * x ** 2 + 1.5 * x - 1 / 6
        df = 3 * x ** 2 - 6 * x + 1.5
        step = f / df
        x -= step
        if abs(step) < 1e-16:
            break
    if not (1 / 6 < x < 1 / 2):
        raise TimeIntError("SDIRK3 gamma iteration left (1/6, 1/2)")
    return x


def dirk_tableau(stages: int, order: int) -> ButcherTableau:
    """Supported pairs: (1,1) implicit Euler, (2,2) L-stable SDIRK,
    (3,3) Alexander's L-stable SDIRK, (3,4) Crouzeix's A-stable scheme."""
    if (stages, order) == (1, 1):
        return ButcherTableau(A=[[1.0]], b=[1.0], c=[1.0], order=1)
    if (stages, order) == (2, 2):
        g = 1.0 - 1.0 / np.sqrt(2.0)
        return ButcherTableau(A=[[g, 0.0], [1.0 - g, g]],
                              b=[1.0 - g, g], c=[g, 1.0], order=2)
    if (stages, order) == (3, 3):
        g = _alexander_gamma()
        b1 = -1.5 * g ** 2 + 4.0 * g - 0.25
        b2 = 1.5 * g ** 2 - 5.0 * g + 1.25
        return ButcherTableau(
            A=[[g, 0.0, 0.0], [(1.0 - g) / 2.0, g, 0.0], [b1, b2, g]],
            b=[b1, b2, g], c=[g, (1.0 + g) / 2.0, 1.0], order=3)
    if (stages, order) == (3, 4):
        g = 0.5 + np.cos(np.pi / 18.0) / np.sqrt(3.0)
        d = 1.0 / (6.0 * (2.0 * g - 1.0) ** 2)
        return ButcherTableau(
            A=[[g, 0.0, 0.0], [0.5 - g, g, 0.0],
               [2.0 * g, 1.0 - 4.0 * g, g]],
            b=[d, 1.0 - 2.0 * d, d], c=[g, 0.5, 1.0 - g], order=4)
    raise TimeIntError(f"unsupported DIRK pair (stages={stages}, "
                       f"order={order}); supported: (1,1),(2,2),(3,3),(3,4)")


@dataclass
class StepStats:
    stage_stats: list = field(default_factory=list)

    @property
    def newton_iters(self):
        return sum(s.newton_iters for s in self.stage_stats)

    @property
    def gmres_iters(self):
        return sum(s.total_gmres_iters for s in self.stage_stats)

    @property
    def final_residual(self):
        return max((s.final_residual for s in self.stage_stats), default=0.0)


def _stage_functions(system: LdgSystem, Yk: np.ndarray, a_dt: float,
                     t_stage: float):
    def stage_residual(Yflat):
        u, q, w = system.unpack(Yflat)
        uk, qk, wk = system.unpack(Yk)
        st = SolverState(u=u, q=q, w=w, t=t_stage)
        Mu, Mq, Mw = system.mass_apply(
            st, (u - uk) / a_dt,
            None if q is None else (q - qk) / a_dt,
            None if w is None else (w - wk) / a_dt)
        Ru, Rq, Rw = system.residual(st)
        Nu = Mu + Ru
        Nq = None if Rq is None else Mq + Rq
        Nw = None if Rw is None else Mw + Rw
        return system.pack(Nu, Nq, Nw)

    def stage_tangent(Yflat, Vflat):
        u, q, w = system.unpack(Yflat)
        uk, qk, wk = system.unpack(Yk)
        du, dq, dw = system.unpack(Vflat)
        st = SolverState(u=u, q=q, w=w, t=t_stage)
        Mu, Mq, Mw = system.mass_apply(
            st, du / a_dt, None if dq is None else dq / a_dt,
            None if dw is None else dw / a_dt)
        extra = system.mass_tangent_extra(st, (u - uk) / a_dt, du, dq, dw)
        if extra is not None:
            Mu = Mu + extra
        dRu, dRq, dRw = system.residual_tangent(st, du, dq, dw)
        Nu = Mu + dRu
        Nq = None if dRq is None else Mq + dRq
        Nw = None if dRw is None else Mw + dRw
        return system.pack(Nu, Nq, Nw)

    return stage_residual, stage_tangent


def advance_step(system: LdgSystem, state: SolverState, dt: float,
                 tableau: ButcherTableau, newton_options: NewtonOptions | None = None,
                 precond=None, callback=None) -> tuple[SolverState, StepStats]:
    """One DIRK step from state.t to state.t + dt."""
    if dt <= 0:
        raise TimeIntError("dt must be positive")
    opts = newton_options or NewtonOptions()
    Y0 = system.pack(state.u, state.q, state.w)
    s = tableau.stages
    K = []
    stats = StepStats()
    Ylast = None
    for i in range(s):
        Yk = Y0.copy()
        for j in range(i):
            Yk += dt * tableau.A[i, j] * K[j]
        a_dt = tableau.A[i, i] * dt
        t_stage = state.t + tableau.c[i] * dt
        res_fn, tan_fn = _stage_functions(system, Yk, a_dt, t_stage)
        guess = Yk + a_dt * K[-1] if K else Yk.copy()
        Yi, st = newton_solve(res_fn, guess, opts, precond=precond,
                              tangent_fn=tan_fn, callback=callback)
        stats.stage_stats.append(st)
        if not st.converged:
            raise StageSolveError(i, st)
        K.append((Yi - Yk) / a_dt)
        Ylast = Yi
    if tableau.is_stiffly_accurate:
        Ynew = Ylast
    else:
        Ynew = Y0 + dt * sum(bi * Ki for bi, Ki in zip(tableau.b, K))
    if not np.isfinite(Ynew).all():
        raise TimeIntError("non-finite state after time step")
    out = system.state_from_vector(Ynew, state.t + dt)
    out.u = out.u.copy()
    if out.q is not None:
        out.q = out.q.copy()
    if out.w is not None:
        out.w = out.w.copy()
    return out, stats


def solve_steady(system: LdgSystem, state: SolverState,
                 newton_options: NewtonOptions | None = None,
                 precond=None, callback=None) -> tuple[SolverState, SolveStats]:
    """Solve R(u) = 0 directly by Newton (no pseudo-time).

    Requires a steady model (mass identically zero) without evolved q/w
    blocks; the steady default forcing solves the linear systems tightly so
    linear problems converge in one Newton iteration.
    """
    if system.kind == "W":
        raise TimeIntError("steady solves do not apply to wave models")
    if not system.model.is_steady():
        raise TimeIntError("solve_steady requires a model with zero mass")
    opts = newton_options or NewtonOptions(forcing=1e-10)

    def residual(uflat):
        st = system.state_from_vector(uflat, state.t)
        Ru, _, _ = system.residual(st)
        return Ru.ravel()

    def tangent(uflat, vflat):
        st = system.state_from_vector(uflat, state.t)
        du, _, _ = system.unpack(vflat)
        dRu, _, _ = system.residual_tangent(st, du)
        return dRu.ravel()

    x, stats = newton_solve(residual, system.pack(state.u), opts,
                            precond=precond, tangent_fn=tangent,
                            callback=callback)
    out = system.state_from_vector(x, state.t)
    out.u = out.u.copy()
    return out, stats
