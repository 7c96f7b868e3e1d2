"""Error norms, integral functionals and convergence-rate bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .disc import LdgSystem, SolverState
from .expr import evaluate


@dataclass
class ErrorNorms:
    error_u: float
    error_q: float | None = None
    absolute_u: bool = False      # exact solution had zero norm
    absolute_q: bool = False


def _eval_exact(system: LdgSystem, exprs, x, t):
    from .expr import compile_with_cse, parse_expressions
    plan = compile_with_cse(parse_expressions(list(exprs), system.model.symbols))
    b = {"t": float(t)}
    b.update(system.model.mu_bindings())
    for k in range(system.nd):
        b[f"x{k + 1}"] = x[..., k].ravel()
    out = evaluate(plan, b)
    no = out.shape[0]
    if out.shape[1] != x[..., 0].size:
        out = np.broadcast_to(out, (no, x[..., 0].size))
    return np.moveaxis(out.reshape((no,) + x.shape[:2]), 0, -1)


def compute_l2_error(system: LdgSystem, state: SolverState,
                     exact_u, exact_q=None) -> ErrorNorms:
    """Relative L2 errors by quadrature over all elements.

    exact_u: ncu expressions; exact_q: optional ncu*nd expressions (row-major)
    for the mixed variable of diffusion/wave models.  A zero-norm exact
    solution yields the absolute norm with a flag.
    """
    d = system.disc
    w = d.wdetj
    uh = np.einsum("qa,eai->eqi", system.master.phi, state.u)
    ue = _eval_exact(system, exact_u, d.xq, state.t)
    num = float(np.sum(w[..., None] * (uh - ue) ** 2))
    den = float(np.sum(w[..., None] * ue ** 2))
    abs_u = den == 0.0
    err_u = np.sqrt(num) if abs_u else np.sqrt(num / den)

    err_q = None
    abs_q = False
    if exact_q is not None and system.kind in ("D", "W"):
        q = state.q if system.kind == "W" else \
            system.compute_mixed(state.u, state.t)
        qh = np.einsum("qa,eaij->eqij", system.master.phi, q)
        qh = qh.reshape(qh.shape[:2] + (-1,))
        qe = _eval_exact(system, exact_q, d.xq, state.t)
        num = float(np.sum(w[..., None] * (qh - qe) ** 2))
        den = float(np.sum(w[..., None] * qe ** 2))
        abs_q = den == 0.0
        err_q = np.sqrt(num) if abs_q else np.sqrt(num / den)
    return ErrorNorms(error_u=float(err_u), error_q=err_q,
                      absolute_u=abs_u, absolute_q=abs_q)


def compute_functional(system: LdgSystem, state: SolverState,
                       integrand: str) -> float:
    """Integral of g(u~, x, t) over the domain by quadrature."""
    d = system.disc
    phi = system.master.phi
    uq = np.einsum("qa,eai->eqi", phi, state.u)
    qq = None
    if system.kind == "W" and state.q is not None:
        qq = np.einsum("qa,eaij->eqij", phi, state.q)
    elif system.kind == "D":
        q = system.compute_mixed(state.u, state.t)
        qq = np.einsum("qa,eaij->eqij", phi, q)
    wq = None if state.w is None else np.einsum("qa,eak->eqk", phi, state.w)
    b = system._bindings(d.xq, state.t, uq, qq, wq)
    from .expr import compile_with_cse, parse_expression
    plan = compile_with_cse(parse_expression(integrand, system.model.symbols))
    vals = evaluate(plan, b)
    if not np.isfinite(vals).all():
        raise ValueError("functional integrand produced non-finite values")
    if vals.shape[1] != d.wdetj.size:
        vals = np.broadcast_to(vals, (1, d.wdetj.size))
    return float(np.sum(d.wdetj.ravel() * vals[0]))


@dataclass
class ConvergenceRow:
    p: int
    n: int
    error_u: float
    rate_u: float | None
    error_q: float | None
    rate_q: float | None
    failed: bool = False

    def csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.10e}" if isinstance(v, float) \
                else str(v)

        def fmtr(v):
            return "" if v is None else f"{v:.4f}"

        return (f"{self.p},{self.n},{fmt(self.error_u)},{fmtr(self.rate_u)},"
                f"{fmt(self.error_q)},{fmtr(self.rate_q)}")


CSV_HEADER = "p,n,error_u,rate_u,error_q,rate_q"


def observed_rate(e_coarse: float, e_fine: float, h_coarse: float,
                  h_fine: float) -> float:
    """rate = log(E_{i-1}/E_i) / log(h_{i-1}/h_i)."""
    return float(np.log(e_coarse / e_fine) / np.log(h_coarse / h_fine))


def rate_unreliable(error: float, floor: float = 1e-10) -> bool:
    """Rates below the roundoff floor are marked, mirroring the 'x' entries
    used for finite-precision-limited rows."""
    return error <= floor


def format_table(rows: list[ConvergenceRow]) -> str:
    lines = ["  p    n      error_u    rate_u      error_q    rate_q"]
    for r in rows:
        ru = "x" if r.rate_u is None else f"{r.rate_u:.2f}"
        if r.error_q is None:
            eq, rq = "-", "-"
        else:
            eq = f"{r.error_q:.3e}"
            rq = "x" if r.rate_q is None else f"{r.rate_q:.2f}"
        flag = "  FAILED" if r.failed else ""
        lines.append(f"  {r.p}  {r.n:4d}    {r.error_u:.3e}    {ru:>6}    "
                     f"{eq:>9}    {rq:>6}{flag}")
    return "\n".join(lines)
