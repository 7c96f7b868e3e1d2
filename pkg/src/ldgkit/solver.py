"""Jacobian-free Newton-GMRES: matrix-free Krylov solver, Jacobian-vector
products (finite-difference or forward-tangent), and the block-Jacobi /
reduced-basis preconditioners.

No global matrix is ever assembled; operators are closures over residual
evaluations.  Preconditioners change iteration counts, never converged
solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class SolverError(RuntimeError):
    pass


@dataclass
class LinearOperator:
    """Matrix-free operator: apply(v) -> A v, with dimension n."""

    apply: callable
    n: int
    matvecs: int = 0

    def __call__(self, v):
        self.matvecs += 1
        return self.apply(v)


@dataclass
class GmresResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norms: list
    breakdown: bool = False


@dataclass
class SolveStats:
    newton_iters: int = 0
    residual_norms: list = field(default_factory=list)
    gmres_iters: list = field(default_factory=list)
    final_residual: float = 0.0
    converged: bool = False

    @property
    def total_gmres_iters(self):
        return int(sum(self.gmres_iters))


@dataclass
class NewtonOptions:
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    max_iter: int = 20
    line_search: bool = True
    forcing: float | None = None      # None -> min(0.1, ||R||^1/2)
    gmres_restart: int = 30
    gmres_max_iter: int = 200
    jv_mode: str = "fd"               # 'fd' | 'tangent'


class IdentityPreconditioner:
    def apply(self, r):
        return r


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------


def gmres(op, rhs, precond=None, rel_tol=1e-8, restart=30, max_iter=200,
          x0=None):
    """Right-preconditioned restarted GMRES with modified Gram-Schmidt and a
    second orthogonalization pass when loss of orthogonality is detected.

    Returns GmresResult; residual_norms track the true residual of the
    original system (right preconditioning preserves it) and are
    non-increasing within each cycle.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    if not np.isfinite(rhs).all():
        raise SolverError("gmres: rhs contains non-finite entries")
    if not (0.0 < rel_tol < 1.0):
        raise SolverError("gmres: rel_tol must be in (0, 1)")
    M = precond or IdentityPreconditioner()
    apply_op = op if callable(op) else op.apply
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()

    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return GmresResult(x=np.zeros(n), converged=True, iterations=0,
                           residual_norms=[0.0])
    tol = rel_tol * bnorm
    res_norms = []
    total = 0
    breakdown = False

    while total < max_iter:
        r = rhs - apply_op(x) if (total > 0 or x0 is not None) else rhs.copy()
        beta = np.linalg.norm(r)
        res_norms.append(float(beta))
        if beta <= tol:
            return GmresResult(x=x, converged=True, iterations=total,
                               residual_norms=res_norms, breakdown=breakdown)
        m = min(restart, max_iter - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        for k in range(m):
            Z[k] = M.apply(V[k])
            w = apply_op(Z[k])
            if not np.isfinite(w).all():
                raise SolverError("gmres: operator returned non-finite values")
            norm_before = np.linalg.norm(w)
            for i in range(k + 1):
                H[i, k] = np.dot(V[i], w)
                w = w - H[i, k] * V[i]
            if np.linalg.norm(w) < 0.707 * norm_before:
                # reorthogonalize once
                for i in range(k + 1):
                    c = np.dot(V[i], w)
                    H[i, k] += c
                    w = w - c * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            total += 1
            k_done = k + 1
            if H[k + 1, k] <= 1e-14 * max(bnorm, 1.0):
                breakdown = True
            else:
                V[k + 1] = w / H[k + 1, k]
            # Givens rotations
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            res_norms.append(float(abs(g[k + 1])))
            if abs(g[k + 1]) <= tol or breakdown:
                break
        y = scipy.linalg.solve_triangular(H[:k_done, :k_done], g[:k_done])
        x = x + Z[:k_done].T @ y
        if abs(g[k_done]) <= tol:
            return GmresResult(x=x, converged=True, iterations=total,
                               residual_norms=res_norms, breakdown=breakdown)
        if breakdown:
            r = rhs - apply_op(x)
            ok = np.linalg.norm(r) <= tol
            return GmresResult(x=x, converged=ok, iterations=total,
                               residual_norms=res_norms, breakdown=True)
    return GmresResult(x=x, converged=False, iterations=total,
                       residual_norms=res_norms, breakdown=breakdown)


# ---------------------------------------------------------------------------
# Jacobian-vector products
# ---------------------------------------------------------------------------


def fd_epsilon(base: np.ndarray, v: np.ndarray) -> float:
    """Brown-Saad style step: sqrt(machine eps) (1 + ||u||_inf) / ||v||_2."""
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        raise SolverError("jacobian_vector: zero direction")
    eps = np.sqrt(np.finfo(float).eps) * (1.0 + np.abs(base).max()) / vnorm
    if eps == 0.0 or not np.isfinite(eps):
        raise SolverError("jacobian_vector: step underflow")
    return float(eps)


def jacobian_vector(residual_fn, base: np.ndarray, v: np.ndarray,
                    mode: str = "fd", base_residual=None, tangent_fn=None):
    """J(base) @ v by one-sided finite differences or exact forward tangent.

    tangent_fn(base, v) must return the exact directional derivative when
    mode='tangent'.
    """
    if mode == "tangent":
        if tangent_fn is None:
            raise SolverError("tangent mode requires tangent_fn")
        return tangent_fn(base, v)
    if mode != "fd":
        raise SolverError(f"unknown jacobian mode {mode!r}")
    eps = fd_epsilon(base, v)
    r0 = residual_fn(base) if base_residual is None else base_residual
    r1 = residual_fn(base + eps * v)
    out = (r1 - r0) / eps
    if not np.isfinite(out).all():
        raise SolverError("jacobian_vector: non-finite result")
    return out


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------


def newton_solve(residual_fn, x0: np.ndarray, options: NewtonOptions | None = None,
                 precond=None, tangent_fn=None, callback=None):
    """Inexact Newton with right-preconditioned GMRES inner solves.

    Each step solves J d = -R to the forcing tolerance min(0.1, ||R||^(1/2))
    (or a fixed options.forcing), with an optional backtracking line search
    (at most 8 halvings, sufficient-decrease acceptance).  Returns
    (x, SolveStats); non-convergence is reported in the stats, not raised.
    """
    opts = options or NewtonOptions()
    x = np.asarray(x0, dtype=float).copy()
    stats = SolveStats()
    R = residual_fn(x)
    rnorm = float(np.linalg.norm(R))
    r0norm = rnorm
    stats.residual_norms.append(rnorm)

    for _ in range(opts.max_iter):
        if rnorm <= opts.abs_tol or rnorm <= opts.rel_tol * r0norm:
            stats.converged = True
            break
        M = precond.build(x) if hasattr(precond, "build") else precond
        op = LinearOperator(
            apply=lambda v: jacobian_vector(residual_fn, x, v, opts.jv_mode,
                                            base_residual=R,
                                            tangent_fn=tangent_fn),
            n=x.shape[0])
        eta = opts.forcing if opts.forcing is not None else \
            min(0.1, np.sqrt(rnorm))
        eta = min(max(eta, 1e-14), 0.9)
        lin = gmres(op, -R, precond=M, rel_tol=eta,
                    restart=opts.gmres_restart, max_iter=opts.gmres_max_iter)
        stats.gmres_iters.append(lin.iterations)
        d = lin.x
        step = 1.0
        accepted = False
        for _ in range(9):
            x_trial = x + step * d
            R_trial = residual_fn(x_trial)
            rnorm_trial = float(np.linalg.norm(R_trial))
            if np.isfinite(rnorm_trial) and (
                    not opts.line_search
                    or rnorm_trial <= (1.0 - 1e-4 * step) * rnorm
                    or rnorm_trial <= opts.abs_tol):
                accepted = True
                break
            if not opts.line_search:
                break
            step *= 0.5
        stats.newton_iters += 1
        if not accepted:
            # stagnation: keep the best available iterate and stop
            if np.isfinite(rnorm_trial) and rnorm_trial < rnorm:
                x, R, rnorm = x_trial, R_trial, rnorm_trial
                stats.residual_norms.append(rnorm)
            break
        x, R, rnorm = x_trial, R_trial, rnorm_trial
        stats.residual_norms.append(rnorm)
        if callback is not None:
            callback(x, d)
    if rnorm <= opts.abs_tol or rnorm <= opts.rel_tol * r0norm:
        stats.converged = True
    stats.final_residual = rnorm
    return x, stats


# ---------------------------------------------------------------------------
# Block-Jacobi preconditioner
# ---------------------------------------------------------------------------


class BlockJacobiPreconditioner:
    def __init__(self, lu_factors, blocks):
        self._lu = lu_factors
        self._blocks = blocks

    def apply(self, r):
        out = r.copy()
        for (lu, piv), idx in zip(self._lu, self._blocks):
            out[idx] = scipy.linalg.lu_solve((lu, piv), r[idx])
        return out


def build_block_jacobi(residual_fn, state: np.ndarray, blocks,
                       colors=None, mode: str = "fd", tangent_fn=None,
                       base_residual=None):
    """Dense diagonal blocks probed with block-local unit directions.

    blocks: list of index arrays.  colors assigns each block an int color;
    blocks of one color are probed simultaneously (columns of same-colored
    blocks must not couple in the operator for the blocks to be exact --
    pass a distance-2 coloring of the element adjacency for LDG residuals).
    Singular blocks are regularized with a 1e-12 diagonal shift.
    """
    blocks = [np.asarray(b, dtype=int) for b in blocks]
    nblocks = len(blocks)
    colors = np.zeros(nblocks, dtype=int) if colors is None else \
        np.asarray(colors, dtype=int)
    bsize = {b.shape[0] for b in blocks}
    if len(bsize) != 1:
        raise SolverError("block sizes must be uniform")
    bs = bsize.pop()
    R0 = residual_fn(state) if (mode == "fd" and base_residual is None) \
        else base_residual
    mats = [np.zeros((bs, bs)) for _ in range(nblocks)]
    for color in np.unique(colors):
        members = [b for b, c in enumerate(colors) if c == color]
        for k in range(bs):
            v = np.zeros_like(state)
            for b in members:
                v[blocks[b][k]] = 1.0
            col = jacobian_vector(residual_fn, state, v, mode,
                                  base_residual=R0, tangent_fn=tangent_fn)
            for b in members:
                mats[b][:, k] = col[blocks[b]]
    lus = []
    for b, A in enumerate(mats):
        try:
            lu = scipy.linalg.lu_factor(A)
            if not np.isfinite(lu[0]).all() or \
                    np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1, np.abs(A).max())):
                raise scipy.linalg.LinAlgError
        except (scipy.linalg.LinAlgError, ValueError):
            A = A + 1e-12 * np.eye(bs)
            lu = scipy.linalg.lu_factor(A)
        lus.append(lu)
    return BlockJacobiPreconditioner(lus, blocks)


def element_blocks(n_elements: int, block_size: int):
    """Contiguous per-element dof blocks for PDE states packed element-major."""
    return [np.arange(e * block_size, (e + 1) * block_size)
            for e in range(n_elements)]


def greedy_coloring(adjacency: list[set[int]]) -> np.ndarray:
    """Deterministic greedy graph coloring (adjacency as neighbor sets)."""
    n = len(adjacency)
    colors = -np.ones(n, dtype=int)
    for v in range(n):
        used = {colors[u] for u in adjacency[v] if colors[u] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors


def distance2_coloring(neighbors: list[set[int]]) -> np.ndarray:
    """Coloring of the squared adjacency graph (needed for exact LDG
    diagonal blocks, whose Jacobian couples neighbors of neighbors)."""
    n = len(neighbors)
    adj2 = [set() for _ in range(n)]
    for v in range(n):
        for u in neighbors[v]:
            adj2[v].add(u)
            adj2[v] |= neighbors[u]
        adj2[v].discard(v)
    return greedy_coloring(adj2)


# ---------------------------------------------------------------------------
# Reduced-basis (deflation) preconditioner
# ---------------------------------------------------------------------------


class ReducedBasisPreconditioner:
    """Low-rank deflation of the operator on span(W):
    apply(r) = W H^{-1} W^T r + (I - W W^T) r with H = W^T J W."""

    def __init__(self, W, H_lu):
        self.W = W
        self._H_lu = H_lu

    @property
    def rank(self):
        return self.W.shape[1]

    def apply(self, r):
        c = self.W.T @ r
        return self.W @ (scipy.linalg.lu_solve(self._H_lu, c) - c) + r


def build_reduced_basis(snapshots, op, rank: int | None = None,
                        drop_tol: float = 1e-10):
    """Orthonormalize snapshots into W, form H = W^T (J W) column-by-column
    through the matrix-free operator, and return the deflation
    preconditioner.  Rank-deficient snapshot directions are dropped."""
    S = np.column_stack([np.asarray(s, dtype=float) for s in snapshots])
    if S.shape[1] == 0:
        raise SolverError("reduced basis needs at least one snapshot")
    if rank is not None:
        S = S[:, -rank:]
    Q, R = np.linalg.qr(S)
    keep = np.abs(np.diag(R)) > drop_tol * max(
        1.0, float(np.abs(np.diag(R)).max()))
    W = Q[:, keep]
    if W.shape[1] == 0:
        raise SolverError("all snapshot directions are degenerate")
    apply_op = op if callable(op) else op.apply
    JW = np.column_stack([apply_op(W[:, k]) for k in range(W.shape[1])])
    H = W.T @ JW
    return ReducedBasisPreconditioner(W, scipy.linalg.lu_factor(H))


class CompositePreconditioner:
    """Applies block-Jacobi, then reduced-basis deflation."""

    def __init__(self, block_jacobi, reduced_basis=None):
        self.block_jacobi = block_jacobi
        self.reduced_basis = reduced_basis

    def apply(self, r):
        z = self.block_jacobi.apply(r)
        if self.reduced_basis is not None:
            z = self.reduced_basis.apply(z)
        return z
