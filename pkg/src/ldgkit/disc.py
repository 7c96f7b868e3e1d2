"""Matrix-free LDG spatial discretization.

The semi-discrete system is M(u~) du/dt = -R(u~, t) with

    R = -int_K f : grad(v) + oint_dK (f^.n) v - int_K s v

per element, where for diffusion models the gradient q is reconstructed
element-locally from the weak form of q + grad(u) = 0 (so no global gradient
unknowns exist), and for wave models q is an evolved state obeying
dq/dt + grad(u) = 0.  All pointwise model functions run through compiled
kernel plans in batch over quadrature points.

Default traces (overridable per model through NumericalFluxSpec): u^ is the
one-sided trace picked by the sign of n.beta_hat with beta_hat = (1,..,1)/sqrt(d)
('switch') or the average ('centered'); q^ takes the side opposite the switch
('opposite') or the average ('centered'); the primal numerical flux is
f^.n = f(u^, q^).n + tau (u- - u^), and pure convection models use a local
Lax-Friedrichs flux with the model's wavespeed expression.

Face integrals are evaluated once per face and scattered with opposite signs
to the two incident elements, so the scheme is discretely conservative and,
with the fixed element ordering used here, bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import evaluate, evaluate_with_tangent
from .master import MasterElement, build_geom_master
from .mesh import FaceTopology, Mesh, MeshError
from .model import PdeModel, validate


class DiscError(ValueError):
    pass


class KernelNanError(DiscError):
    """A kernel evaluation produced NaN/Inf; reported with element ids."""


@dataclass
class SolverState:
    """Degree-of-freedom arrays: u (ne, nb, ncu), q (ne, nb, ncu, nd) for
    wave models, w (ne, nb, nw), at time t."""

    u: np.ndarray
    q: np.ndarray | None
    w: np.ndarray | None
    t: float

    def copy(self) -> "SolverState":
        return SolverState(self.u.copy(),
                           None if self.q is None else self.q.copy(),
                           None if self.w is None else self.w.copy(), self.t)

    def all_finite(self) -> bool:
        ok = bool(np.isfinite(self.u).all())
        if self.q is not None:
            ok = ok and bool(np.isfinite(self.q).all())
        if self.w is not None:
            ok = ok and bool(np.isfinite(self.w).all())
        return ok


# ---------------------------------------------------------------------------
# Geometry cache
# ---------------------------------------------------------------------------


class Discretization:
    """Model-independent tabulations on (mesh, master): volume metrics, face
    normals/measures, trace tabulations for both sides of every face, and
    element mass matrices.  Immutable after construction."""

    def __init__(self, mesh: Mesh, topology: FaceTopology,
                 master: MasterElement):
        if master.kind != mesh.elem_kind:
            raise DiscError("master element kind does not match the mesh")
        self.mesh = mesh
        self.topology = topology
        self.master = master
        self.geom = build_geom_master(mesh.elem_kind, mesh.p_geom)
        nd = mesh.nd
        ho = mesh.ho_nodes

        # volume metrics at solution quadrature points
        gphi = self.geom.eval_basis(master.quad_pts)          # (nq, ng)
        gdphi = self.geom.eval_basis_grad(master.quad_pts)    # (nq, ng, nd)
        J = np.einsum("egd,qgr->eqdr", ho, gdphi)
        detj = np.linalg.det(J)
        if np.any(detj <= 0):
            bad = int(np.argwhere(detj.min(axis=1) <= 0)[0][0])
            raise DiscError(f"nonpositive Jacobian in element {bad}")
        self.detj = detj
        self.invjt = np.linalg.inv(J).transpose(0, 1, 3, 2)   # (e,q,d,r)
        self.wdetj = master.quad_wts[None, :] * detj
        self.xq = np.einsum("qg,egd->eqd", gphi, ho)

        # solution node coordinates (for initial data and pointwise ODEs)
        gphi_n = self.geom.eval_basis(master.nodes)
        self.node_x = np.einsum("ng,egd->end", gphi_n, ho)

        # element mass matrices
        self.mass = np.einsum("eq,qa,qb->eab", self.wdetj, master.phi,
                              master.phi)
        self.mass_inv = np.linalg.inv(self.mass)

        # face tabulations
        topo = topology
        self._geom_face_phi = [self.geom.eval_basis(f.xi) for f in master.faces]
        self._geom_face_dphi = [self.geom.eval_basis_grad(f.xi)
                                for f in master.faces]
        (self.fi_x, self.fi_n, self.fi_wsj, self.fi_phi_l) = \
            self._face_geometry(topo.elem_l, topo.face_l)
        self.fi_phi_r = self._right_tabulations()
        (self.fb_x, self.fb_n, self.fb_wsj, self.fb_phi) = \
            self._face_geometry(topo.elem_b, topo.face_b)
        self.fi_nbar = self.fi_n.mean(axis=1)

        # characteristic normal spacing per face (volume / area), used for
        # 1/h penalty scalings
        self.elem_vol = self.wdetj.sum(axis=1)
        fi_area = np.maximum(self.fi_wsj.sum(axis=1), 1e-300)
        fb_area = np.maximum(self.fb_wsj.sum(axis=1), 1e-300)
        self.fi_h = 0.5 * (self.elem_vol[topo.elem_l]
                           + self.elem_vol[topo.elem_r]) / fi_area
        self.fb_h = self.elem_vol[topo.elem_b] / fb_area
        if mesh.nd == 1:
            self.fi_h = 0.5 * (self.elem_vol[topo.elem_l]
                               + self.elem_vol[topo.elem_r])
            self.fb_h = self.elem_vol[topo.elem_b]

    # -- geometry helpers ----------------------------------------------------

    def _face_geometry(self, elems, lfaces):
        """Physical quad points, outward unit normals, weighted surface
        jacobians and basis traces for the given (element, local face) list."""
        mesh, master = self.mesh, self.master
        nd = mesh.nd
        nf = elems.shape[0]
        nqf = master.faces[0].weights.shape[0] if master.faces else 0
        x = np.zeros((nf, nqf, nd))
        n = np.zeros((nf, nqf, nd))
        wsj = np.zeros((nf, nqf))
        phi = np.zeros((nf, nqf, master.n_nodes))
        if nf == 0:
            return x, n, wsj, phi
        from .master import face_embedding, reference_face_normal
        for lf in range(master.n_faces):
            sel = np.nonzero(lfaces == lf)[0]
            if sel.size == 0:
                continue
            ho = mesh.ho_nodes[elems[sel]]                    # (k, ng, nd)
            gp = self._geom_face_phi[lf]                      # (nqf, ng)
            x[sel] = np.einsum("qg,kgd->kqd", gp, ho)
            phi[sel] = master.faces[lf].phi[None, :, :]
            w = master.faces[lf].weights
            if nd == 1:
                nref = reference_face_normal(mesh.elem_kind, lf)
                n[sel] = nref[None, None, :]
                wsj[sel] = w[None, :]
                continue
            _, T = face_embedding(mesh.elem_kind, lf)         # (fd, nd)
            gd = self._geom_face_dphi[lf]                     # (nqf, ng, nd)
            tang = np.einsum("qgd,sd,kgc->kqcs", gd, T, ho)   # dx/dsigma
            if nd == 2:
                t = tang[:, :, :, 0]
                norm = np.stack([t[:, :, 1], -t[:, :, 0]], axis=-1)
            else:
                t1 = tang[:, :, :, 0]
                t2 = tang[:, :, :, 1]
                norm = np.cross(t1, t2)
            mag = np.linalg.norm(norm, axis=-1)
            n[sel] = norm / mag[:, :, None]
            wsj[sel] = w[None, :] * mag
        return x, n, wsj, phi

    def _right_tabulations(self):
        """Solution basis traces of the right element at the left side's
        physical face quadrature points (periodic translation applied)."""
        mesh, master, topo = self.mesh, self.master, self.topology
        nfi = topo.n_interior
        nqf = self.fi_x.shape[1]
        if nfi == 0:
            return np.zeros((0, nqf, master.n_nodes))
        from .master import face_embedding
        target = self.fi_x + topo.translation[:, None, :]
        phi_r = np.zeros((nfi, nqf, master.n_nodes))
        scale = max(mesh.diameter(), 1.0)
        for lf in range(master.n_faces):
            sel = np.nonzero(topo.face_r == lf)[0]
            if sel.size == 0:
                continue
            origin, T = face_embedding(mesh.elem_kind, lf)
            fd = T.shape[0]
            ho = mesh.ho_nodes[topo.elem_r[sel]]
            xt = target[sel]                                  # (k, nqf, nd)
            k = sel.size
            sigma = np.tile(master.faces[lf].sigma.mean(axis=0),
                            (k, nqf, 1))
            for _ in range(50):
                xi = origin[None, None, :] + sigma @ T
                pts = xi.reshape(-1, mesh.nd)
                gphi = self.geom.eval_basis(pts).reshape(k, nqf, -1)
                gd = self.geom.eval_basis_grad(pts).reshape(
                    k, nqf, -1, mesh.nd)
                xcur = np.einsum("kqg,kgd->kqd", gphi, ho)
                res = xt - xcur
                if np.max(np.abs(res)) < 1e-13 * scale:
                    break
                tang = np.einsum("kqgd,sd,kgc->kqcs", gd, T, ho)
                A = np.einsum("kqcs,kqcr->kqsr", tang, tang)
                b = np.einsum("kqcs,kqc->kqs", tang, res)
                sigma = sigma + np.linalg.solve(A, b[..., None])[..., 0]
            else:
                raise MeshError("face inverse mapping did not converge; "
                                "mesh faces may be non-conforming")
            xi = origin[None, None, :] + sigma @ T
            phi_r[sel] = master.eval_basis(
                xi.reshape(-1, mesh.nd)).reshape(k, nqf, -1)
        return phi_r

    # -- trace gathers -------------------------------------------------------

    def trace_left(self, dofs: np.ndarray) -> np.ndarray:
        return np.einsum("fqa,fa...->fq...", self.fi_phi_l,
                         dofs[self.topology.elem_l])

    def trace_right(self, dofs: np.ndarray) -> np.ndarray:
        return np.einsum("fqa,fa...->fq...", self.fi_phi_r,
                         dofs[self.topology.elem_r])

    def trace_boundary(self, dofs: np.ndarray) -> np.ndarray:
        return np.einsum("fqa,fa...->fq...", self.fb_phi,
                         dofs[self.topology.elem_b])


def scatter_add(target: np.ndarray, elems: np.ndarray, vals: np.ndarray):
    """target[elems[f]] += vals[f] with deterministic bincount accumulation."""
    ne = target.shape[0]
    m = int(np.prod(target.shape[1:]))
    idx = (elems[:, None] * m + np.arange(m)[None, :]).ravel()
    acc = np.bincount(idx, weights=vals.reshape(len(elems), m).ravel(),
                      minlength=ne * m)
    target += acc.reshape(target.shape)


# ---------------------------------------------------------------------------
# The semi-discrete LDG system
# ---------------------------------------------------------------------------


class LdgSystem:
    """Bundles (model, mesh, topology, master) into the semi-discrete system.

    Evolved unknowns: u always; q for wave models; w when nw > 0.  Residual
    and mass-application methods return one array per block; `pack`/`unpack`
    map between block arrays and the flat vectors seen by solvers.
    """

    def __init__(self, model: PdeModel, mesh: Mesh, topology: FaceTopology,
                 master: MasterElement):
        diags = validate(model)
        if diags:
            raise DiscError("invalid model: " + "; ".join(map(str, diags)))
        if model.nd != mesh.nd:
            raise DiscError(f"model nd={model.nd} but mesh nd={mesh.nd}")
        self.model = model
        self.mesh = mesh
        self.topology = topology
        self.master = master
        self.disc = Discretization(mesh, topology, master)
        self.kind = model.kind
        self.ncu, self.nd, self.nw = model.ncu, model.nd, model.nw

        if self.kind == "C" and model.wavespeed is None:
            raise DiscError(
                "convection models need a wavespeed expression for the "
                "Lax-Friedrichs flux")

        beta = np.ones(mesh.nd) / np.sqrt(mesh.nd)
        self.beta_hat = beta
        self.fi_switch = (self.disc.fi_nbar @ beta) > 0.0

        # boundary faces grouped by tag, with bc checks
        self.bc_groups = []
        tags = np.unique(topology.tag_b) if topology.n_boundary else []
        for tag in tags:
            tag = int(tag)
            if tag not in model.bcs:
                raise DiscError(f"mesh boundary tag {tag} has no [bc] entry")
            bc = model.bcs[tag]
            if bc.type == "periodic":
                raise DiscError(
                    f"tag {tag} is periodic in the model but was not paired "
                    "in the mesh topology")
            if bc.type == "absorbing" and self.kind != "W":
                raise DiscError("absorbing boundaries require a wave model")
            idx = np.nonzero(topology.tag_b == tag)[0]
            self.bc_groups.append((tag, bc, idx))

        self._mu_bind = model.mu_bindings()
        self._mass_is_constant = all(
            ins[0] == "const" for ins in model.mass_plan().instructions)

    # -- shapes and packing ---------------------------------------------------

    @property
    def n_elements(self):
        return self.mesh.n_elements

    @property
    def n_nodes(self):
        return self.master.n_nodes

    def block_shapes(self):
        ne, nb = self.n_elements, self.n_nodes
        shapes = [("u", (ne, nb, self.ncu))]
        if self.kind == "W":
            shapes.append(("q", (ne, nb, self.ncu, self.nd)))
        if self.nw > 0:
            shapes.append(("w", (ne, nb, self.nw)))
        return shapes

    @property
    def n_dofs(self):
        return sum(int(np.prod(s)) for _, s in self.block_shapes())

    def pack(self, u, q=None, w=None) -> np.ndarray:
        parts = [np.ravel(u)]
        if self.kind == "W":
            parts.append(np.ravel(q))
        if self.nw > 0:
            parts.append(np.ravel(w))
        return np.concatenate(parts)

    def unpack(self, vec: np.ndarray):
        out = []
        k = 0
        for _, shape in self.block_shapes():
            n = int(np.prod(shape))
            out.append(vec[k:k + n].reshape(shape))
            k += n
        u = out[0]
        q = out[1] if self.kind == "W" else None
        w = out[-1] if self.nw > 0 else None
        return u, q, w

    def state_from_vector(self, vec, t) -> SolverState:
        u, q, w = self.unpack(vec)
        return SolverState(u=u, q=q, w=w, t=t)

    # -- kernels ---------------------------------------------------------------

    def _bindings(self, x, t, u=None, q=None, w=None, n=None):
        b = {"t": float(t)}
        b.update(self._mu_bind)
        for k in range(self.nd):
            b[f"x{k + 1}"] = x[..., k].ravel()
        if u is not None:
            for i in range(self.ncu):
                b[f"u{i + 1}"] = u[..., i].ravel()
        if q is not None:
            for i in range(self.ncu):
                for j in range(self.nd):
                    b[f"q{i + 1}_{j + 1}"] = q[..., i, j].ravel()
        if w is not None:
            for i in range(self.nw):
                b[f"w{i + 1}"] = w[..., i].ravel()
        if n is not None:
            for k in range(self.nd):
                b[f"n{k + 1}"] = n[..., k].ravel()
        return b

    def _seeds(self, du=None, dq=None, dw=None, dn_zero=True):
        s = {}
        if du is not None:
            for i in range(self.ncu):
                s[f"u{i + 1}"] = du[..., i].ravel()
        if dq is not None:
            for i in range(self.ncu):
                for j in range(self.nd):
                    s[f"q{i + 1}_{j + 1}"] = dq[..., i, j].ravel()
        if dw is not None:
            for i in range(self.nw):
                s[f"w{i + 1}"] = dw[..., i].ravel()
        return s

    def _eval(self, plan, bindings, shape, label, seeds=None):
        """Evaluate a plan into (..., n_out) with NaN reporting."""
        if seeds is None:
            out = evaluate(plan, bindings)
            tan = None
        else:
            out, tan = evaluate_with_tangent(plan, bindings, seeds)
        if not np.isfinite(out).all():
            bad = np.argwhere(~np.isfinite(out))
            col = int(bad[0][1])
            nq = shape[1] if len(shape) > 1 else 1
            raise KernelNanError(
                f"{label} kernel produced non-finite values "
                f"(first at element {col // nq})")
        no = out.shape[0]
        B = int(np.prod(shape))
        if out.shape[1] != B:  # constant plans evaluate with batch 1
            out = np.broadcast_to(out, (no, B))
            if tan is not None:
                tan = np.broadcast_to(tan, (no, B))
        out = np.moveaxis(out.reshape((no,) + shape), 0, -1)
        if tan is not None:
            tan = np.moveaxis(tan.reshape((no,) + shape), 0, -1)
        return out, tan

    # -- initial data ----------------------------------------------------------

    def interpolate_initial(self) -> SolverState:
        ne, nb = self.n_elements, self.n_nodes
        b = self._bindings(self.disc.node_x, 0.0)
        vals, _ = self._eval(self.model.init_plan(), b, (ne, nb), "initial")
        k = self.ncu
        u = vals[..., :k].copy()
        q = None
        if self.kind == "W":
            q = vals[..., k:k + self.ncu * self.nd].reshape(
                ne, nb, self.ncu, self.nd).copy()
            k += self.ncu * self.nd
        w = vals[..., k:k + self.nw].copy() if self.nw > 0 else None
        return SolverState(u=u, q=q, w=w, t=0.0)

    # -- mixed reconstruction ---------------------------------------------------

    def compute_mixed(self, u: np.ndarray, t: float,
                      homogeneous: bool = False) -> np.ndarray:
        """Element-local weak solve of q + grad(u) = 0, assembled in the
        lifted strong form M q_ij = -int d_j(u_i) phi + oint (u- - u^) n_j phi
        (identical to the weak form under the quadrature in use, but exact to
        roundoff for continuous data).

        homogeneous=True zeroes Dirichlet data (the linearization of the
        reconstruction, used by tangent-mode Jacobian products).
        """
        if self.kind != "D":
            raise DiscError("compute_mixed applies to diffusion models")
        rhs = self._lifted_gradient_form(u, t, homogeneous)
        return np.einsum("eab,ebij->eaij", self.disc.mass_inv, rhs)

    def _lifted_gradient_form(self, u, t, homogeneous=False, q=None,
                              du=None, dq=None):
        """-int d_j(u_i) phi_a + oint (u- - u^) n_j phi_a, both sides.

        With du given, returns the exact directional derivative of the form
        instead (the form is linear in the traces; absorbing boundaries
        freeze the wavespeed in the tangent)."""
        tangent = du is not None
        d = self.disc
        phi, dphi = self.master.phi, self.master.dphi
        act = du if tangent else u
        grad_u = np.einsum("eai,eqjr,qar->eqij", act, d.invjt, dphi,
                           optimize=True)
        rhs = -np.einsum("eq,eqij,qa->eaij", d.wdetj, grad_u, phi,
                         optimize=True)

        uh, duh, ul, ur, dul, dur = self._interior_uhat(u, du, q=q, dq=dq,
                                                        t=t)
        jump_l = (dul - duh) if tangent else (ul - uh)
        jump_r = (dur - duh) if tangent else (ur - uh)
        topo = self.topology
        vals_l = np.einsum("fq,fqi,fqj,fqa->faij", d.fi_wsj, jump_l,
                           d.fi_n, d.fi_phi_l, optimize=True)
        # the right element sees the opposite outward normal
        vals_r = np.einsum("fq,fqi,fqj,fqa->faij", d.fi_wsj, jump_r,
                           d.fi_n, d.fi_phi_r, optimize=True)
        scatter_add(rhs, topo.elem_l, vals_l)
        scatter_add(rhs, topo.elem_r, -vals_r)

        ub = d.trace_boundary(u)
        qb = None if q is None else d.trace_boundary(q)
        dub = d.trace_boundary(du) if tangent else None
        dqb = d.trace_boundary(dq) if (tangent and dq is not None) else None
        uhat_b, duhat_b = self._boundary_uhat(ub, qb, t, homogeneous,
                                              dub, dqb)
        jump_b = (dub - duhat_b) if tangent else (ub - uhat_b)
        vals = np.einsum("fq,fqi,fqj,fqa->faij", d.fb_wsj, jump_b,
                         d.fb_n, d.fb_phi, optimize=True)
        scatter_add(rhs, topo.elem_b, vals)
        return rhs

    def _interior_uhat(self, u, du=None, q=None, dq=None, t=0.0):
        d = self.disc
        ul = d.trace_left(u)
        ur = d.trace_right(u)
        dul = dur = duh = None
        if du is not None:
            dul = d.trace_left(du)
            dur = d.trace_right(du)
        if self.model.numflux.uhat is not None:
            b, seeds = self._face_override_bindings(u, q, du, dq, t)
            uh, duh = self._eval(self.model.uhat_plan(), b,
                                 d.fi_x.shape[:2], "uhat override", seeds)
            return uh, duh, ul, ur, dul, dur
        rule = self.model.numflux.trace
        sw = self.fi_switch[:, None, None]
        if rule == "centered":
            uh = 0.5 * (ul + ur)
        else:
            uh = np.where(sw, ul, ur)
        if du is not None:
            duh = 0.5 * (dul + dur) if rule == "centered" else \
                np.where(sw, dul, dur)
        return uh, duh, ul, ur, dul, dur

    def _face_override_bindings(self, u, q, du, dq, t):
        """Bindings/seeds over both traces for user u^ / f^.n expressions."""
        d = self.disc
        b = {"t": float(t)}
        b.update(self._mu_bind)
        for k in range(self.nd):
            b[f"x{k + 1}"] = d.fi_x[..., k].ravel()
            b[f"n{k + 1}"] = d.fi_n[..., k].ravel()
        ul, ur = d.trace_left(u), d.trace_right(u)
        for i in range(self.ncu):
            b[f"ul{i + 1}"] = ul[..., i].ravel()
            b[f"ur{i + 1}"] = ur[..., i].ravel()
        if q is not None:
            ql, qr = d.trace_left(q), d.trace_right(q)
            for i in range(self.ncu):
                for j in range(self.nd):
                    b[f"ql{i + 1}_{j + 1}"] = ql[..., i, j].ravel()
                    b[f"qr{i + 1}_{j + 1}"] = qr[..., i, j].ravel()
        seeds = None
        if du is not None:
            seeds = {}
            dul, dur = d.trace_left(du), d.trace_right(du)
            for i in range(self.ncu):
                seeds[f"ul{i + 1}"] = dul[..., i].ravel()
                seeds[f"ur{i + 1}"] = dur[..., i].ravel()
            if dq is not None:
                dql, dqr = d.trace_left(dq), d.trace_right(dq)
                for i in range(self.ncu):
                    for j in range(self.nd):
                        seeds[f"ql{i + 1}_{j + 1}"] = dql[..., i, j].ravel()
                        seeds[f"qr{i + 1}_{j + 1}"] = dqr[..., i, j].ravel()
        return b, seeds

    def _boundary_uhat(self, ub, qb, t, homogeneous=False, dub=None, dqb=None):
        """Boundary trace u^ per bc type (and its tangent when requested)."""
        d = self.disc
        uhat = ub.copy()
        duhat = dub.copy() if dub is not None else None
        for tag, bc, idx in self.bc_groups:
            if bc.type == "dirichlet":
                if homogeneous:
                    uhat[idx] = 0.0
                else:
                    g, _ = self._eval(self.model.bc_plan(tag),
                                      self._bindings(d.fb_x[idx], t,
                                                     n=d.fb_n[idx]),
                                      d.fb_x[idx].shape[:2], f"bc tag {tag}")
                    uhat[idx] = g
                if duhat is not None:
                    duhat[idx] = 0.0
            elif bc.type == "absorbing":
                c = self._wavespeed_boundary(idx, ub, t)
                qn = np.einsum("fqij,fqj->fqi", qb[idx], d.fb_n[idx])
                uhat[idx] = 0.5 * (ub[idx] + c * qn)
                if duhat is not None:
                    dqn = np.einsum("fqij,fqj->fqi", dqb[idx], d.fb_n[idx])
                    duhat[idx] = 0.5 * (dub[idx] + c * dqn)
            # neumann keeps the interior trace
        return uhat, duhat

    def _wavespeed_boundary(self, idx, ub, t):
        d = self.disc
        plan = self.model.wavespeed_plan()
        if plan is None:
            raise DiscError("absorbing boundary requires a model wavespeed")
        c, _ = self._eval(plan, self._bindings(d.fb_x[idx], t, u=ub[idx],
                                               n=d.fb_n[idx]),
                          ub[idx].shape[:2], "wavespeed")
        return c  # (k, nqf, 1)

    # -- residual ----------------------------------------------------------------

    def residual(self, state: SolverState):
        return self._residual_impl(state.u, state.q, state.w, state.t)

    def residual_tangent(self, state: SolverState, du, dq=None, dw=None):
        return self._residual_impl(state.u, state.q, state.w, state.t,
                                   du=du, dq=dq, dw=dw)

    def _residual_impl(self, u, q, w, t, du=None, dq=None, dw=None):
        tangent = du is not None
        d = self.disc
        phi, dphi = self.master.phi, self.master.dphi
        ne, nb = self.n_elements, self.n_nodes

        if self.kind == "D":
            q = self.compute_mixed(u, t)
            if tangent:
                dq = self.compute_mixed(du, t, homogeneous=True)

        # volume fields
        uq = np.einsum("qa,eai->eqi", phi, u)
        qq = None if q is None else np.einsum("qa,eaij->eqij", phi, q)
        wq = None if w is None else np.einsum("qa,eak->eqk", phi, w)
        bind = self._bindings(d.xq, t, uq, qq, wq)
        seeds = None
        if tangent:
            duq = np.einsum("qa,eai->eqi", phi, du)
            dqq = None if dq is None else np.einsum("qa,eaij->eqij", phi, dq)
            dwq = None if dw is None else np.einsum("qa,eak->eqk", phi, dw)
            seeds = self._seeds(duq, dqq, dwq)
        nq = phi.shape[0]
        fq, dfq = self._eval(self.model.flux_plan(), bind, (ne, nq), "flux",
                             seeds)
        fq = fq.reshape(ne, nq, self.ncu, self.nd)
        sq, dsq = self._eval(self.model.source_plan(), bind, (ne, nq),
                             "source", seeds)
        if tangent:
            fq = dfq.reshape(ne, nq, self.ncu, self.nd)
            sq = dsq

        Ru = -np.einsum("eq,eqid,eqdr,qar->eai", d.wdetj, fq, d.invjt, dphi,
                        optimize=True)
        Ru -= np.einsum("eq,eqi,qa->eai", d.wdetj, sq, phi, optimize=True)

        # interior faces
        if self.topology.n_interior > 0:
            fhat = self._interior_fhat(u, q, w, t, du, dq, dw)
            vals_l = np.einsum("fq,fqi,fqa->fai", d.fi_wsj, fhat,
                               d.fi_phi_l, optimize=True)
            vals_r = np.einsum("fq,fqi,fqa->fai", d.fi_wsj, fhat,
                               d.fi_phi_r, optimize=True)
            scatter_add(Ru, self.topology.elem_l, vals_l)
            scatter_add(Ru, self.topology.elem_r, -vals_r)

        # boundary faces
        fhat_b = self._boundary_fhat(u, q, w, t, du, dq, dw)
        vals_b = np.einsum("fq,fqi,fqa->fai", d.fb_wsj, fhat_b, d.fb_phi,
                           optimize=True)
        scatter_add(Ru, self.topology.elem_b, vals_b)

        Rq = None
        if self.kind == "W":
            Rq = self._wave_gradient_residual(u, q, t, du, dq, tangent)
        Rw = None
        if self.nw > 0:
            Rw = self._ode_residual(u, q, w, t, du, dq, dw, tangent)
        return Ru, Rq, Rw

    # -- interior numerical flux ---------------------------------------------

    def _interior_fhat(self, u, q, w, t, du, dq, dw):
        d = self.disc
        tangent = du is not None
        uh, duh, ul, ur, dul, dur = self._interior_uhat(u, du, q=q, dq=dq,
                                                        t=t)

        if self.model.numflux.fhat is not None:
            return self._override_fhat(u, q, t, du, dq)

        if self.kind == "C":
            return self._llf_flux(ul, ur, dul, dur, t, d.fi_x, d.fi_n,
                                  d.trace_left(w) if w is not None else None)

        ql = d.trace_left(q)
        qr = d.trace_right(q)
        rule = self.model.numflux.grad_trace
        if rule == "centered":
            qh = 0.5 * (ql + qr)
        else:  # side opposite the u^ switch
            sw = self.fi_switch[:, None, None, None]
            qh = np.where(sw, qr, ql)
        dqh = None
        if tangent:
            dql = d.trace_left(dq)
            dqr = d.trace_right(dq)
            dqh = 0.5 * (dql + dqr) if rule == "centered" else \
                np.where(self.fi_switch[:, None, None, None], dqr, dql)

        wh = None if w is None else 0.5 * (d.trace_left(w) + d.trace_right(w))
        bind = self._bindings(d.fi_x, t, uh, qh, wh, n=d.fi_n)
        seeds = self._seeds(duh, dqh) if tangent else None
        shape = d.fi_x.shape[:2]
        f, df = self._eval(self.model.flux_plan(), bind, shape, "face flux",
                           seeds)
        fmat = (df if tangent else f).reshape(shape + (self.ncu, self.nd))
        fhat = np.einsum("fqij,fqj->fqi", fmat, d.fi_n)

        tau = self._tau_interior(ul, ur, t)
        if tangent:
            fhat = fhat + tau * (dul - duh)
        else:
            fhat = fhat + tau * (ul - uh)
        return fhat

    def _penalty_scales_over_h(self) -> bool:
        flag = self.model.numflux.tau_over_h
        if flag is None:
            return self.kind == "D"
        return bool(flag)

    def _tau_interior(self, ul, ur, t):
        """Stabilization: tau (scaled by 1/h for diffusion models) plus the
        local wavespeed when the model has one (covers convective parts of
        diffusion/wave fluxes)."""
        d = self.disc
        tau = float(self.model.numflux.tau)
        base = tau / d.fi_h[:, None, None] if self._penalty_scales_over_h() \
            else tau
        plan = self.model.wavespeed_plan()
        if plan is None:
            return base
        lam_l, _ = self._eval(plan, self._bindings(d.fi_x, t, u=ul, n=d.fi_n),
                              d.fi_x.shape[:2], "wavespeed")
        lam_r, _ = self._eval(plan, self._bindings(d.fi_x, t, u=ur, n=d.fi_n),
                              d.fi_x.shape[:2], "wavespeed")
        return base + np.maximum(lam_l, lam_r)

    def _llf_flux(self, ul, ur, dul, dur, t, x, n, wtrace):
        """Local Lax-Friedrichs: f^.n = {f}.n + (lambda/2)(u- - u+)."""
        tangent = dul is not None
        shape = x.shape[:2]
        seeds_l = self._seeds(dul) if tangent else None
        seeds_r = self._seeds(dur) if tangent else None
        fl, dfl = self._eval(self.model.flux_plan(),
                             self._bindings(x, t, ul, None, wtrace, n=n),
                             shape, "face flux", seeds_l)
        fr, dfr = self._eval(self.model.flux_plan(),
                             self._bindings(x, t, ur, None, wtrace, n=n),
                             shape, "face flux", seeds_r)
        ws = self.model.wavespeed_plan()
        lam_l, dlam_l = self._eval(ws, self._bindings(x, t, ul, n=n), shape,
                                   "wavespeed", seeds_l)
        lam_r, dlam_r = self._eval(ws, self._bindings(x, t, ur, n=n), shape,
                                   "wavespeed", seeds_r)
        lam = np.maximum(lam_l, lam_r)
        fl = fl.reshape(shape + (self.ncu, self.nd))
        fr = fr.reshape(shape + (self.ncu, self.nd))
        favg = 0.5 * np.einsum("fqij,fqj->fqi", fl + fr, n)
        if not tangent:
            return favg + 0.5 * lam * (ul - ur)
        dfl = dfl.reshape(shape + (self.ncu, self.nd))
        dfr = dfr.reshape(shape + (self.ncu, self.nd))
        dfavg = 0.5 * np.einsum("fqij,fqj->fqi", dfl + dfr, n)
        dlam = np.where(lam_l >= lam_r, dlam_l, dlam_r)
        return dfavg + 0.5 * dlam * (ul - ur) + 0.5 * lam * (dul - dur)

    def _override_fhat(self, u, q, t, du, dq):
        """User-supplied normal-flux expressions over both traces."""
        b, seeds = self._face_override_bindings(u, q, du, dq, t)
        f, df = self._eval(self.model.fhat_plan(), b, self.disc.fi_x.shape[:2],
                           "fhat override", seeds)
        return df if du is not None else f

    # -- boundary numerical flux ------------------------------------------------

    def _boundary_fhat(self, u, q, w, t, du, dq, dw):
        d = self.disc
        tangent = du is not None
        shape = d.fb_x.shape[:2]
        ub = d.trace_boundary(u)
        qb = None if q is None else d.trace_boundary(q)
        wb = None if w is None else d.trace_boundary(w)
        dub = d.trace_boundary(du) if tangent else None
        dqb = None if (not tangent or dq is None) else d.trace_boundary(dq)
        fhat = np.zeros(shape + (self.ncu,))
        for tag, bc, idx in self.bc_groups:
            x, n = d.fb_x[idx], d.fb_n[idx]
            sh = x.shape[:2]
            if bc.type == "neumann":
                if tangent:
                    continue  # prescribed flux has zero tangent
                g, _ = self._eval(self.model.bc_plan(tag),
                                  self._bindings(x, t, n=n), sh,
                                  f"bc tag {tag}")
                fhat[idx] = g
                continue
            if bc.type == "absorbing":
                c = self._wavespeed_boundary(idx, ub, t)
                qn = np.einsum("fqij,fqj->fqi", qb[idx], n)
                uh = 0.5 * (ub[idx] + c * qn)
                if tangent:
                    dqn = np.einsum("fqij,fqj->fqi", dqb[idx], n)
                    duh = 0.5 * (dub[idx] + c * dqn)
                    fhat[idx] = c * duh
                else:
                    fhat[idx] = c * uh
                continue
            # dirichlet
            if self.kind == "C":
                g, _ = self._eval(self.model.bc_plan(tag),
                                  self._bindings(x, t, n=n), sh,
                                  f"bc tag {tag}")
                fhat[idx] = self._llf_boundary(ub[idx], g, x, n, t,
                                               None if wb is None else wb[idx],
                                               None if dub is None
                                               else dub[idx])
                continue
            g, _ = self._eval(self.model.bc_plan(tag),
                              self._bindings(x, t, n=n), sh, f"bc tag {tag}")
            seeds = None
            if tangent:
                seeds = self._seeds(np.zeros_like(dub[idx]),
                                    None if dqb is None else dqb[idx])
            bind = self._bindings(x, t, g, None if qb is None else qb[idx],
                                  None if wb is None else wb[idx], n=n)
            f, df = self._eval(self.model.flux_plan(), bind, sh,
                               "boundary flux", seeds)
            fmat = (df if tangent else f).reshape(sh + (self.ncu, self.nd))
            fn = np.einsum("fqij,fqj->fqi", fmat, n)
            tau = self._tau_boundary(idx, ub[idx], g, t)
            if tangent:
                fhat[idx] = fn + tau * dub[idx]
            else:
                fhat[idx] = fn + tau * (ub[idx] - g)
        return fhat

    def _tau_boundary(self, idx, ub, g, t):
        d = self.disc
        tau = float(self.model.numflux.tau)
        tau = tau / d.fb_h[idx][:, None, None] \
            if self._penalty_scales_over_h() else tau
        plan = self.model.wavespeed_plan()
        if plan is None:
            return tau
        x, n = d.fb_x[idx], d.fb_n[idx]
        lam_i, _ = self._eval(plan, self._bindings(x, t, u=ub, n=n),
                              x.shape[:2], "wavespeed")
        lam_g, _ = self._eval(plan, self._bindings(x, t, u=g, n=n),
                              x.shape[:2], "wavespeed")
        return tau + np.maximum(lam_i, lam_g)

    def _llf_boundary(self, ub, g, x, n, t, wb, dub):
        tangent = dub is not None
        sh = x.shape[:2]
        seeds = self._seeds(dub) if tangent else None
        fi, dfi = self._eval(self.model.flux_plan(),
                             self._bindings(x, t, ub, None, wb, n=n), sh,
                             "boundary flux", seeds)
        fg, _ = self._eval(self.model.flux_plan(),
                           self._bindings(x, t, g, None, wb, n=n), sh,
                           "boundary flux")
        ws = self.model.wavespeed_plan()
        lam_i, dlam_i = self._eval(ws, self._bindings(x, t, ub, n=n), sh,
                                   "wavespeed", seeds)
        lam_g, _ = self._eval(ws, self._bindings(x, t, g, n=n), sh,
                              "wavespeed")
        lam = np.maximum(lam_i, lam_g)
        fi = fi.reshape(sh + (self.ncu, self.nd))
        fg = fg.reshape(sh + (self.ncu, self.nd))
        if not tangent:
            favg = 0.5 * np.einsum("fqij,fqj->fqi", fi + fg, n)
            return favg + 0.5 * lam * (ub - g)
        dfi = dfi.reshape(sh + (self.ncu, self.nd))
        dfavg = 0.5 * np.einsum("fqij,fqj->fqi", dfi, n)
        dlam = np.where(lam_i >= lam_g, dlam_i, 0.0)
        return dfavg + 0.5 * dlam * (ub - g) + 0.5 * lam * dub

    # -- wave-model gradient equation ------------------------------------------

    def _wave_gradient_residual(self, u, q, t, du, dq, tangent):
        """Gradient equation dq/dt + grad(u) = 0 with the compute_mixed
        trace rule: M dq/dt = -Rq."""
        if tangent:
            return -self._lifted_gradient_form(u, t, q=q, du=du, dq=dq)
        return -self._lifted_gradient_form(u, t, q=q)

    def wave_gradient_rhs(self, state: SolverState) -> np.ndarray:
        """dq/dt residual: M dq/dt = -Rq (returns Rq)."""
        if self.kind != "W":
            raise DiscError("wave_gradient_rhs applies to wave models")
        return self._wave_gradient_residual(state.u, state.q, state.t,
                                            None, None, False)

    # -- pointwise ODE ------------------------------------------------------------

    def _ode_residual(self, u, q, w, t, du, dq, dw, tangent):
        """alpha dw/dt + beta w = s_w, collocated at solution nodes:
        residual block Rw = beta w - s_w(u~)."""
        ode = self.model.ode
        b = self._bindings(self.disc.node_x, t, u, q, w)
        seeds = self._seeds(du, dq, dw) if tangent else None
        shape = (self.n_elements, self.n_nodes)
        sw, dsw = self._eval(self.model.sw_plan(), b, shape, "ode source",
                             seeds)
        if tangent:
            return ode.beta * dw - dsw
        return ode.beta * w - sw

    # -- mass application -----------------------------------------------------------

    def mass_apply(self, state: SolverState, vu, vq=None, vw=None):
        """Block application of the state-dependent mass operator:
        u block int m_i(u~) v_i phi_a, plain mass for q, alpha*v for w."""
        d = self.disc
        phi = self.master.phi
        if self._mass_is_constant:
            mvals, _ = self._eval(self.model.mass_plan(), {"t": 0.0},
                                  (1, 1), "mass")
            m = np.broadcast_to(mvals.reshape(1, 1, self.ncu),
                                d.xq.shape[:2] + (self.ncu,))
        else:
            uq = np.einsum("qa,eai->eqi", phi, state.u)
            qq = None if state.q is None else np.einsum(
                "qa,eaij->eqij", phi, state.q)
            wq = None if state.w is None else np.einsum(
                "qa,eak->eqk", phi, state.w)
            m, _ = self._eval(self.model.mass_plan(),
                              self._bindings(d.xq, state.t, uq, qq, wq),
                              d.xq.shape[:2], "mass")
        vuq = np.einsum("qa,eai->eqi", phi, vu)
        Mu = np.einsum("eq,eqi,qa->eai", d.wdetj, m * vuq, phi,
                       optimize=True)
        Mq = None
        if self.kind == "W":
            Mq = np.einsum("eab,ebij->eaij", d.mass, vq)
        Mw = None
        if self.nw > 0:
            Mw = self.model.ode.alpha * vw
        return Mu, Mq, Mw

    def mass_tangent_extra(self, state: SolverState, y_u, du, dq=None,
                           dw=None):
        """(d m(u~)/du . delta) * y contribution; zero for constant mass."""
        if self._mass_is_constant:
            return None
        d = self.disc
        phi = self.master.phi
        uq = np.einsum("qa,eai->eqi", phi, state.u)
        qq = None if state.q is None else np.einsum("qa,eaij->eqij", phi,
                                                    state.q)
        wq = None if state.w is None else np.einsum("qa,eak->eqk", phi,
                                                    state.w)
        duq = np.einsum("qa,eai->eqi", phi, du)
        dqq = None if dq is None else np.einsum("qa,eaij->eqij", phi, dq)
        dwq = None if dw is None else np.einsum("qa,eak->eqk", phi, dw)
        _, dm = self._eval(self.model.mass_plan(),
                           self._bindings(d.xq, state.t, uq, qq, wq),
                           d.xq.shape[:2], "mass",
                           self._seeds(duq, dqq, dwq))
        yq = np.einsum("qa,eai->eqi", phi, y_u)
        return np.einsum("eq,eqi,qa->eai", d.wdetj, dm * yq, phi,
                         optimize=True)


# ---------------------------------------------------------------------------
# Sum-factorized residual (tensor-product elements)
# ---------------------------------------------------------------------------


def spatial_residual_sumfac(system: LdgSystem, state: SolverState):
    """Residual with the volume terms evaluated by factored 1D contractions.

    Identical contract to LdgSystem.residual on quad/hex meshes; face and
    source terms are shared with the naive path.
    """
    if system.master.kind not in ("quad", "hex"):
        raise DiscError("sum factorization requires quad or hex elements")
    Ru, Rq, Rw = system.residual(state)
    d = system.disc
    master = system.master
    phi, dphi = master.phi, master.dphi

    u, q, w, t = state.u, state.q, state.w, state.t
    if system.kind == "D":
        q = system.compute_mixed(u, t)

    # remove the naive volume flux term, re-add the factored one
    uq = np.einsum("qa,eai->eqi", phi, u)
    qq = None if q is None else np.einsum("qa,eaij->eqij", phi, q)
    wq = None if w is None else np.einsum("qa,eak->eqk", phi, w)
    ne, nq = d.xq.shape[:2]
    f, _ = system._eval(system.model.flux_plan(),
                        system._bindings(d.xq, t, uq, qq, wq), (ne, nq),
                        "flux")
    f = f.reshape(ne, nq, system.ncu, system.nd)
    naive = -np.einsum("eq,eqid,eqdr,qar->eai", d.wdetj, f, d.invjt, dphi,
                       optimize=True)
    Ru -= naive
    Ru += _volume_flux_sumfac(system, f)
    return Ru, Rq, Rw


def _volume_flux_sumfac(system: LdgSystem, f):
    """-int f : grad(phi) via per-axis 1D contractions."""
    d = system.disc
    master = system.master
    L, D = master.phi1d, master.dphi1d      # (nq1, n1)
    nq1, n1 = L.shape
    ne = f.shape[0]
    ncu, nd = system.ncu, system.nd
    # G[e, q, i, r] = wdetj * f . invjt (reference-direction components)
    G = np.einsum("eq,eqid,eqdr->eqir", d.wdetj, f, d.invjt, optimize=True)
    if nd == 2:
        # quadrature and lattice both enumerate x fastest
        Gr = G.reshape(ne, nq1, nq1, ncu, 2)
        out = None
        for r, (Bx, By) in enumerate(((D, L), (L, D))):
            tx = np.einsum("qa,eyqc->eyac", Bx, Gr[..., r])
            txy = np.einsum("yb,eyac->ebac", By, tx)
            term = txy.reshape(ne, n1 * n1, ncu)
            out = term if out is None else out + term
        return -out
    Gr = G.reshape(ne, nq1, nq1, nq1, ncu, 3)
    out = None
    for r, (Bx, By, Bz) in enumerate(((D, L, L), (L, D, L), (L, L, D))):
        tx = np.einsum("qa,ezyqc->ezyac", Bx, Gr[..., r])
        ty = np.einsum("yb,ezyac->ezbac", By, tx)
        tz = np.einsum("zg,ezbac->egbac", Bz, ty)
        term = tz.reshape(ne, n1 ** 3, ncu)
        out = term if out is None else out + term
    return -out


def volume_flux_op_counts(system: LdgSystem) -> tuple[int, int]:
    """Multiply counts (per element) of the naive vs factored volume flux
    contraction, from array shapes."""
    master = system.master
    nq = master.phi.shape[0]
    nb = master.n_nodes
    ncu, nd = system.ncu, system.nd
    naive = nq * ncu * nd * nd + nq * nb * ncu * nd
    nq1 = master.phi1d.shape[0]
    n1 = master.phi1d.shape[1]
    pointwise = nq * ncu * nd * nd
    if nd == 2:
        stage = nq1 * nq1 * n1 * ncu + nq1 * n1 * n1 * ncu
        sumfac = pointwise + nd * stage
    else:
        stage = (nq1 ** 3 * n1 * ncu + nq1 * nq1 * n1 * n1 * ncu
                 + nq1 * n1 * n1 * n1 * ncu)
        sumfac = pointwise + nd * stage
    return naive, sumfac
