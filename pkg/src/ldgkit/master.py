"""Reference elements: nodal sets, quadrature rules, tabulated bases.

Reference domains: line/quad/hex are tensor products of [-1, 1]; tri and tet
are unit simplices (vertices at the origin and the unit points).  Nodal bases
come from Vandermonde inversion against an orthonormal modal basis: tensor
Legendre products on tensor kinds, numerically orthonormalized graded
monomials on simplices.  Solution nodes are Gauss-Lobatto on tensor kinds and
warped (Gauss-Lobatto-on-edges) simplex lattices; geometric lattices are
equispaced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

ELEM_KINDS = ("line", "tri", "quad", "tet", "hex")
KIND_DIM = {"line": 1, "tri": 2, "quad": 2, "tet": 3, "hex": 3}
SIMPLEX_KINDS = ("tri", "tet")
TENSOR_KINDS = ("line", "quad", "hex")

REF_VERTICES = {
    "line": np.array([[-1.0], [1.0]]),
    "tri": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    "quad": np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]),
    "tet": np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
    "hex": np.array([[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0],
                     [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0],
                     [-1.0, -1.0, 1.0], [1.0, -1.0, 1.0],
                     [1.0, 1.0, 1.0], [-1.0, 1.0, 1.0]]),
}

# local faces by vertex ids, ordered so the computed normal points outward
REF_FACES = {
    "line": [(0,), (1,)],
    "tri": [(0, 1), (1, 2), (2, 0)],
    "quad": [(0, 1), (1, 2), (2, 3), (3, 0)],
    "tet": [(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)],
    "hex": [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
            (3, 7, 6, 2), (0, 4, 7, 3), (1, 2, 6, 5)],
}

REF_MEASURE = {"line": 2.0, "tri": 0.5, "quad": 4.0, "tet": 1.0 / 6.0,
               "hex": 8.0}

# connectivity order of mesh vertices -> p=1 equispaced lattice order
VERTEX_LATTICE_PERM = {
    "line": [0, 1],
    "tri": [0, 1, 2],
    "quad": [0, 1, 3, 2],
    "tet": [0, 1, 2, 3],
    "hex": [0, 1, 3, 2, 4, 5, 7, 6],
}


class MasterElementError(ValueError):
    pass


# ---------------------------------------------------------------------------
# 1D point sets and quadrature
# ---------------------------------------------------------------------------


def _legendre_all(x: np.ndarray, p: int):
    """Values and derivatives of P_0..P_p at x (recurrence based)."""
    x = np.asarray(x, dtype=float)
    P = np.zeros((p + 1,) + x.shape)
    dP = np.zeros_like(P)
    P[0] = 1.0
    if p >= 1:
        P[1] = x
        dP[1] = 1.0
    for k in range(1, p):
        P[k + 1] = ((2 * k + 1) * x * P[k] - k * P[k - 1]) / (k + 1)
        dP[k + 1] = dP[k - 1] + (2 * k + 1) * P[k]
    return P, dP


def gll_points(p: int) -> np.ndarray:
    """Gauss-Lobatto-Legendre points on [-1, 1] (p+1 of them, p >= 1)."""
    if p == 1:
        return np.array([-1.0, 1.0])
    x = -np.cos(np.pi * np.arange(p + 1) / p)
    interior = slice(1, p)
    for _ in range(60):
        P, dP = _legendre_all(x[interior], p)
        # interior GLL nodes are the roots of P'_p; use the Legendre ODE
        # for the second derivative
        xi = x[interior]
        d2 = (2 * xi * dP[p] - p * (p + 1) * P[p]) / (1 - xi * xi)
        step = dP[p] / d2
        x[interior] = xi - step
        if np.max(np.abs(step)) < 1e-15:
            break
    return x


def gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def gauss_legendre_01(n: int):
    x, w = gauss_legendre(n)
    return (x + 1) / 2, w / 2


def gauss_jacobi_01(n: int, alpha: int):
    """Nodes/weights for int_0^1 (1-t)^alpha f(t) dt."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return (x + 1) / 2, w / 2 ** (alpha + 1)


def _npts(degree: int) -> int:
    return max(1, (degree + 2) // 2)


def volume_quadrature(kind: str, degree: int):
    """Quadrature exact for total polynomial degree <= degree."""
    n = _npts(degree)
    if kind == "line":
        x, w = gauss_legendre(n)
        return x[:, None], w
    if kind == "quad":
        # enumeration matches the node lattice: x fastest
        x, w = gauss_legendre(n)
        Y, X = np.meshgrid(x, x, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()]), np.outer(w, w).ravel()
    if kind == "hex":
        x, w = gauss_legendre(n)
        Z, Y, X = np.meshgrid(x, x, x, indexing="ij")
        W = w[:, None, None] * w[None, :, None] * w[None, None, :]
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()]), W.ravel()
    if kind == "tri":
        a, wa = gauss_legendre_01(n)
        b, wb = gauss_jacobi_01(n, 1)
        A, B = np.meshgrid(a, b, indexing="ij")
        pts = np.column_stack([(A * (1 - B)).ravel(), B.ravel()])
        return pts, np.outer(wa, wb).ravel()
    if kind == "tet":
        a, wa = gauss_legendre_01(n)
        b, wb = gauss_jacobi_01(n, 1)
        c, wc = gauss_jacobi_01(n, 2)
        A, B, C = np.meshgrid(a, b, c, indexing="ij")
        x = A * (1 - B) * (1 - C)
        y = B * (1 - C)
        pts = np.column_stack([x.ravel(), y.ravel(), C.ravel()])
        W = wa[:, None, None] * wb[None, :, None] * wc[None, None, :]
        return pts, W.ravel()
    raise MasterElementError(f"unsupported element kind {kind!r}")


FACE_KIND = {"line": None, "tri": "interval01", "quad": "interval11",
             "tet": "tri", "hex": "quad11"}


def face_quadrature(kind: str, degree: int):
    """Rule on the face reference domain shared by all faces of the kind."""
    n = _npts(degree)
    fk = FACE_KIND[kind]
    if fk is None:  # faces of a line element are points
        return np.zeros((1, 0)), np.array([1.0])
    if fk == "interval01":
        x, w = gauss_legendre_01(n)
        return x[:, None], w
    if fk == "interval11":
        x, w = gauss_legendre(n)
        return x[:, None], w
    if fk == "tri":
        return volume_quadrature("tri", degree)
    if fk == "quad11":
        return volume_quadrature("quad", degree)
    raise AssertionError(fk)


def face_embedding(kind: str, lf: int):
    """Affine embedding sigma -> xi of local face lf: xi = origin + sigma @ T."""
    verts = REF_VERTICES[kind][list(REF_FACES[kind][lf])]
    if kind == "line":
        return verts[0], np.zeros((0, 1))
    if kind in ("tri", "tet"):
        origin = verts[0]
        T = verts[1:] - verts[0]
        return origin, T
    if kind == "quad":
        origin = (verts[0] + verts[1]) / 2
        T = ((verts[1] - verts[0]) / 2)[None, :]
        return origin, T
    if kind == "hex":
        a, b, c, d = verts
        origin = (a + b + c + d) / 4
        T = np.stack([(b - a) / 2, (d - a) / 2])
        return origin, T
    raise AssertionError(kind)


def embed_face_points(kind: str, lf: int, sigma: np.ndarray) -> np.ndarray:
    origin, T = face_embedding(kind, lf)
    return origin[None, :] + sigma @ T


def reference_face_normal(kind: str, lf: int) -> np.ndarray:
    """Outward unit normal of the (flat) reference face."""
    _, T = face_embedding(kind, lf)
    if kind == "line":
        return np.array([-1.0]) if lf == 0 else np.array([1.0])
    if KIND_DIM[kind] == 2:
        t = T[0]
        n = np.array([t[1], -t[0]])
    else:
        n = np.cross(T[0], T[1])
    return n / np.linalg.norm(n)


# ---------------------------------------------------------------------------
# Lattices
# ---------------------------------------------------------------------------


def lattice_multi_indices(kind: str, p: int) -> list[tuple[int, ...]]:
    if kind == "line":
        return [(i,) for i in range(p + 1)]
    if kind == "tri":
        return [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
    if kind == "quad":
        return [(i, j) for j in range(p + 1) for i in range(p + 1)]
    if kind == "tet":
        return [(i, j, k) for k in range(p + 1) for j in range(p + 1 - k)
                for i in range(p + 1 - k - j)]
    if kind == "hex":
        return [(i, j, k) for k in range(p + 1) for j in range(p + 1)
                for i in range(p + 1)]
    raise MasterElementError(f"unsupported element kind {kind!r}")


def lattice_nodes(kind: str, p: int, variant: str = "warp") -> np.ndarray:
    """Node lattice: 'warp' for solution bases, 'equi' for geometry."""
    mi = np.array(lattice_multi_indices(kind, p), dtype=int)
    if kind in TENSOR_KINDS:
        g = gll_points(p) if variant == "warp" else np.linspace(-1, 1, p + 1)
        return g[mi]
    v = (gll_points(p) + 1) / 2 if variant == "warp" else np.linspace(0, 1, p + 1)
    if kind == "tri":
        i, j = mi[:, 0], mi[:, 1]
        k = p - i - j
        # Gauss-Lobatto distribution along every edge
        lam1 = (1 + 2 * v[i] - v[j] - v[k]) / 3
        lam2 = (1 + 2 * v[j] - v[i] - v[k]) / 3
        return np.column_stack([lam1, lam2])
    i, j, k = mi[:, 0], mi[:, 1], mi[:, 2]
    m = p - i - j - k
    lam1 = (1 + 3 * v[i] - v[j] - v[k] - v[m]) / 4
    lam2 = (1 + 3 * v[j] - v[i] - v[k] - v[m]) / 4
    lam3 = (1 + 3 * v[k] - v[i] - v[j] - v[m]) / 4
    return np.column_stack([lam1, lam2, lam3])


def n_lattice_nodes(kind: str, p: int) -> int:
    d = KIND_DIM[kind]
    if kind in TENSOR_KINDS:
        return (p + 1) ** d
    return math.comb(p + d, d)


def sub_cells(kind: str, p: int) -> np.ndarray:
    """Split the degree-p lattice into linear sub-cells (VTU subdivision)."""
    mi = lattice_multi_indices(kind, p)
    idx = {m: n for n, m in enumerate(mi)}
    cells = []
    if kind == "line":
        cells = [(idx[(i,)], idx[(i + 1,)]) for i in range(p)]
    elif kind == "quad":
        for j in range(p):
            for i in range(p):
                cells.append((idx[(i, j)], idx[(i + 1, j)],
                              idx[(i + 1, j + 1)], idx[(i, j + 1)]))
    elif kind == "hex":
        for k in range(p):
            for j in range(p):
                for i in range(p):
                    c = [(i, j, k), (i + 1, j, k), (i + 1, j + 1, k),
                         (i, j + 1, k), (i, j, k + 1), (i + 1, j, k + 1),
                         (i + 1, j + 1, k + 1), (i, j + 1, k + 1)]
                    cells.append(tuple(idx[m] for m in c))
    elif kind == "tri":
        for j in range(p):
            for i in range(p - j):
                cells.append((idx[(i, j)], idx[(i + 1, j)], idx[(i, j + 1)]))
                if i + j <= p - 2:
                    cells.append((idx[(i + 1, j)], idx[(i + 1, j + 1)],
                                  idx[(i, j + 1)]))
    elif kind == "tet":
        def t(*ms):
            return tuple(idx[m] for m in ms)
        for k in range(p):
            for j in range(p - k):
                for i in range(p - k - j):
                    A = (i + 1, j, k)
                    B = (i, j + 1, k)
                    C = (i, j, k + 1)
                    D = (i + 1, j + 1, k)
                    E = (i + 1, j, k + 1)
                    F = (i, j + 1, k + 1)
                    cells.append(t((i, j, k), A, B, C))
                    if i + j + k <= p - 2:
                        # octahedron split around diagonal A-F
                        cells.append(t(A, D, B, F))
                        cells.append(t(A, B, C, F))
                        cells.append(t(A, C, E, F))
                        cells.append(t(A, E, D, F))
                    if i + j + k <= p - 3:
                        cells.append(t(D, E, F, (i + 1, j + 1, k + 1)))
        # orient every sub-tet positively in lattice coordinates
        pts = np.array(lattice_multi_indices(kind, p), dtype=float)
        out = []
        for c in cells:
            v = pts[list(c)]
            if np.linalg.det(v[1:] - v[0]) < 0:
                c = (c[0], c[1], c[3], c[2])
            out.append(c)
        cells = out
    else:
        raise MasterElementError(f"unsupported element kind {kind!r}")
    return np.array(cells, dtype=int)


# ---------------------------------------------------------------------------
# Modal bases
# ---------------------------------------------------------------------------


class _TensorLegendre:
    """Orthonormal tensor products of Legendre polynomials on [-1,1]^d."""

    def __init__(self, dim: int, p: int):
        self.dim = dim
        self.p = p
        rng = range(p + 1)
        if dim == 1:
            self.degs = [(i,) for i in rng]
        elif dim == 2:
            self.degs = [(i, j) for j in rng for i in rng]
        else:
            self.degs = [(i, j, k) for k in rng for j in rng for i in rng]
        self.n = len(self.degs)

    def _eval1d(self, x):
        P, dP = _legendre_all(x, self.p)
        scale = np.sqrt((2 * np.arange(self.p + 1) + 1) / 2)[:, None]
        return P * scale, dP * scale

    def eval(self, pts):
        pts = np.atleast_2d(pts)
        vals1d = [self._eval1d(pts[:, d])[0] for d in range(self.dim)]
        out = np.ones((pts.shape[0], self.n))
        for j, deg in enumerate(self.degs):
            for d in range(self.dim):
                out[:, j] *= vals1d[d][deg[d]]
        return out

    def grad(self, pts):
        pts = np.atleast_2d(pts)
        V, D = zip(*[self._eval1d(pts[:, d]) for d in range(self.dim)])
        out = np.ones((pts.shape[0], self.n, self.dim))
        for j, deg in enumerate(self.degs):
            for r in range(self.dim):
                for d in range(self.dim):
                    f = D[d][deg[d]] if d == r else V[d][deg[d]]
                    out[:, j, r] *= f
        return out


class _OrthoMonomial:
    """Graded monomials orthonormalized w.r.t. quadrature on the simplex."""

    def __init__(self, kind: str, p: int):
        self.dim = KIND_DIM[kind]
        self.p = p
        self.exps = [e for g in range(p + 1)
                     for e in _exponents(self.dim, g)]
        self.n = len(self.exps)
        pts, w = volume_quadrature(kind, 2 * p + 2)
        A = np.sqrt(w)[:, None] * self._mono(pts)
        r = np.linalg.qr(A, mode="r")
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        self.rinv = np.linalg.inv(r * signs[:, None])

    def _mono(self, pts):
        pts = np.atleast_2d(pts)
        out = np.ones((pts.shape[0], self.n))
        for j, e in enumerate(self.exps):
            for d, k in enumerate(e):
                if k:
                    out[:, j] *= pts[:, d] ** k
        return out

    def _mono_grad(self, pts):
        pts = np.atleast_2d(pts)
        out = np.zeros((pts.shape[0], self.n, self.dim))
        for j, e in enumerate(self.exps):
            for r in range(self.dim):
                if e[r] == 0:
                    continue
                g = np.full(pts.shape[0], float(e[r]))
                for d, k in enumerate(e):
                    kk = k - 1 if d == r else k
                    if kk:
                        g *= pts[:, d] ** kk
                out[:, j, r] = g
        return out

    def eval(self, pts):
        return self._mono(pts) @ self.rinv

    def grad(self, pts):
        return np.einsum("njr,jm->nmr", self._mono_grad(pts), self.rinv)


def _exponents(dim, total):
    if dim == 1:
        return [(total,)]
    if dim == 2:
        return [(total - j, j) for j in range(total + 1)]
    return [(total - j - k, j, k) for k in range(total + 1)
            for j in range(total + 1 - k)]


# ---------------------------------------------------------------------------
# Master element
# ---------------------------------------------------------------------------


@dataclass
class FaceTabulation:
    sigma: np.ndarray       # quadrature points on the face reference domain
    weights: np.ndarray
    xi: np.ndarray          # the same points embedded in element coordinates
    phi: np.ndarray         # basis traces, (nqf, nb)


@dataclass
class MasterElement:
    kind: str
    p: int
    nd: int
    nodes: np.ndarray
    n_nodes: int
    quad_pts: np.ndarray
    quad_wts: np.ndarray
    phi: np.ndarray                     # (nq, nb)
    dphi: np.ndarray                    # (nq, nb, nd)
    faces: list[FaceTabulation]
    vandermonde: np.ndarray
    vandermonde_inv: np.ndarray
    modal: object
    n_faces: int
    quad_degree: int
    nodes1d: np.ndarray | None = None   # tensor kinds only
    phi1d: np.ndarray | None = None     # (nq1, p+1)
    dphi1d: np.ndarray | None = None
    quad1d: tuple | None = None

    def eval_basis(self, pts: np.ndarray) -> np.ndarray:
        return self.modal.eval(pts) @ self.vandermonde_inv

    def eval_basis_grad(self, pts: np.ndarray) -> np.ndarray:
        return np.einsum("nmr,mb->nbr", self.modal.grad(pts),
                         self.vandermonde_inv)


def build_master(kind: str, p: int, quad_degree: int | None = None,
                 node_variant: str = "warp") -> MasterElement:
    """Construct the reference element for (kind, p).

    quad_degree defaults to 2p+1 (volume and faces).  Raises on unsupported
    kinds/degrees and on ill-conditioned Vandermonde matrices (> 1e12).
    """
    if kind not in ELEM_KINDS:
        raise MasterElementError(f"unsupported element kind {kind!r}")
    if not (1 <= p <= 8):
        raise MasterElementError(f"polynomial degree must be 1..8, got {p}")
    if quad_degree is None:
        quad_degree = 2 * p + 1
    nd = KIND_DIM[kind]
    nodes = lattice_nodes(kind, p, node_variant)
    if kind in TENSOR_KINDS:
        modal = _TensorLegendre(nd, p)
    else:
        modal = _OrthoMonomial(kind, p)
    V = modal.eval(nodes)
    cond = np.linalg.cond(V)
    if cond > 1e12:
        raise MasterElementError(
            f"ill-conditioned Vandermonde for {kind} p={p}: cond={cond:.2e}")
    Vinv = np.linalg.inv(V)

    qp, qw = volume_quadrature(kind, quad_degree)
    phi = modal.eval(qp) @ Vinv
    dphi = np.einsum("nmr,mb->nbr", modal.grad(qp), Vinv)

    sigma, fw = face_quadrature(kind, quad_degree)
    faces = []
    for lf in range(len(REF_FACES[kind])):
        xi = embed_face_points(kind, lf, sigma)
        faces.append(FaceTabulation(sigma=sigma, weights=fw, xi=xi,
                                    phi=modal.eval(xi) @ Vinv))

    me = MasterElement(kind=kind, p=p, nd=nd, nodes=nodes,
                       n_nodes=nodes.shape[0], quad_pts=qp, quad_wts=qw,
                       phi=phi, dphi=dphi, faces=faces, vandermonde=V,
                       vandermonde_inv=Vinv, modal=modal,
                       n_faces=len(REF_FACES[kind]), quad_degree=quad_degree)
    if kind in ("quad", "hex"):
        pts1 = gll_points(p) if node_variant == "warp" else np.linspace(-1, 1, p + 1)
        x1, w1 = gauss_legendre(_npts(quad_degree))
        m1 = _TensorLegendre(1, p)
        V1 = m1.eval(pts1[:, None])
        V1inv = np.linalg.inv(V1)
        me.nodes1d = pts1
        me.phi1d = m1.eval(x1[:, None]) @ V1inv
        me.dphi1d = np.einsum("nmr,mb->nb", m1.grad(x1[:, None]), V1inv)
        me.quad1d = (x1, w1)
    return me


def build_geom_master(kind: str, p_geom: int) -> MasterElement:
    """Geometry reference element: equispaced lattice of order p_geom."""
    return build_master(kind, p_geom, quad_degree=2 * p_geom + 1,
                        node_variant="equi")
