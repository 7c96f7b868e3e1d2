"""High-order curved meshes: structured generation, MSH 2.2 import, face
topology (including periodic identification) and boundary curving.

The element geometry is a lattice of physical node coordinates per element
(``ho_nodes``), of geometric order ``p_geom`` on an equispaced reference
lattice.  Straight-sided elements carry the affine/multilinear image of their
vertices; :func:`curve_boundary` displaces lattice nodes onto analytic
geometry with conforming hierarchical blending (edges, then faces, then the
interior), so faces shared with uncurved neighbours stay straight.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .master import (
    KIND_DIM,
    REF_FACES,
    REF_VERTICES,
    VERTEX_LATTICE_PERM,
    build_geom_master,
    lattice_nodes,
    reference_face_normal,
)

REF_EDGES = {
    "tet": [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
    "hex": [(0, 1), (1, 2), (2, 3), (3, 0),
            (4, 5), (5, 6), (6, 7), (7, 4),
            (0, 4), (1, 5), (2, 6), (3, 7)],
}


class MeshError(ValueError):
    pass


class MshParseError(MeshError):
    def __init__(self, message, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(message + where)
        self.line = line


class InvertedElementError(MeshError):
    pass


@dataclass
class Mesh:
    nd: int
    elem_kind: str
    vertices: np.ndarray        # (nv, nd)
    connectivity: np.ndarray    # (ne, n_vertices_per_element)
    p_geom: int
    ho_nodes: np.ndarray        # (ne, n_geom_nodes, nd)
    boundary_faces: np.ndarray  # (nbf, 3): element, local face, tag

    @property
    def n_elements(self) -> int:
        return self.connectivity.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def face_vertex_ids(self, elem: int, lf: int) -> tuple[int, ...]:
        conn = self.connectivity[elem]
        return tuple(int(conn[v]) for v in REF_FACES[self.elem_kind][lf])


def _ho_nodes_from_vertices(kind: str, p_geom: int, vertices: np.ndarray,
                            connectivity: np.ndarray) -> np.ndarray:
    """Affine/multilinear lattice node coordinates from element vertices."""
    gm1 = build_geom_master(kind, 1)
    lat = lattice_nodes(kind, p_geom, "equi")
    shape = gm1.eval_basis(lat)            # (n_lat, n_verts_lattice_order)
    perm = VERTEX_LATTICE_PERM[kind]
    vcoords = vertices[connectivity[:, perm]]
    return np.einsum("nv,evd->end", shape, vcoords)


def _faces_by_key(kind: str, connectivity: np.ndarray):
    faces: dict[tuple, list[tuple[int, int]]] = {}
    for e in range(connectivity.shape[0]):
        conn = connectivity[e]
        for lf, fv in enumerate(REF_FACES[kind]):
            key = tuple(sorted(int(conn[v]) for v in fv))
            faces.setdefault(key, []).append((e, lf))
    return faces


# ---------------------------------------------------------------------------
# Structured generation
# ---------------------------------------------------------------------------


def generate_structured(bounds, counts, elem_kind: str,
                        p_geom: int = 1) -> Mesh:
    """Axis-aligned grid mesh on a box.

    bounds: sequence of (lo, hi) per axis; counts: cells per axis.  Triangles
    split each quad along a fixed diagonal; tets use the six-tet Kuhn
    subdivision of each hex.  Boundary tags: axis k low side 2k+1, high side
    2k+2 (x: 1,2; y: 3,4; z: 5,6).
    """
    nd = KIND_DIM[elem_kind]
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    if bounds.shape != (nd, 2) or counts.shape != (nd,):
        raise MeshError(f"bounds/counts inconsistent with {elem_kind} (nd={nd})")
    if np.any(counts < 1):
        raise MeshError("counts must be >= 1")

    axes = [np.linspace(bounds[k, 0], bounds[k, 1], counts[k] + 1)
            for k in range(nd)]
    if nd == 1:
        verts = axes[0][:, None]
    else:
        grids = np.meshgrid(*axes, indexing="ij")
        verts = np.column_stack([g.ravel() for g in grids])

    def vid(*idx):
        out = 0
        for k in range(nd):
            out = out * (counts[k] + 1) + idx[k]
        return out

    cells = []
    if nd == 1:
        cells = [(vid(i), vid(i + 1)) for i in range(counts[0])]
        conn = np.array(cells, dtype=int)
    elif nd == 2:
        quads = []
        for i in range(counts[0]):
            for j in range(counts[1]):
                quads.append((vid(i, j), vid(i + 1, j),
                              vid(i + 1, j + 1), vid(i, j + 1)))
        if elem_kind == "quad":
            conn = np.array(quads, dtype=int)
        else:
            tris = []
            for a, b, c, d in quads:
                tris.append((a, b, c))
                tris.append((a, c, d))
            conn = np.array(tris, dtype=int)
    else:
        hexes = []
        for i in range(counts[0]):
            for j in range(counts[1]):
                for k in range(counts[2]):
                    hexes.append((vid(i, j, k), vid(i + 1, j, k),
                                  vid(i + 1, j + 1, k), vid(i, j + 1, k),
                                  vid(i, j, k + 1), vid(i + 1, j, k + 1),
                                  vid(i + 1, j + 1, k + 1), vid(i, j + 1, k + 1)))
        if elem_kind == "hex":
            conn = np.array(hexes, dtype=int)
        else:
            # Kuhn subdivision: one tet per vertex permutation, all sharing
            # the main diagonal v0-v6 of the hex
            corner = {(0, 0, 0): 0, (1, 0, 0): 1, (1, 1, 0): 2, (0, 1, 0): 3,
                      (0, 0, 1): 4, (1, 0, 1): 5, (1, 1, 1): 6, (0, 1, 1): 7}
            paths = []
            for perm in itertools.permutations(range(3)):
                idx = [0, 0, 0]
                path = [corner[tuple(idx)]]
                for ax in perm:
                    idx[ax] = 1
                    path.append(corner[tuple(idx)])
                paths.append(path)
            tets = []
            for h in hexes:
                for path in paths:
                    t = [h[c] for c in path]
                    v = verts[t]
                    if np.linalg.det(v[1:] - v[0]) < 0:
                        t = [t[0], t[1], t[3], t[2]]
                    tets.append(tuple(t))
            conn = np.array(tets, dtype=int)

    ho = _ho_nodes_from_vertices(elem_kind, p_geom, verts, conn)
    bfaces = _tag_box_boundary(elem_kind, verts, conn, bounds)
    return Mesh(nd=nd, elem_kind=elem_kind, vertices=verts, connectivity=conn,
                p_geom=p_geom, ho_nodes=ho, boundary_faces=bfaces)


def _tag_box_boundary(kind, verts, conn, bounds):
    faces = _faces_by_key(kind, conn)
    tol = 1e-10 * max(float(np.max(bounds[:, 1] - bounds[:, 0])), 1.0)
    out = []
    for key, incident in faces.items():
        if len(incident) != 1:
            continue
        coords = verts[list(key)]
        tag = None
        for k in range(bounds.shape[0]):
            if np.all(np.abs(coords[:, k] - bounds[k, 0]) < tol):
                tag = 2 * k + 1
            elif np.all(np.abs(coords[:, k] - bounds[k, 1]) < tol):
                tag = 2 * k + 2
        if tag is None:
            raise MeshError(f"boundary face {key} not on any box side")
        e, lf = incident[0]
        out.append((e, lf, tag))
    return np.array(sorted(out), dtype=int).reshape(-1, 3)


def generate_annulus_ogrid(n_theta: int, n_r: int, r_inner: float,
                           half_width: float, elem_kind: str = "tri",
                           p_geom: int = 1) -> Mesh:
    """O-grid between a circle of radius r_inner and the square
    [-half_width, half_width]^2.  Tags: 1 = inner circle, 2 = outer square.
    Triangle count is 2 * n_theta * n_r.
    """
    if elem_kind not in ("tri", "quad"):
        raise MeshError("annulus o-grid supports tri or quad elements")
    thetas = 2 * np.pi * np.arange(n_theta) / n_theta
    verts = []
    for i in range(n_r + 1):
        s = i / n_r
        for th in thetas:
            router = half_width / max(abs(np.cos(th)), abs(np.sin(th)))
            r = r_inner + s * (router - r_inner)
            verts.append((r * np.cos(th), r * np.sin(th)))
    verts = np.array(verts)

    def vid(i, j):
        return i * n_theta + (j % n_theta)

    quads = []
    for i in range(n_r):
        for j in range(n_theta):
            quads.append((vid(i, j), vid(i + 1, j),
                          vid(i + 1, j + 1), vid(i, j + 1)))
    if elem_kind == "quad":
        conn = np.array(quads, dtype=int)
    else:
        tris = []
        for a, b, c, d in quads:
            tris.append((a, b, c))
            tris.append((a, c, d))
        conn = np.array(tris, dtype=int)

    ho = _ho_nodes_from_vertices(elem_kind, p_geom, verts, conn)
    faces = _faces_by_key(elem_kind, conn)
    bfaces = []
    for key, incident in faces.items():
        if len(incident) != 1:
            continue
        r = np.linalg.norm(verts[list(key)], axis=1)
        tag = 1 if np.all(np.abs(r - r_inner) < 1e-9 * half_width) else 2
        e, lf = incident[0]
        bfaces.append((e, lf, tag))
    bfaces = np.array(sorted(bfaces), dtype=int).reshape(-1, 3)
    return Mesh(nd=2, elem_kind=elem_kind, vertices=verts, connectivity=conn,
                p_geom=p_geom, ho_nodes=ho, boundary_faces=bfaces)


# ---------------------------------------------------------------------------
# MSH 2.2 import / export
# ---------------------------------------------------------------------------

_MSH_TYPES = {1: ("line", 2, 1), 2: ("tri", 3, 2), 3: ("quad", 4, 2),
              4: ("tet", 4, 3), 5: ("hex", 8, 3), 15: ("point", 1, 0)}


def import_msh(path, p_geom: int = 1) -> Mesh:
    """Read an MSH 2.2 ASCII file (tri3/quad4/tet4/hex8 volumes, tagged
    boundary entities).  Unreferenced vertices are dropped."""
    with open(path) as f:
        lines = f.read().splitlines()

    def expect(i, token):
        if i >= len(lines):
            raise MshParseError(f"unexpected end of file, expected {token}",
                                len(lines))
        if lines[i].strip() != token:
            raise MshParseError(f"expected {token!r}, got {lines[i]!r}", i + 1)
        return i + 1

    i = 0
    nodes_xyz: dict[int, np.ndarray] = {}
    elements = []
    while i < len(lines):
        line = lines[i].strip()
        if line == "$MeshFormat":
            i += 1
            parts = lines[i].split()
            if not parts or not parts[0].startswith("2.2"):
                raise MshParseError(
                    f"unsupported MSH version {parts[:1]}", i + 1)
            i = expect(i + 1, "$EndMeshFormat")
        elif line == "$Nodes":
            i += 1
            try:
                n = int(lines[i])
            except (ValueError, IndexError):
                raise MshParseError("bad node count", i + 1) from None
            for k in range(n):
                i += 1
                if i >= len(lines):
                    raise MshParseError("truncated $Nodes section", i)
                parts = lines[i].split()
                if len(parts) < 4:
                    raise MshParseError(f"bad node line {lines[i]!r}", i + 1)
                nodes_xyz[int(parts[0])] = np.array(
                    [float(parts[1]), float(parts[2]), float(parts[3])])
            i = expect(i + 1, "$EndNodes")
        elif line == "$Elements":
            i += 1
            try:
                n = int(lines[i])
            except (ValueError, IndexError):
                raise MshParseError("bad element count", i + 1) from None
            for k in range(n):
                i += 1
                if i >= len(lines):
                    raise MshParseError("truncated $Elements section", i)
                parts = [int(x) for x in lines[i].split()]
                if len(parts) < 3:
                    raise MshParseError(f"bad element line {lines[i]!r}", i + 1)
                etype, ntags = parts[1], parts[2]
                if etype not in _MSH_TYPES:
                    raise MshParseError(
                        f"unsupported element type {etype}", i + 1)
                kind, nv, dim = _MSH_TYPES[etype]
                tags = parts[3:3 + ntags]
                vids = parts[3 + ntags:]
                if len(vids) != nv:
                    raise MshParseError(
                        f"element expects {nv} nodes, got {len(vids)}", i + 1)
                phys = tags[0] if tags else 0
                elements.append((kind, dim, phys, vids))
            i = expect(i + 1, "$EndElements")
        elif line.startswith("$"):
            # skip unknown sections ($PhysicalNames, ...)
            end = "$End" + line[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != end:
                j += 1
            if j >= len(lines):
                raise MshParseError(f"unterminated section {line}", i + 1)
            i = j + 1
        else:
            i += 1

    if not elements:
        raise MshParseError("no $Elements section or it is empty")
    vol_dim = max(dim for _, dim, _, _ in elements)
    if vol_dim == 0:
        raise MshParseError("no volume elements found")
    vol_kinds = {kind for kind, dim, _, _ in elements if dim == vol_dim}
    if len(vol_kinds) != 1:
        raise MshParseError(f"mixed volume element kinds {sorted(vol_kinds)}")
    kind = vol_kinds.pop()

    vol = [(phys, vids) for k, dim, phys, vids in elements
           if dim == vol_dim and (k == kind)]
    bnd = [(phys, vids) for k, dim, phys, vids in elements if dim == vol_dim - 1]

    used = sorted({v for _, vids in vol for v in vids})
    remap = {v: i for i, v in enumerate(used)}
    missing = [v for v in used if v not in nodes_xyz]
    if missing:
        raise MshParseError(f"elements reference undefined nodes {missing[:5]}")
    coords = np.array([nodes_xyz[v] for v in used])
    if vol_dim == 2:
        if np.max(np.abs(coords[:, 2])) > 1e-12 * (1 + np.max(np.abs(coords))):
            raise MshParseError("2D mesh has nonzero z coordinates")
        coords = coords[:, :2]
    elif vol_dim == 1:
        coords = coords[:, :1]

    conn = np.array([[remap[v] for v in vids] for _, vids in vol], dtype=int)
    # enforce positive orientation for simplices
    if kind in ("tri", "tet"):
        for e in range(conn.shape[0]):
            v = coords[conn[e]]
            det = np.linalg.det(v[1:] - v[0])
            if det < 0:
                conn[e, -2], conn[e, -1] = conn[e, -1], conn[e, -2]

    faces = _faces_by_key(kind, conn)
    bfaces = []
    for phys, vids in bnd:
        try:
            key = tuple(sorted(remap[v] for v in vids))
        except KeyError:
            raise MshParseError(
                f"boundary entity references dropped vertex (tag {phys})")
        incident = faces.get(key)
        if incident is None:
            raise MshParseError(
                f"boundary entity {key} matches no element face")
        if len(incident) != 1:
            raise MshParseError(f"tagged face {key} is interior")
        e, lf = incident[0]
        bfaces.append((e, lf, phys))
    bfaces = np.array(sorted(bfaces), dtype=int).reshape(-1, 3)
    ho = _ho_nodes_from_vertices(kind, p_geom, coords, conn)
    return Mesh(nd=vol_dim, elem_kind=kind, vertices=coords,
                connectivity=conn, p_geom=p_geom, ho_nodes=ho,
                boundary_faces=bfaces)


_MSH_TYPE_OF = {"line": 1, "tri": 2, "quad": 3, "tet": 4, "hex": 5}
_MSH_FACE_TYPE = {"tri": 1, "quad": 1, "tet": 2, "hex": 3}


def write_msh(mesh: Mesh, path) -> None:
    """Write an MSH 2.2 ASCII file (volume elements plus tagged boundary
    faces); used to build test fixtures."""
    with open(path, "w") as f:
        f.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        f.write(f"$Nodes\n{mesh.n_vertices}\n")
        for i, v in enumerate(mesh.vertices, start=1):
            xyz = list(v) + [0.0] * (3 - mesh.nd)
            f.write(f"{i} {xyz[0]:.16g} {xyz[1]:.16g} {xyz[2]:.16g}\n")
        f.write("$EndNodes\n")
        n_total = mesh.n_elements + mesh.boundary_faces.shape[0]
        f.write(f"$Elements\n{n_total}\n")
        eid = 1
        ftype = _MSH_FACE_TYPE[mesh.elem_kind]
        for e, lf, tag in mesh.boundary_faces:
            fv = [v + 1 for v in mesh.face_vertex_ids(int(e), int(lf))]
            f.write(f"{eid} {ftype} 2 {tag} {tag} "
                    + " ".join(map(str, fv)) + "\n")
            eid += 1
        vtype = _MSH_TYPE_OF[mesh.elem_kind]
        for e in range(mesh.n_elements):
            vv = [v + 1 for v in mesh.connectivity[e]]
            f.write(f"{eid} {vtype} 2 0 0 " + " ".join(map(str, vv)) + "\n")
            eid += 1
        f.write("$EndElements\n")


# ---------------------------------------------------------------------------
# Internal dump format (versioned text, for fixtures)
# ---------------------------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as f:
        f.write("ldgkit-mesh 1\n")
        f.write(f"nd {mesh.nd}\nkind {mesh.elem_kind}\np_geom {mesh.p_geom}\n")
        f.write(f"vertices {mesh.n_vertices}\n")
        for v in mesh.vertices:
            f.write(" ".join(repr(float(x)) for x in v) + "\n")
        f.write(f"elements {mesh.n_elements}\n")
        for c in mesh.connectivity:
            f.write(" ".join(map(str, c)) + "\n")
        f.write(f"boundary {mesh.boundary_faces.shape[0]}\n")
        for e, lf, tag in mesh.boundary_faces:
            f.write(f"{e} {lf} {tag}\n")
        f.write(f"ho_nodes {mesh.ho_nodes.shape[0]} {mesh.ho_nodes.shape[1]}\n")
        for e in range(mesh.ho_nodes.shape[0]):
            for nrow in mesh.ho_nodes[e]:
                f.write(" ".join(repr(float(x)) for x in nrow) + "\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("ldgkit-mesh 1"):
        raise MeshError("not a version-1 mesh dump")
    i = 1

    def header(name):
        nonlocal i
        parts = lines[i].split()
        if parts[0] != name:
            raise MeshError(f"expected {name}, got {lines[i]!r}")
        i += 1
        return parts[1:]

    nd = int(header("nd")[0])
    kind = header("kind")[0]
    p_geom = int(header("p_geom")[0])
    nv = int(header("vertices")[0])
    verts = np.array([[float(x) for x in lines[i + k].split()]
                      for k in range(nv)])
    i += nv
    ne = int(header("elements")[0])
    conn = np.array([[int(x) for x in lines[i + k].split()]
                     for k in range(ne)], dtype=int)
    i += ne
    nb = int(header("boundary")[0])
    bf = np.array([[int(x) for x in lines[i + k].split()]
                   for k in range(nb)], dtype=int).reshape(-1, 3)
    i += nb
    ne2, nn = (int(x) for x in header("ho_nodes"))
    ho = np.array([[float(x) for x in lines[i + k].split()]
                   for k in range(ne2 * nn)]).reshape(ne2, nn, nd)
    return Mesh(nd=nd, elem_kind=kind, vertices=verts, connectivity=conn,
                p_geom=p_geom, ho_nodes=ho, boundary_faces=bf)


# ---------------------------------------------------------------------------
# Face topology
# ---------------------------------------------------------------------------


@dataclass
class FaceTopology:
    """Classification of every mesh face: interior (with the periodic pairs
    appended and their translation vectors recorded) or tagged boundary."""

    elem_l: np.ndarray
    face_l: np.ndarray
    elem_r: np.ndarray
    face_r: np.ndarray
    translation: np.ndarray      # (n_interior_total, nd); zero rows if none
    n_true_interior: int         # leading entries are geometric interior
    elem_b: np.ndarray
    face_b: np.ndarray
    tag_b: np.ndarray
    perm: list                   # left->right face lattice node permutations

    @property
    def n_interior(self) -> int:
        return self.elem_l.shape[0]

    @property
    def n_periodic(self) -> int:
        return self.n_interior - self.n_true_interior

    @property
    def n_boundary(self) -> int:
        return self.elem_b.shape[0]


def face_lattice_ids(kind: str, p_geom: int, lf: int) -> np.ndarray:
    """Geometry lattice node ids lying on local face lf."""
    lat = lattice_nodes(kind, p_geom, "equi")
    n = reference_face_normal(kind, lf)
    v0 = REF_VERTICES[kind][REF_FACES[kind][lf][0]]
    d = (lat - v0) @ n
    return np.nonzero(np.abs(d) < 1e-12)[0]


def build_face_topology(mesh: Mesh, periodic_spec=None) -> FaceTopology:
    """Match interior faces by vertex keys and periodic faces by translated
    coordinates; every face is classified exactly once.

    periodic_spec: list of (tag_a, tag_b, translation) with translation the
    vector carrying tag_a faces onto tag_b faces.
    """
    kind = mesh.elem_kind
    faces = _faces_by_key(kind, mesh.connectivity)
    tag_of = {(int(e), int(lf)): int(tag) for e, lf, tag in mesh.boundary_faces}

    int_l, int_r = [], []
    singles = []
    for key in sorted(faces):
        incident = faces[key]
        if len(incident) > 2:
            raise MeshError(f"non-conforming mesh: face {key} has "
                            f"{len(incident)} incident elements")
        if len(incident) == 2:
            (e1, f1), (e2, f2) = incident
            if e2 < e1:
                e1, f1, e2, f2 = e2, f2, e1, f1
            int_l.append((e1, f1))
            int_r.append((e2, f2))
        else:
            singles.append(incident[0])

    periodic_faces = []
    consumed = set()
    if periodic_spec:
        scale = mesh.diameter()
        diams = [d for d in (_face_diameter(mesh, e, lf) for e, lf in singles)
                 if d > 0]
        h = min(diams) if diams else scale
        tol = 1e-8 * h
        by_tag: dict[int, list] = {}
        for e, lf in singles:
            tag = tag_of.get((e, lf))
            by_tag.setdefault(tag, []).append((e, lf))
        for tag_a, tag_b, tr in periodic_spec:
            tr = np.asarray(tr, dtype=float)
            targets = {}
            for e, lf in by_tag.get(tag_b, []):
                key = _quantized_face_key(mesh, e, lf, tol)
                targets[key] = (e, lf)
            for e, lf in by_tag.get(tag_a, []):
                key = _quantized_face_key(mesh, e, lf, tol, shift=tr)
                if key not in targets:
                    raise MeshError(
                        f"unmatched periodic face (elem {e}, face {lf}, "
                        f"tag {tag_a})")
                e2, lf2 = targets[key]
                periodic_faces.append(((e, lf), (e2, lf2), tr))
                consumed.add((e, lf))
                consumed.add((e2, lf2))

    elem_b, face_b, tag_b = [], [], []
    for e, lf in singles:
        if (e, lf) in consumed:
            continue
        tag = tag_of.get((e, lf))
        if tag is None:
            raise MeshError(
                f"untagged boundary face: element {e}, local face {lf}")
        elem_b.append(e)
        face_b.append(lf)
        tag_b.append(tag)

    n_true = len(int_l)
    for (e1, f1), (e2, f2), tr in periodic_faces:
        int_l.append((e1, f1))
        int_r.append((e2, f2))

    elem_l = np.array([e for e, _ in int_l], dtype=int)
    face_l = np.array([f for _, f in int_l], dtype=int)
    elem_r = np.array([e for e, _ in int_r], dtype=int)
    face_r = np.array([f for _, f in int_r], dtype=int)
    translation = np.zeros((elem_l.shape[0], mesh.nd))
    for k, (_, _, tr) in enumerate(periodic_faces):
        translation[n_true + k] = tr

    perms = _face_node_permutations(mesh, elem_l, face_l, elem_r, face_r,
                                    translation)
    return FaceTopology(
        elem_l=elem_l, face_l=face_l, elem_r=elem_r, face_r=face_r,
        translation=translation, n_true_interior=n_true,
        elem_b=np.array(elem_b, dtype=int), face_b=np.array(face_b, dtype=int),
        tag_b=np.array(tag_b, dtype=int), perm=perms)


def _face_diameter(mesh, e, lf):
    coords = mesh.vertices[list(mesh.face_vertex_ids(e, lf))]
    return float(np.max(np.linalg.norm(coords - coords[0], axis=1)))


def _quantized_face_key(mesh, e, lf, tol, shift=None):
    coords = mesh.vertices[list(mesh.face_vertex_ids(e, lf))]
    if shift is not None:
        coords = coords + shift
    q = np.round(coords / tol).astype(np.int64)
    return tuple(sorted(map(tuple, q)))


def _face_node_permutations(mesh, elem_l, face_l, elem_r, face_r, translation):
    """Left-to-right lattice node matching on each interior face."""
    kind, pg = mesh.elem_kind, mesh.p_geom
    ids_cache = {lf: face_lattice_ids(kind, pg, lf)
                 for lf in range(len(REF_FACES[kind]))}
    perms = []
    for f in range(elem_l.shape[0]):
        xl = mesh.ho_nodes[elem_l[f]][ids_cache[face_l[f]]] + translation[f]
        xr = mesh.ho_nodes[elem_r[f]][ids_cache[face_r[f]]]
        d2 = np.sum((xl[:, None, :] - xr[None, :, :]) ** 2, axis=2)
        perm = np.argmin(d2, axis=1)
        if len(set(perm.tolist())) != len(perm):
            raise MeshError(
                f"face node matching failed between elements "
                f"{elem_l[f]} and {elem_r[f]}")
        perms.append(perm)
    return perms


# ---------------------------------------------------------------------------
# Boundary curving
# ---------------------------------------------------------------------------


def circle_projection(center=(0.0, 0.0), radius: float = 1.0):
    c = np.asarray(center, dtype=float)

    def project(x):
        d = x - c
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        return c + radius * d / r

    return project


def sphere_projection(center=(0.0, 0.0, 0.0), radius: float = 1.0):
    return circle_projection(center, radius)


def identity_projection():
    return lambda x: x


def curve_boundary(mesh: Mesh, tag: int, projection, check_jacobians=True) -> Mesh:
    """Project the lattice nodes of tag-faces onto analytic geometry and blend
    the displacement into touched element interiors.

    The blending is hierarchical (boundary edges, then boundary faces, then
    element interiors) and vanishes identically on faces not touching the
    curved boundary, so the curved mesh stays conforming.  Vertices of tagged
    faces must already lie on the geometry.  Raises InvertedElementError if
    any geometric Jacobian turns nonpositive.
    """
    if mesh.p_geom == 1:
        return replace(mesh, ho_nodes=mesh.ho_nodes.copy())
    kind = mesh.elem_kind
    nd = mesh.nd
    tagged = [(int(e), int(lf)) for e, lf, t in mesh.boundary_faces
              if int(t) == tag]
    if not tagged:
        return replace(mesh, ho_nodes=mesh.ho_nodes.copy())

    scale = mesh.diameter()
    # tagged-face vertices must sit on the geometry already
    for e, lf in tagged:
        vv = mesh.vertices[list(mesh.face_vertex_ids(e, lf))]
        if np.max(np.linalg.norm(projection(vv) - vv, axis=1)) > 1e-8 * scale:
            raise MeshError(
                "curve_boundary requires tagged-face vertices on the geometry")

    curved_edges = set()       # sorted global vertex pairs on the boundary
    curved_faces = {}          # (elem, lf) -> True for tagged faces
    for e, lf in tagged:
        fv = mesh.face_vertex_ids(e, lf)
        curved_faces[(e, lf)] = True
        if nd == 3:
            m = len(fv)
            for k in range(m):
                curved_edges.add(tuple(sorted((fv[k], fv[(k + 1) % m]))))
        else:
            curved_edges.add(tuple(sorted(fv)))

    # elements to touch: any element owning a curved edge
    touched = set()
    edge_list = REF_EDGES.get(kind)
    for e in range(mesh.n_elements):
        conn = mesh.connectivity[e]
        if nd == 2:
            for a, b in REF_FACES[kind]:
                if tuple(sorted((int(conn[a]), int(conn[b])))) in curved_edges:
                    touched.add(e)
                    break
        else:
            for a, b in edge_list:
                if tuple(sorted((int(conn[a]), int(conn[b])))) in curved_edges:
                    touched.add(e)
                    break

    lat = lattice_nodes(kind, mesh.p_geom, "equi")
    ho = mesh.ho_nodes.copy()
    for e in sorted(touched):
        disp = _element_displacement(mesh, e, lat, curved_edges, curved_faces,
                                     projection)
        ho[e] = ho[e] + disp

    out = replace(mesh, ho_nodes=ho)
    if check_jacobians:
        _check_positive_jacobians(out, sorted(touched))
    return out


def _barycentric(kind, lat):
    if kind == "tri":
        return np.column_stack([1 - lat[:, 0] - lat[:, 1], lat[:, 0], lat[:, 1]])
    if kind == "tet":
        return np.column_stack([1 - lat.sum(axis=1), lat[:, 0], lat[:, 1],
                                lat[:, 2]])
    return None


def _edge_blend_simplex(mesh, e, lam, a, b, delta):
    """(lam_a + lam_b) * delta(s) blending of one curved edge."""
    conn = mesh.connectivity[e]
    va, vb = mesh.vertices[conn[a]], mesh.vertices[conn[b]]
    w = lam[:, a] + lam[:, b]
    s = np.zeros_like(w)
    nz = w > 1e-14
    s[nz] = lam[nz, b] / w[nz]
    chord = va[None, :] + s[:, None] * (vb - va)[None, :]
    return w[:, None] * delta(chord, chord)


def _element_displacement(mesh, e, lat, curved_edges, curved_faces, projection):
    kind = mesh.elem_kind
    conn = mesh.connectivity[e]

    def delta(points, chords):
        return projection(points) - chords

    if kind in ("tri", "tet"):
        lam = _barycentric(kind, lat)
        disp = np.zeros((lat.shape[0], mesh.nd))
        # curved edges of this element
        edges = REF_FACES[kind] if kind == "tri" else REF_EDGES["tet"]
        for a, b in edges:
            if tuple(sorted((int(conn[a]), int(conn[b])))) in curved_edges:
                disp += _edge_blend_simplex(mesh, e, lam, a, b, delta)
        if kind == "tet":
            # face residual blending on tagged faces of this element
            for lf, fverts in enumerate(REF_FACES[kind]):
                if (e, lf) not in curved_faces:
                    continue
                opp = ({0, 1, 2, 3} - set(fverts)).pop()
                wf = 1 - lam[:, opp]
                nz = wf > 1e-14
                lamf = np.zeros((lat.shape[0], 3))
                lamf[nz] = lam[nz][:, list(fverts)] / wf[nz, None]
                vf = mesh.vertices[conn[list(fverts)]]
                xf = lamf @ vf
                # D_f minus the edge interpolation already applied on the face
                lam_proj = np.zeros_like(lam)
                lam_proj[:, list(fverts)] = lamf
                d_edges_f = np.zeros((lat.shape[0], mesh.nd))
                for a, b in REF_EDGES["tet"]:
                    if tuple(sorted((int(conn[a]), int(conn[b])))) in curved_edges:
                        d_edges_f += _edge_blend_simplex(
                            mesh, e, lam_proj, a, b, delta)
                rho = np.zeros((lat.shape[0], mesh.nd))
                rho[nz] = delta(xf[nz], xf[nz]) - d_edges_f[nz]
                disp += wf[:, None] * rho
        return disp

    if kind == "quad":
        disp = np.zeros((lat.shape[0], 2))
        refv = REF_VERTICES["quad"]
        for lf, (a, b) in enumerate(REF_FACES["quad"]):
            if tuple(sorted((int(conn[a]), int(conn[b])))) not in curved_edges:
                continue
            ra, rb = refv[a], refv[b]
            axis = int(np.nonzero(rb - ra)[0][0])
            tdir = 1 - axis
            w = (1 + lat[:, tdir] * ra[tdir]) / 2
            s = (lat[:, axis] - ra[axis]) / (rb[axis] - ra[axis])
            va, vb = mesh.vertices[conn[a]], mesh.vertices[conn[b]]
            chord = va[None, :] + s[:, None] * (vb - va)[None, :]
            disp += w[:, None] * delta(chord, chord)
        return disp

    if kind == "hex":
        return _hex_displacement(mesh, e, lat, curved_edges, curved_faces,
                                 delta)
    raise MeshError(f"curving not supported for element kind {kind!r}")


def _hex_displacement(mesh, e, lat, curved_edges, curved_faces, delta):
    conn = mesh.connectivity[e]
    refv = REF_VERTICES["hex"]

    def edge_disp(pts_ref):
        """Edge-level displacement field evaluated at reference points."""
        out = np.zeros((pts_ref.shape[0], 3))
        for a, b in REF_EDGES["hex"]:
            if tuple(sorted((int(conn[a]), int(conn[b])))) not in curved_edges:
                continue
            ra, rb = refv[a], refv[b]
            axis = int(np.nonzero(rb - ra)[0][0])
            trans = [k for k in range(3) if k != axis]
            w = np.ones(pts_ref.shape[0])
            for k in trans:
                w *= (1 + pts_ref[:, k] * ra[k]) / 2
            s = (pts_ref[:, axis] - ra[axis]) / (rb[axis] - ra[axis])
            va, vb = mesh.vertices[conn[a]], mesh.vertices[conn[b]]
            chord = va[None, :] + s[:, None] * (vb - va)[None, :]
            out += w[:, None] * delta(chord, chord)
        return out

    disp = edge_disp(lat)
    for lf, fverts in enumerate(REF_FACES["hex"]):
        if (e, lf) not in curved_faces:
            continue
        rf = refv[list(fverts)]
        normal_axis = int(np.nonzero(np.ptp(rf, axis=0) == 0)[0][0])
        fval = rf[0, normal_axis]
        w = (1 + lat[:, normal_axis] * fval) / 2
        proj_ref = lat.copy()
        proj_ref[:, normal_axis] = fval
        # physical point on the straight (bilinear) face
        gm1 = build_geom_master("hex", 1)
        shape = gm1.eval_basis(proj_ref)
        perm = VERTEX_LATTICE_PERM["hex"]
        xf = shape @ mesh.vertices[conn[perm]]
        rho = delta(xf, xf) - edge_disp(proj_ref)
        disp += w[:, None] * rho
    return disp


def _check_positive_jacobians(mesh: Mesh, elems=None):
    gm = build_geom_master(mesh.elem_kind, mesh.p_geom)
    dpsi = gm.eval_basis_grad(gm.quad_pts)  # (nq, nn, nd)
    elems = range(mesh.n_elements) if elems is None else elems
    for e in elems:
        J = np.einsum("nd,qnr->qdr", mesh.ho_nodes[e], dpsi)
        det = np.linalg.det(J)
        if np.any(det <= 0):
            raise InvertedElementError(
                f"element {e} inverted after curving (min detJ = {det.min():.3e})")
