import numpy as np
import pytest

from ldgkit import mesh as meshmod
from ldgkit.master import build_geom_master
from ldgkit.mesh import (
    InvertedElementError,
    Mesh,
    MeshError,
    MshParseError,
    build_face_topology,
    circle_projection,
    curve_boundary,
    face_lattice_ids,
    generate_annulus_ogrid,
    generate_structured,
    identity_projection,
    import_msh,
    load_mesh,
    save_mesh,
    write_msh,
)

TWO_TRI_MSH = """$MeshFormat
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


def mesh_volume(m: Mesh) -> float:
    gm = build_geom_master(m.elem_kind, m.p_geom)
    dpsi = gm.eval_basis_grad(gm.quad_pts)
    J = np.einsum("end,qnr->eqdr", m.ho_nodes, dpsi)
    det = np.linalg.det(J)
    return float(np.sum(det @ gm.quad_wts))


# ---------------------------------------------------------------------------
# structured generation
# ---------------------------------------------------------------------------

def test_unit_square_2x2_quads():
    m = generate_structured([(0, 1), (0, 1)], [2, 2], "quad")
    assert m.n_elements == 4
    assert m.n_vertices == 9
    assert mesh_volume(m) == pytest.approx(1.0, rel=1e-12)


def test_bickley_domain_quads():
    L = 2 * np.pi
    m = generate_structured([(-L, L), (-L, L)], [128, 128], "quad")
    assert m.n_elements == 16384
    assert mesh_volume(m) == pytest.approx((2 * L) ** 2, rel=1e-10)


def test_unit_cube_tets():
    m = generate_structured([(0, 1)] * 3, [2, 2, 2], "tet")
    assert m.n_elements == 48
    assert mesh_volume(m) == pytest.approx(1.0, rel=1e-10)


def test_structured_tris_volume():
    m = generate_structured([(0, 2), (0, 1)], [4, 3], "tri")
    assert m.n_elements == 24
    assert mesh_volume(m) == pytest.approx(2.0, rel=1e-12)


def test_structured_line():
    m = generate_structured([(0, 1)], [5], "line")
    assert m.n_elements == 5
    assert m.boundary_faces.shape[0] == 2


def test_structured_hex_positive_jacobians():
    m = generate_structured([(0, 1)] * 3, [2, 2, 2], "hex", p_geom=2)
    meshmod._check_positive_jacobians(m)
    assert mesh_volume(m) == pytest.approx(1.0, rel=1e-12)


def test_invalid_counts():
    with pytest.raises(MeshError):
        generate_structured([(0, 1), (0, 1)], [0, 2], "quad")
    with pytest.raises(MeshError):
        generate_structured([(0, 1)], [2, 2], "quad")


def test_affine_lattice_matches_vertices():
    m = generate_structured([(0, 1), (0, 2)], [3, 3], "tri", p_geom=3)
    # straight-sided: lattice equals the affine map of the vertices
    gm1 = build_geom_master("tri", 1)
    from ldgkit.master import lattice_nodes
    lat = lattice_nodes("tri", 3, "equi")
    shape = gm1.eval_basis(lat)
    for e in (0, 5, 11):
        want = shape @ m.vertices[m.connectivity[e]]
        np.testing.assert_allclose(m.ho_nodes[e], want, atol=1e-14)


# ---------------------------------------------------------------------------
# msh import
# ---------------------------------------------------------------------------

def test_import_two_triangles(tmp_path):
    p = tmp_path / "two_tri.msh"
    p.write_text(TWO_TRI_MSH)
    m = import_msh(p)
    assert m.elem_kind == "tri"
    assert m.n_elements == 2
    assert m.boundary_faces.shape[0] == 4
    assert sorted(m.boundary_faces[:, 2]) == [10, 11, 12, 13]


def test_import_truncated(tmp_path):
    p = tmp_path / "trunc.msh"
    p.write_text(TWO_TRI_MSH[:90])
    with pytest.raises(MshParseError):
        import_msh(p)


def test_import_bad_version(tmp_path):
    p = tmp_path / "v4.msh"
    p.write_text("$MeshFormat\n4.1 0 8\n$EndMeshFormat\n")
    with pytest.raises(MshParseError):
        import_msh(p)


def test_cylinder_fixture_4224_triangles(tmp_path):
    # o-grid around the unit cylinder in (-12,12)^2: 96 x 22 quads -> 4224 tris
    m = generate_annulus_ogrid(96, 22, 1.0, 12.0, "tri")
    assert m.n_elements == 4224
    p = tmp_path / "cylinder.msh"
    write_msh(m, p)
    m2 = import_msh(p)
    assert m2.n_elements == 4224
    assert mesh_volume(m2) == pytest.approx(24.0 ** 2 - np.pi, rel=2e-2)
    tags = set(m2.boundary_faces[:, 2])
    assert tags == {1, 2}


def test_dump_roundtrip(tmp_path):
    m = generate_structured([(0, 1), (0, 1)], [3, 2], "tri", p_geom=2)
    p = tmp_path / "m.dump"
    save_mesh(m, p)
    m2 = load_mesh(p)
    assert m2.elem_kind == m.elem_kind and m2.p_geom == m.p_geom
    np.testing.assert_array_equal(m2.connectivity, m.connectivity)
    np.testing.assert_allclose(m2.vertices, m.vertices, rtol=0, atol=0)
    np.testing.assert_allclose(m2.ho_nodes, m.ho_nodes, rtol=0, atol=0)
    np.testing.assert_array_equal(m2.boundary_faces, m.boundary_faces)


# ---------------------------------------------------------------------------
# face topology
# ---------------------------------------------------------------------------

def test_topology_2x2_quads():
    m = generate_structured([(0, 1), (0, 1)], [2, 2], "quad")
    topo = build_face_topology(m)
    assert topo.n_interior == 4
    assert topo.n_boundary == 8


def test_topology_fully_periodic():
    m = generate_structured([(0, 1), (0, 1)], [2, 2], "quad")
    spec = [(1, 2, (1.0, 0.0)), (3, 4, (0.0, 1.0))]
    topo = build_face_topology(m, spec)
    assert topo.n_interior == 8
    assert topo.n_periodic == 4
    assert topo.n_boundary == 0


def test_topology_single_tet():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    conn = np.array([[0, 1, 2, 3]])
    bf = np.array([(0, lf, lf + 1) for lf in range(4)], dtype=int)
    m = Mesh(nd=3, elem_kind="tet", vertices=verts, connectivity=conn,
             p_geom=1,
             ho_nodes=meshmod._ho_nodes_from_vertices("tet", 1, verts, conn),
             boundary_faces=bf)
    topo = build_face_topology(m)
    assert topo.n_interior == 0
    assert topo.n_boundary == 4


def test_topology_untagged_boundary_raises():
    m = generate_structured([(0, 1), (0, 1)], [2, 2], "quad")
    m2 = Mesh(nd=m.nd, elem_kind=m.elem_kind, vertices=m.vertices,
              connectivity=m.connectivity, p_geom=1, ho_nodes=m.ho_nodes,
              boundary_faces=m.boundary_faces[:3])
    with pytest.raises(MeshError):
        build_face_topology(m2)


def test_face_permutation_coordinates_agree():
    m = generate_structured([(0, 1)] * 3, [2, 2, 2], "tet", p_geom=2)
    topo = build_face_topology(m)
    for f in range(topo.n_interior):
        ids_l = face_lattice_ids("tet", 2, topo.face_l[f])
        ids_r = face_lattice_ids("tet", 2, topo.face_r[f])
        xl = m.ho_nodes[topo.elem_l[f]][ids_l]
        xr = m.ho_nodes[topo.elem_r[f]][ids_r][topo.perm[f]]
        np.testing.assert_allclose(xl, xr, atol=1e-12)


def test_periodic_permutation_with_translation():
    m = generate_structured([(0, 1), (0, 1)], [2, 2], "quad", p_geom=3)
    topo = build_face_topology(m, [(1, 2, (1.0, 0.0))])
    for f in range(topo.n_true_interior, topo.n_interior):
        ids_l = face_lattice_ids("quad", 3, topo.face_l[f])
        ids_r = face_lattice_ids("quad", 3, topo.face_r[f])
        xl = m.ho_nodes[topo.elem_l[f]][ids_l] + topo.translation[f]
        xr = m.ho_nodes[topo.elem_r[f]][ids_r][topo.perm[f]]
        np.testing.assert_allclose(xl, xr, atol=1e-12)


def test_unmatched_periodic_raises():
    m = generate_structured([(0, 1), (0, 2)], [2, 2], "quad")
    with pytest.raises(MeshError):
        build_face_topology(m, [(1, 2, (0.5, 0.0))])


# ---------------------------------------------------------------------------
# curving
# ---------------------------------------------------------------------------

def annulus_mesh(p_geom=3, elem_kind="tri"):
    return generate_annulus_ogrid(16, 4, 1.0, 3.0, elem_kind, p_geom=p_geom)


def test_curve_circle_nodes_on_radius():
    m = curve_boundary(annulus_mesh(), 1, circle_projection((0, 0), 1.0))
    hit = 0
    for e, lf, tag in m.boundary_faces:
        if tag != 1:
            continue
        ids = face_lattice_ids("tri", 3, lf)
        r = np.linalg.norm(m.ho_nodes[e][ids], axis=1)
        np.testing.assert_allclose(r, 1.0, atol=1e-12)
        hit += 1
    assert hit == 16


def test_curve_quad_elements():
    m = curve_boundary(annulus_mesh(3, "quad"), 1, circle_projection((0, 0), 1.0))
    for e, lf, tag in m.boundary_faces:
        if tag != 1:
            continue
        ids = face_lattice_ids("quad", 3, lf)
        r = np.linalg.norm(m.ho_nodes[e][ids], axis=1)
        np.testing.assert_allclose(r, 1.0, atol=1e-12)


def test_curve_pgeom1_unchanged():
    m0 = annulus_mesh(p_geom=1)
    m = curve_boundary(m0, 1, circle_projection((0, 0), 1.0))
    np.testing.assert_array_equal(m.ho_nodes, m0.ho_nodes)


def test_curve_identity_projection_unchanged():
    m0 = generate_structured([(0, 1), (0, 1)], [2, 2], "quad", p_geom=3)
    m = curve_boundary(m0, 1, identity_projection())
    np.testing.assert_allclose(m.ho_nodes, m0.ho_nodes, atol=1e-14)


def test_curve_keeps_conforming_faces():
    m = curve_boundary(annulus_mesh(), 1, circle_projection((0, 0), 1.0))
    topo = build_face_topology(m)
    for f in range(topo.n_interior):
        ids_l = face_lattice_ids("tri", 3, topo.face_l[f])
        ids_r = face_lattice_ids("tri", 3, topo.face_r[f])
        xl = m.ho_nodes[topo.elem_l[f]][ids_l]
        xr = m.ho_nodes[topo.elem_r[f]][ids_r][topo.perm[f]]
        np.testing.assert_allclose(xl, xr, atol=1e-12)


def test_curve_sphere_tets():
    # octant shell: tets between radius 1 and 2, curved inner boundary
    m0 = generate_structured([(0.6, 1.3)] * 3, [2, 2, 2], "tet", p_geom=3)
    # project the inner corner face nodes onto the unit sphere: construct a
    # mesh whose tag-5 face vertices are on the sphere by snapping vertices
    verts = m0.vertices.copy()
    r = np.linalg.norm(verts, axis=1)
    on_inner = np.abs(verts[:, 2] - 0.6) < 1e-12
    verts[on_inner] *= (1.0 / r[on_inner])[:, None]
    conn = m0.connectivity
    ho = meshmod._ho_nodes_from_vertices("tet", 3, verts, conn)
    m1 = Mesh(nd=3, elem_kind="tet", vertices=verts, connectivity=conn,
              p_geom=3, ho_nodes=ho, boundary_faces=m0.boundary_faces)
    m = curve_boundary(m1, 5, circle_projection((0, 0, 0), 1.0))
    for e, lf, tag in m.boundary_faces:
        if tag != 5:
            continue
        ids = face_lattice_ids("tet", 3, lf)
        rr = np.linalg.norm(m.ho_nodes[e][ids], axis=1)
        np.testing.assert_allclose(rr, 1.0, atol=1e-12)
    topo = build_face_topology(m)
    for f in range(topo.n_interior):
        ids_l = face_lattice_ids("tet", 3, topo.face_l[f])
        ids_r = face_lattice_ids("tet", 3, topo.face_r[f])
        xl = m.ho_nodes[topo.elem_l[f]][ids_l]
        xr = m.ho_nodes[topo.elem_r[f]][ids_r][topo.perm[f]]
        np.testing.assert_allclose(xl, xr, atol=1e-11)


def test_curve_inversion_detected():
    # 4 angular segments: the 90-degree arc bulge exceeds the thin first
    # radial layer, inverting the touched elements
    m0 = generate_annulus_ogrid(4, 24, 1.0, 3.0, "tri", p_geom=2)
    with pytest.raises(InvertedElementError):
        curve_boundary(m0, 1, circle_projection((0, 0), 1.0))


def test_curve_sphere_hexes():
    m0 = generate_structured([(0.6, 1.3)] * 3, [2, 2, 2], "hex", p_geom=2)
    verts = m0.vertices.copy()
    r = np.linalg.norm(verts, axis=1)
    inner = np.abs(verts[:, 2] - 0.6) < 1e-12
    verts[inner] *= (1.0 / r[inner])[:, None]
    conn = m0.connectivity
    ho = meshmod._ho_nodes_from_vertices("hex", 2, verts, conn)
    m1 = Mesh(nd=3, elem_kind="hex", vertices=verts, connectivity=conn,
              p_geom=2, ho_nodes=ho, boundary_faces=m0.boundary_faces)
    m = curve_boundary(m1, 5, circle_projection((0, 0, 0), 1.0))
    hit = 0
    for e, lf, tag in m.boundary_faces:
        if tag != 5:
            continue
        ids = face_lattice_ids("hex", 2, lf)
        rr = np.linalg.norm(m.ho_nodes[e][ids], axis=1)
        np.testing.assert_allclose(rr, 1.0, atol=1e-12)
        hit += 1
    assert hit == 4
    topo = build_face_topology(m)
    for f in range(topo.n_interior):
        ids_l = face_lattice_ids("hex", 2, topo.face_l[f])
        ids_r = face_lattice_ids("hex", 2, topo.face_r[f])
        xl = m.ho_nodes[topo.elem_l[f]][ids_l]
        xr = m.ho_nodes[topo.elem_r[f]][ids_r][topo.perm[f]]
        np.testing.assert_allclose(xl, xr, atol=1e-11)
