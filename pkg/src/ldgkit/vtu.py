"""ASCII VTU (XML unstructured grid) export with linear subdivision of
high-order elements, so files load in any standard viewer."""

from __future__ import annotations

import numpy as np

from .master import MasterElement, build_geom_master, sub_cells
from .mesh import Mesh

VTK_CELL_TYPE = {"line": 3, "tri": 5, "quad": 9, "tet": 10, "hex": 12}


def export_vtu(mesh: Mesh, master: MasterElement, fields: dict, path) -> str:
    """Write point data sampled on each element's solution-node lattice.

    fields: name -> array of shape (n_elements, n_nodes); each high-order
    element is subdivided into linear sub-cells on its nodal lattice.  Points
    are duplicated across element interfaces (DG data is discontinuous).
    """
    gm = build_geom_master(mesh.elem_kind, mesh.p_geom)
    gphi = gm.eval_basis(master.nodes)
    points = np.einsum("ng,egd->end", gphi, mesh.ho_nodes)
    ne, nb, nd = points.shape
    pts3 = np.zeros((ne * nb, 3))
    pts3[:, :nd] = points.reshape(ne * nb, nd)

    cells = sub_cells(mesh.elem_kind, master.p)
    nverts = cells.shape[1]
    conn = (cells[None, :, :] + (np.arange(ne) * nb)[:, None, None])
    conn = conn.reshape(-1, nverts)
    ncells = conn.shape[0]
    ctype = VTK_CELL_TYPE[mesh.elem_kind]

    for name, arr in fields.items():
        if np.asarray(arr).shape != (ne, nb):
            raise ValueError(
                f"field {name!r} has shape {np.asarray(arr).shape}, "
                f"expected {(ne, nb)}")

    lines = []
    a = lines.append
    a('<?xml version="1.0"?>')
    a('<VTKFile type="UnstructuredGrid" version="0.1" '
      'byte_order="LittleEndian">')
    a("  <UnstructuredGrid>")
    a(f'    <Piece NumberOfPoints="{ne * nb}" NumberOfCells="{ncells}">')
    a("      <Points>")
    a('        <DataArray type="Float64" NumberOfComponents="3" '
      'format="ascii">')
    for p in pts3:
        a(f"          {p[0]:.16g} {p[1]:.16g} {p[2]:.16g}")
    a("        </DataArray>")
    a("      </Points>")
    a("      <Cells>")
    a('        <DataArray type="Int64" Name="connectivity" format="ascii">')
    for c in conn:
        a("          " + " ".join(str(int(v)) for v in c))
    a("        </DataArray>")
    a('        <DataArray type="Int64" Name="offsets" format="ascii">')
    a("          " + " ".join(str((k + 1) * nverts) for k in range(ncells)))
    a("        </DataArray>")
    a('        <DataArray type="UInt8" Name="types" format="ascii">')
    a("          " + " ".join(str(ctype) for _ in range(ncells)))
    a("        </DataArray>")
    a("      </Cells>")
    a("      <PointData>")
    for name, arr in fields.items():
        a(f'        <DataArray type="Float64" Name="{name}" format="ascii">')
        flat = np.asarray(arr).reshape(-1)
        a("          " + " ".join(f"{v:.16g}" for v in flat))
        a("        </DataArray>")
    a("      </PointData>")
    a("    </Piece>")
    a("  </UnstructuredGrid>")
    a("</VTKFile>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return str(path)


def state_fields(system, state) -> dict:
    """Named point-data arrays for a solver state (u1.., q{i}_{j}.., w1..)."""
    out = {}
    for i in range(system.ncu):
        out[f"u{i + 1}"] = state.u[..., i]
    if state.q is not None:
        for i in range(system.ncu):
            for j in range(system.nd):
                out[f"q{i + 1}_{j + 1}"] = state.q[..., i, j]
    if state.w is not None:
        for k in range(system.nw):
            out[f"w{k + 1}"] = state.w[..., k]
    return out
