#!/usr/bin/env python3
"""Standing-wave convergence study for the wave model.

u = cos(sqrt(2) pi t) sin(pi x) sin(pi y) on the unit square with
homogeneous Dirichlet data, integrated with DIRK(3,4) to t = 0.5 at a fixed
small dt; prints spatial errors and observed orders per mesh refinement.

    python3 scripts/wave_standing.py --p 2 --n 4,8,16 --dt 0.0125
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from ldgkit.diagnostics import compute_l2_error
from ldgkit.disc import LdgSystem
from ldgkit.driver import MassPreconditioner
from ldgkit.master import build_master
from ldgkit.mesh import build_face_topology, generate_structured
from ldgkit.model import BoundaryCondition, builtin_model
from ldgkit.solver import NewtonOptions
from ldgkit.timeint import advance_step, dirk_tableau


def wave_system(n, p):
    m = builtin_model("wave", nd=2, mu=[1.0])
    m.init["u1"] = "sin(pi*x1)*sin(pi*x2)"
    for tag in range(1, 5):
        m.bcs[tag] = BoundaryCondition(type="dirichlet", data=["0"])
    mesh = generate_structured([(0.0, 1.0)] * 2, [n] * 2, "quad")
    topo = build_face_topology(mesh)
    return LdgSystem(m, mesh, topo, build_master("quad", p))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, default=2)
    ap.add_argument("--n", default="4,8,16")
    ap.add_argument("--dt", type=float, default=0.0125)
    ap.add_argument("--tf", type=float, default=0.5)
    args = ap.parse_args()

    tb = dirk_tableau(3, 4)
    opts = NewtonOptions(abs_tol=1e-12, rel_tol=3e-8, forcing=1e-8,
                         gmres_restart=120, gmres_max_iter=2500,
                         jv_mode="tangent")
    errs = []
    for n in (int(x) for x in args.n.split(",")):
        sys_ = wave_system(n, args.p)
        st = sys_.interpolate_initial()
        nt = int(round(args.tf / args.dt))
        for _ in range(nt):
            st, _ = advance_step(sys_, st, args.dt, tb, opts,
                                 precond=MassPreconditioner(sys_))
        norms = compute_l2_error(
            sys_, st, ["cos(sqrt(2)*pi*t)*sin(pi*x1)*sin(pi*x2)"])
        rate = "" if not errs else f"  rate={np.log2(errs[-1] / norms.error_u):.2f}"
        errs.append(norms.error_u)
        print(f"p={args.p} n={n:3d}: error_u={norms.error_u:.4e}{rate}")


if __name__ == "__main__":
    main()
