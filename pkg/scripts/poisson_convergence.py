#!/usr/bin/env python3
"""Poisson convergence study on the unit cube/square.

Manufactured solution u = prod_k sin(pi x_k); reports relative L2 errors of
the primal and mixed variables with observed rates, written to
<out>/convergence.csv.

    python3 scripts/poisson_convergence.py --dim 3 --n 2,4,8 --p 1,2,3
    python3 scripts/poisson_convergence.py --dim 2 --n 4,8,16 --p 1,2,3,4
"""

import argparse
import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ldgkit.config import parse_config_text
from ldgkit.driver import run_convergence

MODEL_TEMPLATE = """
[model] kind=D ncu=1 nd={nd} nw=0 nparam=0 tf=0.0
[mass]
m1=0
[flux]
{flux}
[source]
s1={source}
{bcs}
[init]
u1=0
"""


def model_text(nd):
    flux = "\n".join(f"f1_{j + 1}=q1_{j + 1}" for j in range(nd))
    source = f"{nd}*pi^2*" + "*".join(f"sin(pi*x{k + 1})" for k in range(nd))
    bcs = "\n".join(f"[bc tag={t} type=dirichlet]\ng1=0"
                    for t in range(1, 2 * nd + 1))
    return MODEL_TEMPLATE.format(nd=nd, flux=flux, source=source, bcs=bcs)


def config_text(model_path, nd, kind, out):
    names = ["x", "y", "z"][:nd]
    mesh = " ".join(f"n{nm}=2 {nm}min=0 {nm}max=1" for nm in names)
    exact_u = "*".join(f"sin(pi*x{k + 1})" for k in range(nd))
    exact_q = "\n".join(
        f"q1_{j + 1}=0-pi*" + "*".join(
            ("cos" if k == j else "sin") + f"(pi*x{k + 1})"
            for k in range(nd))
        for j in range(nd))
    return f"""
[model] path={model_path}
[mesh] kind={kind} {mesh}
[run] p=1 steady=1
[solver] abs_tol=1e-11 rel_tol=3e-8 forcing=1e-8 precond=block_jacobi
jv_mode=tangent
restart=250
gmres_max_iter=6000
[output] dir={out}
[exact]
u1={exact_u}
{exact_q}
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=3, choices=(2, 3))
    ap.add_argument("--n", default="2,4,8")
    ap.add_argument("--p", default="1,2,3")
    ap.add_argument("--kind", default=None, help="tri/quad/tet/hex")
    ap.add_argument("--out", default="out/poisson")
    args = ap.parse_args()

    kind = args.kind or ("tet" if args.dim == 3 else "tri")
    with tempfile.NamedTemporaryFile("w", suffix=".model",
                                     delete=False) as f:
        f.write(model_text(args.dim))
        model_path = f.name
    cfg = parse_config_text(config_text(model_path, args.dim, kind,
                                        args.out))
    n_list = [int(x) for x in args.n.split(",")]
    p_list = [int(x) for x in args.p.split(",")]
    run_convergence(cfg, n_list, p_list)
    os.unlink(model_path)


if __name__ == "__main__":
    main()
