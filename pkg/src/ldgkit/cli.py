"""Command line entry points.

    ldgkit run <config> [--dt V] [--nt N] [--p P] [--mu k=v] [--precond NAME]
                        [--reproducible] [--out DIR]
    ldgkit convergence <config> --n 2,4,8 --p 1,2,3 [--out DIR]
    ldgkit codegen <model> --out <dir>
    ldgkit mesh-info <msh>
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import const_eval, load_config


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _apply_overrides(cfg, args):
    if getattr(args, "dt", None) is not None:
        cfg.dt = args.dt
    if getattr(args, "nt", None) is not None:
        cfg.nt = args.nt
    if getattr(args, "p", None) is not None:
        cfg.p = args.p
    if getattr(args, "precond", None):
        cfg.solver.precond = args.precond
    if getattr(args, "reproducible", False):
        cfg.reproducible = True
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    for item in getattr(args, "mu", None) or []:
        if "=" not in item:
            raise SystemExit(f"--mu expects k=v, got {item!r}")
        k, v = item.split("=", 1)
        cfg.mu_overrides[k.strip()] = const_eval(v)
    cfg.validate()
    return cfg


def cmd_run(args):
    from .driver import run_simulation
    cfg = _apply_overrides(load_config(args.config), args)
    result = run_simulation(cfg)
    for k in sorted(result.summary):
        print(f"{k}: {result.summary[k]}")
    return 0


def cmd_convergence(args):
    from .driver import run_convergence
    cfg = _apply_overrides(load_config(args.config), args)
    rows = run_convergence(cfg, _int_list(args.n), _int_list(args.p_list))
    return 1 if any(r.failed for r in rows) else 0


def cmd_codegen(args):
    from .expr import emit_source
    from .model import load_model
    model = load_model(args.model)
    os.makedirs(args.out, exist_ok=True)
    kernels = {
        "flux": model.flux_plan(),
        "source": model.source_plan(),
        "mass": model.mass_plan(),
        "init": model.init_plan(),
    }
    if model.nw > 0:
        kernels["ode_source"] = model.sw_plan()
    if model.wavespeed is not None:
        kernels["wavespeed"] = model.wavespeed_plan()
    for tag in sorted(model.bcs):
        if model.bcs[tag].data:
            kernels[f"bc{tag}"] = model.bc_plan(tag)
    for name, plan in kernels.items():
        path = os.path.join(args.out, f"{name}.kernel")
        with open(path, "w") as f:
            f.write(emit_source(plan))
        print(f"wrote {path} ({plan.instruction_count()} instructions)")
    return 0


def cmd_mesh_info(args):
    from .mesh import build_face_topology, import_msh
    mesh = import_msh(args.msh)
    topo = build_face_topology(mesh)
    print(f"kind: {mesh.elem_kind}")
    print(f"dimension: {mesh.nd}")
    print(f"vertices: {mesh.n_vertices}")
    print(f"elements: {mesh.n_elements}")
    print(f"interior faces: {topo.n_interior}")
    print(f"boundary faces: {topo.n_boundary}")
    tags = sorted({int(t) for t in mesh.boundary_faces[:, 2]})
    print(f"boundary tags: {tags}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ldgkit",
                                 description="LDG PDE solver toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run a simulation from a config file")
    pr.add_argument("config")
    pr.add_argument("--dt", type=float)
    pr.add_argument("--nt", type=int)
    pr.add_argument("--p", type=int)
    pr.add_argument("--mu", action="append", metavar="k=v")
    pr.add_argument("--precond")
    pr.add_argument("--reproducible", action="store_true")
    pr.add_argument("--out")
    pr.set_defaults(fn=cmd_run)

    pc = sub.add_parser("convergence", help="mesh/order refinement study")
    pc.add_argument("config")
    pc.add_argument("--n", required=True, help="comma-separated mesh sizes")
    pc.add_argument("--p", dest="p_list", required=True,
                    help="comma-separated polynomial degrees")
    pc.add_argument("--mu", action="append", metavar="k=v")
    pc.add_argument("--precond")
    pc.add_argument("--reproducible", action="store_true")
    pc.add_argument("--out")
    pc.set_defaults(fn=cmd_convergence)

    pg = sub.add_parser("codegen", help="emit kernel source for a model")
    pg.add_argument("model")
    pg.add_argument("--out", required=True)
    pg.set_defaults(fn=cmd_codegen)

    pm = sub.add_parser("mesh-info", help="inspect an MSH 2.2 file")
    pm.add_argument("msh")
    pm.set_defaults(fn=cmd_mesh_info)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
