"""Run configuration: the sectioned text dialect shared with model files,
plus CLI overrides.

    [model] builtin=shallow_water          (or path=case.model)
    [mu] mu1=1e4
    [mesh] kind=quad nx=32 ny=32 xmin=-2*pi xmax=2*pi ymin=-2*pi ymax=2*pi
           periodic=x,y pgeom=1            (or msh=path/to/file.msh)
    [run] p=3 stages=3 order=3 dt=1e-3 nt=10 steady=0 quad_degree=
    [solver] abs_tol=1e-8 rel_tol=1e-6 max_iter=20 restart=120
             gmres_max_iter=2000 jv_mode=tangent precond=auto rb_rank=10
    [output] dir=out cadence=0 reproducible=1
    [exact] u1=... q1_1=...                (for error norms / convergence)

Numeric values are constant expressions (pi is available).  CLI flags
override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .expr import compile_with_cse, evaluate, parse_expression


class ConfigError(ValueError):
    pass


def const_eval(text: str) -> float:
    """Evaluate a constant expression (e.g. '2*pi')."""
    plan = compile_with_cse(parse_expression(str(text), ()))
    return float(evaluate(plan, {})[0, 0])


@dataclass
class MeshSpec:
    kind: str = "quad"
    counts: tuple = ()
    bounds: tuple = ()
    periodic_axes: tuple = ()
    p_geom: int = 1
    msh_path: str | None = None


@dataclass
class SolverSpec:
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    max_iter: int = 20
    forcing: float | None = None
    restart: int = 120
    gmres_max_iter: int = 2000
    jv_mode: str = "tangent"
    precond: str = "auto"        # identity|mass|block_jacobi|composite|auto
    rb_rank: int = 10
    rb_refresh: int = 1
    line_search: bool = True


@dataclass
class RunConfig:
    model_path: str | None = None
    model_builtin: str | None = None
    mu_overrides: dict = field(default_factory=dict)
    mesh: MeshSpec = field(default_factory=MeshSpec)
    p: int = 1
    quad_degree: int | None = None
    stages: int = 1
    order: int = 1
    dt: float | None = None
    nt: int | None = None
    tf: float | None = None
    steady: bool = False
    solver: SolverSpec = field(default_factory=SolverSpec)
    out_dir: str = "out"
    cadence: int = 0
    reproducible: bool = False
    exact: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if not self.steady:
            if self.dt is not None and self.nt is not None \
                    and self.tf is not None:
                if abs(self.dt * self.nt - self.tf) > 1e-12 * max(1.0, self.tf):
                    raise ConfigError(
                        f"dt*nt = {self.dt * self.nt} inconsistent with "
                        f"tf = {self.tf}")
            if self.dt is None or (self.nt is None and self.tf is None):
                raise ConfigError("transient runs need dt and nt (or tf)")
        if self.model_path is None and self.model_builtin is None:
            raise ConfigError("config needs a [model] path= or builtin=")

    def n_steps(self) -> int:
        if self.nt is not None:
            return self.nt
        return int(round(self.tf / self.dt))


def _parse_sections(text: str):
    sections = []
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        k = raw.find("#")
        line = (raw if k < 0 else raw[:k]).strip()
        if not line:
            continue
        if line.startswith("["):
            if "]" not in line:
                raise ConfigError(f"unterminated section header (line {ln})")
            head, rest = line[1:].split("]", 1)
            parts = head.split()
            items = {}
            for p in parts[1:] + rest.split():
                if "=" not in p:
                    raise ConfigError(f"bad header item {p!r} (line {ln})")
                kk, v = p.split("=", 1)
                items[kk.strip()] = v.strip()
            current = (parts[0], items)
            sections.append(current)
        else:
            if current is None:
                raise ConfigError(f"assignment before any section (line {ln})")
            if "=" not in line:
                raise ConfigError(f"expected key=value (line {ln})")
            kk, v = line.split("=", 1)
            current[1][kk.strip()] = v.strip()
    return dict(sections)


def parse_config_text(text: str) -> RunConfig:
    sec = _parse_sections(text)
    cfg = RunConfig()

    model = sec.get("model", {})
    cfg.model_path = model.get("path")
    cfg.model_builtin = model.get("builtin")
    for k, v in sec.get("mu", {}).items():
        cfg.mu_overrides[k] = const_eval(v)

    m = sec.get("mesh", {})
    ms = MeshSpec()
    ms.kind = m.get("kind", "quad")
    ms.p_geom = int(m.get("pgeom", "1"))
    ms.msh_path = m.get("msh")
    if ms.msh_path is None:
        axes = {"quad": 2, "tri": 2, "line": 1, "tet": 3, "hex": 3}[ms.kind]
        names = ["x", "y", "z"][:axes]
        counts, bounds = [], []
        for nm in names:
            counts.append(int(m[f"n{nm}"]))
            bounds.append((const_eval(m[f"{nm}min"]),
                           const_eval(m[f"{nm}max"])))
        ms.counts = tuple(counts)
        ms.bounds = tuple(bounds)
    if "periodic" in m:
        ms.periodic_axes = tuple(s.strip() for s in m["periodic"].split(",")
                                 if s.strip())
    cfg.mesh = ms

    r = sec.get("run", {})
    cfg.p = int(r.get("p", "1"))
    if r.get("quad_degree"):
        cfg.quad_degree = int(r["quad_degree"])
    cfg.stages = int(r.get("stages", "1"))
    cfg.order = int(r.get("order", "1"))
    if r.get("dt"):
        cfg.dt = const_eval(r["dt"])
    if r.get("nt"):
        cfg.nt = int(r["nt"])
    if r.get("tf"):
        cfg.tf = const_eval(r["tf"])
    cfg.steady = bool(int(r.get("steady", "0")))

    s = sec.get("solver", {})
    sp = SolverSpec()
    if "abs_tol" in s:
        sp.abs_tol = const_eval(s["abs_tol"])
    if "rel_tol" in s:
        sp.rel_tol = const_eval(s["rel_tol"])
    if "max_iter" in s:
        sp.max_iter = int(s["max_iter"])
    if s.get("forcing"):
        sp.forcing = const_eval(s["forcing"])
    if "restart" in s:
        sp.restart = int(s["restart"])
    if "gmres_max_iter" in s:
        sp.gmres_max_iter = int(s["gmres_max_iter"])
    sp.jv_mode = s.get("jv_mode", sp.jv_mode)
    sp.precond = s.get("precond", sp.precond)
    if "rb_rank" in s:
        sp.rb_rank = int(s["rb_rank"])
    if "rb_refresh" in s:
        sp.rb_refresh = int(s["rb_refresh"])
    if "line_search" in s:
        sp.line_search = bool(int(s["line_search"]))
    cfg.solver = sp

    o = sec.get("output", {})
    cfg.out_dir = o.get("dir", "out")
    cfg.cadence = int(o.get("cadence", "0"))
    cfg.reproducible = bool(int(o.get("reproducible", "0")))

    cfg.exact = dict(sec.get("exact", {}))
    return cfg


def load_config(path) -> RunConfig:
    import os
    with open(path) as f:
        cfg = parse_config_text(f.read())
    base = os.path.dirname(os.path.abspath(path))
    if cfg.model_path is not None and not os.path.isabs(cfg.model_path):
        cfg.model_path = os.path.join(base, cfg.model_path)
    if cfg.mesh.msh_path is not None and not os.path.isabs(cfg.mesh.msh_path):
        cfg.mesh.msh_path = os.path.join(base, cfg.mesh.msh_path)
    cfg.validate()
    return cfg
