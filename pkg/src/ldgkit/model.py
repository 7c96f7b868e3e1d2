"""Parametrized PDE models of convection (C), diffusion (D) and wave (W) type.

A model is the symbolic description of a first-order system

    q + grad(u) = 0                      (D; replaced by dq/dt + grad(u) = 0 for W)
    m(u~) du/dt + div f(u~) = s(u~)
    alpha dw/dt + beta w = s_w(u~)       (optional pointwise ODE)

with state u~ = (u, q, w), physical parameters mu, boundary and initial data.
Expressions are plain strings over the reserved symbol table; they are parsed
and compiled lazily on first use.

Reserved symbol spelling: coordinates x1..x3, time t, states u1..u{ncu},
gradients q{i}_{j} (state i, direction j), ODE states w1..w{nw}, parameters
mu1..mu{nparam}, outward unit normal n1..n3, and the literal pi.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr
from .expr import ExprSyntaxError, KernelPlan, compile_with_cse, parse_expressions

KINDS = ("C", "D", "W")
BC_TYPES = ("dirichlet", "neumann", "absorbing", "periodic")

BUILTIN_NAMES = (
    "linear_convection", "burgers", "shallow_water", "euler", "poisson",
    "convection_diffusion", "compressible_ns", "wave", "linear_elasticity",
)


class ModelError(ValueError):
    pass


class ModelFileError(ModelError):
    def __init__(self, message, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(message + where)
        self.line = line


def reserved_symbols(ncu: int, nd: int, nw: int, nparam: int) -> tuple[str, ...]:
    """Ordered symbol table for a model's expressions."""
    syms = [f"x{k}" for k in range(1, nd + 1)]
    syms.append("t")
    syms += [f"u{i}" for i in range(1, ncu + 1)]
    syms += [f"q{i}_{j}" for i in range(1, ncu + 1) for j in range(1, nd + 1)]
    syms += [f"w{i}" for i in range(1, nw + 1)]
    syms += [f"mu{i}" for i in range(1, nparam + 1)]
    syms += [f"n{k}" for k in range(1, nd + 1)]
    return tuple(syms)


def face_symbols(ncu: int, nd: int, nparam: int) -> tuple[str, ...]:
    """Symbol table for user-override trace/flux expressions (both traces)."""
    syms = [f"x{k}" for k in range(1, nd + 1)]
    syms.append("t")
    syms += [f"ul{i}" for i in range(1, ncu + 1)]
    syms += [f"ur{i}" for i in range(1, ncu + 1)]
    syms += [f"ql{i}_{j}" for i in range(1, ncu + 1) for j in range(1, nd + 1)]
    syms += [f"qr{i}_{j}" for i in range(1, ncu + 1) for j in range(1, nd + 1)]
    syms += [f"mu{i}" for i in range(1, nparam + 1)]
    syms += [f"n{k}" for k in range(1, nd + 1)]
    return tuple(syms)


@dataclass
class Diagnostic:
    code: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.message}"


@dataclass
class OdeSpec:
    alpha: float = 1.0
    beta: float = 0.0
    sw: list[str] = field(default_factory=list)


@dataclass
class BoundaryCondition:
    type: str
    data: list[str] = field(default_factory=list)


@dataclass
class NumericalFluxSpec:
    """Trace/flux recipe for the LDG face terms.

    trace: how the scalar trace u^ is formed ('switch' one-sided by the sign
    of n.beta_hat, or 'centered').  grad_trace: how the gradient trace q^ is
    formed ('opposite' = the side opposite the switch, or 'centered').
    tau >= 0 stabilizes the primal flux; for convective models the local
    Lax-Friedrichs speed comes from the model's wavespeed expression.
    User-supplied uhat/fhat expressions (over ul*/ur*/ql*/qr*/n*) take
    precedence on interior faces.
    """

    trace: str = "switch"
    grad_trace: str = "opposite"
    tau: float = 1.0
    tau_over_h: bool | None = None   # default: True for diffusion models
    uhat: list[str] | None = None
    fhat: list[str] | None = None


@dataclass
class PdeModel:
    kind: str
    ncu: int
    nd: int
    nw: int = 0
    nparam: int = 0
    mass: list[str] = field(default_factory=list)
    flux: list[str] = field(default_factory=list)   # row-major f{i}_{j}
    source: list[str] = field(default_factory=list)
    ode: OdeSpec | None = None
    numflux: NumericalFluxSpec = field(default_factory=NumericalFluxSpec)
    bcs: dict[int, BoundaryCondition] = field(default_factory=dict)
    init: dict[str, str] = field(default_factory=dict)
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tf: float = 0.0
    wavespeed: str | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self._plans: dict = {}

    # -- symbol table ------------------------------------------------------

    @property
    def symbols(self) -> tuple[str, ...]:
        return reserved_symbols(self.ncu, self.nd, self.nw, self.nparam)

    def mu_bindings(self) -> dict[str, float]:
        return {f"mu{i + 1}": float(v) for i, v in enumerate(self.mu)}

    # -- lazy kernel plans ---------------------------------------------------

    def _plan(self, key: str, texts: Sequence[str], symbols=None) -> KernelPlan:
        if key not in self._plans:
            g = parse_expressions(list(texts), symbols or self.symbols)
            self._plans[key] = compile_with_cse(g)
        return self._plans[key]

    def flux_plan(self) -> KernelPlan:
        return self._plan("flux", self.flux)

    def source_plan(self) -> KernelPlan:
        return self._plan("source", self.source)

    def mass_plan(self) -> KernelPlan:
        return self._plan("mass", self.mass)

    def sw_plan(self) -> KernelPlan:
        return self._plan("sw", self.ode.sw)

    def wavespeed_plan(self) -> KernelPlan | None:
        if self.wavespeed is None:
            return None
        return self._plan("wavespeed", [self.wavespeed])

    def bc_plan(self, tag: int) -> KernelPlan:
        return self._plan(f"bc{tag}", self.bcs[tag].data)

    def init_exprs(self) -> list[str]:
        """Initial-condition expressions in pack order (u, q for W, w)."""
        keys = [f"u{i}" for i in range(1, self.ncu + 1)]
        if self.kind == "W":
            keys += [f"q{i}_{j}" for i in range(1, self.ncu + 1)
                     for j in range(1, self.nd + 1)]
        keys += [f"w{i}" for i in range(1, self.nw + 1)]
        return [self.init.get(k, "0") for k in keys]

    def init_plan(self) -> KernelPlan:
        return self._plan("init", self.init_exprs())

    def uhat_plan(self) -> KernelPlan | None:
        if self.numflux.uhat is None:
            return None
        return self._plan("uhat", self.numflux.uhat,
                          face_symbols(self.ncu, self.nd, self.nparam))

    def fhat_plan(self) -> KernelPlan | None:
        if self.numflux.fhat is None:
            return None
        return self._plan("fhat", self.numflux.fhat,
                          face_symbols(self.ncu, self.nd, self.nparam))

    # -- queries -------------------------------------------------------------

    def is_steady(self) -> bool:
        """True when every mass entry folds to the constant zero."""
        try:
            p = self.mass_plan()
        except ExprSyntaxError:
            return False
        return all(p.instructions[r] == ("const", 0.0) for r in p.outputs)

    def references_gradients(self) -> bool:
        used = set()
        for texts in (self.mass, self.flux, self.source,
                      self.ode.sw if self.ode else []):
            for t in texts:
                try:
                    used |= expr.parse_expression(t, self.symbols).used_symbols()
                except ExprSyntaxError:
                    continue
        return any(s.startswith("q") for s in used)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(model: PdeModel) -> list[Diagnostic]:
    """Check every model invariant; returns one diagnostic per violation."""
    out: list[Diagnostic] = []

    def bad(code, msg):
        out.append(Diagnostic(code, msg))

    if model.kind not in KINDS:
        bad("bad-kind", f"kind must be one of {KINDS}, got {model.kind!r}")
        return out
    if not (1 <= model.nd <= 3):
        bad("bad-dimension", f"nd must be 1..3, got {model.nd}")
    if model.ncu < 1:
        bad("bad-dimension", f"ncu must be >= 1, got {model.ncu}")
    if len(model.mass) != model.ncu:
        bad("dimension-mismatch",
            f"mass has {len(model.mass)} entries, expected ncu={model.ncu}")
    if len(model.flux) != model.ncu * model.nd:
        bad("dimension-mismatch",
            f"flux has {len(model.flux)} entries, expected "
            f"ncu*nd={model.ncu * model.nd}")
    if len(model.source) != model.ncu:
        bad("dimension-mismatch",
            f"source has {len(model.source)} entries, expected ncu={model.ncu}")
    if model.nw > 0:
        if model.ode is None:
            bad("missing-ode-state", "nw > 0 requires an ode section")
        else:
            if len(model.ode.sw) != model.nw:
                bad("dimension-mismatch",
                    f"ode source has {len(model.ode.sw)} entries, expected "
                    f"nw={model.nw}")
            if model.ode.alpha == 0.0 and model.ode.beta == 0.0:
                bad("alpha-beta-zero",
                    "alpha and beta cannot both vanish when nw > 0")
    elif model.ode is not None or any(k.startswith("w") for k in model.init):
        bad("missing-ode-state",
            "ODE/displacement data present but nw == 0")
    if len(model.mu) != model.nparam:
        bad("dimension-mismatch",
            f"mu has {len(model.mu)} values, expected nparam={model.nparam}")

    # expression syntax and symbol usage
    named = [("mass", model.mass), ("flux", model.flux), ("source", model.source)]
    if model.ode is not None:
        named.append(("ode", model.ode.sw))
    for tag, bc in model.bcs.items():
        if bc.type not in BC_TYPES:
            bad("bad-bc-type", f"bc tag {tag}: unknown type {bc.type!r}")
        if bc.type in ("dirichlet", "neumann") and len(bc.data) != model.ncu:
            bad("dimension-mismatch",
                f"bc tag {tag}: {len(bc.data)} data entries, expected "
                f"ncu={model.ncu}")
        named.append((f"bc{tag}", bc.data))
    named.append(("init", list(model.init.values())))
    if model.wavespeed is not None:
        named.append(("wavespeed", [model.wavespeed]))

    q_used = False
    for section, texts in named:
        for text in texts:
            try:
                g = expr.parse_expression(text, model.symbols)
            except ExprSyntaxError as e:
                bad("unknown-symbol" if isinstance(e, expr.UnknownSymbolError)
                    else "syntax-error", f"{section}: {e}")
                continue
            if any(s.startswith("q") for s in g.used_symbols()):
                q_used = True
    if model.kind == "C" and q_used:
        bad("q-in-convection-model",
            "convection models must not reference gradient symbols q{i}_{j}")
    for key in model.init:
        if not _valid_init_key(key, model):
            bad("unknown-symbol", f"init: unexpected field {key!r}")
    return out


def _valid_init_key(key: str, model: PdeModel) -> bool:
    for i in range(1, model.ncu + 1):
        if key == f"u{i}":
            return True
        for j in range(1, model.nd + 1):
            if key == f"q{i}_{j}":
                return True
    return any(key == f"w{i}" for i in range(1, model.nw + 1))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------
#
# Sectioned text, normative grammar (golden-file tested):
#
#   [model] kind=D ncu=1 nd=3 nw=0 nparam=1 tf=0.0
#   [mu] mu1=1.0
#   [mass] m1=0
#   [flux] f1_1=q1_1 ...
#   [source] s1=...
#   [ode] alpha=1 beta=0 sw1=u1            (only if nw > 0)
#   [numflux] trace=switch grad_trace=opposite tau=1 wavespeed=...
#   [bc tag=1 type=dirichlet] g1=0
#   [init] u1=... q1_1=... w1=...
#
# key=value pairs may sit on the header line (whitespace-separated, so no
# spaces inside values there) or one per body line (value runs to end of
# line).  Comments start with '#'.


def _strip_comment(line: str) -> str:
    k = line.find("#")
    return line if k < 0 else line[:k]


def parse_model_text(text: str) -> PdeModel:
    sections: list[tuple[str, dict, list, int]] = []
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if "]" not in line:
                raise ModelFileError("unterminated section header", ln)
            head, rest = line[1:].split("]", 1)
            parts = head.split()
            if not parts:
                raise ModelFileError("empty section header", ln)
            attrs = {}
            for p in parts[1:] + rest.split():
                if "=" not in p:
                    raise ModelFileError(f"bad header item {p!r}", ln)
                k, v = p.split("=", 1)
                attrs[k.strip()] = v.strip()
            current = (parts[0], attrs, [], ln)
            sections.append(current)
            continue
        if current is None:
            raise ModelFileError("assignment before any section", ln)
        if "=" not in line:
            raise ModelFileError(f"expected key=value, got {line!r}", ln)
        k, v = line.split("=", 1)
        current[2].append((k.strip(), v.strip(), ln))

    by_name: dict[str, tuple] = {}
    bc_sections = []
    for name, attrs, items, ln in sections:
        if name == "bc":
            bc_sections.append((attrs, items, ln))
            continue
        if name in by_name:
            raise ModelFileError(f"duplicate section [{name}]", ln)
        if name != "model":
            # header key=value pairs are equivalent to body lines
            items = [(k, v, ln) for k, v in attrs.items()] + items
            attrs = {}
        by_name[name] = (attrs, items, ln)

    if "model" not in by_name:
        raise ModelFileError("missing [model] section")
    attrs, items, ln = by_name["model"]
    for k, v, _ in items:
        attrs.setdefault(k, v)
    try:
        kind = attrs["kind"]
        ncu = int(attrs["ncu"])
        nd = int(attrs["nd"])
        nw = int(attrs.get("nw", "0"))
        nparam = int(attrs.get("nparam", "0"))
        tf = float(attrs.get("tf", "0.0"))
    except KeyError as e:
        raise ModelFileError(f"[model] missing attribute {e}", ln) from None
    except ValueError as e:
        raise ModelFileError(f"[model]: {e}", ln) from None

    def ordered(section, prefix, count, default="0"):
        if section not in by_name:
            return [default] * count
        _, items, sln = by_name[section]
        vals = {k: v for k, v, _ in items}
        out = []
        for key in _indexed_keys(prefix, count, nd if "_" in prefix else 0):
            if key not in vals:
                raise ModelFileError(
                    f"[{section}] missing entry {key}", sln)
            out.append(vals[key])
        extra = set(vals) - set(_indexed_keys(prefix, count,
                                              nd if "_" in prefix else 0))
        if extra:
            raise ModelFileError(
                f"[{section}] unexpected entries {sorted(extra)}", sln)
        return out

    def _indexed_keys(prefix, count, cols):
        if cols:
            rows = count // cols
            return [f"{prefix.split('_')[0]}{i}_{j}"
                    for i in range(1, rows + 1) for j in range(1, cols + 1)]
        return [f"{prefix}{i}" for i in range(1, count + 1)]

    mass = ordered("mass", "m", ncu, default="1")
    flux = ordered("flux", "f_", ncu * nd)
    source = ordered("source", "s", ncu)

    mu = np.zeros(nparam)
    if "mu" in by_name:
        _, items, sln = by_name["mu"]
        for k, v, iln in items:
            if not (k.startswith("mu") and k[2:].isdigit()):
                raise ModelFileError(f"[mu] bad key {k!r}", iln)
            i = int(k[2:])
            if not (1 <= i <= nparam):
                raise ModelFileError(f"[mu] index out of range: {k}", iln)
            mu[i - 1] = float(v)

    ode = None
    if "ode" in by_name:
        attrs_o, items_o, sln = by_name["ode"]
        vals = dict(attrs_o)
        for k, v, _ in items_o:
            vals[k] = v
        sw = []
        for i in range(1, nw + 1):
            key = f"sw{i}"
            if key not in vals:
                raise ModelFileError(f"[ode] missing {key}", sln)
            sw.append(vals[key])
        ode = OdeSpec(alpha=float(vals.get("alpha", "1")),
                      beta=float(vals.get("beta", "0")), sw=sw)

    numflux = NumericalFluxSpec()
    wavespeed = None
    if "numflux" in by_name:
        attrs_n, items_n, _ = by_name["numflux"]
        vals = dict(attrs_n)
        for k, v, _ in items_n:
            vals[k] = v
        over_h = vals.get("tau_over_h")
        numflux = NumericalFluxSpec(
            trace=vals.get("trace", "switch"),
            grad_trace=vals.get("grad_trace", "opposite"),
            tau=float(vals.get("tau", "1")),
            tau_over_h=None if over_h is None else bool(int(over_h)))
        wavespeed = vals.get("wavespeed")
        uhat = [vals[k] for k in sorted(vals) if k.startswith("uhat")]
        fhat = [vals[k] for k in sorted(vals) if k.startswith("fhat")]
        if uhat:
            numflux.uhat = uhat
        if fhat:
            numflux.fhat = fhat

    bcs = {}
    for attrs_b, items_b, sln in bc_sections:
        try:
            tag = int(attrs_b["tag"])
            bctype = attrs_b["type"]
        except KeyError as e:
            raise ModelFileError(f"[bc] missing attribute {e}", sln) from None
        data = {k: v for k, v, _ in items_b}
        g = [data[f"g{i}"] for i in range(1, ncu + 1) if f"g{i}" in data]
        bcs[tag] = BoundaryCondition(type=bctype, data=g)

    init = {}
    if "init" in by_name:
        _, items_i, _ = by_name["init"]
        for k, v, _ in items_i:
            init[k] = v

    return PdeModel(kind=kind, ncu=ncu, nd=nd, nw=nw, nparam=nparam,
                    mass=mass, flux=flux, source=source, ode=ode,
                    numflux=numflux, bcs=bcs, init=init, mu=mu, tf=tf,
                    wavespeed=wavespeed)


def load_model(path) -> PdeModel:
    with open(path) as f:
        text = f.read()
    model = parse_model_text(text)
    diags = validate(model)
    if diags:
        raise ModelError(
            "model validation failed:\n" + "\n".join(str(d) for d in diags))
    return model


def save_model(model: PdeModel, path) -> None:
    with open(path, "w") as f:
        f.write(format_model(model))


def format_model(model: PdeModel) -> str:
    lines = [f"[model] kind={model.kind} ncu={model.ncu} nd={model.nd} "
             f"nw={model.nw} nparam={model.nparam} tf={model.tf!r}"]
    if model.nparam:
        lines.append("[mu]")
        for i, v in enumerate(model.mu, start=1):
            lines.append(f"mu{i}={float(v)!r}")
    lines.append("[mass]")
    for i, m in enumerate(model.mass, start=1):
        lines.append(f"m{i}={m}")
    lines.append("[flux]")
    for i in range(model.ncu):
        for j in range(model.nd):
            lines.append(f"f{i + 1}_{j + 1}={model.flux[i * model.nd + j]}")
    lines.append("[source]")
    for i, s in enumerate(model.source, start=1):
        lines.append(f"s{i}={s}")
    if model.ode is not None:
        lines.append(f"[ode] alpha={model.ode.alpha!r} beta={model.ode.beta!r}")
        for i, s in enumerate(model.ode.sw, start=1):
            lines.append(f"sw{i}={s}")
    nf = model.numflux
    lines.append(f"[numflux] trace={nf.trace} grad_trace={nf.grad_trace} "
                 f"tau={nf.tau!r}"
                 + ("" if nf.tau_over_h is None
                    else f" tau_over_h={int(nf.tau_over_h)}"))
    if model.wavespeed is not None:
        lines.append(f"wavespeed={model.wavespeed}")
    if nf.uhat:
        for i, e in enumerate(nf.uhat, start=1):
            lines.append(f"uhat{i}={e}")
    if nf.fhat:
        for i, e in enumerate(nf.fhat, start=1):
            lines.append(f"fhat{i}={e}")
    for tag in sorted(model.bcs):
        bc = model.bcs[tag]
        lines.append(f"[bc tag={tag} type={bc.type}]")
        for i, g in enumerate(bc.data, start=1):
            lines.append(f"g{i}={g}")
    if model.init:
        lines.append("[init]")
        for k in sorted(model.init):
            lines.append(f"{k}={model.init[k]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builtin library
# ---------------------------------------------------------------------------


def builtin_model(name: str, nd: int | None = None, mu=None, **options) -> PdeModel:
    """Construct a validated model from the builtin library.

    Every builtin carries classical fluxes; parameters enter through mu
    (e.g. shallow_water gravity g = mu1, wave speed c = mu1).
    """
    if name not in BUILTIN_NAMES:
        raise ModelError(f"unknown builtin model {name!r}")
    builder = _BUILTINS[name]
    model = builder(nd, **options)
    if mu is not None:
        mu = np.asarray(mu, dtype=float)
        if len(mu) != model.nparam:
            raise ModelError(
                f"{name}: expected {model.nparam} parameters, got {len(mu)}")
        model.mu = mu
    diags = validate(model)
    if diags:
        raise ModelError(f"builtin {name} failed validation: "
                         + "; ".join(str(d) for d in diags))
    return model


def _require_nd(name, nd, allowed):
    if nd is None:
        nd = allowed[0]
    if nd not in allowed:
        raise ModelError(f"{name}: nd must be in {allowed}, got {nd}")
    return nd


def _linear_convection(nd, **_):
    nd = _require_nd("linear_convection", nd, (1, 2, 3))
    flux = [f"mu{j + 1}*u1" for j in range(nd)]
    speed = "abs(" + "+".join(f"mu{j + 1}*n{j + 1}" for j in range(nd)) + ")"
    return PdeModel(kind="C", ncu=1, nd=nd, nparam=nd, mass=["1"], flux=flux,
                    source=["0"], mu=np.ones(nd), wavespeed=speed,
                    init={"u1": "0"})


def _burgers(nd, **_):
    nd = _require_nd("burgers", nd, (1, 2))
    flux = ["u1*u1/2"] * nd
    speed = "abs(u1*(" + "+".join(f"n{j + 1}" for j in range(nd)) + "))"
    return PdeModel(kind="C", ncu=1, nd=nd, nparam=0, mass=["1"], flux=flux,
                    source=["0"], wavespeed=speed, init={"u1": "0"})


def _shallow_water(nd, **_):
    nd = _require_nd("shallow_water", nd, (2,))
    flux = [
        "u2", "u3",
        "u2*u2/u1 + mu1*u1*u1/2", "u2*u3/u1",
        "u2*u3/u1", "u3*u3/u1 + mu1*u1*u1/2",
    ]
    speed = "abs(u2/u1*n1 + u3/u1*n2) + sqrt(mu1*u1)"
    return PdeModel(kind="C", ncu=3, nd=2, nparam=1, mass=["1"] * 3,
                    flux=flux, source=["0"] * 3, mu=np.array([1.0]),
                    wavespeed=speed,
                    init={"u1": "1", "u2": "0", "u3": "0"})


def _euler(nd, **_):
    nd = _require_nd("euler", nd, (2, 3))
    ncu = nd + 2
    iE = ncu  # energy index as u{iE}
    ke = "+".join(f"u{k}*u{k}" for k in range(2, nd + 2))
    p = f"(mu1-1)*(u{iE} - (({ke})/u1)/2)"
    flux = []
    for i in range(1, ncu + 1):
        for j in range(1, nd + 1):
            vj = f"u{j + 1}/u1"
            if i == 1:
                flux.append(f"u{j + 1}")
            elif i == iE:
                flux.append(f"(u{iE} + {p})*{vj}")
            else:
                s = f"u{i}*{vj}"
                if i == j + 1:
                    s += f" + {p}"
                flux.append(s)
    vn = "+".join(f"u{j + 1}/u1*n{j}" for j in range(1, nd + 1))
    speed = f"abs({vn}) + sqrt(mu1*({p})/u1)"
    init = {"u1": "1", f"u{iE}": "2.5"}
    for k in range(2, nd + 2):
        init[f"u{k}"] = "0"
    return PdeModel(kind="C", ncu=ncu, nd=nd, nparam=1, mass=["1"] * ncu,
                    flux=flux, source=["0"] * ncu, mu=np.array([1.4]),
                    wavespeed=speed, init=init)


def _poisson(nd, **_):
    nd = _require_nd("poisson", nd, (1, 2, 3))
    flux = [f"q1_{j + 1}" for j in range(nd)]
    return PdeModel(kind="D", ncu=1, nd=nd, nparam=0, mass=["0"], flux=flux,
                    source=["0"], init={"u1": "0"})


def _convection_diffusion(nd, **_):
    nd = _require_nd("convection_diffusion", nd, (1, 2, 3))
    # velocity mu1..mu{nd}, diffusivity mu{nd+1}
    flux = [f"mu{j + 1}*u1 + mu{nd + 1}*q1_{j + 1}" for j in range(nd)]
    speed = "abs(" + "+".join(f"mu{j + 1}*n{j + 1}" for j in range(nd)) + ")"
    return PdeModel(kind="D", ncu=1, nd=nd, nparam=nd + 1, mass=["1"],
                    flux=flux, source=["0"], mu=np.ones(nd + 1),
                    wavespeed=speed, init={"u1": "0"})


def _compressible_ns(nd, **_):
    # gamma = mu1, dynamic viscosity = mu2, Prandtl number = mu3
    nd = _require_nd("compressible_ns", nd, (2,))
    ncu = 4
    ke = "u2*u2+u3*u3"
    p = f"(mu1-1)*(u4 - (({ke})/u1)/2)"
    vx, vy = "u2/u1", "u3/u1"
    # velocity gradients from q{i}_{j} = -d(u_i)/dx_j
    dvxdx = f"(({vx})*q1_1 - q2_1)/u1"
    dvxdy = f"(({vx})*q1_2 - q2_2)/u1"
    dvydx = f"(({vy})*q1_1 - q3_1)/u1"
    dvydy = f"(({vy})*q1_2 - q3_2)/u1"
    txx = f"mu2*(4*({dvxdx})/3 - 2*({dvydy})/3)"
    tyy = f"mu2*(4*({dvydy})/3 - 2*({dvxdx})/3)"
    txy = f"mu2*(({dvxdy}) + ({dvydx}))"
    # temperature gradient (scaled): T = (u4 - ke/(2 u1))/u1
    T = f"(u4 - ({ke})/(2*u1))/u1"
    dTdx = f"((({T})*q1_1 - q4_1 + (({vx})*q2_1 + ({vy})*q3_1) - (({ke})/(2*u1))/u1*q1_1)/u1)"
    dTdy = f"((({T})*q1_2 - q4_2 + (({vx})*q2_2 + ({vy})*q3_2) - (({ke})/(2*u1))/u1*q1_2)/u1)"
    kcoef = f"mu1*mu2/mu3"
    flux = [
        "u2", "u3",
        f"u2*({vx}) + {p} - ({txx})", f"u2*({vy}) - ({txy})",
        f"u3*({vx}) - ({txy})", f"u3*({vy}) + {p} - ({tyy})",
        f"(u4 + {p})*({vx}) - ({vx})*({txx}) - ({vy})*({txy}) - ({kcoef})*({dTdx})",
        f"(u4 + {p})*({vy}) - ({vx})*({txy}) - ({vy})*({tyy}) - ({kcoef})*({dTdy})",
    ]
    speed = f"abs({vx}*n1 + {vy}*n2) + sqrt(mu1*({p})/u1)"
    return PdeModel(kind="D", ncu=ncu, nd=2, nparam=3, mass=["1"] * ncu,
                    flux=flux, source=["0"] * ncu,
                    mu=np.array([1.4, 1e-3, 0.72]), wavespeed=speed,
                    init={"u1": "1", "u2": "0", "u3": "0", "u4": "2.5"})


def _wave(nd, **_):
    # scalar wave equation with speed c = mu1: du/dt + c^2 div(q) = 0,
    # dq/dt + grad(u) = 0, displacement recovered by dw/dt = u
    nd = _require_nd("wave", nd, (1, 2, 3))
    flux = [f"mu1*mu1*q1_{j + 1}" for j in range(nd)]
    init = {"u1": "0", "w1": "0"}
    for j in range(nd):
        init[f"q1_{j + 1}"] = "0"
    return PdeModel(kind="W", ncu=1, nd=nd, nw=1, nparam=1, mass=["1"],
                    flux=flux, source=["0"],
                    ode=OdeSpec(alpha=1.0, beta=0.0, sw=["u1"]),
                    mu=np.array([1.0]), wavespeed="mu1", init=init)


def _linear_elasticity(nd, **_):
    # displacement formulation; Lame parameters lambda = mu1, mu = mu2;
    # strain from q{i}_{j} = -d(u_i)/dx_j
    nd = _require_nd("linear_elasticity", nd, (2, 3))
    ncu = nd
    tr = "+".join(f"q{i}_{i}" for i in range(1, nd + 1))
    flux = []
    for i in range(1, ncu + 1):
        for j in range(1, nd + 1):
            s = f"-(mu2*(q{i}_{j} + q{j}_{i}))"
            if i == j:
                s += f" - mu1*({tr})"
            flux.append(s)
    init = {f"u{i}": "0" for i in range(1, ncu + 1)}
    return PdeModel(kind="D", ncu=ncu, nd=nd, nparam=2, mass=["0"] * ncu,
                    flux=flux, source=["0"] * ncu, mu=np.array([1.0, 1.0]),
                    init=init)


_BUILTINS = {
    "linear_convection": _linear_convection,
    "burgers": _burgers,
    "shallow_water": _shallow_water,
    "euler": _euler,
    "poisson": _poisson,
    "convection_diffusion": _convection_diffusion,
    "compressible_ns": _compressible_ns,
    "wave": _wave,
    "linear_elasticity": _linear_elasticity,
}
