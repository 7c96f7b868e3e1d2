"""Scalar symbolic expressions over reserved PDE symbols.

Expressions are parsed into shared-node DAGs, compiled (constant folding,
integer-power strength reduction, common subexpression elimination) into flat
kernel plans, and evaluated in batch over numpy arrays, optionally carrying
forward-mode tangents.  Plans can also be emitted as flat C-like source text
(one assignment per line) and re-parsed, which is the golden-file format used
by the code generator.

Grammar (in decreasing binding strength):

    power   :  primary ['^' unary]          # right associative
    unary   :  '-' unary | power
    term    :  unary (('*' | '/') unary)*
    sum     :  term (('+' | '-') term)*
    primary :  number | name | name '(' args ')' | '(' sum ')'

``pi`` is a literal constant.  Calls are restricted to a fixed vocabulary:
sin cos tan exp log sqrt abs tanh (unary) and min max pow (binary).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import math
import numpy as np

UNARY_FNS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh")
BINARY_FNS = ("min", "max", "pow")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

_OP_CHAR = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


class ExprError(ValueError):
    """Base class for expression failures."""


class ExprSyntaxError(ExprError):
    """Parse failure with a character offset into the source text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UnknownSymbolError(ExprSyntaxError):
    pass


class EvalError(ExprError):
    """Bad bindings handed to a kernel plan."""


# ---------------------------------------------------------------------------
# Expression graphs
# ---------------------------------------------------------------------------
#
# Nodes are immutable tuples so structural identity is tuple equality:
#   ('const', float)            literal
#   ('sym', name)               declared symbol
#   ('neg', child)              unary minus
#   (op, left, right)           op in BINARY_OPS
#   ('call', fn, (args...))     fn in UNARY_FNS | BINARY_FNS
# Child references are integer indices into ``nodes``; construction
# hash-conses, so identical subtrees share one node.


@dataclass
class ExpressionGraph:
    """A DAG of scalar expressions with one root per output component."""

    nodes: list[tuple]
    roots: list[int]
    symbols: tuple[str, ...]

    def used_symbols(self) -> set[str]:
        return {n[1] for n in self.nodes if n[0] == "sym"}

    def eval_naive(self, bindings: Mapping[str, object]) -> np.ndarray:
        """Direct recursive interpretation of the graph (reference path).

        Independent of the compiled-plan backend; used as the oracle when
        validating CSE plans.
        """
        vals: dict[int, np.ndarray] = {}

        def rec(i: int) -> np.ndarray:
            if i in vals:
                return vals[i]
            n = self.nodes[i]
            tag = n[0]
            if tag == "const":
                v = np.asarray(n[1], dtype=float)
            elif tag == "sym":
                if n[1] not in bindings:
                    raise EvalError(f"missing binding for symbol '{n[1]}'")
                v = np.asarray(bindings[n[1]], dtype=float)
            elif tag == "neg":
                v = -rec(n[1])
            elif tag == "call":
                args = [rec(a) for a in n[2]]
                v = _apply_fn(n[1], args)
            else:
                a, b = rec(n[1]), rec(n[2])
                v = _apply_binop(tag, a, b)
            vals[i] = v
            return v

        with np.errstate(all="ignore"):
            out = [np.atleast_1d(rec(r)) for r in self.roots]
        out = np.broadcast_arrays(*out) if len(out) > 1 else out
        return np.stack(out)


def _apply_binop(op: str, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    if op == "pow":
        return a ** b
    raise AssertionError(op)


def _apply_fn(fn: str, args):
    if fn == "abs":
        return np.abs(args[0])
    if fn == "min":
        return np.minimum(args[0], args[1])
    if fn == "max":
        return np.maximum(args[0], args[1])
    if fn == "pow":
        return args[0] ** args[1]
    return getattr(np, fn)(args[0])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_NUM_START = set("0123456789.")


class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self):
        self._skip_ws()
        if self.pos >= len(self.text):
            return ("end", "", self.pos)
        c = self.text[self.pos]
        start = self.pos
        if c in "+-*/^(),=;":
            return ("op", c, start)
        if c in _NUM_START:
            j = start
            seen_e = False
            while j < len(self.text):
                ch = self.text[j]
                if ch.isdigit() or ch == ".":
                    j += 1
                elif ch in "eE" and not seen_e and j + 1 < len(self.text) and (
                    self.text[j + 1].isdigit() or self.text[j + 1] in "+-"
                ):
                    seen_e = True
                    j += 2 if self.text[j + 1] in "+-" else 1
                else:
                    break
            return ("num", self.text[start:j], start)
        if c.isalpha() or c == "_":
            j = start
            while j < len(self.text) and (self.text[j].isalnum() or self.text[j] == "_"):
                j += 1
            return ("name", self.text[start:j], start)
        raise ExprSyntaxError(f"unexpected character {c!r}", start)

    def next(self):
        tok = self.peek()
        self.pos = tok[2] + len(tok[1])
        return tok


class _Builder:
    """Hash-consing node store shared by all graphs of one parse session."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self.index: dict[tuple, int] = {}

    def add(self, node: tuple) -> int:
        i = self.index.get(node)
        if i is None:
            i = len(self.nodes)
            self.nodes.append(node)
            self.index[node] = i
        return i


class _Parser:
    def __init__(self, text: str, symbols: Sequence[str], builder: _Builder,
                 locals_: dict[str, int] | None = None):
        self.toks = _Tokenizer(text)
        self.symbols = tuple(symbols)
        self.symset = set(symbols)
        self.b = builder
        self.locals = locals_ or {}

    def parse(self) -> int:
        root = self.sum()
        kind, val, pos = self.toks.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected trailing input {val!r}", pos)
        return root

    def sum(self) -> int:
        left = self.term()
        while True:
            kind, val, _ = self.toks.peek()
            if kind == "op" and val in "+-":
                self.toks.next()
                right = self.term()
                left = self.b.add(("add" if val == "+" else "sub", left, right))
            else:
                return left

    def term(self) -> int:
        left = self.unary()
        while True:
            kind, val, _ = self.toks.peek()
            if kind == "op" and val in "*/":
                self.toks.next()
                right = self.unary()
                left = self.b.add(("mul" if val == "*" else "div", left, right))
            else:
                return left

    def unary(self) -> int:
        kind, val, _ = self.toks.peek()
        if kind == "op" and val == "-":
            self.toks.next()
            return self.b.add(("neg", self.unary()))
        return self.power()

    def power(self) -> int:
        base = self.primary()
        kind, val, _ = self.toks.peek()
        if kind == "op" and val == "^":
            self.toks.next()
            exp = self.unary()  # right associative; allows x^-2
            return self.b.add(("pow", base, exp))
        return base

    def primary(self) -> int:
        kind, val, pos = self.toks.next()
        if kind == "num":
            try:
                return self.b.add(("const", float(val)))
            except ValueError:
                raise ExprSyntaxError(f"bad numeric literal {val!r}", pos) from None
        if kind == "op" and val == "(":
            inner = self.sum()
            k2, v2, p2 = self.toks.next()
            if not (k2 == "op" and v2 == ")"):
                raise ExprSyntaxError("expected ')'", p2)
            return inner
        if kind == "name":
            nk, nv, _ = self.toks.peek()
            if nk == "op" and nv == "(":
                return self.call(val, pos)
            if val == "pi":
                return self.b.add(("const", math.pi))
            if val in self.locals:
                return self.locals[val]
            if val not in self.symset:
                raise UnknownSymbolError(f"unknown symbol '{val}'", pos)
            return self.b.add(("sym", val))
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input", pos)
        raise ExprSyntaxError(f"unexpected token {val!r}", pos)

    def call(self, fn: str, fn_pos: int) -> int:
        if fn not in UNARY_FNS and fn not in BINARY_FNS:
            raise ExprSyntaxError(f"unknown function '{fn}'", fn_pos)
        self.toks.next()  # consume '('
        args = [self.sum()]
        while True:
            kind, val, pos = self.toks.next()
            if kind == "op" and val == ")":
                break
            if kind == "op" and val == ",":
                args.append(self.sum())
            elif kind == "end":
                raise ExprSyntaxError("unexpected end of input in call", pos)
            else:
                raise ExprSyntaxError(f"expected ',' or ')', got {val!r}", pos)
        arity = 1 if fn in UNARY_FNS else 2
        if len(args) != arity:
            raise ExprSyntaxError(
                f"'{fn}' takes {arity} argument(s), got {len(args)}", fn_pos)
        return self.b.add(("call", fn, tuple(args)))


def parse_expression(text: str, symbols: Sequence[str]) -> ExpressionGraph:
    """Parse one scalar expression into a single-root graph."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    b = _Builder()
    root = _Parser(text, symbols, b).parse()
    return ExpressionGraph(nodes=b.nodes, roots=[root], symbols=tuple(symbols))


def parse_expressions(texts: Sequence[str], symbols: Sequence[str]) -> ExpressionGraph:
    """Parse several expressions into one multi-root graph with shared nodes."""
    b = _Builder()
    roots = [_Parser(t, symbols, b).parse() for t in texts]
    return ExpressionGraph(nodes=b.nodes, roots=roots, symbols=tuple(symbols))


def parse_program(text: str, symbols: Sequence[str],
                  out_prefix: str = "out") -> ExpressionGraph:
    """Parse emitted kernel source (``name = expr;`` statements) back into a
    graph whose roots are ``out0, out1, ...`` in index order."""
    b = _Builder()
    env: dict[str, int] = {}
    outs: dict[int, int] = {}
    for stmt in text.split(";"):
        stmt = stmt.strip()
        if not stmt:
            continue
        if "=" not in stmt:
            raise ExprSyntaxError(f"statement without '=': {stmt!r}", 0)
        name, rhs = stmt.split("=", 1)
        name = name.strip()
        node = _Parser(rhs, symbols, b, locals_=env).parse()
        env[name] = node
        if name.startswith(out_prefix) and name[len(out_prefix):].isdigit():
            outs[int(name[len(out_prefix):])] = node
    roots = [outs[k] for k in sorted(outs)]
    if sorted(outs) != list(range(len(outs))):
        raise ExprSyntaxError("non-contiguous output indices", 0)
    return ExpressionGraph(nodes=b.nodes, roots=roots, symbols=tuple(symbols))


# ---------------------------------------------------------------------------
# Compilation: folding, strength reduction, CSE
# ---------------------------------------------------------------------------


@dataclass
class KernelPlan:
    """Topologically ordered flat program produced by :func:`compile_with_cse`.

    Instructions reference earlier instruction indices only.  Plans are
    immutable after compilation and safe to evaluate concurrently; every
    evaluation call owns its scratch storage.
    """

    instructions: tuple[tuple, ...]
    outputs: tuple[int, ...]
    symbols: tuple[str, ...]

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    def used_symbols(self) -> set[str]:
        return {ins[1] for ins in self.instructions if ins[0] == "sym"}

    def instruction_count(self) -> int:
        return len(self.instructions)


class _PlanBuilder:
    def __init__(self, symbols: tuple[str, ...]):
        self.symbols = symbols
        self.instructions: list[tuple] = []
        self.index: dict[tuple, int] = {}

    def emit(self, ins: tuple) -> int:
        i = self.index.get(ins)
        if i is None:
            i = len(self.instructions)
            self.instructions.append(ins)
            self.index[ins] = i
        return i

    def const_value(self, i: int) -> float | None:
        ins = self.instructions[i]
        return ins[1] if ins[0] == "const" else None

    def add_node(self, graph: ExpressionGraph, node_id: int,
                 memo: dict[int, int]) -> int:
        if node_id in memo:
            return memo[node_id]
        node = graph.nodes[node_id]
        tag = node[0]
        if tag == "const":
            out = self.emit(("const", float(node[1])))
        elif tag == "sym":
            out = self.emit(("sym", node[1]))
        elif tag == "neg":
            c = self.add_node(graph, node[1], memo)
            cv = self.const_value(c)
            out = self.emit(("const", -cv) if cv is not None else ("neg", c))
        elif tag == "call":
            args = tuple(self.add_node(graph, a, memo) for a in node[2])
            argv = [self.const_value(a) for a in args]
            if node[1] == "pow":
                out = self._pow(args[0], args[1])
            elif all(v is not None for v in argv):
                with np.errstate(all="ignore"):
                    out = self.emit(("const", float(_apply_fn(node[1], argv))))
            else:
                out = self.emit(("call", node[1], args))
        else:
            a = self.add_node(graph, node[1], memo)
            b = self.add_node(graph, node[2], memo)
            if tag == "pow":
                out = self._pow(a, b)
            else:
                av, bv = self.const_value(a), self.const_value(b)
                if av is not None and bv is not None:
                    with np.errstate(all="ignore"):
                        out = self.emit(("const", float(_apply_binop(tag, av, bv))))
                else:
                    out = self.emit((tag, a, b))
        memo[node_id] = out
        return out

    def _pow(self, base: int, exp: int) -> int:
        """Integer exponents <= 4 become multiplication chains."""
        bv, ev = self.const_value(base), self.const_value(exp)
        if bv is not None and ev is not None:
            with np.errstate(all="ignore"):
                return self.emit(("const", float(bv ** ev)))
        if ev is not None and ev == int(ev) and 0 <= int(ev) <= 4:
            n = int(ev)
            if n == 0:
                return self.emit(("const", 1.0))
            if n == 1:
                return base
            sq = self.emit(("mul", base, base))
            if n == 2:
                return sq
            if n == 3:
                return self.emit(("mul", sq, base))
            return self.emit(("mul", sq, sq))
        return self.emit(("pow", base, exp))


def compile_with_cse(graphs: Sequence[ExpressionGraph] | ExpressionGraph) -> KernelPlan:
    """Compile graphs sharing one symbol table into a deduplicated plan.

    Constants are folded first, integer powers <= 4 are strength-reduced to
    multiplication chains, and structurally identical instructions are
    emitted exactly once.  Output slot order follows the input root order.
    """
    if isinstance(graphs, ExpressionGraph):
        graphs = [graphs]
    if not graphs:
        raise ValueError("no graphs to compile")
    symbols = graphs[0].symbols
    for g in graphs[1:]:
        if g.symbols != symbols:
            raise ValueError("graphs do not share one symbol table")
    pb = _PlanBuilder(symbols)
    outputs = []
    for g in graphs:
        memo: dict[int, int] = {}
        for r in g.roots:
            outputs.append(pb.add_node(g, r, memo))
    return KernelPlan(instructions=tuple(pb.instructions),
                      outputs=tuple(outputs), symbols=symbols)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _bind(plan: KernelPlan, bindings: Mapping[str, object]):
    used = plan.used_symbols()
    missing = used - set(bindings)
    if missing:
        raise EvalError(f"missing bindings: {sorted(missing)}")
    arrs: dict[str, np.ndarray] = {}
    batch = None
    for s in used:
        a = np.asarray(bindings[s], dtype=float)
        if a.ndim > 1:
            a = a.ravel()
        if a.ndim == 1:
            if batch is None:
                batch = a.shape[0]
            elif a.shape[0] != batch:
                raise EvalError(
                    f"binding '{s}' has length {a.shape[0]}, expected {batch}")
        arrs[s] = a
    if batch is None:
        batch = 1
    if batch < 1:
        raise EvalError("empty batch")
    return arrs, batch


def evaluate(plan: KernelPlan, bindings: Mapping[str, object]) -> np.ndarray:
    """Evaluate a plan pointwise over equal-length value arrays.

    Returns an array of shape (n_outputs, B).  NaNs appear only where the
    mathematics forces them (log of a negative, 0/0, ...); callers that need
    to act on them should use :func:`evaluate_flagged`.
    """
    arrs, batch = _bind(plan, bindings)
    vals: list[np.ndarray] = []
    with np.errstate(all="ignore"):
        for ins in plan.instructions:
            tag = ins[0]
            if tag == "const":
                v = np.full(1, ins[1])
            elif tag == "sym":
                v = arrs[ins[1]]
            elif tag == "neg":
                v = -vals[ins[1]]
            elif tag == "call":
                v = _apply_fn(ins[1], [vals[a] for a in ins[2]])
            else:
                v = _apply_binop(tag, vals[ins[1]], vals[ins[2]])
            vals.append(v)
    out = np.empty((len(plan.outputs), batch))
    for k, r in enumerate(plan.outputs):
        out[k] = vals[r]
    return out


def evaluate_flagged(plan: KernelPlan, bindings) -> tuple[np.ndarray, bool]:
    out = evaluate(plan, bindings)
    return out, not bool(np.isfinite(out).all())


def evaluate_with_tangent(plan: KernelPlan, bindings: Mapping[str, object],
                          seed: Mapping[str, object]) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode evaluation: returns (values, directional derivatives).

    ``seed`` assigns a tangent array to each symbol (missing entries mean a
    zero tangent).  Non-differentiable points use subgradient conventions:
    d|x| at 0 is 0; min/max ties take the left argument's derivative.
    """
    arrs, batch = _bind(plan, bindings)
    seeds = {}
    for s, v in seed.items():
        a = np.asarray(v, dtype=float)
        seeds[s] = a.ravel() if a.ndim > 1 else a
    zero = np.zeros(1)
    vals: list[np.ndarray] = []
    tans: list[np.ndarray] = []
    with np.errstate(all="ignore"):
        for ins in plan.instructions:
            tag = ins[0]
            if tag == "const":
                v, d = np.full(1, ins[1]), zero
            elif tag == "sym":
                v, d = arrs[ins[1]], seeds.get(ins[1], zero)
            elif tag == "neg":
                v, d = -vals[ins[1]], -tans[ins[1]]
            elif tag == "call":
                fn = ins[1]
                a = vals[ins[2][0]]
                da = tans[ins[2][0]]
                if fn in BINARY_FNS:
                    b, db = vals[ins[2][1]], tans[ins[2][1]]
                    v, d = _call_tangent2(fn, a, da, b, db)
                else:
                    v, d = _call_tangent1(fn, a, da)
            else:
                a, da = vals[ins[1]], tans[ins[1]]
                b, db = vals[ins[2]], tans[ins[2]]
                if tag == "add":
                    v, d = a + b, da + db
                elif tag == "sub":
                    v, d = a - b, da - db
                elif tag == "mul":
                    v, d = a * b, da * b + a * db
                elif tag == "div":
                    v = a / b
                    d = (da - v * db) / b
                else:  # pow
                    v, d = _pow_tangent(a, da, b, db)
            vals.append(v)
            tans.append(d)
    out = np.empty((len(plan.outputs), batch))
    dout = np.empty((len(plan.outputs), batch))
    for k, r in enumerate(plan.outputs):
        out[k] = vals[r]
        dout[k] = tans[r]
    return out, dout


def _pow_tangent(a, da, b, db):
    v = a ** b
    d = b * a ** (b - 1.0) * da
    if np.any(db != 0.0):
        # the log term is only defined for a > 0; where db == 0 it is dropped
        d = d + np.where(db == 0.0, 0.0, v * np.log(a) * db)
    return v, d


def _call_tangent1(fn, a, da):
    if fn == "sin":
        return np.sin(a), np.cos(a) * da
    if fn == "cos":
        return np.cos(a), -np.sin(a) * da
    if fn == "tan":
        v = np.tan(a)
        return v, (1.0 + v * v) * da
    if fn == "exp":
        v = np.exp(a)
        return v, v * da
    if fn == "log":
        return np.log(a), da / a
    if fn == "sqrt":
        v = np.sqrt(a)
        return v, da / (2.0 * v)
    if fn == "abs":
        return np.abs(a), np.sign(a) * da
    if fn == "tanh":
        v = np.tanh(a)
        return v, (1.0 - v * v) * da
    raise AssertionError(fn)


def _call_tangent2(fn, a, da, b, db):
    if fn == "min":
        return np.minimum(a, b), np.where(a <= b, da, db)
    if fn == "max":
        return np.maximum(a, b), np.where(a >= b, da, db)
    if fn == "pow":
        return _pow_tangent(a, da, b, db)
    raise AssertionError(fn)


# ---------------------------------------------------------------------------
# Source emission
# ---------------------------------------------------------------------------


@dataclass
class EmitOptions:
    temp_prefix: str = "t"
    out_prefix: str = "out"
    terminator: str = ";"


def emit_source(plan: KernelPlan, options: EmitOptions | None = None) -> str:
    """Emit a plan as flat scalar assignments in neutral C-like syntax.

    One assignment per instruction; temporaries are named ``t<k>`` in
    emission order and outputs ``out<k>``.  Instructions that serve only as
    the single root of one output are assigned to ``out<k>`` directly.
    Re-parsing with :func:`parse_program` reproduces the plan's semantics.
    """
    opts = options or EmitOptions()
    n = len(plan.instructions)
    referenced = [0] * n
    for ins in plan.instructions:
        if ins[0] == "call":
            for a in ins[2]:
                referenced[a] += 1
        elif ins[0] == "neg":
            referenced[ins[1]] += 1
        elif ins[0] in BINARY_OPS:
            referenced[ins[1]] += 1
            referenced[ins[2]] += 1
    root_of: dict[int, list[int]] = {}
    for k, r in enumerate(plan.outputs):
        root_of.setdefault(r, []).append(k)

    names: dict[int, str] = {}
    lines: list[str] = []
    counter = 0

    def ref(i: int) -> str:
        ins = plan.instructions[i]
        if ins[0] == "sym":
            return ins[1]
        if ins[0] == "const":
            return repr(ins[1])
        return names[i]

    def rhs(ins: tuple) -> str:
        tag = ins[0]
        if tag == "neg":
            return f"-{ref(ins[1])}"
        if tag == "call":
            return f"{ins[1]}({', '.join(ref(a) for a in ins[2])})"
        if tag == "pow":
            return f"pow({ref(ins[1])}, {ref(ins[2])})"
        return f"{ref(ins[1])}{_OP_CHAR[tag]}{ref(ins[2])}"

    for i, ins in enumerate(plan.instructions):
        if ins[0] in ("sym", "const"):
            continue
        outs = root_of.get(i, [])
        if len(outs) == 1 and referenced[i] == 0:
            names[i] = f"{opts.out_prefix}{outs[0]}"
        else:
            names[i] = f"{opts.temp_prefix}{counter}"
            counter += 1
        lines.append(f"{names[i]} = {rhs(ins)}{opts.terminator}")
        for k in outs:
            if names[i] != f"{opts.out_prefix}{k}":
                lines.append(f"{opts.out_prefix}{k} = {names[i]}{opts.terminator}")
    # roots that are bare symbols or constants never got an assignment above
    for i, outs in root_of.items():
        if plan.instructions[i][0] in ("sym", "const"):
            for k in outs:
                lines.append(f"{opts.out_prefix}{k} = {ref(i)}{opts.terminator}")
    return "\n".join(lines) + ("\n" if lines else "")
