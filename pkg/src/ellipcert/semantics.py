"""Abstract semantics: compile each elementary statement into a rule instance
over the ellipsoid calculus.

The carrier of the compiled chain is the reverse formulation, where the
assignment rule applies unconditionally; fresh variables enter through the
product (bounded input), copy, and sector rules, and dead variables leave
through sub-block selection. Scalar rule parameters may stay symbolic in a
compiled chain (the `theta` vector) and are resolved during synthesis; slack
parameters (`eps`) are expressed as multiples of the largest eigenvalue of
the incoming matrix so the chain scales with its operand.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import ellipsoid as el
from . import frontend as fe
from . import roles as rl
from .config import AnalysisConfig
from .errors import AnalysisError, InvalidParameter, UnmatchedStatement
from .frontend import (Assign, Assume, Bin, Call, Cfg, Cmp, Expr, Neg, Node,
                       Num, Read, SourceProgram, Stmt, Var, Write)

# Rule kinds. The compiler emits the reverse-form subset; the direct-form
# kinds are applied through guarded conversion when used stand-alone.
AFFINE_IMAGE = "AffineImage"
INTRO = "Intro"
DROP = "Drop"
INIT_ZERO = "InitZero"
CONVEX_COMBINE = "ConvexCombine"
PRODUCT = "Product"
PROJECT = "Project"
INVERSE_IMAGE = "InverseImage"
COPY_DIRECT = "CopyDirect"
COPY_REVERSE = "CopyReverse"
SECTOR_DIRECT = "SectorDirect"
SECTOR_REVERSE = "SectorReverse"

RULE_KINDS = {
    AFFINE_IMAGE, INTRO, DROP, INIT_ZERO, CONVEX_COMBINE, PRODUCT, PROJECT,
    INVERSE_IMAGE, COPY_DIRECT, COPY_REVERSE, SECTOR_DIRECT, SECTOR_REVERSE,
}

LAMBDA_MIN, LAMBDA_MAX = 1e-6, 1.0 - 1e-6
COPY_RATIO_MAX = 10.0
SECTOR_RATIO_MIN, SECTOR_RATIO_MAX = 1.0 + 1e-6, 1e3

Param = Union[float, str]  # resolved value, or the name of a theta component


@dataclass(frozen=True)
class ThetaSpec:
    name: str
    kind: str  # "lambda" | "copy_ratio" | "sector_ratio"
    lo: float
    hi: float


@dataclass(frozen=True)
class RuleInstance:
    """One abstract transfer step; `params` values are floats once resolved."""

    kind: str
    location: str
    pre_layout: tuple[str, ...]
    post_layout: tuple[str, ...]
    matrix: Optional[np.ndarray] = None
    params: dict[str, Param] = field(default_factory=dict)
    bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")


@dataclass
class LoopSummary:
    rules: list[RuleInstance]
    theta: list[ThetaSpec]
    layout: tuple[str, ...]
    path: str = "<source>"

    @property
    def state_dim(self) -> int:
        return len(self.layout)

    @property
    def has_sector(self) -> bool:
        return any(r.kind in (SECTOR_REVERSE, SECTOR_DIRECT) for r in self.rules)


@dataclass(frozen=True)
class AbstractState:
    e: el.Ellipsoid

    @property
    def layout(self) -> tuple[str, ...]:
        return self.e.layout


def cell_base(cell: str) -> str:
    return cell.split("[", 1)[0]


# ---------------------------------------------------------------------------
# Rule application
# ---------------------------------------------------------------------------


def resolve_param(value: Param, theta: Optional[dict[str, float]]) -> float:
    if isinstance(value, str):
        if theta is None or value not in theta:
            raise InvalidParameter(f"unresolved rule parameter {value!r}")
        return float(theta[value])
    return float(value)


def _selection(pre: Sequence[str], post: Sequence[str]) -> np.ndarray:
    pre = list(pre)
    S = np.zeros((len(post), len(pre)))
    for i, var in enumerate(post):
        S[i, pre.index(var)] = 1.0
    return S


def apply_rule(rule: RuleInstance, M: np.ndarray,
               theta: Optional[dict[str, float]] = None,
               ) -> tuple[np.ndarray, dict[str, float]]:
    """Apply one rule to a reverse-form matrix over rule.pre_layout.

    Returns the post matrix and the fully resolved scalar parameters.
    Symbolic `eps` parameters are ratios scaled by the largest eigenvalue of
    the incoming matrix; everything else resolves directly.
    """
    n = len(rule.pre_layout)
    if M.shape != (n, n):
        raise el.DimensionMismatch(
            f"rule {rule.kind} at {rule.location}: matrix is {M.shape}, "
            f"pre-layout has {n} variables")
    kind = rule.kind
    resolved: dict[str, float] = {}

    if kind == AFFINE_IMAGE:
        return el.as_sym(rule.matrix @ M @ rule.matrix.T), resolved

    if kind == INTRO:
        m = len(rule.post_layout)
        out = np.zeros((m, m))
        out[:n, :n] = M
        return out, resolved

    if kind == INIT_ZERO:
        idx = rule.pre_layout.index(rule.params["cell"])  # type: ignore[arg-type]
        out = M.copy()
        out[idx, :] = 0.0
        out[:, idx] = 0.0
        return out, resolved

    if kind == PRODUCT:
        lam = resolve_param(rule.params["lambda"], theta)
        if not (0.0 < lam < 1.0):
            raise InvalidParameter(f"product weight must be in (0,1), got {lam}")
        resolved["lambda"] = lam
        q = rule.bound ** 2 / (1.0 - lam)
        return el.block_diag(M / lam, np.array([[q]])), resolved

    if kind in (PROJECT, DROP):
        S = _selection(rule.pre_layout, rule.post_layout)
        return el.as_sym(S @ M @ S.T), resolved

    if kind == COPY_REVERSE:
        eps = rule.params.get("eps", 0.0)
        if isinstance(eps, str):
            eps_val = resolve_param(eps, theta) * el.spectral_norm_scale(M)
        else:
            eps_val = float(eps)
        resolved["eps"] = eps_val
        e = el.Ellipsoid(el.REVERSE, M, rule.pre_layout)
        new = rule.post_layout[n:]
        return el.copy_rule_reverse(e, rule.matrix, eps_val, new).mat, resolved

    if kind == SECTOR_REVERSE:
        eps = rule.params["eps"]
        if isinstance(eps, str):
            eps_val = resolve_param(eps, theta) * el.spectral_norm_scale(M)
        else:
            eps_val = float(eps)
        resolved["eps"] = eps_val
        e = el.Ellipsoid(el.REVERSE, M, rule.pre_layout)
        return el.sector_rule_reverse(e, eps_val, rule.post_layout[-1]).mat, resolved

    if kind == INVERSE_IMAGE:
        # equivalent to the reverse-form assignment when everything is regular
        return el.as_sym(rule.matrix @ M @ rule.matrix.T), resolved

    if kind == COPY_DIRECT:
        lam = resolve_param(rule.params["lambda"], theta)
        resolved["lambda"] = lam
        e = el.reverse_to_direct(el.Ellipsoid(el.REVERSE, M, rule.pre_layout))
        out = el.copy_rule_direct(e, rule.matrix, lam, rule.post_layout[n:])
        return el.direct_to_reverse(out).mat, resolved

    if kind == SECTOR_DIRECT:
        mu = resolve_param(rule.params["mu"], theta)
        resolved["mu"] = mu
        e = el.reverse_to_direct(el.Ellipsoid(el.REVERSE, M, rule.pre_layout))
        out = el.sector_rule_direct(e, mu, rule.post_layout[-1])
        return el.direct_to_reverse(out).mat, resolved

    raise UnmatchedStatement(
        f"rule kind {kind} cannot be applied to a single reverse-form operand")


def apply_chain(rules: Iterable[RuleInstance], M: np.ndarray,
                theta: Optional[dict[str, float]] = None,
                ) -> np.ndarray:
    for rule in rules:
        M, _ = apply_rule(rule, M, theta)
    return M


def apply_chain_recording(rules: Iterable[RuleInstance], M: np.ndarray,
                          theta: Optional[dict[str, float]] = None,
                          ) -> list[tuple[RuleInstance, np.ndarray]]:
    """Apply the chain and return per-step (resolved rule, post matrix)."""
    out = []
    for rule in rules:
        M, resolved = apply_rule(rule, M, theta)
        params = dict(rule.params)
        params.update(resolved)
        out.append((replace(rule, params=params), M))
    return out


# ---------------------------------------------------------------------------
# Nonlinear statement expansion
# ---------------------------------------------------------------------------


def _find_calls(expr: Expr) -> list[Call]:
    calls = []
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, Call):
            calls.append(e)
            stack.append(e.arg)
        elif isinstance(e, (Bin, Cmp)):
            stack.extend((e.left, e.right))
        elif isinstance(e, Neg):
            stack.append(e.operand)
        elif isinstance(e, Var):
            stack.extend(e.subs)
    return calls


def _replace_call(expr: Expr, call: Call, sub: Expr) -> Expr:
    if expr is call:
        return sub
    if isinstance(expr, Bin):
        return Bin(expr.op, _replace_call(expr.left, call, sub),
                   _replace_call(expr.right, call, sub))
    if isinstance(expr, Neg):
        return Neg(_replace_call(expr.operand, call, sub))
    return expr


def expand_nonlinear(stmt: Assign, used_names: Iterable[str] = (),
                     counter: int = 1) -> list[Stmt]:
    """Split `x = a*x + b*f(c*x)` into virtual-variable steps:
    `y_v = c*x; u_v = f(y_v); x = a*x + b*u_v;` (concrete semantics identical).

    Statements without a sector call pass through unchanged.
    """
    calls = _find_calls(stmt.value)
    if not calls:
        return [stmt]
    if len(calls) > 1:
        raise UnmatchedStatement("more than one sector-function application",
                                 stmt.line, stmt.col)
    call = calls[0]
    if _find_calls(call.arg):
        raise UnmatchedStatement("nested sector-function applications",
                                 stmt.line, stmt.col)
    taken = set(used_names)
    k = counter
    while f"y_v{k}" in taken or f"u_v{k}" in taken:
        k += 1
    y_v = Var(f"y_v{k}", (), call.line, call.col)
    u_v = Var(f"u_v{k}", (), call.line, call.col)
    main_rhs = _replace_call(stmt.value, call, u_v)
    return [
        Assign(y_v, "=", call.arg, stmt.line, stmt.col),
        Assign(u_v, "=", Call(call.func, y_v, call.line, call.col), stmt.line, stmt.col),
        Assign(stmt.target, stmt.op, main_rhs, stmt.line, stmt.col),
    ]


def expand_cfg(cfg: Cfg) -> Cfg:
    """Rewrite every nonlinear statement in an unrolled CFG into its
    virtual-variable chain; node origins are preserved."""
    used = {d.name for d in cfg.program.decls}
    for node in cfg.nodes:
        if node.stmt is not None:
            uses, defs = rl.stmt_use_def(node.stmt)
            used |= uses | defs
    counter = 1
    nodes: list[Node] = [Node(0, None, (), -1, "entry")]

    def emit(stmts: list[Stmt], origin: int) -> list[int]:
        ids = []
        for s in stmts:
            nid = len(nodes)
            nodes.append(Node(nid, s, (), origin))
            ids.append(nid)
        return ids

    def expanded(node: Node) -> list[Stmt]:
        nonlocal counter
        if isinstance(node.stmt, Assign) and _find_calls(node.stmt.value):
            out = expand_nonlinear(node.stmt, used, counter)
            for s in out:
                if isinstance(s, Assign):
                    used.add(s.target.name)
            counter += 1
            return out
        return [node.stmt]

    pre_ids: list[int] = []
    for nid in cfg.pre_ids:
        pre_ids.extend(emit(expanded(cfg.node(nid)), cfg.node(nid).origin))
    body_ids: list[int] = []
    for nid in cfg.body_ids:
        body_ids.extend(emit(expanded(cfg.node(nid)), cfg.node(nid).origin))

    exit_id = len(nodes)
    nodes.append(Node(exit_id, None, (), -1, "exit"))
    loop_head = body_ids[0] if body_ids else None
    chain = [0, *pre_ids]
    for a, b in zip(chain, chain[1:]):
        nodes[a].succs = (b,)
    tail = chain[-1]
    if loop_head is not None:
        nodes[tail].succs = (loop_head,)
        for a, b in zip(body_ids, body_ids[1:]):
            nodes[a].succs = (b,)
        nodes[body_ids[-1]].succs = (loop_head,)
    else:
        nodes[tail].succs = (exit_id,)
    return Cfg(nodes, 0, exit_id, loop_head, tuple(pre_ids), tuple(body_ids),
               cfg.program)


# ---------------------------------------------------------------------------
# Linear-form extraction over state cells
# ---------------------------------------------------------------------------


@dataclass
class LinearForm:
    coeffs: dict[str, float]
    const: float

    def scaled(self, k: float) -> "LinearForm":
        return LinearForm({c: k * v for c, v in self.coeffs.items()}, k * self.const)

    def plus(self, other: "LinearForm", sign: float = 1.0) -> "LinearForm":
        coeffs = dict(self.coeffs)
        for c, v in other.coeffs.items():
            coeffs[c] = coeffs.get(c, 0.0) + sign * v
        return LinearForm(coeffs, self.const + sign * other.const)


class Compiler:
    """Compiles unrolled, expanded statements into the rule chain."""

    def __init__(self, prog: SourceProgram, rolemap: rl.RoleMap,
                 rename_info: rl.RenameInfo, config: AnalysisConfig,
                 param_values: dict[str, float]):
        self.prog = prog
        self.roles = rolemap
        self.renames = rename_info
        self.config = config
        self.params = dict(param_values)
        self.param_written: set[str] = set()
        self.param_carried: dict[str, float] = {}
        self.theta: list[ThetaSpec] = []
        self.rules: list[RuleInstance] = []
        self.layout: list[str] = []
        self.statement_count = 0
        self.symbolic_eps = False  # sector chains search copy slack too

    # -- helpers

    def role_of(self, base: str) -> str:
        role = self.roles.roles.get(base)
        if role is None and re.fullmatch(r"[yu]_v\d+", base):
            return rl.STATE  # virtual variables carry state values
        if role is None:
            raise AnalysisError(f"variable {base!r} has no role", 0, 0, self.prog.path)
        return role

    def cell_of(self, var: Var) -> str:
        subs = []
        for s in var.subs:
            if not isinstance(s, Num) or s.value != int(s.value):
                raise AnalysisError("subscript not concrete after unrolling",
                                    var.line, var.col, self.prog.path)
            subs.append(int(s.value))
        return fe.cell_name(var.name, tuple(subs))

    def fresh_theta(self, prefix: str, kind: str, lo: float, hi: float) -> str:
        name = f"{prefix}{sum(1 for t in self.theta if t.name.startswith(prefix))}"
        self.theta.append(ThetaSpec(name, kind, lo, hi))
        return name

    def copy_eps_param(self) -> Param:
        if self.symbolic_eps:
            return self.fresh_theta("ceps", "copy_ratio", 0.0, COPY_RATIO_MAX)
        return 0.0

    # -- linearization

    def linearize(self, expr: Expr, loc: Stmt) -> LinearForm:
        if isinstance(expr, Num):
            return LinearForm({}, expr.value)
        if isinstance(expr, Var):
            base = expr.name
            role = self.role_of(base)
            cell = self.cell_of(expr)
            if role == rl.STATE:
                return LinearForm({cell: 1.0}, 0.0)
            if role == rl.PARAMETER:
                if cell not in self.param_written and cell not in self.param_carried:
                    self.param_carried[cell] = self.params.get(cell, 0.0)
                return LinearForm({}, self.params.get(cell, 0.0))
            raise UnmatchedStatement(f"index variable {base!r} in a value position",
                                     getattr(loc, "line", 0), getattr(loc, "col", 0),
                                     self.prog.path)
        if isinstance(expr, Neg):
            return self.linearize(expr.operand, loc).scaled(-1.0)
        if isinstance(expr, Bin):
            left = self.linearize(expr.left, loc)
            right = self.linearize(expr.right, loc)
            if expr.op == "+":
                return left.plus(right)
            if expr.op == "-":
                return left.plus(right, -1.0)
            if left.coeffs and right.coeffs:
                raise UnmatchedStatement(
                    "product of two state-dependent expressions",
                    getattr(loc, "line", 0), getattr(loc, "col", 0), self.prog.path)
            if left.coeffs:
                return left.scaled(right.const)
            return right.scaled(left.const)
        if isinstance(expr, Call):
            raise UnmatchedStatement("sector call in a non-expanded position",
                                     expr.line, expr.col, self.prog.path)
        raise UnmatchedStatement(f"unsupported expression {expr!r}", 0, 0, self.prog.path)

    # -- rule emission

    def emit(self, kind: str, stmt: Optional[Stmt], post_layout: list[str], *,
             matrix: Optional[np.ndarray] = None,
             params: Optional[dict[str, Param]] = None,
             bound: Optional[float] = None):
        loc = "loop" if stmt is None else \
            f"{getattr(stmt, 'line', 0)}:{getattr(stmt, 'col', 0)}"
        self.rules.append(RuleInstance(
            kind, loc, tuple(self.layout), tuple(post_layout),
            matrix=None if matrix is None else np.asarray(matrix, dtype=float),
            params=params or {}, bound=bound))
        self.layout = list(post_layout)

    def drop_cells(self, cells: list[str], stmt: Optional[Stmt], kind: str = PROJECT):
        if not cells:
            return
        post = [c for c in self.layout if c not in cells]
        self.emit(kind, stmt, post)

    def row_update(self, target: str, form: LinearForm, stmt: Stmt):
        n = len(self.layout)
        T = np.eye(n)
        ti = self.layout.index(target)
        T[ti, :] = 0.0
        for cell, coeff in form.coeffs.items():
            if cell not in self.layout:
                raise AnalysisError(
                    f"state cell {cell!r} used while not tracked", getattr(stmt, "line", 0),
                    getattr(stmt, "col", 0), self.prog.path)
            T[ti, self.layout.index(cell)] = coeff
        self.emit(AFFINE_IMAGE, stmt, list(self.layout), matrix=T)

    # -- statement dispatch

    def compile_statement(self, stmt: Stmt):
        if isinstance(stmt, (Write, Assume)):
            return  # outputs and assertions do not constrain the ellipsoid
        if isinstance(stmt, Read):
            self.compile_read(stmt)
        elif isinstance(stmt, Assign):
            self.compile_assign(stmt)
        else:
            raise UnmatchedStatement("statement not elementary after unrolling",
                                     getattr(stmt, "line", 0), getattr(stmt, "col", 0),
                                     self.prog.path)

    def compile_read(self, stmt: Read):
        cell = self.cell_of(stmt.target)
        if self.role_of(stmt.target.name) != rl.STATE:
            raise AnalysisError(f"read target {stmt.target.name!r} is not state",
                                stmt.line, stmt.col, self.prog.path)
        if cell in self.layout:
            self.drop_cells([cell], stmt)
        lam = self.fresh_theta("lam", "lambda", LAMBDA_MIN, LAMBDA_MAX)
        bound = self.config.channel_bound(stmt.channel)
        self.emit(PRODUCT, stmt, [*self.layout, cell],
                  params={"lambda": lam}, bound=bound)

    def compile_assign(self, stmt: Assign):
        base = stmt.target.name
        role = self.role_of(base)
        if role == rl.PARAMETER:
            self.interpret_param_assign(stmt)
            return
        if role == rl.INDEX:
            raise UnmatchedStatement(f"cannot analyze index assignment to {base!r}",
                                     stmt.line, stmt.col, self.prog.path)
        calls = _find_calls(stmt.value)
        if calls:
            self.compile_sector(stmt, calls)
            return
        target = self.cell_of(stmt.target)
        form = self.linearize(stmt.value, stmt)
        if stmt.op in ("+=", "-="):
            sign = 1.0 if stmt.op == "+=" else -1.0
            form = LinearForm({target: 1.0}, 0.0).plus(form, sign)
        if form.const != 0.0:
            raise UnmatchedStatement(
                "assignments must be linear in the state (nonzero constant term)",
                stmt.line, stmt.col, self.prog.path)
        if target in self.layout:
            if not form.coeffs:
                self.emit(INIT_ZERO, stmt, list(self.layout), params={"cell": target})
            else:
                self.row_update(target, form, stmt)
        else:
            if not form.coeffs:
                self.emit(INTRO, stmt, [*self.layout, target])
            else:
                A = np.zeros((1, len(self.layout)))
                for cell, coeff in form.coeffs.items():
                    if cell not in self.layout:
                        raise AnalysisError(f"state cell {cell!r} used while not tracked",
                                            stmt.line, stmt.col, self.prog.path)
                    A[0, self.layout.index(cell)] = coeff
                self.emit(COPY_REVERSE, stmt, [*self.layout, target], matrix=A,
                          params={"eps": self.copy_eps_param()})

    def compile_sector(self, stmt: Assign, calls: list[Call]):
        # after expansion the only call shape left is `u_v = f(y_cell)`
        call = calls[0]
        if (len(calls) != 1 or stmt.op != "=" or stmt.value is not call
                or not isinstance(call.arg, Var)):
            raise UnmatchedStatement("sector call in a non-expanded position",
                                     stmt.line, stmt.col, self.prog.path)
        arg_cell = self.cell_of(call.arg)
        target = self.cell_of(stmt.target)
        if arg_cell not in self.layout:
            raise AnalysisError(f"sector argument {arg_cell!r} is not tracked",
                                stmt.line, stmt.col, self.prog.path)
        if target in self.layout:
            self.drop_cells([target], stmt)
        eps = self.fresh_theta("seps", "sector_ratio", SECTOR_RATIO_MIN, SECTOR_RATIO_MAX)
        self.emit(SECTOR_REVERSE, stmt, [*self.layout, target], params={"eps": eps})

    def interpret_param_assign(self, stmt: Assign):
        form = self.linearize(stmt.value, stmt)
        if form.coeffs:
            raise AnalysisError(
                f"parameter {stmt.target.name!r} assigned a state-dependent value",
                stmt.line, stmt.col, self.prog.path)
        cell = self.cell_of(stmt.target)
        value = form.const
        if stmt.op == "+=":
            value = self.params.get(cell, 0.0) + value
            if cell not in self.param_written and cell not in self.param_carried:
                self.param_carried[cell] = self.params.get(cell, 0.0)
        elif stmt.op == "-=":
            value = self.params.get(cell, 0.0) - value
            if cell not in self.param_written and cell not in self.param_carried:
                self.param_carried[cell] = self.params.get(cell, 0.0)
        self.params[cell] = value
        self.param_written.add(cell)

    def check_param_stationarity(self):
        """Parameter cells read before being written must end the iteration
        with the value they started with, otherwise the chain would change
        from one iteration to the next."""
        for cell, entry_value in self.param_carried.items():
            final = self.params.get(cell, 0.0)
            if final != entry_value:
                raise AnalysisError(
                    f"parameter cell {cell!r} is not stationary across loop "
                    f"iterations ({entry_value} -> {final})", 0, 0, self.prog.path)


def head_layout(cfg: Cfg, rolemap: rl.RoleMap, rename_info: rl.RenameInfo,
                live: rl.LivenessInfo) -> list[str]:
    """Cells tracked at the loop head: every cell of each state base that is
    live into the head, ordered by declaration then row-major index."""
    if cfg.loop_head is None:
        raise AnalysisError("program has no while(1) loop", 0, 0, cfg.program.path)
    live_bases = {b for b in live.live_in[cfg.loop_head]
                  if rolemap.roles.get(b) == rl.STATE}
    cells: list[str] = []
    decl_order = {d.name: i for i, d in enumerate(cfg.program.decls)}

    def sort_key(base: str):
        orig = rename_info.original(base)
        m = re.search(r"#(\d+)$", base)
        return (decl_order.get(orig, len(decl_order)), int(m.group(1)) if m else 0)

    for base in sorted(live_bases, key=sort_key):
        orig = rename_info.original(base)
        decl = cfg.program.decl(orig)
        if decl is None:
            raise AnalysisError(f"no declaration for state base {base!r}",
                                0, 0, cfg.program.path)
        for cell in fe.decl_cells(decl):
            cells.append(base + cell[len(orig):])
    return cells


def compile_loop(cfg: Cfg, rolemap: rl.RoleMap, config: AnalysisConfig,
                 rename_info: Optional[rl.RenameInfo] = None,
                 param_values: Optional[dict[str, float]] = None) -> LoopSummary:
    """Compile the unrolled, expanded loop body into the rule chain G.

    The chain maps the loop-head matrix to the loop-end matrix over the same
    layout; scalar parameters stay symbolic (named in `theta`).
    """
    prog = cfg.program
    rename_info = rename_info or rl.RenameInfo()
    if param_values is None:
        param_values = parameter_entry_values(prog, rolemap, rename_info)
    live = rl.compute_liveness(cfg)
    layout = head_layout(cfg, rolemap, rename_info, live)

    comp = Compiler(prog, rolemap, rename_info, config, param_values)
    comp.layout = list(layout)
    comp.symbolic_eps = any(
        isinstance(cfg.node(nid).stmt, Assign) and _find_calls(cfg.node(nid).stmt.value)
        for nid in cfg.body_ids)

    for nid in cfg.body_ids:
        stmt = cfg.node(nid).stmt
        comp.compile_statement(stmt)
        live_out = live.live_out[nid]
        dead = [c for c in comp.layout if cell_base(c) not in live_out]
        comp.drop_cells(dead, stmt)

    comp.check_param_stationarity()

    if comp.layout != layout:
        if set(comp.layout) != set(layout):
            raise AnalysisError(
                f"loop body does not restore the head layout: {comp.layout} vs {layout}",
                0, 0, prog.path)
        P = np.zeros((len(layout), len(layout)))
        for i, cell in enumerate(layout):
            P[i, comp.layout.index(cell)] = 1.0
        comp.emit(AFFINE_IMAGE, None, list(layout), matrix=P)
    return LoopSummary(comp.rules, comp.theta, tuple(layout), prog.path)


def parameter_entry_values(prog: SourceProgram, rolemap: rl.RoleMap,
                           rename_info: rl.RenameInfo) -> dict[str, float]:
    """Concrete parameter-cell values at loop entry.

    Renamed copies inherit the original declaration's initializer; pre-loop
    statements are folded in by concrete interpretation of the original
    program (renaming preserves them).
    """
    store = fe.loop_entry_store(prog)
    values: dict[str, float] = {}
    for base, role in rolemap.roles.items():
        if role != rl.PARAMETER:
            continue
        orig = rename_info.original(base)
        decl = prog.decl(orig)
        if decl is None or decl.is_int:
            continue
        for cell in fe.decl_cells(decl):
            values[base + cell[len(orig):]] = store[cell]
    return values


def initial_state_vector(prog: SourceProgram, layout: Sequence[str],
                         rename_info: rl.RenameInfo) -> np.ndarray:
    """Concrete loop-entry values of the tracked cells."""
    store = fe.loop_entry_store(prog)
    values = []
    for cell in layout:
        base = cell_base(cell)
        orig = rename_info.original(base)
        values.append(store.get(orig + cell[len(base):], 0.0))
    return np.array(values, dtype=float)


# ---------------------------------------------------------------------------
# Single-statement transfer (used by tests and the compatibility property)
# ---------------------------------------------------------------------------


def transfer(stmt: Stmt, state: AbstractState, params: dict[str, float], *,
             rolemap: rl.RoleMap, config: Optional[AnalysisConfig] = None,
             param_values: Optional[dict[str, float]] = None) -> AbstractState:
    """Abstract transfer of one elementary statement.

    `params` resolves any scalar the matching rule needs (lambda, eps).
    """
    comp = Compiler(stmt_prog(stmt), rolemap, rl.RenameInfo(),
                    config or AnalysisConfig(), param_values or {})
    comp.layout = list(state.layout)
    comp.symbolic_eps = True
    comp.compile_statement(stmt)
    M = state.e.mat
    for rule in comp.rules:
        M, _ = apply_rule(rule, M, params)
    return AbstractState(el.Ellipsoid(el.REVERSE, M, tuple(comp.layout)))


def stmt_prog(stmt: Stmt) -> SourceProgram:
    return SourceProgram((), (), (stmt,), None)


# ---------------------------------------------------------------------------
# Whole-program pipeline
# ---------------------------------------------------------------------------


@dataclass
class Compiled:
    program: SourceProgram
    cfg: Cfg                # pre-unroll, renamed (classification granularity)
    unrolled: Cfg           # unrolled + nonlinear-expanded (rule granularity)
    rolemap: rl.RoleMap
    rename_info: rl.RenameInfo
    summary: LoopSummary
    init: np.ndarray
    param_values: dict[str, float]


def compile_program(prog: SourceProgram,
                    config: Optional[AnalysisConfig] = None) -> Compiled:
    """Parse-to-chain pipeline: CFG, renaming, roles, unrolling, compilation."""
    config = config or AnalysisConfig()
    cfg0 = fe.build_cfg(prog)
    cfg1, rename_info = rl.rename_pipeline(cfg0)
    rolemap = rl.classify(cfg1)
    rl.check_parameter_independence(rolemap, cfg1)
    unrolled = expand_cfg(fe.unroll_loops(cfg1))
    params = parameter_entry_values(prog, rolemap, rename_info)
    summary = compile_loop(unrolled, rolemap, config, rename_info, params)
    init = initial_state_vector(prog, summary.layout, rename_info)
    return Compiled(prog, cfg1, unrolled, rolemap, rename_info, summary, init, params)


def rules_to_jsonable(summary: LoopSummary) -> list[dict]:
    out = []
    for rule in summary.rules:
        entry: dict = {
            "kind": rule.kind,
            "location": rule.location,
            "preLayout": list(rule.pre_layout),
            "postLayout": list(rule.post_layout),
        }
        if rule.matrix is not None:
            entry["matrix"] = [[float(x) for x in row] for row in rule.matrix]
        if rule.params:
            entry["params"] = {k: v for k, v in rule.params.items()}
        if rule.bound is not None:
            entry["bound"] = rule.bound
        out.append(entry)
    return out
