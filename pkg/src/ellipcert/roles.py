"""Variable role analysis: liveness, persistence ranges, per-range renaming,
and the index/state/parameter classification that drives the abstract domain
assignment.

All analyses work on base names: a subscripted occurrence `x[i]` contributes
the base `x`, and a subscripted write counts as both a use and a definition,
so arrays stay persistent across element-wise updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .errors import AnalysisError
from . import frontend as fe
from .frontend import (Assign, Assume, Bin, Call, Cfg, Cmp, Expr, For, Neg,
                       Node, Num, Read, Stmt, Var, Write)

Role = str  # "state" | "index" | "parameter"

STATE, INDEX, PARAMETER = "state", "index", "parameter"


# ---------------------------------------------------------------------------
# Use/def extraction
# ---------------------------------------------------------------------------


def expr_vars(expr: Expr) -> set[str]:
    """All base names occurring in an expression, including inside subscripts."""
    out: set[str] = set()
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, Var):
            out.add(e.name)
            stack.extend(e.subs)
        elif isinstance(e, (Bin, Cmp)):
            stack.extend((e.left, e.right))
        elif isinstance(e, Neg):
            stack.append(e.operand)
        elif isinstance(e, Call):
            stack.append(e.arg)
    return out


def _seq_use_def(stmts: Iterable[Stmt]) -> tuple[set[str], set[str]]:
    """Upward-exposed uses and definitions of a statement sequence."""
    uses: set[str] = set()
    defs: set[str] = set()
    for stmt in stmts:
        u, d = stmt_use_def(stmt)
        uses |= u - defs
        defs |= d
    return uses, defs


def stmt_use_def(stmt: Stmt) -> tuple[set[str], set[str]]:
    if isinstance(stmt, Assign):
        uses = expr_vars(stmt.value)
        for sub in stmt.target.subs:
            uses |= expr_vars(sub)
        if stmt.target.subs or stmt.op in ("+=", "-="):
            uses.add(stmt.target.name)
        return uses, {stmt.target.name}
    if isinstance(stmt, Read):
        uses = set()
        for sub in stmt.target.subs:
            uses |= expr_vars(sub)
        if stmt.target.subs:
            uses.add(stmt.target.name)
        return uses, {stmt.target.name}
    if isinstance(stmt, Write):
        return expr_vars(stmt.value), set()
    if isinstance(stmt, Assume):
        return expr_vars(stmt.cond), set()
    if isinstance(stmt, For):
        if stmt.lo >= stmt.hi:
            return set(), set()
        uses, defs = _seq_use_def(stmt.body)
        uses.discard(stmt.var)  # header defines the index first
        return uses, defs | {stmt.var}
    raise TypeError(f"unknown statement {stmt!r}")


def node_use_def(node: Node) -> tuple[set[str], set[str]]:
    if node.stmt is None:
        return set(), set()
    return stmt_use_def(node.stmt)


# ---------------------------------------------------------------------------
# Liveness
# ---------------------------------------------------------------------------


@dataclass
class LivenessInfo:
    live_in: dict[int, frozenset[str]]
    live_out: dict[int, frozenset[str]]


def compute_liveness(cfg: Cfg) -> LivenessInfo:
    """Least fixpoint of the backward liveness equations over base names."""
    use: dict[int, set[str]] = {}
    defs: dict[int, set[str]] = {}
    for node in cfg.nodes:
        use[node.nid], defs[node.nid] = node_use_def(node)
    live_in = {n.nid: set[str]() for n in cfg.nodes}
    live_out = {n.nid: set[str]() for n in cfg.nodes}
    changed = True
    while changed:
        changed = False
        for node in reversed(cfg.nodes):
            nid = node.nid
            out = set()
            for s in node.succs:
                out |= live_in[s]
            new_in = use[nid] | (out - defs[nid])
            if out != live_out[nid] or new_in != live_in[nid]:
                live_out[nid] = out
                live_in[nid] = new_in
                changed = True
    return LivenessInfo({k: frozenset(v) for k, v in live_in.items()},
                        {k: frozenset(v) for k, v in live_out.items()})


# ---------------------------------------------------------------------------
# Persistence ranges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PersistenceRange:
    var: str
    nodes: frozenset[int]
    edges: frozenset[tuple[int, int]]

    @property
    def first_node(self) -> int:
        return min(self.nodes)


def persistence_ranges(live: LivenessInfo, cfg: Cfg) -> list[PersistenceRange]:
    """Connected components of the per-variable persistence relation.

    A variable is persistent on edge (a, b) iff it is live-out at a and
    live-in at b; each component of the induced subgraph is one range.
    """
    edges_by_var: dict[str, list[tuple[int, int]]] = {}
    for node in cfg.nodes:
        for succ in node.succs:
            for var in live.live_out[node.nid] & live.live_in[succ]:
                edges_by_var.setdefault(var, []).append((node.nid, succ))

    ranges: list[PersistenceRange] = []
    for var in sorted(edges_by_var):
        parent: dict[int, int] = {}

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in edges_by_var[var]:
            parent.setdefault(a, a)
            parent.setdefault(b, b)
            parent[find(a)] = find(b)
        comps: dict[int, set[int]] = {}
        for n in parent:
            comps.setdefault(find(n), set()).add(n)
        for nodes in sorted(comps.values(), key=min):
            edges = frozenset(e for e in edges_by_var[var] if e[0] in nodes)
            ranges.append(PersistenceRange(var, frozenset(nodes), edges))
    return ranges


# ---------------------------------------------------------------------------
# Renaming
# ---------------------------------------------------------------------------


@dataclass
class RenameInfo:
    new_to_old: dict[str, str] = field(default_factory=dict)

    def original(self, name: str) -> str:
        return self.new_to_old.get(name, name)


def _stmt_vars(stmt: Stmt) -> set[str]:
    uses, defs = stmt_use_def(stmt)
    return uses | defs


def _rename_expr(expr: Expr, table: dict[str, str]) -> Expr:
    if isinstance(expr, Num):
        return expr
    if isinstance(expr, Var):
        subs = tuple(_rename_expr(s, table) for s in expr.subs)
        return Var(table.get(expr.name, expr.name), subs, expr.line, expr.col)
    if isinstance(expr, Bin):
        return Bin(expr.op, _rename_expr(expr.left, table), _rename_expr(expr.right, table))
    if isinstance(expr, Neg):
        return Neg(_rename_expr(expr.operand, table))
    if isinstance(expr, Call):
        return Call(expr.func, _rename_expr(expr.arg, table), expr.line, expr.col)
    if isinstance(expr, Cmp):
        return Cmp(expr.op, _rename_expr(expr.left, table), _rename_expr(expr.right, table))
    raise TypeError(f"unknown expression {expr!r}")


def _rename_stmt(stmt: Stmt, table: dict[str, str]) -> Stmt:
    if isinstance(stmt, Assign):
        return replace(stmt, target=_rename_expr(stmt.target, table),
                       value=_rename_expr(stmt.value, table))
    if isinstance(stmt, Read):
        return replace(stmt, target=_rename_expr(stmt.target, table))
    if isinstance(stmt, Write):
        return replace(stmt, value=_rename_expr(stmt.value, table))
    if isinstance(stmt, Assume):
        return replace(stmt, cond=_rename_expr(stmt.cond, table))
    if isinstance(stmt, For):
        body = tuple(_rename_stmt(s, table) for s in stmt.body)
        return replace(stmt, var=table.get(stmt.var, stmt.var), body=body)
    raise TypeError(f"unknown statement {stmt!r}")


def rename_by_range(cfg: Cfg, ranges: list[PersistenceRange]) -> tuple[Cfg, RenameInfo]:
    """Give each persistence range its own variable name (`v#1`, `v#2`, ...).

    A variable with a single range (and no detached occurrences) keeps its
    name. Occurrence nodes not touching any range — isolated definitions —
    become their own singleton group. The renaming is node-consistent: all
    occurrences of a base within one node share the renamed name.
    """
    occ_nodes: dict[str, list[int]] = {}
    for node in cfg.nodes:
        if node.stmt is None:
            continue
        for var in _stmt_vars(node.stmt):
            occ_nodes.setdefault(var, []).append(node.nid)

    node_tables: dict[int, dict[str, str]] = {}
    info = RenameInfo()
    for var, nodes in sorted(occ_nodes.items()):
        groups: list[set[int]] = [set(r.nodes) for r in ranges if r.var == var]
        grouped = set().union(*groups) if groups else set()
        for nid in nodes:
            if nid not in grouped:
                groups.append({nid})
        if len(groups) < 2:
            continue
        groups.sort(key=min)
        for idx, group in enumerate(groups, start=1):
            new = f"{var}#{idx}"
            info.new_to_old[new] = var
            for nid in group:
                node_tables.setdefault(nid, {})[var] = new

    new_nodes = []
    for node in cfg.nodes:
        table = node_tables.get(node.nid)
        if node.stmt is None or not table:
            new_nodes.append(node)
        else:
            new_nodes.append(replace(node, stmt=_rename_stmt(node.stmt, table)))
    renamed = Cfg(new_nodes, cfg.entry, cfg.exit, cfg.loop_head,
                  cfg.pre_ids, cfg.body_ids, cfg.program)
    return renamed, info


def rename_pipeline(cfg: Cfg) -> tuple[Cfg, RenameInfo]:
    live = compute_liveness(cfg)
    return rename_by_range(cfg, persistence_ranges(live, cfg))


# ---------------------------------------------------------------------------
# Dominators (for assertion-dominated dependencies)
# ---------------------------------------------------------------------------


def dominators(cfg: Cfg) -> dict[int, frozenset[int]]:
    all_ids = {n.nid for n in cfg.nodes}
    dom: dict[int, set[int]] = {n.nid: set(all_ids) for n in cfg.nodes}
    dom[cfg.entry] = {cfg.entry}
    preds = {n.nid: cfg.preds(n.nid) for n in cfg.nodes}
    changed = True
    while changed:
        changed = False
        for node in cfg.nodes:
            nid = node.nid
            if nid == cfg.entry:
                continue
            ps = preds[nid]
            new = set(all_ids)
            for p in ps:
                new &= dom[p]
            new = new | {nid} if ps else {nid}
            if new != dom[nid]:
                dom[nid] = new
                changed = True
    return {k: frozenset(v) for k, v in dom.items()}


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@dataclass
class RoleMap:
    roles: dict[str, Role]
    deps: dict[str, frozenset[str]]  # transitively closed
    inputs: frozenset[str]

    def of(self, name: str) -> Role:
        return self.roles[name]

    def states(self) -> list[str]:
        return [v for v, r in self.roles.items() if r == STATE]


def _collect_assignments(stmt: Stmt, out: list[tuple[str, set[str], bool]]):
    """(lhs base, rhs bases, reads-own-value) triples for every assignment."""
    if isinstance(stmt, Assign):
        rhs = expr_vars(stmt.value)
        for sub in stmt.target.subs:
            rhs |= expr_vars(sub)
        self_read = stmt.op in ("+=", "-=")
        out.append((stmt.target.name, rhs, self_read))
    elif isinstance(stmt, For):
        for s in stmt.body:
            _collect_assignments(s, out)


def classify(cfg: Cfg) -> RoleMap:
    """Apply the role-classification steps in order.

    1. Subscript-occurring variables (and for-loop indices) are indices.
    2. Indices are dropped from the dependency analysis.
    3. Dependencies: assignment left side depends on its right side;
       variables defined under an assertion depend on the assertion's
       variables; closed transitively.
    4. Input (read) targets are state.
    5. Self-dependent variables are state, as is anything depending on
       state — parameters must be independent of the state.
    6. Everything left is a parameter.
    """
    prog = cfg.program
    stmts = [n.stmt for n in cfg.nodes if n.stmt is not None]

    occurring: set[str] = set()
    for stmt in stmts:
        occurring |= _stmt_vars(stmt)
    # declared names replaced wholesale by renamed copies (v#1, v#2, ...)
    # no longer exist as variables of their own
    renamed_away = {v.split("#", 1)[0] for v in occurring if "#" in v} - occurring
    everything = occurring | {d.name for d in prog.decls if d.name not in renamed_away}

    index_vars: set[str] = set()

    def scan_subscripts(expr: Expr):
        for e in _walk(expr):
            if isinstance(e, Var):
                for sub in e.subs:
                    index_vars.update(expr_vars(sub))

    def _walk(expr: Expr):
        yield expr
        if isinstance(expr, Var):
            yield from (x for s in expr.subs for x in _walk(s))
        elif isinstance(expr, (Bin, Cmp)):
            yield from _walk(expr.left)
            yield from _walk(expr.right)
        elif isinstance(expr, Neg):
            yield from _walk(expr.operand)
        elif isinstance(expr, Call):
            yield from _walk(expr.arg)

    for stmt in stmts:
        for s in fe.walk_stmts([stmt]):
            if isinstance(s, For):
                index_vars.add(s.var)
            for expr in _stmt_exprs_all(s):
                scan_subscripts(expr)

    deps: dict[str, set[str]] = {v: set() for v in everything}
    assignments: list[tuple[str, set[str], bool]] = []
    for stmt in stmts:
        _collect_assignments(stmt, assignments)
    for lhs, rhs, self_read in assignments:
        if lhs in index_vars:
            continue
        deps[lhs] |= {v for v in rhs if v not in index_vars}
        if self_read:
            deps[lhs].add(lhs)

    # assertion-dominated definitions depend on the assertion's variables
    dom = dominators(cfg)
    assume_nodes = [n for n in cfg.nodes if isinstance(n.stmt, Assume)]
    for anode in assume_nodes:
        cond_vars = {v for v in expr_vars(anode.stmt.cond) if v not in index_vars}
        for node in cfg.nodes:
            if node.nid == anode.nid or anode.nid not in dom[node.nid]:
                continue
            _, defs = node_use_def(node)
            for d in defs:
                if d not in index_vars:
                    deps[d] |= cond_vars

    # transitive closure
    changed = True
    while changed:
        changed = False
        for v in deps:
            extra = set()
            for w in deps[v]:
                extra |= deps.get(w, set())
            if not extra <= deps[v]:
                deps[v] |= extra
                changed = True

    inputs: set[str] = set()
    for stmt in stmts:
        for s in fe.walk_stmts([stmt]):
            if isinstance(s, Read):
                inputs.add(s.target.name)

    core_state = set(inputs) | {v for v in deps if v in deps[v]}
    state = core_state | {v for v in deps if deps[v] & core_state}

    roles: dict[str, Role] = {}
    for v in sorted(everything):
        if v in index_vars:
            roles[v] = INDEX
        elif v in state:
            roles[v] = STATE
        else:
            roles[v] = PARAMETER
    return RoleMap(roles, {v: frozenset(deps[v]) for v in deps}, frozenset(inputs))


def _stmt_exprs_all(stmt: Stmt) -> Iterable[Expr]:
    if isinstance(stmt, Assign):
        yield stmt.target
        yield stmt.value
    elif isinstance(stmt, Read):
        yield stmt.target
    elif isinstance(stmt, Write):
        yield stmt.value
    elif isinstance(stmt, Assume):
        yield stmt.cond


def check_parameter_independence(rolemap: RoleMap, cfg: Cfg):
    """Reject programs where a parameter's value depends on the state."""
    for var, role in rolemap.roles.items():
        if role != PARAMETER:
            continue
        tainted = {w for w in rolemap.deps.get(var, frozenset())
                   if rolemap.roles.get(w) == STATE}
        if tainted:
            raise AnalysisError(
                f"parameter {var!r} depends on state variable(s) {sorted(tainted)}",
                0, 0, cfg.program.path)


def report_roles(rolemap: RoleMap, info: Optional[RenameInfo] = None) -> dict[str, Role]:
    """Role map keyed by source names, collapsing renamed copies when all
    copies agree; disagreeing copies keep their `v#k` names."""
    info = info or RenameInfo()
    by_orig: dict[str, dict[str, Role]] = {}
    for name, role in rolemap.roles.items():
        by_orig.setdefault(info.original(name), {})[name] = role
    out: dict[str, Role] = {}
    for orig, members in by_orig.items():
        if len(set(members.values())) == 1:
            out[orig] = next(iter(members.values()))
        else:
            out.update(members)
    return dict(sorted(out.items()))
