"""Frontend for the controller mini-language: lexer, parser, CFG construction,
constant-bound loop unrolling, and a reference interpreter.

The accepted language is a strict C subset shaped after autocoded controller
listings: global/local declarations of reals and fixed-size real arrays with
constant initializers, `int` index variables, one top-level `while(1)` loop,
constant-bound `for` loops, `+=`/`-=` updates, `read(k)`/`write(e)` I/O
intrinsics, `assume(c)` assertions, and declared sector-bounded functions
(`nonlin f;`, with `sin` builtin).
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

from .errors import AnalysisError, ConfigError, ParseError

BUILTIN_SECTOR = {"sin"}

UNROLL_GUARD = 10 ** 6


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

KEYWORDS = {
    "double", "float", "int", "void", "main", "while", "for",
    "nonlin", "read", "write", "assume",
}

_TOKEN_RE = re.compile(
    r"""
    (?P<num>(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<id>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\+\+|\+=|-=|==|<=|>=|[-+*;,=<>(){}\[\]])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


def tokenize(text: str, path: str = "<source>") -> list[Token]:
    """Lex source text into tokens; skips whitespace, comments and `#` lines."""
    tokens: list[Token] = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#" and col == 1:
            while i < n and text[i] != "\n":
                i += 1
            continue
        if text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        if text.startswith("/*", i):
            end = text.find("*/", i + 2)
            if end < 0:
                raise ParseError("unterminated comment", line, col, path)
            skipped = text[i:end + 2]
            line += skipped.count("\n")
            if "\n" in skipped:
                col = len(skipped) - skipped.rfind("\n")
            else:
                col += len(skipped)
            i = end + 2
            continue
        m = _TOKEN_RE.match(text, i)
        if not m:
            raise ParseError(f"unexpected character {ch!r}", line, col, path)
        tok_text = m.group()
        if m.lastgroup == "num":
            kind = "num"
        elif m.lastgroup == "id":
            kind = tok_text if tok_text in KEYWORDS else "id"
        else:
            kind = tok_text
        tokens.append(Token(kind, tok_text, line, col))
        col += len(tok_text)
        i = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


def token_signature(text: str, path: str = "<source>") -> str:
    """SHA-256 digest of the token stream (whitespace/comment insensitive)."""
    h = hashlib.sha256()
    for tok in tokenize(text, path):
        h.update(tok.kind.encode())
        h.update(b"\x1f")
        h.update(tok.text.encode())
        h.update(b"\x1e")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Num(Expr):
    value: float
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Var(Expr):
    name: str
    subs: tuple[Expr, ...] = ()
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Bin(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Cmp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Stmt:
    pass


@dataclass(frozen=True)
class Assign(Stmt):
    target: Var
    op: str  # "=", "+=", "-="
    value: Expr
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Read(Stmt):
    target: Var
    channel: int
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Write(Stmt):
    value: Expr
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Assume(Stmt):
    cond: Expr
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class For(Stmt):
    var: str
    lo: int
    hi: int
    body: tuple[Stmt, ...]
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class WhileTrue(Stmt):
    body: tuple[Stmt, ...]
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Decl:
    name: str
    dims: tuple[int, ...]
    init: object  # None, float, or nested tuples matching dims
    is_int: bool
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class SourceProgram:
    decls: tuple[Decl, ...]
    nonlins: tuple[str, ...]
    pre: tuple[Stmt, ...]
    loop: Optional[WhileTrue]
    path: str = field(compare=False, default="<source>")
    source_hash: str = field(compare=False, default="")

    def decl(self, name: str) -> Optional[Decl]:
        for d in self.decls:
            if d.name == name:
                return d
        return None


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token], path: str):
        self.toks = tokens
        self.pos = 0
        self.path = path
        self.decls: list[Decl] = []
        self.nonlins: list[str] = []
        self.stmts: list[Stmt] = []
        self.seen_main = False

    # -- token helpers

    def peek(self, ahead: int = 0) -> Token:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> Token:
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def expect(self, kind: str) -> Token:
        tok = self.peek()
        if tok.kind != kind:
            shown = tok.text if tok.kind != "eof" else "end of file"
            self.fail(f"expected {kind!r}, found {shown!r}", tok)
        return self.next()

    def fail(self, message: str, tok: Optional[Token] = None):
        tok = tok or self.peek()
        raise ParseError(message, tok.line, tok.col, self.path)

    # -- grammar

    def parse_program(self) -> SourceProgram:
        while self.peek().kind != "eof":
            self.parse_toplevel(self.stmts)
        pre, loop = self.split_body(self.stmts)
        return SourceProgram(tuple(self.decls), tuple(self.nonlins), tuple(pre), loop,
                             path=self.path)

    def split_body(self, stmts: list[Stmt]) -> tuple[list[Stmt], Optional[WhileTrue]]:
        loops = [s for s in stmts if isinstance(s, WhileTrue)]
        if len(loops) > 1:
            self.fail_at(loops[1], "more than one top-level while(1) loop")
        if not loops:
            return stmts, None
        idx = stmts.index(loops[0])
        if idx != len(stmts) - 1:
            trailing = stmts[idx + 1]
            self.fail_at(trailing, "unreachable statement after while(1)")
        return stmts[:idx], loops[0]

    def fail_at(self, stmt: Stmt, message: str):
        raise ParseError(message, getattr(stmt, "line", 0), getattr(stmt, "col", 0), self.path)

    def parse_toplevel(self, into: list[Stmt]):
        kind = self.peek().kind
        if kind == "nonlin":
            self.parse_nonlin_decl()
        elif kind in ("double", "float"):
            self.parse_var_decl(is_int=False)
        elif kind == "int" and self.peek(1).kind == "main":
            self.parse_main(into)
        elif kind == "int":
            self.parse_var_decl(is_int=True)
        elif kind == "void":
            self.parse_main(into)
        else:
            into.append(self.parse_statement(toplevel=True))

    def parse_main(self, into: list[Stmt]):
        if self.seen_main:
            self.fail("duplicate main function")
        self.seen_main = True
        self.next()  # void | int
        self.expect("main")
        self.expect("(")
        if self.peek().kind == "void":
            self.next()
        self.expect(")")
        self.expect("{")
        while self.peek().kind != "}":
            self.parse_toplevel(into)
        self.expect("}")

    def parse_nonlin_decl(self):
        self.expect("nonlin")
        while True:
            name = self.expect("id")
            self.declare(Decl(name.text, (), None, False, name.line, name.col), nonlin=True)
            if self.peek().kind != ",":
                break
            self.next()
        self.expect(";")

    def parse_var_decl(self, is_int: bool):
        self.next()  # type token
        while True:
            name_tok = self.expect("id")
            dims: list[int] = []
            while self.peek().kind == "[":
                self.next()
                dims.append(self.parse_const_int("array dimension"))
                self.expect("]")
            init = None
            if self.peek().kind == "=":
                self.next()
                init = self.parse_initializer(tuple(dims))
            self.declare(Decl(name_tok.text, tuple(dims), init, is_int,
                              name_tok.line, name_tok.col))
            if self.peek().kind != ",":
                break
            self.next()
        self.expect(";")

    def declare(self, decl: Decl, nonlin: bool = False):
        if decl.name in BUILTIN_SECTOR:
            raise ParseError(f"cannot redeclare builtin function {decl.name!r}",
                             decl.line, decl.col, self.path)
        if any(d.name == decl.name for d in self.decls) or decl.name in self.nonlins:
            raise ParseError(f"redeclaration of {decl.name!r}", decl.line, decl.col, self.path)
        if nonlin:
            self.nonlins.append(decl.name)
        else:
            self.decls.append(decl)

    def parse_const_int(self, what: str) -> int:
        tok = self.peek()
        if tok.kind != "num" or not re.fullmatch(r"\d+", tok.text):
            self.fail(f"{what} must be a constant integer", tok)
        self.next()
        return int(tok.text)

    def parse_initializer(self, dims: tuple[int, ...]):
        if not dims:
            return self.parse_const_number()
        self.expect("{")
        items = [self.parse_initializer(dims[1:])]
        while self.peek().kind == ",":
            self.next()
            items.append(self.parse_initializer(dims[1:]))
        self.expect("}")
        if len(items) != dims[0]:
            self.fail(f"initializer has {len(items)} elements, expected {dims[0]}")
        return tuple(items)

    def parse_const_number(self) -> float:
        sign = 1.0
        if self.peek().kind == "-":
            self.next()
            sign = -1.0
        tok = self.expect("num")
        return sign * float(tok.text)

    def parse_statement(self, toplevel: bool = False) -> Stmt:
        tok = self.peek()
        if tok.kind == "while":
            if not toplevel:
                self.fail("while(1) is only allowed at top level", tok)
            return self.parse_while()
        if tok.kind == "for":
            return self.parse_for()
        if tok.kind == "write":
            self.next()
            self.expect("(")
            value = self.parse_expr()
            self.expect(")")
            self.expect(";")
            return Write(value, tok.line, tok.col)
        if tok.kind == "assume":
            self.next()
            self.expect("(")
            cond = self.parse_assume_cond()
            self.expect(")")
            self.expect(";")
            return Assume(cond, tok.line, tok.col)
        if tok.kind == "{":
            self.fail("blocks are only allowed as loop bodies", tok)
        return self.parse_assignment()

    def parse_while(self) -> WhileTrue:
        tok = self.expect("while")
        self.expect("(")
        one = self.expect("num")
        if one.text != "1":
            self.fail("only while(1) loops are supported", one)
        self.expect(")")
        body = self.parse_block_or_stmt()
        if not body:
            self.fail("empty while(1) body", tok)
        return WhileTrue(tuple(body), tok.line, tok.col)

    def parse_for(self) -> For:
        tok = self.expect("for")
        self.expect("(")
        var = self.expect("id").text
        self.expect("=")
        lo = self.parse_const_int("for-loop lower bound")
        self.expect(";")
        var2 = self.expect("id").text
        if var2 != var:
            self.fail(f"for-loop tests {var2!r}, expected {var!r}")
        self.expect("<")
        hi = self.parse_const_int("for-loop upper bound")
        self.expect(";")
        var3 = self.expect("id").text
        if var3 != var:
            self.fail(f"for-loop increments {var3!r}, expected {var!r}")
        self.expect("++")
        self.expect(")")
        body = self.parse_block_or_stmt()
        return For(var, lo, hi, tuple(body), tok.line, tok.col)

    def parse_block_or_stmt(self) -> list[Stmt]:
        if self.peek().kind == "{":
            self.next()
            body: list[Stmt] = []
            while self.peek().kind != "}":
                if self.peek().kind == "eof":
                    self.fail("unterminated block")
                body.append(self.parse_statement())
            self.next()
            return body
        return [self.parse_statement()]

    def parse_assignment(self) -> Stmt:
        target = self.parse_lvalue()
        op_tok = self.peek()
        if op_tok.kind not in ("=", "+=", "-="):
            self.fail("expected assignment operator", op_tok)
        self.next()
        if op_tok.kind == "=" and self.peek().kind == "read":
            read_tok = self.next()
            self.expect("(")
            channel = self.parse_const_int("input channel")
            self.expect(")")
            self.expect(";")
            return Read(target, channel, read_tok.line, read_tok.col)
        value = self.parse_expr()
        self.expect(";")
        return Assign(target, op_tok.kind, value, target.line, target.col)

    def parse_lvalue(self) -> Var:
        name_tok = self.expect("id")
        subs: list[Expr] = []
        while self.peek().kind == "[":
            self.next()
            subs.append(self.parse_expr())
            self.expect("]")
        return Var(name_tok.text, tuple(subs), name_tok.line, name_tok.col)

    def parse_assume_cond(self) -> Expr:
        left = self.parse_expr()
        tok = self.peek()
        if tok.kind in ("<", "<=", ">", ">=", "=="):
            self.next()
            right = self.parse_expr()
            return Cmp(tok.kind, left, right)
        return left

    def parse_expr(self) -> Expr:
        expr = self.parse_term()
        while self.peek().kind in ("+", "-"):
            op = self.next().kind
            expr = Bin(op, expr, self.parse_term())
        return expr

    def parse_term(self) -> Expr:
        expr = self.parse_factor()
        while self.peek().kind == "*":
            self.next()
            expr = Bin("*", expr, self.parse_factor())
        return expr

    def parse_factor(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.next()
            return Num(float(tok.text), tok.line, tok.col)
        if tok.kind == "-":
            self.next()
            return Neg(self.parse_factor())
        if tok.kind == "(":
            self.next()
            expr = self.parse_expr()
            self.expect(")")
            return expr
        if tok.kind == "id":
            if self.peek(1).kind == "(":
                self.next()
                self.next()
                arg = self.parse_expr()
                self.expect(")")
                return Call(tok.text, arg, tok.line, tok.col)
            return self.parse_lvalue()
        if tok.kind == "read":
            self.fail("read(...) may only appear alone on the right-hand side", tok)
        self.fail(f"unexpected token {tok.text!r}", tok)
        raise AssertionError  # unreachable


# ---------------------------------------------------------------------------
# Semantic checks
# ---------------------------------------------------------------------------


def _walk_exprs(expr: Expr) -> Iterable[Expr]:
    yield expr
    if isinstance(expr, Var):
        for s in expr.subs:
            yield from _walk_exprs(s)
    elif isinstance(expr, (Bin, Cmp)):
        yield from _walk_exprs(expr.left)
        yield from _walk_exprs(expr.right)
    elif isinstance(expr, Neg):
        yield from _walk_exprs(expr.operand)
    elif isinstance(expr, Call):
        yield from _walk_exprs(expr.arg)


def walk_stmts(stmts: Iterable[Stmt]) -> Iterable[Stmt]:
    """Yield statements in source order, descending into loop bodies."""
    for s in stmts:
        yield s
        if isinstance(s, (For, WhileTrue)):
            yield from walk_stmts(s.body)


def _stmt_exprs(stmt: Stmt) -> Iterable[Expr]:
    if isinstance(stmt, Assign):
        yield stmt.target
        yield stmt.value
    elif isinstance(stmt, Read):
        yield stmt.target
    elif isinstance(stmt, Write):
        yield stmt.value
    elif isinstance(stmt, Assume):
        yield stmt.cond


def _check_semantics(prog: SourceProgram):
    known = {d.name: d for d in prog.decls}
    sector = set(prog.nonlins) | BUILTIN_SECTOR
    all_stmts = list(walk_stmts(prog.pre))
    if prog.loop is not None:
        all_stmts.append(prog.loop)
        all_stmts.extend(walk_stmts(prog.loop.body))
    index_scope: set[str] = set()

    def err(msg, node):
        raise ParseError(msg, getattr(node, "line", 0), getattr(node, "col", 0), prog.path)

    def check_expr(expr: Expr, for_scope: set[str]):
        calls = 0
        for sub in _walk_exprs(expr):
            if isinstance(sub, Var):
                decl = known.get(sub.name)
                if decl is None:
                    if sub.name in sector:
                        err(f"sector function {sub.name!r} used as a variable", sub)
                    err(f"undeclared identifier {sub.name!r}", sub)
                if len(sub.subs) != len(decl.dims):
                    err(f"{sub.name!r} has {len(decl.dims)} dimension(s), "
                        f"used with {len(sub.subs)} subscript(s)", sub)
            elif isinstance(sub, Call):
                if sub.func not in sector:
                    err(f"call to {sub.func!r}: only declared sector functions "
                        "and sin() may be called", sub)
                calls += 1
        if calls > 1:
            err("at most one sector-function application per statement", expr)

    def check_stmt(stmt: Stmt, for_scope: set[str]):
        if isinstance(stmt, For):
            decl = known.get(stmt.var)
            if decl is None:
                err(f"undeclared loop index {stmt.var!r}", stmt)
            if not decl.is_int or decl.dims:
                err(f"loop index {stmt.var!r} must be a scalar int", stmt)
            inner = for_scope | {stmt.var}
            for s in stmt.body:
                check_stmt(s, inner)
            return
        if isinstance(stmt, WhileTrue):
            for s in stmt.body:
                check_stmt(s, for_scope)
            return
        for expr in _stmt_exprs(stmt):
            check_expr(expr, for_scope)
        if isinstance(stmt, (Assign, Read)):
            decl = known.get(stmt.target.name)
            if decl is not None and decl.name in prog.nonlins:
                err(f"cannot assign to sector function {decl.name!r}", stmt)

    for stmt in prog.pre:
        check_stmt(stmt, index_scope)
    if prog.loop is not None:
        check_stmt(prog.loop, index_scope)


def parse(text: str, path: str = "<source>") -> SourceProgram:
    """Parse controller source text into a checked AST."""
    tokens = tokenize(text, path)
    prog = _Parser(tokens, path).parse_program()
    prog = SourceProgram(prog.decls, prog.nonlins, prog.pre, prog.loop,
                         path=path, source_hash=token_signature(text, path))
    _check_semantics(prog)
    return prog


def parse_file(path: str) -> SourceProgram:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read(), path)


# ---------------------------------------------------------------------------
# Pretty printer
# ---------------------------------------------------------------------------


def _fmt_num(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _fmt_expr(expr: Expr, prec: int = 0) -> str:
    if isinstance(expr, Num):
        s = _fmt_num(expr.value)
        return f"({s})" if expr.value < 0 and prec >= 2 else s
    if isinstance(expr, Var):
        return expr.name + "".join(f"[{_fmt_expr(s)}]" for s in expr.subs)
    if isinstance(expr, Call):
        return f"{expr.func}({_fmt_expr(expr.arg)})"
    if isinstance(expr, Neg):
        inner = _fmt_expr(expr.operand, 3)
        return f"(-{inner})" if prec >= 2 else f"-{inner}"
    if isinstance(expr, Bin):
        mine = 2 if expr.op == "*" else 1
        left = _fmt_expr(expr.left, mine)
        right = _fmt_expr(expr.right, mine + 1)
        s = f"{left} {expr.op} {right}"
        return f"({s})" if mine < prec else s
    if isinstance(expr, Cmp):
        return f"{_fmt_expr(expr.left)} {expr.op} {_fmt_expr(expr.right)}"
    raise TypeError(f"unknown expression {expr!r}")


def _fmt_init(init, dims: tuple[int, ...]) -> str:
    if not dims:
        return _fmt_num(init)
    return "{ " + ", ".join(_fmt_init(item, dims[1:]) for item in init) + " }"


def _fmt_stmt(stmt: Stmt, indent: int) -> list[str]:
    pad = "  " * indent
    if isinstance(stmt, Assign):
        return [f"{pad}{_fmt_expr(stmt.target)} {stmt.op} {_fmt_expr(stmt.value)};"]
    if isinstance(stmt, Read):
        return [f"{pad}{_fmt_expr(stmt.target)} = read({stmt.channel});"]
    if isinstance(stmt, Write):
        return [f"{pad}write({_fmt_expr(stmt.value)});"]
    if isinstance(stmt, Assume):
        return [f"{pad}assume({_fmt_expr(stmt.cond)});"]
    if isinstance(stmt, For):
        head = f"{pad}for({stmt.var}={stmt.lo};{stmt.var}<{stmt.hi};{stmt.var}++) {{"
        lines = [head]
        for s in stmt.body:
            lines.extend(_fmt_stmt(s, indent + 1))
        lines.append(f"{pad}}}")
        return lines
    if isinstance(stmt, WhileTrue):
        lines = [f"{pad}while(1) {{"]
        for s in stmt.body:
            lines.extend(_fmt_stmt(s, indent + 1))
        lines.append(f"{pad}}}")
        return lines
    raise TypeError(f"unknown statement {stmt!r}")


def pretty(prog: SourceProgram) -> str:
    """Render an AST back to canonical source text (reparses to an equal AST)."""
    lines: list[str] = []
    if prog.nonlins:
        lines.append("nonlin " + ", ".join(prog.nonlins) + ";")
    for d in prog.decls:
        ty = "int" if d.is_int else "double"
        dims = "".join(f"[{n}]" for n in d.dims)
        init = f" = {_fmt_init(d.init, d.dims)}" if d.init is not None else ""
        lines.append(f"{ty} {d.name}{dims}{init};")
    lines.append("")
    for stmt in prog.pre:
        lines.extend(_fmt_stmt(stmt, 0))
    if prog.loop is not None:
        lines.extend(_fmt_stmt(prog.loop, 0))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Control-flow graph
# ---------------------------------------------------------------------------


@dataclass
class Node:
    nid: int
    stmt: Optional[Stmt]
    succs: tuple[int, ...]
    origin: int = -1
    kind: str = "stmt"  # "entry" | "exit" | "stmt"

    @property
    def location(self) -> str:
        if self.stmt is None:
            return self.kind
        return f"{getattr(self.stmt, 'line', 0)}:{getattr(self.stmt, 'col', 0)}"


@dataclass
class Cfg:
    nodes: list[Node]
    entry: int
    exit: int
    loop_head: Optional[int]
    pre_ids: tuple[int, ...]
    body_ids: tuple[int, ...]
    program: SourceProgram

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def preds(self, nid: int) -> list[int]:
        return [n.nid for n in self.nodes if nid in n.succs]

    @property
    def is_unrolled(self) -> bool:
        return not any(isinstance(n.stmt, For) for n in self.nodes)


def build_cfg(prog: SourceProgram) -> Cfg:
    """Build the CFG: entry, pre-loop chain, loop-body cycle, exit.

    `for` statements stay compound (one node each); `unroll_loops` flattens them.
    """
    nodes: list[Node] = [Node(0, None, (), -1, "entry")]

    def add(stmt: Stmt) -> int:
        nid = len(nodes)
        nodes.append(Node(nid, stmt, (), nid))
        return nid

    pre_ids = tuple(add(s) for s in prog.pre)
    body_ids = tuple(add(s) for s in (prog.loop.body if prog.loop else ()))
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
        nodes[body_ids[-1]].succs = (loop_head,)  # back edge
    else:
        nodes[tail].succs = (exit_id,)
    return Cfg(nodes, 0, exit_id, loop_head, pre_ids, body_ids, prog)


# ---------------------------------------------------------------------------
# Loop unrolling
# ---------------------------------------------------------------------------


def _eval_index(expr: Expr, env: dict[str, int], path: str) -> int:
    if isinstance(expr, Num):
        if expr.value != int(expr.value):
            raise AnalysisError("non-integer subscript", expr.line, expr.col, path)
        return int(expr.value)
    if isinstance(expr, Var):
        if expr.subs or expr.name not in env:
            raise AnalysisError(f"subscript {expr.name!r} is not a constant index",
                                expr.line, expr.col, path)
        return env[expr.name]
    if isinstance(expr, Neg):
        return -_eval_index(expr.operand, env, path)
    if isinstance(expr, Bin):
        left = _eval_index(expr.left, env, path)
        right = _eval_index(expr.right, env, path)
        return {"+": left + right, "-": left - right, "*": left * right}[expr.op]
    raise AnalysisError("unsupported subscript expression", 0, 0, path)


def _subst_expr(expr: Expr, env: dict[str, int], path: str) -> Expr:
    if isinstance(expr, Num):
        return expr
    if isinstance(expr, Var):
        if not expr.subs and expr.name in env:
            return Num(float(env[expr.name]), expr.line, expr.col)
        subs = tuple(Num(float(_eval_index(s, env, path)), expr.line, expr.col)
                     for s in expr.subs)
        return Var(expr.name, subs, expr.line, expr.col)
    if isinstance(expr, Bin):
        return Bin(expr.op, _subst_expr(expr.left, env, path),
                   _subst_expr(expr.right, env, path))
    if isinstance(expr, Neg):
        return Neg(_subst_expr(expr.operand, env, path))
    if isinstance(expr, Call):
        return Call(expr.func, _subst_expr(expr.arg, env, path), expr.line, expr.col)
    if isinstance(expr, Cmp):
        return Cmp(expr.op, _subst_expr(expr.left, env, path),
                   _subst_expr(expr.right, env, path))
    raise TypeError(f"unknown expression {expr!r}")


def _expand_stmt(stmt: Stmt, env: dict[str, int], out: list[Stmt], path: str,
                 budget: list[int]):
    budget[0] += 1
    if budget[0] > UNROLL_GUARD:
        raise ConfigError(f"loop unrolling exceeds {UNROLL_GUARD} statements")
    if isinstance(stmt, For):
        budget[0] -= 1  # the for node itself emits nothing
        for value in range(stmt.lo, stmt.hi):
            inner = dict(env)
            inner[stmt.var] = value
            for s in stmt.body:
                _expand_stmt(s, inner, out, path, budget)
        return
    if isinstance(stmt, Assign):
        out.append(Assign(_subst_expr(stmt.target, env, path), stmt.op,
                          _subst_expr(stmt.value, env, path), stmt.line, stmt.col))
    elif isinstance(stmt, Read):
        out.append(Read(_subst_expr(stmt.target, env, path), stmt.channel,
                        stmt.line, stmt.col))
    elif isinstance(stmt, Write):
        out.append(Write(_subst_expr(stmt.value, env, path), stmt.line, stmt.col))
    elif isinstance(stmt, Assume):
        out.append(Assume(_subst_expr(stmt.cond, env, path), stmt.line, stmt.col))
    else:
        raise AnalysisError("nested while loops are not supported",
                            getattr(stmt, "line", 0), getattr(stmt, "col", 0), path)


def unroll_loops(cfg: Cfg) -> Cfg:
    """Expand every `for` node into elementary statements with concrete subscripts.

    Node `origin` points back at the pre-unroll node id, so per-range renaming
    computed on the compact CFG carries over.
    """
    prog = cfg.program
    path = prog.path
    budget = [0]
    nodes: list[Node] = [Node(0, None, (), -1, "entry")]
    origins: list[int] = [-1]

    def emit(src_nid: int, stmts: list[Stmt]) -> list[int]:
        ids = []
        for s in stmts:
            nid = len(nodes)
            nodes.append(Node(nid, s, (), src_nid))
            ids.append(nid)
        return ids

    pre_ids: list[int] = []
    for nid in cfg.pre_ids:
        out: list[Stmt] = []
        _expand_stmt(cfg.node(nid).stmt, {}, out, path, budget)
        pre_ids.extend(emit(nid, out))
    body_ids: list[int] = []
    for nid in cfg.body_ids:
        out = []
        _expand_stmt(cfg.node(nid).stmt, {}, out, path, budget)
        body_ids.extend(emit(nid, out))

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
    return Cfg(nodes, 0, exit_id, loop_head, tuple(pre_ids), tuple(body_ids), prog)


# ---------------------------------------------------------------------------
# Cells and the reference interpreter
# ---------------------------------------------------------------------------


def cell_name(base: str, subs: tuple[int, ...]) -> str:
    return base + "".join(f"[{i}]" for i in subs)


def decl_cells(decl: Decl) -> list[str]:
    cells = [()]
    for dim in decl.dims:
        cells = [(*c, i) for c in cells for i in range(dim)]
    return [cell_name(decl.name, c) for c in cells]


def _flatten_init(init, dims: tuple[int, ...]) -> list[float]:
    if not dims:
        return [float(init)]
    values: list[float] = []
    for item in init:
        values.extend(_flatten_init(item, dims[1:]))
    return values


def init_store(prog: SourceProgram) -> dict[str, float]:
    """Cell store from declarations alone; missing initializers default to 0."""
    store: dict[str, float] = {}
    for d in prog.decls:
        cells = decl_cells(d)
        values = _flatten_init(d.init, d.dims) if d.init is not None else [0.0] * len(cells)
        store.update(zip(cells, values))
    return store


def default_sector_impls(prog: SourceProgram) -> dict[str, Callable[[float], float]]:
    impls = {"sin": math.sin}
    for name in prog.nonlins:
        impls[name] = math.sin
    return impls


class Interpreter:
    """Concrete execution of statements over a flat cell store.

    Used by property tests (semantic preservation of unrolling/renaming) and
    to evaluate the loop-entry state; the high-throughput simulator is
    generated separately.
    """

    def __init__(self, prog: SourceProgram,
                 inputs: Optional[Callable[[int], float]] = None,
                 sector_impls: Optional[dict[str, Callable[[float], float]]] = None,
                 store: Optional[dict[str, float]] = None):
        self.prog = prog
        self.inputs = inputs
        self.sector = sector_impls or default_sector_impls(prog)
        self.store = dict(store) if store is not None else init_store(prog)
        self.index_env: dict[str, int] = {}
        self.outputs: list[float] = []

    def eval(self, expr: Expr) -> float:
        if isinstance(expr, Num):
            return expr.value
        if isinstance(expr, Var):
            if not expr.subs and expr.name in self.index_env:
                return float(self.index_env[expr.name])
            return self.store[self._cell(expr)]
        if isinstance(expr, Bin):
            left = self.eval(expr.left)
            right = self.eval(expr.right)
            return {"+": left + right, "-": left - right, "*": left * right}[expr.op]
        if isinstance(expr, Neg):
            return -self.eval(expr.operand)
        if isinstance(expr, Call):
            return self.sector[expr.func](self.eval(expr.arg))
        raise TypeError(f"cannot evaluate {expr!r}")

    def _cell(self, var: Var) -> str:
        subs = tuple(_eval_index(s, self.index_env, self.prog.path) for s in var.subs)
        return cell_name(var.name, subs)

    def run(self, stmts: Iterable[Stmt]):
        for stmt in stmts:
            self.run_stmt(stmt)

    def run_stmt(self, stmt: Stmt):
        if isinstance(stmt, Assign):
            cell = self._cell(stmt.target)
            value = self.eval(stmt.value)
            if stmt.op == "+=":
                value = self.store[cell] + value
            elif stmt.op == "-=":
                value = self.store[cell] - value
            target_decl = self.prog.decl(stmt.target.name)
            if target_decl is not None and target_decl.is_int and not stmt.target.subs:
                self.index_env[stmt.target.name] = int(value)
            else:
                self.store[cell] = value
        elif isinstance(stmt, Read):
            if self.inputs is None:
                raise AnalysisError("read() outside the analysis loop is not supported",
                                    stmt.line, stmt.col, self.prog.path)
            self.store[self._cell(stmt.target)] = self.inputs(stmt.channel)
        elif isinstance(stmt, Write):
            self.outputs.append(self.eval(stmt.value))
        elif isinstance(stmt, Assume):
            pass  # assertions carry no concrete effect
        elif isinstance(stmt, For):
            for value in range(stmt.lo, stmt.hi):
                self.index_env[stmt.var] = value
                self.run(stmt.body)
        elif isinstance(stmt, WhileTrue):
            raise AnalysisError("cannot concretely execute an infinite loop",
                                stmt.line, stmt.col, self.prog.path)
        else:
            raise TypeError(f"unknown statement {stmt!r}")

    def run_iteration(self):
        """Execute one pass of the main loop body."""
        if self.prog.loop is None:
            raise AnalysisError("program has no while(1) loop", 0, 0, self.prog.path)
        self.run(self.prog.loop.body)


def loop_entry_store(prog: SourceProgram) -> dict[str, float]:
    """Concrete cell values at first loop entry: initializers plus pre-loop code."""
    interp = Interpreter(prog)
    interp.run(prog.pre)
    return interp.store
