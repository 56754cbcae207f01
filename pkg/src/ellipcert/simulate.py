"""Empirical cross-validation: run the concrete controller for many
iterations and track the Lyapunov level x' P^-1 x against the certified
loop-head invariant.

The loop body is compiled to straight-line Python once per run, so million-
step trajectories stay cheap. Input policies:

  uniform          inputs drawn uniformly from [-U, U] (PCG64, seeded)
  extremal         inputs pinned at +U
  adversarial-sign per read, greedily pick the sign maximizing the next level

Declared `nonlin` functions are simulated as sin (the canonical sector
function); `sin` is itself.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import certificate as ct
from . import frontend as fe
from . import roles as rl
from . import semantics as sem
from .config import AnalysisConfig
from .errors import AnalysisError, ConfigError, EllipcertError

POLICIES = ("uniform", "extremal", "adversarial-sign")
LEVEL_SLACK = 1e-6
STEP_BUDGET = 10 ** 9


@dataclass
class SimulationReport:
    policy: str
    steps: int
    trials: int
    seed: int
    max_level: float
    within_invariant: bool
    per_trial: list[float] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {
            "policy": self.policy,
            "steps": self.steps,
            "trials": self.trials,
            "seed": self.seed,
            "maxLevel": self.max_level,
            "withinInvariant": self.within_invariant,
            "perTrial": self.per_trial,
        }


class _CodeGen:
    """Compile the unrolled loop body to a straight-line Python step loop."""

    def __init__(self, compiled: sem.Compiled, P: np.ndarray,
                 bounds: dict[int, float]):
        self.compiled = compiled
        self.bounds = bounds
        self.roles = compiled.rolemap
        self.params = dict(compiled.param_values)
        self.head = list(compiled.summary.layout)
        self.cells: dict[str, str] = {c: f"v{i}" for i, c in enumerate(self.head)}
        self.funcs: dict[str, str] = {}
        self.globals: dict[str, object] = {"math": math}
        self.reads: list[float] = []  # bound per read site, in body order
        self.body_lines: list[str] = []
        self.Pinv = np.linalg.inv(P) if P.shape[0] else P
        self._build_body()

    # -- helpers

    def var_of(self, cell: str) -> str:
        if cell not in self.cells:
            self.cells[cell] = f"v{len(self.cells)}"
        return self.cells[cell]

    def is_state(self, base: str) -> bool:
        role = self.roles.roles.get(base)
        if role is None:
            return bool(re.fullmatch(r"[yu]_v\d+", base))
        return role == rl.STATE

    def fn_of(self, name: str) -> str:
        if name not in self.funcs:
            alias = f"_fn{len(self.funcs)}"
            self.funcs[name] = alias
            self.globals[alias] = math.sin  # sector functions simulate as sin
        return self.funcs[name]

    def cell_of(self, var: fe.Var) -> str:
        subs = tuple(int(s.value) for s in var.subs)  # concrete after unrolling
        return fe.cell_name(var.name, subs)

    def expr_src(self, expr: fe.Expr) -> str:
        if isinstance(expr, fe.Num):
            return repr(expr.value)
        if isinstance(expr, fe.Var):
            cell = self.cell_of(expr)
            if self.is_state(expr.name):
                return self.var_of(cell)
            return repr(self.params.get(cell, 0.0))
        if isinstance(expr, fe.Bin):
            return f"({self.expr_src(expr.left)} {expr.op} {self.expr_src(expr.right)})"
        if isinstance(expr, fe.Neg):
            return f"(-{self.expr_src(expr.operand)})"
        if isinstance(expr, fe.Call):
            return f"{self.fn_of(expr.func)}({self.expr_src(expr.arg)})"
        raise AnalysisError(f"cannot simulate expression {expr!r}")

    # -- body construction

    def _build_body(self):
        interp_params = sem.Compiler(self.compiled.program, self.roles,
                                     self.compiled.rename_info, AnalysisConfig(),
                                     self.params)
        for nid in self.compiled.unrolled.body_ids:
            stmt = self.compiled.unrolled.node(nid).stmt
            if isinstance(stmt, (fe.Write, fe.Assume)):
                continue
            if isinstance(stmt, fe.Read):
                cell = self.cell_of(stmt.target)
                bound = self.bounds.get(stmt.channel, 1.0)
                k = len(self.reads)
                self.reads.append(bound)
                self.body_lines.append((self.var_of(cell), f"__READ{k}__"))
                continue
            if isinstance(stmt, fe.Assign):
                base = stmt.target.name
                if not self.is_state(base):
                    if self.roles.roles.get(base) == rl.PARAMETER:
                        interp_params.interpret_param_assign(stmt)
                        self.params = interp_params.params
                    continue
                cell = self.cell_of(stmt.target)
                rhs = self.expr_src(stmt.value)
                target = self.var_of(cell)
                if stmt.op == "+=":
                    rhs = f"{target} + {rhs}"
                elif stmt.op == "-=":
                    rhs = f"{target} - {rhs}"
                self.body_lines.append((target, rhs))
                continue
            raise AnalysisError(f"cannot simulate statement {stmt!r}")

    def level_expr(self) -> str:
        if not self.head:
            return "0.0"
        terms = []
        for i, ci in enumerate(self.head):
            inner = " + ".join(f"{self.Pinv[i, j]!r}*{self.cells[cj]}"
                               for j, cj in enumerate(self.head))
            terms.append(f"{self.cells[ci]}*({inner})")
        return " + ".join(terms)

    def _emit_lines(self, input_exprs: list[str], indent: str) -> list[str]:
        out = []
        for target, rhs in self.body_lines:
            for k in range(len(self.reads)):
                rhs = rhs.replace(f"__READ{k}__", input_exprs[k])
            out.append(f"{indent}{target} = {rhs}")
        return out

    def build_runner(self, policy: str):
        """def _run(steps, state, ins) -> max level; `ins` is one list of
        pregenerated values per read site (uniform) or unused."""
        if policy == "uniform":
            inputs = [f"_ins[{k}][_t]" for k in range(len(self.reads))]
        else:  # extremal: pin at +bound
            inputs = [repr(b) for b in self.reads]
        head_vars = [self.cells[c] for c in self.head]
        others = [v for c, v in self.cells.items() if c not in self.head]
        lines = ["def _run(_steps, _state, _ins):"]
        if head_vars:
            lines.append(f"    ({', '.join(head_vars)},) = _state")
        for v in others:
            lines.append(f"    {v} = 0.0")
        lines.append(f"    _max = {self.level_expr()}")
        lines.append("    for _t in range(_steps):")
        lines.extend(self._emit_lines(inputs, "        "))
        lines.append(f"        _lvl = {self.level_expr()}")
        lines.append("        if _lvl > _max: _max = _lvl")
        lines.append("    return _max")
        return self._compile(lines, "_run")

    def build_body_fn(self):
        """def _body(state, ins) -> (next head state, level at the next head)."""
        inputs = [f"_ins[{k}]" for k in range(len(self.reads))]
        head_vars = [self.cells[c] for c in self.head]
        others = [v for c, v in self.cells.items() if c not in self.head]
        lines = ["def _body(_state, _ins):"]
        if head_vars:
            lines.append(f"    ({', '.join(head_vars)},) = _state")
        for v in others:
            lines.append(f"    {v} = 0.0")
        lines.extend(self._emit_lines(inputs, "    "))
        lines.append(f"    return ({', '.join(head_vars)}{',' if head_vars else ''}), "
                     f"{self.level_expr()}")
        return self._compile(lines, "_body")

    def _compile(self, lines: list[str], name: str):
        namespace = dict(self.globals)
        exec(compile("\n".join(lines), f"<ellipcert:{name}>", "exec"), namespace)
        return namespace[name]


def _adversarial_run(body, state0: tuple, reads: list[float], steps: int) -> float:
    """Greedy sign choice per read: maximize the level at the next loop head."""
    state = state0
    max_level = None
    nreads = len(reads)
    for _ in range(steps):
        if nreads == 0:
            state, lvl = body(state, ())
        else:
            chosen: list[float] = []
            for k in range(nreads):
                rest = [reads[j] for j in range(k + 1, nreads)]
                up = (*chosen, reads[k], *rest)
                down = (*chosen, -reads[k], *rest)
                _, lvl_up = body(state, up)
                _, lvl_down = body(state, down)
                chosen.append(reads[k] if lvl_up >= lvl_down else -reads[k])
            state, lvl = body(state, tuple(chosen))
        if max_level is None or lvl > max_level:
            max_level = lvl
    return max_level if max_level is not None else 0.0


def simulate(cert: ct.Certificate, prog: fe.SourceProgram, *,
             steps: int = 100_000, trials: int = 4, policy: str = "adversarial-sign",
             seed: int = 0, skip_replay: bool = False) -> SimulationReport:
    """Simulate `trials` runs of `steps` loop iterations from the declared
    initializer and report the maximum Lyapunov level observed.

    Refuses certificates that do not replay cleanly. Deterministic given the
    seed; the extremal and adversarial policies are input-deterministic, so
    their trials coincide and are computed once.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown input policy {policy!r}; choose from {POLICIES}")
    if steps < 0 or trials < 1:
        raise ConfigError("steps must be nonnegative and trials positive")
    if steps * trials > STEP_BUDGET:
        raise ConfigError(f"steps*trials exceeds the {STEP_BUDGET} budget")
    if not skip_replay:
        verdict = ct.replay(cert, prog)
        if not verdict.accepted:
            raise EllipcertError(
                f"refusing to simulate an unchecked certificate: {verdict.report()}")

    config = AnalysisConfig(inputs=dict(cert.inputs), margin=cert.margin_setting)
    compiled = sem.compile_program(prog, config)
    gen = _CodeGen(compiled, cert.loop_head, dict(cert.inputs))
    state0 = tuple(float(x) for x in compiled.init)

    levels: list[float] = []
    if policy == "adversarial-sign":
        body = gen.build_body_fn()
        # check the initial level too: the trajectory starts at the head
        init_level = gen.build_runner("extremal")(0, state0, ())
        lvl = max(init_level, _adversarial_run(body, state0, gen.reads, steps))
        levels = [lvl]
    elif policy == "extremal" or not gen.reads:
        run = gen.build_runner("extremal")
        levels = [run(steps, state0, ())]
    else:
        run = gen.build_runner("uniform")
        seqs = np.random.SeedSequence(seed).spawn(trials)
        for sub in seqs:
            rng = np.random.Generator(np.random.PCG64(sub))
            ins = tuple(rng.uniform(-b, b, steps).tolist() for b in gen.reads)
            levels.append(run(steps, state0, ins))

    max_level = max(levels) if levels else 0.0
    return SimulationReport(policy=policy, steps=steps, trials=trials, seed=seed,
                            max_level=float(max_level),
                            within_invariant=max_level <= 1.0 + LEVEL_SLACK,
                            per_trial=[float(x) for x in levels])
