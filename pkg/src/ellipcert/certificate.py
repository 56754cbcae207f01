"""Proof certificates: serialize the synthesized invariant with every rule
step, and independently re-check it by replaying the abstract execution at
the claimed fixpoint.

The checker never runs the parameter search: it recompiles the statement-to-
rule skeleton (purely syntax-directed), re-applies each rule formula to the
claimed precondition, and requires exact numeric agreement, a strict final
containment at the recorded margin, and the initial state inside the
loop-head ellipsoid. Every number in the certificate is either re-derived or
cross-checked, so any single-entry tampering is caught.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import ellipsoid as el
from . import frontend as fe
from . import semantics as sem
from .config import AnalysisConfig
from .errors import (AnalysisError, CertificateFormatError, EllipcertError,
                     InvalidParameter, NotInvertible)

SCHEMA = "ellipcert-v1"
TOLERANCE = 1e-9


@dataclass
class CertStep:
    location: str
    kind: str
    pre_layout: tuple[str, ...]
    post_layout: tuple[str, ...]
    post: np.ndarray
    matrix: Optional[np.ndarray] = None
    params: dict[str, float] = field(default_factory=dict)
    bound: Optional[float] = None


@dataclass
class Certificate:
    program_hash: str
    layout: tuple[str, ...]
    loop_head: np.ndarray
    margin: float
    margin_setting: Union[str, float]
    theta: dict[str, float]
    init: np.ndarray
    inputs: dict[int, float]
    steps: list[CertStep]
    tolerance: float = TOLERANCE
    tool_version: str = "0.1.0"


@dataclass
class Verdict:
    accepted: bool
    step: Optional[int] = None
    reason: str = ""
    witness: Optional[float] = None

    def report(self) -> str:
        if self.accepted:
            return "ACCEPTED: certificate replays cleanly"
        where = "" if self.step is None else f" at step {self.step}"
        witness = "" if self.witness is None else f" (witness {self.witness!r})"
        return f"REJECTED{where}: {self.reason}{witness}"


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def program_hash(prog: fe.SourceProgram) -> str:
    if prog.source_hash:
        return prog.source_hash
    return fe.token_signature(fe.pretty(prog))


def emit(result, compiled: sem.Compiled, config: AnalysisConfig) -> Certificate:
    """Build the replayable certificate from a proved synthesis result."""
    if not result.proved:
        raise EllipcertError("cannot emit a certificate for a failed synthesis")
    recorded = sem.apply_chain_recording(compiled.summary.rules, result.P, result.theta)
    steps = [CertStep(rule.location, rule.kind, rule.pre_layout, rule.post_layout,
                      post, rule.matrix,
                      {k: float(v) for k, v in rule.params.items()
                       if isinstance(v, (int, float))},
                      rule.bound)
             for rule, post in recorded]
    inputs = {}
    for node in compiled.unrolled.nodes:
        if isinstance(node.stmt, fe.Read):
            inputs[node.stmt.channel] = config.channel_bound(node.stmt.channel)
    return Certificate(
        program_hash=program_hash(compiled.program),
        layout=compiled.summary.layout,
        loop_head=np.array(result.P, dtype=float),
        margin=float(result.margin),
        margin_setting=config.margin,
        theta={k: float(v) for k, v in result.theta.items()},
        init=np.array(compiled.init, dtype=float),
        inputs=inputs,
        steps=steps,
    )


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def _matrix_to_json(M: Optional[np.ndarray]):
    if M is None:
        return None
    return [[float(x) for x in row] for row in np.atleast_2d(M)]


def to_jsonable(cert: Certificate) -> dict:
    data = {
        "schema": SCHEMA,
        "toolVersion": cert.tool_version,
        "programHash": cert.program_hash,
        "layout": list(cert.layout),
        "loopHead": _matrix_to_json(cert.loop_head),
        "margin": cert.margin,
        "marginSetting": cert.margin_setting,
        "theta": cert.theta,
        "init": [float(x) for x in cert.init],
        "inputs": {str(k): float(v) for k, v in sorted(cert.inputs.items())},
        "tolerance": cert.tolerance,
        "steps": [],
    }
    for step in cert.steps:
        entry = {
            "location": step.location,
            "kind": step.kind,
            "preLayout": list(step.pre_layout),
            "postLayout": list(step.post_layout),
            "params": step.params,
            "post": _matrix_to_json(step.post),
        }
        if step.matrix is not None:
            entry["matrix"] = _matrix_to_json(step.matrix)
        if step.bound is not None:
            entry["bound"] = step.bound
        data["steps"].append(entry)
    return data


def dumps(cert: Certificate) -> str:
    return json.dumps(to_jsonable(cert), indent=2)


def save(cert: Certificate, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cert))
        fh.write("\n")


def _require(cond: bool, message: str):
    if not cond:
        raise CertificateFormatError(message)


def _parse_matrix(data, what: str, rows: int, cols: int) -> np.ndarray:
    _require(isinstance(data, list) and len(data) == rows, f"{what}: expected {rows} rows")
    out = np.zeros((rows, cols))
    for i, row in enumerate(data):
        _require(isinstance(row, list) and len(row) == cols,
                 f"{what}: row {i} should have {cols} entries")
        for j, x in enumerate(row):
            _require(isinstance(x, (int, float)) and math.isfinite(x),
                     f"{what}: entry ({i},{j}) is not a finite number")
            out[i, j] = float(x)
    return out


def loads(text: str) -> Certificate:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CertificateFormatError(f"invalid JSON: {exc}") from exc
    _require(isinstance(data, dict), "certificate must be a JSON object")
    _require(data.get("schema") == SCHEMA,
             f"unsupported schema {data.get('schema')!r}, expected {SCHEMA!r}")
    for key in ("programHash", "layout", "loopHead", "margin", "theta", "init",
                "steps", "tolerance", "marginSetting", "inputs"):
        _require(key in data, f"missing field {key!r}")
    layout = tuple(data["layout"])
    n = len(layout)
    loop_head = _parse_matrix(data["loopHead"], "loopHead", n, n)
    _require(isinstance(data["init"], list) and len(data["init"]) == n,
             "init length does not match layout")
    init = np.array([float(x) for x in data["init"]], dtype=float)
    margin_setting = data["marginSetting"]
    _require(margin_setting == "auto" or isinstance(margin_setting, (int, float)),
             "marginSetting must be 'auto' or a number")
    inputs = {}
    for key, value in data["inputs"].items():
        try:
            inputs[int(key)] = float(value)
        except (TypeError, ValueError) as exc:
            raise CertificateFormatError(f"bad input bound for channel {key!r}") from exc
    steps = []
    for idx, entry in enumerate(data["steps"]):
        _require(isinstance(entry, dict), f"step {idx} must be an object")
        for key in ("location", "kind", "preLayout", "postLayout", "params", "post"):
            _require(key in entry, f"step {idx}: missing {key!r}")
        pre = tuple(entry["preLayout"])
        post_layout = tuple(entry["postLayout"])
        post = _parse_matrix(entry["post"], f"step {idx} post",
                             len(post_layout), len(post_layout))
        matrix = None
        if "matrix" in entry:
            raw = entry["matrix"]
            _require(isinstance(raw, list) and raw, f"step {idx}: bad matrix")
            matrix = _parse_matrix(raw, f"step {idx} matrix", len(raw), len(pre))
        params = {str(k): float(v) for k, v in entry["params"].items()}
        bound = float(entry["bound"]) if "bound" in entry else None
        steps.append(CertStep(str(entry["location"]), str(entry["kind"]), pre,
                              post_layout, post, matrix, params, bound))
    return Certificate(
        program_hash=str(data["programHash"]),
        layout=layout,
        loop_head=loop_head,
        margin=float(data["margin"]),
        margin_setting=margin_setting,
        theta={str(k): float(v) for k, v in data["theta"].items()},
        init=init,
        inputs=inputs,
        steps=steps,
        tolerance=float(data["tolerance"]),
        tool_version=str(data.get("toolVersion", "")),
    )


def load(path: str) -> Certificate:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def _close(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    if a.shape != b.shape:
        return False
    scale = max(el.maxabs(a), el.maxabs(b), 1.0)
    return bool(np.max(np.abs(a - b)) <= tol * scale) if a.size else True


def _scalar_close(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(abs(a), abs(b), 1.0)


def replay(cert: Certificate, prog: fe.SourceProgram) -> Verdict:
    """Re-check a certificate against exact source, without any search.

    Recompiles the syntax-directed rule skeleton, replays every rule formula
    from the claimed preconditions, and checks the fixpoint containment and
    the initial state. No iteration happens: the certificate claims a
    fixpoint, so one pass settles it.
    """
    if cert.program_hash != program_hash(prog):
        return Verdict(False, None, "program hash mismatch: certificate is bound "
                                    "to a different source")
    if cert.tolerance != TOLERANCE:
        return Verdict(False, None, f"unsupported tolerance {cert.tolerance!r}")
    tol = cert.tolerance

    config = AnalysisConfig(inputs=dict(cert.inputs), margin=cert.margin_setting)
    try:
        compiled = sem.compile_program(prog, config)
    except EllipcertError as exc:
        return Verdict(False, None, f"program does not compile: {exc}")
    summary = compiled.summary

    if tuple(cert.layout) != summary.layout:
        return Verdict(False, None, "loop-head layout mismatch")
    if len(cert.steps) != len(summary.rules):
        return Verdict(False, None, f"certificate has {len(cert.steps)} steps, "
                                    f"program compiles to {len(summary.rules)}")
    expected_theta = {spec.name for spec in summary.theta}
    if set(cert.theta) != expected_theta:
        return Verdict(False, None, "theta parameters do not match the compiled chain")

    expected_margin = _expected_margin(cert, summary.state_dim)
    if expected_margin is None or not _scalar_close(cert.margin, expected_margin, tol):
        return Verdict(False, None, "recorded margin does not match its setting")

    init_expected = sem.initial_state_vector(prog, summary.layout, compiled.rename_info)
    if not _close(cert.init, init_expected, tol):
        return Verdict(False, None, "recorded initial state does not match the program")

    theta_kinds = {spec.name: spec.kind for spec in summary.theta}
    try:
        head = el.Ellipsoid(el.REVERSE, cert.loop_head, cert.layout)
    except (ValueError, el.DimensionMismatch) as exc:
        return Verdict(False, None, f"loop-head matrix invalid: {exc}",
                       el.min_eig(0.5 * (cert.loop_head + cert.loop_head.T)))

    M = head.mat
    for idx, (step, rule) in enumerate(zip(cert.steps, summary.rules)):
        verdict = _check_step_structure(idx, step, rule, tol)
        if verdict is not None:
            return verdict
        verdict = _check_step_params(idx, step, rule, cert.theta, theta_kinds, M, tol)
        if verdict is not None:
            return verdict
        params: dict = dict(step.params)
        if "cell" in rule.params:
            params["cell"] = rule.params["cell"]
        try:
            recomputed, _ = sem.apply_rule(
                sem.RuleInstance(step.kind, step.location, step.pre_layout,
                                 step.post_layout, step.matrix,
                                 params, step.bound), M)
        except (InvalidParameter, NotInvertible, el.DimensionMismatch, ValueError) as exc:
            return Verdict(False, idx, f"rule does not apply: {exc}")
        if not _close(recomputed, step.post, tol):
            return Verdict(False, idx, "claimed post matrix does not match the "
                                       "recomputed rule output",
                           float(np.max(np.abs(recomputed - step.post))))
        if not el.is_psd(step.post, tol):
            return Verdict(False, idx, "claimed post matrix is not PSD",
                           el.min_eig(step.post))
        M = step.post

    if cert.steps and cert.steps[-1].post_layout != cert.layout:
        return Verdict(False, len(cert.steps) - 1,
                       "final step does not restore the loop-head layout")
    if not el.loewner_leq(M, cert.loop_head, cert.margin, tol):
        gap = el.min_eig(cert.loop_head - M - cert.margin * np.eye(len(cert.layout)))
        return Verdict(False, None, "loop-end matrix is not strictly inside the "
                                    "loop-head invariant at the recorded margin", gap)
    if not el.membership(cert.init, head, tol):
        return Verdict(False, None, "initial state lies outside the invariant")
    return Verdict(True)


def _expected_margin(cert: Certificate, n: int) -> Optional[float]:
    if cert.margin_setting == "auto":
        return 1e-6 * float(np.trace(cert.loop_head)) / n if n else 0.0
    try:
        return float(cert.margin_setting)
    except (TypeError, ValueError):
        return None


def _check_step_structure(idx: int, step: CertStep, rule: sem.RuleInstance,
                          tol: float) -> Optional[Verdict]:
    if step.kind != rule.kind:
        return Verdict(False, idx, f"step kind {step.kind!r} does not match the "
                                   f"compiled rule {rule.kind!r}")
    if step.location != rule.location:
        return Verdict(False, idx, "step location does not match the program")
    if step.pre_layout != rule.pre_layout or step.post_layout != rule.post_layout:
        return Verdict(False, idx, "step layouts do not match the compiled rule")
    if (step.matrix is None) != (rule.matrix is None):
        return Verdict(False, idx, "step matrix presence does not match the rule")
    if step.matrix is not None and not _close(step.matrix, rule.matrix, tol):
        return Verdict(False, idx, "step matrix does not match the program's "
                                   "coefficients")
    if (step.bound is None) != (rule.bound is None):
        return Verdict(False, idx, "step bound presence does not match the rule")
    if step.bound is not None and not _scalar_close(step.bound, rule.bound, tol):
        return Verdict(False, idx, "step input bound does not match the analysis "
                                   "configuration")
    return None


def _check_step_params(idx: int, step: CertStep, rule: sem.RuleInstance,
                       theta: dict[str, float], theta_kinds: dict[str, str],
                       M_pre: np.ndarray, tol: float) -> Optional[Verdict]:
    for key, template in rule.params.items():
        if key == "cell":
            continue
        if key not in step.params:
            return Verdict(False, idx, f"step is missing parameter {key!r}")
        value = step.params[key]
        if isinstance(template, str):
            kind = theta_kinds.get(template)
            if kind is None or template not in theta:
                return Verdict(False, idx, f"unknown theta reference {template!r}")
            if kind == "lambda":
                expected = theta[template]
            else:  # ratio kinds scale with the incoming matrix
                expected = theta[template] * el.spectral_norm_scale(M_pre)
            if not _scalar_close(value, expected, tol):
                return Verdict(False, idx, f"parameter {key!r} is inconsistent "
                                           f"with theta", value - expected)
        else:
            if not _scalar_close(value, float(template), tol):
                return Verdict(False, idx, f"parameter {key!r} does not match the "
                                           f"compiled rule", value - float(template))
    extra = set(step.params) - {k for k in rule.params if k != "cell"}
    if extra:
        return Verdict(False, idx, f"unexpected parameters {sorted(extra)}")
    return None


# ---------------------------------------------------------------------------
# File-level verification
# ---------------------------------------------------------------------------


def verify_file(cert_path: str, src_path: str, out=None) -> int:
    """Check a certificate file against a source file.

    Exit status: 0 accepted, 1 rejected, 2 I/O or format trouble.
    """
    import sys
    out = out or sys.stdout
    try:
        cert = load(cert_path)
        prog = fe.parse_file(src_path)
    except (OSError, CertificateFormatError, AnalysisError, EllipcertError) as exc:
        print(f"error: {exc}", file=out)
        return 2
    verdict = replay(cert, prog)
    print(verdict.report(), file=out)
    return 0 if verdict.accepted else 1
