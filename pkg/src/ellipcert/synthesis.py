"""Fixpoint synthesis: find scalar parameters theta and a loop-head matrix P
with G_theta(P) strictly inside P.

Chains without sector rules are affine in the operand, G(M) = s*T M T' + C,
so each grid cell reduces to one discrete Lyapunov solve; sector chains are
handled by a damped fixpoint iteration per cell. Failure is a result value,
not an exception.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ellipsoid as el
from . import semantics as sem
from .config import AnalysisConfig
from .errors import EllipcertError, InvalidParameter, NotInvertible, SpectralRadiusTooLarge

RHO_MARGIN = 1e-9
MAX_ITERATIONS = 500
KRON_DIM_LIMIT = 30
CELL_BUDGET = 40_000


# ---------------------------------------------------------------------------
# Matrix equation solvers
# ---------------------------------------------------------------------------


def spectral_radius(A) -> float:
    """Largest eigenvalue magnitude of a square matrix."""
    M = np.atleast_2d(np.asarray(A, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise el.DimensionMismatch(f"spectral radius needs a square matrix, got {M.shape}")
    if M.shape[0] == 0:
        return 0.0
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def solve_discrete_lyapunov(A, Q) -> np.ndarray:
    """Solve P = A P A' + Q for PSD Q and a strictly stable A.

    Small systems go through the vectorized solve (I - A (x) A) vec(P) = vec(Q);
    larger ones through the doubling series sum A^k Q A^k'.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = el.as_sym(Q)
    n = A.shape[0]
    if A.shape != Q.shape:
        raise el.DimensionMismatch(f"A is {A.shape}, Q is {Q.shape}")
    rho = spectral_radius(A)
    if rho >= 1.0 - RHO_MARGIN:
        raise SpectralRadiusTooLarge(
            f"spectral radius {rho!r} is not strictly below one")
    if n == 0:
        return Q.copy()
    if n <= KRON_DIM_LIMIT:
        lhs = np.eye(n * n) - np.kron(A, A)
        P = np.linalg.solve(lhs, Q.reshape(-1)).reshape(n, n)
    else:
        P = Q.copy()
        Ak = A.copy()
        for _ in range(200):
            term = Ak @ P @ Ak.T
            P = P + term
            Ak = Ak @ Ak
            scale = np.linalg.norm(P)
            if np.linalg.norm(Ak) ** 2 * scale <= 1e-18 * max(scale, 1e-300):
                break
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(P - A @ P @ A.T - Q)
    if residual > 1e-8 * max(np.linalg.norm(P), 1e-300):
        raise EllipcertError(f"Lyapunov solve residual too large: {residual:.3g}")
    return P


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

PROVED = "proved"
FAILED = "failed"


@dataclass
class SynthesisResult:
    status: str
    P: Optional[np.ndarray] = None  # reverse-form loop-head matrix
    theta: dict[str, float] = field(default_factory=dict)
    margin: float = 0.0
    reason: Optional[str] = None
    detail: str = ""
    violation: float = math.inf

    @property
    def proved(self) -> bool:
        return self.status == PROVED


def margin_value(margin_setting, P: np.ndarray) -> float:
    n = P.shape[0]
    if margin_setting == "auto":
        return 1e-6 * float(np.trace(P)) / n if n else 0.0
    return float(margin_setting)


def check_initial(init, e: el.Ellipsoid, tol: float = el.DEFAULT_PSD_TOL) -> bool:
    """Is the declared initial state inside the loop-head ellipsoid?"""
    return el.membership(np.asarray(init, dtype=float), e, tol)


def initial_level(init: np.ndarray, P: np.ndarray) -> float:
    """x' P^-1 x for positive definite reverse-form P (0 for empty layouts)."""
    if P.shape[0] == 0:
        return 0.0
    return float(init @ np.linalg.solve(P, init))


# ---------------------------------------------------------------------------
# Affine chain extraction (no sector rules)
# ---------------------------------------------------------------------------


def _rule_linear_map(rule: sem.RuleInstance) -> np.ndarray:
    """The congruence factor of one rule: post = F M F' (+ constants)."""
    pre, post = list(rule.pre_layout), list(rule.post_layout)
    if rule.kind in (sem.AFFINE_IMAGE, sem.INVERSE_IMAGE):
        return rule.matrix
    if rule.kind == sem.INTRO:
        F = np.zeros((len(post), len(pre)))
        F[:len(pre), :len(pre)] = np.eye(len(pre))
        return F
    if rule.kind == sem.INIT_ZERO:
        F = np.eye(len(pre))
        F[pre.index(rule.params["cell"])] = 0.0
        return F
    if rule.kind in (sem.PROJECT, sem.DROP):
        F = np.zeros((len(post), len(pre)))
        for i, v in enumerate(post):
            F[i, pre.index(v)] = 1.0
        return F
    if rule.kind == sem.PRODUCT:
        F = np.zeros((len(post), len(pre)))
        F[:len(pre), :len(pre)] = np.eye(len(pre))
        return F
    if rule.kind == sem.COPY_REVERSE:
        m = len(post) - len(pre)
        return np.vstack([np.eye(len(pre)), rule.matrix.reshape(m, len(pre))])
    raise InvalidParameter(f"rule kind {rule.kind} is not affine in the operand")


def linear_part(summary: sem.LoopSummary) -> np.ndarray:
    """Composed state-to-state map with product weights at their limit 1.

    Its spectral radius below one is necessary for any feasible cell, which
    gives the upfront marginality check.
    """
    T = np.eye(summary.state_dim)
    for rule in summary.rules:
        T = _rule_linear_map(rule) @ T
    return T


def extract_affine(summary: sem.LoopSummary, theta: dict[str, float],
                   ) -> tuple[np.ndarray, float, np.ndarray]:
    """Represent a sector-free chain as G(M) = s * T M T' + C at fixed theta."""
    n = summary.state_dim
    T = np.eye(n)
    s = 1.0
    C = np.zeros((n, n))
    for rule in summary.rules:
        F = _rule_linear_map(rule)
        if rule.kind == sem.PRODUCT:
            lam = sem.resolve_param(rule.params["lambda"], theta)
            if not (0.0 < lam < 1.0):
                raise InvalidParameter(f"product weight out of range: {lam}")
            q = rule.bound ** 2 / (1.0 - lam)
            C = F @ C @ F.T / lam
            C[-1, -1] += q
            s /= lam
            T = F @ T
        elif rule.kind == sem.COPY_REVERSE:
            eps = rule.params.get("eps", 0.0)
            if isinstance(eps, str):
                raise InvalidParameter("symbolic copy slack in an affine chain")
            C = F @ C @ F.T
            m = len(rule.post_layout) - len(rule.pre_layout)
            for k in range(m):
                C[len(rule.pre_layout) + k, len(rule.pre_layout) + k] += float(eps)
            T = F @ T
        else:
            C = F @ C @ F.T
            T = F @ T
    return T, s, el.as_sym(C)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def _grid_axis(spec: sem.ThetaSpec, points: int,
               window: Optional[tuple[float, float]] = None) -> np.ndarray:
    lo, hi = window if window is not None else (spec.lo, spec.hi)
    lo, hi = max(lo, spec.lo), min(hi, spec.hi)
    if hi <= lo:
        return np.array([lo])
    if spec.kind == "lambda":
        return np.linspace(lo, hi, points)
    if spec.kind == "sector_ratio":
        base = spec.lo - 1.0  # strictly above the eigenvalue threshold
        return 1.0 + np.geomspace(max(lo - 1.0, base), hi - 1.0, points)
    if spec.kind == "copy_ratio":
        if lo <= 0.0:
            tail = np.geomspace(1e-6, max(hi, 1e-6), points - 1) if points > 1 else []
            return np.concatenate([[0.0], tail])
        return np.geomspace(lo, hi, points)
    raise InvalidParameter(f"unknown theta kind {spec.kind!r}")


def _refined_window(spec: sem.ThetaSpec, axis: np.ndarray, best: float,
                    ) -> tuple[float, float]:
    idx = int(np.argmin(np.abs(axis - best)))
    lo = axis[max(idx - 1, 0)]
    hi = axis[min(idx + 1, len(axis) - 1)]
    if lo == hi:
        return spec.lo, spec.hi
    return float(lo), float(hi)


@dataclass
class _Candidate:
    trace: float
    theta_key: tuple[float, ...]
    theta: dict[str, float]
    P: np.ndarray
    margin: float

    def better_than(self, other: Optional["_Candidate"]) -> bool:
        if other is None:
            return True
        return (self.trace, self.theta_key) < (other.trace, other.theta_key)


def _grid_search(specs: Sequence[sem.ThetaSpec], config: AnalysisConfig, evaluate):
    """Evaluate cells over a refining grid; returns (best candidate, best violation)."""
    ndim = len(specs)
    points = config.grid
    if ndim >= 3:
        points = max(4, int(round(CELL_BUDGET ** (1.0 / ndim))))
    best: Optional[_Candidate] = None
    best_violation = math.inf
    best_violation_theta: Optional[tuple[float, ...]] = None
    windows: list[Optional[tuple[float, float]]] = [None] * ndim

    for _level in range(config.refine + 1):
        axes = [_grid_axis(spec, points, win) for spec, win in zip(specs, windows)]
        for combo in itertools.product(*axes):
            theta = {spec.name: float(v) for spec, v in zip(specs, combo)}
            cand, violation = evaluate(theta)
            if cand is not None and cand.better_than(best):
                best = cand
            if violation < best_violation:
                best_violation = violation
                best_violation_theta = tuple(float(v) for v in combo)
        center = best.theta_key if best is not None else best_violation_theta
        if center is None:
            break
        windows = [_refined_window(spec, axis, c)
                   for spec, axis, c in zip(specs, axes, center)]
    return best, best_violation


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def synthesize(summary: sem.LoopSummary, init, config: Optional[AnalysisConfig] = None,
               ) -> SynthesisResult:
    """Search theta for a loop-head P with G_theta(P) inside P by the margin
    and the initial state inside E+(P)."""
    config = config or AnalysisConfig()
    init = np.asarray(init, dtype=float).reshape(-1)
    n = summary.state_dim
    if init.shape[0] != n:
        raise el.DimensionMismatch(f"initial state has dim {init.shape[0]}, layout {n}")

    if not summary.has_sector:
        return _synthesize_affine(summary, init, config)
    return _synthesize_iterative(summary, init, config)


def _finish(P: np.ndarray, theta: dict[str, float], summary: sem.LoopSummary,
            init: np.ndarray, config: AnalysisConfig) -> Optional[_Candidate]:
    """Final acceptance: strict containment at the recorded margin plus the
    initial state inside; rejects the candidate rather than loosening it."""
    margin = margin_value(config.margin, P)
    try:
        GP = sem.apply_chain(summary.rules, P, theta)
    except (InvalidParameter, NotInvertible):
        return None
    if not el.loewner_leq(GP, P, margin):
        return None
    if not check_initial(init, el.Ellipsoid(el.REVERSE, P, summary.layout)):
        return None
    key = tuple(theta[spec.name] for spec in summary.theta)
    return _Candidate(float(np.trace(P)), key, dict(theta), P, margin)


def _synthesize_affine(summary: sem.LoopSummary, init: np.ndarray,
                       config: AnalysisConfig) -> SynthesisResult:
    n = summary.state_dim
    T_nominal = linear_part(summary)
    rho = spectral_radius(T_nominal)
    if rho >= 1.0 - RHO_MARGIN:
        if rho <= 1.0 + 1e-6:
            detail = f"marginal spectral radius {round(rho, 9)!r}"
        else:
            detail = f"spectral radius {rho!r} exceeds one"
        return SynthesisResult(FAILED, reason="SpectralRadiusTooLarge",
                               detail=detail, violation=rho - 1.0)

    def evaluate(theta: dict[str, float]):
        try:
            T, s, C = extract_affine(summary, theta)
        except InvalidParameter:
            return None, math.inf
        A = math.sqrt(s) * T
        rho_cell = spectral_radius(A)
        if rho_cell >= 1.0 - RHO_MARGIN:
            return None, rho_cell - 1.0
        c_scale = float(np.trace(C)) / n if n else 0.0
        if c_scale <= 0.0:
            Q = np.eye(n)
            q0 = 1.0
        else:
            q0 = 1e-9 * c_scale
            Q = C + q0 * np.eye(n)
        try:
            P_star = solve_discrete_lyapunov(A, Q)
            S = solve_discrete_lyapunov(A, np.eye(n))
        except (SpectralRadiusTooLarge, EllipcertError):
            return None, rho_cell - 1.0
        delta = 2.0 * margin_value(config.margin, P_star) if c_scale > 0.0 else 0.0
        P = P_star + delta * S
        level = initial_level(init, P)
        if level > 1.0 or c_scale <= 0.0:
            P = P * max(level * (1.0 + 1e-6), 1.0)
        for _ in range(4):
            cand = _finish(P, theta, summary, init, config)
            if cand is not None:
                return cand, 0.0
            delta = max(delta * 10.0, 1e-12 * (1.0 + float(np.trace(P)) / max(n, 1)))
            P = P + delta * S
        return None, math.inf

    if not summary.theta:
        cand, violation = evaluate({})
    else:
        cand, violation = _grid_search(summary.theta, config, evaluate)
    if cand is None:
        return SynthesisResult(FAILED, reason="NoFeasibleParameters",
                               detail="no grid cell admits an invariant",
                               violation=violation)
    return SynthesisResult(PROVED, P=cand.P, theta=cand.theta, margin=cand.margin)


def _synthesize_iterative(summary: sem.LoopSummary, init: np.ndarray,
                          config: AnalysisConfig) -> SynthesisResult:
    n = summary.state_dim
    scale0 = max(1.0, float(init @ init))

    def evaluate(theta: dict[str, float]):
        P = scale0 * np.eye(n)
        trace0 = float(np.trace(P))
        best_violation = math.inf
        for _ in range(MAX_ITERATIONS):
            try:
                GP = sem.apply_chain(summary.rules, P, theta)
            except (InvalidParameter, NotInvertible):
                return None, best_violation
            eta = margin_value(config.margin, P)
            gap = el.min_eig(P - GP)
            best_violation = min(best_violation, eta - gap)
            if el.loewner_leq(GP, P, eta):
                level = initial_level(init, P)
                Pf = P * max(level * (1.0 + 1e-6), 1.0)
                cand = _finish(Pf, theta, summary, init, config)
                if cand is not None:
                    return cand, 0.0
                P = Pf if level > 1.0 else 1.001 * (GP + eta * np.eye(n))
                continue
            P = 1.001 * (GP + eta * np.eye(n))
            if float(np.trace(P)) > 1e14 * (trace0 + 1.0):
                break
        return None, best_violation

    cand, violation = _grid_search(summary.theta, config, evaluate)
    if cand is None:
        return SynthesisResult(FAILED, reason="NoFeasibleParameters",
                               detail="no grid cell admits a sector-chain invariant",
                               violation=violation)
    return SynthesisResult(PROVED, P=cand.P, theta=cand.theta, margin=cand.margin)
