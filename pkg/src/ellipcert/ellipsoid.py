"""Symmetric-matrix kernel and the ellipsoid calculus.

Ellipsoids come in two formulations over a variable layout x1..xn:

  direct   E(P)  = {x : x'Px <= 1}          (degenerate = unbounded cylinder)
  reverse  E+(P) = {x : [[1, x'],[x, P]] >= 0}   (degenerate = flat)

For invertible P the two coincide via E+(P) = E(P^-1). Every propagation
primitive used by the statement rules lives here as a pure value-to-value
operation; none of them mutate their operands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, NotInvertible, NotProjectable

DIRECT = "direct"
REVERSE = "reverse"

DEFAULT_PSD_TOL = 1e-9
SYM_TOL = 1e-12
COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# Matrix kernel
# ---------------------------------------------------------------------------


def as_sym(M) -> np.ndarray:
    """Validate and symmetrize a square real matrix."""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if A.size and not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if A.size and np.max(np.abs(A - A.T)) > SYM_TOL * max(maxabs(A), 1.0):
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (A + A.T)


def maxabs(M: np.ndarray) -> float:
    return float(np.max(np.abs(M))) if M.size else 0.0


def min_eig(M: np.ndarray) -> float:
    if M.shape[0] == 0:
        return float("inf")
    return float(np.linalg.eigvalsh(M)[0])


def max_eig(M: np.ndarray) -> float:
    if M.shape[0] == 0:
        return 0.0
    return float(np.linalg.eigvalsh(M)[-1])


def is_psd(M, tol: float = DEFAULT_PSD_TOL) -> bool:
    """True iff all eigenvalues are >= -tol * maxabs(M)."""
    A = as_sym(M)
    if A.shape[0] == 0:
        return True
    return min_eig(A) >= -tol * maxabs(A)


def guarded_inverse(M: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Inverse with a condition-number guard; refuses near-singular input."""
    if M.shape[0] == 0:
        return M.copy()
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NotInvertible(f"{what} is singular or ill-conditioned (cond={cond:.3g})")
    return np.linalg.inv(M)


def block_diag(*blocks: np.ndarray) -> np.ndarray:
    total = sum(b.shape[0] for b in blocks)
    out = np.zeros((total, total))
    at = 0
    for b in blocks:
        k = b.shape[0]
        out[at:at + k, at:at + k] = b
        at += k
    return out


def spectral_norm_scale(M: np.ndarray) -> float:
    """max(lambda_max(M), 0): the natural scale for relative epsilons."""
    return max(max_eig(M), 0.0)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    form: str
    mat: np.ndarray
    layout: tuple[str, ...]
    psd_tol: float = field(default=DEFAULT_PSD_TOL)

    def __post_init__(self):
        if self.form not in (DIRECT, REVERSE):
            raise ValueError(f"unknown ellipsoid form {self.form!r}")
        M = as_sym(self.mat)
        if len(self.layout) != M.shape[0]:
            raise DimensionMismatch(
                f"layout has {len(self.layout)} variables, matrix is {M.shape[0]}-dim")
        if not is_psd(M, self.psd_tol):
            raise ValueError(f"{self.form} ellipsoid matrix is not PSD "
                             f"(min eigenvalue {min_eig(M):.3g})")
        object.__setattr__(self, "mat", M)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def dim(self) -> int:
        return self.mat.shape[0]


def direct(M, layout: Sequence[str]) -> Ellipsoid:
    return Ellipsoid(DIRECT, np.asarray(M, dtype=float), tuple(layout))


def reverse(M, layout: Sequence[str]) -> Ellipsoid:
    return Ellipsoid(REVERSE, np.asarray(M, dtype=float), tuple(layout))


@dataclass(frozen=True)
class ConvexCombinator:
    """Point of the simplex: nonnegative weights summing to one."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = self.weights
        if any(not (0.0 <= x <= 1.0) for x in w):
            raise InvalidParameter(f"combinator weights must lie in [0,1]: {w}")
        if abs(sum(w) - 1.0) > 1e-12:
            raise InvalidParameter(f"combinator weights must sum to 1: {w}")


AffineMap = np.ndarray  # rectangular real matrix, output-rows x input-cols


def affine_map(rows) -> AffineMap:
    A = np.atleast_2d(np.asarray(rows, dtype=float))
    if A.size and not np.all(np.isfinite(A)):
        raise ValueError("affine map has non-finite entries")
    return A


# ---------------------------------------------------------------------------
# Membership and form conversion
# ---------------------------------------------------------------------------


def membership(x, e: Ellipsoid, tol: float = DEFAULT_PSD_TOL) -> bool:
    """Point membership: x'Mx <= 1 + tol (direct) or bordered-PSD (reverse)."""
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape[0] != e.dim:
        raise DimensionMismatch(f"point has dim {v.shape[0]}, ellipsoid has {e.dim}")
    if e.form == DIRECT:
        return float(v @ e.mat @ v) <= 1.0 + tol
    n = e.dim
    bordered = np.empty((n + 1, n + 1))
    bordered[0, 0] = 1.0
    bordered[0, 1:] = v
    bordered[1:, 0] = v
    bordered[1:, 1:] = e.mat
    return is_psd(bordered, tol)


def direct_to_reverse(e: Ellipsoid) -> Ellipsoid:
    if e.form != DIRECT:
        raise ValueError("direct_to_reverse expects a direct-form ellipsoid")
    return Ellipsoid(REVERSE, guarded_inverse(e.mat, "direct-form matrix"), e.layout)


def reverse_to_direct(e: Ellipsoid) -> Ellipsoid:
    if e.form != REVERSE:
        raise ValueError("reverse_to_direct expects a reverse-form ellipsoid")
    return Ellipsoid(DIRECT, guarded_inverse(e.mat, "reverse-form matrix"), e.layout)


# ---------------------------------------------------------------------------
# Propagation primitives
# ---------------------------------------------------------------------------


def affine_image_reverse(e: Ellipsoid, A: AffineMap,
                         layout: Sequence[str] | None = None) -> Ellipsoid:
    """Forward image under x -> Ax in reverse form: E+(P) maps into E+(APA')."""
    if e.form != REVERSE:
        raise ValueError("affine_image_reverse expects a reverse-form ellipsoid")
    A = affine_map(A)
    if A.shape[1] != e.dim:
        raise DimensionMismatch(f"map has {A.shape[1]} columns, ellipsoid dim {e.dim}")
    if layout is None:
        if A.shape[0] != e.dim:
            raise DimensionMismatch("non-square map needs an explicit output layout")
        layout = e.layout
    if len(layout) != A.shape[0]:
        raise DimensionMismatch("output layout does not match map rows")
    return Ellipsoid(REVERSE, A @ e.mat @ A.T, tuple(layout))


def convex_combination(es: Sequence[Ellipsoid], comb: ConvexCombinator) -> Ellipsoid:
    """Overapproximate the intersection of same-layout direct ellipsoids."""
    if len(es) != len(comb.weights):
        raise DimensionMismatch(f"{len(es)} ellipsoids but {len(comb.weights)} weights")
    if not es:
        raise InvalidParameter("need at least one ellipsoid")
    base = es[0]
    for e in es:
        if e.form != DIRECT:
            raise ValueError("convex_combination expects direct-form ellipsoids")
        if e.layout != base.layout:
            raise DimensionMismatch("convex_combination requires a common layout")
    M = sum(w * e.mat for w, e in zip(comb.weights, es))
    return Ellipsoid(DIRECT, M, base.layout)


def cartesian_product(es: Sequence[Ellipsoid], comb: ConvexCombinator) -> Ellipsoid:
    """Overapproximate the product set of direct ellipsoids on disjoint variables."""
    if len(es) != len(comb.weights):
        raise DimensionMismatch(f"{len(es)} ellipsoids but {len(comb.weights)} weights")
    seen: set[str] = set()
    layout: list[str] = []
    for e in es:
        if e.form != DIRECT:
            raise ValueError("cartesian_product expects direct-form ellipsoids")
        overlap = seen & set(e.layout)
        if overlap:
            raise DimensionMismatch(f"overlapping layouts: {sorted(overlap)}")
        seen |= set(e.layout)
        layout.extend(e.layout)
    M = block_diag(*(w * e.mat for w, e in zip(comb.weights, es)))
    return Ellipsoid(DIRECT, M, tuple(layout))


def rect_bound(bound: float, var: str) -> Ellipsoid:
    """|u| <= bound as the one-dimensional direct ellipsoid [1/bound^2]."""
    if bound <= 0:
        raise InvalidParameter(f"rectangular bound must be positive, got {bound}")
    return Ellipsoid(DIRECT, np.array([[1.0 / bound ** 2]]), (var,))


def project_direct(e: Ellipsoid, keep: Sequence[str]) -> Ellipsoid:
    """Shadow of a direct ellipsoid onto the `keep` variables (Schur complement).

    Defined when the dropped block is invertible, or exactly when there is no
    coupling; otherwise the caller must route through the reverse formulation.
    """
    if e.form != DIRECT:
        raise ValueError("project_direct expects a direct-form ellipsoid")
    keep = list(keep)
    missing = [v for v in keep if v not in e.layout]
    if missing:
        raise DimensionMismatch(f"projection variables not in layout: {missing}")
    ki = [e.layout.index(v) for v in keep]
    di = [i for i in range(e.dim) if e.layout[i] not in keep]
    P = e.mat[np.ix_(ki, ki)]
    if not di:
        return Ellipsoid(DIRECT, P, tuple(keep))
    R = e.mat[np.ix_(di, ki)]
    Q = e.mat[np.ix_(di, di)]
    if maxabs(R) <= 1e-14 * max(maxabs(e.mat), 1.0):
        return Ellipsoid(DIRECT, P, tuple(keep))
    try:
        Qinv = guarded_inverse(Q, "dropped block")
    except NotInvertible as exc:
        raise NotProjectable(
            "cannot project in direct form: dropped block is singular "
            "with nonzero coupling") from exc
    return Ellipsoid(DIRECT, P - R.T @ Qinv @ R, tuple(keep))


def inverse_image_direct(e: Ellipsoid, A: AffineMap) -> Ellipsoid:
    """Exact image {Ax : x in E(P)} = E(A^-T P A^-1) for invertible A."""
    if e.form != DIRECT:
        raise ValueError("inverse_image_direct expects a direct-form ellipsoid")
    A = affine_map(A)
    if A.shape[0] != A.shape[1] or A.shape[0] != e.dim:
        raise DimensionMismatch("inverse_image_direct needs a square map of matching dim")
    Ainv = guarded_inverse(A, "assignment map")
    return Ellipsoid(DIRECT, Ainv.T @ e.mat @ Ainv, e.layout)


def copy_rule_direct(e: Ellipsoid, A: AffineMap, lam: float,
                     new_vars: Sequence[str]) -> Ellipsoid:
    """y = Ax with fresh y, direct form: add lam * (y - Ax)'(y - Ax) >= 0."""
    if e.form != DIRECT:
        raise ValueError("copy_rule_direct expects a direct-form ellipsoid")
    if lam < 0:
        raise InvalidParameter(f"copy multiplier must be nonnegative, got {lam}")
    A = affine_map(A)
    m, n = A.shape
    if n != e.dim or len(new_vars) != m:
        raise DimensionMismatch("copy map shape does not match layouts")
    S = np.hstack([A, -np.eye(m)])
    Q = block_diag(e.mat, np.zeros((m, m))) + lam * (S.T @ S)
    return Ellipsoid(DIRECT, Q, (*e.layout, *new_vars))


def copy_rule_reverse(e: Ellipsoid, A: AffineMap, eps: float,
                      new_vars: Sequence[str]) -> Ellipsoid:
    """y = Ax with fresh y, reverse form: bordered [[P, PA'],[AP, APA' + eps I]]."""
    if e.form != REVERSE:
        raise ValueError("copy_rule_reverse expects a reverse-form ellipsoid")
    if eps < 0:
        raise InvalidParameter(f"copy slack must be nonnegative, got {eps}")
    A = affine_map(A)
    m, n = A.shape
    if n != e.dim or len(new_vars) != m:
        raise DimensionMismatch("copy map shape does not match layouts")
    P = e.mat
    PA = P @ A.T
    Q = np.block([[P, PA], [PA.T, A @ PA + eps * np.eye(m)]])
    return Ellipsoid(REVERSE, Q, (*e.layout, *new_vars))


def sector_rule_direct(e: Ellipsoid, mu: float, new_var: str,
                       tol: float = DEFAULT_PSD_TOL) -> Ellipsoid:
    """u = f(x) for any |f(x)| <= |x|, direct form: diag(P - mu I, mu)."""
    if e.form != DIRECT:
        raise ValueError("sector_rule_direct expects a direct-form ellipsoid")
    if mu < 0:
        raise InvalidParameter(f"sector multiplier must be nonnegative, got {mu}")
    shifted = e.mat - mu * np.eye(e.dim)
    if not is_psd(shifted, tol):
        raise InvalidParameter(
            f"sector multiplier {mu} exceeds the smallest eigenvalue of P")
    Q = block_diag(shifted, np.array([[mu]]))
    return Ellipsoid(DIRECT, Q, (*e.layout, new_var))


def sector_rule_reverse(e: Ellipsoid, eps: float, new_var: str) -> Ellipsoid:
    """u = f(x) for any |f(x)| <= |x|, reverse form:
    diag(-eps P (P - eps I)^-1, eps) for eps above the largest eigenvalue."""
    if e.form != REVERSE:
        raise ValueError("sector_rule_reverse expects a reverse-form ellipsoid")
    lmax = spectral_norm_scale(e.mat)
    if eps <= lmax:
        raise InvalidParameter(
            f"sector slack {eps} must exceed the largest eigenvalue {lmax:.6g}")
    n = e.dim
    shifted = e.mat - eps * np.eye(n)
    B = -eps * (e.mat @ np.linalg.inv(shifted))
    B = 0.5 * (B + B.T)
    Q = block_diag(B, np.array([[eps]]))
    return Ellipsoid(REVERSE, Q, (*e.layout, new_var))


def loewner_leq(Ma, Mb, margin: float = 0.0, tol: float = DEFAULT_PSD_TOL) -> bool:
    """Mb - Ma - margin*I >= 0; encodes reverse-form containment E+(Ma) <= E+(Mb)."""
    A = as_sym(Ma)
    B = as_sym(Mb)
    if A.shape != B.shape:
        raise DimensionMismatch(f"shape mismatch {A.shape} vs {B.shape}")
    if A.shape[0] == 0:
        return True
    return is_psd(B - A - margin * np.eye(A.shape[0]), tol)
