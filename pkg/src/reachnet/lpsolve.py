"""Dense linear programming layer used by every set computation.

All geometry in this package reduces to small dense LPs: emptiness checks,
support function evaluations, redundancy pruning and worst-case disturbance
margins.  They are solved with scipy's HiGHS dual simplex, which is
deterministic for fixed input, detects infeasibility and unboundedness
exactly, and reports dual multipliers (used by the duality self-check in the
test suite).

Conventions: variables are free (no implicit sign restriction), the objective
is MAXIMIZED, inequalities are ``A_ineq @ z <= b_ineq`` and equalities
``A_eq @ z == b_eq``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, EmptySet, NumericalFailure

if TYPE_CHECKING:  # pragma: no cover
    from .polytope import HPolytope

#: Hard cap on simplex iterations before giving up with NumericalFailure.
DEFAULT_PIVOT_CAP = 50_000

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((0, n))
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != n:
        raise DimensionMismatch(f"{name} must be a matrix with {n} columns")
    return a


@dataclass(frozen=True)
class LinearProgram:
    """max  objective @ z  s.t.  A_ineq z <= b_ineq,  A_eq z == b_eq."""

    objective: np.ndarray
    A_ineq: np.ndarray
    b_ineq: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray

    def __init__(self, objective, A_ineq=None, b_ineq=None, A_eq=None, b_eq=None):
        c = np.atleast_1d(np.asarray(objective, dtype=float))
        n = c.shape[0]
        gi = _as_matrix(A_ineq, n, "A_ineq")
        ge = _as_matrix(A_eq, n, "A_eq")
        hi = np.zeros(0) if b_ineq is None else np.atleast_1d(np.asarray(b_ineq, dtype=float))
        he = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
        if hi.shape[0] != gi.shape[0] or he.shape[0] != ge.shape[0]:
            raise DimensionMismatch("right-hand sides do not match row counts")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(gi))
                and np.all(np.isfinite(hi)) and np.all(np.isfinite(ge))
                and np.all(np.isfinite(he))):
            raise DimensionMismatch("LP data must be finite")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "A_ineq", gi)
        object.__setattr__(self, "b_ineq", hi)
        object.__setattr__(self, "A_eq", ge)
        object.__setattr__(self, "b_eq", he)

    @property
    def dim(self) -> int:
        return self.objective.shape[0]


@dataclass(frozen=True)
class LpResult:
    """Outcome of :func:`solve`.

    ``value``/``point`` are set only when ``status == OPTIMAL``; the duals
    follow the convention of the docstring above (multipliers of the
    maximization problem, nonnegative for inequalities).
    """

    status: str
    value: Optional[float] = None
    point: Optional[np.ndarray] = None
    ineq_duals: Optional[np.ndarray] = None
    eq_duals: Optional[np.ndarray] = None

    @property
    def is_optimal(self) -> bool:
        return self.status == OPTIMAL

    def dual_value(self, lp: LinearProgram) -> float:
        """Dual objective g'y + f'w; equals ``value`` at an optimum."""
        if not self.is_optimal:
            raise NumericalFailure("dual value only defined at an optimum")
        return float(lp.b_ineq @ self.ineq_duals + lp.b_eq @ self.eq_duals)


def solve(lp: LinearProgram, pivot_cap: int = DEFAULT_PIVOT_CAP) -> LpResult:
    """Solve ``lp``; return OPTIMAL/INFEASIBLE/UNBOUNDED.

    Raises NumericalFailure if the backend hits the pivot cap or reports
    numerical trouble instead of a clean verdict.
    """
    res = linprog(
        -lp.objective,
        A_ub=lp.A_ineq if lp.A_ineq.size else None,
        b_ub=lp.b_ineq if lp.b_ineq.size else None,
        A_eq=lp.A_eq if lp.A_eq.size else None,
        b_eq=lp.b_eq if lp.b_eq.size else None,
        bounds=(None, None),
        method="highs-ds",
        options={"maxiter": pivot_cap},
    )
    if res.status == 0:
        ineq_duals = (-res.ineqlin.marginals if lp.A_ineq.size else np.zeros(0))
        eq_duals = (-res.eqlin.marginals if lp.A_eq.size else np.zeros(0))
        return LpResult(
            OPTIMAL,
            value=float(-res.fun),
            point=np.asarray(res.x, dtype=float),
            ineq_duals=np.asarray(ineq_duals, dtype=float),
            eq_duals=np.asarray(eq_duals, dtype=float),
        )
    if res.status == 2:
        return LpResult(INFEASIBLE)
    if res.status == 3:
        return LpResult(UNBOUNDED)
    raise NumericalFailure(f"LP backend stopped without a verdict: {res.message}")


def _poly_lp(poly: "HPolytope", objective: np.ndarray) -> LinearProgram:
    return LinearProgram(objective, poly.A_ineq, poly.b_ineq, poly.A_eq, poly.b_eq)


def is_empty(poly: "HPolytope") -> bool:
    """Feasibility check via a zero-objective LP."""
    if poly.trivially_empty:
        return True
    res = solve(_poly_lp(poly, np.zeros(poly.dim)))
    return res.status == INFEASIBLE


def support(poly: "HPolytope", direction) -> float:
    """Support function max{d'z : z in poly}; +inf when unbounded that way.

    Raises EmptySet on an empty polytope (the supremum over nothing).
    """
    d = np.atleast_1d(np.asarray(direction, dtype=float))
    if d.shape[0] != poly.dim:
        raise DimensionMismatch("direction dimension does not match polytope")
    if poly.trivially_empty:
        raise EmptySet("support of an empty set")
    res = solve(_poly_lp(poly, d))
    if res.status == INFEASIBLE:
        raise EmptySet("support of an empty set")
    if res.status == UNBOUNDED:
        return math.inf
    return res.value


def support_point(poly: "HPolytope", direction) -> tuple[float, np.ndarray]:
    """Like :func:`support` but also returns a maximizer (bounded case only)."""
    d = np.atleast_1d(np.asarray(direction, dtype=float))
    if poly.trivially_empty:
        raise EmptySet("support of an empty set")
    res = solve(_poly_lp(poly, d))
    if res.status == INFEASIBLE:
        raise EmptySet("support of an empty set")
    if res.status == UNBOUNDED:
        raise NumericalFailure("no maximizer: unbounded direction")
    return res.value, res.point
