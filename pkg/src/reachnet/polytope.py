"""Convex polytopes in halfspace representation, possibly unbounded.

A set is stored as ``{z : A_ineq z <= b_ineq, A_eq z == b_eq}``.  Equality
rows are kept explicit instead of being split into inequality pairs: they
encode degenerate (lower-dimensional) sets exactly and they let coordinate
elimination substitute variables instead of combining rows.

Coordinate elimination is Fourier-Motzkin on the inequality rows (equality
rows are used as pivots first), one coordinate at a time from the highest
column down, with duplicate/dominated-row filtering and LP-based redundancy
pruning after every step to keep the row count from exploding.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import lpsolve
from .errors import (
    DegenerateInput,
    DimensionMismatch,
    EliminationBlowup,
    EmptySet,
    NumericalFailure,
    ParseError,
    UnboundedSet,
)

#: Default absolute tolerance for membership, inclusion and redundancy tests.
ABS_TOL = 1e-9

#: Coefficients below this are treated as exact zeros during elimination.
ZERO_COEF_TOL = 1e-11

#: Default cap on intermediate inequality rows during elimination.
ELIMINATION_ROW_CAP = 20_000

#: Vertex enumeration / hull recovery cluster radius.
VERTEX_TOL = 1e-7

_MAX_VERTEX_DIM = 8
_MAX_VERTEX_COMBOS = 400_000


def _normalize_system(A, b, eq: bool):
    """Unit-norm rows; returns (A, b, infeasible_flag) after dropping trivia."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if A.size == 0:
        A = A.reshape(0, A.shape[1] if A.ndim == 2 else 0)
    if A.shape[0] != b.shape[0]:
        raise DimensionMismatch("row count does not match right-hand side")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise DimensionMismatch("polytope data must be finite")
    norms = np.linalg.norm(A, axis=1)
    zero = norms <= ZERO_COEF_TOL
    infeasible = False
    if np.any(zero):
        bz = b[zero]
        if eq:
            infeasible = bool(np.any(np.abs(bz) > ABS_TOL))
        else:
            infeasible = bool(np.any(bz < -ABS_TOL))
        A, b, norms = A[~zero], b[~zero], norms[~zero]
    if A.shape[0]:
        # skip rows that are unit-norm already (up to accumulated rounding)
        # so that normalizing is idempotent and serialized rows round-trip
        # byte for byte
        norms = np.where(np.abs(norms - 1.0) <= 1e-12, 1.0, norms)
        A = A / norms[:, None]
        b = b / norms
        if eq:
            # canonical sign: first nonzero coefficient positive
            for r in range(A.shape[0]):
                nz = np.nonzero(np.abs(A[r]) > ZERO_COEF_TOL)[0]
                if nz.size and A[r, nz[0]] < 0:
                    A[r] = -A[r]
                    b[r] = -b[r]
        # drop exact duplicates (after rounding), keep deterministic order
        key = np.round(np.hstack([A, b[:, None]]), 12)
        _, idx = np.unique(key, axis=0, return_index=True)
        idx = np.sort(idx)
        A, b = A[idx], b[idx]
    return A, b, infeasible


class HPolytope:
    """Halfspace-represented convex set; rows normalized to unit norm.

    Attributes
    ----------
    A_ineq, b_ineq : inequality system ``A_ineq z <= b_ineq``
    A_eq, b_eq     : equality system ``A_eq z == b_eq``
    dim            : ambient dimension
    trivially_empty: an all-zero row demanded the impossible
    """

    __slots__ = ("A_ineq", "b_ineq", "A_eq", "b_eq", "dim", "trivially_empty",
                 "_empty_cache")

    def __init__(self, A_ineq=None, b_ineq=None, A_eq=None, b_eq=None,
                 dim: int | None = None):
        mats = [m for m in (A_ineq, A_eq) if m is not None]
        if dim is None:
            for m in mats:
                m = np.atleast_2d(np.asarray(m, dtype=float))
                if m.size or m.ndim == 2:
                    dim = m.shape[1]
                    break
        if dim is None:
            raise DimensionMismatch("cannot infer dimension of empty system")
        if A_ineq is None:
            A_ineq = np.zeros((0, dim))
            b_ineq = np.zeros(0)
        if A_eq is None:
            A_eq = np.zeros((0, dim))
            b_eq = np.zeros(0)
        gi, hi, bad1 = _normalize_system(A_ineq, b_ineq, eq=False)
        ge, he, bad2 = _normalize_system(A_eq, b_eq, eq=True)
        if gi.shape[1] not in (dim,) or ge.shape[1] not in (dim,):
            if gi.size or ge.size:
                raise DimensionMismatch("inconsistent column counts")
            gi = gi.reshape(0, dim)
            ge = ge.reshape(0, dim)
        self.A_ineq, self.b_ineq = gi, hi
        self.A_eq, self.b_eq = ge, he
        self.dim = int(dim)
        self.trivially_empty = bool(bad1 or bad2)
        self._empty_cache = True if self.trivially_empty else None
        for arr in (self.A_ineq, self.b_ineq, self.A_eq, self.b_eq):
            arr.setflags(write=False)

    # -- constructors -----------------------------------------------------

    @staticmethod
    def universe(dim: int) -> "HPolytope":
        return HPolytope(dim=dim)

    @staticmethod
    def empty(dim: int) -> "HPolytope":
        p = HPolytope(np.zeros((1, dim)), np.array([-1.0]), dim=dim)
        return p

    @staticmethod
    def from_box(lo, hi) -> "HPolytope":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionMismatch("box bounds must have equal length")
        d = lo.shape[0]
        eye = np.eye(d)
        return HPolytope(np.vstack([eye, -eye]), np.hstack([hi, -lo]))

    # -- basic queries ----------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.A_ineq.shape[0] + self.A_eq.shape[0]

    def is_empty(self) -> bool:
        if self._empty_cache is None:
            self._empty_cache = lpsolve.is_empty(self)
        return self._empty_cache

    def contains(self, z, tol: float = ABS_TOL) -> bool:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.shape[0] != self.dim:
            raise DimensionMismatch("point dimension mismatch")
        if self.trivially_empty:
            return False
        ok_i = not self.A_ineq.size or np.all(self.A_ineq @ z <= self.b_ineq + tol)
        ok_e = not self.A_eq.size or np.all(np.abs(self.A_eq @ z - self.b_eq) <= tol)
        return bool(ok_i and ok_e)

    def __repr__(self) -> str:  # pragma: no cover
        return (f"HPolytope(dim={self.dim}, ineq={self.A_ineq.shape[0]}, "
                f"eq={self.A_eq.shape[0]})")


# -- set operations -------------------------------------------------------


def intersect(p: HPolytope, q: HPolytope) -> HPolytope:
    """Row-stacked intersection (no pruning; use :func:`prune` if needed)."""
    if p.dim != q.dim:
        raise DimensionMismatch("intersection of different dimensions")
    if p.trivially_empty or q.trivially_empty:
        return HPolytope.empty(p.dim)
    return HPolytope(
        np.vstack([p.A_ineq, q.A_ineq]), np.hstack([p.b_ineq, q.b_ineq]),
        np.vstack([p.A_eq, q.A_eq]), np.hstack([p.b_eq, q.b_eq]),
        dim=p.dim,
    )


def includes(p: HPolytope, q: HPolytope, tol: float = ABS_TOL) -> bool:
    """True when q is a subset of p, via support evaluations of q.

    Every face constraint of p must cap q's support in that direction; the
    empty set is included in everything.
    """
    if p.dim != q.dim:
        raise DimensionMismatch("inclusion test of different dimensions")
    if q.is_empty():
        return True
    if p.is_empty():
        return False
    directions = [(a, b) for a, b in zip(p.A_ineq, p.b_ineq)]
    for a, b in zip(p.A_eq, p.b_eq):
        directions.append((a, b))
        directions.append((-a, -b))
    for a, b in directions:
        try:
            s = lpsolve.support(q, a)
        except EmptySet:
            return True
        if s > b + tol:
            return False
    return True


def set_equal(p: HPolytope, q: HPolytope, tol: float = ABS_TOL) -> bool:
    return includes(p, q, tol) and includes(q, p, tol)


def prune(p: HPolytope, tol: float = ABS_TOL, merge_equalities: bool = False) -> HPolytope:
    """Minimal representation: drop inequality rows implied by the rest.

    With ``merge_equalities`` opposite inequality pairs that pin a hyperplane
    are rewritten as a single equality row (useful before vertex work).
    """
    if p.is_empty():
        return HPolytope.empty(p.dim)
    G, g = [np.array(m) for m in (p.A_ineq, p.b_ineq)]
    F, f = [np.array(m) for m in (p.A_eq, p.b_eq)]
    if merge_equalities and G.shape[0]:
        used = np.zeros(G.shape[0], dtype=bool)
        eq_rows, eq_rhs = [], []
        for i in range(G.shape[0]):
            if used[i]:
                continue
            opposite = np.all(np.abs(G + G[i]) <= 1e-10, axis=1) & ~used
            opposite[i] = False
            hit = np.nonzero(opposite & (np.abs(g + g[i]) <= tol))[0]
            if hit.size:
                used[i] = used[hit[0]] = True
                eq_rows.append(G[i])
                eq_rhs.append(g[i])
        if eq_rows:
            G, g = G[~used], g[~used]
            F = np.vstack([F, np.array(eq_rows)])
            f = np.hstack([f, np.array(eq_rhs)])
    active = list(range(G.shape[0]))
    for i in list(active):
        others = [j for j in active if j != i]
        trial = lpsolve.LinearProgram(G[i], G[others], g[others], F, f)
        res = lpsolve.solve(trial)
        if res.status == lpsolve.OPTIMAL and res.value <= g[i] + tol:
            active.remove(i)
        # unbounded or (numerically) infeasible: keep the row
    return HPolytope(G[active], g[active], F, f, dim=p.dim)


def _filter_dominated(G: np.ndarray, g: np.ndarray):
    """Drop duplicate rows and rows dominated by an identical normal."""
    if not G.shape[0]:
        return G, g
    key = np.round(G, 10)
    order = np.lexsort(key.T[::-1])
    keep = []
    last_key = None
    for idx in order:
        k = key[idx].tobytes()
        if k == last_key:
            if g[idx] < g[keep[-1]] - 0.0:
                keep[-1] = idx
        else:
            keep.append(idx)
            last_key = k
    keep = sorted(keep)
    return G[keep], g[keep]


def eliminate(p: HPolytope, positions: Sequence[int], *,
              row_cap: int = ELIMINATION_ROW_CAP, tol: float = ABS_TOL) -> HPolytope:
    """Project away the given coordinate positions (orthogonal projection).

    Positions refer to columns of ``p``; they are eliminated from the highest
    column down.  Equality rows are used as substitution pivots when they
    involve the coordinate; otherwise Fourier-Motzkin combines the sign
    classes of the inequality rows.  After each coordinate the system is
    deduplicated and LP-pruned; exceeding ``row_cap`` raises
    EliminationBlowup.
    """
    positions = sorted(set(int(c) for c in positions), reverse=True)
    if not positions:
        return p
    if any(c < 0 or c >= p.dim for c in positions):
        raise DimensionMismatch("elimination position out of range")
    remaining_dim = p.dim - len(positions)
    if p.is_empty():
        return HPolytope.empty(remaining_dim)
    G, g = np.array(p.A_ineq), np.array(p.b_ineq)
    F, f = np.array(p.A_eq), np.array(p.b_eq)

    for col in positions:
        pivoted = False
        if F.shape[0]:
            coefs = np.abs(F[:, col])
            r = int(np.argmax(coefs))
            if coefs[r] > ZERO_COEF_TOL:
                pivot_row, pivot_rhs, c = F[r], f[r], F[r, col]
                if G.shape[0]:
                    w = G[:, col] / c
                    G = G - np.outer(w, pivot_row)
                    g = g - w * pivot_rhs
                if F.shape[0] > 1:
                    mask = np.ones(F.shape[0], dtype=bool)
                    mask[r] = False
                    Fr, fr = F[mask], f[mask]
                    w = Fr[:, col] / c
                    F = Fr - np.outer(w, pivot_row)
                    f = fr - w * pivot_rhs
                else:
                    F, f = F[:0], f[:0]
                pivoted = True
        if not pivoted and G.shape[0]:
            coef = G[:, col]
            pos = np.nonzero(coef > ZERO_COEF_TOL)[0]
            neg = np.nonzero(coef < -ZERO_COEF_TOL)[0]
            zero = np.nonzero(np.abs(coef) <= ZERO_COEF_TOL)[0]
            n_new = zero.size + pos.size * neg.size
            if n_new > row_cap:
                raise EliminationBlowup(int(n_new), row_cap)
            if pos.size and neg.size:
                cp = coef[pos][:, None, None]
                cn = coef[neg][None, :, None]
                combo = (-cn) * G[pos][:, None, :] + cp * G[neg][None, :, :]
                combo_rhs = (-coef[neg])[None, :] * g[pos][:, None] \
                    + coef[pos][:, None] * g[neg][None, :]
                G = np.vstack([G[zero], combo.reshape(-1, G.shape[1])])
                g = np.hstack([g[zero], combo_rhs.reshape(-1)])
            else:
                # one-sided rows leave the remaining coordinates unconstrained
                G, g = G[zero], g[zero]
        G = np.delete(G, col, axis=1)
        F = np.delete(F, col, axis=1)
        step = HPolytope(G, g, F, f, dim=G.shape[1])
        if step.trivially_empty:
            return HPolytope.empty(remaining_dim)
        G, g = _filter_dominated(np.array(step.A_ineq), np.array(step.b_ineq))
        F, f = np.array(step.A_eq), np.array(step.b_eq)
        if G.shape[0] > G.shape[1] + 1:
            pruned = prune(HPolytope(G, g, F, f, dim=G.shape[1]), tol=tol)
            if pruned.trivially_empty:
                return HPolytope.empty(remaining_dim)
            G, g = np.array(pruned.A_ineq), np.array(pruned.b_ineq)
            F, f = np.array(pruned.A_eq), np.array(pruned.b_eq)
    return HPolytope(G, g, F, f, dim=remaining_dim)


def project_to(p: HPolytope, keep_positions: Sequence[int], **kw) -> HPolytope:
    """Eliminate everything except ``keep_positions`` (order preserved).

    ``keep_positions`` must be strictly increasing; the result's column k is
    the input's column ``keep_positions[k]``.
    """
    keep = list(keep_positions)
    if keep != sorted(set(keep)):
        raise DimensionMismatch("keep positions must be strictly increasing")
    drop = [c for c in range(p.dim) if c not in set(keep)]
    return eliminate(p, drop, **kw)


# -- vertex enumeration and hulls -----------------------------------------


def _affine_basis(F: np.ndarray, f: np.ndarray, dim: int):
    """Particular solution and orthonormal null-space basis of F z = f."""
    if not F.shape[0]:
        return np.zeros(dim), np.eye(dim)
    z0, *_ = np.linalg.lstsq(F, f, rcond=None)
    u, s, vt = np.linalg.svd(F, full_matrices=True)
    rank = int(np.sum(s > 1e-10 * max(1.0, s[0] if s.size else 1.0)))
    basis = vt[rank:].T
    return z0, basis


def vertices(p: HPolytope, tol: float = VERTEX_TOL) -> np.ndarray:
    """All vertices of a bounded nonempty polytope, one per row.

    Basic-solution enumeration on the equality-reduced system; intended for
    the low dimensions this package works in (reduced dimension <= 8).
    Duplicates from degenerate corners are clustered within ``tol``.
    """
    if p.is_empty():
        raise EmptySet("vertex enumeration of an empty set")
    q = prune(p, merge_equalities=True)
    z0, basis = _affine_basis(q.A_eq, q.b_eq, q.dim)
    r = basis.shape[1]
    if r == 0:
        return z0[None, :]
    if r > _MAX_VERTEX_DIM:
        raise NumericalFailure(f"vertex enumeration limited to {_MAX_VERTEX_DIM} dims")
    G = q.A_ineq @ basis
    g = q.b_ineq - q.A_ineq @ z0
    reduced = HPolytope(G, g, dim=r)
    for k in range(r):
        e = np.zeros(r)
        e[k] = 1.0
        if math.isinf(lpsolve.support(reduced, e)) or math.isinf(lpsolve.support(reduced, -e)):
            raise UnboundedSet("polytope is unbounded; vertices undefined")
    G, g = reduced.A_ineq, reduced.b_ineq
    m = G.shape[0]
    if m < r:
        raise UnboundedSet("too few constraints to pin vertices")
    if math.comb(m, r) > _MAX_VERTEX_COMBOS:
        raise NumericalFailure("too many row combinations for enumeration")
    found: list[np.ndarray] = []
    for rows in itertools.combinations(range(m), r):
        sub = G[list(rows)]
        if abs(np.linalg.det(sub)) <= 1e-10:
            continue
        y = np.linalg.solve(sub, g[list(rows)])
        if np.all(G @ y <= g + 1e-7):
            found.append(y)
    pts = []
    for y in found:
        z = z0 + basis @ y
        for existing in pts:
            if np.linalg.norm(existing - z) <= tol:
                break
        else:
            pts.append(z)
    if not pts:
        raise NumericalFailure("no basic feasible solutions found")
    out = np.array(sorted(pts, key=tuple))
    return out


def from_vertices(points, tol: float = ABS_TOL) -> HPolytope:
    """Convex hull of a finite point list as an HPolytope.

    Lower-dimensional hulls come out with explicit equality rows for the
    affine hull plus facet inequalities inside it.  Every input point
    satisfies the result within 1e-9.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0 or pts.shape[0] == 0:
        raise DegenerateInput("hull of an empty point list")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("hull input must be finite")
    k, d = pts.shape
    center = pts.mean(axis=0)
    spread = pts - center
    u, s, vt = np.linalg.svd(spread, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > 1e-10 * max(1.0, smax)))
    eq_rows, eq_rhs = [], []
    for j in range(rank, d):
        n = vt[j]
        vals = pts @ n
        eq_rows.append(n)
        eq_rhs.append(0.5 * (vals.min() + vals.max()))
    A_eq = np.array(eq_rows) if eq_rows else np.zeros((0, d))
    b_eq = np.array(eq_rhs) if eq_rhs else np.zeros(0)
    if rank == 0:
        return HPolytope(A_eq=np.eye(d), b_eq=pts[0], dim=d)
    basis = vt[:rank].T
    y = spread @ basis
    if rank == 1:
        rows = np.array([[1.0], [-1.0]])
        rhs = np.array([y[:, 0].max(), -y[:, 0].min()])
    else:
        from scipy.spatial import ConvexHull, QhullError

        try:
            hull = ConvexHull(y)
        except QhullError:
            hull = ConvexHull(y, qhull_options="QJ")
        rows = hull.equations[:, :-1]
        rhs = -hull.equations[:, -1]
    A = rows @ basis.T
    b = rhs + rows @ (basis.T @ center)
    # guarantee membership of every input point despite hull epsilon
    slack = (A @ pts.T).max(axis=1)
    b = np.maximum(b, slack)
    return HPolytope(A, b, A_eq, b_eq, dim=d)


# -- embedding -------------------------------------------------------------


def embed_columns(p: HPolytope, dim: int, positions: Sequence[int]) -> HPolytope:
    """Place p's coordinates at ``positions`` of a ``dim``-dimensional space.

    The new coordinates are unconstrained; this is the cylinder extension in
    plain column form.
    """
    positions = list(positions)
    if len(positions) != p.dim:
        raise DimensionMismatch("need one position per column")
    if positions != sorted(set(positions)) or (positions and positions[-1] >= dim):
        raise DimensionMismatch("positions must be strictly increasing and fit")
    if p.trivially_empty:
        return HPolytope.empty(dim)
    G = np.zeros((p.A_ineq.shape[0], dim))
    G[:, positions] = p.A_ineq
    F = np.zeros((p.A_eq.shape[0], dim))
    F[:, positions] = p.A_eq
    return HPolytope(G, p.b_ineq, F, p.b_eq, dim=dim)


# -- text serialization -----------------------------------------------------


def to_text(p: HPolytope) -> str:
    """Serialize: header ``dim k`` then ``I a1..ak b`` / ``E a1..ak b`` rows."""
    lines = [f"dim {p.dim}"]
    for a, b in zip(p.A_eq, p.b_eq):
        lines.append("E " + " ".join(repr(float(v)) for v in a) + " " + repr(float(b)))
    for a, b in zip(p.A_ineq, p.b_ineq):
        lines.append("I " + " ".join(repr(float(v)) for v in a) + " " + repr(float(b)))
    if p.trivially_empty:
        lines.append("I " + " ".join(["0.0"] * p.dim) + " -1.0")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> HPolytope:
    """Parse the :func:`to_text` format; raises ParseError on bad input."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty polytope block")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "dim":
        raise ParseError(f"expected 'dim k' header, got {lines[0]!r}")
    try:
        d = int(head[1])
    except ValueError as exc:
        raise ParseError(f"bad dimension {head[1]!r}") from exc
    if d < 0:
        raise ParseError("dimension must be nonnegative")
    gi, hi, ge, he = [], [], [], []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] not in ("I", "E") or len(parts) != d + 2:
            raise ParseError(f"bad row {ln!r} for dim {d}")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"bad number in row {ln!r}") from exc
        if parts[0] == "I":
            gi.append(vals[:-1])
            hi.append(vals[-1])
        else:
            ge.append(vals[:-1])
            he.append(vals[-1])
    return HPolytope(
        np.array(gi) if gi else None, np.array(hi) if hi else None,
        np.array(ge) if ge else None, np.array(he) if he else None,
        dim=d,
    )
