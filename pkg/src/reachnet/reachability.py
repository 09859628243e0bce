"""Backward reachability for networked constrained systems.

The trajectory of the whole network over a finite horizon lives in one long
vector: states and inputs of every agent, time step by time step.  Each
coordinate gets a global *axis label*, and every agent owns a window of those
labels -- the states and inputs of its communication neighbourhood across the
horizon.  This module:

* numbers the coordinates (:class:`AxisIndex`),
* assembles and solves each agent's local trajectory system
  (:func:`local_system_solution`),
* orchestrates the distributed computation -- solve locally, run the
  projection/extrusion exchange to a fixed point, then read off the
  backward-reachable start states and the admissible control sequences
  (:func:`run_distributed_reachability`),
* and solves the same problem monolithically for cross-checking
  (:func:`centralized_reachability`).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import affine as _affine
from . import lpsolve
from .affine import AffineAgent, CouplingRow
from .axisset import (
    AxisSet,
    LabeledSet,
    finite_set,
    join_extrusions,
    polytope_set,
    project_set,
)
from .errors import (
    DimensionCapExceeded,
    DimensionMismatch,
    IndexOutOfRange,
    UnsupportedDynamics,
    ValidationError,
)
from .fixpoint import FixpointProblem, IterationTrace, run_distributed
from .netgraph import Graph, graph_from_dynamics
from .polytope import ABS_TOL, HPolytope, includes

logger = logging.getLogger("reachnet.reachability")

TASKS = ("pre", "reach-check")

DEFAULT_DIMENSION_CAP = 64
_QUANT = 9  # decimals used when hashing finite points


@dataclass(frozen=True)
class FiniteDynamics:
    """Explicit transition relation of one agent.

    Each element of ``transitions`` is a triple
    ``(neighbour_state_stack, neighbour_input_stack, next_own_state)`` where
    the stacks run over the agent's dynamic neighbourhood (itself included)
    in index order.  A step is admissible iff its triple is listed.
    """

    transitions: frozenset = frozenset()

    def __post_init__(self):
        norm = set()
        for item in self.transitions:
            if len(item) != 3:
                raise ValidationError(
                    "each transition must be (states, inputs, next_state)")
            xs, us, nxt = item
            norm.add((_key(xs), _key(us), _key(nxt)))
        object.__setattr__(self, "transitions", frozenset(norm))


def _key(values) -> tuple:
    """Quantized tuple key so float noise below 1e-9 cannot split points."""
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    arr = np.round(arr, _QUANT) + 0.0
    return tuple(float(v) for v in arr)


def _finite_family(entries, what: str) -> tuple[tuple[tuple, ...], ...]:
    """Normalize a finite point family: tuple of quantized vectors."""
    out = []
    for vec in entries:
        out.append(_key(vec))
    if len(set(out)) != len(out):
        raise ValidationError(f"{what}: duplicate points")
    return tuple(out)


# -- network description ------------------------------------------------------


@dataclass(frozen=True)
class NetworkSpec:
    """Everything that defines one networked reachability problem.

    ``goal_sets`` / ``start_sets`` / partitions are given per agent over the
    stacked states of its *communication neighbourhood* (itself plus every
    agent it shares dynamics or constraints with, in index order).  For the
    affine backend the sets are halfspace polytopes; for the finite backend
    they are finite point families, and ``state_sets`` / ``input_sets`` act
    as per-agent alphabets.
    """

    state_dims: tuple
    input_dims: tuple
    dyn_neighbors: tuple
    con_neighbors: tuple
    horizon: int
    state_sets: tuple
    input_sets: tuple
    goal_sets: tuple
    dynamics: tuple
    couplings: tuple | None = None
    start_sets: tuple | None = None
    start_partitions: tuple | None = None
    goal_partitions: tuple | None = None

    # -- construction-time normalization and validation ---------------------

    def __post_init__(self):
        set_attr = object.__setattr__
        dims = tuple(int(d) for d in self.state_dims)
        idims = tuple(int(d) for d in self.input_dims)
        N = len(dims)
        if N < 1:
            raise ValidationError("at least one agent is required")
        if len(idims) != N:
            raise ValidationError("state_dims and input_dims lengths differ")
        if any(d < 1 for d in dims):
            raise ValidationError("state dimensions must be positive")
        if any(d < 0 for d in idims):
            raise ValidationError("input dimensions must be nonnegative")
        set_attr(self, "state_dims", dims)
        set_attr(self, "input_dims", idims)
        if int(self.horizon) < 0:
            raise ValidationError(f"horizon must be >= 0, got {self.horizon}")
        set_attr(self, "horizon", int(self.horizon))

        def norm_nb(lists, what):
            if len(lists) != N:
                raise ValidationError(f"{what} must list all {N} agents")
            out = []
            for i, lst in enumerate(lists):
                for j in lst:
                    if not 0 <= int(j) < N:
                        raise IndexOutOfRange(
                            f"{what}[{i}] references unknown agent {j}")
                out.append(tuple(sorted({int(j) for j in lst} - {i})))
            return tuple(out)

        set_attr(self, "dyn_neighbors", norm_nb(self.dyn_neighbors,
                                                "dyn_neighbors"))
        set_attr(self, "con_neighbors", norm_nb(self.con_neighbors,
                                                "con_neighbors"))

        for name in ("state_sets", "input_sets", "goal_sets", "dynamics"):
            if len(getattr(self, name)) != N:
                raise ValidationError(f"{name} must list all {N} agents")
        couplings = self.couplings
        if couplings is None:
            couplings = tuple(() for _ in range(N))
        if len(couplings) != N:
            raise ValidationError("couplings must list all agents")
        set_attr(self, "couplings", tuple(tuple(rows) for rows in couplings))
        for opt in ("start_sets", "start_partitions", "goal_partitions"):
            val = getattr(self, opt)
            if val is not None:
                if len(val) != N:
                    raise ValidationError(f"{opt} must list all {N} agents")
                set_attr(self, opt, tuple(val))

        kinds = {("affine" if isinstance(d, AffineAgent) else
                  "finite" if isinstance(d, FiniteDynamics) else "unknown")
                 for d in self.dynamics}
        if len(kinds) > 1:
            raise ValidationError(
                "all agents must share one dynamics payload kind")
        set_attr(self, "_backend", kinds.pop() if kinds else "unknown")

        graph = graph_from_dynamics(self.dyn_neighbors, self.con_neighbors)
        set_attr(self, "_graph", graph)

        if self._backend == "affine":
            self._validate_affine()
        elif self._backend == "finite":
            self._validate_finite()

    # -- simple accessors ----------------------------------------------------

    @property
    def n_agents(self) -> int:
        return len(self.state_dims)

    @property
    def backend(self) -> str:
        return self._backend

    def communication_graph(self) -> Graph:
        return self._graph

    def members(self, i: int) -> tuple:
        """Communication neighbourhood of agent i (itself included)."""
        return self._graph.neighborhood(i)

    def influence_neighborhood(self, i: int) -> tuple:
        """Agents whose variables enter i's dynamics or constraints."""
        return tuple(sorted(set(self.dyn_neighbors[i])
                            | set(self.con_neighbors[i]) | {i}))

    def neighborhood_state_dim(self, i: int) -> int:
        return sum(self.state_dims[j] for j in self.members(i))

    # -- validation helpers --------------------------------------------------

    def _validate_affine(self):
        for i in range(self.n_agents):
            ag = self.dynamics[i]
            if ag.state_dim != self.state_dims[i] or \
                    ag.input_dim != self.input_dims[i]:
                raise ValidationError(
                    f"agent {i}: dynamics dims {(ag.state_dim, ag.input_dim)} "
                    f"disagree with declared "
                    f"{(self.state_dims[i], self.input_dims[i])}")
            allowed = set(self.dyn_neighbors[i]) | {i}
            for j in set(ag.A) | set(ag.B):
                if j not in allowed:
                    raise ValidationError(
                        f"agent {i}: dynamics block for {j} but {j} is not a "
                        "declared dynamic neighbour")
            con_allowed = set(self.con_neighbors[i]) | {i}
            for row in self.couplings[i]:
                if isinstance(row, CouplingRow) and \
                        not row.participants() <= con_allowed:
                    raise ValidationError(
                        f"agent {i}: coupling row references agents outside "
                        "the declared constraint neighbours")

            def check_poly(poly, dim, what):
                if not isinstance(poly, HPolytope):
                    raise ValidationError(f"{what}: expected a polytope")
                if poly.dim != dim:
                    raise DimensionMismatch(
                        f"{what}: dimension {poly.dim}, expected {dim}")

            check_poly(self.state_sets[i], self.state_dims[i],
                       f"state set of agent {i}")
            if self.input_dims[i]:
                check_poly(self.input_sets[i], self.input_dims[i],
                           f"input set of agent {i}")
            nd = self.neighborhood_state_dim(i)
            check_poly(self.goal_sets[i], nd, f"goal set of agent {i}")
            for opt, what in (("start_sets", "start set"),
                              ("start_partitions", "start partition"),
                              ("goal_partitions", "goal partition")):
                fam = getattr(self, opt)
                if fam is not None and fam[i] is not None:
                    check_poly(fam[i], nd, f"{what} of agent {i}")
            if self.goal_partitions is not None and \
                    self.goal_partitions[i] is not None:
                if not includes(self.goal_partitions[i], self.goal_sets[i]):
                    raise ValidationError(
                        f"agent {i}: goal set is not inside its partition")
            if self.start_sets is not None and self.start_sets[i] is not None \
                    and self.start_partitions is not None and \
                    self.start_partitions[i] is not None:
                if not includes(self.start_partitions[i], self.start_sets[i]):
                    raise ValidationError(
                        f"agent {i}: start set is not inside its partition")

    def _validate_finite(self):
        set_attr = object.__setattr__
        state_sets = []
        input_sets = []
        for i in range(self.n_agents):
            alpha = _finite_family(self.state_sets[i],
                                   f"state alphabet of agent {i}")
            if any(len(v) != self.state_dims[i] for v in alpha):
                raise DimensionMismatch(
                    f"state alphabet of agent {i}: wrong vector length")
            if not alpha:
                raise ValidationError(f"agent {i}: empty state alphabet")
            state_sets.append(alpha)
            inp = _finite_family(self.input_sets[i],
                                 f"input alphabet of agent {i}")
            if any(len(v) != self.input_dims[i] for v in inp):
                raise DimensionMismatch(
                    f"input alphabet of agent {i}: wrong vector length")
            if not inp:
                inp = ((),) if self.input_dims[i] == 0 else inp
            if not inp:
                raise ValidationError(f"agent {i}: empty input alphabet")
            input_sets.append(inp)
        set_attr(self, "state_sets", tuple(state_sets))
        set_attr(self, "input_sets", tuple(input_sets))

        def norm_family(name):
            fam = getattr(self, name)
            if fam is None:
                return
            out = []
            for i, entry in enumerate(fam):
                if entry is None:
                    out.append(None)
                    continue
                pts = _finite_family(entry, f"{name} of agent {i}")
                nd = self.neighborhood_state_dim(i)
                if any(len(v) != nd for v in pts):
                    raise DimensionMismatch(
                        f"{name} of agent {i}: stacks must have length {nd}")
                out.append(pts)
            set_attr(self, name, tuple(out))

        norm_family("goal_sets")
        norm_family("start_sets")
        norm_family("start_partitions")
        norm_family("goal_partitions")
        if self.goal_partitions is not None:
            for i in range(self.n_agents):
                part = self.goal_partitions[i]
                if part is not None and \
                        not set(self.goal_sets[i]) <= set(part):
                    raise ValidationError(
                        f"agent {i}: goal set is not inside its partition")
        if self.start_sets is not None and self.start_partitions is not None:
            for i in range(self.n_agents):
                s, p = self.start_sets[i], self.start_partitions[i]
                if s is not None and p is not None and not set(s) <= set(p):
                    raise ValidationError(
                        f"agent {i}: start set is not inside its partition")


# -- axis numbering -----------------------------------------------------------


@dataclass(frozen=True)
class AxisIndex:
    """Global numbering of every state/input coordinate over the horizon.

    The trajectory vector is laid out step by step: all states of step t
    (agents in index order), then all inputs of step t.  Labels are 1-based.
    ``members[i]`` is the communication neighbourhood used for the windowed
    ("nbhd") variants.
    """

    state_dims: tuple
    input_dims: tuple
    horizon: int
    members: tuple
    _state_offsets: tuple = field(init=False, repr=False)
    _input_offsets: tuple = field(init=False, repr=False)

    def __post_init__(self):
        so = np.concatenate([[0], np.cumsum(self.state_dims)])
        io = np.concatenate([[0], np.cumsum(self.input_dims)])
        object.__setattr__(self, "_state_offsets", tuple(int(v) for v in so))
        object.__setattr__(self, "_input_offsets", tuple(int(v) for v in io))

    # -- bookkeeping ---------------------------------------------------------

    @property
    def n_agents(self) -> int:
        return len(self.state_dims)

    @property
    def total_state_dim(self) -> int:
        return self._state_offsets[-1]

    @property
    def total_input_dim(self) -> int:
        return self._input_offsets[-1]

    @property
    def step_width(self) -> int:
        return self.total_state_dim + self.total_input_dim

    def _check(self, t: int, i: int):
        if not 0 <= i < self.n_agents:
            raise IndexOutOfRange(f"agent index {i} out of range")
        if not 0 <= t <= self.horizon:
            raise IndexOutOfRange(f"time {t} outside horizon 0..{self.horizon}")

    # -- per-agent blocks ------------------------------------------------------

    def own_state_axes(self, t: int, i: int) -> AxisSet:
        """Labels of agent i's own state coordinates at step t."""
        self._check(t, i)
        base = t * self.step_width + self._state_offsets[i]
        return AxisSet(range(base + 1, base + 1 + self.state_dims[i]))

    def own_input_axes(self, t: int, i: int) -> AxisSet:
        """Labels of agent i's own input coordinates at step t."""
        self._check(t, i)
        base = (t * self.step_width + self.total_state_dim
                + self._input_offsets[i])
        return AxisSet(range(base + 1, base + 1 + self.input_dims[i]))

    def own_axes(self, t: int, i: int) -> AxisSet:
        return self.own_state_axes(t, i) | self.own_input_axes(t, i)

    # -- neighbourhood windows -------------------------------------------------

    def nbhd_state_axes(self, t: int, i: int) -> AxisSet:
        self._check(t, i)
        return AxisSet.union_of(self.own_state_axes(t, j)
                                for j in self.members[i])

    def nbhd_input_axes(self, t: int, i: int) -> AxisSet:
        self._check(t, i)
        return AxisSet.union_of(self.own_input_axes(t, j)
                                for j in self.members[i])

    def nbhd_axes(self, t: int, i: int) -> AxisSet:
        return self.nbhd_state_axes(t, i) | self.nbhd_input_axes(t, i)

    def two_hop_axes(self, t: int, i: int) -> AxisSet:
        """Union of the step-t windows of every communication neighbour."""
        self._check(t, i)
        return AxisSet.union_of(self.nbhd_axes(t, j) for j in self.members[i])

    # -- whole-horizon windows ---------------------------------------------------

    def horizon_state_axes(self, i: int) -> AxisSet:
        return AxisSet.union_of(self.nbhd_state_axes(t, i)
                                for t in range(self.horizon + 1))

    def horizon_input_axes(self, i: int) -> AxisSet:
        return AxisSet.union_of(self.nbhd_input_axes(t, i)
                                for t in range(self.horizon + 1))

    def horizon_axes(self, i: int) -> AxisSet:
        return self.horizon_state_axes(i) | self.horizon_input_axes(i)

    def two_hop_horizon_input_axes(self, i: int) -> AxisSet:
        self._check(0, i)
        return AxisSet.union_of(self.horizon_input_axes(j)
                                for j in self.members[i])

    def two_hop_horizon_axes(self, i: int) -> AxisSet:
        self._check(0, i)
        return AxisSet.union_of(self.horizon_axes(j) for j in self.members[i])

    # -- global views -------------------------------------------------------------

    @property
    def all_axes(self) -> AxisSet:
        return AxisSet(range(1, (self.horizon + 1) * self.step_width + 1))

    def global_state_axes(self, t: int) -> AxisSet:
        self._check(t, 0)
        return AxisSet.union_of(self.own_state_axes(t, j)
                                for j in range(self.n_agents))

    @property
    def global_input_axes(self) -> AxisSet:
        return AxisSet.union_of(self.own_input_axes(t, j)
                                for t in range(self.horizon + 1)
                                for j in range(self.n_agents))


def build_axis_index(spec: NetworkSpec, graph: Graph | None = None) -> AxisIndex:
    """Number the coordinates and record each agent's neighbourhood window."""
    if graph is None:
        graph = spec.communication_graph()
    if graph.n_nodes != spec.n_agents:
        raise ValidationError("graph size does not match the agent count")
    members = tuple(graph.neighborhood(i) for i in range(spec.n_agents))
    return AxisIndex(spec.state_dims, spec.input_dims, spec.horizon, members)


# -- local systems -------------------------------------------------------------


@dataclass(frozen=True)
class LocalSolution:
    """Per-agent outcome of the distributed computation.

    ``trajectories``: locally admissible trajectory set before the exchange;
    ``refined_trajectories``: the same window after the fixed point, i.e. the
    projection of the global trajectory set; ``start_states``: its shadow on
    the step-0 neighbourhood states (the backward-reachable starts);
    ``admissible_controls``: starts joined with the input sequence that
    realizes them.
    """

    node: int
    trajectories: LabeledSet
    refined_trajectories: LabeledSet
    start_states: LabeledSet
    admissible_controls: LabeledSet


def _payload_kind(payload) -> str | None:
    if isinstance(payload, AffineAgent):
        return "affine"
    if isinstance(payload, FiniteDynamics):
        return "finite"
    return None


def local_system_solution(spec: NetworkSpec, index: AxisIndex, i: int,
                          backend: str | None = None, *, task: str = "pre",
                          disturbance_lag: str = "paper") -> LabeledSet:
    """All locally admissible trajectories of agent i over its window.

    The set collects every assignment of neighbourhood states (t = 0..H) and
    inputs that satisfies the agent's own dynamics, its coupling rows, the
    per-time state/input sets, the start restriction (reach-check task only),
    the start partition for t < H, and the goal set at t = H.  An empty
    result is a valid outcome, not an error.
    """
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    kind = _payload_kind(spec.dynamics[i])
    if kind is None:
        raise UnsupportedDynamics(
            f"agent {i}: payload {type(spec.dynamics[i]).__name__} is neither "
            "affine nor a finite transition table")
    if backend is not None and backend != kind:
        raise UnsupportedDynamics(
            f"agent {i}: requested backend {backend!r} but the payload is "
            f"{kind}")
    if kind == "affine":
        mode = "reach-check" if task == "reach-check" else "pre"
        return _affine.robust_local_polytope(
            spec, index, i, mode, disturbance_lag=disturbance_lag)
    return _finite_local_solution(spec, index, i, task)


def _eval_coupling(row, states: dict, inputs: dict, i: int) -> bool:
    if isinstance(row, CouplingRow):
        total = row.offset
        for j, c in row.state_coefs.items():
            total += float(np.dot(c, states[j]))
        for j, c in row.input_coefs.items():
            total += float(np.dot(c, inputs[j]))
        if row.relation == "=":
            return abs(total) <= 1e-9
        return total <= 1e-9
    if callable(row):
        return bool(row(states, inputs))
    raise UnsupportedDynamics(
        f"agent {i}: coupling payload {type(row).__name__} is not evaluable")


def _finite_local_solution(spec: NetworkSpec, index: AxisIndex, i: int,
                           task: str) -> LabeledSet:
    H = spec.horizon
    members = index.members[i]
    cols = index.horizon_axes(i)
    dyn_nb = tuple(sorted(set(spec.dyn_neighbors[i]) | {i}))
    table = spec.dynamics[i].transitions

    start = None
    if task == "reach-check" and spec.start_sets is not None:
        start = spec.start_sets[i]
    start_part = None if spec.start_partitions is None \
        else spec.start_partitions[i]
    goal = set(spec.goal_sets[i])
    start_set = None if start is None else set(start)
    part_set = None if start_part is None else set(start_part)

    state_pos = {(t, j): cols.positions_of(index.own_state_axes(t, j))
                 for t in range(H + 1) for j in members}
    input_pos = {(t, j): cols.positions_of(index.own_input_axes(t, j))
                 for t in range(H + 1) for j in members}

    def stacks(assign_x, assign_u, t):
        xs = {j: assign_x[(t, j)] for j in members}
        us = {j: assign_u[(t, j)] for j in members}
        return xs, us

    choices = []
    keys = []
    for t in range(H + 1):
        for j in members:
            keys.append(("x", t, j))
            choices.append(spec.state_sets[j])
    for t in range(H + 1):
        for j in members:
            keys.append(("u", t, j))
            choices.append(spec.input_sets[j])

    points = []
    for combo in itertools.product(*choices):
        assign_x = {}
        assign_u = {}
        for key, val in zip(keys, combo):
            kind, t, j = key
            (assign_x if kind == "x" else assign_u)[(t, j)] = val
        ok = True
        for t in range(H):
            xs, us = stacks(assign_x, assign_u, t)
            dyn_key = (_key([v for j in dyn_nb for v in xs[j]]),
                       _key([v for j in dyn_nb for v in us[j]]),
                       assign_x[(t + 1, i)])
            if dyn_key not in table:
                ok = False
                break
            for row in spec.couplings[i]:
                if not _eval_coupling(row, xs, us, i):
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        def nbhd_stack(t):
            return _key([v for j in members for v in assign_x[(t, j)]])
        if start_set is not None and nbhd_stack(0) not in start_set:
            continue
        if part_set is not None and any(nbhd_stack(t) not in part_set
                                        for t in range(H)):
            continue
        if nbhd_stack(H) not in goal:
            continue
        z = np.zeros(len(cols))
        for t in range(H + 1):
            for j in members:
                z[state_pos[(t, j)]] = assign_x[(t, j)]
                z[input_pos[(t, j)]] = assign_u[(t, j)]
        points.append(z)
    return finite_set(cols, np.array(points).reshape(len(points), len(cols)))


# -- distributed orchestration ---------------------------------------------------


def run_distributed_reachability(
        spec: NetworkSpec, backend: str | None = None, *, task: str = "pre",
        disturbance_lag: str = "paper", max_rounds: int | None = None,
        tolerance: float = ABS_TOL,
        graph: Graph | None = None) -> tuple[list[LocalSolution], IterationTrace]:
    """Solve every agent's local system, exchange windows to a fixed point,
    and extract per-agent start states and admissible controls.

    The exchange runs on the axis-overlap graph of the horizon windows
    (windows of two agents overlap exactly when their communication
    neighbourhoods share an agent), so information can travel between nodes
    that co-constrain a shared coordinate even without a direct link.
    """
    if graph is None:
        graph = spec.communication_graph()
    index = build_axis_index(spec, graph)
    locals_ = [local_system_solution(spec, index, i, backend, task=task,
                                     disturbance_lag=disturbance_lag)
               for i in range(spec.n_agents)]
    for i, s in enumerate(locals_):
        if s.empty:
            logger.warning(
                "agent %d: local trajectory system is empty; the global "
                "trajectory set (and every extracted set) will be empty", i)
    problem = FixpointProblem([index.horizon_axes(i)
                               for i in range(spec.n_agents)],
                              locals_, tolerance)
    finals, trace = run_distributed(problem, max_rounds=max_rounds)
    solutions = []
    for i in range(spec.n_agents):
        start_axes = index.nbhd_state_axes(0, i)
        control_axes = start_axes | index.horizon_input_axes(i)
        solutions.append(LocalSolution(
            node=i,
            trajectories=locals_[i],
            refined_trajectories=finals[i],
            start_states=project_set(finals[i], start_axes),
            admissible_controls=project_set(finals[i], control_axes),
        ))
    return solutions, trace


# -- centralized route ------------------------------------------------------------


@dataclass(frozen=True)
class CentralizedSolution:
    """Monolithic counterpart: the global trajectory set plus its shadows on
    the step-0 states (``start_states``) and on states-plus-inputs
    (``admissible_controls``)."""

    trajectories: LabeledSet
    start_states: LabeledSet | None
    admissible_controls: LabeledSet | None


def _centralized_margins(spec: NetworkSpec, index: AxisIndex, G: np.ndarray,
                         disturbance_lag: str) -> np.ndarray:
    """Worst-case row margins for the monolithic system, accumulated directly
    from the one-step recursion (independent of the per-agent assembly)."""
    H = spec.horizon
    n = index.total_state_dim
    v_dims = [spec.dynamics[j].disturbance_dim for j in range(spec.n_agents)]
    v_offs = np.concatenate([[0], np.cumsum(v_dims)])
    total_v = int(v_offs[-1])
    margins = np.zeros(G.shape[0])
    if not total_v or not H:
        return margins
    A_glob = np.zeros((n, n))
    E_glob = np.zeros((n, total_v))
    s_offs = np.concatenate([[0], np.cumsum(spec.state_dims)])
    for k in range(spec.n_agents):
        ag = spec.dynamics[k]
        for j, blk in ag.A.items():
            A_glob[s_offs[k]:s_offs[k + 1], s_offs[j]:s_offs[j + 1]] = blk
        if v_dims[k]:
            E_glob[s_offs[k]:s_offs[k + 1], v_offs[k]:v_offs[k + 1]] = ag.E
    shift = 2 if disturbance_lag == "paper" else 1
    # responses[t] maps the stacked disturbance to the step-t state deviation
    responses = [np.zeros((n, H * total_v)) for _ in range(H + 1)]
    for t in range(1, H + 1):
        resp = A_glob @ responses[t - 1]
        tau = t - shift
        if 0 <= tau < H:
            resp = resp.copy()
            resp[:, tau * total_v:(tau + 1) * total_v] += E_glob
        responses[t] = resp
    width = (spec.horizon + 1) * index.step_width
    L = np.zeros((width, H * total_v))
    for t in range(H + 1):
        pos = [lab - 1 for lab in index.global_state_axes(t)]
        L[pos, :] = responses[t]
    C = G @ L
    boxes = [None if not v_dims[j]
             else _affine._box_bounds(spec.dynamics[j].disturbance_set)
             for j in range(spec.n_agents)]
    _affine._check_bounded(spec.dynamics)
    for r in range(G.shape[0]):
        total = 0.0
        for tau in range(H):
            for j in range(spec.n_agents):
                if not v_dims[j]:
                    continue
                c = C[r, tau * total_v + v_offs[j]:
                      tau * total_v + v_offs[j + 1]]
                if not np.any(c):
                    continue
                if boxes[j] is not None:
                    lo, hi = boxes[j]
                    total += float(np.sum(np.where(c > 0, c * hi, c * lo)))
                else:
                    total += lpsolve.support(
                        spec.dynamics[j].disturbance_set, c)
        margins[r] = total
    return margins


def _centralized_affine(spec: NetworkSpec, index: AxisIndex, task: str,
                        disturbance_lag: str) -> LabeledSet:
    H = spec.horizon
    width = (H + 1) * index.step_width
    cols = index.all_axes

    F_blocks, f_blocks = [], []
    for i in range(spec.n_agents):
        ag = spec.dynamics[i]
        n_i = spec.state_dims[i]
        for t in range(H):
            R = np.zeros((n_i, width))
            R[:, cols.positions_of(index.own_state_axes(t + 1, i))] = np.eye(n_i)
            for j, blk in ag.A.items():
                R[:, cols.positions_of(index.own_state_axes(t, j))] -= blk
            for j, blk in ag.B.items():
                R[:, cols.positions_of(index.own_input_axes(t, j))] -= blk
            F_blocks.append(R)
            f_blocks.append(ag.K)
    F = np.vstack(F_blocks) if F_blocks else np.zeros((0, width))
    f = np.hstack(f_blocks) if f_blocks else np.zeros(0)

    G_blocks, g_blocks = [], []

    def add(poly: HPolytope, positions):
        A, b = _affine._as_inequalities(poly)
        if not A.shape[0]:
            return
        block = np.zeros((A.shape[0], width))
        block[:, positions] = A
        G_blocks.append(block)
        g_blocks.append(b)

    for t in range(H + 1):
        for j in range(spec.n_agents):
            add(spec.state_sets[j],
                cols.positions_of(index.own_state_axes(t, j)))
            if spec.input_dims[j]:
                add(spec.input_sets[j],
                    cols.positions_of(index.own_input_axes(t, j)))
    for i in range(spec.n_agents):
        _affine._require_affine_rows(spec.couplings[i], i)
        for t in range(H):
            for row in spec.couplings[i]:
                vec = np.zeros(width)
                for j, c in row.state_coefs.items():
                    vec[cols.positions_of(index.own_state_axes(t, j))] = c
                for j, c in row.input_coefs.items():
                    vec[cols.positions_of(index.own_input_axes(t, j))] = c
                G_blocks.append(vec[None, :])
                g_blocks.append(np.array([-row.offset]))
                if row.relation == "=":
                    G_blocks.append(-vec[None, :])
                    g_blocks.append(np.array([row.offset]))
    for i in range(spec.n_agents):
        pos0 = cols.positions_of(index.nbhd_state_axes(0, i))
        if task == "reach-check" and spec.start_sets is not None and \
                spec.start_sets[i] is not None:
            add(spec.start_sets[i], pos0)
        if spec.start_partitions is not None and \
                spec.start_partitions[i] is not None:
            for t in range(H):
                add(spec.start_partitions[i],
                    cols.positions_of(index.nbhd_state_axes(t, i)))
        add(spec.goal_sets[i], cols.positions_of(index.nbhd_state_axes(H, i)))

    G = np.vstack(G_blocks) if G_blocks else np.zeros((0, width))
    g = np.hstack(g_blocks) if g_blocks else np.zeros(0)
    if any(spec.dynamics[j].has_disturbance() for j in range(spec.n_agents)):
        g = g - _centralized_margins(spec, index, G, disturbance_lag)
    return polytope_set(cols, HPolytope(G, g, F, f, dim=width))


def _centralized_finite(spec: NetworkSpec, index: AxisIndex,
                        task: str) -> LabeledSet:
    H = spec.horizon
    N = spec.n_agents
    cols = index.all_axes
    dyn_nbs = [tuple(sorted(set(spec.dyn_neighbors[i]) | {i}))
               for i in range(N)]
    tables = [spec.dynamics[i].transitions for i in range(N)]
    goals = [set(spec.goal_sets[i]) for i in range(N)]
    starts = None
    if task == "reach-check" and spec.start_sets is not None:
        starts = [None if s is None else set(s) for s in spec.start_sets]
    parts = None
    if spec.start_partitions is not None:
        parts = [None if p is None else set(p)
                 for p in spec.start_partitions]

    state_pos = {(t, j): cols.positions_of(index.own_state_axes(t, j))
                 for t in range(H + 1) for j in range(N)}
    input_pos = {(t, j): cols.positions_of(index.own_input_axes(t, j))
                 for t in range(H + 1) for j in range(N)}

    choices, keys = [], []
    for t in range(H + 1):
        for j in range(N):
            keys.append(("x", t, j))
            choices.append(spec.state_sets[j])
    for t in range(H + 1):
        for j in range(N):
            keys.append(("u", t, j))
            choices.append(spec.input_sets[j])

    points = []
    for combo in itertools.product(*choices):
        ax, au = {}, {}
        for key, val in zip(keys, combo):
            kind, t, j = key
            (ax if kind == "x" else au)[(t, j)] = val
        ok = True
        for t in range(H):
            xs = {j: ax[(t, j)] for j in range(N)}
            us = {j: au[(t, j)] for j in range(N)}
            for i in range(N):
                dyn_key = (_key([v for j in dyn_nbs[i] for v in xs[j]]),
                           _key([v for j in dyn_nbs[i] for v in us[j]]),
                           ax[(t + 1, i)])
                if dyn_key not in tables[i]:
                    ok = False
                    break
                for row in spec.couplings[i]:
                    if not _eval_coupling(row, xs, us, i):
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if not ok:
            continue
        for i in range(N):
            members = index.members[i]
            def mstack(t):
                return _key([v for j in members for v in ax[(t, j)]])
            if starts is not None and starts[i] is not None and \
                    mstack(0) not in starts[i]:
                ok = False
                break
            if parts is not None and parts[i] is not None and \
                    any(mstack(t) not in parts[i] for t in range(H)):
                ok = False
                break
            if mstack(H) not in goals[i]:
                ok = False
                break
        if not ok:
            continue
        z = np.zeros(len(cols))
        for t in range(H + 1):
            for j in range(N):
                z[state_pos[(t, j)]] = ax[(t, j)]
                z[input_pos[(t, j)]] = au[(t, j)]
        points.append(z)
    return finite_set(cols, np.array(points).reshape(len(points), len(cols)))


def centralized_reachability(
        spec: NetworkSpec, backend: str | None = None, *, task: str = "pre",
        disturbance_lag: str = "paper",
        dimension_cap: int = DEFAULT_DIMENSION_CAP,
        materialize: bool = True) -> CentralizedSolution:
    """Monolithic solution over all coordinates at once (for cross-checks).

    Refuses once the trajectory vector grows beyond ``dimension_cap``
    coordinates.  ``materialize=False`` skips the projections and returns
    only the global trajectory set (cheaper; the shadows can still be probed
    through support functions).
    """
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    index = build_axis_index(spec)
    width = (spec.horizon + 1) * index.step_width
    if width > dimension_cap:
        raise DimensionCapExceeded(
            f"monolithic system has {width} coordinates (cap {dimension_cap})")
    kind = _payload_kind(spec.dynamics[0])
    if kind is None:
        raise UnsupportedDynamics(
            f"payload {type(spec.dynamics[0]).__name__} is neither affine "
            "nor a finite transition table")
    if backend is not None and backend != kind:
        raise UnsupportedDynamics(
            f"requested backend {backend!r} but the payload is {kind}")
    if kind == "affine":
        trajectories = _centralized_affine(spec, index, task, disturbance_lag)
    else:
        trajectories = _centralized_finite(spec, index, task)
    if not materialize:
        return CentralizedSolution(trajectories, None, None)
    start_axes = index.global_state_axes(0)
    control_axes = start_axes | index.global_input_axes
    return CentralizedSolution(
        trajectories,
        project_set(trajectories, start_axes),
        project_set(trajectories, control_axes))


def goal_join(spec: NetworkSpec, index: AxisIndex | None = None) -> LabeledSet:
    """The global goal set induced by the per-agent goals: the join of their
    cylinder extensions over the step-H state coordinates."""
    if index is None:
        index = build_axis_index(spec)
    H = spec.horizon
    parts = []
    for i in range(spec.n_agents):
        axes = index.nbhd_state_axes(H, i)
        if spec.backend == "affine":
            parts.append(polytope_set(axes, spec.goal_sets[i]))
        else:
            parts.append(finite_set(axes, [list(p) for p in spec.goal_sets[i]]))
    return join_extrusions(parts, index.global_state_axes(H))


def start_join(spec: NetworkSpec, index: AxisIndex | None = None) -> LabeledSet:
    """The global start restriction induced by the per-agent start sets
    (agents without one contribute no constraint)."""
    if index is None:
        index = build_axis_index(spec)
    target = index.global_state_axes(0)
    if spec.start_sets is None:
        return polytope_set(target, HPolytope.universe(len(target))) \
            if spec.backend == "affine" else None
    parts = []
    for i in range(spec.n_agents):
        if spec.start_sets[i] is None:
            continue
        axes = index.nbhd_state_axes(0, i)
        if spec.backend == "affine":
            parts.append(polytope_set(axes, spec.start_sets[i]))
        else:
            parts.append(finite_set(axes, [list(p) for p in spec.start_sets[i]]))
    if not parts:
        return polytope_set(target, HPolytope.universe(len(target))) \
            if spec.backend == "affine" else None
    return join_extrusions(parts, target)
