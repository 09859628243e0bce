"""Command-line front end: problem ingestion, run orchestration, artifacts.

A problem file is a JSON document with either an ``agents`` section (a
networked reachability problem) or an ``axis_problem`` section (a bare
fixed-point iteration over labeled sets).  ``reachnet run`` loads the file,
runs the requested mode/task combination, and writes machine-readable
artifacts into the output directory:

``result.json``
    The computed sets (per node and/or global) plus the run configuration.
``trace.json``
    Full per-round iteration record (distributed and compare modes).
``timing.json``
    Wall-clock times.  This is the only file whose bytes may differ
    between reruns; everything else is deterministic for a fixed seed.
``report.json``
    Compare mode only: per-node agreement between the distributed and the
    monolithic route (exact equality for finite sets, max support-function
    gap over a deterministic direction bundle for polytopes).
``node_XX_*.poly`` / ``node_XX_*.json`` / ``*_vertices.csv``
    Per-node result sets in the text polytope convention or as point
    lists, plus vertex lists for low-dimensional polytopes so results can
    be plotted offline.
``error.json``
    Written instead of results when the run fails; carries the error class,
    message, and exit code.

Exit codes: 0 success, 2 invalid input, 3 numerical/internal failure,
4 round budget exhausted before convergence.

Problem files number agents 1..N; diagnostics raised by the underlying
modules use their 0-based indices, while loader diagnostics name the JSON
field (``agents[2].dynamics.A[3]`` is the block of the third agent's
dynamics that multiplies the fourth agent's state).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .affine import DISTURBANCE_LAGS, AffineAgent, CouplingRow
from .axisset import (
    FINITE,
    AxisSet,
    LabeledSet,
    finite_set,
    polytope_set,
    project_set,
    sets_equal,
)
from .errors import (
    MaxRoundsExceeded,
    ParseError,
    ReachnetError,
    ValidationError,
)
from .fixpoint import (
    FixpointProblem,
    IterationTrace,
    centralized_projections,
    run_distributed,
)
from .lpsolve import support
from .netgraph import graph_from_dynamics
from .polytope import (
    ABS_TOL,
    HPolytope,
    embed_columns,
    from_text,
    from_vertices,
    to_text,
    vertices,
)
from .reachability import (
    FiniteDynamics,
    NetworkSpec,
    build_axis_index,
    centralized_reachability,
    run_distributed_reachability,
    start_join,
)

logger = logging.getLogger("reachnet.cli")

MODES = ("centralized", "distributed", "compare")
TASKS = ("pre", "reach-check", "fixpoint-only")

#: random directions added to the +/- coordinate axes when measuring
#: support-function gaps in compare mode
_EXTRA_DIRECTIONS = 8

#: vertex CSVs are only emitted up to this polytope dimension
_CSV_MAX_DIM = 3


# -- run configuration --------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Validated knobs of one CLI run."""

    mode: str
    task: str
    out_dir: Path
    tolerance: float = ABS_TOL
    max_rounds: int | None = None
    seed: int = 0
    disturbance_lag: str = "paper"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not (float(self.tolerance) > 0.0):
            raise ValidationError(
                f"tolerance must be > 0, got {self.tolerance}")
        if self.max_rounds is not None and int(self.max_rounds) < 1:
            raise ValidationError(
                f"max_rounds must be >= 1, got {self.max_rounds}")
        if self.disturbance_lag not in DISTURBANCE_LAGS:
            raise ValidationError(
                f"disturbance_lag must be one of {DISTURBANCE_LAGS}, "
                f"got {self.disturbance_lag!r}")
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "tolerance", float(self.tolerance))
        object.__setattr__(self, "seed", int(self.seed))
        if self.max_rounds is not None:
            object.__setattr__(self, "max_rounds", int(self.max_rounds))


# -- schema helpers ------------------------------------------------------------


def _fail(where: str, msg: str):
    raise ParseError(f"{where}: {msg}")


def _check_keys(obj: dict, where: str, required: tuple, optional: tuple = ()):
    if not isinstance(obj, dict):
        _fail(where, f"expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(required) - set(optional) - {"comment"})
    if unknown:
        _fail(where, f"unknown keys {unknown}")
    missing = [k for k in required if k not in obj]
    if missing:
        _fail(where, f"missing required keys {missing}")


def _int_field(obj: dict, key: str, where: str) -> int:
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        _fail(where, f"'{key}' must be an integer, got {val!r}")
    return int(val)


def _vector(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        _fail(where, "not a numeric vector")
    if arr.ndim != 1:
        _fail(where, f"expected a flat list of numbers, got shape {arr.shape}")
    return arr


def _matrix(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        _fail(where, "not a numeric matrix")
    if arr.ndim != 2:
        _fail(where, f"expected a nested list of rows, got shape {arr.shape}")
    return arr


_SET_KINDS = ("polytope", "vertices", "box", "points")


def _parse_set(obj, where: str) -> tuple[str, Any]:
    """Parse one set payload.

    Returns ``("polytope", HPolytope)`` for the ``polytope`` (text block),
    ``vertices`` (convex hull) and ``box`` ([[lo, hi], ...]) forms, and
    ``("finite", tuple_of_tuples)`` for the ``points`` form.
    """
    if not isinstance(obj, dict):
        _fail(where, f"expected an object, got {type(obj).__name__}")
    kinds = [k for k in _SET_KINDS if k in obj]
    if len(kinds) != 1:
        _fail(where, f"exactly one of {list(_SET_KINDS)} is required")
    kind = kinds[0]
    _check_keys(obj, where, (kind,))
    try:
        if kind == "polytope":
            if not isinstance(obj[kind], str):
                _fail(where, "'polytope' must hold the text block as a string")
            return "polytope", from_text(obj[kind])
        if kind == "vertices":
            return "polytope", from_vertices(_matrix(obj[kind], where))
        if kind == "box":
            rows = _matrix(obj[kind], where)
            if rows.shape[1] != 2:
                _fail(where, "'box' rows must be [lo, hi] pairs")
            return "polytope", HPolytope.from_box(rows[:, 0], rows[:, 1])
        return "finite", tuple(tuple(map(float, row))
                               for row in _matrix(obj[kind], where))
    except ParseError:
        raise
    except ReachnetError as exc:
        raise type(exc)(f"{where}: {exc}") from exc


def _parse_polytope(obj, where: str) -> HPolytope:
    kind, val = _parse_set(obj, where)
    if kind != "polytope":
        _fail(where, "a polytope payload is required here, not a point list")
    return val


def _parse_points(obj, where: str) -> tuple:
    kind, val = _parse_set(obj, where)
    if kind != "finite":
        _fail(where, "a 'points' payload is required here, not a polytope")
    return val


def _id_keyed(obj, n_agents: int, where: str) -> dict:
    """Convert a ``{"<1-based id>": value}`` mapping to 0-based int keys."""
    if not isinstance(obj, dict):
        _fail(where, "expected an object keyed by agent ids")
    out = {}
    for key, val in obj.items():
        try:
            ident = int(key)
        except (TypeError, ValueError):
            _fail(where, f"key {key!r} is not an agent id")
        if not 1 <= ident <= n_agents:
            _fail(where, f"agent id {ident} out of range 1..{n_agents}")
        out[ident - 1] = val
    return out


def _agent_index(obj: dict, key: str, n_agents: int, where: str) -> int:
    ident = _int_field(obj, key, where)
    if not 1 <= ident <= n_agents:
        _fail(where, f"'{key}' id {ident} out of range 1..{n_agents}")
    return ident - 1


# -- loading -------------------------------------------------------------------


def load_spec(path) -> NetworkSpec | FixpointProblem:
    """Load and validate a problem file.

    Returns a :class:`NetworkSpec` when the document has an ``agents``
    section and a :class:`FixpointProblem` when it has an ``axis_problem``
    section.  Diagnostics name the offending field.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: invalid JSON: {exc}") from exc
    return parse_document(doc)


def parse_document(doc) -> NetworkSpec | FixpointProblem:
    """Build the in-memory problem from an already-decoded JSON document."""
    if not isinstance(doc, dict):
        _fail("document", "top level must be an object")
    has_agents = "agents" in doc
    has_axis = "axis_problem" in doc
    if has_agents == has_axis:
        _fail("document",
              "exactly one of 'agents' and 'axis_problem' is required")
    if has_axis:
        _check_keys(doc, "document", ("axis_problem",))
        return _parse_axis_problem(doc["axis_problem"])
    _check_keys(doc, "document", ("agents", "horizon"),
                optional=("coupling", "targets"))
    return _parse_network(doc)


def _parse_axis_problem(obj) -> FixpointProblem:
    where = "axis_problem"
    _check_keys(obj, where, ("nodes",), optional=("tolerance",))
    nodes = obj["nodes"]
    if not isinstance(nodes, list) or not nodes:
        _fail(where, "'nodes' must be a non-empty list")
    axis_sets, sets = [], []
    for k, node in enumerate(nodes):
        nwhere = f"{where}.nodes[{k}]"
        _check_keys(node, nwhere, ("axes", "set"))
        try:
            axes = AxisSet(node["axes"])
        except (ReachnetError, TypeError, ValueError) as exc:
            _fail(f"{nwhere}.axes", str(exc))
        kind, val = _parse_set(node["set"], f"{nwhere}.set")
        try:
            sets.append(finite_set(axes, val) if kind == "finite"
                        else polytope_set(axes, val))
        except ReachnetError as exc:
            raise type(exc)(f"{nwhere}.set: {exc}") from exc
        axis_sets.append(axes)
    tolerance = obj.get("tolerance", ABS_TOL)
    if not isinstance(tolerance, (int, float)) or not tolerance > 0:
        _fail(f"{where}.tolerance", f"must be a positive number, got {tolerance!r}")
    return FixpointProblem(axis_sets, sets, tolerance=float(tolerance))


def _parse_dynamics(obj, n_agents: int, where: str):
    if not isinstance(obj, dict) or "type" not in obj:
        _fail(where, "dynamics needs a 'type' of 'affine' or 'finite'")
    kind = obj["type"]
    if kind == "affine":
        _check_keys(obj, where, ("type", "A"),
                    optional=("B", "K", "E", "disturbance_set"))
        A = {j: _matrix(v, f"{where}.A[{j + 1}]")
             for j, v in _id_keyed(obj["A"], n_agents, f"{where}.A").items()}
        B = {j: _matrix(v, f"{where}.B[{j + 1}]")
             for j, v in _id_keyed(obj.get("B", {}), n_agents,
                                   f"{where}.B").items()}
        K = (None if "K" not in obj
             else _vector(obj["K"], f"{where}.K"))
        E = (None if "E" not in obj
             else _matrix(obj["E"], f"{where}.E"))
        dset = (None if "disturbance_set" not in obj
                else _parse_polytope(obj["disturbance_set"],
                                     f"{where}.disturbance_set"))
        return "affine", dict(A=A, B=B, K=K, E=E, disturbance_set=dset)
    if kind == "finite":
        _check_keys(obj, where, ("type", "transitions"))
        rows = obj["transitions"]
        if not isinstance(rows, list):
            _fail(f"{where}.transitions", "must be a list of triples")
        triples = set()
        for k, row in enumerate(rows):
            rwhere = f"{where}.transitions[{k}]"
            if not isinstance(row, list) or len(row) != 3:
                _fail(rwhere, "each transition is [states, inputs, next_state]")
            triples.add(tuple(tuple(map(float, _vector(part, rwhere)))
                              for part in row))
        return "finite", frozenset(triples)
    _fail(f"{where}.type", f"unknown dynamics type {kind!r}")


def _parse_network(doc) -> NetworkSpec:
    agents = doc["agents"]
    if not isinstance(agents, list) or not agents:
        _fail("agents", "must be a non-empty list")
    N = len(agents)
    dims, idims, dyn_nb, con_nb = [], [], [], []
    state_payloads, input_payloads, dyn_payloads = [], [], []
    kinds = set()
    for k, ag in enumerate(agents):
        where = f"agents[{k}]"
        _check_keys(ag, where, ("id", "state_dim", "input_dim", "dynamics"),
                    optional=("dynamics_neighbors", "constraint_neighbors",
                              "state_set", "input_set"))
        if _int_field(ag, "id", where) != k + 1:
            _fail(f"{where}.id", f"agent ids must be 1..{N} in order, "
                                 f"got {ag['id']}")
        dims.append(_int_field(ag, "state_dim", where))
        idims.append(_int_field(ag, "input_dim", where))
        for key, dest in (("dynamics_neighbors", dyn_nb),
                          ("constraint_neighbors", con_nb)):
            lst = ag.get(key, [])
            if not isinstance(lst, list):
                _fail(f"{where}.{key}", "must be a list of agent ids")
            entry = []
            for ident in lst:
                if isinstance(ident, bool) or not isinstance(ident, int) or \
                        not 1 <= ident <= N:
                    _fail(f"{where}.{key}",
                          f"agent id {ident!r} out of range 1..{N}")
                entry.append(ident - 1)
            dest.append(tuple(entry))
        kind, payload = _parse_dynamics(ag["dynamics"], N,
                                        f"{where}.dynamics")
        kinds.add(kind)
        dyn_payloads.append(payload)
        state_payloads.append(ag.get("state_set"))
        input_payloads.append(ag.get("input_set"))
    if len(kinds) > 1:
        _fail("agents", "all agents must share one dynamics type")
    backend = kinds.pop()

    state_sets, input_sets, dynamics = [], [], []
    for k in range(N):
        where = f"agents[{k}]"
        if state_payloads[k] is None:
            _fail(f"{where}.state_set", "is required")
        if backend == "affine":
            state_sets.append(_parse_polytope(state_payloads[k],
                                              f"{where}.state_set"))
            if input_payloads[k] is None:
                if idims[k] > 0:
                    _fail(f"{where}.input_set",
                          "is required when input_dim > 0")
                input_sets.append(None)
            else:
                input_sets.append(_parse_polytope(input_payloads[k],
                                                  f"{where}.input_set"))
            pay = dyn_payloads[k]
            try:
                dynamics.append(AffineAgent(dims[k], idims[k], **pay))
            except ReachnetError as exc:
                raise type(exc)(f"{where}.dynamics: {exc}") from exc
        else:
            state_sets.append(_parse_points(state_payloads[k],
                                            f"{where}.state_set"))
            if input_payloads[k] is None:
                if idims[k] > 0:
                    _fail(f"{where}.input_set",
                          "is required when input_dim > 0")
                input_sets.append(())
            else:
                input_sets.append(_parse_points(input_payloads[k],
                                                f"{where}.input_set"))
            dynamics.append(FiniteDynamics(dyn_payloads[k]))

    couplings = [[] for _ in range(N)]
    for k, row in enumerate(doc.get("coupling", [])):
        where = f"coupling[{k}]"
        _check_keys(row, where, ("agent",),
                    optional=("state_coefs", "input_coefs", "offset",
                              "relation"))
        i = _agent_index(row, "agent", N, where)
        sc = {j: _vector(v, f"{where}.state_coefs[{j + 1}]")
              for j, v in _id_keyed(row.get("state_coefs", {}), N,
                                    f"{where}.state_coefs").items()}
        ic = {j: _vector(v, f"{where}.input_coefs[{j + 1}]")
              for j, v in _id_keyed(row.get("input_coefs", {}), N,
                                    f"{where}.input_coefs").items()}
        offset = row.get("offset", 0.0)
        if isinstance(offset, bool) or not isinstance(offset, (int, float)):
            _fail(f"{where}.offset", f"must be a number, got {offset!r}")
        try:
            couplings[i].append(CouplingRow(sc, ic, float(offset),
                                            row.get("relation", "<=")))
        except ReachnetError as exc:
            raise type(exc)(f"{where}: {exc}") from exc

    graph = graph_from_dynamics(dyn_nb, con_nb)
    goal, start, start_part, goal_part = ([None] * N for _ in range(4))
    families = {"goal": goal, "start": start,
                "start_partition": start_part, "goal_partition": goal_part}
    for k, tgt in enumerate(doc.get("targets", [])):
        where = f"targets[{k}]"
        _check_keys(tgt, where, ("agent", "goal"),
                    optional=("over", "start", "start_partition",
                              "goal_partition"))
        i = _agent_index(tgt, "agent", N, where)
        if goal[i] is not None:
            _fail(where, f"agent {i + 1} already has a targets entry")
        over = tgt.get("over", "neighborhood")
        if over not in ("own", "neighborhood"):
            _fail(f"{where}.over",
                  f"must be 'own' or 'neighborhood', got {over!r}")
        members = graph.neighborhood(i)
        for key, family in families.items():
            if key not in tgt:
                continue
            fwhere = f"{where}.{key}"
            if backend == "affine":
                poly = _parse_polytope(tgt[key], fwhere)
                if over == "own":
                    poly = _extrude_own(poly, dims, members, i, fwhere)
                family[i] = poly
            else:
                pts = _parse_points(tgt[key], fwhere)
                if over == "own" and members != (i,):
                    raise ValidationError(
                        f"{fwhere}: finite sets over own coordinates cannot "
                        f"be extended to the neighbourhood stack "
                        f"{tuple(j + 1 for j in members)}; list the stacked "
                        "points explicitly")
                family[i] = pts
    for i in range(N):
        if goal[i] is None:
            _fail("targets", f"agent {i + 1} has no goal set")

    return NetworkSpec(
        state_dims=tuple(dims), input_dims=tuple(idims),
        dyn_neighbors=tuple(dyn_nb), con_neighbors=tuple(con_nb),
        horizon=_int_field(doc, "horizon", "document"),
        state_sets=tuple(state_sets), input_sets=tuple(input_sets),
        goal_sets=tuple(goal), dynamics=tuple(dynamics),
        couplings=tuple(tuple(rows) for rows in couplings),
        start_sets=None if all(s is None for s in start) else tuple(start),
        start_partitions=(None if all(s is None for s in start_part)
                          else tuple(start_part)),
        goal_partitions=(None if all(s is None for s in goal_part)
                         else tuple(goal_part)),
    )


def _extrude_own(poly: HPolytope, dims, members, i: int,
                 where: str) -> HPolytope:
    """Embed an own-state set into the stacked neighbourhood coordinates."""
    if poly.dim != dims[i]:
        _fail(where, f"own-coordinate set has dimension {poly.dim}, "
                     f"agent state dimension is {dims[i]}")
    offset = sum(dims[j] for j in members if j < i)
    total = sum(dims[j] for j in members)
    return embed_columns(poly, total, range(offset, offset + dims[i]))


# -- serialization -------------------------------------------------------------


def _set_payload(obj) -> dict:
    if isinstance(obj, HPolytope):
        return {"polytope": to_text(obj)}
    return {"points": sorted([float(x) for x in row] for row in obj)}


def serialize(obj) -> dict:
    """Canonical JSON-ready document for a problem; inverse of parsing.

    ``parse_document(serialize(x))`` reconstructs an equivalent problem and
    ``serialize`` is idempotent across that round trip, which is what the
    round-trip tests pin down.
    """
    if isinstance(obj, FixpointProblem):
        return {"axis_problem": {
            "tolerance": obj.tolerance,
            "nodes": [{"axes": [int(a) for a in axes],
                       "set": _labeled_payload(s)}
                      for axes, s in zip(obj.axis_sets, obj.initial_sets)],
        }}
    if not isinstance(obj, NetworkSpec):
        raise ValidationError(
            f"cannot serialize a {type(obj).__name__}")
    agents = []
    for i in range(obj.n_agents):
        entry: dict[str, Any] = {
            "id": i + 1,
            "state_dim": obj.state_dims[i],
            "input_dim": obj.input_dims[i],
            "dynamics_neighbors": [j + 1 for j in obj.dyn_neighbors[i]],
            "constraint_neighbors": [j + 1 for j in obj.con_neighbors[i]],
            "state_set": _set_payload(obj.state_sets[i]),
        }
        if obj.backend == "affine":
            if obj.input_dims[i] > 0:
                entry["input_set"] = _set_payload(obj.input_sets[i])
            ag = obj.dynamics[i]
            dyn: dict[str, Any] = {
                "type": "affine",
                "A": {str(j + 1): ag.A[j].tolist() for j in sorted(ag.A)},
                "B": {str(j + 1): ag.B[j].tolist() for j in sorted(ag.B)},
            }
            if np.any(ag.K):
                dyn["K"] = ag.K.tolist()
            if ag.E is not None:
                dyn["E"] = ag.E.tolist()
                dyn["disturbance_set"] = _set_payload(ag.disturbance_set)
            entry["dynamics"] = dyn
        else:
            if obj.input_sets[i] != ((),):
                entry["input_set"] = _set_payload(obj.input_sets[i])
            entry["dynamics"] = {
                "type": "finite",
                "transitions": sorted(
                    [list(xs), list(us), list(nxt)]
                    for xs, us, nxt in obj.dynamics[i].transitions),
            }
        agents.append(entry)

    coupling = []
    for i in range(obj.n_agents):
        for row in obj.couplings[i]:
            coupling.append({
                "agent": i + 1,
                "state_coefs": {str(j + 1): row.state_coefs[j].tolist()
                                for j in sorted(row.state_coefs)},
                "input_coefs": {str(j + 1): row.input_coefs[j].tolist()
                                for j in sorted(row.input_coefs)},
                "offset": float(row.offset),
                "relation": row.relation,
            })

    targets = []
    for i in range(obj.n_agents):
        entry = {"agent": i + 1, "goal": _set_payload(obj.goal_sets[i])}
        for key, fam in (("start", obj.start_sets),
                         ("start_partition", obj.start_partitions),
                         ("goal_partition", obj.goal_partitions)):
            if fam is not None and fam[i] is not None:
                entry[key] = _set_payload(fam[i])
        targets.append(entry)

    doc: dict[str, Any] = {"horizon": obj.horizon, "agents": agents,
                           "targets": targets}
    if coupling:
        doc["coupling"] = coupling
    return doc


def save_spec(obj, path) -> None:
    """Write a problem in the canonical JSON form accepted by load_spec."""
    _write_json(Path(path), serialize(obj))


# -- artifact writers ----------------------------------------------------------


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _labeled_payload(s: LabeledSet) -> dict:
    if s.backend == FINITE:
        return {"points": [[float(x) for x in row] for row in s.data.points]}
    return {"polytope": to_text(s.data)}


def _labeled_to_json(s: LabeledSet) -> dict:
    out = {"axes": [int(a) for a in s.axes]}
    out.update(_labeled_payload(s))
    return out


def _trace_to_json(trace: IterationTrace) -> dict:
    return {
        "converged": trace.converged,
        "rounds_executed": trace.rounds_executed,
        "fixed_point_round": trace.fixed_point_round,
        "messages_sent": trace.messages_sent,
        "rounds": [{
            "round": rec.round_index,
            "changed": [bool(c) for c in rec.changed],
            "nodes": [_labeled_to_json(s) for s in rec.sets],
        } for rec in trace.records],
    }


def _write_node_set(out: Path, stem: str, s: LabeledSet) -> None:
    """One per-node result set: text polytope or point list, plus a vertex
    CSV for plotting when the polytope is low-dimensional and bounded."""
    if s.backend == FINITE:
        _write_json(out / f"{stem}.json", _labeled_to_json(s))
        return
    (out / f"{stem}.poly").write_text(to_text(s.data))
    if len(s.axes) > _CSV_MAX_DIM:
        return
    try:
        verts = vertices(s.data)
    except ReachnetError as exc:
        logger.info("%s: skipping vertex CSV (%s)", stem, exc)
        return
    rows = sorted(map(tuple, np.round(verts, 9) + 0.0))
    with (out / f"{stem}_vertices.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"axis_{a}" for a in s.axes])
        writer.writerows([repr(float(x)) for x in row] for row in rows)


def _write_error(out: Path, exc: Exception, code: int) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "error.json", {
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": code,
        })
    except OSError:
        # the error file is a convenience; stderr already carries the
        # message, so an unwritable output path must not mask it
        pass


# -- compare-mode gap measurement ----------------------------------------------


def _direction_bundle(dim: int, rng: np.random.Generator) -> np.ndarray:
    eye = np.eye(dim)
    extra = rng.standard_normal((_EXTRA_DIRECTIONS, dim))
    norms = np.linalg.norm(extra, axis=1, keepdims=True)
    extra = extra / np.where(norms == 0.0, 1.0, norms)
    return np.vstack([eye, -eye, extra])


def _support_gap(p: HPolytope, q: HPolytope, directions,
                 embed_positions=None, q_dim: int | None = None) -> float:
    """Max |h_p(d) - h_q(d)| over the bundle.

    ``q`` may live in a larger space: the direction is then embedded at
    ``embed_positions`` (support of a projection equals support of the
    original in the embedded direction).
    """
    gap = 0.0
    for d in directions:
        sp = support(p, d)
        if embed_positions is None:
            sq = support(q, d)
        else:
            full = np.zeros(q_dim)
            full[embed_positions] = d
            sq = support(q, full)
        if np.isinf(sp) and np.isinf(sq):
            continue
        gap = max(gap, abs(sp - sq))
    return gap


def _compare_sets(dist: LabeledSet, cent: LabeledSet, tolerance: float,
                  rng: np.random.Generator, *, cent_positions=None,
                  cent_dim: int | None = None) -> dict:
    """Agreement record between one distributed and one monolithic set."""
    if dist.backend == FINITE:
        return {"exact_match": sets_equal(dist, cent, tolerance),
                "max_support_gap": None}
    if dist.empty or cent.data.is_empty():
        both = dist.empty and cent.data.is_empty()
        return {"exact_match": both, "max_support_gap": 0.0 if both else None}
    dirs = _direction_bundle(len(dist.axes), rng)
    gap = _support_gap(dist.data, cent.data, dirs,
                       embed_positions=cent_positions, q_dim=cent_dim)
    return {"exact_match": None, "max_support_gap": gap}


# -- run orchestration ---------------------------------------------------------


def run(config: RunConfig, problem) -> int:
    """Execute one configured run and write all artifacts.

    Returns the process exit code (0 ok, 2 invalid input, 3 numerical
    failure, 4 round budget exhausted).
    """
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        if config.task == "fixpoint-only":
            if not isinstance(problem, FixpointProblem):
                raise ValidationError(
                    "task 'fixpoint-only' needs a problem file with an "
                    "'axis_problem' section")
            trace = _run_fixpoint(config, problem, out)
        else:
            if not isinstance(problem, NetworkSpec):
                raise ValidationError(
                    f"task {config.task!r} needs a problem file with an "
                    "'agents' section")
            if config.task == "reach-check":
                _check_start_sets(problem)
            trace = _run_network(config, problem, out)
    except MaxRoundsExceeded as exc:
        if exc.trace is not None:
            _write_json(out / "trace.json", _trace_to_json(exc.trace))
        _write_error(out, exc, 4)
        return 4
    except ValidationError as exc:
        _write_error(out, exc, 2)
        return 2
    except ReachnetError as exc:
        _write_error(out, exc, 3)
        return 3
    timing = {"total_seconds": time.perf_counter() - started}
    if trace is not None:
        timing["per_round_seconds"] = [rec.wall_time for rec in trace.records]
    _write_json(out / "timing.json", timing)
    return 0


def _check_start_sets(spec: NetworkSpec) -> None:
    if spec.start_sets is None:
        raise ValidationError(
            "task 'reach-check' needs at least one start set in 'targets'")
    if spec.backend == "finite":
        missing = [i + 1 for i, s in enumerate(spec.start_sets) if s is None]
        if missing:
            raise ValidationError(
                f"task 'reach-check' with finite sets needs a start set for "
                f"every agent; missing for {missing}")


def _config_header(config: RunConfig) -> dict:
    return {
        "version": __version__,
        "mode": config.mode,
        "task": config.task,
        "tolerance": config.tolerance,
        "max_rounds": config.max_rounds,
        "seed": config.seed,
        "disturbance_lag": config.disturbance_lag,
    }


def _convergence_summary(trace: IterationTrace) -> dict:
    return {
        "converged": trace.converged,
        "rounds_executed": trace.rounds_executed,
        "fixed_point_round": trace.fixed_point_round,
        "messages_sent": trace.messages_sent,
    }


def _run_fixpoint(config: RunConfig, problem: FixpointProblem,
                  out: Path) -> IterationTrace | None:
    problem = FixpointProblem(problem.axis_sets, problem.initial_sets,
                              tolerance=config.tolerance)
    result = _config_header(config)
    trace = None
    if config.mode in ("distributed", "compare"):
        finals, trace = run_distributed(problem, max_rounds=config.max_rounds)
        result["nodes"] = [dict(node=i + 1, **_labeled_to_json(s))
                           for i, s in enumerate(finals)]
        result["convergence"] = _convergence_summary(trace)
        _write_json(out / "trace.json", _trace_to_json(trace))
        for i, s in enumerate(finals):
            _write_node_set(out, f"node_{i + 1:02d}_fixpoint", s)
    if config.mode in ("centralized", "compare"):
        cents = centralized_projections(problem)
        key = "centralized_nodes" if config.mode == "compare" else "nodes"
        result[key] = [dict(node=i + 1, **_labeled_to_json(s))
                       for i, s in enumerate(cents)]
        if config.mode == "centralized":
            for i, s in enumerate(cents):
                _write_node_set(out, f"node_{i + 1:02d}_fixpoint", s)
    _write_json(out / "result.json", result)
    if config.mode == "compare":
        rng = np.random.default_rng(config.seed)
        per_node = []
        for i, (d, c) in enumerate(zip(finals, cents)):
            rec = _compare_sets(d, c, config.tolerance, rng)
            per_node.append(dict(node=i + 1, **rec))
        _write_json(out / "report.json",
                    _build_report(config, per_node, trace))
    return trace


def _build_report(config: RunConfig, per_node: list, trace: IterationTrace,
                  extra: dict | None = None) -> dict:
    matches = [rec["exact_match"] for rec in per_node]
    gaps = [rec["max_support_gap"] for rec in per_node
            if rec["max_support_gap"] is not None]
    report = {
        "mode": config.mode,
        "task": config.task,
        "seed": config.seed,
        "per_node": per_node,
        "exact_match": (None if all(m is None for m in matches)
                        else all(m for m in matches if m is not None)),
        "max_support_gap": max(gaps) if gaps else None,
    }
    if any(m is False for m in matches):
        report["exact_match"] = False
    report["directions_per_set"] = _EXTRA_DIRECTIONS
    report.update(_convergence_summary(trace))
    if extra:
        report.update(extra)
    return report


def _run_network(config: RunConfig, spec: NetworkSpec,
                 out: Path) -> IterationTrace | None:
    index = build_axis_index(spec)
    result = _config_header(config)
    trace = None
    solutions = None
    if config.mode in ("distributed", "compare"):
        solutions, trace = run_distributed_reachability(
            spec, task=config.task, disturbance_lag=config.disturbance_lag,
            max_rounds=config.max_rounds, tolerance=config.tolerance)
        nodes = []
        for sol in solutions:
            i = sol.node
            entry = {
                "node": i + 1,
                "start_states": _labeled_to_json(sol.start_states),
                "admissible_controls": _labeled_to_json(
                    sol.admissible_controls),
            }
            nodes.append(entry)
            _write_node_set(out, f"node_{i + 1:02d}_start", sol.start_states)
            _write_node_set(out, f"node_{i + 1:02d}_controls",
                            sol.admissible_controls)
        result["nodes"] = nodes
        result["convergence"] = _convergence_summary(trace)
        _write_json(out / "trace.json", _trace_to_json(trace))
        if config.task == "reach-check":
            flags = _distributed_reach_flags(spec, index, solutions,
                                             config.tolerance)
            result["per_node_reachable"] = flags
            result["reachable"] = all(flags)

    central = None
    if config.mode in ("centralized", "compare"):
        materialize = config.mode == "centralized" or \
            config.task == "reach-check"
        central = centralized_reachability(
            spec, task=config.task, disturbance_lag=config.disturbance_lag,
            materialize=materialize)
        if config.mode == "centralized":
            result["start_states"] = _labeled_to_json(central.start_states)
            result["admissible_controls"] = _labeled_to_json(
                central.admissible_controls)
            _write_node_set(out, "global_start", central.start_states)
            _write_node_set(out, "global_controls",
                            central.admissible_controls)
            if config.task == "reach-check":
                result["reachable"] = _centralized_reach_flag(
                    spec, central, config.tolerance)

    _write_json(out / "result.json", result)
    if config.mode == "compare":
        _write_json(out / "report.json",
                    _network_report(config, spec, index, solutions, trace,
                                    central))
    return trace


def _distributed_reach_flags(spec: NetworkSpec, index, solutions,
                             tolerance: float) -> list[bool]:
    """Per node: does every declared start state admit a trajectory?

    The computed start states are always contained in the declared joined
    start restriction; the check is whether the containment is tight.
    """
    joined = start_join(spec, index)
    flags = []
    for sol in solutions:
        expected = project_set(joined, index.nbhd_state_axes(0, sol.node))
        flags.append(bool(sets_equal(sol.start_states, expected, tolerance)))
    return flags


def _centralized_reach_flag(spec: NetworkSpec, central,
                            tolerance: float) -> bool:
    joined = start_join(spec)
    return bool(sets_equal(central.start_states, joined, tolerance))


def _network_report(config: RunConfig, spec: NetworkSpec, index, solutions,
                    trace: IterationTrace, central) -> dict:
    rng = np.random.default_rng(config.seed)
    all_axes = index.all_axes
    per_node = []
    for sol in solutions:
        i = sol.node
        if spec.backend == "finite":
            window = _compare_sets(
                sol.refined_trajectories,
                project_set(central.trajectories, index.horizon_axes(i)),
                config.tolerance, rng)
            start = _compare_sets(
                sol.start_states,
                project_set(central.trajectories,
                            index.nbhd_state_axes(0, i)),
                config.tolerance, rng)
            controls = _compare_sets(
                sol.admissible_controls,
                project_set(central.trajectories,
                            sol.admissible_controls.axes),
                config.tolerance, rng)
        else:
            def against_global(local: LabeledSet) -> dict:
                positions = all_axes.positions_of(local.axes)
                return _compare_sets(local, central.trajectories,
                                     config.tolerance, rng,
                                     cent_positions=positions,
                                     cent_dim=len(all_axes))
            window = against_global(sol.refined_trajectories)
            start = against_global(sol.start_states)
            controls = against_global(sol.admissible_controls)
        gaps = [rec["max_support_gap"] for rec in (window, start, controls)
                if rec["max_support_gap"] is not None]
        matches = [rec["exact_match"] for rec in (window, start, controls)]
        per_node.append({
            "node": i + 1,
            "window": window, "start_states": start,
            "admissible_controls": controls,
            "max_support_gap": max(gaps) if gaps else None,
            "exact_match": (None if all(m is None for m in matches)
                            else all(m for m in matches if m is not None)),
        })
    extra = {}
    if config.task == "reach-check":
        flags = _distributed_reach_flags(spec, index, solutions,
                                         config.tolerance)
        extra["reachable_distributed"] = all(flags)
        extra["reachable_centralized"] = _centralized_reach_flag(
            spec, central, config.tolerance)
    return _build_report(config, per_node, trace, extra)


# -- entry point ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reachnet",
        description="Backward reachability for networked constrained "
                    "systems, computed monolithically or by a distributed "
                    "fixed-point exchange.")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one problem file")
    runp.add_argument("--mode", required=True, choices=MODES,
                      help="computation route (compare runs both and "
                           "reports their agreement)")
    runp.add_argument("--task", required=True, choices=TASKS,
                      help="what to compute")
    runp.add_argument("--spec", required=True, type=Path,
                      help="problem description file (JSON)")
    runp.add_argument("--out", required=True, type=Path,
                      help="output directory for result files")
    runp.add_argument("--tol", type=float, default=ABS_TOL,
                      help="set-comparison tolerance (default %(default)s)")
    runp.add_argument("--max-rounds", type=int, default=None,
                      help="round budget for the distributed iteration")
    runp.add_argument("--seed", type=int, default=0,
                      help="seed for the compare-mode direction bundle")
    runp.add_argument("--disturbance-lag", choices=DISTURBANCE_LAGS,
                      default="paper",
                      help="disturbance propagation convention")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = RunConfig(mode=args.mode, task=args.task, out_dir=args.out,
                           tolerance=args.tol, max_rounds=args.max_rounds,
                           seed=args.seed,
                           disturbance_lag=args.disturbance_lag)
        try:
            config.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(
                f"cannot create output directory {config.out_dir}: "
                f"{exc}") from exc
        problem = load_spec(args.spec)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error(Path(args.out), exc, 2)
        return 2
    except ReachnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error(Path(args.out), exc, 3)
        return 3
    code = run(config, problem)
    if code == 0:
        print(f"wrote results to {config.out_dir}")
    else:
        print(f"run failed with exit code {code}; see "
              f"{config.out_dir / 'error.json'}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
