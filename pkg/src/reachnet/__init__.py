"""Distributed backward reachability for networked constrained systems.

The package computes backward reachable sets and admissible control
sequences for networks of locally coupled agents, either monolithically or
by a synchronous distributed iteration in which each node repeatedly joins
its neighbours' sets and projects back onto its own coordinates.
"""

from .axisset import (
    AxisSet,
    LabeledSet,
    PointTable,
    empty_set,
    extrude,
    finite_set,
    join_extrusions,
    polytope_set,
    project_set,
    project_vector,
    set_includes,
    sets_equal,
)
from .polytope import HPolytope

__version__ = "0.1.0"

__all__ = [
    "AxisSet",
    "LabeledSet",
    "PointTable",
    "HPolytope",
    "empty_set",
    "extrude",
    "finite_set",
    "join_extrusions",
    "polytope_set",
    "project_set",
    "project_vector",
    "set_includes",
    "sets_equal",
    "__version__",
]
