"""PMU-based linear state estimation with vectorised Gaussian belief propagation."""

__version__ = "0.1.0"

from .engine import GbpSolver, SolverConfig, run  # noqa: E402
from .factor_graph import GraphMode, build_graph, graph_stats, initialize_messages  # noqa: E402
from .messages import BROADCAST, CANONICAL, MOMENT  # noqa: E402

__all__ = [
    "BROADCAST",
    "CANONICAL",
    "MOMENT",
    "GbpSolver",
    "GraphMode",
    "SolverConfig",
    "build_graph",
    "graph_stats",
    "initialize_messages",
    "run",
]
