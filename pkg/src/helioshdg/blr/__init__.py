"""Block low-rank multifrontal solver for face-block systems."""
import time

from .compress import Tile, compress_tile, demote_precision, precision_tags
from .factor import BlrFactors, FactorizationError, SolveStats, factorize, solve
from .graph import BlockGraph, block_graph_from_matrix, build_block_graph, graph_reduction
from .metrics import backward_error, condition_estimate
from .ordering import amd, nested_dissection, reorder
from .symbolic import EliminationPlan, symbolic_factorize


def analyze(K, offsets, ordering: str = "amd"):
    """Block graph, ordering and symbolic plan; returns (plan, seconds)."""
    t0 = time.perf_counter()
    graph = block_graph_from_matrix(K, offsets)
    plan = symbolic_factorize(graph, reorder(graph, ordering))
    return plan, time.perf_counter() - t0


def direct_solve(K, offsets, rhs, eps_blr=None, mixed_precision=False, ordering="amd",
                 with_cond=False):
    """Analyse, factorise and solve in one call; returns (x, factors)."""
    plan, t_an = analyze(K, offsets, ordering)
    fac = factorize(K, plan, eps_blr, mixed_precision)
    fac.stats.analysis_time = t_an
    x = solve(fac, rhs)
    fac.stats.bwd = backward_error(K, x, rhs)
    if with_cond:
        fac.stats.cond = condition_estimate(fac)
    return x, fac


__all__ = [
    "BlockGraph", "BlrFactors", "EliminationPlan", "FactorizationError", "SolveStats", "Tile",
    "amd", "analyze", "backward_error", "block_graph_from_matrix", "build_block_graph",
    "compress_tile", "condition_estimate", "demote_precision", "direct_solve", "factorize",
    "graph_reduction", "nested_dissection", "precision_tags", "reorder", "solve",
    "symbolic_factorize",
]
