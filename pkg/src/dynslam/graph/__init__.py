"""Factor-graph back end: residual models, graph construction and the LM solver."""
import logging

from ..config import GraphConfig
from ..worldmap import GlobalMap
from .build import FactorGraph, build_global_graph, build_local_graph, point_sigma, write_back
from .factors import DIMS, KINDS, Factor, evaluate, key_name, residual
from .solver import SolverReport, huber_threshold, optimize

log = logging.getLogger(__name__)

LOCAL_REL_TOL = 1e-4     # windows are re-solved every frame; the Huber tail is left to the next window


def local_window_optimize(gmap: GlobalMap, k: int, window: int = 20, cfg: GraphConfig | None = None,
                          max_iterations: int | None = None) -> SolverReport:
    """Refine the window's cameras and static points in place; object variables are not touched."""
    cfg = cfg or GraphConfig()
    graph = build_local_graph(gmap, k, window, cfg)
    if graph is None or not any(f.kind == "PointMeasurement" for f in graph.factors):
        return SolverReport(converged=True, skipped=True)
    it = cfg.local_max_iterations if max_iterations is None else max_iterations
    values, rep = optimize(graph, cfg, max_iterations=it, rel_tol=LOCAL_REL_TOL)
    frames = {key[1] for key in graph.values if key[0] == "X"}
    write_back(gmap, values, frames)
    return rep


def global_optimize(gmap: GlobalMap, cfg: GraphConfig | None = None, min_track_len: int = 3,
                    smooth_motion: bool = True, strict: bool = False):
    """Batch-optimise the whole map in place; returns ``(graph, report)``."""
    cfg = cfg or GraphConfig()
    graph = build_global_graph(gmap, cfg, min_track_len, smooth_motion)
    values, rep = optimize(graph, cfg, strict=strict)
    if not rep.converged:
        log.warning("batch optimisation hit its iteration limit (cost %.6g)", rep.final_cost)
    write_back(gmap, values)
    return graph, rep


__all__ = ["DIMS", "KINDS", "Factor", "FactorGraph", "SolverReport", "build_global_graph", "build_local_graph",
           "evaluate", "global_optimize", "huber_threshold", "key_name", "local_window_optimize", "optimize",
           "point_sigma", "residual", "write_back"]
