"""Command line: ``dynslam run | simulate | eval | dump-graph``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import errors
from .config import GraphConfig, NoiseConfig, RunConfig, apply_overrides, load_config
from .dataio import load_sequence, read_ground_truth, read_map, write_sequence
from .evaluation import median_summary, sequence_report, summary_text, write_report
from .graph import build_global_graph
from .pipeline import run_sequence

log = logging.getLogger("dynslam")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4


def _config_flags(p: argparse.ArgumentParser):
    """One ``--name`` flag per config field; nested sections as ``--noise.sigma_p``."""
    g = p.add_argument_group("config overrides (names match the config file)")
    for f in dataclasses.fields(RunConfig):
        if f.name in ("noise", "graph"):
            continue
        g.add_argument(f"--{f.name}", dest=f"cfg:{f.name}", metavar="V", default=None)
    for section, cls in (("noise", NoiseConfig), ("graph", GraphConfig)):
        for f in dataclasses.fields(cls):
            g.add_argument(f"--{section}.{f.name}", dest=f"cfg:{section}.{f.name}", metavar="V", default=None)


def _overrides(ns) -> dict:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg:") and v is not None}


def _build_config(ns) -> RunConfig:
    cfg = load_config(ns.config) if ns.config else RunConfig()
    return apply_overrides(cfg, _overrides(ns))


# --------------------------------------------------------------------------- commands

def cmd_run(ns) -> int:
    cfg = _build_config(ns)
    if not cfg.input:
        raise errors.ConfigInvalid("run needs --input")
    if not cfg.output:
        raise errors.ConfigInvalid("run needs --output")
    seq = load_sequence(cfg.input, cfg)
    res = run_sequence(iter(seq), seq.cam, cfg, seq.ground_truth, cfg.output)
    if res.global_report is not None and not res.global_report.converged and ns.strict:
        raise errors.NotConverged("batch optimisation did not converge", res.global_report)
    if res.report is not None:
        sys.stdout.write(summary_text(res.report))
    log.info("outputs written to %s", cfg.output)
    return EXIT_OK


def cmd_simulate(ns) -> int:
    from .simulator import NoiseSpec, SceneScript, preset, simulate

    if bool(ns.preset) == bool(ns.scene):
        raise errors.ConfigInvalid("simulate needs exactly one of --preset or --scene")
    if ns.scene:
        try:
            data = yaml.safe_load(Path(ns.scene).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise errors.ConfigInvalid(f"cannot read scene {ns.scene}: {exc}") from exc
        if not isinstance(data, dict):
            raise errors.ConfigInvalid(f"scene {ns.scene} must be a mapping")
        script = SceneScript.from_dict(data)
        if ns.seed is not None:
            script.seed = ns.seed
        if ns.frames is not None:
            script.frames = ns.frames
    else:
        kw = {}
        if ns.seed is not None:
            kw["seed"] = ns.seed
        if ns.frames is not None:
            kw["frames"] = ns.frames
        script = preset(ns.preset, **kw)
    noise = dataclasses.asdict(script.noise)
    for name in ("pixel_std", "depth_std", "flow_std", "outlier_fraction"):
        v = getattr(ns, name)
        if v is not None:
            noise[name] = v
    script.noise = NoiseSpec(**noise)
    sim = simulate(script)
    out = Path(ns.output)
    write_sequence(out, sim.frames, sim.gt, flow_precision=ns.flow_precision)
    (out / "scene.yaml").write_text(yaml.safe_dump(script.to_dict(), sort_keys=False))
    log.info("%d frames written to %s", len(sim.frames), out)
    return EXIT_OK


def _load_estimate(d: Path):
    path = d / "map.txt"
    if not path.exists():
        raise errors.MissingRequiredFile(f"estimate directory lacks map.txt", path)
    return read_map(path)


def cmd_eval(ns) -> int:
    gt = read_ground_truth(ns.gt)
    if gt is None:
        raise errors.MissingRequiredFile("ground truth directory lacks gt_cam.txt", Path(ns.gt) / "gt_cam.txt")
    reports = [sequence_report(_load_estimate(Path(d)), gt, ns.frame_rate) for d in ns.est]
    out = Path(ns.output) if ns.output else None
    if len(reports) == 1:
        if out:
            write_report(reports[0], out)
        sys.stdout.write(summary_text(reports[0]))
        return EXIT_OK
    med = median_summary([r.summary() for r in reports])
    text = json.dumps(med, indent=2, sort_keys=True) + "\n"
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "median.json").write_text(text)
        for i, r in enumerate(reports):
            write_report(r, out / f"run_{i}")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_graph(ns) -> int:
    cfg = _build_config(ns)
    gmap = read_map(ns.map)
    graph = build_global_graph(gmap, cfg.graph, cfg.noise.min_track_len_graph, cfg.smooth_motion)
    if ns.output:
        with open(ns.output, "w") as fh:
            graph.dump(fh)
    else:
        graph.dump(sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynslam", description="Dynamic-scene SLAM on depth, instance masks and flow.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track and optimise a sequence directory")
    r.add_argument("--config", help="YAML config file")
    r.add_argument("--strict", action="store_true", help="fail (exit 4) when batch optimisation does not converge")
    _config_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="render a synthetic sequence")
    s.add_argument("--preset")
    s.add_argument("--scene", help="YAML scene script")
    s.add_argument("--output", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    for name in ("pixel_std", "depth_std", "flow_std", "outlier_fraction"):
        s.add_argument(f"--{name}", type=float)
    s.add_argument("--flow-precision", type=int, choices=(32, 64), default=64)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="compare estimates with ground truth; several --est give per-metric medians")
    e.add_argument("--est", nargs="+", required=True, help="run output directories")
    e.add_argument("--gt", required=True, help="sequence directory holding gt_cam.txt and gt_obj.txt")
    e.add_argument("--output")
    e.add_argument("--frame_rate", type=float, default=10.0)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-graph", help="write the batch factor graph of a map dump, one factor per line")
    d.add_argument("--map", required=True)
    d.add_argument("--config")
    d.add_argument("--out", dest="output")
    _config_flags(d)
    d.set_defaults(func=cmd_dump_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:       # usage errors are configuration errors (argparse exits with 2)
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except (errors.ConfigError, errors.ConfigInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except errors.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except errors.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except errors.DynSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
