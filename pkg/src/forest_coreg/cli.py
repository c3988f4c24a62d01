"""``forest-coreg`` command line driver.

Exit codes: 0 success, 1 input/config error, 2 nothing could be registered
or the graph has no aerial anchor.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from . import pipeline
from .config import Config, load_config
from .errors import CoregError, GaugeUnconstrained, ParseError
from .fine_reg import filter_matches
from .geometry import PointCloud
from .ingest import load_cloud, load_mission, load_tiles, partition_tiles, save_cloud
from .pipeline import Inputs, RunOutcome

logger = logging.getLogger("forest_coreg")

EXIT_OK, EXIT_INPUT, EXIT_UNREGISTERED = 0, 1, 2


class InputError(Exception):
    pass


def _config(args) -> Config:
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    except FileNotFoundError as exc:
        raise InputError(f"config not found: {exc.filename}") from None
    except (ValueError, OSError) as exc:
        raise InputError(f"bad config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "tile_size", None) is not None:
        cfg.tile_size = args.tile_size
    return cfg


def _load_inputs(args, cfg: Config, need_als: bool = True) -> Inputs:
    try:
        als = None
        if need_als:
            if not Path(args.als).is_file():
                raise InputError(f"ALS cloud not found: {args.als}")
            als = load_cloud(args.als)
        if getattr(args, "mission", None):
            if not Path(args.mission).is_file():
                raise InputError(f"mission not found: {args.mission}")
            mission = load_mission(args.mission)
            if getattr(args, "as_tiles", False):
                return Inputs(als, tiles=partition_tiles(mission, cfg.tile_size))
            return Inputs(als, mission=mission)
        if getattr(args, "tiles", None):
            return Inputs(als, tiles=load_tiles(args.tiles, getattr(args, "tile_size", None)))
    except (ParseError, OSError) as exc:
        raise InputError(str(exc)) from None
    except CoregError as exc:
        raise InputError(f"{type(exc).__name__}: {exc}") from None
    raise InputError("one of --mission or --tiles is required")


def cmd_synth(args) -> RunOutcome:
    from .synthetic import make_dataset, write_dataset

    t0 = time.perf_counter()
    forest, als, sim = make_dataset(args.n_trees, args.extent, args.drift, args.seed, noise=args.noise,
                                    length=args.length)
    paths = write_dataset(args.out, forest, als, sim, tile_size=args.tile_size)
    logger.info("synth: %d trees, %d ALS points, %d payloads (%.1f s)", len(forest), len(als),
                len(sim.clouds), time.perf_counter() - t0)
    return RunOutcome(EXIT_OK, artifacts={k: str(v) for k, v in paths.items()})


def cmd_register(args) -> RunOutcome:
    cfg = _config(args)
    inputs = _load_inputs(args, cfg)
    out = Path(args.out)
    results, _ = pipeline.stage_register(inputs, cfg, out)
    if not any(r is not None for r in results):
        return RunOutcome(EXIT_UNREGISTERED, "no cloud could be registered")
    return RunOutcome(EXIT_OK, artifacts={"registration": str(out / "registration.json")})


def cmd_optimize(args) -> RunOutcome:
    cfg = _config(args)
    inputs = _load_inputs(args, cfg, need_als=False)
    if not Path(args.registration).is_file():
        raise InputError(f"registration file not found: {args.registration}")
    try:
        results = pipeline.load_registration(args.registration)
    except (ValueError, KeyError) as exc:
        raise InputError(f"bad registration file: {exc}") from None
    results = filter_matches(results, cfg.fine.min_inliers, cfg.fine.min_fitness)
    try:
        pipeline.stage_optimize(inputs, results, cfg, Path(args.out))
    except GaugeUnconstrained as exc:
        return RunOutcome(EXIT_UNREGISTERED, f"optimization refused: {exc}")
    return RunOutcome(EXIT_OK)


def cmd_run(args) -> RunOutcome:
    cfg = _config(args)
    inputs = _load_inputs(args, cfg)
    out = Path(args.out)
    t0 = time.perf_counter()
    results, _ = pipeline.stage_register(inputs, cfg, out)
    t1 = time.perf_counter()
    if not any(r is not None for r in results):
        return RunOutcome(EXIT_UNREGISTERED, "MatchFailed for every cloud")
    try:
        optimized, _ = pipeline.stage_optimize(inputs, results, cfg, out)
    except GaugeUnconstrained as exc:
        return RunOutcome(EXIT_UNREGISTERED, f"optimization refused: {exc}")
    t2 = time.perf_counter()
    before = pipeline.initial_clouds(inputs)
    after = pipeline.corrected_clouds(inputs, optimized.nodes)
    fused = PointCloud.concatenate(
        [pipeline.footprint_crop(inputs.als, PointCloud.concatenate(list(after.values())))]
        + list(after.values())
    )
    save_cloud(fused, out / "fused.ply")
    pipeline.run_analysis(inputs.als, before, after, cfg, out)
    t3 = time.perf_counter()
    logger.info("run: register %.1f s, optimize %.1f s, analysis %.1f s", t1 - t0, t2 - t1, t3 - t2)
    return RunOutcome(EXIT_OK)


def cmd_analyze(args) -> RunOutcome:
    cfg = _config(args)
    if not Path(args.als).is_file():
        raise InputError(f"ALS cloud not found: {args.als}")
    try:
        als = load_cloud(args.als)
        if args.mission:
            before_in = Inputs(als, mission=load_mission(args.mission))
            after_in = Inputs(als, mission=load_mission(args.optimized))
            before = pipeline.initial_clouds(before_in)
            after = pipeline.initial_clouds(after_in)
        elif args.tiles:
            before = pipeline.initial_clouds(Inputs(als, tiles=load_tiles(args.tiles)))
            after = pipeline.initial_clouds(Inputs(als, tiles=load_tiles(args.optimized)))
        else:
            raise InputError("one of --mission or --tiles is required")
    except (ParseError, OSError) as exc:
        raise InputError(str(exc)) from None
    pipeline.run_analysis(als, before, after, cfg, Path(args.out))
    return RunOutcome(EXIT_OK)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forest-coreg", description="Co-register MLS forest scans to an ALS map.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ALS + drifted MLS dataset")
    s.add_argument("--n-trees", type=int, default=200)
    s.add_argument("--extent", type=float, default=150.0)
    s.add_argument("--drift", type=float, default=2.0, help="final drift in metres per kilometre")
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--length", type=float, default=None, help="truncate the trajectory (m)")
    s.add_argument("--tile-size", type=float, default=None, help="also write a tiles/ directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def common(sp, als=True, inputs=True):
        if als:
            sp.add_argument("--als", required=True)
        if inputs:
            g = sp.add_mutually_exclusive_group(required=True)
            g.add_argument("--mission")
            g.add_argument("--tiles")
            sp.add_argument("--as-tiles", action="store_true", help="partition the mission into tiles")
        sp.add_argument("--tile-size", type=float, default=None)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--out", required=True)

    r = sub.add_parser("register", help="coarse + fine registration of every payload/tile")
    common(r)
    r.set_defaults(func=cmd_register)

    o = sub.add_parser("optimize", help="factor-graph optimization from a registration file")
    common(o, als=False)
    o.add_argument("--registration", required=True)
    o.set_defaults(func=cmd_optimize)

    u = sub.add_parser("run", help="register, optimize and analyze")
    common(u)
    u.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="error, occupancy and trait CSVs for a before/after pair")
    common(a)
    a.add_argument("--optimized", required=True, help="optimized mission file or tiles directory")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        outcome = args.func(args)
    except InputError as exc:
        print(f"forest-coreg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if outcome.message:
        print(f"forest-coreg: {outcome.message}", file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
