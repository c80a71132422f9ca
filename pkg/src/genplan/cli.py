"""Command line surface: one YAML config drives every subcommand.

Exit codes: 0 on success; 2 for configuration and usage errors, including
missing input artifacts; 3 for runtime failures such as corrupt files,
mismatched model/cache pairs, or diverged training. Every generated artifact
embeds the tool version and the resolved-config hash, and the resolved config
itself is echoed into the output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import (
    TOOL_VERSION,
    ConfigError,
    PipelineConfig,
    config_hash,
    echo_resolved,
    load_config,
)
from .experiments import (
    benchmark,
    make_world,
    mppi_sigma_sweep,
    run_episode,
    summary_csv,
    sweep_csv,
    synth_expert,
    telemetry_csv,
    trial_streams,
    trials_csv,
)
from .flow import FlowModel, train
from .maskcache import InputGrid, MaskCache, build_cache
from .planner import plan
from .svgplot import render_episode, render_plan

DATASET_HEADER = "alpha,kappa1,kappa2,kappa3"


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing {what} file: {p}")
    return p


def _stamp(cfg: PipelineConfig) -> str:
    return f"# tool={TOOL_VERSION} config={config_hash(cfg).hex()}\n"


def _write_csv(path: Path, cfg: PipelineConfig, body: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_stamp(cfg) + body)


def _write_dataset(path: Path, cfg: PipelineConfig, data: np.ndarray) -> None:
    rows = "\n".join(",".join(f"{v:.17g}" for v in row) for row in data)
    _write_csv(path, cfg, DATASET_HEADER + "\n" + rows + "\n")


def _read_dataset(path) -> np.ndarray:
    p = _require_file(path, "dataset")
    rows = []
    header_seen = False
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            header_seen = True  # column header
            continue
        rows.append([float(v) for v in line.split(",")])
    return np.array(rows)


def _load_model(cfg: PipelineConfig) -> FlowModel:
    path = _require_file(cfg.paths.model, "model")
    model, _, _ = FlowModel.load(path)
    return model


def _load_cache(cfg: PipelineConfig) -> MaskCache:
    path = _require_file(cfg.paths.cache, "cache")
    cache, _, _ = MaskCache.load(path)
    return cache


def _load_pair(cfg: PipelineConfig) -> tuple:
    model = _load_model(cfg)
    cache = _load_cache(cfg)
    if cache.flow_checksum != model.checksum():
        raise RuntimeError(
            f"cache {cfg.paths.cache} was built for a different flow model than {cfg.paths.model}"
        )
    return model, cache


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# subcommands -----------------------------------------------------------------


def cmd_gen_data(cfg: PipelineConfig, args) -> int:
    rng = np.random.default_rng(cfg.seed)
    data = synth_expert(rng, cfg.expert.n, cfg.expert.noise_std)
    _write_dataset(Path(cfg.paths.dataset), cfg, data)
    echo_resolved(cfg, _out_dir(cfg))
    print(f"wrote {len(data)} expert primitives to {cfg.paths.dataset}")
    return 0


def cmd_train(cfg: PipelineConfig, args) -> int:
    data = _read_dataset(cfg.paths.dataset)
    result = train(data, cfg.train)
    Path(cfg.paths.model).parent.mkdir(parents=True, exist_ok=True)
    result.model.save(cfg.paths.model, config_hash(cfg), TOOL_VERSION)
    echo_resolved(cfg, _out_dir(cfg))
    print(
        f"trained on {len(data)} samples; best val NLL {result.best_val_nll:.4f} "
        f"at epoch {result.best_epoch}; wrote {cfg.paths.model}"
    )
    return 0


def cmd_build_cache(cfg: PipelineConfig, args) -> int:
    model = _load_model(cfg)
    cache = build_cache(
        model,
        InputGrid(cfg.cache.k),
        cfg.cache.roi,
        ds=cfg.cache.ds,
        n_workers=cfg.cache.n_workers,
    )
    Path(cfg.paths.cache).parent.mkdir(parents=True, exist_ok=True)
    cache.save(cfg.paths.cache, config_hash(cfg), TOOL_VERSION)
    echo_resolved(cfg, _out_dir(cfg))
    frac = cache.popcounts().mean() / cache.igrid.n_cells
    print(
        f"built K={cfg.cache.k} cache over {cache.agrid.n_atomic} atomic maps "
        f"(mean rejected fraction {frac:.3f}); wrote {cfg.paths.cache}"
    )
    return 0


def cmd_plan_once(cfg: PipelineConfig, args) -> int:
    model, cache = _load_pair(cfg)
    world_rng, plan_rng, _ = trial_streams(cfg.scenario.base_seed, args.trial)
    world = make_world(cfg.scenario, world_rng)
    state = cfg.scenario.start_state()
    result = plan(state, world, model, cache, cfg.planner, plan_rng)
    out = _out_dir(cfg) / f"plan_once_{cfg.scenario.kind}_{args.trial}.svg"
    out.write_text(render_plan(world, state, result, cache.agrid))
    echo_resolved(cfg, _out_dir(cfg))
    s = result.stats
    print(
        f"plan: draws={s.draws} rejects={s.rejects} rank={s.rank} "
        f"checks={s.explicit_checks} fallback={int(s.fallback)} "
        f"cost={result.chosen_cost:.4f}; wrote {out}"
    )
    return 0


def cmd_run(cfg: PipelineConfig, args) -> int:
    model = cache = None
    if args.controller == "genplan":
        model, cache = _load_pair(cfg)
    world_rng, plan_rng, mppi_rng = trial_streams(cfg.scenario.base_seed, args.trial)
    world = make_world(cfg.scenario, world_rng)
    metrics, trace = run_episode(
        args.controller,
        world,
        cfg.scenario,
        cfg.scenario.base_seed + args.trial,
        model=model,
        cache=cache,
        plan_cfg=cfg.planner,
        mppi_cfg=cfg.mppi,
        gains=cfg.gains,
        plan_rng=plan_rng,
        mppi_rng=mppi_rng,
        record_plans=True,
    )
    out = _out_dir(cfg)
    tag = f"{args.controller}_{cfg.scenario.kind}_{args.trial}"
    _write_csv(out / f"telemetry_{tag}.csv", cfg, telemetry_csv(trace.telemetry))
    (out / f"episode_{tag}.svg").write_text(render_episode(world, trace))
    echo_resolved(cfg, out)
    print(
        f"episode: collided={int(metrics.collided)} exited={int(metrics.exited)} "
        f"terminal_x={metrics.terminal_x:.3f} avg_vel={metrics.avg_vel:.3f} "
        f"fallbacks={metrics.fallbacks}"
    )
    return 0


def cmd_bench(cfg: PipelineConfig, args) -> int:
    model = cache = None
    if args.controller == "genplan":
        model, cache = _load_pair(cfg)
    metrics, summary = benchmark(
        cfg.scenario,
        args.controller,
        model=model,
        cache=cache,
        plan_cfg=cfg.planner,
        mppi_cfg=cfg.mppi,
        gains=cfg.gains,
    )
    out = _out_dir(cfg)
    tag = f"{args.controller}_{cfg.scenario.kind}"
    _write_csv(out / f"trials_{tag}.csv", cfg, trials_csv(metrics))
    _write_csv(out / f"summary_{tag}.csv", cfg, summary_csv([summary]))
    echo_resolved(cfg, out)
    print(
        f"{summary.controller} on {summary.kind} (n={summary.n_trials}): "
        f"collision {summary.collision_pct:.0f}% exit {summary.exit_pct:.0f}% "
        f"terminal_x {summary.terminal_x_mean:.2f}+-{summary.terminal_x_std:.2f} "
        f"avg_vel {summary.avg_vel_mean:.2f}"
    )
    return 0


def cmd_sweep(cfg: PipelineConfig, args) -> int:
    import dataclasses

    scenario = dataclasses.replace(cfg.scenario, kind="culdesac")
    rows = mppi_sigma_sweep(scenario, cfg.mppi)
    out = _out_dir(cfg)
    _write_csv(out / "sweep_mppi_culdesac.csv", cfg, sweep_csv(rows))
    echo_resolved(cfg, out)
    for sigma_a, sigma_psidot, s in rows:
        print(
            f"sigma=({sigma_a:.1f},{sigma_psidot:.3f}): exit {s.exit_pct:.0f}% "
            f"collision {s.collision_pct:.0f}% terminal_x {s.terminal_x_mean:.2f} "
            f"avg_vel {s.avg_vel_mean:.2f}"
        )
    return 0


def cmd_inspect_cache(cfg: PipelineConfig, args) -> int:
    path = _require_file(cfg.paths.cache, "cache")
    cache, cfg_hash, version = MaskCache.load(path)
    pops = cache.popcounts()
    g, a = cache.igrid, cache.agrid
    print(f"cache {path}")
    print(f"  tool version: {version or '(unset)'}")
    print(f"  config hash:  {cfg_hash.hex()}")
    print(f"  flow checksum: {cache.flow_checksum.hex()}")
    print(f"  input grid:   K={g.k} over 4 dims = {g.n_cells} cells")
    print(
        f"  atomic grid:  {a.nx}x{a.ny} on [{a.x_lo},{a.x_hi}]x[{a.y_lo},{a.y_hi}], "
        f"r_atom={a.r_atom}, ds={cache.ds}"
    )
    print(
        f"  rejected cells per atomic: min {pops.min()} mean {pops.mean():.1f} "
        f"max {pops.max()} of {g.n_cells} "
        f"(mean fraction {pops.mean() / g.n_cells:.3f})"
    )
    return 0


# entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genplan",
        description="Flow-based motion-primitive planner, MPPI baseline, and benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None, help="YAML config path")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "synthesize the expert dataset CSV")
    add("train", cmd_train, "fit the flow model on the dataset")
    add("build-cache", cmd_build_cache, "precompute the collision mask cache")
    p = add("plan-once", cmd_plan_once, "single planning tick with an SVG snapshot")
    p.add_argument("--trial", type=int, default=0, help="world seed index")
    p = add("run", cmd_run, "run one closed-loop episode")
    p.add_argument("--controller", choices=("genplan", "mppi"), default="genplan")
    p.add_argument("--trial", type=int, default=0, help="world seed index")
    p = add("bench", cmd_bench, "run the configured benchmark scenario")
    p.add_argument("--controller", choices=("genplan", "mppi"), default="genplan")
    add("sweep", cmd_sweep, "MPPI noise-scale ladder on the cul-de-sac")
    add("inspect-cache", cmd_inspect_cache, "print cache header and popcount stats")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg.validate()
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"config error: missing file {e.filename or e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
