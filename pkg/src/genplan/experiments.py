"""Benchmark scenarios: world generators, synthetic expert data, episode runner.

Two scenarios mirror the benchmark suite: a field of random circular obstacles
and a deterministic cul-de-sac trap. Episodes run a ground-truth simulation at
100 Hz; the sampling planner replans at 5 Hz with PID tracking in between,
while the MPPI baseline issues controls at 50 Hz held over two sim ticks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .flow import FlowModel
from .maskcache import MaskCache
from .mppi import MppiConfig, MppiState, mppi_step
from .planner import PlanConfig, plan
from .primitives import (
    PRIMITIVE_DURATION,
    PosePath,
    PrimitiveParams,
    fit_params,
    reconstruct,
)
from .vehicle import (
    ControlInput,
    PidGains,
    VehicleState,
    World,
    path_collides,
    pid_track,
    step,
)

COLLISION_CHECK_DS = 0.005


@dataclass(frozen=True)
class RandomWorldConfig:
    n_obstacles: int = 50
    x_range: tuple = (0.0, 5.0)
    y_range: tuple = (-3.0, 3.0)
    radius: float = 0.15


@dataclass(frozen=True)
class CuldesacConfig:
    """U-shaped trap opening toward -x; all walls are rows of circles.

    Two constraints size the trap. The side walls start deep enough that a
    maximum-curvature turn from the start pose clears them before the
    corridor closes (the tightest trackable turn, radius ~2.1 m, crosses
    the wall clearance band |y| ~ 1.3 near x = 1.4; walls flanking the
    approach any earlier would make the trap inescapable for every
    controller). The pocket is wide and deep enough that no near-straight
    corner cut escapes: every exit is a full go-around of the mouth, a
    long committed maneuver the primitive library encodes as a single
    sample but a control-noise average around a straight seed never
    completes. Perturbed rollouts trade forward progress for wall
    proximity, so the noise-weighted mean stays in the pocket and slows
    down as noise grows.
    """

    rear_x: float = 4.8
    half_width: float = 1.15
    side_x_start: float = 1.9
    n_rear: int = 16
    n_side: int = 20
    radius: float = 0.15

    @property
    def exit_x(self) -> float:
        return self.rear_x


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "random"  # random | culdesac
    duration_s: float = 2.5
    start_x: float = -0.5
    start_y: float = 0.0
    start_heading: float = 0.0
    start_speed: float = 2.5
    n_trials: int = 100
    base_seed: int = 1000
    random_world: RandomWorldConfig = field(default_factory=RandomWorldConfig)
    culdesac: CuldesacConfig = field(default_factory=CuldesacConfig)

    def start_state(self) -> VehicleState:
        return VehicleState(
            self.start_x, self.start_y, self.start_speed, self.start_heading, 0.0
        )


def gen_random_world(rng: np.random.Generator, cfg: RandomWorldConfig = RandomWorldConfig(),
                     start_xy=(-0.5, 0.0)) -> World:
    """Uniformly scattered equal-radius circles; the start point is kept free."""
    obs = np.empty((cfg.n_obstacles, 3))
    for i in range(cfg.n_obstacles):
        while True:
            cx = rng.uniform(*cfg.x_range)
            cy = rng.uniform(*cfg.y_range)
            if (cx - start_xy[0]) ** 2 + (cy - start_xy[1]) ** 2 >= cfg.radius**2:
                break
        obs[i] = (cx, cy, cfg.radius)
    return World(obs)


def gen_culdesac(cfg: CuldesacConfig = CuldesacConfig()) -> World:
    rear_y = np.linspace(-cfg.half_width, cfg.half_width, cfg.n_rear)
    side_x = np.linspace(cfg.side_x_start, cfg.rear_x, cfg.n_side)
    pts = [(cfg.rear_x, y) for y in rear_y]
    pts += [(x, cfg.half_width) for x in side_x]
    pts += [(x, -cfg.half_width) for x in side_x]
    seen = set()
    uniq = []
    for x, y in pts:
        key = (round(x, 9), round(y, 9))
        if key not in seen:
            seen.add(key)
            uniq.append((x, y))
    obs = np.array([[x, y, cfg.radius] for x, y in uniq])
    return World(obs)


# synthetic expert data -------------------------------------------------------


def _sample_family(rng: np.random.Generator) -> PrimitiveParams:
    """One maneuver from a declared mixture of teleop-style driving families."""
    u = rng.random()
    if u < 0.20:  # straight cruise; slower than committed swerves (no blind flooring)
        alpha = rng.uniform(3.5, 5.0)
        ks = rng.normal(0.0, 0.03, 3)
    elif u < 0.36:  # left swerve and return
        alpha = rng.uniform(2.5, 5.0)
        k1 = rng.uniform(0.15, 0.35)
        ks = [k1, -k1 * rng.uniform(0.8, 1.2), rng.normal(0.0, 0.05)]
    elif u < 0.52:  # right swerve and return
        alpha = rng.uniform(2.5, 5.0)
        k1 = -rng.uniform(0.15, 0.35)
        ks = [k1, -k1 * rng.uniform(0.8, 1.2), rng.normal(0.0, 0.05)]
    elif u < 0.72:  # sustained arc
        alpha = rng.uniform(3.0, 6.0)
        k = rng.choice([-1.0, 1.0]) * rng.uniform(0.18, 0.42)
        ks = k + rng.normal(0.0, 0.02, 3)
    elif u < 0.82:  # go-around: long, near-limit swerve past a wide obstruction
        alpha = rng.uniform(5.0, 6.0)
        k1 = rng.choice([-1.0, 1.0]) * rng.uniform(0.36, 0.42)
        ks = [k1, -k1 * rng.uniform(1.0, 1.15), rng.normal(0.0, 0.05)]
    elif u < 0.92:  # s-curve
        alpha = rng.uniform(2.5, 5.0)
        k1 = rng.choice([-1.0, 1.0]) * rng.uniform(0.10, 0.30)
        ks = [k1, -k1 * rng.uniform(0.9, 1.1), k1 * rng.uniform(0.6, 1.0)]
    else:  # short hard avoid
        alpha = rng.uniform(1.5, 3.0)
        k1 = rng.choice([-1.0, 1.0]) * rng.uniform(0.25, 0.42)
        ks = [k1, -k1 * rng.uniform(0.5, 1.0), rng.normal(0.0, 0.10)]
    ks = np.clip(ks, -0.42, 0.42)
    return PrimitiveParams(float(alpha), float(ks[0]), float(ks[1]), float(ks[2]))


def synth_expert(rng: np.random.Generator, n: int = 836, noise_std: float = 0.005) -> np.ndarray:
    """Draw maneuvers, corrupt their reconstructions, and refit.

    Running every sample through reconstruct -> noise -> fit keeps the dataset
    on the same footing as primitives fitted from real pose logs.
    """
    out = np.empty((n, 4))
    for i in range(n):
        theta = _sample_family(rng)
        path = reconstruct(theta, 64)
        noisy = PosePath(
            t=path.t.copy(),
            xy=path.xy + rng.normal(0.0, noise_std, path.xy.shape),
            heading=path.heading.copy(),
        )
        out[i] = fit_params(noisy).params.as_array()
    return out


# episode runner --------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    collided: bool
    exited: bool
    terminal_x: float
    avg_vel: float
    fallbacks: int
    seed: int


@dataclass
class EpisodeTrace:
    t: np.ndarray
    states: np.ndarray
    plans: list  # (tick, world-frame PosePath) at each replan
    telemetry: list  # per-tick planner stats rows


def trial_streams(base_seed: int, trial: int):
    """Independent world / planner / controller generators for one trial."""
    ss = np.random.SeedSequence(entropy=(base_seed, trial))
    world_ss, plan_ss, mppi_ss = ss.spawn(3)
    return (
        np.random.default_rng(world_ss),
        np.random.default_rng(plan_ss),
        np.random.default_rng(mppi_ss),
    )


def make_world(scenario: ScenarioConfig, world_rng: np.random.Generator) -> World:
    if scenario.kind == "random":
        return gen_random_world(
            world_rng, scenario.random_world, (scenario.start_x, scenario.start_y)
        )
    if scenario.kind == "culdesac":
        return gen_culdesac(scenario.culdesac)
    raise ValueError(f"unknown scenario kind {scenario.kind!r}")


def run_episode(
    controller: str,
    world: World,
    scenario: ScenarioConfig,
    seed: int,
    model: FlowModel | None = None,
    cache: MaskCache | None = None,
    plan_cfg: PlanConfig | None = None,
    mppi_cfg: MppiConfig | None = None,
    gains: PidGains = PidGains(),
    plan_rng: np.random.Generator | None = None,
    mppi_rng: np.random.Generator | None = None,
    record_plans: bool = False,
) -> tuple[EpisodeMetrics, EpisodeTrace]:
    """Closed loop at 100 Hz ground truth; ends at the horizon or first collision.

    A failed replan keeps tracking the previous plan while it has horizon
    left (it was verified against the static world when adopted); the braking
    fallback is only adopted once no previous plan remains.
    """
    sim_dt = 0.01
    n_ticks = int(round(scenario.duration_s / sim_dt))
    replan_every = 20  # 5 Hz planner on the 100 Hz clock
    mppi_every = 2  # 50 Hz controller on the 100 Hz clock

    if controller == "genplan":
        if model is None or cache is None:
            raise ValueError("genplan episodes need a model and cache")
        plan_cfg = plan_cfg or PlanConfig()
        rng = plan_rng if plan_rng is not None else np.random.default_rng(seed)
    elif controller == "mppi":
        mppi_cfg = mppi_cfg or MppiConfig()
        rng = mppi_rng if mppi_rng is not None else np.random.default_rng(seed)
        ms = MppiState.initial(mppi_cfg)
    else:
        raise ValueError(f"unknown controller {controller!r}")

    state = scenario.start_state()
    states = np.empty((n_ticks + 1, 5))
    states[0] = state.as_array()
    plans = []
    telemetry = []
    fallbacks = 0
    collided = False
    end_tick = n_ticks
    current_plan = None
    plan_tick = 0
    control = ControlInput(0.0, 0.0)

    for tick in range(n_ticks):
        if controller == "genplan":
            if tick % replan_every == 0:
                res = plan(state, world, model, cache, plan_cfg, rng)
                fallbacks += int(res.stats.fallback)
                # a failed replan keeps the previous plan while it has horizon
                # left: in a static world it stays collision-free as checked
                # at adoption; braking is for when no valid plan remains
                keep_old = (
                    res.stats.fallback
                    and current_plan is not None
                    and (tick - plan_tick) * sim_dt + replan_every * sim_dt
                    < PRIMITIVE_DURATION
                )
                if not keep_old:
                    current_plan = res.chosen_path
                    plan_tick = tick
                    if record_plans:
                        plans.append((tick, current_plan))
                telemetry.append(
                    (
                        tick,
                        res.stats.draws,
                        res.stats.rejects,
                        res.stats.rank,
                        res.stats.explicit_checks,
                        int(res.stats.fallback),
                        res.chosen_cost,
                    )
                )
            control = pid_track(
                state, current_plan, (0.0, 0.0, 0.0), (tick - plan_tick) * sim_dt, gains
            )
        else:
            if tick % mppi_every == 0:
                control, ms = mppi_step(state, world, ms, mppi_cfg, rng)
        new_state = step(state, control, sim_dt)
        states[tick + 1] = new_state.as_array()
        seg = np.array([[state.x, state.y], [new_state.x, new_state.y]])
        state = new_state
        if path_collides(seg, world, COLLISION_CHECK_DS):
            collided = True
            end_tick = tick + 1
            break

    states = states[: end_tick + 1]
    t = np.arange(end_tick + 1) * sim_dt
    seg_len = float(np.sum(np.hypot(*np.diff(states[:, 0:2], axis=0).T)))
    elapsed = max(end_tick * sim_dt, sim_dt)
    exit_x = scenario.culdesac.exit_x if scenario.kind == "culdesac" else math.inf
    metrics = EpisodeMetrics(
        collided=collided,
        exited=bool(states[-1, 0] > exit_x),
        terminal_x=float(states[-1, 0]),
        avg_vel=seg_len / elapsed,
        fallbacks=fallbacks,
        seed=seed,
    )
    return metrics, EpisodeTrace(t=t, states=states, plans=plans, telemetry=telemetry)


# benchmarks ------------------------------------------------------------------


@dataclass
class BenchmarkSummary:
    controller: str
    kind: str
    n_trials: int
    collision_pct: float
    exit_pct: float
    terminal_x_mean: float
    terminal_x_std: float
    avg_vel_mean: float
    avg_vel_std: float
    fallback_total: int


def summarize(controller: str, kind: str, metrics: list) -> BenchmarkSummary:
    """Aggregate per-trial metrics; path statistics use non-colliding trials only."""
    n = len(metrics)
    collided = np.array([m.collided for m in metrics])
    exited = np.array([m.exited for m in metrics])
    tx = np.array([m.terminal_x for m in metrics])
    av = np.array([m.avg_vel for m in metrics])
    ok = ~collided
    tx_ok = tx[ok] if np.any(ok) else np.zeros(1)
    av_ok = av[ok] if np.any(ok) else np.zeros(1)
    return BenchmarkSummary(
        controller=controller,
        kind=kind,
        n_trials=n,
        collision_pct=100.0 * collided.mean(),
        exit_pct=100.0 * exited.mean(),
        terminal_x_mean=float(tx_ok.mean()),
        terminal_x_std=float(tx_ok.std()),
        avg_vel_mean=float(av_ok.mean()),
        avg_vel_std=float(av_ok.std()),
        fallback_total=int(sum(m.fallbacks for m in metrics)),
    )


def benchmark(
    scenario: ScenarioConfig,
    controller: str,
    model: FlowModel | None = None,
    cache: MaskCache | None = None,
    plan_cfg: PlanConfig | None = None,
    mppi_cfg: MppiConfig | None = None,
    gains: PidGains = PidGains(),
    n_trials: int | None = None,
) -> tuple[list, BenchmarkSummary]:
    """Run seeded trials base_seed..base_seed+n-1 and aggregate."""
    n = scenario.n_trials if n_trials is None else n_trials
    metrics = []
    for trial in range(n):
        seed = scenario.base_seed + trial
        world_rng, plan_rng, mppi_rng = trial_streams(scenario.base_seed, trial)
        world = make_world(scenario, world_rng)
        m, _ = run_episode(
            controller,
            world,
            scenario,
            seed,
            model=model,
            cache=cache,
            plan_cfg=plan_cfg,
            mppi_cfg=mppi_cfg,
            gains=gains,
            plan_rng=plan_rng,
            mppi_rng=mppi_rng,
        )
        metrics.append(m)
    return metrics, summarize(controller, scenario.kind, metrics)


SIGMA_SWEEP = tuple(
    (a, a * 1.6 * math.pi) for a in (0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
)


def mppi_sigma_sweep(
    scenario: ScenarioConfig | None = None,
    base_cfg: MppiConfig | None = None,
    n_trials: int | None = None,
) -> list:
    """Cul-de-sac benchmark across the sampling-noise ladder; one summary per sigma."""
    scenario = scenario or ScenarioConfig(kind="culdesac")
    base_cfg = base_cfg or MppiConfig()
    rows = []
    for sigma_a, sigma_psidot in SIGMA_SWEEP:
        cfg = replace(base_cfg, sigma_a=sigma_a, sigma_psidot=sigma_psidot)
        _, summary = benchmark(scenario, "mppi", mppi_cfg=cfg, n_trials=n_trials)
        rows.append((sigma_a, sigma_psidot, summary))
    return rows


# csv emission ----------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def fmt_exact(v) -> str:
    """Shortest decimal that round-trips float64; trial rows must be replayable."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


TRIAL_HEADER = "trial,seed,collided,exited,terminal_x,avg_vel,fallbacks"
SUMMARY_HEADER = (
    "controller,scenario,n_trials,collision_pct,exit_pct,"
    "terminal_x_mean,terminal_x_std,avg_vel_mean,avg_vel_std,fallback_total"
)
SWEEP_HEADER = "sigma_a,sigma_psidot," + SUMMARY_HEADER


def trials_csv(metrics: list) -> str:
    lines = [TRIAL_HEADER]
    for i, m in enumerate(metrics):
        lines.append(
            ",".join(
                [
                    str(i),
                    str(m.seed),
                    fmt_exact(m.collided),
                    fmt_exact(m.exited),
                    fmt_exact(m.terminal_x),
                    fmt_exact(m.avg_vel),
                    str(m.fallbacks),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def summary_csv_row(s: BenchmarkSummary) -> str:
    return ",".join(
        [
            s.controller,
            s.kind,
            str(s.n_trials),
            fmt(s.collision_pct),
            fmt(s.exit_pct),
            fmt(s.terminal_x_mean),
            fmt(s.terminal_x_std),
            fmt(s.avg_vel_mean),
            fmt(s.avg_vel_std),
            str(s.fallback_total),
        ]
    )


def summary_csv(summaries: list) -> str:
    return "\n".join([SUMMARY_HEADER] + [summary_csv_row(s) for s in summaries]) + "\n"


def sweep_csv(rows: list) -> str:
    lines = [SWEEP_HEADER]
    for sigma_a, sigma_psidot, s in rows:
        lines.append(f"{fmt(sigma_a)},{fmt(sigma_psidot)}," + summary_csv_row(s))
    return "\n".join(lines) + "\n"


def telemetry_csv(telemetry: list) -> str:
    lines = ["tick,draws,rejects,rank,checks,fallback,chosen_cost"]
    for row in telemetry:
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"
