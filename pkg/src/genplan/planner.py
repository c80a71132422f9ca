"""Online planning loop: masked prior sampling, cost ranking, lazy collision checks.

Per tick: obstacles near the body-frame region of interest select atomic maps,
whose OR-ed bit arrays reject prior cells; prior draws landing in rejected
cells are discarded before the flow is evaluated. Survivors are ranked by the
cost of their closed-form endpoints and collision checked lazily in cost
order, so the explicit-check count equals the rank of the chosen primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowModel
from .maskcache import AtomicGrid, InputGrid, MaskCache, decompose
from .primitives import PRIMITIVE_DURATION, PosePath, PrimitiveParams, endpoints, reconstruct
from .vehicle import (
    A_MAX,
    PSI_MAX,
    WHEELBASE,
    VehicleState,
    World,
    path_collides,
)

FALLBACK_MIN_ALPHA = 0.05
# flow tails extend past the demonstrations; curvature beyond the steering
# envelope cannot be held at any speed, so such samples are infeasible, not
# merely expensive (over-length samples just finish late and stay on-path)
MAX_FEASIBLE_KAPPA = math.tan(PSI_MAX) / WHEELBASE


@dataclass
class PlanConfig:
    n_samples: int = 512
    replan_hz: float = 5.0
    max_draw_factor: int = 16
    ds: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if not (
            self.n_samples > 0
            and self.replan_hz > 0
            and self.max_draw_factor > 0
            and self.ds > 0
        ):
            raise ValueError("plan config values must be positive")


@dataclass
class PlanStats:
    draws: int = 0
    rejects: int = 0
    flow_evals: int = 0
    explicit_checks: int = 0
    rank: int = 0
    fallback: bool = False


@dataclass
class PlanResult:
    chosen_path: PosePath  # world frame
    chosen_theta: PrimitiveParams
    chosen_cost: float
    stats: PlanStats
    accepted_z: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    accepted_thetas: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    accepted_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))


def cost(path: PosePath) -> float:
    """Negative terminal world-frame x: progress down the corridor."""
    return -float(path.xy[-1, 0])


def fallback_primitive(state: VehicleState) -> PrimitiveParams:
    """Maximum-deceleration straight line, never shorter than a crawl."""
    t = PRIMITIVE_DURATION
    alpha = max(
        state.v * t - 0.5 * A_MAX * t**2,
        state.v * t / 4.0,
        FALLBACK_MIN_ALPHA,
    )
    return PrimitiveParams(alpha, 0.0, 0.0, 0.0)


def _reconstruct_world(theta_row: np.ndarray, pose, ds: float) -> PosePath:
    alpha = theta_row[0]
    n_pts = max(int(math.ceil(alpha / ds)) + 1, 2)
    return reconstruct(PrimitiveParams.from_array(theta_row), n_pts).transformed(pose)


def plan(
    state: VehicleState,
    world: World,
    model: FlowModel,
    cache: MaskCache,
    cfg: PlanConfig,
    rng: np.random.Generator,
) -> PlanResult:
    """One planning tick; see module docstring for the pipeline."""
    cfg.validate()
    if cache.flow_checksum != model.checksum():
        raise ValueError("mask cache was built for a different flow model")
    igrid, agrid = cache.igrid, cache.agrid
    pose = state.pose

    atomic_set = decompose(world, pose, agrid)
    rejected = cache.unpack(cache.rejected_cells(atomic_set))

    budget = cfg.max_draw_factor * cfg.n_samples
    z_all = rng.standard_normal((budget, 4))
    cells = igrid.cell_of(z_all)
    ok = ~rejected[cells]
    cum_ok = np.cumsum(ok)
    stats = PlanStats()
    if cum_ok[-1] >= cfg.n_samples:
        # index of the draw that completes the accepted quota
        last = int(np.searchsorted(cum_ok, cfg.n_samples))
        stats.draws = last + 1
        keep = np.flatnonzero(ok[: last + 1])
    else:
        stats.draws = budget
        keep = np.flatnonzero(ok)
    stats.rejects = stats.draws - keep.size

    z_acc = z_all[keep]
    stats.flow_evals = z_acc.shape[0]
    if z_acc.shape[0] > 0:
        thetas, _ = model.forward(z_acc)
    else:
        thetas = np.zeros((0, 4))

    # closed-form endpoint cost in the world frame; infeasible draws get +inf
    ends = endpoints(thetas) if thetas.shape[0] else np.zeros((0, 3))
    heading = state.phi
    end_x = state.x + ends[:, 0] * math.cos(heading) - ends[:, 1] * math.sin(heading)
    costs = -end_x
    valid = (
        (thetas[:, 0] > 0)
        & np.all(np.isfinite(thetas), axis=1)
        & (np.abs(thetas[:, 1:]).max(axis=1) <= MAX_FEASIBLE_KAPPA)
    )
    costs = np.where(valid, costs, np.inf)

    order = np.argsort(costs, kind="stable")
    chosen_idx = -1
    chosen_path = None
    for rank_pos, idx in enumerate(order, start=1):
        if not np.isfinite(costs[idx]):
            break
        path = _reconstruct_world(thetas[idx], pose, cfg.ds)
        stats.explicit_checks += 1
        if not path_collides(path, world, cfg.ds):
            chosen_idx = int(idx)
            stats.rank = rank_pos
            chosen_path = path
            break

    if chosen_idx < 0:
        stats.fallback = True
        theta_fb = fallback_primitive(state)
        fb_path = _reconstruct_world(theta_fb.as_array(), pose, cfg.ds)
        return PlanResult(
            chosen_path=fb_path,
            chosen_theta=theta_fb,
            chosen_cost=cost(fb_path),
            stats=stats,
            accepted_z=z_acc,
            accepted_thetas=thetas,
            accepted_costs=costs,
        )

    return PlanResult(
        chosen_path=chosen_path,
        chosen_theta=PrimitiveParams.from_array(thetas[chosen_idx]),
        chosen_cost=float(costs[chosen_idx]),
        stats=stats,
        accepted_z=z_acc,
        accepted_thetas=thetas,
        accepted_costs=costs,
    )
