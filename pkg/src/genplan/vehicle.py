"""Bicycle-model vehicle: RK4 dynamics, circular-obstacle collision tests, PID tracker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .primitives import PosePath

A_MAX = 5.0
PSIDOT_MAX = 4.0 * math.pi
PSI_MAX = 0.45
V_MAX = 3.0
WHEELBASE = 1.0


@dataclass(frozen=True)
class VehicleState:
    """Planar bicycle state: position, speed, heading, steering angle."""

    x: float
    y: float
    v: float
    phi: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.phi, self.psi])

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])


@dataclass(frozen=True)
class ControlInput:
    u_a: float
    u_psidot: float

    def clamped(self) -> "ControlInput":
        return ControlInput(
            u_a=min(max(self.u_a, -A_MAX), A_MAX),
            u_psidot=min(max(self.u_psidot, -PSIDOT_MAX), PSIDOT_MAX),
        )


@dataclass
class World:
    """Static circular obstacles, rows of (cx, cy, r)."""

    obstacles: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.obstacles, dtype=float)
        if obs.size == 0:
            obs = np.zeros((0, 3))
        if obs.ndim != 2 or obs.shape[1] != 3:
            raise ValueError("obstacles must be an (n, 3) array of cx, cy, r")
        if np.any(obs[:, 2] <= 0):
            raise ValueError("obstacle radii must be positive")
        self.obstacles = obs

    @property
    def n_obstacles(self) -> int:
        return self.obstacles.shape[0]

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("cx,cy,r\n")
            for cx, cy, r in self.obstacles:
                fh.write(f"{cx:.9g},{cy:.9g},{r:.9g}\n")

    @classmethod
    def load(cls, path) -> "World":
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().strip()
            if header != "cx,cy,r":
                raise ValueError(f"unexpected world header: {header!r}")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.size == 0:
            data = np.zeros((0, 3))
        return cls(obstacles=data)


def _derivative(s: np.ndarray, u_a: float, u_psidot: float, wheelbase: float) -> np.ndarray:
    x, y, v, phi, psi = s
    return np.array(
        [
            v * math.cos(phi),
            v * math.sin(phi),
            u_a,
            v * math.tan(psi) / wheelbase,
            u_psidot,
        ]
    )


def step(
    state: VehicleState,
    control: ControlInput,
    dt: float,
    wheelbase: float = WHEELBASE,
) -> VehicleState:
    """One RK4 step of the bicycle dynamics with clamped controls.

    After integration the speed is clamped to ``[0, V_MAX]`` (drivetrain top
    speed) and the steering angle to ``[-PSI_MAX, PSI_MAX]``.
    """
    if not 0.0 < dt <= 0.05:
        raise ValueError(f"dt must be in (0, 0.05], got {dt}")
    c = control.clamped()
    s = state.as_array()
    k1 = _derivative(s, c.u_a, c.u_psidot, wheelbase)
    k2 = _derivative(s + 0.5 * dt * k1, c.u_a, c.u_psidot, wheelbase)
    k3 = _derivative(s + 0.5 * dt * k2, c.u_a, c.u_psidot, wheelbase)
    k4 = _derivative(s + dt * k3, c.u_a, c.u_psidot, wheelbase)
    out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return VehicleState(
        x=float(out[0]),
        y=float(out[1]),
        v=min(max(float(out[2]), 0.0), V_MAX),
        phi=float(out[3]),
        psi=min(max(float(out[4]), -PSI_MAX), PSI_MAX),
    )


def point_collides(x: float, y: float, world: World) -> bool:
    """True iff (x, y) lies strictly inside any obstacle disc."""
    obs = world.obstacles
    if obs.shape[0] == 0:
        return False
    d2 = (obs[:, 0] - x) ** 2 + (obs[:, 1] - y) ** 2
    return bool(np.any(d2 < obs[:, 2] ** 2))


def densify_polyline(xy: np.ndarray, ds: float) -> np.ndarray:
    """Insert points so consecutive samples are at most ds apart; keeps all vertices."""
    xy = np.asarray(xy, dtype=float)
    if xy.shape[0] < 2:
        return xy.copy()
    deltas = np.diff(xy, axis=0)
    lengths = np.hypot(deltas[:, 0], deltas[:, 1])
    n_sub = np.maximum(np.ceil(lengths / ds).astype(int), 1)
    total = int(np.sum(n_sub))
    # fractional position of every inserted point within its source segment
    seg_idx = np.repeat(np.arange(lengths.shape[0]), n_sub)
    offsets = np.concatenate([np.arange(1, k + 1) / k for k in n_sub])
    pts = xy[seg_idx] + deltas[seg_idx] * offsets[:, None]
    out = np.empty((total + 1, 2))
    out[0] = xy[0]
    out[1:] = pts
    return out


def path_collides(path: PosePath | np.ndarray, world: World, ds: float = 0.01) -> bool:
    """Dense collision test: resample the path at spacing <= ds and check every sample."""
    if ds <= 0:
        raise ValueError(f"ds must be positive, got {ds}")
    xy = path.xy if isinstance(path, PosePath) else np.asarray(path, dtype=float)
    if world.n_obstacles == 0 or xy.shape[0] == 0:
        return False
    pts = densify_polyline(xy, ds)
    obs = world.obstacles
    d2 = (pts[:, 0:1] - obs[:, 0]) ** 2 + (pts[:, 1:2] - obs[:, 1]) ** 2
    return bool(np.any(d2 < obs[:, 2] ** 2))


@dataclass(frozen=True)
class PidGains:
    """Tracker gains plus the steering-reference lookahead time.

    The linearized lateral loop has characteristic polynomial
    s^3 + kd*s^2 + kh*v*s + kct*v^2, so stability needs kd*kh > kct*v over
    the whole operating speed range (here up to ~3.2 m/s). The defaults give
    a 2.5x Routh margin at 3.2 m/s; the steering-rate authority (4pi rad/s)
    supports the bandwidth, keeping peak cross-track error under 5 cm on
    in-envelope primitives at matched speed.
    """

    kv: float = 8.0
    kct: float = 100.0
    kh: float = 34.0
    kd: float = 24.0
    lookahead_s: float = 0.06


@dataclass
class Reference:
    """Interpolated world-frame reference along a plan: pose, speed, curvature."""

    x: float
    y: float
    heading: float
    speed: float
    kappa: float


def plan_reference(plan: PosePath, plan_origin, t_since_plan: float) -> Reference:
    """World-frame reference pose, speed, and local curvature at a time offset into a body-frame plan."""
    world_plan = plan.transformed(plan_origin)
    t = world_plan.t
    tq = min(max(t_since_plan, 0.0), float(t[-1]))
    i = int(np.searchsorted(t, tq, side="right") - 1)
    i = min(max(i, 0), len(t) - 2)
    span = t[i + 1] - t[i]
    w = (tq - t[i]) / span
    xy = (1.0 - w) * world_plan.xy[i] + w * world_plan.xy[i + 1]
    heading = (1.0 - w) * world_plan.heading[i] + w * world_plan.heading[i + 1]
    seg = world_plan.xy[i + 1] - world_plan.xy[i]
    ds = float(np.hypot(seg[0], seg[1]))
    speed = ds / span
    kappa = (world_plan.heading[i + 1] - world_plan.heading[i]) / ds if ds > 1e-12 else 0.0
    return Reference(
        x=float(xy[0]),
        y=float(xy[1]),
        heading=float(heading),
        speed=float(speed),
        kappa=float(kappa),
    )


def wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def pid_track(
    state: VehicleState,
    plan: PosePath,
    plan_origin,
    t_since_plan: float,
    gains: PidGains = PidGains(),
    wheelbase: float = WHEELBASE,
) -> ControlInput:
    """Speed P-term plus lateral/heading PD steering toward a lookahead reference.

    Cross-track error is measured against the current-time reference point so
    curvature does not bias the vehicle toward the inside of turns; heading
    and curvature feedforward come from the lookahead point, preloading the
    rate-limited steering before arc transitions. Cross-track error is signed
    so a vehicle left of the path yields a negative steering-rate command
    (steers right). The damping term is centered on the steering angle that
    holds the reference curvature, which removes the steady-state offset on
    curved plans.
    """
    ref_la = plan_reference(plan, plan_origin, t_since_plan + gains.lookahead_s)
    ref_now = plan_reference(plan, plan_origin, t_since_plan)
    dx = state.x - ref_now.x
    dy = state.y - ref_now.y
    # vehicle's lateral offset expressed in the reference heading frame
    lateral = -math.sin(ref_now.heading) * dx + math.cos(ref_now.heading) * dy
    e_ct = -lateral
    e_h = wrap_angle(ref_la.heading - state.phi)
    psi_ff = math.atan(ref_la.kappa * wheelbase)
    u_a = gains.kv * (ref_now.speed - state.v)
    u_psidot = gains.kct * e_ct + gains.kh * e_h - gains.kd * (state.psi - psi_ff)
    return ControlInput(u_a=u_a, u_psidot=u_psidot).clamped()


@dataclass
class SimTrace:
    """Recorded closed-loop rollout at the ground-truth rate."""

    t: np.ndarray
    states: np.ndarray  # rows (x, y, v, phi, psi)
    controls: np.ndarray  # rows (u_a, u_psidot)

    @property
    def xy(self) -> np.ndarray:
        return self.states[:, 0:2]

    def path(self) -> PosePath:
        return PosePath(t=self.t, xy=self.xy.copy(), heading=self.states[:, 3].copy())


def track_plan(
    state: VehicleState,
    plan: PosePath,
    plan_origin,
    duration: float,
    dt: float = 0.01,
    gains: PidGains = PidGains(),
    wheelbase: float = WHEELBASE,
) -> SimTrace:
    """Run the PID tracker against one plan for a fixed duration."""
    n = int(round(duration / dt))
    t = np.arange(n + 1) * dt
    states = np.empty((n + 1, 5))
    controls = np.empty((n, 2))
    states[0] = state.as_array()
    s = state
    for k in range(n):
        u = pid_track(s, plan, plan_origin, k * dt, gains, wheelbase)
        controls[k] = (u.u_a, u.u_psidot)
        s = step(s, u, dt, wheelbase)
        states[k + 1] = s.as_array()
    return SimTrace(t=t, states=states, controls=controls)
