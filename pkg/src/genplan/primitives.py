"""Fixed-duration motion primitives: three consecutive equal-length constant-curvature arcs.

A primitive is described by four numbers: the total arc length ``alpha`` and
the curvatures ``kappa1..kappa3`` of its three arcs. Every primitive lasts
``PRIMITIVE_DURATION`` seconds and is traversed at the constant speed
``alpha / PRIMITIVE_DURATION``, starting from the body-frame origin with
heading zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PRIMITIVE_DURATION = 2.0
KAPPA_MAX = 4.0

# below this |kappa| the exact straight-segment formula replaces the 1/kappa chord
_STRAIGHT_EPS = 1e-9


class ParameterError(ValueError):
    """Raised for non-physical primitive parameters."""


class FitError(RuntimeError):
    """Raised when a path is too degenerate to fit."""


@dataclass(frozen=True)
class PrimitiveParams:
    """Arc-length / curvature parameterization of one primitive."""

    alpha: float
    kappa1: float
    kappa2: float
    kappa3: float

    def __post_init__(self):
        vals = (self.alpha, self.kappa1, self.kappa2, self.kappa3)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"non-finite primitive parameters: {vals}")
        if self.alpha <= 0.0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")

    @property
    def kappas(self) -> np.ndarray:
        return np.array([self.kappa1, self.kappa2, self.kappa3])

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.kappa1, self.kappa2, self.kappa3])

    @classmethod
    def from_array(cls, arr) -> "PrimitiveParams":
        a = np.asarray(arr, dtype=float).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass
class PosePath:
    """Time-stamped planar pose sequence.

    ``t`` is strictly increasing with ``t[0] == 0``. Headings are stored
    unwrapped so linear interpolation along the path stays meaningful.
    """

    t: np.ndarray
    xy: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.xy = np.asarray(self.xy, dtype=float)
        self.heading = np.asarray(self.heading, dtype=float)
        n = self.t.shape[0]
        if self.xy.shape != (n, 2) or self.heading.shape != (n,):
            raise ValueError("inconsistent sample array shapes")
        if n == 0:
            raise ValueError("empty path")
        if self.t[0] != 0.0:
            raise ValueError("path must start at t=0")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    @property
    def start_pose(self) -> np.ndarray:
        return np.array([self.xy[0, 0], self.xy[0, 1], self.heading[0]])

    @property
    def end_pose(self) -> np.ndarray:
        return np.array([self.xy[-1, 0], self.xy[-1, 1], self.heading[-1]])

    def polyline_length(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.sum(np.hypot(*np.diff(self.xy, axis=0).T)))

    def transformed(self, pose) -> "PosePath":
        """Rigidly transform from body frame into the frame where the origin sits at ``pose``."""
        x0, y0, h0 = float(pose[0]), float(pose[1]), float(pose[2])
        c, s = math.cos(h0), math.sin(h0)
        rot = np.array([[c, -s], [s, c]])
        return PosePath(
            t=self.t.copy(),
            xy=self.xy @ rot.T + np.array([x0, y0]),
            heading=self.heading + h0,
        )

    def start_normalized(self) -> "PosePath":
        """Re-express the path in the frame of its first pose."""
        x0, y0, h0 = self.start_pose
        c, s = math.cos(-h0), math.sin(-h0)
        rot = np.array([[c, -s], [s, c]])
        return PosePath(
            t=self.t - self.t[0],
            xy=(self.xy - np.array([x0, y0])) @ rot.T,
            heading=self.heading - h0,
        )


def _advance_pose(x, y, h, kappa, length):
    """Endpoint of a constant-curvature arc starting at (x, y, h). Array-safe."""
    kappa = np.asarray(kappa, dtype=float)
    straight = np.abs(kappa) < _STRAIGHT_EPS
    k_safe = np.where(straight, 1.0, kappa)
    h1 = h + kappa * length
    dx_arc = (np.sin(h1) - np.sin(h)) / k_safe
    dy_arc = (np.cos(h) - np.cos(h1)) / k_safe
    dx = np.where(straight, length * np.cos(h), dx_arc)
    dy = np.where(straight, length * np.sin(h), dy_arc)
    return x + dx, y + dy, h1


def arc_start_poses(theta: PrimitiveParams) -> np.ndarray:
    """Poses at the start of each of the three arcs, row ``i`` = (x, y, heading)."""
    poses = np.zeros((3, 3))
    x, y, h = 0.0, 0.0, 0.0
    seg = theta.alpha / 3.0
    for i, k in enumerate(theta.kappas):
        poses[i] = (x, y, h)
        x, y, h = _advance_pose(x, y, h, k, seg)
    return poses


def endpoint(theta: PrimitiveParams) -> np.ndarray:
    """Closed-form terminal pose (x, y, heading) of the primitive."""
    x, y, h = 0.0, 0.0, 0.0
    seg = theta.alpha / 3.0
    for k in theta.kappas:
        x, y, h = _advance_pose(x, y, h, k, seg)
    return np.array([float(x), float(y), float(h)])


def endpoints(thetas: np.ndarray) -> np.ndarray:
    """Vectorized ``endpoint`` for an (n, 4) parameter matrix, returns (n, 3)."""
    thetas = np.asarray(thetas, dtype=float)
    x = np.zeros(thetas.shape[0])
    y = np.zeros(thetas.shape[0])
    h = np.zeros(thetas.shape[0])
    seg = thetas[:, 0] / 3.0
    for i in range(3):
        x, y, h = _advance_pose(x, y, h, thetas[:, 1 + i], seg)
    return np.stack([x, y, h], axis=1)


def positions_at_arclength(theta: PrimitiveParams, s: np.ndarray):
    """Poses along the primitive at the given arc lengths ``s`` in [0, alpha]."""
    s = np.asarray(s, dtype=float)
    seg = theta.alpha / 3.0
    starts = arc_start_poses(theta)
    idx = np.clip((s / seg).astype(int), 0, 2)
    # samples landing exactly on an arc boundary evaluate identically from either side
    x0 = starts[idx, 0]
    y0 = starts[idx, 1]
    h0 = starts[idx, 2]
    k = theta.kappas[idx]
    ds = s - idx * seg
    x, y, h = _advance_pose(x0, y0, h0, k, ds)
    return x, y, h


def reconstruct(theta: PrimitiveParams, n_samples: int) -> PosePath:
    """Sample the primitive uniformly in arc length.

    Timestamps assume the constant speed ``alpha / PRIMITIVE_DURATION``, so the
    samples are also uniform in time.
    """
    if not isinstance(theta, PrimitiveParams):
        theta = PrimitiveParams.from_array(theta)
    if n_samples < 2:
        raise ParameterError(f"n_samples must be >= 2, got {n_samples}")
    s = np.linspace(0.0, theta.alpha, n_samples)
    x, y, h = positions_at_arclength(theta, s)
    t = np.linspace(0.0, PRIMITIVE_DURATION, n_samples)
    return PosePath(t=t, xy=np.stack([x, y], axis=1), heading=h)


@dataclass
class FitResult:
    params: PrimitiveParams
    converged: bool
    cost: float
    n_iter: int

    @property
    def rms(self) -> float:
        return math.sqrt(self.cost / max(self._n_residual_points, 1))

    _n_residual_points: int = 0


def _model_positions(theta_vec: np.ndarray, t: np.ndarray) -> np.ndarray:
    alpha = theta_vec[0]
    theta = PrimitiveParams(alpha, theta_vec[1], theta_vec[2], theta_vec[3])
    s = np.clip(t / PRIMITIVE_DURATION, 0.0, 1.0) * alpha
    x, y, _ = positions_at_arclength(theta, s)
    return np.stack([x, y], axis=1)


def _fit_initial_guess(t: np.ndarray, xy: np.ndarray) -> np.ndarray:
    seg_vecs = np.diff(xy, axis=0)
    seg_len = np.hypot(seg_vecs[:, 0], seg_vecs[:, 1])
    alpha0 = max(float(np.sum(seg_len)), 0.02)
    # heading from chords; curvature per third = heading change / third length
    moving = seg_len > 1e-12
    headings = np.arctan2(seg_vecs[:, 1], seg_vecs[:, 0])
    headings = np.unwrap(headings[moving]) if np.any(moving) else np.zeros(1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len[moving])])
    kappas = np.zeros(3)
    third = alpha0 / 3.0
    for i in range(3):
        lo, hi = i * third, (i + 1) * third
        h_lo = np.interp(lo, cum, np.concatenate([headings, headings[-1:]]))
        h_hi = np.interp(hi, cum, np.concatenate([headings, headings[-1:]]))
        kappas[i] = (h_hi - h_lo) / third
    kappas = np.clip(kappas, -KAPPA_MAX, KAPPA_MAX)
    return np.array([alpha0, kappas[0], kappas[1], kappas[2]])


def fit_params(
    path: PosePath,
    max_iter: int = 100,
    tol: float = 1e-10,
    fd_step: float = 1e-5,
    kappa_max: float = KAPPA_MAX,
) -> FitResult:
    """Least-squares fit of primitive parameters to a path's positions.

    The path is first re-expressed in the frame of its initial pose; only
    positions enter the cost. Gauss-Newton with a central-difference Jacobian;
    steps are halved when they fail to decrease the cost, and curvatures are
    clamped to ``kappa_max`` so fits stay physically trackable.
    """
    if len(path) < 8:
        raise FitError(f"need at least 8 samples to fit, got {len(path)}")
    norm = path.start_normalized()
    t, xy = norm.t, norm.xy
    net = float(np.hypot(*(xy[-1] - xy[0])))
    if net <= 0.01 or norm.polyline_length() <= 0.01:
        raise FitError(f"degenerate path: net displacement {net:.4f} m")

    def clamp(vec):
        out = vec.copy()
        out[0] = max(out[0], 0.02)
        out[1:] = np.clip(out[1:], -kappa_max, kappa_max)
        return out

    def cost_of(vec):
        r = (_model_positions(vec, t) - xy).ravel()
        return float(r @ r), r

    theta = clamp(_fit_initial_guess(t, xy))
    cost, resid = cost_of(theta)
    best_theta, best_cost = theta.copy(), cost
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jac = np.empty((resid.shape[0], 4))
        for j in range(4):
            dp = np.zeros(4)
            dp[j] = fd_step
            rp = (_model_positions(theta + dp, t) - xy).ravel()
            rm = (_model_positions(theta - dp, t) - xy).ravel()
            jac[:, j] = (rp - rm) / (2.0 * fd_step)
        jtj = jac.T @ jac + 1e-12 * np.eye(4)
        step = np.linalg.solve(jtj, -jac.T @ resid)

        scale = 1.0
        improved = False
        for _ in range(25):
            cand = clamp(theta + scale * step)
            c_cand, r_cand = cost_of(cand)
            if c_cand < cost:
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        decrease = cost - c_cand
        theta, cost, resid = cand, c_cand, r_cand
        if cost < best_cost:
            best_theta, best_cost = theta.copy(), cost
        if decrease < tol:
            converged = True
            break

    result = FitResult(
        params=PrimitiveParams.from_array(best_theta),
        converged=converged,
        cost=best_cost,
        n_iter=it,
    )
    result._n_residual_points = len(path)
    return result


def slice_log(log: PosePath, window: float, stride: float | None = None) -> list[PosePath]:
    """Cut a long pose log into fixed-duration windows, each re-framed to start at (0,0,0)."""
    if stride is None:
        stride = window
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    slices = []
    start = 0.0
    eps = 1e-9
    while start + window <= log.duration + eps:
        sel = (log.t >= start - eps) & (log.t <= start + window + eps)
        idx = np.flatnonzero(sel)
        if idx.size >= 2:
            sub = PosePath(
                t=log.t[idx] - log.t[idx[0]],
                xy=log.xy[idx],
                heading=log.heading[idx],
            )
            slices.append(sub.start_normalized())
        start += stride
    return slices


def save_dataset(path, thetas) -> None:
    """Write primitives as CSV rows alpha,kappa1,kappa2,kappa3 (9 significant digits)."""
    rows = [t.as_array() if isinstance(t, PrimitiveParams) else np.asarray(t) for t in thetas]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("alpha,kappa1,kappa2,kappa3\n")
        for r in rows:
            fh.write(",".join(f"{v:.9g}" for v in r) + "\n")


def load_dataset(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "alpha,kappa1,kappa2,kappa3":
            raise ValueError(f"unexpected dataset header: {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[1] != 4:
        raise ValueError("dataset rows must have 4 columns")
    return data
