"""Deterministic SVG views of worlds, sample fans, and episode traces.

Output is plain text with fixed-precision coordinates, so identical inputs
produce byte-identical files and plots can serve as golden artifacts. Each
accepted planner candidate is drawn as one ``<polyline class="sample">``;
highlighted paths (chosen plan, executed trajectory) use ``<path>`` elements,
which keeps the polyline count equal to the number of candidates.
"""

from __future__ import annotations

import numpy as np

from .maskcache import AtomicGrid
from .planner import PlanResult
from .primitives import PrimitiveParams, reconstruct
from .vehicle import VehicleState, World

PX_PER_M = 70.0
MARGIN_M = 0.6


def _f(v: float) -> str:
    return f"{v:.2f}"


class Scene:
    """Fixed world-frame viewport collecting SVG elements in draw order."""

    def __init__(self, x_lo: float, x_hi: float, y_lo: float, y_hi: float):
        self.x_lo = x_lo - MARGIN_M
        self.x_hi = x_hi + MARGIN_M
        self.y_lo = y_lo - MARGIN_M
        self.y_hi = y_hi + MARGIN_M
        self.width = (self.x_hi - self.x_lo) * PX_PER_M
        self.height = (self.y_hi - self.y_lo) * PX_PER_M
        self.elems: list[str] = []

    def to_px(self, x: float, y: float) -> tuple:
        return (x - self.x_lo) * PX_PER_M, (self.y_hi - y) * PX_PER_M

    def _points(self, xy: np.ndarray) -> str:
        px = (xy[:, 0] - self.x_lo) * PX_PER_M
        py = (self.y_hi - xy[:, 1]) * PX_PER_M
        return " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(px, py))

    def circle(self, x: float, y: float, r: float, style: str) -> None:
        cx, cy = self.to_px(x, y)
        self.elems.append(
            f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(r * PX_PER_M)}" {style}/>'
        )

    def polyline(self, xy: np.ndarray, style: str, cls: str = "") -> None:
        cls_attr = f'class="{cls}" ' if cls else ""
        self.elems.append(f'<polyline {cls_attr}points="{self._points(xy)}" {style}/>')

    def path(self, xy: np.ndarray, style: str, cls: str = "") -> None:
        pts = self._points(xy).split(" ")
        d = "M" + " L".join(pts)
        cls_attr = f'class="{cls}" ' if cls else ""
        self.elems.append(f'<path {cls_attr}d="{d}" fill="none" {style}/>')

    def closed_outline(self, corners: np.ndarray, style: str, cls: str = "") -> None:
        self.path(np.vstack([corners, corners[:1]]), style, cls)

    def render(self) -> str:
        head = (
            '<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{_f(self.width)}" height="{_f(self.height)}" '
            f'viewBox="0 0 {_f(self.width)} {_f(self.height)}">\n'
            f'<rect width="{_f(self.width)}" height="{_f(self.height)}" fill="white"/>\n'
        )
        return head + "\n".join(self.elems) + "\n</svg>\n"


def _bounds(world: World, paths_xy: list) -> tuple:
    xs, ys = [-1.0, 1.0], [-1.0, 1.0]
    if world.obstacles.shape[0]:
        o = world.obstacles
        xs += [float((o[:, 0] - o[:, 2]).min()), float((o[:, 0] + o[:, 2]).max())]
        ys += [float((o[:, 1] - o[:, 2]).min()), float((o[:, 1] + o[:, 2]).max())]
    for xy in paths_xy:
        if xy.shape[0]:
            xs += [float(xy[:, 0].min()), float(xy[:, 0].max())]
            ys += [float(xy[:, 1].min()), float(xy[:, 1].max())]
    return min(xs), max(xs), min(ys), max(ys)


def _draw_world(scene: Scene, world: World) -> None:
    for ox, oy, r in world.obstacles:
        scene.circle(ox, oy, r, 'fill="#b0b6bf" stroke="#6e7680" stroke-width="1"')


def _roi_corners(agrid: AtomicGrid, pose) -> np.ndarray:
    px, py, h = float(pose[0]), float(pose[1]), float(pose[2])
    c, s = np.cos(h), np.sin(h)
    body = np.array(
        [
            [agrid.x_lo, agrid.y_lo],
            [agrid.x_hi, agrid.y_lo],
            [agrid.x_hi, agrid.y_hi],
            [agrid.x_lo, agrid.y_hi],
        ]
    )
    out = np.empty_like(body)
    out[:, 0] = px + c * body[:, 0] - s * body[:, 1]
    out[:, 1] = py + s * body[:, 0] + c * body[:, 1]
    return out


def _candidate_xy(theta_row: np.ndarray, pose, n_pts: int) -> np.ndarray:
    alpha = float(theta_row[0])
    if not (np.isfinite(theta_row).all() and alpha > 0.0):
        # nonphysical draw: keep the element count by drawing a dot at the pose
        return np.array([[pose[0], pose[1]], [pose[0], pose[1]]])
    return reconstruct(PrimitiveParams.from_array(theta_row), n_pts).transformed(pose).xy


def render_plan(
    world: World,
    state: VehicleState,
    result: PlanResult,
    agrid: AtomicGrid | None = None,
    n_pts: int = 24,
) -> str:
    """Planner snapshot: candidate fan, chosen path, obstacles, optional ROI box."""
    pose = state.pose
    fan = [_candidate_xy(row, pose, n_pts) for row in result.accepted_thetas]
    scene = Scene(*_bounds(world, fan + [result.chosen_path.xy]))
    _draw_world(scene, world)
    if agrid is not None:
        scene.closed_outline(
            _roi_corners(agrid, pose),
            'stroke="#d08700" stroke-width="1.5" stroke-dasharray="6,4"',
            cls="roi",
        )
    for xy in fan:
        scene.polyline(xy, 'fill="none" stroke="#9ec5e8" stroke-width="0.8"', cls="sample")
    scene.path(result.chosen_path.xy, 'stroke="#c62828" stroke-width="2.5"', cls="chosen")
    scene.circle(state.x, state.y, 0.06, 'fill="#1a237e"')
    return scene.render()


def render_episode(world: World, trace, max_plans: int = 50) -> str:
    """Episode overview: obstacles, each replan's chosen path, executed trajectory."""
    xy = trace.states[:, 0:2]
    plan_xys = [p.xy for _, p in trace.plans[:max_plans]]
    scene = Scene(*_bounds(world, [xy] + plan_xys))
    _draw_world(scene, world)
    for pxy in plan_xys:
        scene.path(pxy, 'stroke="#7fa8d0" stroke-width="1"', cls="plan")
    scene.path(xy, 'stroke="#c62828" stroke-width="2.5"', cls="executed")
    scene.circle(float(xy[0, 0]), float(xy[0, 1]), 0.06, 'fill="#1a237e"')
    return scene.render()
