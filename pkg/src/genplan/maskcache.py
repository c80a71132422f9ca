"""Prior-space collision masks against a grid of atomic obstacle maps.

The input space R^4 is cut into K^4 equal-probability cells by standard-normal
quantiles. For every cell, the primitive at the cell's centroid is checked
against each atomic map (one disc of radius ``r_atom`` at each point of a
40x40 grid spanning a body-frame region of interest). The result is one bit
array per atomic map; at plan time the arrays of the atomic maps covering the
actual obstacles are OR-ed into a single rejection mask over cells.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .flow import FlowModel
from .primitives import PrimitiveParams, reconstruct
from .vehicle import densify_polyline

DIM = 4

CACHE_MAGIC = b"GPMC"
CACHE_VERSION = 1


class CacheFormatError(ValueError):
    """Raised on malformed cache files or model/cache mismatches."""


@dataclass(frozen=True)
class InputGrid:
    """Equal-probability quantile grid over the 4-D standard-normal prior."""

    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"K must be at least 2, got {self.k}")

    @property
    def n_cells(self) -> int:
        return self.k**DIM

    @property
    def inner_edges(self) -> np.ndarray:
        """Finite bin edges Phi^-1(j/K), j = 1..K-1 (outermost edges are infinite)."""
        return norm.ppf(np.arange(1, self.k) / self.k)

    def axis_centroids(self) -> np.ndarray:
        """Probability-midpoint representative of each bin along one axis."""
        return norm.ppf((np.arange(self.k) + 0.5) / self.k)

    def cell_of(self, z: np.ndarray) -> np.ndarray:
        """Row-major flat cell index for each row of z; vectorized."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        edges = self.inner_edges
        idx = np.stack([np.searchsorted(edges, z[:, d], side="right") for d in range(DIM)])
        flat = idx[0]
        for d in range(1, DIM):
            flat = flat * self.k + idx[d]
        return flat

    def unflatten(self, cell: int) -> tuple:
        if not 0 <= cell < self.n_cells:
            raise ValueError(f"cell index {cell} out of range")
        out = []
        for _ in range(DIM):
            out.append(cell % self.k)
            cell //= self.k
        return tuple(reversed(out))

    def centroid(self, cell: int) -> np.ndarray:
        idx = self.unflatten(cell)
        return norm.ppf((np.asarray(idx) + 0.5) / self.k)

    def all_centroids(self) -> np.ndarray:
        """(K^4, 4) matrix of centroids in flat-cell order."""
        ax = self.axis_centroids()
        grids = np.meshgrid(ax, ax, ax, ax, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


@dataclass(frozen=True)
class AtomicGrid:
    """Body-frame region of interest discretized into atomic obstacle centers."""

    x_lo: float = 0.75
    x_hi: float = 1.75
    y_lo: float = -0.5
    y_hi: float = 0.5
    nx: int = 40
    ny: int = 40
    r_atom: float = 0.15

    def __post_init__(self):
        if self.x_hi <= self.x_lo or self.y_hi <= self.y_lo:
            raise ValueError("degenerate ROI extents")
        if self.nx < 2 or self.ny < 2 or self.r_atom <= 0:
            raise ValueError("bad atomic grid shape")

    @property
    def sx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    @property
    def sy(self) -> float:
        return (self.y_hi - self.y_lo) / (self.ny - 1)

    @property
    def n_atomic(self) -> int:
        return self.nx * self.ny

    @property
    def r_cover(self) -> float:
        # half the grid-cell diagonal: max distance from any ROI point to its
        # nearest grid point
        return 0.5 * np.hypot(self.sx, self.sy)

    def point(self, ix: int, iy: int) -> np.ndarray:
        """Grid point position; the flat atomic index is ix * ny + iy."""
        return np.array([self.x_lo + ix * self.sx, self.y_lo + iy * self.sy])

    def flat_index(self, ix: int, iy: int) -> int:
        return ix * self.ny + iy

    def all_points(self) -> np.ndarray:
        xs = self.x_lo + np.arange(self.nx) * self.sx
        ys = self.y_lo + np.arange(self.ny) * self.sy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def rect_distance(self, px, py):
        """Distance from points to the ROI rectangle (0 inside). Array-safe."""
        dx = np.maximum(np.maximum(self.x_lo - px, px - self.x_hi), 0.0)
        dy = np.maximum(np.maximum(self.y_lo - py, py - self.y_hi), 0.0)
        return np.hypot(dx, dy)


def _cell_corner_indices(frac: float, n: int) -> tuple:
    """Indices of the two grid lines bracketing a fractional coordinate.

    Out-of-range coordinates clamp to the nearest boundary cell so an obstacle
    just outside the region still selects the closest in-bounds corners.
    """
    i0 = int(np.floor(frac))
    if i0 < 0:
        return (0, 1)
    if i0 + 1 > n - 1:
        return (n - 2, n - 1)
    return (i0, i0 + 1)


def decompose(world, pose, agrid: AtomicGrid) -> np.ndarray:
    """Atomic maps that jointly over-cover every obstacle patch inside the ROI.

    Obstacle centers are transformed into the body frame at ``pose``. For each
    obstacle disc that reaches the ROI rectangle, the corners of the grid cell
    containing its center are selected (with out-of-grid centers clamped to
    the nearest boundary cell), plus any grid point within ``r_cover`` of the
    center. For obstacles wider than the atomic radius the corner set is
    dilated by the excess so the union of selected atomic discs still covers
    the obstacle's in-ROI patch. Returns sorted unique flat atomic indices.
    """
    obs = world.obstacles
    if obs.shape[0] == 0:
        return np.zeros(0, dtype=int)
    px, py, heading = float(pose[0]), float(pose[1]), float(pose[2])
    c, s = np.cos(-heading), np.sin(-heading)
    dx = obs[:, 0] - px
    dy = obs[:, 1] - py
    bx = c * dx - s * dy
    by = s * dx + c * dy
    radii = obs[:, 2]

    reach = agrid.rect_distance(bx, by) <= radii
    if not np.any(reach):
        return np.zeros(0, dtype=int)

    selected = set()
    grid_pts = None
    for cx, cy, r in zip(bx[reach], by[reach], radii[reach]):
        fx = (cx - agrid.x_lo) / agrid.sx
        fy = (cy - agrid.y_lo) / agrid.sy
        # widen the corner window for obstacles larger than the atomic radius
        extra = max(float(r) - agrid.r_atom, 0.0)
        pad_x = int(np.ceil(extra / agrid.sx))
        pad_y = int(np.ceil(extra / agrid.sy))
        ix0, ix1 = _cell_corner_indices(fx, agrid.nx)
        iy0, iy1 = _cell_corner_indices(fy, agrid.ny)
        for ix in range(max(ix0 - pad_x, 0), min(ix1 + pad_x, agrid.nx - 1) + 1):
            for iy in range(max(iy0 - pad_y, 0), min(iy1 + pad_y, agrid.ny - 1) + 1):
                selected.add(agrid.flat_index(ix, iy))
        if grid_pts is None:
            grid_pts = agrid.all_points()
        near = np.hypot(grid_pts[:, 0] - cx, grid_pts[:, 1] - cy) <= agrid.r_cover + extra
        selected.update(np.flatnonzero(near).tolist())
    return np.array(sorted(selected), dtype=int)


@dataclass
class MaskCache:
    """Per-atomic-map packed bit arrays over input cells."""

    igrid: InputGrid
    agrid: AtomicGrid
    ds: float
    flow_checksum: bytes
    bits: np.ndarray  # (n_atomic, ceil(K^4/8)) uint8, little-endian bit order

    def __post_init__(self):
        expected = (self.agrid.n_atomic, (self.igrid.n_cells + 7) // 8)
        if self.bits.shape != expected:
            raise ValueError(f"bit array shape {self.bits.shape}, expected {expected}")

    def cell_bit(self, atomic_index: int, cell: int) -> bool:
        byte = self.bits[atomic_index, cell >> 3]
        return bool((byte >> (cell & 7)) & 1)

    def rejected_cells(self, atomic_indices) -> np.ndarray:
        """Packed OR of the selected atomic maps' bit arrays."""
        atomic_indices = np.asarray(atomic_indices, dtype=int)
        if atomic_indices.size == 0:
            return np.zeros(self.bits.shape[1], dtype=np.uint8)
        return np.bitwise_or.reduce(self.bits[atomic_indices], axis=0)

    def unpack(self, packed: np.ndarray) -> np.ndarray:
        """Expand a packed cell bit array into a boolean vector of length K^4."""
        return np.unpackbits(packed, bitorder="little")[: self.igrid.n_cells].astype(bool)

    def popcounts(self) -> np.ndarray:
        return np.array(
            [int(np.unpackbits(row, bitorder="little").sum()) for row in self.bits]
        )

    # persistence ----------------------------------------------------------
    def save(self, path, config_hash: bytes = b"\x00" * 32, tool_version: str = "") -> None:
        if len(config_hash) != 32:
            raise ValueError("config hash must be 32 bytes")
        g, a = self.igrid, self.agrid
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<HHHHH", CACHE_VERSION, g.k, DIM, a.nx, a.ny))
            fh.write(
                struct.pack("<6d", a.x_lo, a.x_hi, a.y_lo, a.y_hi, a.r_atom, self.ds)
            )
            fh.write(self.flow_checksum)
            fh.write(config_hash)
            ver = tool_version.encode("utf-8")
            fh.write(struct.pack("<H", len(ver)))
            fh.write(ver)
            fh.write(np.ascontiguousarray(self.bits).tobytes())

    @staticmethod
    def header_size(tool_version: str = "") -> int:
        return 4 + 10 + 48 + 32 + 32 + 2 + len(tool_version.encode("utf-8"))

    @classmethod
    def load(cls, path) -> tuple["MaskCache", bytes, str]:
        with open(path, "rb") as fh:
            data = fh.read()
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise CacheFormatError(f"truncated cache file (wanted {n} bytes at {pos})")
            out = data[pos : pos + n]
            pos += n
            return out

        if take(4) != CACHE_MAGIC:
            raise CacheFormatError("bad magic bytes, not a mask cache file")
        version, k, dim, nx, ny = struct.unpack("<HHHHH", take(10))
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache format version {version}")
        if dim != DIM:
            raise CacheFormatError(f"cache dim {dim} unsupported (expected {DIM})")
        x_lo, x_hi, y_lo, y_hi, r_atom, ds = struct.unpack("<6d", take(48))
        checksum = take(32)
        config_hash = take(32)
        (ver_len,) = struct.unpack("<H", take(2))
        tool_version = take(ver_len).decode("utf-8")
        igrid = InputGrid(k)
        agrid = AtomicGrid(x_lo, x_hi, y_lo, y_hi, nx, ny, r_atom)
        n_bytes = (igrid.n_cells + 7) // 8
        blob = take(nx * ny * n_bytes)
        if pos != len(data):
            raise CacheFormatError(f"{len(data) - pos} trailing bytes in cache file")
        bits = np.frombuffer(blob, dtype=np.uint8).reshape(nx * ny, n_bytes).copy()
        cache = cls(igrid=igrid, agrid=agrid, ds=ds, flow_checksum=checksum, bits=bits)
        return cache, config_hash, tool_version


def _atomic_hits_for_path(xy: np.ndarray, agrid: AtomicGrid, ds: float) -> np.ndarray:
    """Flat indices of grid points strictly within r_atom of the densified path."""
    pts = densify_polyline(xy, ds)
    r = agrid.r_atom
    inside = (
        (pts[:, 0] >= agrid.x_lo - r)
        & (pts[:, 0] <= agrid.x_hi + r)
        & (pts[:, 1] >= agrid.y_lo - r)
        & (pts[:, 1] <= agrid.y_hi + r)
    )
    pts = pts[inside]
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=int)
    # window of grid indices that could be within r_atom of each point
    wx = int(np.floor(r / agrid.sx)) + 1
    wy = int(np.floor(r / agrid.sy)) + 1
    fx = (pts[:, 0] - agrid.x_lo) / agrid.sx
    fy = (pts[:, 1] - agrid.y_lo) / agrid.sy
    ox, oy = np.meshgrid(np.arange(-wx, wx + 1), np.arange(-wy, wy + 1), indexing="ij")
    ix = np.floor(fx)[:, None] + ox.ravel()[None, :]
    iy = np.floor(fy)[:, None] + oy.ravel()[None, :]
    valid = (ix >= 0) & (ix < agrid.nx) & (iy >= 0) & (iy < agrid.ny)
    gx = agrid.x_lo + ix * agrid.sx
    gy = agrid.y_lo + iy * agrid.sy
    hit = valid & ((gx - pts[:, 0:1]) ** 2 + (gy - pts[:, 1:2]) ** 2 < r * r)
    if not np.any(hit):
        return np.zeros(0, dtype=int)
    flat = (ix[hit].astype(int) * agrid.ny + iy[hit].astype(int))
    return np.unique(flat)


def _build_chunk(args):
    model_params, whitening, n_layers, k, agrid, ds, cell_lo, cell_hi = args
    from .flow import FlowModel, Whitening

    model = FlowModel.create(Whitening(*whitening), n_layers=n_layers)
    model.set_params(model_params)
    igrid = InputGrid(k)
    centroids = igrid.all_centroids()[cell_lo:cell_hi]
    thetas, _ = model.forward(centroids)
    out = []
    for row_idx in range(thetas.shape[0]):
        theta_row = thetas[row_idx]
        if theta_row[0] <= 0 or not np.all(np.isfinite(theta_row)):
            out.append(np.zeros(0, dtype=int))
            continue
        n_pts = max(int(np.ceil(theta_row[0] / ds)) + 1, 2)
        path = reconstruct(PrimitiveParams.from_array(theta_row), n_pts)
        out.append(_atomic_hits_for_path(path.xy, agrid, ds))
    return out


def build_cache(
    model: FlowModel,
    igrid: InputGrid,
    agrid: AtomicGrid,
    ds: float = 0.01,
    n_workers: int = 1,
) -> MaskCache:
    """Collision-test every cell's centroid primitive against every atomic map.

    The work is split over cells; the merged result is identical for any
    worker count because cell order is fixed and each cell's hits are
    independent of the rest.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    n_cells = igrid.n_cells
    n_bytes = (n_cells + 7) // 8
    bits = np.zeros((agrid.n_atomic, n_bytes), dtype=np.uint8)

    chunk = 2048
    spans = [(lo, min(lo + chunk, n_cells)) for lo in range(0, n_cells, chunk)]
    whitening = (model.whitening.mean, model.whitening.std)
    jobs = [
        (model.get_params(), whitening, len(model.layers), igrid.k, agrid, ds, lo, hi)
        for lo, hi in spans
    ]
    if n_workers <= 1:
        results = [_build_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_build_chunk, jobs))
    for (lo, _), hits_list in zip(spans, results):
        for offset, hits in enumerate(hits_list):
            cell = lo + offset
            byte, bit = cell >> 3, cell & 7
            for a in hits:
                bits[a, byte] |= 1 << bit
    return MaskCache(
        igrid=igrid, agrid=agrid, ds=ds, flow_checksum=model.checksum(), bits=bits
    )
