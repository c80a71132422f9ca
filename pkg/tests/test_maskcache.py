import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genplan.maskcache import (
    AtomicGrid,
    CacheFormatError,
    InputGrid,
    MaskCache,
    build_cache,
    decompose,
)
from genplan.primitives import PrimitiveParams, reconstruct
from genplan.vehicle import World, path_collides


def bisect_normal_quantile(p: float) -> float:
    """Independent quantile oracle: bisection on the erf-based normal CDF."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# input grid ------------------------------------------------------------------


def test_quantile_edges_match_bisection_oracle():
    g = InputGrid(4)
    edges = g.inner_edges
    assert edges.shape == (3,)
    assert edges[0] == pytest.approx(-0.6744897501960817, abs=1e-12)
    assert edges[1] == pytest.approx(0.0, abs=1e-12)
    assert edges[2] == pytest.approx(0.6744897501960817, abs=1e-12)
    for k in (6, 12):
        g = InputGrid(k)
        for j, e in enumerate(g.inner_edges, start=1):
            assert e == pytest.approx(bisect_normal_quantile(j / k), abs=1e-9)


def test_grid_rejects_degenerate_k():
    with pytest.raises(ValueError):
        InputGrid(1)


def test_cell_count_and_unflatten_roundtrip():
    g = InputGrid(6)
    assert g.n_cells == 1296
    for cell in (0, 1, 5, 6, 36, 1295, 777):
        idx = g.unflatten(cell)
        flat = ((idx[0] * 6 + idx[1]) * 6 + idx[2]) * 6 + idx[3]
        assert flat == cell
    with pytest.raises(ValueError):
        g.unflatten(1296)


def test_origin_lands_in_middle_cell_for_even_k():
    # z = 0+ sits just right of the median edge: per-axis index K/2
    g = InputGrid(6)
    cell = int(g.cell_of(np.array([[1e-12, 1e-12, 1e-12, 1e-12]]))[0])
    assert g.unflatten(cell) == (3, 3, 3, 3)


def test_centroids_land_in_their_own_cells():
    for k in (3, 6):
        g = InputGrid(k)
        cells = g.cell_of(g.all_centroids())
        assert np.array_equal(cells, np.arange(g.n_cells))


def test_centroid_matches_all_centroids_order():
    g = InputGrid(5)
    cents = g.all_centroids()
    for cell in (0, 7, 124, 311, 624):
        assert np.allclose(cents[cell], g.centroid(cell))


@given(st.integers(2, 9), st.lists(st.floats(-4, 4), min_size=4, max_size=4))
def test_negating_input_mirrors_cell_indices(k, zs):
    g = InputGrid(k)
    z = np.array(zs)
    # nudge off exact edges where mirror symmetry flips the boundary side
    z = z + 1e-9
    a = g.unflatten(int(g.cell_of(z[None, :])[0]))
    b = g.unflatten(int(g.cell_of(-z[None, :])[0]))
    assert all(ai + bi == k - 1 for ai, bi in zip(a, b))


def test_cell_occupancy_is_uniform():
    # light version of the acceptance check: K=3, 2e5 draws, 5 standard errors
    g = InputGrid(3)
    rng = np.random.default_rng(11)
    n = 200_000
    cells = g.cell_of(rng.standard_normal((n, 4)))
    counts = np.bincount(cells, minlength=g.n_cells)
    p = 1.0 / g.n_cells
    se = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * se)


# atomic grid -----------------------------------------------------------------


def test_atomic_grid_geometry_constants():
    a = AtomicGrid()
    assert a.n_atomic == 1600
    assert a.sx == pytest.approx(1.0 / 39.0, rel=1e-12)
    assert a.sy == pytest.approx(1.0 / 39.0, rel=1e-12)
    assert a.r_cover == pytest.approx(0.5 * math.hypot(1 / 39, 1 / 39), rel=1e-12)
    assert a.r_cover < a.r_atom


def test_atomic_point_and_flat_index_agree_with_all_points():
    a = AtomicGrid()
    pts = a.all_points()
    for ix, iy in ((0, 0), (0, 39), (39, 0), (12, 31), (39, 39)):
        flat = a.flat_index(ix, iy)
        assert np.allclose(pts[flat], a.point(ix, iy))
    assert np.allclose(pts[0], [0.75, -0.5])
    assert np.allclose(pts[-1], [1.75, 0.5])


def test_rect_distance_inside_and_out():
    a = AtomicGrid()
    assert a.rect_distance(1.0, 0.0) == 0.0
    assert a.rect_distance(2.0, 0.0) == pytest.approx(0.25)
    assert a.rect_distance(0.75, 0.9) == pytest.approx(0.4)
    assert a.rect_distance(0.0, -1.0) == pytest.approx(math.hypot(0.75, 0.5))


# decompose -------------------------------------------------------------------


def test_decompose_empty_or_far_world():
    a = AtomicGrid()
    assert decompose(World(np.zeros((0, 3))), (0, 0, 0), a).size == 0
    far = World(np.array([[5.0, 5.0, 0.15]]))
    assert decompose(far, (0, 0, 0), a).size == 0


def test_decompose_obstacle_on_grid_point_selects_its_neighborhood():
    a = AtomicGrid()
    ix, iy = 20, 20
    g = a.point(ix, iy)
    sel = decompose(World(np.array([[g[0], g[1], 0.15]])), (0, 0, 0), a)
    assert a.flat_index(ix, iy) in sel
    neighborhood = {
        a.flat_index(ix + dx, iy + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
    }
    assert set(sel.tolist()) <= neighborhood


def test_decompose_is_rigid_transform_invariant():
    rng = np.random.default_rng(5)
    a = AtomicGrid()
    for _ in range(20):
        obs_body = np.column_stack(
            [rng.uniform(0.5, 2.0, 3), rng.uniform(-0.8, 0.8, 3), np.full(3, 0.15)]
        )
        px, py, h = rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-np.pi, np.pi)
        c, s = np.cos(h), np.sin(h)
        obs_world = obs_body.copy()
        obs_world[:, 0] = px + c * obs_body[:, 0] - s * obs_body[:, 1]
        obs_world[:, 1] = py + s * obs_body[:, 0] + c * obs_body[:, 1]
        sel_body = decompose(World(obs_body), (0.0, 0.0, 0.0), a)
        sel_world = decompose(World(obs_world), (px, py, h), a)
        assert np.array_equal(sel_body, sel_world)


@pytest.mark.parametrize("r_obs", [0.15, 0.3])
def test_decompose_union_covers_obstacle_patch(r_obs):
    """Any point of an obstacle inside the ROI lies within r_atom of a selection."""
    rng = np.random.default_rng(17)
    a = AtomicGrid()
    pts = a.all_points()
    for _ in range(60):
        cx = rng.uniform(0.5, 2.0)
        cy = rng.uniform(-0.8, 0.8)
        sel = decompose(World(np.array([[cx, cy, r_obs]])), (0, 0, 0), a)
        ang = rng.uniform(0, 2 * np.pi, 200)
        rad = r_obs * np.sqrt(rng.uniform(0, 1, 200))
        px = cx + rad * np.cos(ang)
        py = cy + rad * np.sin(ang)
        in_roi = (
            (px >= a.x_lo) & (px <= a.x_hi) & (py >= a.y_lo) & (py <= a.y_hi)
        )
        if not np.any(in_roi):
            continue
        assert sel.size > 0
        d2 = (px[in_roi, None] - pts[sel, 0]) ** 2 + (py[in_roi, None] - pts[sel, 1]) ** 2
        assert np.all(d2.min(axis=1) <= a.r_atom**2 + 1e-12)


# mask cache mechanics --------------------------------------------------------


def test_rejected_cells_trivial_cases(small_cache):
    zero = small_cache.rejected_cells(np.zeros(0, dtype=int))
    assert zero.shape == (small_cache.bits.shape[1],)
    assert not zero.any()
    one = small_cache.rejected_cells(np.array([37]))
    assert np.array_equal(one, small_cache.bits[37])


def test_rejected_cells_or_is_monotone(small_cache):
    rng = np.random.default_rng(0)
    idx = rng.choice(small_cache.agrid.n_atomic, 8, replace=False)
    union = small_cache.unpack(small_cache.rejected_cells(idx))
    for a in idx:
        single = small_cache.unpack(small_cache.rejected_cells(np.array([a])))
        assert np.all(union[single])


def test_unpack_and_cell_bit_agree(small_cache):
    rng = np.random.default_rng(1)
    for a in rng.choice(small_cache.agrid.n_atomic, 5, replace=False):
        row = small_cache.unpack(small_cache.bits[int(a)])
        assert row.shape == (small_cache.igrid.n_cells,)
        for cell in rng.choice(small_cache.igrid.n_cells, 50, replace=False):
            assert row[cell] == small_cache.cell_bit(int(a), int(cell))


def test_cached_bits_match_direct_collision_oracle(identity_flow, small_cache):
    """Cached bit == explicit dense check of the centroid primitive, subsampled."""
    g, a = small_cache.igrid, small_cache.agrid
    rng = np.random.default_rng(23)
    cells = rng.choice(g.n_cells, 60, replace=False)
    atomics = rng.choice(a.n_atomic, 40, replace=False)
    pts = a.all_points()
    thetas, _ = identity_flow.forward(g.all_centroids()[cells])
    mismatches = 0
    for theta, cell in zip(thetas, cells):
        if theta[0] <= 0 or not np.all(np.isfinite(theta)):
            continue
        n_pts = max(int(np.ceil(theta[0] / small_cache.ds)) + 1, 2)
        path = reconstruct(PrimitiveParams.from_array(theta), n_pts)
        for ai in atomics:
            world = World(np.array([[pts[ai, 0], pts[ai, 1], a.r_atom]]))
            direct = path_collides(path, world, small_cache.ds)
            if direct != small_cache.cell_bit(int(ai), int(cell)):
                mismatches += 1
    assert mismatches == 0


def test_build_is_deterministic_across_worker_counts(identity_flow):
    from genplan.maskcache import InputGrid

    g = InputGrid(3)
    a = AtomicGrid(nx=8, ny=8)
    c1 = build_cache(identity_flow, g, a, ds=0.02, n_workers=1)
    c2 = build_cache(identity_flow, g, a, ds=0.02, n_workers=2)
    assert np.array_equal(c1.bits, c2.bits)
    assert c1.flow_checksum == c2.flow_checksum


# persistence -----------------------------------------------------------------


def test_cache_save_load_roundtrip(tmp_path, small_cache):
    p = tmp_path / "cache.gpmc"
    cfg_hash = bytes(range(32))
    small_cache.save(p, cfg_hash, "genplan 0.1.0")
    loaded, loaded_hash, ver = MaskCache.load(p)
    assert loaded_hash == cfg_hash
    assert ver == "genplan 0.1.0"
    assert loaded.igrid.k == small_cache.igrid.k
    assert loaded.agrid == small_cache.agrid
    assert loaded.ds == small_cache.ds
    assert loaded.flow_checksum == small_cache.flow_checksum
    assert np.array_equal(loaded.bits, small_cache.bits)
    expected = MaskCache.header_size("genplan 0.1.0") + small_cache.bits.size
    assert p.stat().st_size == expected


def test_cache_load_rejects_corrupt_files(tmp_path, small_cache):
    p = tmp_path / "cache.gpmc"
    small_cache.save(p)
    raw = p.read_bytes()

    bad_magic = tmp_path / "m.gpmc"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CacheFormatError, match="magic"):
        MaskCache.load(bad_magic)

    bad_version = tmp_path / "v.gpmc"
    bad_version.write_bytes(raw[:4] + b"\x63\x00" + raw[6:])
    with pytest.raises(CacheFormatError, match="version"):
        MaskCache.load(bad_version)

    truncated = tmp_path / "t.gpmc"
    truncated.write_bytes(raw[:-10])
    with pytest.raises(CacheFormatError, match="truncated"):
        MaskCache.load(truncated)

    trailing = tmp_path / "x.gpmc"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(CacheFormatError, match="trailing"):
        MaskCache.load(trailing)
