import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bidiraam import SyntheticSpec
from bidiraam.errors import DegenerateShape, NonDiffeomorphicUpdate
from bidiraam.geometry import (GlobalBasis, TemplateFrame, as_points, bilinear, build_triangulation,
                               compose_inverse_update, global_jacobian_dN_dq, instantiate_shape, locate,
                               piecewise_affine_warp, signed_areas, warp_jacobian_dW_dp)
from bidiraam.synthetic import FaceGenerator

from helpers import square_shape


def hull_vertex_count(points):
    """Brute force: i is a hull vertex if some edge (i, j) has every other point strictly on one side."""
    pts = np.asarray(points)
    n = len(pts)
    on_hull = set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = pts[j] - pts[i]
            cross = d[0] * (pts[:, 1] - pts[i, 1]) - d[1] * (pts[:, 0] - pts[i, 0])
            cross[[i, j]] = 0
            if np.all(cross >= -1e-12) or np.all(cross <= 1e-12):
                on_hull.update((i, j))
    return len(on_hull)


# --- triangulation --------------------------------------------------------

def test_three_points_give_one_triangle():
    tri = build_triangulation(np.array([0, 0, 4, 0, 0, 3], float))
    assert tri.tolist() == [[0, 1, 2]]


def test_square_gives_two_triangles_covering_it():
    s = square_shape(0, 0, 10, centre=False)
    tri = build_triangulation(s)
    assert tri.shape == (2, 3)
    assert np.isclose(signed_areas(s, tri).sum(), 100.0)
    assert np.array_equal(tri, build_triangulation(s.copy()))


def test_collinear_points_rejected():
    with pytest.raises(DegenerateShape):
        build_triangulation(np.array([0, 0, 1, 1, 2, 2, 3, 3], float))


def test_triangles_are_canonical_and_positive():
    s0 = FaceGenerator(SyntheticSpec()).base_shape
    tri = build_triangulation(s0)
    assert np.all(signed_areas(s0, tri) > 0)
    assert np.all(tri[:, 0] < tri[:, 1]) and np.all(tri[:, 0] < tri[:, 2])
    assert np.all(np.diff(tri[:, 0]) >= 0)
    assert all(len(set(t)) == 3 and max(t) < len(s0) // 2 for t in tri.tolist())


def test_generator_mesh_matches_euler_count():
    s0 = FaceGenerator(SyntheticSpec()).base_shape
    tri = build_triangulation(s0)
    v = len(s0) // 2
    b = hull_vertex_count(as_points(s0))
    assert len(tri) == 2 * v - b - 2


def test_every_mesh_pixel_in_exactly_one_triangle():
    s0 = FaceGenerator(SyntheticSpec()).base_shape
    tri = build_triangulation(s0)
    frame = TemplateFrame(s0, tri)
    pts = as_points(s0)
    # brute force: count containing triangles per pixel
    counts = np.zeros(frame.height * frame.width, int)
    rows, cols = np.mgrid[0:frame.height, 0:frame.width]
    grid = np.column_stack([cols.ravel() + frame.origin[0], rows.ravel() + frame.origin[1]])
    for t in tri:
        a, b, c = pts[t]
        m = np.column_stack([b - a, c - a])
        lam = np.linalg.solve(m, (grid - a).T).T
        inside = (lam[:, 0] >= -1e-10) & (lam[:, 1] >= -1e-10) & (lam.sum(1) <= 1 + 1e-10)
        counts += inside
    covered = counts > 0
    assert np.array_equal(np.flatnonzero(covered), frame.flat_index)
    assert np.all((frame.tri_index >= 0) & (frame.tri_index < len(tri)))


def test_shared_edge_goes_to_lowest_triangle():
    s = square_shape(0, 0, 2, centre=False)
    tri = build_triangulation(s)
    # the diagonal point belongs to both triangles
    idx, bary = locate(np.array([[1.0, 1.0]]), as_points(s), tri)
    assert idx[0] == 0
    assert np.isclose(bary.sum(), 1.0)


# --- global bases and instantiation ---------------------------------------

S0 = np.array([-10, -8, 12, -6, 9, 11, -7, 10, 1, 2], float)


def test_zero_parameters_return_s0_exactly():
    basis = np.linalg.qr(np.random.default_rng(0).normal(size=(10, 2)))[0].T
    for kind in ("similarity", "affine"):
        gb = GlobalBasis.build(kind, S0)
        out = instantiate_shape(S0, basis, np.zeros(2), gb, np.zeros(gb.k))
        assert np.array_equal(out, S0)


def test_similarity_translation():
    gb = GlobalBasis.build("similarity", S0)
    out = instantiate_shape(S0, np.zeros((0, 10)), np.zeros(0), gb, [0, 0, 3.5, -2.0])
    assert np.allclose(as_points(out) - as_points(S0), [3.5, -2.0], atol=0)


def test_basis_vectors_follow_definitions():
    x, y = as_points(S0).T
    sim = GlobalBasis.build("similarity", S0).vectors
    assert np.array_equal(sim[0], S0)
    assert np.array_equal(sim[1], np.column_stack([-y, x]).ravel())
    aff = GlobalBasis.build("affine", S0).vectors
    zero = np.zeros_like(x)
    expected = [(x, zero), (y, zero), (zero, x), (zero, y), (zero + 1, zero), (zero, zero + 1)]
    for vec, (ex, ey) in zip(aff, expected):
        assert np.array_equal(vec, np.column_stack([ex, ey]).ravel())


def test_affine_parameters_match_direct_matrix():
    A = np.array([[1.1, 0.2], [-0.1, 0.9]])
    t = np.array([4.0, -3.0])
    gb = GlobalBasis.build("affine", S0)
    out = instantiate_shape(S0, np.zeros((0, 10)), np.zeros(0), gb, gb.params(A, t))
    direct = as_points(S0) @ A.T + t
    assert np.allclose(as_points(out), direct, atol=1e-12)


@given(st.floats(-np.pi, np.pi), st.floats(0.3, 3.0), st.floats(-50, 50), st.floats(-50, 50))
def test_similarity_reproduces_any_similarity(theta, scale, tx, ty):
    R = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    target = as_points(S0) @ R.T + [tx, ty]
    q = np.array([scale * np.cos(theta) - 1, scale * np.sin(theta), tx, ty])
    gb = GlobalBasis.build("similarity", S0)
    out = instantiate_shape(S0, np.zeros((0, 10)), np.zeros(0), gb, q)
    assert np.max(np.abs(as_points(out) - target)) < 1e-9
    # the affine family contains it
    ga = GlobalBasis.build("affine", S0)
    qa = ga.params(*gb.matrix(q))
    out_a = instantiate_shape(S0, np.zeros((0, 10)), np.zeros(0), ga, qa)
    assert np.max(np.abs(out_a - out)) < 1e-9


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.floats(-30, 30), st.floats(-30, 30))
def test_affine_reproduces_any_affine_map(m, tx, ty):
    A = np.array(m).reshape(2, 2)
    target = as_points(S0) @ A.T + [tx, ty]
    gb = GlobalBasis.build("affine", S0)
    out = gb.apply(S0, gb.params(A, [tx, ty]))
    assert np.max(np.abs(as_points(out) - target)) < 1e-9


# --- piecewise affine warp ------------------------------------------------

def test_identity_warp_is_exact(rng):
    img = rng.normal(size=(40, 40))
    s = square_shape(5, 6, 20)
    tri = build_triangulation(s)
    out = piecewise_affine_warp(img, s, s, tri)
    mesh = np.isfinite(out)
    assert mesh.sum() == 21 * 21
    assert np.array_equal(out[mesh], img[mesh])


def test_constant_image_is_warp_invariant():
    img = np.full((50, 50), 0.7)
    s = square_shape(5, 5, 20)
    tri = build_triangulation(s)
    shifted = s + np.tile([5.0, 0.0], 5)
    out = piecewise_affine_warp(img, s, shifted, tri)
    assert np.all(out[np.isfinite(out)] == 0.7)


def test_ramp_under_uniform_scale():
    ys, xs = np.mgrid[0:80, 0:80]
    img = xs.astype(float)
    s = square_shape(5, 5, 25)
    tri = build_triangulation(s)
    out = piecewise_affine_warp(img, s, 2 * s, tri)
    mesh = np.isfinite(out)
    assert np.max(np.abs(out[mesh] - 2 * xs[mesh])) < 1e-6


@given(st.lists(st.floats(-0.3, 0.3), min_size=4, max_size=4), st.floats(-5, 5), st.floats(-5, 5),
       st.floats(-1, 1), st.floats(-1, 1), st.floats(-10, 10))
def test_warp_exact_on_affine_images(dA, tx, ty, a, b, c):
    A = np.eye(2) + np.array(dA).reshape(2, 2)
    t = np.array([20.0 + tx, 20.0 + ty])
    ys, xs = np.mgrid[0:90, 0:90]
    img = a * xs + b * ys + c
    src = square_shape(5, 5, 30)
    tri = build_triangulation(src)
    dst = (as_points(src) @ A.T + t).ravel()
    out = piecewise_affine_warp(img, src, dst, tri)
    mesh = np.isfinite(out)
    mapped = np.column_stack([xs[mesh], ys[mesh]]) @ A.T + t
    expected = a * mapped[:, 0] + b * mapped[:, 1] + c
    assert np.max(np.abs(out[mesh] - expected)) < 1e-6


def test_degenerate_destination_triangle_is_masked():
    img = np.ones((40, 40))
    s = square_shape(5, 5, 20)
    tri = build_triangulation(s)
    dst = s.copy()
    dst[8:10] = dst[0:2]  # centre collapses onto a corner
    out = piecewise_affine_warp(img, s, dst, tri)
    assert np.isnan(out).sum() > (40 * 40 - 21 * 21)


def test_bilinear_rejects_points_outside_image():
    img = np.arange(12.0).reshape(3, 4)
    v, ok = bilinear(img, np.array([[0.5, 0.5], [3.0, 2.0], [3.01, 0.0], [-0.01, 1.0]]))
    assert ok.tolist() == [True, True, False, False]
    assert np.isclose(v[0], (0 + 1 + 4 + 5) / 4) and v[1] == 11.0


# --- Jacobians ------------------------------------------------------------

def _single_triangle_frame():
    s0 = np.array([0, 0, 3, 0, 0, 3], float)
    return s0, TemplateFrame(s0, build_triangulation(s0))


def test_dW_dp_at_vertex_and_centroid():
    s0, frame = _single_triangle_frame()
    basis = np.zeros((1, 6))
    basis[0, 2] = 1.0  # vertex 1 moves by (1, 0)
    J = warp_jacobian_dW_dp(frame, basis)
    at_vertex = np.flatnonzero((frame.points == [3, 0]).all(axis=1))[0]
    at_centroid = np.flatnonzero((frame.points == [1, 1]).all(axis=1))[0]
    assert np.allclose(J[at_vertex, :, 0], [1, 0])
    assert np.allclose(J[at_centroid, :, 0], [1 / 3, 0])


def test_dN_dq_translation_columns_and_affine_columns():
    s0 = FaceGenerator(SyntheticSpec()).base_shape
    frame = TemplateFrame(s0, build_triangulation(s0))
    sim = global_jacobian_dN_dq(frame, s0, GlobalBasis.build("similarity", s0))
    assert np.allclose(sim[:, :, 2], [1.0, 0.0], atol=1e-12)
    assert np.allclose(sim[:, :, 3], [0.0, 1.0], atol=1e-12)
    aff = global_jacobian_dN_dq(frame, s0, GlobalBasis.build("affine", s0))
    x, y = frame.points.T
    z, o = np.zeros_like(x), np.ones_like(x)
    expected = np.stack([np.stack(c, 1) for c in [(x, z), (y, z), (z, x), (z, y), (o, z), (z, o)]], axis=2)
    assert np.allclose(aff, expected, atol=1e-9)


# --- composition ----------------------------------------------------------

def _composition_setup():
    gen = FaceGenerator(SyntheticSpec())
    s0 = gen.base_shape
    tri = gen.triangles
    return s0, gen.shape_modes, tri


def test_zero_update_is_identity():
    s0, basis, tri = _composition_setup()
    p = np.array([3.0, -2.0, 1.0])
    assert np.allclose(compose_inverse_update(p, np.zeros(3), s0, basis, tri), p, atol=1e-12)


def test_inverse_update_is_first_order_negation():
    s0, basis, tri = _composition_setup()
    for i in range(3):
        for eps in (1e-2, 1e-3):
            e = np.zeros(3)
            e[i] = eps
            err = np.linalg.norm(compose_inverse_update(np.zeros(3), e, s0, basis, tri) + e)
            assert err <= 1.0 * eps ** 2


def test_translation_mode_composes_exactly():
    s0, basis, tri = _composition_setup()
    v = len(s0) // 2
    trans = np.tile([1.0, 0.0], v) / np.sqrt(v)
    B = np.vstack([trans, basis])
    p = np.array([2.0, 0, 0, 0])
    dp = np.array([0.7, 0, 0, 0])
    out = compose_inverse_update(p, dp, s0, B, tri)
    assert np.allclose(out, p - dp, atol=1e-12)


@given(st.lists(st.floats(-0.05, 0.05), min_size=3, max_size=3))
def test_round_trip_returns_to_start(dp):
    s0, basis, tri = _composition_setup()
    p = np.array([2.0, -1.0, 0.5])
    dp = np.array(dp)
    back = compose_inverse_update(compose_inverse_update(p, dp, s0, basis, tri), -dp, s0, basis, tri)
    assert np.linalg.norm(back - p) <= 50 * np.linalg.norm(dp) ** 2 + 1e-12


def test_folding_update_is_reported():
    s0, basis, tri = _composition_setup()
    with pytest.raises(NonDiffeomorphicUpdate):
        compose_inverse_update(np.zeros(3), np.array([400.0, 0, 0]), s0, basis, tri)
