"""Shapes, triangle meshes, piecewise-affine warps and global transforms.

Conventions used throughout the package:

* A *shape* is a flat float vector ``(x1, y1, x2, y2, ..., xv, yv)``.
  ``as_points`` views it as a ``(v, 2)`` array.
* Images are 2-D float arrays indexed ``image[row, col]``; the point
  ``(x, y)`` refers to column ``x`` and row ``y`` and pixel centres sit on
  integer coordinates.
* A *frame* (:class:`TemplateFrame`) is the set of raster pixels covered by
  the mesh of a reference shape. Template-frame quantities (appearance
  images, steepest-descent images, residuals) are stored as flat arrays over
  the frame's mesh pixels, in row-major order.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import DegenerateAnchors, DegenerateShape, NonDiffeomorphicUpdate

GLOBAL_KINDS = ("similarity", "affine", "translation")

_BARY_EPS = 1e-10


def as_points(shape):
    return np.asarray(shape, dtype=float).reshape(-1, 2)


def as_vector(points):
    return np.asarray(points, dtype=float).reshape(-1)


def check_shape(shape):
    s = np.asarray(shape, dtype=float)
    if s.ndim != 1 or s.size % 2 or s.size < 6:
        raise DegenerateShape(f"shape must be a flat vector of >= 3 (x, y) pairs, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DegenerateShape("shape has non-finite coordinates")
    return s


def signed_areas(shape, triangles):
    """Signed area of each triangle (positive = counter-clockwise in x/y)."""
    pts = as_points(shape)
    a, b, c = pts[triangles[:, 0]], pts[triangles[:, 1]], pts[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


def build_triangulation(s0):
    """Delaunay triangulation of the landmarks of ``s0``.

    The result is canonical: every triangle is oriented counter-clockwise and
    rotated so that its smallest index comes first, and triangles are sorted
    lexicographically. Co-circular configurations are split the way Qhull
    splits them, which is deterministic for a given input.
    """
    pts = as_points(check_shape(s0))
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
        raise DegenerateShape("landmarks are collinear")
    try:
        tri = Delaunay(pts).simplices.astype(np.int64)
    except QhullError as exc:
        raise DegenerateShape(f"triangulation failed: {exc}") from None
    areas = signed_areas(s0, tri)
    tri[areas < 0] = tri[areas < 0][:, [0, 2, 1]]
    areas = np.abs(areas)
    tri = tri[areas > 1e-12 * max(1.0, areas.max())]
    first = np.argmin(tri, axis=1)
    tri = np.stack([np.roll(t, -k) for t, k in zip(tri, first)])
    order = np.lexsort(tri.T[::-1])
    return tri[order]


def locate(points, vertices, triangles):
    """Find the triangle containing each point and its barycentric weights.

    Points on a shared edge go to the lowest-indexed triangle. Points outside
    the mesh get triangle index -1 and zero weights.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
    tri_index = np.full(len(points), -1, dtype=np.int64)
    bary = np.zeros((len(points), 3))
    for t, (i, j, k) in enumerate(triangles):
        v0 = vertices[i]
        m = np.column_stack([vertices[j] - v0, vertices[k] - v0])
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if abs(det) < 1e-14:
            continue
        free = tri_index < 0
        if not free.any():
            break
        d = points[free] - v0
        b1 = (m[1, 1] * d[:, 0] - m[0, 1] * d[:, 1]) / det
        b2 = (-m[1, 0] * d[:, 0] + m[0, 0] * d[:, 1]) / det
        b0 = 1.0 - b1 - b2
        inside = (b0 >= -_BARY_EPS) & (b1 >= -_BARY_EPS) & (b2 >= -_BARY_EPS)
        idx = np.flatnonzero(free)[inside]
        tri_index[idx] = t
        bary[idx] = np.column_stack([b0[inside], b1[inside], b2[inside]])
    return tri_index, bary


def bilinear(image, points):
    """Bilinear interpolation of ``image`` at ``(x, y)`` points.

    Returns ``(values, valid)``; points whose interpolation stencil leaves the
    image are invalid and get value 0.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    # snap rounding noise so samples on pixel centres are exact
    xs = np.where(np.abs(xs - np.round(xs)) < 1e-9, np.round(xs), xs)
    ys = np.where(np.abs(ys - np.round(ys)) < 1e-9, np.round(ys), ys)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    values = ((1 - fx) * (1 - fy) * image[y0, x0] + fx * (1 - fy) * image[y0, x1]
              + (1 - fx) * fy * image[y1, x0] + fx * fy * image[y1, x1])
    return np.where(valid, values, 0.0), valid


def _affine_maps(src, dst, triangles):
    """Per-triangle affine maps ``x -> A x + b`` taking ``src`` onto ``dst``."""
    sp, dp = as_points(src), as_points(dst)
    s0, s1, s2 = (sp[triangles[:, c]] for c in range(3))
    d0, d1, d2 = (dp[triangles[:, c]] for c in range(3))
    S = np.stack([s1 - s0, s2 - s0], axis=2)
    D = np.stack([d1 - d0, d2 - d0], axis=2)
    A = D @ np.linalg.inv(S)
    b = d0 - np.einsum("tij,tj->ti", A, s0)
    return A, b


class TemplateFrame:
    """Raster pixels covered by the mesh of a reference shape.

    ``origin`` is the (x, y) coordinate of raster pixel (row 0, col 0), so
    raster pixel ``(r, c)`` sits at point ``origin + (c, r)``.
    """

    def __init__(self, s0, triangles, origin=(0.0, 0.0), size=None, margin=1):
        self.s0 = check_shape(s0).copy()
        self.triangles = np.asarray(triangles, dtype=np.int64)
        pts = as_points(self.s0)
        if size is None:
            origin = (float(np.floor(pts[:, 0].min()) - margin), float(np.floor(pts[:, 1].min()) - margin))
            width = int(np.ceil(pts[:, 0].max()) + margin - origin[0]) + 1
            height = int(np.ceil(pts[:, 1].max()) + margin - origin[1]) + 1
        else:
            height, width = size
        self.origin = np.array(origin, dtype=float)
        self.height, self.width = int(height), int(width)
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        grid = np.column_stack([cols.ravel() + self.origin[0], rows.ravel() + self.origin[1]])
        tri_index, bary = locate(grid, pts, self.triangles)
        inside = tri_index >= 0
        self.flat_index = np.flatnonzero(inside)
        self.rows = rows.ravel()[inside]
        self.cols = cols.ravel()[inside]
        self.points = grid[inside]
        self.tri_index = tri_index[inside]
        self.bary = bary[inside]
        self.pixel_verts = self.triangles[self.tri_index]
        self.mask = np.zeros((self.height, self.width), dtype=bool)
        self.mask[self.rows, self.cols] = True
        self._areas0 = signed_areas(self.s0, self.triangles)

    @property
    def n_pixels(self):
        return len(self.flat_index)

    def to_raster(self, values, fill=np.nan):
        out = np.full((self.height, self.width), fill, dtype=float)
        out[self.rows, self.cols] = values
        return out

    def from_raster(self, raster):
        return np.asarray(raster, dtype=float)[self.rows, self.cols]

    def warp_points(self, shape):
        """Image of every mesh pixel under the piecewise-affine map s0 -> shape."""
        verts = as_points(shape)[self.pixel_verts]
        return np.einsum("nk,nkc->nc", self.bary, verts)

    def triangle_jacobians(self, shape):
        """2x2 linear part of the affine map of each triangle, s0 -> shape."""
        return _affine_maps(self.s0, shape, self.triangles)[0]

    def folded_triangles(self, shape):
        """Triangles that are degenerate or flipped relative to s0."""
        areas = signed_areas(shape, self.triangles)
        return areas * np.sign(self._areas0) <= 1e-9 * np.abs(self._areas0)

    def sample(self, image, shape):
        """Sample ``image`` at the warped mesh pixels.

        Returns ``(values, valid)``. Pixels whose destination triangle is
        degenerate or flipped, or whose position falls outside the image, are
        invalid.
        """
        values, valid = bilinear(image, self.warp_points(shape))
        bad = self.folded_triangles(shape)
        if bad.any():
            valid &= ~bad[self.tri_index]
            values = np.where(valid, values, 0.0)
        return values, valid

    def gradient(self, values, valid=None):
        """Central-difference gradient of a template-frame image.

        Differences are one-sided where a neighbour is masked and zero where
        both neighbours are masked. Returns an ``(N, 2)`` array of (d/dx, d/dy).
        """
        r = np.full((self.height + 2, self.width + 2), np.nan)
        v = np.asarray(values, dtype=float)
        if valid is not None:
            v = np.where(valid, v, np.nan)
        r[self.rows + 1, self.cols + 1] = v
        centre = r[self.rows + 1, self.cols + 1]
        out = np.zeros((self.n_pixels, 2))
        for axis, (dr, dc) in enumerate(((0, 1), (1, 0))):
            fwd = r[self.rows + 1 + dr, self.cols + 1 + dc]
            bwd = r[self.rows + 1 - dr, self.cols + 1 - dc]
            hf, hb = np.isfinite(fwd), np.isfinite(bwd)
            g = np.where(hf & hb, 0.5 * (fwd - bwd), 0.0)
            g = np.where(hf & ~hb, fwd - centre, g)
            g = np.where(~hf & hb, centre - bwd, g)
            out[:, axis] = np.where(np.isfinite(centre), g, 0.0)
        return out


def piecewise_affine_warp(image, src_shape, dst_shape, triangles, out_size=None, origin=(0.0, 0.0)):
    """Warp ``image`` from the ``dst_shape`` mesh into the ``src_shape`` frame.

    Every output pixel ``x`` inside the mesh of ``src_shape`` receives
    ``image(A_t(x))`` where ``A_t`` is the affine map of its triangle from
    ``src_shape`` onto ``dst_shape``. Output pixels outside the mesh, outside
    the image, or in a degenerate destination triangle are NaN.
    """
    image = np.asarray(image, dtype=float)
    if out_size is None:
        out_size = image.shape
    frame = TemplateFrame(src_shape, triangles, origin=origin, size=out_size)
    values, valid = frame.sample(image, dst_shape)
    return frame.to_raster(np.where(valid, values, np.nan))


@dataclass(frozen=True)
class GlobalBasis:
    """Global transform N(x; q) = x + sum_i q_i s_i*(x) over a fixed base shape.

    ``vectors`` holds the k shape-sized vectors s_i* evaluated on the base
    shape. ``similarity`` uses (x, y), (-y, x), (1, 0), (0, 1); ``affine``
    uses (x, 0), (y, 0), (0, x), (0, y), (1, 0), (0, 1); ``translation`` keeps
    only the two translations.
    """

    kind: str
    vectors: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, kind, s0):
        if kind not in GLOBAL_KINDS:
            raise ValueError(f"unknown global transform kind {kind!r}")
        vecs = _basis_at(kind, as_points(s0))
        return cls(kind, np.ascontiguousarray(vecs.transpose(2, 0, 1).reshape(vecs.shape[2], -1)))

    @property
    def k(self):
        return {"similarity": 4, "affine": 6, "translation": 2}[self.kind]

    def vectors_at(self, points):
        """dN/dq at arbitrary points: an ``(N, 2, k)`` array."""
        return _basis_at(self.kind, np.asarray(points, dtype=float).reshape(-1, 2))

    def matrix(self, q):
        """The transform as ``(A, t)`` with N(x) = A x + t."""
        q = np.asarray(q, dtype=float)
        if self.kind == "similarity":
            A = np.array([[1 + q[0], -q[1]], [q[1], 1 + q[0]]])
            return A, q[2:4].copy()
        if self.kind == "affine":
            A = np.array([[1 + q[0], q[1]], [q[2], 1 + q[3]]])
            return A, q[4:6].copy()
        return np.eye(2), q[:2].copy()

    def params(self, A, t):
        """Encode ``x -> A x + t`` as q; A must lie in this family."""
        A = np.asarray(A, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "similarity":
            if not (np.isclose(A[0, 0], A[1, 1], atol=1e-9) and np.isclose(A[0, 1], -A[1, 0], atol=1e-9)):
                raise ValueError("matrix is not a similarity")
            return np.array([A[0, 0] - 1, A[1, 0], t[0], t[1]])
        if self.kind == "affine":
            return np.array([A[0, 0] - 1, A[0, 1], A[1, 0], A[1, 1] - 1, t[0], t[1]])
        if not np.allclose(A, np.eye(2), atol=1e-9):
            raise ValueError("matrix is not a pure translation")
        return t[:2].copy()

    def apply(self, shape, q):
        A, t = self.matrix(q)
        return as_vector(as_points(shape) @ A.T + t)

    def fit(self, src, dst):
        """Least-squares q mapping points ``src`` onto ``dst``."""
        return self.params(*fit_transform(self.kind, src, dst))


def _basis_at(kind, pts):
    n = len(pts)
    x, y = pts[:, 0], pts[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    if kind == "similarity":
        cols = [(x, y), (-y, x), (one, zero), (zero, one)]
    elif kind == "affine":
        cols = [(x, zero), (y, zero), (zero, x), (zero, y), (one, zero), (zero, one)]
    elif kind == "translation":
        cols = [(one, zero), (zero, one)]
    else:
        raise ValueError(f"unknown global transform kind {kind!r}")
    return np.stack([np.stack(c, axis=1) for c in cols], axis=2)


def fit_transform(kind, src, dst):
    """Least-squares ``(A, t)`` of the given family mapping src onto dst."""
    sp, dp = as_points(src), as_points(dst)
    if kind == "translation":
        return np.eye(2), (dp - sp).mean(axis=0)
    centred = sp - sp.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
        raise DegenerateAnchors("source points are collinear")
    n = len(sp)
    if kind == "similarity":
        M = np.zeros((2 * n, 4))
        M[0::2] = np.column_stack([sp[:, 0], -sp[:, 1], np.ones(n), np.zeros(n)])
        M[1::2] = np.column_stack([sp[:, 1], sp[:, 0], np.zeros(n), np.ones(n)])
        a, b, tx, ty = np.linalg.lstsq(M, dp.reshape(-1), rcond=None)[0]
        return np.array([[a, -b], [b, a]]), np.array([tx, ty])
    if kind == "affine":
        M = np.column_stack([sp, np.ones(n)])
        sol = np.linalg.lstsq(M, dp, rcond=None)[0]
        return sol[:2].T.copy(), sol[2].copy()
    raise ValueError(f"unknown global transform kind {kind!r}")


def instantiate_shape(s0, shape_basis, p, global_basis, q):
    """N(W(s0; p); q): local deformation first, then the global transform."""
    s0 = check_shape(s0)
    p = np.asarray(p, dtype=float).reshape(-1)
    basis = np.asarray(shape_basis, dtype=float).reshape(p.size, s0.size)
    local = s0 + p @ basis if p.size else s0
    return global_basis.apply(local, q)


def warp_jacobian_dW_dp(frame, shape_basis):
    """Per-pixel ``(N, 2, n)`` Jacobian of the piecewise-affine warp at p = 0."""
    basis = np.asarray(shape_basis, dtype=float)
    n = basis.shape[0]
    if n == 0:
        return np.zeros((frame.n_pixels, 2, 0))
    B = basis.reshape(n, -1, 2)[:, frame.pixel_verts]
    return np.einsum("pk,ipkc->pci", frame.bary, B)


def global_jacobian_dN_dq(frame, current_shape, basis):
    """Per-pixel ``(N, 2, k)`` Jacobian of N with respect to q.

    ``current_shape`` is the shape N is applied to (W(s0; p)); the basis
    vectors are evaluated on its vertices and interpolated barycentrically.
    """
    vert = basis.vectors_at(as_points(current_shape))[frame.pixel_verts]
    return np.einsum("pk,pkcj->pcj", frame.bary, vert)


def compose_shapes(s0, triangles, current, displacement):
    """First-order ``W_current o W_displacement^-1`` evaluated on the vertices.

    Each vertex of ``s0`` is moved by the negated displacement and mapped
    through the piecewise-affine warp s0 -> ``current``; points are mapped by
    the affine maps of every triangle incident to the vertex and averaged.
    Raises :class:`NonDiffeomorphicUpdate` when the result flips a triangle.
    """
    s0p = as_points(s0)
    tri = np.asarray(triangles, dtype=np.int64)
    A, b = _affine_maps(s0, current, tri)
    moved = s0p - as_points(displacement)
    acc = np.zeros_like(s0p)
    count = np.zeros(len(s0p))
    for c in range(3):
        v = tri[:, c]
        mapped = np.einsum("tij,tj->ti", A, moved[v]) + b
        np.add.at(acc, v, mapped)
        np.add.at(count, v, 1.0)
    lonely = count == 0
    out = np.where(lonely[:, None], as_points(current) - as_points(displacement), acc / np.maximum(count, 1)[:, None])
    out = as_vector(out)
    check_unfolded(s0, out, tri)
    return out


def compose_inverse_update(p, delta_p, s0, shape_basis, triangles):
    """Inverse-compositional parameter update W(p) o W(delta_p)^-1 -> p'.

    The composed vertex positions are projected back onto the (orthonormal)
    shape basis. Raises :class:`NonDiffeomorphicUpdate` if either the composed
    mesh or its projection folds.
    """
    basis = np.asarray(shape_basis, dtype=float)
    p = np.asarray(p, dtype=float)
    if basis.shape[0] == 0:
        return p.copy()
    s0 = np.asarray(s0, dtype=float)
    current = s0 + p @ basis
    new = compose_shapes(s0, triangles, current, np.asarray(delta_p, dtype=float) @ basis)
    p_new = basis @ (new - s0)
    check_unfolded(s0, s0 + p_new @ basis, triangles)
    return p_new


def check_unfolded(s0, shape, triangles):
    """Raise :class:`NonDiffeomorphicUpdate` if ``shape`` flips or collapses a triangle of ``s0``."""
    a0 = signed_areas(s0, triangles)
    a1 = signed_areas(shape, triangles)
    if np.any(a1 * np.sign(a0) <= 1e-9 * np.abs(a0)):
        raise NonDiffeomorphicUpdate("warp folds the mesh")
