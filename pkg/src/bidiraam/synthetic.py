"""Synthetic annotated "face" images with known shape and texture modes.

A generator (fixed by ``model_seed``) owns a base mesh, a few smooth
deformation modes, a smooth base texture with additive texture modes, and a
background. Each sample (fixed by ``rng_seed`` and its index) draws mode
coefficients and a global transform and is rendered by mapping every pixel
back into the base frame through the sample's piecewise-affine warp.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import GlobalBasis, as_points, as_vector, build_triangulation, locate, signed_areas

DISTORTIONS = ("none", "similarity", "affine")


@dataclass(frozen=True)
class SyntheticSpec:
    landmark_count: int = 24
    shape_modes: int = 3
    # per-landmark RMS displacement (px) of the first mode at full coefficient; later modes decay by 0.7
    shape_amplitude: float = 3.0
    texture_modes: int = 2
    # RMS intensity of the first texture mode at full coefficient; later modes decay by 0.7
    texture_amplitude: float = 0.15
    # coefficient magnitudes are drawn uniformly from this fraction band of the amplitude
    coefficient_band: tuple = (0.0, 1.0)
    global_distortion: str = "similarity"
    rotation_deg: float = 10.0
    scale_jitter: float = 0.1
    shear: float = 0.0
    translation_px: float = 4.0
    noise_sigma: float = 0.0
    image_size: tuple = (128, 128)
    face_radius: float = 30.0
    count: int = 20
    model_seed: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.global_distortion not in DISTORTIONS:
            raise ValueError(f"unknown global distortion {self.global_distortion!r}")
        lo, hi = self.coefficient_band
        if not 0 <= lo <= hi <= 1:
            raise ValueError("coefficient_band must satisfy 0 <= lo <= hi <= 1")
        if self.landmark_count < 3:
            raise ValueError("need at least 3 landmarks")


class SmoothField:
    """Sum of random plane waves: ``offset + sum a_k cos(w_k . x + phi_k)``."""

    def __init__(self, rng, n_terms, min_wavelength, max_wavelength, amplitude, offset=0.0):
        wl = rng.uniform(min_wavelength, max_wavelength, n_terms)
        ang = rng.uniform(0, 2 * np.pi, n_terms)
        self.freqs = (2 * np.pi / wl)[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
        self.phases = rng.uniform(0, 2 * np.pi, n_terms)
        self.amps = amplitude * rng.uniform(0.5, 1.0, n_terms)
        self.offset = offset

    def __call__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return self.offset + np.cos(pts @ self.freqs.T + self.phases) @ self.amps


class Texture:
    """Linear combination of fields: ``offset + sum w_i f_i(x)``."""

    def __init__(self, fields, weights, offset=0.0):
        self.fields = list(fields)
        self.weights = np.asarray(weights, dtype=float)
        self.offset = offset

    def __call__(self, points):
        out = np.full(np.asarray(points).reshape(-1, 2).shape[0], float(self.offset))
        for f, w in zip(self.fields, self.weights):
            out += w * f(points)
        return out


def base_layout(n, radius, rng):
    """Face-like landmark layout: an outer contour and an inner ring, slightly jittered."""
    n_out = n if n < 6 else max(3, int(round(0.6 * n)))
    n_in = n - n_out
    th = -np.pi / 2 + 2 * np.pi * (np.arange(n_out) + 0.5) / n_out
    outer = np.column_stack([radius * np.cos(th), 1.15 * radius * np.sin(th)])
    pts = [outer]
    if n_in:
        # a centre point inside larger rings avoids near co-circular quads
        n_ring = n_in - 1 if n_in >= 4 else n_in
        th = 2 * np.pi * (np.arange(n_ring) + 0.25) / n_ring
        r = 0.5 * radius if n_ring > 2 else 0.2 * radius
        pts.append(np.column_stack([r * np.cos(th), 0.9 * r * np.sin(th) - 0.05 * radius]))
        if n_ring < n_in:
            pts.append([[0.0, -0.05 * radius]])
    pts = np.vstack(pts)
    pts += rng.uniform(-0.03, 0.03, pts.shape) * radius
    return as_vector(pts - pts.mean(axis=0))


def delaunay_margin(shape, triangles):
    """Smallest ``pi - (alpha + beta)`` over interior edges (opposite angles alpha, beta)."""
    pts = as_points(shape)
    opposite = {}
    for tri in np.asarray(triangles):
        for i in range(3):
            a, b, c = tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3]
            u, w = pts[a] - pts[c], pts[b] - pts[c]
            ang = np.arccos(np.clip(u @ w / (np.linalg.norm(u) * np.linalg.norm(w)), -1, 1))
            opposite.setdefault((min(a, b), max(a, b)), []).append(ang)
    sums = [sum(v) for v in opposite.values() if len(v) == 2]
    return float(np.pi - max(sums)) if sums else float(np.pi)


def default_anchors(base_shape, n_outer=None):
    """Indices of the outer-contour landmarks nearest the upper corners and the chin."""
    pts = as_points(base_shape)
    v = len(pts)
    n_outer = n_outer or (v if v < 6 else max(3, int(round(0.6 * v))))
    outer = pts[:n_outer]
    ang = np.arctan2(outer[:, 1], outer[:, 0])
    chosen = []
    for target in (np.deg2rad(-150), np.deg2rad(-30), np.deg2rad(90)):
        d = np.abs(np.angle(np.exp(1j * (ang - target))))
        d[chosen] = np.inf
        chosen.append(int(np.argmin(d)))
    return tuple(chosen)


def _orthonormalize_against(vectors, against):
    out = []
    basis = [a / np.linalg.norm(a) for a in against]
    for v in vectors:
        w = v.copy()
        for _ in range(2):
            for u in basis + out:
                w -= (u @ w) * u
        out.append(w / np.linalg.norm(w))
    return out


@dataclass
class Sample:
    shape_coeffs: np.ndarray
    texture_coeffs: np.ndarray
    matrix: np.ndarray
    translation: np.ndarray

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("shape_coeffs", "texture_coeffs", "matrix", "translation")))


class FaceGenerator:
    """The population: base mesh, deformation modes, textures and background."""

    def __init__(self, spec):
        self.spec = spec
        rng = np.random.default_rng([spec.model_seed, 7919])
        R = spec.face_radius
        # redraw the jitter until every interior edge is clearly Delaunay, so a
        # mean shape estimated from samples triangulates the same way
        for _ in range(1000):
            self.base_shape = base_layout(spec.landmark_count, R, rng)
            self.triangles = build_triangulation(self.base_shape)
            if delaunay_margin(self.base_shape, self.triangles) > np.deg2rad(4):
                break
        self.anchors = default_anchors(self.base_shape)
        pts = as_points(self.base_shape)
        affine = GlobalBasis.build("affine", self.base_shape).vectors
        raw = []
        for _ in range(spec.shape_modes):
            fx = SmoothField(rng, 3, 1.5 * R, 4.0 * R, 1.0)
            fy = SmoothField(rng, 3, 1.5 * R, 4.0 * R, 1.0)
            raw.append(as_vector(np.column_stack([fx(pts), fy(pts)])))
        self.shape_modes = np.array(_orthonormalize_against(raw, list(affine))).reshape(spec.shape_modes, -1)
        self.shape_amplitudes = spec.shape_amplitude * 0.7 ** np.arange(spec.shape_modes)

        self.base_texture = SmoothField(rng, 10, 0.35 * R, 0.9 * R, 0.12, offset=0.5)
        # texture modes: unit-RMS over the base face region, orthogonal to constants,
        # to the base texture and to each other there
        grid = self._face_grid()
        self.texture_modes = []
        for _ in range(spec.texture_modes):
            f = SmoothField(rng, 6, 0.35 * R, 0.9 * R, 1.0)
            others = [self.base_texture] + self.texture_modes
            G = np.column_stack([np.ones(len(grid))] + [g(grid) for g in others])
            coef = np.linalg.lstsq(G, f(grid), rcond=None)[0]
            tex = Texture([f] + others, np.concatenate([[1.0], -coef[1:]]), offset=-coef[0])
            std = np.std(tex(grid))
            self.texture_modes.append(Texture(tex.fields, tex.weights / std, tex.offset / std))
        self.texture_amplitudes = spec.texture_amplitude * 0.7 ** np.arange(spec.texture_modes)
        self.background = SmoothField(rng, 6, 0.6 * R, 2.0 * R, 0.08, offset=0.3)

    def _face_grid(self):
        pts = as_points(self.base_shape)
        lo, hi = np.floor(pts.min(axis=0)), np.ceil(pts.max(axis=0))
        xs, ys = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
        grid = np.column_stack([xs.ravel(), ys.ravel()])
        idx, _ = locate(grid, pts, self.triangles)
        return grid[idx >= 0]

    def texture(self, texture_coeffs):
        fields = [self.base_texture] + self.texture_modes
        return Texture(fields, np.concatenate([[1.0], np.asarray(texture_coeffs, dtype=float)]))

    def local_shape(self, shape_coeffs):
        c = np.asarray(shape_coeffs, dtype=float)
        return self.base_shape + (c @ self.shape_modes if c.size else 0.0)

    def shape(self, sample):
        return as_vector(as_points(self.local_shape(sample.shape_coeffs)) @ sample.matrix.T + sample.translation)

    def draw(self, rng):
        spec = self.spec
        lo, hi = spec.coefficient_band
        v = spec.landmark_count

        def coeffs(amps, scale):
            mag = rng.uniform(lo, hi, len(amps)) * amps * scale
            return mag * rng.choice([-1.0, 1.0], len(amps))

        for _ in range(100):
            sc = coeffs(self.shape_amplitudes, np.sqrt(v))
            if not np.any(signed_areas(self.local_shape(sc), self.triangles) <= 0):
                break
        else:
            sc = np.zeros(spec.shape_modes)
        tc = coeffs(self.texture_amplitudes, 1.0)
        h, w = spec.image_size
        centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        if spec.global_distortion == "none":
            A = np.eye(2)
            t = centre
        else:
            th = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
            s = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
            A = s * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            if spec.global_distortion == "affine" and spec.shear:
                A = A @ np.array([[1.0, rng.choice([-1.0, 1.0]) * spec.shear], [0.0, 1.0]])
            t = centre + rng.uniform(-spec.translation_px, spec.translation_px, 2)
        return Sample(sc, tc, A, t)

    def render(self, sample, noise=None):
        """Render a sample; ``noise`` is an optional additive image."""
        h, w = self.spec.image_size
        shape_pts = as_points(self.shape(sample))
        base_pts = as_points(self.base_shape)
        ys, xs = np.mgrid[0:h, 0:w]
        grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
        idx, bary = locate(grid, shape_pts, self.triangles)
        inside = idx >= 0
        tex = self.texture(sample.texture_coeffs)
        out = self.background(grid)
        u = np.einsum("nk,nkc->nc", bary[inside], base_pts[self.triangles[idx[inside]]])
        out[inside] = tex(u)
        # continue the texture a few pixels past the contour, then blend into the background
        outside = np.flatnonzero(~inside)
        edges, owner = _boundary_edges(self.triangles)
        a, b = shape_pts[edges[:, 0]], shape_pts[edges[:, 1]]
        P = grid[outside]
        ab = b - a
        tpar = np.clip(np.einsum("pec,ec->pe", P[:, None, :] - a[None], ab) / np.sum(ab * ab, axis=1), 0, 1)
        near = a[None] + tpar[..., None] * ab[None]
        dist = np.linalg.norm(P[:, None, :] - near, axis=2)
        e = np.argmin(dist, axis=1)
        d = dist[np.arange(len(P)), e]
        close = d < 8.0
        if close.any():
            tri = owner[e[close]]
            M, c = _tri_affine(shape_pts, base_pts, self.triangles[tri])
            u_out = np.einsum("pij,pj->pi", M, P[close]) + c
            wgt = np.clip(1.0 - (d[close] - 3.0) / 5.0, 0.0, 1.0)
            sel = outside[close]
            out[sel] = wgt * tex(u_out) + (1 - wgt) * out[sel]
        img = out.reshape(h, w)
        if noise is not None:
            img = img + noise
        return img


def _boundary_edges(triangles):
    seen = {}
    for t, tri in enumerate(triangles):
        for i in range(3):
            e = tuple(sorted((int(tri[i]), int(tri[(i + 1) % 3]))))
            seen.setdefault(e, []).append(t)
    edges = [e for e, ts in seen.items() if len(ts) == 1]
    owner = [seen[e][0] for e in edges]
    return np.array(edges, dtype=np.int64), np.array(owner, dtype=np.int64)


def _tri_affine(src_pts, dst_pts, tris):
    s0, s1, s2 = (src_pts[tris[:, c]] for c in range(3))
    d0, d1, d2 = (dst_pts[tris[:, c]] for c in range(3))
    S = np.stack([s1 - s0, s2 - s0], axis=2)
    D = np.stack([d1 - d0, d2 - d0], axis=2)
    M = D @ np.linalg.inv(S)
    return M, d0 - np.einsum("pij,pj->pi", M, s0)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    generator: FaceGenerator = field(repr=False)
    images: list = field(repr=False)
    shapes: list = field(repr=False)
    samples: list = field(repr=False)

    @property
    def anchors(self):
        return self.generator.anchors

    def __len__(self):
        return len(self.images)


def generate_synthetic_dataset(spec):
    """Draw ``spec.count`` samples; identical output for identical specs.

    The population depends only on ``model_seed`` and the mode/landmark
    counts, so datasets drawn with other ``rng_seed`` values, coefficient
    bands or distortions share it. Sample ``i`` depends only on
    ``(rng_seed, i)``, so a larger count extends a smaller one.
    """
    gen = FaceGenerator(spec)
    images, shapes, samples = [], [], []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.rng_seed, i, 104729])
        sample = gen.draw(rng)
        noise = rng.normal(0.0, spec.noise_sigma, spec.image_size) if spec.noise_sigma > 0 else None
        images.append(gen.render(sample, noise))
        shapes.append(gen.shape(sample))
        samples.append(sample)
    return SyntheticDataset(spec, gen, images, shapes, samples)
