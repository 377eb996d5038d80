"""Training of statistical shape and appearance models and AAM assembly."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateShape
from .geometry import GlobalBasis, TemplateFrame, as_points, as_vector, build_triangulation, check_shape

MODES = ("appended", "separate")


def _centre(shape):
    pts = as_points(shape)
    return as_vector(pts - pts.mean(axis=0))


def _similarity_align(x, target):
    """Rotate and scale the centred shape ``x`` onto the centred ``target``."""
    xp, tp = as_points(x), as_points(target)
    nx = np.sum(xp * xp)
    a = np.sum(xp * tp) / nx
    b = np.sum(xp[:, 0] * tp[:, 1] - xp[:, 1] * tp[:, 0]) / nx
    A = np.array([[a, -b], [b, a]])
    return as_vector(xp @ A.T)


def procrustes_align(shapes, tol=1e-10, max_iters=100):
    """Generalised Procrustes alignment.

    Every shape is centred, rotated and scaled onto the current mean and then
    projected into the tangent space of the mean (scaled so that its dot
    product with the mean is one). The mean is re-estimated, re-oriented onto
    the initial reference and renormalised to zero centroid and unit norm
    until it moves by less than ``tol``.

    The initial reference is the normalised average of the centred,
    unit-norm inputs, so the result does not depend on input order.

    Returns ``(aligned, mean)`` where ``aligned`` is an ``(N, 2v)`` array.
    """
    if len(shapes) < 2:
        raise ValueError("procrustes alignment needs at least two shapes")
    X = np.array([_centre(check_shape(s)) for s in shapes])
    if len({x.size for x in X}) != 1:
        raise ValueError("shapes have different landmark counts")
    norms = np.linalg.norm(X, axis=1)
    scale = norms.max()
    if np.any(norms <= 1e-12 * max(scale, 1e-300)):
        raise DegenerateShape("a training shape has zero spread")
    U = X / norms[:, None]
    reference = U.mean(axis=0)
    if np.linalg.norm(reference) < 1e-3:
        reference = U[np.lexsort(U.T[::-1])[0]]
    reference = reference / np.linalg.norm(reference)

    def align_all(mean):
        out = np.array([_similarity_align(x, mean) for x in X])
        return out / (out @ mean)[:, None]

    mean = reference
    for _ in range(max_iters):
        new = _centre(_similarity_align(align_all(mean).mean(axis=0), reference))
        new /= np.linalg.norm(new)
        moved = np.linalg.norm(new - mean)
        mean = new
        if moved < tol:
            break
    return align_all(mean), mean


def pca(samples, retained_variance=0.95):
    """Principal components of row samples.

    Eigenvalues are those of the unbiased sample covariance. Returns
    ``(mean, basis, eigenvalues)`` with ``basis`` of shape ``(k, d)``; ``k``
    is the smallest count of leading components whose eigenvalues add up to
    ``retained_variance`` of the total. Each component is signed so that its
    largest-magnitude entry is positive. Rank-0 data gives ``k = 0``.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca needs at least two samples")
    if not 0 < retained_variance <= 1:
        raise ValueError("retained_variance must be in (0, 1]")
    mean = X.mean(axis=0)
    C = X - mean
    _, s, vt = np.linalg.svd(C, full_matrices=False)
    ev = s ** 2 / (X.shape[0] - 1)
    floor = 1e-20 * max(1.0, float(np.mean(np.sum(X * X, axis=1))))
    keep = (ev > floor) & (ev > 1e-12 * (ev[0] if ev.size else 0.0))
    ev, vt = ev[keep], vt[keep]
    if ev.size == 0:
        return mean, np.zeros((0, X.shape[1])), np.zeros(0)
    cum = np.cumsum(ev)
    k = int(np.searchsorted(cum, retained_variance * cum[-1] * (1 - 1e-12))) + 1
    k = min(k, ev.size)
    basis = vt[:k].copy()
    lead = np.argmax(np.abs(basis), axis=1)
    basis *= np.sign(basis[np.arange(k), lead])[:, None]
    return mean, basis, ev[:k].copy()


@dataclass(frozen=True)
class ShapeModel:
    """Mean shape s0 (centred, in template pixels) and orthonormal modes.

    ``s0`` equals ``scale`` times the unit-norm Procrustes mean; eigenvalues
    are expressed in the same (pixel squared) units as the shape parameters.
    """

    s0: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    retained_variance: float
    scale: float = 1.0

    @property
    def n(self):
        return self.basis.shape[0]

    @property
    def v(self):
        return self.s0.size // 2


def train_shape_model(shapes, retained_variance=0.95, scale=None):
    """Procrustes-align ``shapes`` and build the PCA shape model.

    ``scale`` sets the template size (norm of the centred mean shape, in
    pixels); by default it is the average centred norm of the inputs so that
    the template frame has roughly the resolution of the training images.
    """
    aligned, _ = procrustes_align(shapes)
    mean, basis, ev = pca(aligned, retained_variance)
    if scale is None:
        scale = float(np.mean([np.linalg.norm(_centre(s)) for s in shapes]))
    return ShapeModel(s0=scale * mean, basis=basis, eigenvalues=ev * scale ** 2,
                      retained_variance=retained_variance, scale=float(scale))


def photometric_reference(Z, tol=1e-14, max_iters=200):
    """Unit direction r such that the rows Z_k / (Z_k . r) average to r.

    ``Z`` holds zero-mean samples. Samples scaled this way differ from their
    mean only orthogonally to it, which removes gain and bias linearly.
    """
    U = Z / np.linalg.norm(Z, axis=1)[:, None]
    r = U.mean(axis=0)
    r /= np.linalg.norm(r)
    for _ in range(max_iters):
        proj = Z @ r
        if np.any(proj <= 0):
            break
        g = (Z / proj[:, None]).mean(axis=0)
        new = g / np.linalg.norm(g)
        moved = np.linalg.norm(new - r)
        r = new
        if moved < tol:
            break
    return r


@dataclass(frozen=True)
class AppearanceModel:
    """Mean appearance A0 and orthonormal modes over the template frame's mesh pixels."""

    frame: TemplateFrame = field(repr=False)
    mean: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray
    retained_variance: float

    @property
    def m(self):
        return self.basis.shape[0]

    @property
    def A0(self):
        return self.frame.to_raster(self.mean)

    def instance(self, lam):
        lam = np.asarray(lam, dtype=float)
        return self.mean + lam @ self.basis if lam.size else self.mean.copy()


def warp_training_samples(images, shapes, frame):
    """Warp each image into the template frame; drop unusable samples with a warning."""
    rows, kept = [], []
    for i, (img, shp) in enumerate(zip(images, shapes)):
        shp = check_shape(shp)
        if frame.folded_triangles(shp).any():
            warnings.warn(f"training sample {i}: shape folds the mesh, sample rejected")
            continue
        values, valid = frame.sample(img, shp)
        if not valid.all():
            warnings.warn(f"training sample {i}: mesh leaves the image, sample rejected")
            continue
        rows.append(values)
        kept.append(i)
    return np.array(rows).reshape(len(rows), frame.n_pixels), kept


def train_appearance_model(images, shapes, frame, retained_variance=0.95):
    """Warp, photometrically normalise and run PCA on the training appearances.

    Each warped sample is made zero-mean and scaled so that its projection on
    the (unit, zero-mean) mean appearance equals one; gain and bias changes
    therefore vanish and A0 has unit norm.
    """
    X, _ = warp_training_samples(images, shapes, frame)
    Z = X - X.mean(axis=1, keepdims=True)
    good = np.linalg.norm(Z, axis=1) > 1e-12
    if not good.all():
        warnings.warn(f"{int((~good).sum())} constant training appearance(s) rejected")
        Z = Z[good]
    if len(Z) == 0:
        raise ValueError("no usable training appearances")
    r = photometric_reference(Z)
    proj = Z @ r
    if np.any(proj <= 0):
        warnings.warn(f"{int((proj <= 0).sum())} training appearance(s) anti-correlated with the mean, rejected")
        Z, proj = Z[proj > 0], proj[proj > 0]
    G = Z / proj[:, None]
    if len(G) == 1:
        return AppearanceModel(frame, G[0].copy(), np.zeros((0, frame.n_pixels)), np.zeros(0), retained_variance)
    mean, basis, ev = pca(G, retained_variance)
    return AppearanceModel(frame, mean, basis, ev, retained_variance)


def gram_schmidt(vectors, drop_tol=1e-10):
    """Modified Gram-Schmidt with one re-orthogonalisation pass.

    Vectors whose residual norm falls below ``drop_tol`` times their original
    norm are dropped. Returns ``(basis, kept_indices)``.
    """
    out, kept = [], []
    for i, v in enumerate(np.asarray(vectors, dtype=float)):
        norm0 = np.linalg.norm(v)
        if norm0 == 0:
            continue
        w = v.copy()
        for _ in range(2):
            for u in out:
                w -= (u @ w) * u
        if np.linalg.norm(w) < drop_tol * norm0:
            continue
        out.append(w / np.linalg.norm(w))
        kept.append(i)
    d = np.asarray(vectors).shape[1] if np.asarray(vectors).ndim == 2 else 0
    return (np.array(out) if out else np.zeros((0, d))), kept


@dataclass(frozen=True)
class AAM:
    """Shape model + appearance model + global transform basis.

    ``basis`` is the basis the template-side warp Jacobian is built on. In
    ``appended`` mode it is the orthonormalised ``[s1*..sk*, s1..sn]``; the
    first ``n_global`` rows span the global transform and the remaining rows
    (``local_basis``) are the local modes made orthogonal to it. In
    ``separate`` mode ``basis`` and ``local_basis`` are the PCA shape modes.
    """

    shape_model: ShapeModel
    appearance_model: AppearanceModel
    global_basis: GlobalBasis
    mode: str
    basis: np.ndarray = field(repr=False)
    n_global: int
    local_eigenvalues: np.ndarray

    @property
    def s0(self):
        return self.shape_model.s0

    @property
    def frame(self):
        return self.appearance_model.frame

    @property
    def triangles(self):
        return self.frame.triangles

    @property
    def local_basis(self):
        return self.basis[self.n_global:]

    @property
    def n(self):
        return self.basis.shape[0] - self.n_global

    @property
    def m(self):
        return self.appearance_model.m

    @property
    def k(self):
        return self.global_basis.k

    def reconfigured(self, global_kind=None, mode=None):
        """The same trained components assembled with another global basis or mode."""
        global_kind = global_kind or self.global_basis.kind
        mode = mode or self.mode
        if global_kind == self.global_basis.kind and mode == self.mode:
            return self
        return assemble_aam(self.shape_model, self.appearance_model, global_kind, mode)

    def shape(self, p, q):
        """Landmarks N(W(s0; p); q) for local parameters p and global q."""
        p = np.asarray(p, dtype=float)
        local = self.s0 + (p @ self.local_basis if p.size else 0.0)
        return self.global_basis.apply(local, q)


def assemble_aam(shape_model, appearance_model, global_kind="similarity", mode="separate"):
    if mode not in MODES:
        raise ValueError(f"unknown basis mode {mode!r}")
    gb = GlobalBasis.build(global_kind, shape_model.s0)
    if mode == "separate":
        return AAM(shape_model, appearance_model, gb, mode, shape_model.basis.copy(), 0,
                   shape_model.eigenvalues.copy())
    stacked = np.vstack([gb.vectors, shape_model.basis]) if shape_model.n else gb.vectors
    basis, kept = gram_schmidt(stacked)
    n_global = sum(1 for i in kept if i < gb.k)
    local_idx = [i - gb.k for i in kept if i >= gb.k]
    return AAM(shape_model, appearance_model, gb, mode, basis, n_global,
               shape_model.eigenvalues[local_idx].copy())


def train_aam(images, shapes, shape_variance=0.95, appearance_variance=0.95,
              global_kind="similarity", mode="separate", scale=None):
    """Train shape and appearance models on annotated images and assemble an AAM."""
    shape_model = train_shape_model(shapes, shape_variance, scale=scale)
    tri = build_triangulation(shape_model.s0)
    frame = TemplateFrame(shape_model.s0, tri)
    appearance_model = train_appearance_model(images, shapes, frame, appearance_variance)
    return assemble_aam(shape_model, appearance_model, global_kind, mode)


def build_aam(s0, shape_basis=(), shape_eigenvalues=None, appearance=None, appearance_basis=(),
              global_kind="similarity", mode="separate", triangles=None):
    """Assemble an AAM from hand-specified components.

    ``appearance`` (and each entry of ``appearance_basis``) is either a flat
    array over the template frame's mesh pixels or a callable evaluated at
    the pixels' (x, y) coordinates. Appearance modes are used as given.
    """
    s0 = check_shape(s0)
    basis = np.asarray(shape_basis, dtype=float).reshape(-1, s0.size)
    ev = np.ones(len(basis)) if shape_eigenvalues is None else np.asarray(shape_eigenvalues, dtype=float)
    shape_model = ShapeModel(s0, basis, ev, 1.0, float(np.linalg.norm(_centre(s0))))
    tri = build_triangulation(s0) if triangles is None else np.asarray(triangles, dtype=np.int64)
    frame = TemplateFrame(s0, tri)

    def on_frame(a):
        return np.asarray(a(frame.points) if callable(a) else a, dtype=float).reshape(frame.n_pixels)

    mean = on_frame(appearance) if appearance is not None else np.zeros(frame.n_pixels)
    modes = np.array([on_frame(a) for a in appearance_basis]).reshape(-1, frame.n_pixels)
    appearance_model = AppearanceModel(frame, mean, modes, np.ones(len(modes)), 1.0)
    return assemble_aam(shape_model, appearance_model, global_kind, mode)
