"""Gauss-Newton AAM fitting: ICA, PO and SIC, each unidirectional or bidirectional.

Unidirectional fitters use an AAM in ``appended`` mode: the global transform
vectors are folded into the template-side warp basis and every parameter is
updated inverse-compositionally from the template gradient.

Bidirectional fitters use an AAM in ``separate`` mode. Local shape parameters
p are updated inverse-compositionally from the template gradient, while the
global parameters q are updated additively from the gradient of the input
image warped into the template frame:

    dp = H1^-1 sum SD1(x)^T E(x),      SD1 = grad(A0) dW/dp
    dq = H2^-1 sum -E(x) SD2(x)^T,     SD2 = grad(I) dN/dq

with the residual E(x) = I(N(W(x; p); q)) - A(x). H2 is rebuilt every
iteration; the coupling between dp and dq is ignored.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAnchors, NonDiffeomorphicUpdate, TrackingLost
from .geometry import (as_points, check_shape, check_unfolded, compose_inverse_update, compose_shapes, fit_transform,
                       global_jacobian_dN_dq, warp_jacobian_dW_dp)

ALGORITHMS = ("ica", "po", "sic")

# a fit is abandoned once more than this fraction of the mesh pixels is unusable
MAX_MASKED_FRACTION = 0.5


@dataclass(frozen=True)
class FitterConfig:
    algorithm: str = "sic"
    bidirectional: bool = False
    global_kind: str = "similarity"
    constrained: bool = False
    max_iters: int = 50
    param_tol: float = 1e-6
    step_damping: float = 0.5
    # zero-mean the warped input and match its gain to the model instance
    normalize: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.global_kind not in ("similarity", "affine", "translation"):
            raise ValueError(f"unknown global transform kind {self.global_kind!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.param_tol > 0:
            raise ValueError("param_tol must be > 0")
        if not 0 < self.step_damping <= 1:
            raise ValueError("step_damping must be in (0, 1]")

    @property
    def mode(self):
        return "separate" if self.bidirectional else "appended"

    @property
    def name(self):
        """Conventional label, e.g. ``Bi-SIC-AC`` (A = affine, C = constrained)."""
        label = ("Bi-" if self.bidirectional else "") + self.algorithm.upper()
        suffix = ("A" if self.global_kind == "affine" else "") + ("C" if self.constrained else "")
        if self.global_kind == "translation":
            suffix = "T" + suffix
        return label + ("-" + suffix if suffix else "")

    @classmethod
    def from_name(cls, name, **kwargs):
        m = re.fullmatch(r"(?i)(bi-)?(ica|po|sic)(?:-(t)?(a)?(c)?)?", name.strip())
        if not m or (m.group(3) and m.group(4)):
            raise ValueError(f"cannot parse algorithm name {name!r}")
        kind = "translation" if m.group(3) else "affine" if m.group(4) else "similarity"
        return cls(algorithm=m.group(2).lower(), bidirectional=bool(m.group(1)),
                   global_kind=kind, constrained=bool(m.group(5)), **kwargs)


@dataclass
class WarpParams:
    p: np.ndarray
    q: np.ndarray


@dataclass
class FitState:
    p: np.ndarray
    q: np.ndarray
    lam: np.ndarray
    iteration: int = 0
    error_history: list = field(default_factory=list)
    converged: bool = False
    p_history: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def copy(self):
        return FitState(self.p.copy(), self.q.copy(), self.lam.copy(), self.iteration,
                        list(self.error_history), self.converged, list(self.p_history), list(self.flags))


@dataclass
class Residual:
    E: np.ndarray
    sse: float
    valid: np.ndarray
    warped: np.ndarray
    model: np.ndarray


@dataclass
class Update:
    dp: np.ndarray
    dq: np.ndarray
    dlam: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def norm(self):
        return float(np.linalg.norm(self.dp) + np.linalg.norm(self.dq) + np.linalg.norm(self.dlam))


@dataclass
class Precomputed:
    """Template-side quantities shared by every iteration and every image.

    ``dp`` of an update is expressed over ``aam.basis``: the combined
    global + local basis for unidirectional fitters, the local modes for
    bidirectional ones.
    """

    aam: object
    config: FitterConfig
    grad_A0: np.ndarray
    grad_Ai: np.ndarray
    dW_dp: np.ndarray
    sd_images: np.ndarray
    H1: np.ndarray
    H1_inv: np.ndarray
    reference: np.ndarray


def project_out_sd(sd_images, appearance_basis):
    """Remove the appearance subspace from steepest-descent images.

    ``sd_images`` is ``(N, n)`` (one image per column); ``appearance_basis``
    is ``(m, N)`` and orthonormal.
    """
    A = np.asarray(appearance_basis, dtype=float)
    if A.shape[0] == 0:
        return np.array(sd_images, dtype=float)
    return sd_images - A.T @ (A @ sd_images)


def _pinv_sym(H):
    if H.size == 0:
        return np.zeros_like(H)
    return np.linalg.pinv(H, hermitian=True)


def precompute(aam, config):
    """Template gradient, warp Jacobian, steepest-descent images and H1."""
    aam = aam.reconfigured(config.global_kind, config.mode)
    am = aam.appearance_model
    frame = aam.frame
    grad_A0 = frame.gradient(am.mean)
    grad_Ai = np.array([frame.gradient(a) for a in am.basis]).reshape(am.m, frame.n_pixels, 2)
    dW = warp_jacobian_dW_dp(frame, aam.basis)
    sd = np.einsum("nc,nci->ni", grad_A0, dW)
    if config.algorithm == "po":
        sd = project_out_sd(sd, am.basis)
    H1 = sd.T @ sd
    norm = np.linalg.norm(am.mean)
    reference = am.mean / norm if norm > 0 else np.zeros_like(am.mean)
    return Precomputed(aam, config, grad_A0, grad_Ai, dW, sd, H1, _pinv_sym(H1), reference)


def normalize_intensity(values, valid, model, reference):
    """Zero-mean the valid samples and scale them to match the model's gain.

    The gain is chosen so that the projection on ``reference`` (the unit mean
    appearance) equals that of ``model``; this maps any gain/bias change of a
    model instance back onto the instance exactly.
    """
    v = values[valid]
    z = v - v.mean()
    r = reference[valid]
    den = z @ r
    num = model[valid] @ r
    nz = np.linalg.norm(z)
    if den > 1e-12 * nz * np.linalg.norm(r) and num > 0:
        gain = num / den
    elif nz > 1e-300:
        gain = np.linalg.norm(model[valid] - model[valid].mean()) / nz
    else:
        gain = 0.0
    out = np.zeros_like(values)
    out[valid] = z * gain
    return out


def compute_residual(image, pre, state):
    """E(x) = I(N(W(x; p); q)) - A(x) over the usable mesh pixels.

    A is A0 for ICA/PO and A0 + sum(lam_i A_i) for SIC. Unusable pixels carry
    E = 0. Raises :class:`TrackingLost` when more than half the mesh is unusable.
    """
    aam, config = pre.aam, pre.config
    am = aam.appearance_model
    values, valid = aam.frame.sample(image, aam.shape(state.p, state.q))
    if valid.mean() < 1 - MAX_MASKED_FRACTION:
        raise TrackingLost(f"only {valid.mean():.0%} of the template is inside the image", state)
    model = am.instance(state.lam) if config.algorithm == "sic" else am.mean
    if config.normalize:
        values = normalize_intensity(values, valid, model, pre.reference)
    E = np.where(valid, values - model, 0.0)
    return Residual(E, float(E @ E), valid, values, model)


def _template_side(residual, pre, state):
    """Solve for the template-side update (dp over aam.basis and dlam)."""
    am = pre.aam.appearance_model
    valid, E = residual.valid, residual.E
    if pre.config.algorithm == "sic":
        grad = pre.grad_A0 + np.einsum("i,inc->nc", state.lam, pre.grad_Ai) if am.m else pre.grad_A0
        sd = np.hstack([np.einsum("nc,nci->ni", grad, pre.dW_dp), am.basis.T])
        sd = np.where(valid[:, None], sd, 0.0)
        H = sd.T @ sd
        H_inv = _pinv_sym(H)
        dr = H_inv @ (sd.T @ E)
        nb = pre.dW_dp.shape[2]
        diag = {"H_sim": H, "sd": sd}
        if H.size and np.linalg.matrix_rank(H, hermitian=True) < H.shape[0]:
            diag["singular"] = "H_sim"
        return dr[:nb], dr[nb:], diag
    sd = pre.sd_images
    if valid.all():
        H, H_inv = pre.H1, pre.H1_inv
    else:
        sd = np.where(valid[:, None], sd, 0.0)
        H = sd.T @ sd
        H_inv = _pinv_sym(H)
    return H_inv @ (sd.T @ E), np.zeros(am.m), {"H1": H, "sd": sd}


def solve_unidirectional(residual, pre, state):
    dp, dlam, diag = _template_side(residual, pre, state)
    return Update(dp, np.zeros(0), dlam, diag)


def image_side_sd(residual, pre, state):
    """SD2(x) = grad(I) dN/dq at the current parameters, ``(N, k)``.

    The gradient of the warped image is taken in the template frame and
    mapped back to image coordinates through the inverse Jacobian of the
    piecewise-affine map of each pixel's triangle.
    """
    aam = pre.aam
    frame = aam.frame
    p = state.p
    local = aam.s0 + (p @ aam.local_basis if p.size else 0.0)
    full = aam.global_basis.apply(local, state.q)
    g_template = frame.gradient(residual.warped, residual.valid)
    J = frame.triangle_jacobians(full)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    safe = np.abs(det) > 1e-12
    J_inv = np.zeros_like(J)
    J_inv[safe] = np.linalg.inv(J[safe])
    g_image = np.einsum("nc,ncd->nd", g_template, J_inv[frame.tri_index])
    dN = global_jacobian_dN_dq(frame, local, aam.global_basis)
    sd2 = np.einsum("nc,nck->nk", g_image, dN)
    return np.where(residual.valid[:, None], sd2, 0.0)


def solve_bidirectional(residual, pre, state):
    dp, dlam, diag = _template_side(residual, pre, state)
    sd2 = image_side_sd(residual, pre, state)
    H2 = sd2.T @ sd2
    diag.update(H2=H2, sd2=sd2)
    w = np.linalg.eigvalsh(H2)
    if w[-1] <= 1e-300 or w[0] <= 1e-12 * w[-1]:
        diag["singular"] = "H2"
        dq = np.zeros(len(state.q))
    else:
        E = residual.E
        if pre.config.algorithm == "po":
            # same subspace treatment as the template side: appearance variation
            # must not pull the global parameters
            A = pre.aam.appearance_model.basis
            E = np.where(residual.valid, project_out_sd(E[:, None], A)[:, 0], 0.0)
        dq = -np.linalg.solve(H2, sd2.T @ E)
    return Update(dp, dq, dlam, diag)


def decompose_shape(aam, shape, iters=50, tol=1e-12):
    """Split landmarks into local parameters p and global parameters q.

    Alternates a least-squares global fit of the current local shape onto
    ``shape`` with projection of the globally un-transformed shape onto the
    local modes.
    """
    gb = aam.global_basis
    basis = aam.local_basis
    target = as_points(check_shape(shape))
    p = np.zeros(basis.shape[0])
    q = np.zeros(gb.k)
    for _ in range(iters):
        local = aam.s0 + (p @ basis if p.size else 0.0)
        q = gb.params(*fit_transform(gb.kind, local, target))
        if not p.size:
            break
        A, t = gb.matrix(q)
        back = (target - t) @ np.linalg.inv(A).T
        new_p = basis @ (back.reshape(-1) - aam.s0)
        moved = np.linalg.norm(new_p - p)
        p = new_p
        if moved < tol * max(1.0, np.linalg.norm(p)):
            break
    return WarpParams(p, q)


def apply_update(state, update, pre, scale=1.0):
    """Compose the template-side update and add the image-side one.

    Returns a new state (history fields are shared with ``state``'s copy).
    Raises :class:`NonDiffeomorphicUpdate` if the composed mesh folds.
    """
    aam = pre.aam
    new = state.copy()
    if pre.config.bidirectional:
        new.p = compose_inverse_update(state.p, scale * update.dp, aam.s0, aam.local_basis, aam.triangles)
        if update.dq.size:
            new.q = state.q + scale * update.dq
    else:
        current = aam.shape(state.p, state.q)
        d = (scale * update.dp) @ aam.basis if update.dp.size else np.zeros_like(aam.s0)
        composed = compose_shapes(aam.s0, aam.triangles, current, d)
        params = decompose_shape(aam, composed)
        new.p, new.q = params.p, params.q
        if new.p.size:
            check_unfolded(aam.s0, aam.s0 + new.p @ aam.local_basis, aam.triangles)
    if update.dlam.size:
        new.lam = state.lam + scale * update.dlam
    return new


def step_unidirectional(residual, pre, state):
    return apply_update(state, solve_unidirectional(residual, pre, state), pre)


def step_bidirectional(residual, pre, state):
    return apply_update(state, solve_bidirectional(residual, pre, state), pre)


def apply_constraint(p, eigenvalues):
    """Clamp every local shape parameter to +-3 sqrt(b_i)."""
    bound = 3.0 * np.sqrt(np.asarray(eigenvalues, dtype=float))
    return np.clip(np.asarray(p, dtype=float), -bound, bound)


def initialize_from_anchor_points(mean_shape, anchor_indices, anchor_targets, global_basis):
    """Least-squares similarity taking the mean shape's anchors onto the targets.

    Returns p = 0 and the q encoding that similarity in ``global_basis``.
    """
    idx = list(anchor_indices)
    if len(set(idx)) != len(idx) or len(idx) < 2:
        raise DegenerateAnchors("anchor indices must be distinct")
    src = as_points(mean_shape)[idx]
    dst = np.asarray(anchor_targets, dtype=float).reshape(-1, 2)
    centred = src - src.mean(axis=0)
    if len(idx) < 3 or np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
        raise DegenerateAnchors("anchor landmarks are collinear")
    A, t = fit_transform("similarity", src, dst)
    if global_basis.kind == "translation":
        raise DegenerateAnchors("a translation-only basis cannot encode a similarity")
    return WarpParams(np.zeros(0), global_basis.params(A, t))


class Fitter:
    """A configured fitting algorithm bound to one AAM (precomputation done once)."""

    def __init__(self, aam, config):
        self.config = config
        self.pre = precompute(aam, config)
        self.aam = self.pre.aam

    def initial_state(self, init):
        aam = self.aam
        if isinstance(init, WarpParams):
            p = np.asarray(init.p, dtype=float)
            p = p if p.size == aam.n else np.zeros(aam.n)
            q = np.asarray(init.q, dtype=float)
            if q.size != aam.k:
                raise ValueError(f"q has {q.size} entries, global basis needs {aam.k}")
        else:
            params = decompose_shape(aam, init)
            p, q = params.p, params.q
        if self.config.constrained:
            p = apply_constraint(p, aam.local_eigenvalues)
        return FitState(p.copy(), q.copy(), np.zeros(aam.m))

    def residual(self, image, state):
        return compute_residual(image, self.pre, state)

    def solve(self, residual, state):
        if self.config.bidirectional:
            return solve_bidirectional(residual, self.pre, state)
        return solve_unidirectional(residual, self.pre, state)

    def fit(self, image, init, callback=None):
        """Iterate until the update norm drops below ``param_tol`` or ``max_iters``.

        ``callback(state, update)`` is called after every iteration.
        """
        cfg = self.config
        image = np.asarray(image, dtype=float)
        state = self.initial_state(init)
        residual = self.residual(image, state)
        state.error_history.append(residual.sse)
        state.p_history.append(state.p.copy())
        for it in range(1, cfg.max_iters + 1):
            update = self.solve(residual, state)
            if "singular" in update.diagnostics:
                state.flags.append((it, "singular " + update.diagnostics["singular"]))
            scale = 1.0
            for _ in range(6):
                try:
                    new = apply_update(state, update, self.pre, scale)
                    break
                except NonDiffeomorphicUpdate:
                    scale *= cfg.step_damping
            else:
                state.flags.append((it, "non-diffeomorphic update"))
                break
            if cfg.constrained:
                new.p = apply_constraint(new.p, self.aam.local_eigenvalues)
            new.iteration = it
            try:
                residual = self.residual(image, new)
            except TrackingLost as exc:
                exc.state = new
                raise
            new.error_history.append(residual.sse)
            new.p_history.append(new.p.copy())
            new.converged = scale * update.norm < cfg.param_tol
            state = new
            if callback is not None:
                callback(state, update)
            if state.converged:
                break
        return state

    def shape(self, state):
        return self.aam.shape(state.p, state.q)


def fit(image, aam, init, config, callback=None):
    """Fit ``aam`` to ``image`` from ``init`` (landmarks or :class:`WarpParams`)."""
    return Fitter(aam, config).fit(image, init, callback)
