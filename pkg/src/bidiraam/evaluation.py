"""Experimental protocol: perturbed initialisation, RMSE, percent fitted, sweeps.

A fit starts from three anchor landmarks of the ground truth, each displaced
uniformly within a disk; the least-squares similarity taking the mean shape's
anchors onto them gives the initial global parameters (local ones start at
zero). A fit counts as successful when its landmark RMSE is below a
threshold (5 px by default).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAnchors, NonDiffeomorphicUpdate, TrackingLost
from .fitting import Fitter, FitterConfig, initialize_from_anchor_points
from .geometry import as_points
from .model import train_aam

CELL_FIELDS = ("algorithm", "training_size", "fold", "image", "trial", "rmse", "converged",
               "iterations", "sse", "max_p_ratio")
SUMMARY_FIELDS = ("algorithm", "training_size", "fits", "percent_fitted", "mean_rmse", "median_rmse",
                  "mean_rmse_fitted")


def rmse(fitted, truth):
    """Root mean square landmark distance in pixels."""
    a, b = as_points(fitted), as_points(truth)
    if a.shape != b.shape:
        raise ValueError(f"shapes have {len(a)} and {len(b)} landmarks")
    return float(np.sqrt(np.sum((a - b) ** 2) / len(a)))


def percent_fitted(errors, threshold=5.0):
    """Percentage of fits with RMSE strictly below ``threshold``."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return float("nan")
    return float(100.0 * np.count_nonzero(e < threshold) / e.size)


def perturb_anchors(truth, anchors, radius_px, rng):
    """Anchor landmarks of ``truth`` each moved uniformly within a disk of ``radius_px``."""
    pts = as_points(truth)[list(anchors)]
    r = radius_px * np.sqrt(rng.uniform(size=len(pts)))
    th = rng.uniform(0.0, 2 * np.pi, len(pts))
    return pts + np.column_stack([r * np.cos(th), r * np.sin(th)])


def perturb_initialization(truth, anchors, radius_px, rng, mean_shape, global_basis):
    """Initial parameters from randomly displaced anchor landmarks of ``truth``."""
    targets = perturb_anchors(truth, anchors, radius_px, rng)
    return initialize_from_anchor_points(mean_shape, anchors, targets, global_basis)


@dataclass(frozen=True)
class ExperimentConfig:
    algorithms: tuple = (FitterConfig(),)
    training_sizes: tuple = (20,)
    folds: int = 1
    test_size: int = 10
    perturbation_px: float = 5.0
    # None: use the dataset's own anchors
    anchor_indices: tuple = None
    fitted_threshold_px: float = 5.0
    # perturbed initialisations per test image
    trials: int = 1
    rng_seed: int = 0
    shape_variance: float = 0.95
    appearance_variance: float = 0.95

    def __post_init__(self):
        if not self.algorithms:
            raise ValueError("no algorithms configured")
        if self.folds < 1 or self.trials < 1 or self.test_size < 1:
            raise ValueError("folds, trials and test_size must be >= 1")
        if any(n < 2 for n in self.training_sizes) or not self.training_sizes:
            raise ValueError("training sizes must be >= 2")
        if self.perturbation_px < 0:
            raise ValueError("perturbation_px must be >= 0")
        if self.anchor_indices is not None and len(self.anchor_indices) != 3:
            raise ValueError("exactly three anchor indices are required")


@dataclass(frozen=True)
class Cell:
    """Outcome of one fit: an (algorithm, training size, fold, image, trial) cell."""

    algorithm: str
    training_size: int
    fold: int
    image: int
    trial: int
    rmse: float
    converged: bool
    iterations: int
    sse: float
    # largest |p_i| / (3 sqrt(b_i)) over every iterate of the fit
    max_p_ratio: float


@dataclass
class Metrics:
    cells: list = field(default_factory=list)
    threshold: float = 5.0

    def errors(self, algorithm, training_size=None):
        return np.array([c.rmse for c in self.cells if c.algorithm == algorithm
                         and (training_size is None or c.training_size == training_size)])

    def percent_fitted(self, algorithm, training_size=None, threshold=None):
        return percent_fitted(self.errors(algorithm, training_size),
                              self.threshold if threshold is None else threshold)

    def summary(self):
        """One row per (algorithm, training size), in first-seen order."""
        keys = list(dict.fromkeys((c.algorithm, c.training_size) for c in self.cells))
        rows = []
        for alg, n in keys:
            e = self.errors(alg, n)
            ok = e[e < self.threshold]
            rows.append({
                "algorithm": alg,
                "training_size": n,
                "fits": int(e.size),
                "percent_fitted": percent_fitted(e, self.threshold),
                "mean_rmse": float(np.mean(e)),
                "median_rmse": float(np.median(e)),
                "mean_rmse_fitted": float(np.mean(ok)) if ok.size else float("nan"),
            })
        return rows


def _p_ratio(history, eigenvalues):
    if not len(eigenvalues) or not history:
        return 0.0
    bound = 3.0 * np.sqrt(eigenvalues)
    return float(max(np.max(np.abs(p) / bound) for p in history))


def _splits(n_data, n_test_pool, config, fold):
    rng = np.random.default_rng([config.rng_seed, fold, 31337])
    if n_test_pool is None:
        perm = rng.permutation(n_data)
        test, pool = perm[:config.test_size], perm[config.test_size:]
    else:
        test = np.sort(rng.choice(n_test_pool, config.test_size, replace=False))
        pool = rng.permutation(n_data)
    return test, pool


def run_experiment(dataset, config, test_dataset=None, progress=None):
    """Train on sampled splits, fit every test image with every algorithm.

    ``dataset`` (and the optional held-out ``test_dataset``) need ``images``
    and ``shapes`` sequences, plus ``anchors`` unless the config names them.
    Without a test set each fold holds out ``test_size`` random images of
    ``dataset``; with one, test images are drawn from it and every image of
    ``dataset`` is available for training. Training sets of increasing size
    are nested within a fold, and every algorithm sees the same initialisations.
    Failed fits are recorded with RMSE = inf.
    """
    anchors = config.anchor_indices or getattr(dataset, "anchors", None)
    if anchors is None:
        raise ValueError("anchor landmarks are not known for this dataset")
    anchors = tuple(int(a) for a in anchors)
    tests = dataset if test_dataset is None else test_dataset
    n_pool = len(dataset.images) - (config.test_size if test_dataset is None else 0)
    if config.test_size > len(tests.images):
        raise ValueError(f"test_size {config.test_size} exceeds the {len(tests.images)} test images")
    if max(config.training_sizes) > n_pool:
        raise ValueError(f"training size {max(config.training_sizes)} exceeds the {n_pool} available images")

    metrics = Metrics(threshold=config.fitted_threshold_px)
    for fold in range(config.folds):
        test, pool = _splits(len(dataset.images), None if test_dataset is None else len(tests.images),
                             config, fold)
        targets = {}
        for i in test:
            for t in range(config.trials):
                rng = np.random.default_rng([config.rng_seed, fold, int(i), t, 2])
                targets[int(i), t] = perturb_anchors(tests.shapes[i], anchors, config.perturbation_px, rng)
        for n in config.training_sizes:
            train = np.sort(pool[:n])
            aam = train_aam([dataset.images[j] for j in train], [dataset.shapes[j] for j in train],
                            config.shape_variance, config.appearance_variance)
            for cfg in config.algorithms:
                fitter = Fitter(aam, cfg)
                b = fitter.aam.local_eigenvalues
                for i in test:
                    for t in range(config.trials):
                        metrics.cells.append(_fit_cell(fitter, tests.images[i], tests.shapes[i], anchors,
                                                       targets[int(i), t], b, n, fold, int(i), t))
                if progress is not None:
                    progress(fold, n, cfg.name)
    return metrics


def _fit_cell(fitter, image, truth, anchors, targets, eigenvalues, n, fold, i, t):
    cfg = fitter.config
    history = []
    try:
        init = initialize_from_anchor_points(fitter.aam.s0, anchors, targets, fitter.aam.global_basis)
        state = fitter.fit(image, init)
        history = state.p_history
        err = rmse(fitter.shape(state), truth)
        if not np.isfinite(err):
            err = float("inf")
        return Cell(cfg.name, n, fold, i, t, err, bool(state.converged), state.iteration,
                    float(state.error_history[-1]), _p_ratio(history, eigenvalues))
    except (TrackingLost, NonDiffeomorphicUpdate, DegenerateAnchors, np.linalg.LinAlgError) as exc:
        state = getattr(exc, "state", None)
        if state is not None:
            history = state.p_history
        return Cell(cfg.name, n, fold, i, t, float("inf"), False,
                    -1 if state is None else state.iteration, float("nan"), _p_ratio(history, eigenvalues))
