"""Statistical shape models: Procrustes + PCA build, clipped-distance fit.

A model is a mean point set plus orthonormal linear deformation modes
scaled so the coefficient vector theta is expressed in standard-deviation
units.  Fitting an incomplete target cloud minimizes

    dist(clip(shape(theta), target), target) + (lambda_l2 / N_theta) * sum theta_i^2

with L-BFGS, where clip keeps model points inside the target's bounding
box dilated by a margin (the target's field of view), and dist is either
the sum of both directional mean nearest-neighbor distances or the
directional distance from the target to the unclipped model.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .geometry import PointCloud
from .validation import as_points

__all__ = [
    "CorrespondedShapeSet",
    "ShapeModel",
    "SsmFitConfig",
    "generalized_procrustes",
    "build_ssm",
    "ssm_cost",
    "fit_ssm",
    "ShapeCompleter",
    "save_shape_model",
    "load_shape_model",
]

DISTANCE_MODES = ("bidirectional", "target_to_model")


@dataclass
class CorrespondedShapeSet:
    """S point sets with identical cardinality and row-wise correspondence."""

    shapes: np.ndarray
    object_id: str = ""

    def __post_init__(self):
        self.shapes = np.asarray(self.shapes, dtype=np.float64)
        if self.shapes.ndim != 3 or self.shapes.shape[2] != 3:
            raise ValueError("shapes must be (n_shapes, n_points, 3)")
        if self.shapes.shape[1] < 4:
            raise ValueError("shapes need at least 4 points")
        if not np.all(np.isfinite(self.shapes)):
            raise ValueError("shapes must be finite")


@dataclass
class ShapeModel:
    """Mean shape plus orthonormal modes; theta is in SD units."""

    mean: np.ndarray
    modes: np.ndarray
    mode_scales: np.ndarray
    object_id: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.modes = np.asarray(self.modes, dtype=np.float64).reshape(-1, self.mean.size)
        self.mode_scales = np.asarray(self.mode_scales, dtype=np.float64)
        if self.mean.ndim != 2 or self.mean.shape[1] != 3:
            raise ValueError("mean must be (P, 3)")
        if self.mode_scales.shape != (len(self.modes),):
            raise ValueError("one scale per mode required")

    @property
    def n_points(self):
        return len(self.mean)

    @property
    def n_modes(self):
        return len(self.modes)

    def validate(self, tol=1e-9):
        if self.n_modes:
            gram = self.modes @ self.modes.T
            err = np.abs(gram - np.eye(self.n_modes)).max()
            if err > tol:
                raise ValueError(f"modes are not orthonormal (max error {err:.3e})")
            if np.any(self.mode_scales <= 0):
                raise ValueError("mode scales must be > 0")
            if np.any(np.diff(self.mode_scales) > 0):
                raise ValueError("mode scales must be non-increasing")

    def synthesize(self, theta):
        """Shape for a coefficient vector, as a (P, 3) array."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_modes,):
            raise ValueError(f"theta must have length {self.n_modes}")
        flat = self.mean.reshape(-1)
        if self.n_modes:
            flat = flat + (theta * self.mode_scales) @ self.modes
        return flat.reshape(-1, 3)


def _kabsch(source, target):
    """Rotation aligning centered source onto centered target."""
    h = source.T @ target
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def generalized_procrustes(shapes, max_iters=10, tol=1e-10):
    """Rigidly align shapes (translation + rotation, no scaling).

    Iteratively aligns every shape to the evolving mean until the mean
    stabilizes; returns the aligned (S, P, 3) array.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    aligned = shapes - shapes.mean(axis=1, keepdims=True)
    ref = aligned[0].copy()
    for _ in range(max_iters):
        for i in range(len(aligned)):
            r = _kabsch(aligned[i], ref)
            aligned[i] = aligned[i] @ r.T
        new_ref = aligned.mean(axis=0)
        new_ref -= new_ref.mean(axis=0)
        if np.abs(new_ref - ref).max() < tol:
            break
        ref = new_ref
    return aligned


def build_ssm(shape_set, n_modes, object_id=None) -> ShapeModel:
    """PCA shape model from rigidly pre-aligned corresponded shapes.

    mode_scales are the per-mode standard deviations (singular values over
    sqrt(S - 1)); requesting more modes than the family supports (more
    than S - 1, or modes with zero variance) raises ValueError.
    """
    if isinstance(shape_set, CorrespondedShapeSet):
        shapes = shape_set.shapes
        object_id = object_id if object_id is not None else shape_set.object_id
    else:
        shapes = np.asarray(shape_set, dtype=np.float64)
    s = len(shapes)
    if n_modes > s - 1:
        raise ValueError(f"n_modes must be <= n_shapes - 1 = {s - 1}")
    x = shapes.reshape(s, -1)
    mean = x.mean(axis=0)
    centered = x - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    scales = sing / np.sqrt(s - 1)
    if n_modes:
        # variance below numerical noise of the data magnitude is degenerate
        floor = max(s, x.shape[1]) * np.finfo(float).eps * max(float(np.abs(x).max()), 1.0)
        if scales[n_modes - 1] <= floor:
            raise ValueError(
                f"family supports fewer than {n_modes} modes (variance vanishes); reduce n_modes"
            )
    return ShapeModel(
        mean=mean.reshape(-1, 3),
        modes=vt[:n_modes],
        mode_scales=scales[:n_modes],
        object_id=object_id or "",
    )


@dataclass(frozen=True)
class SsmFitConfig:
    lambda_l2: float = 0.01
    clip_margin: float = 5.0
    distance_mode: str = "bidirectional"
    lbfgs_memory: int = 10
    lbfgs_max_iters: int = 200
    lbfgs_gradient_tol: float = 1e-8
    restarts: int = 3
    rigid_prealign: str = "centroid"
    seed: int = 0

    def __post_init__(self):
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if self.clip_margin < 0:
            raise ValueError("clip_margin must be >= 0")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")
        if self.rigid_prealign not in ("centroid", "none"):
            raise ValueError("rigid_prealign must be 'centroid' or 'none'")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def clip_mask_for(shape_points, target_points, margin):
    """Model points inside the target's axis-aligned box dilated by margin."""
    lo = target_points.min(axis=0) - margin
    hi = target_points.max(axis=0) + margin
    return np.all((shape_points >= lo) & (shape_points <= hi), axis=1)


def _unit_rows(diff, dist):
    out = np.zeros_like(diff)
    nz = dist > 0
    out[nz] = diff[nz] / dist[nz, None]
    return out


def _cost_impl(model, theta, target, cfg, clip_mask, target_tree):
    shape = model.synthesize(theta)
    grad_pts = np.zeros_like(shape)
    value = 0.0
    dropped_model_term = False

    if cfg.distance_mode == "bidirectional":
        mask = clip_mask if clip_mask is not None else clip_mask_for(shape, target, cfg.clip_margin)
        clipped = shape[mask]
        if len(clipped) == 0:
            dropped_model_term = True
            warnings.warn("clip removed every model point; model-to-target term dropped", stacklevel=3)
            # the target-side term falls back to the unclipped model
            d, j = cKDTree(shape).query(target)
            value += d.mean()
            np.add.at(grad_pts, j, _unit_rows(shape[j] - target, d) / len(target))
        else:
            tree_t = target_tree if target_tree is not None else cKDTree(target)
            d1, i1 = tree_t.query(clipped)
            value += d1.mean()
            contrib = _unit_rows(clipped - target[i1], d1) / len(clipped)
            idx = np.nonzero(mask)[0]
            np.add.at(grad_pts, idx, contrib)
            d2, j2 = cKDTree(clipped).query(target)
            value += d2.mean()
            np.add.at(grad_pts, idx[j2], _unit_rows(clipped[j2] - target, d2) / len(target))
    else:
        d2, j2 = cKDTree(shape).query(target)
        value += d2.mean()
        np.add.at(grad_pts, j2, _unit_rows(shape[j2] - target, d2) / len(target))

    theta = np.asarray(theta, dtype=np.float64)
    if model.n_modes:
        value += cfg.lambda_l2 / model.n_modes * float(theta @ theta)
        grad_theta = model.mode_scales * (model.modes @ grad_pts.reshape(-1))
        grad_theta += 2.0 * cfg.lambda_l2 / model.n_modes * theta
    else:
        grad_theta = np.zeros(0)
    return float(value), grad_theta, dropped_model_term


def ssm_cost(model: ShapeModel, theta, target, cfg: SsmFitConfig = None, clip_mask=None):
    """Fit cost and its gradient with respect to theta.

    The gradient flows through matched nearest-neighbor pairs and treats
    the clip mask as fixed, making the cost piecewise smooth.
    """
    cfg = cfg or SsmFitConfig()
    target = as_points(target.points if hasattr(target, "points") else target, "target")
    if len(target) == 0:
        raise ValueError("target must be nonempty")
    value, grad, _ = _cost_impl(model, theta, target, cfg, clip_mask, None)
    return value, grad


def fit_ssm(model: ShapeModel, target, cfg: SsmFitConfig = None):
    """L-BFGS shape completion: returns (theta, completed cloud, report).

    Runs from theta = 0 plus seeded perturbed restarts, freezing the clip
    mask within each solver iteration and recomputing it between
    iterations, and returns the lowest-cost run.  The completed shape is
    the unclipped synthesized shape, mapped back to the target's frame.
    """
    cfg = cfg or SsmFitConfig()
    target = as_points(target.points if hasattr(target, "points") else target, "target")
    if len(target) == 0:
        raise ValueError("target must be nonempty")

    if cfg.rigid_prealign == "centroid":
        shift = model.mean.mean(axis=0) - target.mean(axis=0)
    else:
        shift = np.zeros(3)
    work = target + shift
    tree = cKDTree(work)

    rng = np.random.default_rng(cfg.seed)
    inits = [np.zeros(model.n_modes)]
    for _ in range(cfg.restarts - 1):
        inits.append(rng.normal(0.0, 0.1, model.n_modes))

    runs = []
    for init in inits:
        state = {"mask": clip_mask_for(model.synthesize(init), work, cfg.clip_margin)}
        trace = []

        def objective(theta):
            value, grad, _ = _cost_impl(model, theta, work, cfg, state["mask"], tree)
            trace.append(value)
            return value, grad

        def callback(theta):
            state["mask"] = clip_mask_for(model.synthesize(theta), work, cfg.clip_margin)

        res = minimize(
            objective,
            init,
            jac=True,
            method="L-BFGS-B",
            callback=callback,
            options={
                "maxcor": cfg.lbfgs_memory,
                "maxiter": cfg.lbfgs_max_iters,
                "gtol": cfg.lbfgs_gradient_tol,
                "ftol": 1e-16,
            },
        )
        final_value, _, dropped = _cost_impl(model, res.x, work, cfg, None, tree)
        runs.append(
            {
                "theta": res.x,
                "cost": final_value if np.isfinite(final_value) else np.inf,
                "n_evaluations": len(trace),
                "trace": trace,
                "solver_message": str(res.message),
                "dropped_model_term": dropped,
            }
        )

    # theta = 0 is always a candidate so the fit can never end above it
    zero_value, _, _ = _cost_impl(model, np.zeros(model.n_modes), work, cfg, None, tree)
    if all(not np.isfinite(r["cost"]) for r in runs):
        raise RuntimeError(f"every restart diverged: {[r['solver_message'] for r in runs]}")
    best = min(range(len(runs)), key=lambda i: runs[i]["cost"])
    theta = runs[best]["theta"]
    if zero_value < runs[best]["cost"]:
        theta = np.zeros(model.n_modes)
    completed = PointCloud(model.synthesize(theta) - shift)
    report = {
        "restart_costs": [r["cost"] for r in runs],
        "best_restart": best,
        "cost": float(min(zero_value, runs[best]["cost"])),
        "cost_at_zero": float(zero_value),
        "n_evaluations": [r["n_evaluations"] for r in runs],
        "solver_messages": [r["solver_message"] for r in runs],
        "dropped_model_term": any(r["dropped_model_term"] for r in runs),
        "prealign_shift": shift.tolist(),
    }
    return theta, completed, report


class ShapeCompleter(BaseEstimator):
    """Estimator wrapper: fit() builds the model, complete() fills targets.

    fit expects an (n_shapes, n_points, 3) stack of corresponded shapes
    (a CorrespondedShapeSet also works); they are rigidly aligned by
    generalized Procrustes before the PCA build.
    """

    def __init__(
        self,
        n_modes=4,
        lambda_l2=0.01,
        clip_margin=5.0,
        distance_mode="bidirectional",
        lbfgs_memory=10,
        lbfgs_max_iters=200,
        lbfgs_gradient_tol=1e-8,
        restarts=3,
        rigid_prealign="centroid",
        seed=0,
    ):
        self.n_modes = n_modes
        self.lambda_l2 = lambda_l2
        self.clip_margin = clip_margin
        self.distance_mode = distance_mode
        self.lbfgs_memory = lbfgs_memory
        self.lbfgs_max_iters = lbfgs_max_iters
        self.lbfgs_gradient_tol = lbfgs_gradient_tol
        self.restarts = restarts
        self.rigid_prealign = rigid_prealign
        self.seed = seed

    def _fit_config(self):
        return SsmFitConfig(
            lambda_l2=self.lambda_l2,
            clip_margin=self.clip_margin,
            distance_mode=self.distance_mode,
            lbfgs_memory=self.lbfgs_memory,
            lbfgs_max_iters=self.lbfgs_max_iters,
            lbfgs_gradient_tol=self.lbfgs_gradient_tol,
            restarts=self.restarts,
            rigid_prealign=self.rigid_prealign,
            seed=self.seed,
        )

    def fit(self, shapes, y=None):
        if isinstance(shapes, CorrespondedShapeSet):
            object_id, shapes = shapes.object_id, shapes.shapes
        else:
            object_id = ""
        aligned = generalized_procrustes(shapes)
        self.model_ = build_ssm(aligned, self.n_modes, object_id=object_id)
        return self

    def complete(self, target):
        if not hasattr(self, "model_"):
            raise RuntimeError("ShapeCompleter must be fitted before completing targets")
        theta, completed, report = fit_ssm(self.model_, target, self._fit_config())
        self.last_report_ = report
        self.last_theta_ = theta
        return completed

    def transform(self, target):
        return self.complete(target)


def save_shape_model(path, model: ShapeModel):
    header = {
        "kind": "shape_model",
        "object_id": model.object_id,
        "n_points": model.n_points,
        "n_modes": model.n_modes,
        "mode_scales": model.mode_scales.tolist(),
    }
    from .fileio import write_blob_file

    write_blob_file(path, header, [model.mean, model.modes])


def load_shape_model(path) -> ShapeModel:
    from .fileio import FileFormatError, read_blob_file

    header, blob = read_blob_file(path)
    if header.get("kind") != "shape_model":
        raise FileFormatError(f"{path}: not a shape model file")
    p, n = int(header["n_points"]), int(header["n_modes"])
    expected = 3 * p + n * 3 * p
    if blob.size != expected:
        raise FileFormatError(f"{path}: blob holds {blob.size} floats, expected {expected}")
    mean = blob[: 3 * p].reshape(p, 3)
    modes = blob[3 * p :].reshape(n, 3 * p)
    return ShapeModel(
        mean=mean,
        modes=modes,
        mode_scales=np.asarray(header["mode_scales"], dtype=np.float64),
        object_id=header.get("object_id", ""),
    )
