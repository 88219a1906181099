"""Recovering dual-face depth maps from a radiograph at desk scale.

Two routes are provided: direct gradient optimization of per-pixel
log-depths under a chosen loss (optimize_depth), and a small per-pixel
patch regressor trained by the same losses (PatchDepthRegressor).  Both
parameterize depth as exp(log-depth), so outputs are positive everywhere,
and both are bit-reproducible for a fixed seed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .geometry import DepthMap, DepthMapSet
from .losses import LossConfig, groups_for_scope, loss_on_arrays

__all__ = [
    "DepthInit",
    "FitConfig",
    "DivergenceError",
    "optimize_depth",
    "PatchDepthRegressor",
    "save_regressor",
    "load_regressor",
]


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass(frozen=True)
class DepthInit:
    """Initialization for direct optimization: gt plus Gaussian noise of
    the given sigma (mm), or a constant depth (mm)."""

    kind: str = "gt_plus_noise"
    value: float = 20.0

    def __post_init__(self):
        if self.kind not in ("gt_plus_noise", "constant"):
            raise ValueError("init kind must be 'gt_plus_noise' or 'constant'")
        if self.kind == "gt_plus_noise" and self.value < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("constant init depth must be > 0")


@dataclass(frozen=True)
class FitConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    max_iters: int = 2000
    learning_rate: float = 0.05
    init: DepthInit = field(default_factory=DepthInit)
    rng_seed: int = 0
    convergence_tol: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def _casi_groups(cfg: LossConfig, n_maps, maps_per_object=2):
    if cfg.variant.startswith("casi"):
        return groups_for_scope(n_maps, cfg.alignment_scope, maps_per_object)
    return None


def optimize_depth(gt_set: DepthMapSet, cfg: FitConfig):
    """Gradient descent on per-pixel log-depth against a fixed target.

    Validity masks are taken from the target set.  Descent runs on the
    squared loss, which shares its minimizers with the loss but is smooth
    at the optimum (the square root makes the raw loss a norm with a kink
    there); the recorded trace holds the loss itself.  The step size
    adapts multiplicatively (grow on accepted steps, halve on rejected
    ones), so the trace is non-increasing.  Returns the fitted set and the
    trace; a non-finite loss raises DivergenceError with the iteration
    index.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    gt_arrays = [m.values for m in gt_set.maps]
    valids = [np.isfinite(v) for v in gt_arrays]
    groups = _casi_groups(cfg.loss, len(gt_arrays))

    xs = []
    for gv, valid in zip(gt_arrays, valids):
        if cfg.init.kind == "gt_plus_noise":
            d = gv[valid] + rng.normal(0.0, cfg.init.value, int(valid.sum()))
            d = np.maximum(d, 1e-3)
        else:
            d = np.full(int(valid.sum()), cfg.init.value)
        xs.append(np.log(d))

    pooled = cfg.loss.variant.endswith("_dep")

    def evaluate(x_list):
        preds = []
        for x, valid, gv in zip(x_list, valids, gt_arrays):
            if np.any(np.abs(x) > 700.0):  # exp() would overflow
                raise DivergenceError("log-depth overflow")
            arr = np.full(gv.shape, np.nan)
            arr[valid] = np.exp(x)
            preds.append(arr)
        res = loss_on_arrays(preds, gt_arrays, cfg.loss, groups)
        # Descend the smooth surrogate with the same zero set as the loss:
        # the squared loss for pooled variants, the mean of squared per-map
        # terms for averaged ones (each sqrt in the sum has its own kink).
        if pooled:
            surrogate = res.value**2
            factors = [2.0 * res.value] * len(x_list)
        else:
            live = [v for v in res.per_map_values if np.isfinite(v)]
            surrogate = float(np.sum(np.square(live))) / len(live)
            factors = [
                2.0 * (pm if np.isfinite(pm) else 0.0) for pm in res.per_map_values
            ]
        grads = [
            factors[j] * res.gradients[j][valids[j]] * np.exp(x_list[j])
            for j in range(len(x_list))
        ]
        return res.value, surrogate, grads, preds

    value, surrogate, grads, preds = evaluate(xs)
    if not np.isfinite(value):
        raise DivergenceError("non-finite loss at iteration 0")
    trace = [value]
    lr = cfg.learning_rate
    if surrogate > 0.0:
        for it in range(1, cfg.max_iters + 1):
            candidate = [x - lr * g for x, g in zip(xs, grads)]
            try:
                new_value, new_surrogate, new_grads, new_preds = evaluate(candidate)
            except DivergenceError as e:
                raise DivergenceError(f"{e} at iteration {it}") from None
            if not np.isfinite(new_value):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            if new_surrogate < surrogate:
                improvement = value - new_value
                xs, grads, preds = candidate, new_grads, new_preds
                value, surrogate = new_value, new_surrogate
                lr *= 1.1
                trace.append(value)
                if abs(improvement) < cfg.convergence_tol or surrogate == 0.0:
                    break
            else:
                lr *= 0.5
                trace.append(value)
                if lr < 1e-18:
                    break

    maps = [DepthMap(arr) for arr in preds]
    fitted = DepthMapSet(maps=maps, object_ids=list(gt_set.object_ids), geometry=gt_set.geometry)
    return fitted, trace


# -- patch regressor --------------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _init_params(rng, sizes, output_bias):
    """He-style init; the output layer starts small with its bias anchored
    at the training set's mean log-depth per channel."""
    params = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, (fan_in, fan_out))
        b = np.zeros(fan_out)
        if i == len(sizes) - 2:
            w *= 0.01
            b = output_bias.copy()
        params.append((w, b))
    return params


def _forward(params, x):
    caches = []
    a = x
    for i, (w, b) in enumerate(params):
        z = a @ w + b
        caches.append((a, z))
        a = _softplus(z) if i < len(params) - 1 else z
    return a, caches


def _backward(params, caches, dout):
    grads = [None] * len(params)
    delta = dout
    for i in range(len(params) - 1, -1, -1):
        a_in, _ = caches[i]
        grads[i] = (a_in.T @ delta, delta.sum(axis=0))
        if i > 0:
            _, z_prev = caches[i - 1]
            delta = (delta @ params[i][0].T) * expit(z_prev)
    return grads


def _flatten(params):
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in params])


def _unflatten(flat, sizes):
    params, pos = [], 0
    for i in range(len(sizes) - 1):
        n_w = sizes[i] * sizes[i + 1]
        w = flat[pos : pos + n_w].reshape(sizes[i], sizes[i + 1])
        pos += n_w
        b = flat[pos : pos + sizes[i + 1]]
        pos += sizes[i + 1]
        params.append((w, b))
    if pos != flat.size:
        raise ValueError("parameter vector does not match the architecture")
    return params


def _patch_features(radiograph, rows, cols, patch_radius):
    """Pixel features: the (2k+1)^2 surrounding radiograph patch (padded
    with 1.0 = air outside the detector) plus normalized coordinates."""
    k = patch_radius
    h, w = radiograph.shape
    pad = np.pad(radiograph, k, mode="constant", constant_values=1.0)
    offs = np.arange(-k, k + 1)
    rr = rows[:, None, None] + offs[None, :, None] + k
    cc = cols[:, None, None] + offs[None, None, :] + k
    patches = pad[rr, cc].reshape(len(rows), -1)
    coords = np.stack([cols / max(w - 1, 1), rows / max(h - 1, 1)], axis=1)
    return np.hstack([patches, coords])


@dataclass
class _PreparedScene:
    features: np.ndarray          # (n_pixels, n_features)
    rows_per_map: list            # index into the pixel list, per used map
    gt_arrays: list               # one (H, W) grid per used map, NaN-invalid
    shape: tuple


def _prepare_scene(radiograph, gt_set: DepthMapSet, labels, faces, patch_radius):
    h, w = radiograph.shape
    used = []
    for oid in gt_set.object_ids:
        mask = labels.mask(oid)
        face_maps = [gt_set.front(oid)] if faces == "single" else [gt_set.front(oid), gt_set.back(oid)]
        for m in face_maps:
            gv = np.where(mask & np.isfinite(m.values), m.values, np.nan)
            used.append(gv)
    any_valid = np.zeros((h, w), dtype=bool)
    for gv in used:
        any_valid |= np.isfinite(gv)
    rows, cols = np.nonzero(any_valid)
    index_grid = np.full((h, w), -1, dtype=int)
    index_grid[rows, cols] = np.arange(len(rows))
    rows_per_map = [index_grid[np.isfinite(gv)] for gv in used]
    return _PreparedScene(
        features=_patch_features(radiograph, rows, cols, patch_radius),
        rows_per_map=rows_per_map,
        gt_arrays=used,
        shape=(h, w),
    )


def _scene_objective(params, scene: _PreparedScene, loss_cfg, groups):
    """Loss value and parameter gradients on one prepared scene."""
    out, caches = _forward(params, scene.features)
    depth = np.exp(out)
    preds = []
    for j, gv in enumerate(scene.gt_arrays):
        arr = np.full(scene.shape, np.nan)
        sel = np.isfinite(gv)
        arr[sel] = depth[scene.rows_per_map[j], j]
        preds.append(arr)
    res = loss_on_arrays(preds, scene.gt_arrays, loss_cfg, groups)
    dout = np.zeros_like(out)
    for j, gv in enumerate(scene.gt_arrays):
        sel = np.isfinite(gv)
        dout[scene.rows_per_map[j], j] = res.gradients[j][sel] * depth[scene.rows_per_map[j], j]
    return res.value, _backward(params, caches, dout)


def batch_objective(flat_params, sizes, scenes, loss_cfg, groups):
    """Mean scene loss and flat gradient over a batch; the finite-difference
    oracle in the tests drives this function directly."""
    params = _unflatten(flat_params, sizes)
    total = 0.0
    accum = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    for scene in scenes:
        value, grads = _scene_objective(params, scene, loss_cfg, groups)
        total += value
        accum = [(aw + gw, ab + gb) for (aw, ab), (gw, gb) in zip(accum, grads)]
    n = len(scenes)
    return total / n, _flatten([(aw / n, ab / n) for aw, ab in accum])


class PatchDepthRegressor(BaseEstimator):
    """Per-pixel MLP mapping a radiograph patch to per-object depths.

    The input per pixel is the surrounding (2 * patch_radius + 1)^2
    radiograph patch plus normalized pixel coordinates; the output is one
    log-depth per face channel (front/back per object when faces="dual",
    front only when faces="single").  Training is plain minibatch SGD on
    the configured loss, with scenes as the batch unit since the losses
    reduce over whole maps.  Masked-out pixels never contribute.
    """

    def __init__(
        self,
        patch_radius=2,
        hidden=(64, 64),
        loss_variant="casi_indep",
        alpha=10.0,
        lambda_var=0.85,
        epsilon=1e-6,
        alignment_scope="per_object",
        faces="dual",
        learning_rate=0.005,
        epochs=200,
        batch_scenes=2,
        seed=0,
    ):
        self.patch_radius = patch_radius
        self.hidden = hidden
        self.loss_variant = loss_variant
        self.alpha = alpha
        self.lambda_var = lambda_var
        self.epsilon = epsilon
        self.alignment_scope = alignment_scope
        self.faces = faces
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_scenes = batch_scenes
        self.seed = seed

    def _loss_config(self):
        return LossConfig(
            alpha=self.alpha,
            lambda_var=self.lambda_var,
            epsilon=self.epsilon,
            variant=self.loss_variant,
            alignment_scope=self.alignment_scope,
        )

    def fit(self, scenes, y=None):
        """Train on a list of (radiograph, gt DepthMapSet, LabelMask)."""
        if len(scenes) < 2:
            raise ValueError("training needs at least 2 scenes")
        if self.faces not in ("dual", "single"):
            raise ValueError("faces must be 'dual' or 'single'")
        first_gt = scenes[0][1]
        self.object_ids_ = list(first_gt.object_ids)
        self.image_shape_ = scenes[0][0].shape
        for radiograph, gt, _ in scenes:
            if radiograph.shape != self.image_shape_ or list(gt.object_ids) != self.object_ids_:
                raise ValueError("all training scenes must share geometry and object ids")

        loss_cfg = self._loss_config()
        maps_per_object = 2 if self.faces == "dual" else 1
        n_channels = maps_per_object * len(self.object_ids_)
        groups = _casi_groups(loss_cfg, n_channels, maps_per_object)
        prepped = [
            _prepare_scene(radiograph, gt, labels, self.faces, self.patch_radius)
            for radiograph, gt, labels in scenes
        ]

        # anchor each output channel at the mean log ground-truth depth
        anchors = np.empty(n_channels)
        bias = np.empty(n_channels)
        for c in range(n_channels):
            vals = np.concatenate([s.gt_arrays[c][np.isfinite(s.gt_arrays[c])] for s in prepped])
            anchors[c] = vals.mean() if vals.size else 1.0
            bias[c] = np.log(anchors[c])

        n_features = (2 * self.patch_radius + 1) ** 2 + 2
        sizes = [n_features, *self.hidden, n_channels]
        rng = np.random.default_rng(self.seed)
        params = _init_params(rng, sizes, bias)
        flat = _flatten(params)

        curve = []
        for _ in range(self.epochs):
            order = rng.permutation(len(prepped))
            epoch_losses = []
            for start in range(0, len(order), self.batch_scenes):
                batch = [prepped[i] for i in order[start : start + self.batch_scenes]]
                value, grad = batch_objective(flat, sizes, batch, loss_cfg, groups)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite training loss at epoch {len(curve)}")
                flat = flat - self.learning_rate * grad
                epoch_losses.append(value)
            curve.append(float(np.mean(epoch_losses)))

        self.sizes_ = sizes
        self.params_ = _unflatten(flat, sizes)
        self.loss_curve_ = curve
        self.n_channels_ = n_channels
        self.depth_anchors_ = anchors
        self.groups_ = groups
        return self

    def predict(self, radiograph, labels) -> DepthMapSet:
        """Depth maps for one radiograph; validity copies the given mask
        per object, and single-face models emit all-invalid back maps.

        Center-aligned losses leave predictions free by a per-group
        additive depth shift, so the raw network output only fixes shape
        and scale; the shift gauge is set here from the standardized
        geometry prior, moving each alignment group's mean depth onto the
        training-set mean.
        """
        if not hasattr(self, "params_"):
            raise RuntimeError("PatchDepthRegressor must be fitted before predicting")
        if radiograph.shape != self.image_shape_:
            raise ValueError(
                f"radiograph shape {radiograph.shape} does not match training shape {self.image_shape_}"
            )
        h, w = radiograph.shape
        union = np.zeros((h, w), dtype=bool)
        for oid in self.object_ids_:
            union |= labels.mask(oid)
        if union.any():
            rows, cols = np.nonzero(union)
            out, _ = _forward(self.params_, _patch_features(radiograph, rows, cols, self.patch_radius))
            depth = np.exp(out)
        else:
            rows = cols = np.empty(0, dtype=int)
            depth = np.zeros((0, self.n_channels_))

        per_object = 2 if self.faces == "dual" else 1
        selections = []
        for k, oid in enumerate(self.object_ids_):
            sel = labels.mask(oid)[rows, cols]
            selections.extend([sel] * per_object)

        if self.loss_variant.startswith("casi") and self.groups_ is not None:
            for group in self.groups_:
                counts = np.array([int(selections[c].sum()) for c in group])
                if counts.sum() == 0:
                    continue
                target_mean = float(np.dot(counts, self.depth_anchors_[list(group)]) / counts.sum())
                pooled = np.concatenate([depth[selections[c], c] for c in group])
                shift = target_mean - float(pooled.mean())
                for c in group:
                    depth[:, c] = np.maximum(depth[:, c] + shift, 1e-3)

        if self.faces == "dual":
            # feasibility projection: a ray's two faces are the sorted
            # endpoints of its chord, so back >= front always holds
            for k in range(len(self.object_ids_)):
                f, b = depth[:, 2 * k].copy(), depth[:, 2 * k + 1].copy()
                depth[:, 2 * k] = np.minimum(f, b)
                depth[:, 2 * k + 1] = np.maximum(f, b)

        maps = []
        for k, oid in enumerate(self.object_ids_):
            for face in range(2):
                arr = np.full((h, w), np.nan)
                if self.faces == "single" and face == 1:
                    maps.append(DepthMap(arr))
                    continue
                channel = per_object * k + face
                sel = selections[channel]
                if sel.any():
                    arr[rows[sel], cols[sel]] = depth[sel, channel]
                maps.append(DepthMap(arr))
        return DepthMapSet(maps=maps, object_ids=list(self.object_ids_))


def save_regressor(path, model: PatchDepthRegressor):
    header = {
        "kind": "depth_regressor",
        "patch_radius": model.patch_radius,
        "hidden": list(model.hidden),
        "sizes": list(model.sizes_),
        "object_ids": model.object_ids_,
        "faces": model.faces,
        "image_shape": list(model.image_shape_),
        "seed": model.seed,
        "depth_anchors": model.depth_anchors_.tolist(),
        "groups": [list(g) for g in model.groups_] if model.groups_ is not None else None,
        "loss": {
            "variant": model.loss_variant,
            "alpha": model.alpha,
            "lambda_var": model.lambda_var,
            "epsilon": model.epsilon,
            "alignment_scope": model.alignment_scope,
        },
    }
    from .fileio import write_blob_file

    write_blob_file(path, header, [_flatten(model.params_)])


def load_regressor(path) -> PatchDepthRegressor:
    from .fileio import FileFormatError, read_blob_file

    header, blob = read_blob_file(path)
    if header.get("kind") != "depth_regressor":
        raise FileFormatError(f"{path}: not a depth regressor file")
    sizes = [int(s) for s in header["sizes"]]
    n_params = sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))
    if blob.size != n_params:
        raise FileFormatError(f"{path}: blob holds {blob.size} floats, expected {n_params}")
    loss = header["loss"]
    model = PatchDepthRegressor(
        patch_radius=int(header["patch_radius"]),
        hidden=tuple(header["hidden"]),
        loss_variant=loss["variant"],
        alpha=loss["alpha"],
        lambda_var=loss["lambda_var"],
        epsilon=loss["epsilon"],
        alignment_scope=loss["alignment_scope"],
        faces=header["faces"],
        seed=header["seed"],
    )
    model.sizes_ = sizes
    model.params_ = _unflatten(blob, sizes)
    model.object_ids_ = list(header["object_ids"])
    model.image_shape_ = tuple(header["image_shape"])
    model.n_channels_ = sizes[-1]
    model.depth_anchors_ = np.asarray(header["depth_anchors"], dtype=np.float64)
    groups = header.get("groups")
    model.groups_ = [list(g) for g in groups] if groups is not None else None
    model.loss_curve_ = []
    return model
