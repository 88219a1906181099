"""Scale-invariant log-depth losses and their multi-map generalizations.

For one map with T valid pixels and log-error g_i = log(pred_i) - log(gt_i),
the base loss is

    alpha * sqrt(D(g)),   D(g) = mean(g^2) - lambda_var * mean(g)^2.

Two generalizations cover a set of N maps: the independent form averages
the per-map losses, (alpha/N) * sum_j sqrt(D(g^j)); the dependent form
pools every valid pixel into one statistic, alpha * sqrt(M(g)) with M the
same expression over the pooled pixels.

The center-aligned variants (CASI) replace g by

    h_i = log((pred_i + t(gt) - t(pred))^+ + eps) - log(gt_i + eps),

where t(.) is the mean of an alignment group's valid pixels, (.)^+ is a
ReLU, and eps is a small numerical safeguard.  Aligning the predicted
depth center onto the ground-truth center makes the loss invariant to a
per-group additive depth shift while still supervising scale.

All losses also return exact gradients with respect to the predicted
depths; gradients are zero at invalid pixels, and the ReLU clamp uses a
zero subgradient at exactly zero.

Every reduction is a numpy sum/dot over a fixed pixel order (row-major per
map, maps in set order), which numpy evaluates with deterministic pairwise
summation: results are bit-reproducible and independent of thread count.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LossConfig",
    "LossResult",
    "VARIANTS",
    "ALIGNMENT_SCOPES",
    "si_loss",
    "si_indep",
    "si_dep",
    "casi_error",
    "casi_indep",
    "casi_dep",
    "evaluate_loss",
    "loss_on_arrays",
    "groups_for_scope",
]

VARIANTS = ("si_indep", "si_dep", "casi_indep", "casi_dep")
ALIGNMENT_SCOPES = ("per_map", "per_object", "global")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    lambda_var: float = 0.85
    epsilon: float = 1e-6
    variant: str = "casi_indep"
    alignment_scope: str = "per_object"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.lambda_var <= 1.0:
            raise ValueError("lambda_var must be in [0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.alignment_scope not in ALIGNMENT_SCOPES:
            raise ValueError(f"alignment_scope must be one of {ALIGNMENT_SCOPES}")


@dataclass
class LossResult:
    """Loss value, exact gradients w.r.t. predicted depth, diagnostics.

    gradients holds one array per input map with zeros at invalid pixels;
    per_map_values holds the per-map alpha*sqrt(D) terms (NaN for maps
    skipped because their valid set is empty).
    """

    value: float
    gradients: list
    per_map_values: list
    valid_counts: list
    skipped: list = field(default_factory=list)

    @property
    def gradient(self):
        return self.gradients[0]


def groups_for_scope(n_maps, scope, maps_per_object=2):
    """Map indices grouped for center alignment under a scope."""
    if scope == "per_map":
        return [[j] for j in range(n_maps)]
    if scope == "global":
        return [list(range(n_maps))]
    if scope == "per_object":
        if n_maps % maps_per_object:
            raise ValueError("map count is not a multiple of maps_per_object")
        return [
            list(range(k, k + maps_per_object))
            for k in range(0, n_maps, maps_per_object)
        ]
    raise ValueError(f"unknown alignment scope {scope!r}")


def _extract_values(m):
    values = m.values if hasattr(m, "values") else np.asarray(m, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("depth maps must be 2-D grids")
    return values


def _prepare_maps(pred_maps, gt_maps):
    """Per-map joint validity and positive-depth checks."""
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"map count mismatch: {len(pred_maps)} vs {len(gt_maps)}")
    prepared, skipped = [], []
    for j, (pm, gm) in enumerate(zip(pred_maps, gt_maps)):
        pv, gv = _extract_values(pm), _extract_values(gm)
        if pv.shape != gv.shape:
            raise ValueError(f"map {j}: shape mismatch {pv.shape} vs {gv.shape}")
        valid = np.isfinite(pv) & np.isfinite(gv)
        if not valid.any():
            skipped.append(j)
            prepared.append(None)
            continue
        p, g = pv[valid], gv[valid]
        if np.any(p <= 0) or np.any(g <= 0):
            raise ValueError(f"map {j}: valid depths must be > 0")
        prepared.append({"shape": pv.shape, "valid": valid, "pred": p, "gt": g})
    if len(skipped) == len(pred_maps):
        raise ValueError("every map has an empty valid set")
    if skipped:
        warnings.warn(
            f"{len(skipped)} map(s) with empty valid sets excluded from the loss",
            stacklevel=3,
        )
    return prepared, skipped


def _d_statistic(resid, lam):
    t = resid.size
    s = resid.sum()
    d = resid.dot(resid) / t - lam * (s / t) ** 2
    return max(d, 0.0), s, t


def _reduce(residuals, cfg, pooled):
    """Loss value and d(loss)/d(residual) weights for live maps.

    residuals: list with None for skipped maps.  pooled=False averages the
    per-map sqrt(D) terms; pooled=True forms one statistic over all pixels.
    """
    live = [r for r in residuals if r is not None]
    per_map, counts = [], []
    for r in residuals:
        if r is None:
            per_map.append(float("nan"))
            counts.append(0)
        else:
            d, _, t = _d_statistic(r, cfg.lambda_var)
            per_map.append(cfg.alpha * np.sqrt(d))
            counts.append(t)
    weights = [None] * len(residuals)
    if pooled:
        t_total = sum(r.size for r in live)
        s_total = sum(r.sum() for r in live)
        q_total = sum(r.dot(r) for r in live)
        m = max(q_total / t_total - cfg.lambda_var * (s_total / t_total) ** 2, 0.0)
        value = cfg.alpha * np.sqrt(m)
        root = np.sqrt(m)
        for j, r in enumerate(residuals):
            if r is None:
                continue
            if root > 0.0:
                weights[j] = cfg.alpha * (r / t_total - cfg.lambda_var * s_total / t_total**2) / root
            else:
                weights[j] = np.zeros_like(r)
    else:
        n_live = len(live)
        value = float(np.nansum(per_map)) / n_live
        for j, r in enumerate(residuals):
            if r is None:
                continue
            d, s, t = _d_statistic(r, cfg.lambda_var)
            root = np.sqrt(d)
            if root > 0.0:
                weights[j] = (cfg.alpha / n_live) * (r / t - cfg.lambda_var * s / t**2) / root
            else:
                weights[j] = np.zeros_like(r)
    return float(value), weights, per_map, counts


def _scatter(prepared, flat_grads):
    grads = []
    for info, fg in zip(prepared, flat_grads):
        if info is None:
            grads.append(None)
        else:
            g = np.zeros(info["shape"])
            g[info["valid"]] = fg
            grads.append(g)
    # skipped maps still get zero-gradient grids of the common shape
    shape = next(i["shape"] for i in prepared if i is not None)
    return [g if g is not None else np.zeros(shape) for g in grads]


def _si_core(pred_maps, gt_maps, cfg, pooled):
    prepared, skipped = _prepare_maps(pred_maps, gt_maps)
    residuals = [
        None if info is None else np.log(info["pred"]) - np.log(info["gt"])
        for info in prepared
    ]
    value, weights, per_map, counts = _reduce(residuals, cfg, pooled)
    flat = [
        None if info is None else weights[j] / info["pred"]
        for j, info in enumerate(prepared)
    ]
    return LossResult(value, _scatter(prepared, flat), per_map, counts, skipped)


def _casi_core(pred_maps, gt_maps, cfg, pooled, groups):
    prepared, skipped = _prepare_maps(pred_maps, gt_maps)
    if groups is None:
        groups = groups_for_scope(len(pred_maps), cfg.alignment_scope)
    seen = sorted(j for grp in groups for j in grp)
    if seen != list(range(len(pred_maps))):
        raise ValueError("groups must partition the map indices")

    eps = cfg.epsilon
    aligned = [None] * len(prepared)
    group_of = {}
    group_sizes = {}
    for gi, grp in enumerate(groups):
        live = [j for j in grp if prepared[j] is not None]
        if not live:
            continue
        t_count = sum(prepared[j]["pred"].size for j in live)
        t_pred = sum(prepared[j]["pred"].sum() for j in live) / t_count
        t_gt = sum(prepared[j]["gt"].sum() for j in live) / t_count
        shift = t_gt - t_pred
        group_sizes[gi] = t_count
        for j in live:
            z = prepared[j]["pred"] + shift
            a = np.maximum(z, 0.0)
            aligned[j] = {"open": z > 0.0, "denom": a + eps}
            group_of[j] = gi

    residuals = [
        None
        if prepared[j] is None
        else np.log(aligned[j]["denom"]) - np.log(prepared[j]["gt"] + eps)
        for j in range(len(prepared))
    ]
    value, weights, per_map, counts = _reduce(residuals, cfg, pooled)

    # d h_i / d pred_k = 1{z_i > 0} (delta_ik - 1/T_group), so per group:
    # grad_k = c_k - mean_of_group(c) with c_i = w_i 1{z_i>0} / (a_i + eps)
    c_terms = [
        None
        if weights[j] is None
        else weights[j] * aligned[j]["open"] / aligned[j]["denom"]
        for j in range(len(prepared))
    ]
    group_c_sum = {gi: 0.0 for gi in group_sizes}
    for j, c in enumerate(c_terms):
        if c is not None:
            group_c_sum[group_of[j]] += c.sum()
    flat = [
        None if c is None else c - group_c_sum[group_of[j]] / group_sizes[group_of[j]]
        for j, c in enumerate(c_terms)
    ]
    return LossResult(value, _scatter(prepared, flat), per_map, counts, skipped)


def _set_maps(dmset):
    if hasattr(dmset, "maps"):
        return list(dmset.maps)
    return list(dmset)


def _check_pair(pred_set, gt_set):
    pred_ids = getattr(pred_set, "object_ids", None)
    gt_ids = getattr(gt_set, "object_ids", None)
    if pred_ids is not None and gt_ids is not None and list(pred_ids) != list(gt_ids):
        raise ValueError("prediction and ground truth disagree on object ids")


def si_loss(pred, gt, cfg=None) -> LossResult:
    """Scale-invariant log loss for a single depth-map pair."""
    cfg = cfg or LossConfig()
    return _si_core([pred], [gt], cfg, pooled=False)


def si_indep(pred_set, gt_set, cfg=None) -> LossResult:
    """Average of the per-map scale-invariant losses."""
    cfg = cfg or LossConfig(variant="si_indep")
    _check_pair(pred_set, gt_set)
    return _si_core(_set_maps(pred_set), _set_maps(gt_set), cfg, pooled=False)


def si_dep(pred_set, gt_set, cfg=None) -> LossResult:
    """Scale-invariant loss over all maps' pixels pooled into one statistic."""
    cfg = cfg or LossConfig(variant="si_dep")
    _check_pair(pred_set, gt_set)
    return _si_core(_set_maps(pred_set), _set_maps(gt_set), cfg, pooled=True)


def casi_error(pred, gt, cfg=None, group=None):
    """Center-aligned log-error grid h for one map (NaN at invalid pixels).

    group optionally lists (pred, gt) map pairs whose joint valid pixels
    define the alignment means; it must contain the queried pair.  By
    default the map aligns against itself.
    """
    cfg = cfg or LossConfig()
    pairs = group if group is not None else [(pred, gt)]
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    try:
        target = next(i for i, p in enumerate(preds) if p is pred)
    except StopIteration:
        raise ValueError("group must contain the queried (pred, gt) pair")
    prepared, _ = _prepare_maps(preds, gts)
    live = [j for j in range(len(prepared)) if prepared[j] is not None]
    if prepared[target] is None:
        raise ValueError("queried map has an empty valid set")
    t_count = sum(prepared[j]["pred"].size for j in live)
    t_pred = sum(prepared[j]["pred"].sum() for j in live) / t_count
    t_gt = sum(prepared[j]["gt"].sum() for j in live) / t_count
    info = prepared[target]
    a = np.maximum(info["pred"] + (t_gt - t_pred), 0.0)
    h = np.full(info["shape"], np.nan)
    h[info["valid"]] = np.log(a + cfg.epsilon) - np.log(info["gt"] + cfg.epsilon)
    return h


def casi_indep(pred_set, gt_set, cfg=None, groups=None) -> LossResult:
    """Average of per-map losses on center-aligned log-errors."""
    cfg = cfg or LossConfig(variant="casi_indep")
    _check_pair(pred_set, gt_set)
    return _casi_core(_set_maps(pred_set), _set_maps(gt_set), cfg, pooled=False, groups=groups)


def casi_dep(pred_set, gt_set, cfg=None, groups=None) -> LossResult:
    """Pooled-pixel loss on center-aligned log-errors."""
    cfg = cfg or LossConfig(variant="casi_dep")
    _check_pair(pred_set, gt_set)
    return _casi_core(_set_maps(pred_set), _set_maps(gt_set), cfg, pooled=True, groups=groups)


_DISPATCH = {
    "si_indep": si_indep,
    "si_dep": si_dep,
    "casi_indep": casi_indep,
    "casi_dep": casi_dep,
}


def evaluate_loss(pred_set, gt_set, cfg: LossConfig) -> LossResult:
    """Dispatch on cfg.variant."""
    fn = _DISPATCH[cfg.variant]
    return fn(pred_set, gt_set, cfg)


def loss_on_arrays(pred_arrays, gt_arrays, cfg: LossConfig, groups=None) -> LossResult:
    """Variant dispatch over bare value grids (NaN = invalid).

    groups (casi variants only) lists alignment groups as map-index lists;
    defaults follow cfg.alignment_scope assuming front/back pairs.
    """
    if cfg.variant == "si_indep":
        return _si_core(pred_arrays, gt_arrays, cfg, pooled=False)
    if cfg.variant == "si_dep":
        return _si_core(pred_arrays, gt_arrays, cfg, pooled=True)
    pooled = cfg.variant == "casi_dep"
    return _casi_core(pred_arrays, gt_arrays, cfg, pooled=pooled, groups=groups)
