"""End-to-end experiment pipeline with reproducible seeded stages.

Stages: phantom generation -> regressor training per loss variant ->
prediction + masking -> back-projection -> shape-model completion ->
metrics, producing per-stage artifacts, a per-object CSV and a summary
JSON with mean/std aggregates grouped by clean/deformed subgroup.

Every random draw descends from one root seed through named substreams,
so two runs of the same config produce byte-identical summaries.

Training depth targets receive a per-object constant along-ray shift
(train_shift_noise_mm) emulating the registration uncertainty of depth
supervision derived from 2D-3D alignment; shift-aligned losses are
insensitive to it by construction while shift-supervising losses must
absorb it.  Test-set evaluation always uses clean analytic ground truth.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import fileio, metrics as metrics_mod
from .depthfit import PatchDepthRegressor, save_regressor
from .geometry import DepthMap, DepthMapSet, backproject_set, default_geometry
from .losses import VARIANTS
from .phantom import (
    JitterParams,
    corresponded_surface_points,
    render_ground_truth,
    sample_scene,
    sample_surface_points,
    scene_from_json,
    scene_to_json,
)
from .ssm import SsmFitConfig, build_ssm, fit_ssm, generalized_procrustes, save_shape_model

__all__ = [
    "ConfigError",
    "PipelineError",
    "ExperimentConfig",
    "derive_seed",
    "run_pipeline",
    "compare_report",
    "validate_files",
    "write_scene_dir",
    "read_scene_dir",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; partial artifacts persist on disk."""

    def __init__(self, stage, cause):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage


def derive_seed(root_seed, name):
    """Named substream seed: stable hash of the root seed and a label."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ExperimentConfig:
    seed: int = 0
    geometry_size: int = 64
    geometry_spacing: float = 6.4
    geometry_sdd: float = 1000.0
    template: str = "hip-like"
    n_scenes: int = 16
    n_folds: int = 4
    deformed_fraction: float = 0.5
    jitter: JitterParams = field(default_factory=JitterParams)
    train_shift_noise_mm: float = 10.0
    variants: tuple = (
        ("si_indep", "single"),
        ("si_indep", "dual"),
        ("casi_indep", "dual"),
    )
    train_epochs: int = 150
    train_learning_rate: float = 0.005
    train_batch_scenes: int = 2
    patch_radius: int = 2
    hidden: tuple = (48, 48)
    alignment_scope: str = "per_object"
    alpha: float = 10.0
    lambda_var: float = 0.85
    loss_epsilon: float = 1e-6
    ssm_points: int = 350
    ssm_modes: int = 6
    ssm_lambda_l2: float = 0.01
    ssm_clip_margin: float = 5.0
    ssm_restarts: int = 2
    ssm_max_iters: int = 150
    eval_surface_points: int = 800
    emd_cap: int = 256

    def __post_init__(self):
        if self.n_folds < 2:
            raise ConfigError("need at least 2 folds")
        if not 0.0 <= self.deformed_fraction <= 1.0:
            raise ConfigError("deformed_fraction must be in [0, 1]")
        if not self.variants:
            raise ConfigError("at least one loss variant is required")
        for loss, faces in self.variants:
            if loss not in VARIANTS:
                raise ConfigError(f"unknown loss variant {loss!r}")
            if faces not in ("dual", "single"):
                raise ConfigError(f"faces must be 'dual' or 'single', got {faces!r}")
        min_train = min(len(t) for t, _ in self.folds())
        if min_train < 2:
            raise ConfigError("every fold needs at least 2 training scenes")
        if self.ssm_modes > min_train - 1:
            raise ConfigError("ssm_modes must be <= smallest fold training size - 1")

    def scene_seeds(self):
        return [derive_seed(self.seed, f"phantom/scene/{i}") for i in range(self.n_scenes)]

    def deformed_flags(self):
        """Deformed assignment spread over positions within each fold, so
        every fold's test set carries both subgroups."""
        positions = -(-self.n_scenes // self.n_folds)  # scenes per fold, rounded up
        k = int(round(self.deformed_fraction * positions))
        pattern = [((j + 1) * k) // positions > (j * k) // positions for j in range(positions)]
        return [pattern[i // self.n_folds] for i in range(self.n_scenes)]

    def folds(self):
        """(train_indices, test_indices) per fold; each scene is tested in
        exactly one fold and the two sets never overlap."""
        out = []
        for f in range(self.n_folds):
            test = [i for i in range(self.n_scenes) if i % self.n_folds == f]
            train = [i for i in range(self.n_scenes) if i % self.n_folds != f]
            assert not set(train) & set(test)
            out.append((train, test))
        return out

    def geometry(self):
        return default_geometry(self.geometry_size, self.geometry_spacing, self.geometry_sdd)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        geo = doc.get("geometry", {})
        ph = doc.get("phantom", {})
        tr = doc.get("train", {})
        sm = doc.get("ssm", {})
        me = doc.get("metrics", {})
        try:
            jitter = JitterParams(**ph.get("jitter", {}))
            variants = tuple(
                (v["loss"], v.get("faces", "dual")) for v in doc.get(
                    "variants",
                    [
                        {"loss": "si_indep", "faces": "single"},
                        {"loss": "si_indep", "faces": "dual"},
                        {"loss": "casi_indep", "faces": "dual"},
                    ],
                )
            )
            return cls(
                seed=int(doc.get("seed", 0)),
                geometry_size=int(geo.get("size", 64)),
                geometry_spacing=float(geo.get("pixel_spacing", 6.4)),
                geometry_sdd=float(geo.get("sdd", 1000.0)),
                template=ph.get("template", "hip-like"),
                n_scenes=int(ph.get("n_scenes", 16)),
                n_folds=int(ph.get("n_folds", 4)),
                deformed_fraction=float(ph.get("deformed_fraction", 0.5)),
                jitter=jitter,
                train_shift_noise_mm=float(ph.get("train_shift_noise_mm", 10.0)),
                variants=variants,
                train_epochs=int(tr.get("epochs", 150)),
                train_learning_rate=float(tr.get("learning_rate", 0.005)),
                train_batch_scenes=int(tr.get("batch_scenes", 2)),
                patch_radius=int(tr.get("patch_radius", 2)),
                hidden=tuple(tr.get("hidden", (48, 48))),
                alignment_scope=tr.get("alignment_scope", "per_object"),
                alpha=float(tr.get("alpha", 10.0)),
                lambda_var=float(tr.get("lambda_var", 0.85)),
                loss_epsilon=float(tr.get("epsilon", 1e-6)),
                ssm_points=int(sm.get("points", 350)),
                ssm_modes=int(sm.get("n_modes", 6)),
                ssm_lambda_l2=float(sm.get("lambda_l2", 0.01)),
                ssm_clip_margin=float(sm.get("clip_margin", 5.0)),
                ssm_restarts=int(sm.get("restarts", 2)),
                ssm_max_iters=int(sm.get("max_iters", 150)),
                eval_surface_points=int(sm.get("surface_eval_points", 800)),
                emd_cap=int(me.get("emd_cap", 256)),
            )
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from e

    def to_dict(self):
        return {
            "seed": self.seed,
            "geometry": {
                "size": self.geometry_size,
                "pixel_spacing": self.geometry_spacing,
                "sdd": self.geometry_sdd,
            },
            "phantom": {
                "template": self.template,
                "n_scenes": self.n_scenes,
                "n_folds": self.n_folds,
                "deformed_fraction": self.deformed_fraction,
                "jitter": {
                    "translation_mm": self.jitter.translation_mm,
                    "rotation_deg": self.jitter.rotation_deg,
                    "scale": self.jitter.scale,
                },
                "train_shift_noise_mm": self.train_shift_noise_mm,
            },
            "variants": [{"loss": l, "faces": f} for l, f in self.variants],
            "train": {
                "epochs": self.train_epochs,
                "learning_rate": self.train_learning_rate,
                "batch_scenes": self.train_batch_scenes,
                "patch_radius": self.patch_radius,
                "hidden": list(self.hidden),
                "alignment_scope": self.alignment_scope,
                "alpha": self.alpha,
                "lambda_var": self.lambda_var,
                "epsilon": self.loss_epsilon,
            },
            "ssm": {
                "points": self.ssm_points,
                "n_modes": self.ssm_modes,
                "lambda_l2": self.ssm_lambda_l2,
                "clip_margin": self.ssm_clip_margin,
                "restarts": self.ssm_restarts,
                "max_iters": self.ssm_max_iters,
                "surface_eval_points": self.eval_surface_points,
            },
            "metrics": {"emd_cap": self.emd_cap},
        }


def write_scene_dir(path, scene, shift_noise_rng=None, shift_noise_mm=0.0):
    """Render a scene and write scene.json, gt.dmap, labels.dmap, xray.dmap.

    When shift_noise_mm > 0 every object's front and back depth maps are
    shifted by one per-object constant drawn from shift_noise_rng,
    emulating registration-derived supervision; the scene file keeps the
    clean analytic description.
    """
    os.makedirs(path, exist_ok=True)
    dmset, labels, image = render_ground_truth(scene)
    if shift_noise_mm > 0.0:
        maps = []
        for k, oid in enumerate(dmset.object_ids):
            delta = float(shift_noise_rng.normal(0.0, shift_noise_mm))
            maps.append(DepthMap(dmset.maps[2 * k].values + delta))
            maps.append(DepthMap(dmset.maps[2 * k + 1].values + delta))
        dmset = DepthMapSet(maps=maps, object_ids=list(dmset.object_ids), geometry=scene.geometry)
    with open(os.path.join(path, "scene.json"), "w") as f:
        f.write(scene_to_json(scene) + "\n")
    fileio.write_depth_set(os.path.join(path, "gt.dmap"), dmset, scene.geometry)
    fileio.write_label_mask(os.path.join(path, "labels.dmap"), labels, scene.geometry)
    fileio.write_image(os.path.join(path, "xray.dmap"), image, scene.geometry)
    return dmset, labels, image


def read_scene_dir(path):
    """(scene or None, gt set, labels, radiograph, geometry) from a dir."""
    scene = None
    scene_path = os.path.join(path, "scene.json")
    if os.path.exists(scene_path):
        with open(scene_path) as f:
            scene = scene_from_json(f.read())
    gt = fileio.read_depth_set(os.path.join(path, "gt.dmap"))
    labels, _ = fileio.read_label_mask(os.path.join(path, "labels.dmap"))
    image, geom = fileio.read_image(os.path.join(path, "xray.dmap"))
    return scene, gt, labels, image, geom


def _variant_tag(loss, faces):
    return f"{loss}_{faces}"


def _mean_std(values):
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0)), "n": int(arr.size)}


def _aggregate(rows, key):
    groups = {"all": rows}
    groups["clean"] = [r for r in rows if r["subgroup"] == "clean"]
    groups["deformed"] = [r for r in rows if r["subgroup"] == "deformed"]
    return {name: _mean_std([r[key] for r in grp]) for name, grp in groups.items()}


def run_pipeline(config, out_dir):
    """Run every stage for an ExperimentConfig (or config dict).

    Returns the summary document; artifacts (scenes, models, clouds,
    metrics.csv, summary.json) land under out_dir.  A stage failure is
    re-raised with the stage name; artifacts written so far persist.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    geom = cfg.geometry()
    stage = "setup"
    try:
        stage = "phantom"
        deformed_flags = cfg.deformed_flags()
        cases = []
        for i, seed in enumerate(cfg.scene_seeds()):
            scene = sample_scene(
                seed, cfg.template, cfg.jitter, deformed=deformed_flags[i], geometry=geom
            )
            dmset, labels, image = write_scene_dir(
                os.path.join(out_dir, "scenes", f"scene_{i:02d}"), scene
            )
            # training labels: analytic depths plus one per-object shift,
            # drawn per scene so every fold sees the same supervision
            noisy = dmset
            if cfg.train_shift_noise_mm > 0.0:
                rng_i = np.random.default_rng(derive_seed(cfg.seed, f"shift-noise/{i}"))
                maps = []
                for k in range(len(dmset.object_ids)):
                    delta = float(rng_i.normal(0.0, cfg.train_shift_noise_mm))
                    maps.append(DepthMap(dmset.maps[2 * k].values + delta))
                    maps.append(DepthMap(dmset.maps[2 * k + 1].values + delta))
                noisy = DepthMapSet(maps, list(dmset.object_ids), geom)
            cases.append(
                {
                    "index": i,
                    "scene": scene,
                    "gt": dmset,
                    "train_gt": noisy,
                    "labels": labels,
                    "image": image,
                    "subgroup": "deformed" if deformed_flags[i] else "clean",
                }
            )
        object_ids = list(cases[0]["gt"].object_ids)

        stage = "ground-truth-surfaces"
        gt_surfaces = {}
        for case in cases:
            for oid in object_ids:
                gt_surfaces[(case["index"], oid)] = sample_surface_points(
                    case["scene"].primitives(oid),
                    cfg.eval_surface_points,
                    derive_seed(cfg.seed, f"eval-surface/{case['index']}/{oid}"),
                )

        emd_seed = derive_seed(cfg.seed, "emd")
        os.makedirs(os.path.join(out_dir, "models"), exist_ok=True)
        rows = []
        train_curves = {_variant_tag(l, f): [] for l, f in cfg.variants}
        for fold, (train_idx, test_idx) in enumerate(cfg.folds()):
            stage = f"ssm-build[fold{fold}]"
            fold_scenes = [cases[i]["scene"] for i in train_idx]
            ssm_models = {}
            for oid in object_ids:
                stacks = corresponded_surface_points(
                    fold_scenes, oid, cfg.ssm_points, derive_seed(cfg.seed, f"ssm/{oid}")
                )
                aligned = generalized_procrustes(stacks)
                model = build_ssm(aligned, cfg.ssm_modes, object_id=oid)
                save_shape_model(
                    os.path.join(out_dir, "models", f"ssm_{oid}_fold{fold}.rdssm"), model
                )
                ssm_models[oid] = model

            train_data = [
                (cases[i]["image"], cases[i]["train_gt"], cases[i]["labels"]) for i in train_idx
            ]
            for loss_name, faces in cfg.variants:
                tag = _variant_tag(loss_name, faces)

                stage = f"train[{tag}/fold{fold}]"
                model = PatchDepthRegressor(
                    patch_radius=cfg.patch_radius,
                    hidden=tuple(cfg.hidden),
                    loss_variant=loss_name,
                    alpha=cfg.alpha,
                    lambda_var=cfg.lambda_var,
                    epsilon=cfg.loss_epsilon,
                    alignment_scope=cfg.alignment_scope,
                    faces=faces,
                    learning_rate=cfg.train_learning_rate,
                    epochs=cfg.train_epochs,
                    batch_scenes=cfg.train_batch_scenes,
                    seed=derive_seed(cfg.seed, f"train/{tag}/fold{fold}") % (2**32),
                )
                model.fit(train_data)
                save_regressor(
                    os.path.join(out_dir, "models", f"depth_{tag}_fold{fold}.rdnet"), model
                )
                train_curves[tag].append(
                    (float(model.loss_curve_[0]), float(model.loss_curve_[-1]))
                )

                stage = f"evaluate[{tag}/fold{fold}]"
                recon_dir = os.path.join(out_dir, "recon", tag)
                os.makedirs(recon_dir, exist_ok=True)
                fit_cfg = SsmFitConfig(
                    lambda_l2=cfg.ssm_lambda_l2,
                    clip_margin=cfg.ssm_clip_margin,
                    distance_mode="bidirectional" if faces == "dual" else "target_to_model",
                    lbfgs_max_iters=cfg.ssm_max_iters,
                    restarts=cfg.ssm_restarts,
                    seed=derive_seed(cfg.seed, f"ssm-fit/{tag}") % (2**32),
                )
                for i in test_idx:
                    case = cases[i]
                    pred = model.predict(case["image"], case["labels"])
                    fileio.write_depth_set(
                        os.path.join(recon_dir, f"scene_{i:02d}_pred.dmap"), pred, geom
                    )
                    cloud = backproject_set(geom, pred, faces="dual" if faces == "dual" else "front")
                    fileio.write_ply(os.path.join(recon_dir, f"scene_{i:02d}.ply"), cloud)
                    for oid in object_ids:
                        target = cloud.select(oid)
                        gt_surface = gt_surfaces[(i, oid)]
                        row = {
                            "variant": tag,
                            "loss": loss_name,
                            "faces": faces,
                            "fold": fold,
                            "scene": f"scene_{i:02d}",
                            "subgroup": case["subgroup"],
                            "object_id": oid,
                        }
                        recon = metrics_mod.surface_metrics(
                            target, gt_surface, emd_cap=cfg.emd_cap, seed=emd_seed
                        )
                        row.update(
                            {"assd": recon.assd, "hd95": recon.hd95, "emd": recon.emd, "cd_l2": recon.cd_l2}
                        )
                        _, completed, _ = fit_ssm(ssm_models[oid], target, fit_cfg)
                        comp = metrics_mod.surface_metrics(
                            completed, gt_surface, emd_cap=cfg.emd_cap, seed=emd_seed
                        )
                        row.update(
                            {
                                "completion_assd": comp.assd,
                                "completion_hd95": comp.hd95,
                                "completion_emd": comp.emd,
                                "completion_cd_l2": comp.cd_l2,
                            }
                        )
                        mae, rmse = metrics_mod.depth_errors(pred.front(oid), case["gt"].front(oid))
                        row.update({"front_mae": mae, "front_rmse": rmse})
                        if faces == "dual":
                            row["volume_est"] = metrics_mod.volume_from_thickness(pred, geom, oid)
                        else:
                            row["volume_est"] = float("nan")
                        row["volume_gt"] = metrics_mod.volume_from_thickness(case["gt"], geom, oid)
                        rows.append(row)

        stage = "summarize"
        variant_docs = []
        for loss_name, faces in cfg.variants:
            tag = _variant_tag(loss_name, faces)
            vrows = [r for r in rows if r["variant"] == tag]
            volume_pcc = {}
            if faces == "dual":
                for oid in object_ids:
                    orows = [r for r in vrows if r["object_id"] == oid]
                    if len(orows) >= 2:
                        volume_pcc[oid] = metrics_mod.pcc(
                            [r["volume_est"] for r in orows], [r["volume_gt"] for r in orows]
                        )
            variant_docs.append(
                {
                    "tag": tag,
                    "loss": loss_name,
                    "faces": faces,
                    "reconstruction": {
                        m: _aggregate(vrows, m) for m in ("assd", "hd95", "emd", "cd_l2")
                    },
                    "completion": {
                        m.replace("completion_", ""): _aggregate(vrows, m)
                        for m in ("completion_assd", "completion_hd95", "completion_emd", "completion_cd_l2")
                    },
                    "depth": {m: _aggregate(vrows, m) for m in ("front_mae", "front_rmse")},
                    "volume_pcc": volume_pcc,
                    "train_loss_per_fold": train_curves[tag],
                }
            )

        stage = "report"
        fieldnames = [
            "variant", "loss", "faces", "fold", "scene", "subgroup", "object_id",
            "assd", "hd95", "emd", "cd_l2",
            "completion_assd", "completion_hd95", "completion_emd", "completion_cd_l2",
            "front_mae", "front_rmse", "volume_est", "volume_gt",
        ]
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in fieldnames})
        summary = {
            "config": cfg.to_dict(),
            "object_ids": object_ids,
            "variants": variant_docs,
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, sort_keys=True, indent=2)
            f.write("\n")
        return summary
    except Exception as e:
        raise PipelineError(stage, e) from e


def _walk_numeric(doc, prefix=""):
    out = {}
    if isinstance(doc, dict):
        for k in doc:
            out.update(_walk_numeric(doc[k], f"{prefix}/{k}" if prefix else str(k)))
    elif isinstance(doc, (int, float)) and not isinstance(doc, bool):
        out[prefix] = float(doc)
    return out


def compare_report(a, b):
    """Per-metric deltas between two summary documents.

    Both summaries must expose the same variant tags and metric keys;
    delta is b - a, and since every reported metric is lower-is-better an
    improvement is a negative delta.
    """
    try:
        a_variants = {v["tag"]: v for v in a["variants"]}
        b_variants = {v["tag"]: v for v in b["variants"]}
    except (KeyError, TypeError) as e:
        raise ValueError(f"summary schema mismatch: {e}") from None
    if set(a_variants) != set(b_variants):
        raise ValueError("summaries report different variant sets")
    deltas = {}
    for tag in sorted(a_variants):
        va = _walk_numeric({k: a_variants[tag][k] for k in ("reconstruction", "completion", "depth")})
        vb = _walk_numeric({k: b_variants[tag][k] for k in ("reconstruction", "completion", "depth")})
        if set(va) != set(vb):
            raise ValueError(f"variant {tag!r}: metric schema mismatch")
        deltas[tag] = {
            key: {"a": va[key], "b": vb[key], "delta": vb[key] - va[key], "improved": vb[key] < va[key]}
            for key in sorted(va)
        }
    return deltas


def validate_files(paths):
    """Header and invariant checks for every supported artifact type.

    Returns one diagnostic dict per path: {path, kind, problems}.  Never
    raises on malformed content; problems are reported as strings.
    """
    results = []
    for path in paths:
        path = str(path)
        problems = []
        kind = "unknown"
        try:
            if not os.path.exists(path):
                problems.append("file does not exist")
            elif path.endswith(".dmap"):
                kind = "dmap"
                data, geom, object_ids, _ = fileio.read_dmap(path)
                c = data.shape[0]
                if object_ids and c == 2 * len(object_ids):
                    kind = "dmap/depth-set"
                    for k, oid in enumerate(object_ids):
                        front, back = data[2 * k], data[2 * k + 1]
                        if np.any(front[np.isfinite(front)] <= 0) or np.any(back[np.isfinite(back)] <= 0):
                            problems.append(f"object {oid!r}: non-positive valid depth")
                        both = np.isfinite(front) & np.isfinite(back)
                        n_bad = int(np.count_nonzero(both & (back < front)))
                        if n_bad:
                            problems.append(f"object {oid!r}: back >= front violated at {n_bad} pixel(s)")
                elif object_ids and c == len(object_ids):
                    kind = "dmap/label-mask"
                    finite = data[np.isfinite(data)]
                    if finite.size and not np.all(finite == 1.0):
                        problems.append("label channels must hold 1.0 or NaN")
                elif c == 1 and not object_ids:
                    kind = "dmap/image"
                    if not np.all(np.isfinite(data)):
                        problems.append("image contains non-finite pixels")
                else:
                    problems.append(
                        f"channel count {c} matches no layout for {len(object_ids)} object ids"
                    )
            elif path.endswith(".ply"):
                kind = "ply"
                fileio.read_ply(path)
            elif path.endswith(".rdssm"):
                kind = "shape-model"
                from .ssm import load_shape_model

                load_shape_model(path).validate(tol=1e-9)
            elif path.endswith(".rdnet"):
                kind = "depth-regressor"
                from .depthfit import load_regressor

                model = load_regressor(path)
                if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in model.params_):
                    problems.append("non-finite weights")
            elif path.endswith(".json"):
                kind = "json"
                with open(path) as f:
                    doc = json.load(f)
                if isinstance(doc, dict) and "objects" in doc and "geometry" in doc:
                    kind = "scene"
                    scene_from_json(json.dumps(doc))
            elif path.endswith(".csv"):
                kind = "csv"
                with open(path) as f:
                    if "," not in f.readline():
                        problems.append("missing CSV header row")
            else:
                problems.append("unrecognized file type")
        except Exception as e:  # diagnostics, never a crash
            problems.append(str(e))
        results.append({"path": str(path), "kind": kind, "problems": problems})
    return results
