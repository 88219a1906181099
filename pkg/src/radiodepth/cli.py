"""Command-line interface.

Subcommands: phantom, loss, fit-direct, train, predict, reconstruct,
ssm-build, ssm-fit, metrics, pipeline, compare, validate.

Exit codes: 0 ok, 2 configuration/input error, 3 numeric failure,
4 validation failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import fileio
from .depthfit import (
    DepthInit,
    DivergenceError,
    FitConfig,
    PatchDepthRegressor,
    load_regressor,
    optimize_depth,
    save_regressor,
)
from .geometry import backproject_set, default_geometry
from .losses import ALIGNMENT_SCOPES, LossConfig, VARIANTS, evaluate_loss
from .metrics import surface_metrics
from .phantom import JitterParams, corresponded_surface_points, sample_scene
from .pipeline import (
    ConfigError,
    PipelineError,
    compare_report,
    read_scene_dir,
    run_pipeline,
    validate_files,
    write_scene_dir,
)
from .ssm import (
    SsmFitConfig,
    build_ssm,
    fit_ssm,
    generalized_procrustes,
    load_shape_model,
    save_shape_model,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VALIDATION = 4


def _add_loss_args(p):
    p.add_argument("--variant", choices=VARIANTS, default="casi_indep")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--lambda-var", type=float, default=0.85)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--alignment-scope", choices=ALIGNMENT_SCOPES, default="per_object")


def _loss_config(args):
    return LossConfig(
        alpha=args.alpha,
        lambda_var=args.lambda_var,
        epsilon=args.epsilon,
        variant=args.variant,
        alignment_scope=args.alignment_scope,
    )


def cmd_phantom(args):
    geom = default_geometry(args.size, args.pixel_spacing, args.sdd)
    jitter = JitterParams(args.jitter_translation, args.jitter_rotation, args.jitter_scale)
    scene = sample_scene(args.seed, args.template, jitter, deformed=args.deformed, geometry=geom)
    write_scene_dir(args.out, scene)
    print(f"wrote scene.json, gt.dmap, labels.dmap, xray.dmap to {args.out}")
    return EXIT_OK


def cmd_loss(args):
    pred = fileio.read_depth_set(args.pred)
    gt = fileio.read_depth_set(args.gt)
    result = evaluate_loss(pred, gt, _loss_config(args))
    if args.json:
        print(
            json.dumps(
                {
                    "value": result.value,
                    "per_map_values": result.per_map_values,
                    "T_per_map": result.valid_counts,
                },
                sort_keys=True,
            )
        )
    else:
        print(f"{args.variant}: {result.value:.9g}")
    return EXIT_OK


def cmd_fit_direct(args):
    gt = fileio.read_depth_set(args.gt)
    if args.init_constant is not None:
        init = DepthInit("constant", args.init_constant)
    else:
        init = DepthInit("gt_plus_noise", args.init_sigma)
    cfg = FitConfig(
        loss=_loss_config(args),
        max_iters=args.iters,
        learning_rate=args.lr,
        init=init,
        rng_seed=args.seed,
        convergence_tol=args.tol,
    )
    fitted, trace = optimize_depth(gt, cfg)
    fileio.write_depth_set(args.out, fitted, gt.geometry)
    if args.trace:
        with open(args.trace, "w") as f:
            f.write("iteration,loss\n")
            for i, v in enumerate(trace):
                f.write(f"{i},{v!r}\n")
    print(f"loss {trace[0]:.6g} -> {trace[-1]:.6g} in {len(trace) - 1} iterations")
    return EXIT_OK


def _load_training_scene(path):
    _, gt, labels, image, _ = read_scene_dir(path)
    return image, gt, labels


def cmd_train(args):
    scenes = [_load_training_scene(p) for p in args.scenes]
    hidden = tuple(int(x) for x in args.hidden.split(",") if x)
    model = PatchDepthRegressor(
        patch_radius=args.patch_radius,
        hidden=hidden,
        loss_variant=args.variant,
        alpha=args.alpha,
        lambda_var=args.lambda_var,
        epsilon=args.epsilon,
        alignment_scope=args.alignment_scope,
        faces=args.faces,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_scenes=args.batch,
        seed=args.seed,
    )
    model.fit(scenes)
    save_regressor(args.out, model)
    print(
        f"trained on {len(scenes)} scenes; loss {model.loss_curve_[0]:.6g} -> {model.loss_curve_[-1]:.6g}"
    )
    return EXIT_OK


def cmd_predict(args):
    model = load_regressor(args.model)
    image, geom = fileio.read_image(args.xray)
    labels, _ = fileio.read_label_mask(args.labels)
    pred = model.predict(image, labels)
    fileio.write_depth_set(args.out, pred, geom)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_reconstruct(args):
    dmset = fileio.read_depth_set(args.depth)
    cloud = backproject_set(dmset.geometry, dmset, faces=args.faces)
    if args.object:
        cloud = cloud.select(args.object)
    fileio.write_ply(args.out, cloud)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_ssm_build(args):
    scenes = [read_scene_dir(p)[0] for p in args.scenes]
    if any(s is None for s in scenes):
        raise ConfigError("every scene dir must contain scene.json")
    stacks = corresponded_surface_points(scenes, args.object_id, args.points, args.seed)
    aligned = generalized_procrustes(stacks)
    model = build_ssm(aligned, args.modes, object_id=args.object_id)
    save_shape_model(args.out, model)
    print(f"built model: {model.n_points} points, {model.n_modes} modes")
    return EXIT_OK


def cmd_ssm_fit(args):
    model = load_shape_model(args.model)
    target = fileio.read_ply(args.target)
    if args.object:
        target = target.select(args.object)
    cfg = SsmFitConfig(
        lambda_l2=args.lambda_l2,
        clip_margin=args.clip_margin,
        distance_mode=args.distance.replace("-", "_"),
        lbfgs_max_iters=args.max_iters,
        restarts=args.restarts,
        seed=args.seed,
    )
    theta, completed, report = fit_ssm(model, target, cfg)
    fileio.write_ply(args.out, completed)
    if args.report:
        with open(args.report, "w") as f:
            json.dump({"theta": theta.tolist(), **report}, f, sort_keys=True, indent=2)
    print(f"fit cost {report['cost']:.6g}; wrote {args.out}")
    return EXIT_OK


def cmd_metrics(args):
    pred = fileio.read_ply(args.pred)
    gt = fileio.read_ply(args.gt)
    if args.csv:
        if pred.object_ids is None or gt.object_ids is None:
            pairs = [("all", pred, gt)]
        else:
            shared = sorted(set(pred.object_ids) & set(gt.object_ids))
            pairs = [(oid, pred.select(oid), gt.select(oid)) for oid in shared]
        with open(args.csv, "w") as f:
            f.write("object_id,assd,hd95,emd,cd_l2\n")
            for oid, a, b in pairs:
                r = surface_metrics(a, b, emd_cap=args.emd_cap, seed=args.seed)
                f.write(f"{oid},{r.assd!r},{r.hd95!r},{r.emd!r},{r.cd_l2!r}\n")
        print(f"wrote {args.csv}")
        return EXIT_OK
    report = surface_metrics(pred, gt, emd_cap=args.emd_cap, seed=args.seed)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(
            f"assd {report.assd:.6g} mm, hd95 {report.hd95:.6g} mm, "
            f"emd {report.emd:.6g} mm, cd_l2 {report.cd_l2:.6g} mm^2"
        )
    return EXIT_OK


def cmd_pipeline(args):
    with open(args.config) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    threads = args.threads
    if threads is None:
        env = os.environ.get("RADIODEPTH_THREADS")
        threads = int(env) if env else None
    if args.deterministic:
        threads = 1
    if threads is not None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            threadpool_limits = None
        if threadpool_limits is not None:
            with threadpool_limits(limits=threads):
                run_pipeline(doc, args.out)
            print(f"pipeline finished; summary at {os.path.join(args.out, 'summary.json')}")
            return EXIT_OK
    run_pipeline(doc, args.out)
    print(f"pipeline finished; summary at {os.path.join(args.out, 'summary.json')}")
    return EXIT_OK


def cmd_compare(args):
    with open(args.a) as f:
        a = json.load(f)
    with open(args.b) as f:
        b = json.load(f)
    deltas = compare_report(a, b)
    if args.json:
        print(json.dumps(deltas, sort_keys=True, indent=2))
    else:
        for tag in deltas:
            for key, row in deltas[tag].items():
                if key.endswith("/mean"):
                    mark = "improved" if row["improved"] else "worse/equal"
                    print(f"{tag} {key}: {row['a']:.6g} -> {row['b']:.6g} ({mark})")
    return EXIT_OK


def cmd_validate(args):
    results = validate_files(args.paths)
    bad = 0
    for res in results:
        if res["problems"]:
            bad += 1
            print(f"FAIL {res['path']} [{res['kind']}]")
            for problem in res["problems"]:
                print(f"  - {problem}")
        else:
            print(f"ok   {res['path']} [{res['kind']}]")
    return EXIT_VALIDATION if bad else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="radiodepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic scene and its ground truth")
    p.add_argument("--template", choices=("hip-like", "random-blobs"), default="hip-like")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deformed", action="store_true")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--pixel-spacing", type=float, default=1.6)
    p.add_argument("--sdd", type=float, default=1000.0)
    p.add_argument("--jitter-translation", type=float, default=6.0)
    p.add_argument("--jitter-rotation", type=float, default=5.0)
    p.add_argument("--jitter-scale", type=float, default=0.06)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("loss", help="evaluate a loss between two depth-set files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    _add_loss_args(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("fit-direct", help="optimize per-pixel depths against a target set")
    p.add_argument("--gt", required=True)
    _add_loss_args(p)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--init-sigma", type=float, default=20.0)
    p.add_argument("--init-constant", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_fit_direct)

    p = sub.add_parser("train", help="train the patch depth regressor on scene dirs")
    p.add_argument("--scenes", nargs="+", required=True)
    _add_loss_args(p)
    p.add_argument("--faces", choices=("dual", "single"), default="dual")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--patch-radius", type=int, default=2)
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict depth maps for a radiograph")
    p.add_argument("--model", required=True)
    p.add_argument("--xray", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("reconstruct", help="back-project a depth-set file to a point cloud")
    p.add_argument("--depth", required=True)
    p.add_argument("--faces", choices=("dual", "front"), default="dual")
    p.add_argument("--object", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("ssm-build", help="build a shape model from corresponded scene surfaces")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--object-id", required=True)
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ssm_build)

    p = sub.add_parser("ssm-fit", help="complete a target cloud with a shape model")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--object", default=None)
    p.add_argument("--distance", choices=("bidirectional", "target-to-model"), default="bidirectional")
    p.add_argument("--lambda-l2", type=float, default=0.01)
    p.add_argument("--clip-margin", type=float, default=5.0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_ssm_fit)

    p = sub.add_parser("metrics", help="surface metrics between two PLY clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--emd-cap", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--csv", default=None, help="batch mode: one row per object id")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("pipeline", help="run the full experiment pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("compare", help="delta table between two summary JSON files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check artifact files for format and invariant violations")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, fileio.FileFormatError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, PipelineError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
