"""Command-line surface tying the modules together.

One executable with subcommands; every error exits with a machine-parsable
"E:<code>:" line on stderr (1 usage, 2 data, 3 numerical). Commands taking
--seed are bit-reproducible, and all file outputs are written atomically.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import feature_eval, gradcheck, matching, rng, tensorio, toy, trajectory, water
from .errors import DataError, ToolkitError, UsageError
from .heads import detect_keypoints, detector_probability_map


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the toolkit error path."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="uft", description="Underwater feature training toolkit.")
    parser.add_argument("--config", help="JSON config file; flags override it")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="synthesize underwater images from RGBD frames")
    p.add_argument("--input", required=True, help="directory of NAME.ppm + NAME.depth.uft pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bounds", default=None, help="water parameter bounds JSON")
    p.add_argument("--noise-sigma", type=float, default=None)

    p = sub.add_parser("losses", help="distillation loss values and gradient")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--pkt-weight", type=float, default=None)
    p.add_argument("--cell-subsample", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference validation of all gradients")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("train-toy", help="train the desk-scale linear student")
    p.add_argument("--out", required=True, help="checkpoint + log directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--descriptor-dim", type=int, default=None)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--fixed-batch", action="store_true", default=None)

    p = sub.add_parser("match", help="mutual nearest-neighbour descriptor matching")
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-distance", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--record-bytes", type=int, default=32)

    p = sub.add_parser("eval-overlap", help="overlap detection rate, single pair or sweep")
    p.add_argument("--reference", help="reference keypoints CSV")
    p.add_argument("--detected", help="detected keypoints CSV")
    p.add_argument("--sweep", action="store_true", help="run a turbidity sweep")
    p.add_argument("--color", help="clear color image (PPM), sweep mode")
    p.add_argument("--depth", help="depth tensor file, sweep mode")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--beta-scale-max", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output CSV (default stdout)")

    p = sub.add_parser("eval-ate", help="trajectory alignment and error report")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--offset-range", type=float, default=0.0)
    p.add_argument("--offset-step", type=float, default=0.05)
    p.add_argument("--out", help="output JSON (default stdout)")

    sub.add_parser("config", help="print the reference configuration")
    return parser


def _seed_of(args, cfg: config_mod.RunConfig) -> int:
    return cfg.seed if getattr(args, "seed", None) is None else args.seed


def _cmd_synth(args, cfg: config_mod.RunConfig) -> int:
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    if not in_dir.is_dir():
        raise DataError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = cfg.scene()
    if args.noise_sigma is not None:
        scene = water.ScenePhysics(
            water_depth=scene.water_depth,
            surface_irradiance=scene.surface_irradiance,
            max_scene_depth=scene.max_scene_depth,
            noise_sigma=args.noise_sigma,
        )
    bounds_src = args.bounds if args.bounds else cfg.doc["water"]["bounds_path"]
    bounds = water.load_water_bounds(bounds_src) if bounds_src else water.default_jerlov_bounds()
    seed = _seed_of(args, cfg)
    frames = sorted(in_dir.glob("*.ppm"))
    frames = [f for f in frames if not f.name.endswith(".underwater.ppm")]
    if not frames:
        raise DataError(f"no .ppm frames found in {in_dir}")
    for k, ppm_path in enumerate(frames):
        stem = ppm_path.name[: -len(".ppm")]
        depth_path = in_dir / f"{stem}.depth.uft"
        if not depth_path.exists():
            raise DataError(f"missing depth tensor {depth_path}")
        color = tensorio.read_ppm(ppm_path)
        depth = tensorio.read_tensor(depth_path)
        if depth.ndim != 2:
            raise DataError(f"{depth_path}: depth must be rank 2, got rank {depth.ndim}")
        frame = water.RgbdFrame(color=color, depth=depth)
        frame_seed = rng.derive_seed(seed, k)
        params = water.sample_water_params(bounds, rng.derive_seed(frame_seed, 0))
        image = water.synthesize_underwater(
            frame, params, scene, rng.derive_seed(frame_seed, 1)
        )
        tensorio.write_ppm(out_dir / f"{stem}.underwater.ppm", image)
        provenance = {
            "source": ppm_path.name,
            "master_seed": seed,
            "frame_index": k,
            "frame_seed": frame_seed,
            "params": params.to_dict(),
            "scene": scene.to_dict(),
            "bounds": bounds_src or "packaged open-ocean defaults",
        }
        tensorio.atomic_write_text(
            out_dir / f"{stem}.json", json.dumps(provenance, indent=2) + "\n"
        )
    print(f"synthesized {len(frames)} frame(s) into {out_dir}")
    return 0


def _cmd_losses(args, cfg: config_mod.RunConfig) -> int:
    teacher = tensorio.read_tensor(args.teacher)
    student = tensorio.read_tensor(args.student)
    weights = cfg.weights()
    if args.pkt_weight is not None:
        weights = type(weights)(alpha=weights.alpha, pkt_weight=args.pkt_weight)
    subsample = args.cell_subsample if args.cell_subsample is not None else cfg.cell_subsample()
    from .losses import lp_loss

    result = lp_loss(
        teacher, student, weights, cell_subsample=subsample, seed=_seed_of(args, cfg)
    )
    prefix = Path(args.out_prefix)
    if prefix.parent != Path(""):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "kl": result.parts["kl"],
        "pkt": result.parts["pkt"],
        "pkt_weight": weights.pkt_weight,
        "lp": result.value,
    }
    tensorio.atomic_write_text(f"{prefix}.json", json.dumps(doc, indent=2) + "\n")
    tensorio.write_tensor(f"{prefix}.grad.uft", result.grad)
    print(f"kl={doc['kl']!r} pkt={doc['pkt']!r} lp={doc['lp']!r}")
    return 0


def _cmd_gradcheck(args, cfg: config_mod.RunConfig) -> int:
    results = gradcheck.run_all(
        instances=args.instances, seed=_seed_of(args, cfg), corrupt=args.corrupt
    )
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{r.name}: {r.instances} instances, max rel error {r.max_rel_error:.3e} "
            f"(tol {r.tolerance:.1e}): {status}"
        )
    gradcheck.require_all_pass(results)
    return 0


def _cmd_train_toy(args, cfg: config_mod.RunConfig) -> int:
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if args.descriptor_dim is not None:
        overrides["descriptor_dim"] = args.descriptor_dim
    if args.n_images is not None:
        overrides["n_images"] = args.n_images
    if args.fixed_batch:
        overrides["fixed_batch"] = True
    train_cfg = cfg.train_config(**overrides)
    result = toy.train(train_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = result.model
    tensorio.write_tensor(out_dir / "w_det.uft", model.w_det)
    tensorio.write_tensor(out_dir / "b_det.uft", model.b_det)
    tensorio.write_tensor(out_dir / "w_desc.uft", model.w_desc)
    tensorio.write_tensor(out_dir / "b_desc.uft", model.b_desc)
    tensorio.atomic_write_text(out_dir / "log.csv", toy.history_csv(result.history))
    first, last = result.history[0], result.history[-1]
    print(
        f"steps={train_cfg.steps} L_p {first.l_p!r} -> {last.l_p!r}, "
        f"L {first.total!r} -> {last.total!r}"
    )
    return 0


def _cmd_match(args, cfg: config_mod.RunConfig) -> int:
    desc_a = tensorio.read_descriptor_records(args.desc_a, record_bytes=args.record_bytes)
    desc_b = tensorio.read_descriptor_records(args.desc_b, record_bytes=args.record_bytes)
    pairs = matching.nn_match(
        desc_a, desc_b, max_distance=args.max_distance, ratio=args.ratio
    )
    lines = ["index_a,index_b,distance"]
    lines += [f"{ia},{ib},{d}" for ia, ib, d in pairs]
    tensorio.atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"{len(pairs)} match(es)")
    return 0


def _cmd_eval_overlap(args, cfg: config_mod.RunConfig) -> int:
    if args.sweep:
        if not args.color or not args.depth:
            raise UsageError("--sweep needs --color and --depth")
        color = tensorio.read_ppm(args.color)
        depth = tensorio.read_tensor(args.depth)
        frame = water.RgbdFrame(color=color, depth=depth)
        seed = _seed_of(args, cfg)
        bounds = cfg.bounds()
        params = water.sample_water_params(bounds, rng.derive_seed(seed, 0))
        rows = feature_eval.turbidity_sweep(
            frame,
            feature_eval.harris_detector(),
            params,
            cfg.scene(),
            steps=args.steps if args.steps is not None else cfg.sweep_steps(),
            beta_scale_max=(
                args.beta_scale_max
                if args.beta_scale_max is not None
                else cfg.beta_scale_max()
            ),
            seed=rng.derive_seed(seed, 1),
        )
        text = feature_eval.sweep_rows_csv(rows)
    else:
        if not args.reference or not args.detected:
            raise UsageError("need --reference and --detected (or --sweep)")
        reference = tensorio.read_keypoints_csv(args.reference)
        detected = tensorio.read_keypoints_csv(args.detected)
        report = feature_eval.overlap_rate(reference, detected)
        text = "P_R,P_c,R\n" + f"{report.p_ref},{report.p_overlap},{report.rate!r}\n"
    if args.out:
        tensorio.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_eval_ate(args, cfg: config_mod.RunConfig) -> int:
    est = trajectory.read_tum(args.est)
    gt = trajectory.read_tum(args.gt)
    result = trajectory.time_offset_search(
        est, gt, offset_range=args.offset_range, step=args.offset_step
    )
    text = trajectory.ate_report_json(result)
    if args.out:
        tensorio.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"ate {result.ate!r} m at offset {result.offset!r} s", file=sys.stderr)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "losses": _cmd_losses,
    "gradcheck": _cmd_gradcheck,
    "train-toy": _cmd_train_toy,
    "match": _cmd_match,
    "eval-overlap": _cmd_eval_overlap,
    "eval-ate": _cmd_eval_ate,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("no subcommand given (see --help)")
    config_mod.max_threads()  # validate the env knob before any work
    if args.command == "config":
        sys.stdout.write(config_mod.reference_json())
        return 0
    cfg = config_mod.load_config(args.config)
    return _COMMANDS[args.command](args, cfg)


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        return dispatch(list(argv))
    except ToolkitError as e:
        print(f"E:{e.exit_code}: {e}", file=sys.stderr)
        return e.exit_code
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
