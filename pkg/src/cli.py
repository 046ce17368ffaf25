# src/cli.py
"""
Command-line entry point.

    python main.py synth --config configs/desk.json --n 10 --out data
    python main.py skeletonize --volume v.json --out v.graph.json
    python main.py train --config configs/desk.json
    python main.py reconstruct --checkpoint runs/ipgn.json --volume v.json --out pred.json
    python main.py eval --pred pred.json --truth v.json
    python main.py baseline --encoders runs --truth v.json
    python main.py bench --checkpoint runs/ipgn.json --volumes a.json b.json
    python main.py gradcheck --config configs/desk.json

Failures print one JSON line {"error": code, "message": ...} to stderr;
exit status 2 for config errors, 1 otherwise.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import torch

from src.config import Config
from src.evalbench import (
    BenchCase,
    append_row,
    bench_reconstruction,
    evaluate_graph_baseline,
    evaluate_point_baseline,
    evaluate_volumes,
    write_report,
)
from src.implicit import export_csv, export_ply, label_lattice, reconstruct_dense
from src.nncore.gradcheck import grad_check
from src.nncore.store import ParameterStore
from src.run_config import RunConfig, load_run_config
from src.skeleton import build_graph, load_graph, save_graph
from src.synth import TreeSpec, generate_dataset, generate_tree, load_manifest
from src.train import (
    EncoderCheckpoints,
    TrainConfig,
    TreeSample,
    build_ipgn,
    load_ipgn,
    load_segmenter,
    loss_closure,
    make_batch,
    train_encoders,
    train_ipgn,
)
from src.utils.errors import ConfigError, GradCheckError, TrainingDivergedError, TreeLabelError
from src.utils.logger import logger
from src.utils.seeding import seed_torch
from src.volume import foreground_arrays, load_volume, save_volume


def _provenance(args: argparse.Namespace, cfg: RunConfig) -> dict:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return {"command": args.command, "flags": flags, "config": cfg.to_dict()}


def _out(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


# ================= COMMANDS =================

def cmd_synth(args, cfg: RunConfig) -> int:
    n = args.n if args.n is not None else cfg.paths.num_trees
    out_dir = _out(args, cfg.paths.data_dir)
    generate_dataset(n, cfg.seed, cfg.synth, out_dir)
    (out_dir / "provenance.json").write_text(json.dumps(_provenance(args, cfg), indent=2, sort_keys=True))
    return 0


def cmd_skeletonize(args, cfg: RunConfig) -> int:
    vol = load_volume(args.volume)
    graph = build_graph(vol)
    path = save_graph(graph, _out(args, str(Path(args.volume).with_suffix(".graph.json"))))
    logger.success(f"Skeleton graph: {graph.num_nodes} nodes, {graph.num_edges} edges -> {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.data or cfg.paths.data_dir)
    out_dir = _out(args, cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(_provenance(args, cfg), indent=2, sort_keys=True))
    try:
        encoders = train_encoders(manifest, cfg.train, cfg.encoder, cfg.num_classes, out_dir)
        train_ipgn(manifest, encoders, cfg.train, cfg.fusion, cfg.encoder, out_dir)
    except TrainingDivergedError as e:
        (out_dir / "divergence.json").write_text(json.dumps(e.report, indent=2, default=str))
        raise
    return 0


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    model = load_ipgn(args.checkpoint)
    vol = load_volume(args.volume)
    graph = load_graph(args.graph) if args.graph else None
    binary = vol.binary()
    pred = reconstruct_dense(binary, model, graph, cfg.train.num_points, cfg.seed)
    out = _out(args, "prediction.json")
    save_volume(pred, out)
    if args.ply:
        export_ply(pred, args.ply)
    if args.csv:
        export_csv(pred, vol if vol.data.max() > 1 else None, args.csv)
    if args.lattice:
        lattice = label_lattice(binary, model, graph, args.lattice, cfg.train.num_points, cfg.seed)
        save_volume(lattice, out.with_name(out.stem + "_lattice.json"))
    logger.success(f"✅ Reconstruction written: {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    pred = load_volume(args.pred)
    truth = load_volume(args.truth)
    pred_graph = load_graph(args.pred_graph) if args.pred_graph else None
    true_graph = load_graph(args.truth_graph) if args.truth_graph else None
    report = evaluate_volumes(pred, truth, cfg.eval, pred_graph, true_graph)
    write_report(report, _out(args, "."), "eval", _provenance(args, cfg))
    print(report.table().to_string(index=False))
    return 0


def cmd_baseline(args, cfg: RunConfig) -> int:
    truth = load_volume(args.truth)
    graph = load_graph(args.graph) if args.graph else build_graph(truth)
    encoders = EncoderCheckpoints(Path(args.encoders) / "point_encoder.json", Path(args.encoders) / "graph_encoder.json")
    out_dir = _out(args, ".")
    point = evaluate_point_baseline(load_segmenter(encoders.point), truth, graph, cfg.eval,
                                    cfg.train.num_points, cfg.seed)
    write_report(point, out_dir, "baseline_point", _provenance(args, cfg))
    graph_report = evaluate_graph_baseline(load_segmenter(encoders.graph), truth, graph, cfg.eval)
    write_report(graph_report, out_dir, "baseline_graph", _provenance(args, cfg))
    print(point.table().to_string(index=False))
    print(graph_report.table().to_string(index=False))
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    model = load_ipgn(args.checkpoint)
    cases = []
    for path in args.volumes:
        vol = load_volume(path)
        # graph extraction and I/O stay outside the timers
        graph = build_graph(vol.binary(), labeled=False)
        truth = vol if vol.data.max() > 1 else None
        cases.append(BenchCase(Path(path).stem, vol, graph, truth))
    report = bench_reconstruction(model, cases, cfg.train.num_points, cfg.eval.repeats, cfg.seed)
    out_dir = _out(args, ".")
    write_report(report, out_dir, "bench", _provenance(args, cfg))
    append_row(report.to_row(), out_dir / "bench.csv")
    print(report.table().to_string(index=False))
    return 0


def gradcheck_sample(cfg: RunConfig) -> TreeSample:
    """A small tree so every finite-difference check stays cheap."""
    spec = TreeSpec(**{**cfg.synth.to_dict(), "grid": 24, "depth": 2, "radius_range": [1.5, 2.0]})
    vol, _ = generate_tree(spec)
    graph = build_graph(vol)
    voxels, labels = foreground_arrays(vol)
    return TreeSample(0, vol, graph, graph.transform.to_normalized(voxels), labels)


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed_torch(cfg.seed, "gradcheck")
    sample = gradcheck_sample(cfg)
    small = TrainConfig(**{**cfg.train.to_dict(), "num_points": args.points, "num_implicit_points": args.points // 4})
    batch = make_batch(sample, small, 1)

    model = build_ipgn(cfg.fusion, cfg.encoder, cfg.train.stage_mask)
    model.pgn.unfreeze_encoders()
    store = ParameterStore(model).to_float64()
    report = grad_check(loss_closure(model, batch), store, tolerance=args.tolerance,
                        max_entries=args.entries, seed=cfg.seed)
    write_report(report, _out(args, "."), "gradcheck", _provenance(args, cfg))
    if not report.passed:
        raise GradCheckError(f"worst relative error {report.worst:.3e} exceeds {args.tolerance:.1e}")
    return 0


# ================= PARSER =================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Run config JSON (see configs/desk.json)")
    common.add_argument("--seed", type=int, default=None, help="Global seed; overrides the config file")
    common.add_argument("--threads", type=int, default=None,
                        help="Torch intra-op threads; 0 = all cores, 1 = deterministic reference mode")
    common.add_argument("--out", type=str, default=None, help="Output file or directory")

    p = argparse.ArgumentParser(prog="treelabel", description="Dense anatomical labeling of tree-shaped volumes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="Generate a synthetic labeled dataset")
    s.add_argument("--n", type=int, default=None, help="Number of trees (default: paths.num_trees)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("skeletonize", parents=[common], help="Thin a volume and write its skeleton graph")
    s.add_argument("--volume", type=str, required=True, help="Volume header (.json)")
    s.set_defaults(func=cmd_skeletonize)

    s = sub.add_parser("train", parents=[common], help="Pre-train encoders, then train the full model")
    s.add_argument("--data", type=str, default=None, help="Dataset directory (default: paths.data_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="Label every foreground voxel of a volume")
    s.add_argument("--checkpoint", type=str, required=True, help="Full model checkpoint (.json)")
    s.add_argument("--volume", type=str, required=True, help="Input volume; only its foreground is used")
    s.add_argument("--graph", type=str, default=None, help="Precomputed skeleton graph")
    s.add_argument("--ply", type=str, default=None, help="Also write a colored PLY point cloud")
    s.add_argument("--csv", type=str, default=None, help="Also write x,y,z,true,pred rows")
    s.add_argument("--lattice", type=int, default=0, help="Also label the bounding lattice with this step")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", parents=[common], help="Score a predicted volume against ground truth")
    s.add_argument("--pred", type=str, required=True)
    s.add_argument("--truth", type=str, required=True)
    s.add_argument("--pred-graph", type=str, default=None)
    s.add_argument("--truth-graph", type=str, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", parents=[common], help="Score the point-only and graph-only encoders")
    s.add_argument("--encoders", type=str, required=True, help="Directory holding the encoder checkpoints")
    s.add_argument("--truth", type=str, required=True)
    s.add_argument("--graph", type=str, default=None)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("bench", parents=[common], help="Time implicit vs repeated-inference reconstruction")
    s.add_argument("--checkpoint", type=str, required=True)
    s.add_argument("--volumes", type=str, nargs="+", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of the full loss")
    s.add_argument("--points", type=int, default=64, help="Points per sample")
    s.add_argument("--entries", type=int, default=4, help="Entries checked per parameter tensor")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _set_threads(threads: Optional[int]) -> None:
    n = Config.threads() if threads is None else threads
    if n < 0:
        raise ConfigError(f"--threads must be >= 0, got {n}")
    if n > 0:
        torch.set_num_threads(n)


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return status


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        Config.validate()
        _set_threads(args.threads)
        cfg = load_run_config(args.config, args.seed)
        logger.info(f"Running {args.command} seed={cfg.seed} threads={torch.get_num_threads()}")
        return args.func(args, cfg)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return _fail(e.code, str(e), 2)
    except TreeLabelError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail(e.code, str(e), 1)
    except FileNotFoundError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail("file_not_found", str(e), 1)
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail("io_error", str(e), 1)
    except ValueError as e:
        logger.exception(f"{args.command} failed on a bad value: {e}")
        return _fail("bad_value", str(e), 1)
