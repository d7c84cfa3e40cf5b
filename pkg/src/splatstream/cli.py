"""Command-line front end.

Subcommands cover the whole pipeline: ``demo`` writes a synthetic scene,
``build`` fits/scores/orders/encodes an asset, ``encode`` re-orders an
existing asset, ``rank`` recomputes importance, ``render`` draws a byte
prefix, ``stream-sim`` runs the bandwidth simulator, and ``stats`` prints
asset structure.  Settings come from an optional JSON config (unknown keys
rejected) with every CLI flag overriding the file.  All library errors
surface as a typed one-line message and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

import numpy as np

from . import codec, demo, session
from .errors import SplatError
from .fitter import FitConfig, SupervisionSet, fit
from .forest import Forest
from .growth import GrowthConfig
from .importance import StreamOrder, build_order, face_scores, write_ranking_csv
from .mesh import load_cameras, load_frames, load_mesh, read_ppm, write_ppm
from .session import BandwidthProfile, RegionMask, render_forest

CONFIG_KEYS = {
    "iterations",
    "optimizer",
    "learning_rates",
    "lambda_pos",
    "lambda_scale",
    "tau_pos",
    "tau_scale",
    "level_weights",
    "supervised_levels",
    "growth",
    "seed",
    "background",
    "threads",
    "mesh",
    "frames",
    "cameras",
    "references",
    "output",
    "ranking_out",
    "log_out",
    "frame_index",
}
LR_KEYS = {"beta", "delta_mu", "delta_scale", "delta_rot", "color", "opacity"}
GROWTH_KEYS = {
    "step_k",
    "epsilon",
    "max_level",
    "cap_schedule",
    "initial_cap",
    "normalize_by_views",
}


class CliError(SplatError):
    pass


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise CliError("config must be a JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    if "learning_rates" in data:
        bad = set(data["learning_rates"]) - LR_KEYS
        if bad:
            raise CliError(f"unknown learning_rates keys: {sorted(bad)}")
    if "growth" in data:
        bad = set(data["growth"]) - GROWTH_KEYS
        if bad:
            raise CliError(f"unknown growth keys: {sorted(bad)}")
    return data


def fit_config_from_dict(cfg: dict) -> FitConfig:
    lrs = cfg.get("learning_rates", {})
    growth = cfg.get("growth", {})
    defaults = FitConfig()
    return FitConfig(
        iterations=int(cfg.get("iterations", defaults.iterations)),
        optimizer=cfg.get("optimizer", defaults.optimizer),
        lr_beta=float(lrs.get("beta", defaults.lr_beta)),
        lr_delta_mu=float(lrs.get("delta_mu", defaults.lr_delta_mu)),
        lr_delta_scale=float(lrs.get("delta_scale", defaults.lr_delta_scale)),
        lr_delta_rot=float(lrs.get("delta_rot", defaults.lr_delta_rot)),
        lr_color=float(lrs.get("color", defaults.lr_color)),
        lr_opacity=float(lrs.get("opacity", defaults.lr_opacity)),
        lambda_pos=float(cfg.get("lambda_pos", defaults.lambda_pos)),
        lambda_scale=float(cfg.get("lambda_scale", defaults.lambda_scale)),
        tau_pos=float(cfg.get("tau_pos", defaults.tau_pos)),
        tau_scale=float(cfg.get("tau_scale", defaults.tau_scale)),
        level_weights=cfg.get("level_weights"),
        supervised_levels=cfg.get("supervised_levels", defaults.supervised_levels),
        growth=GrowthConfig(**{k: growth[k] for k in growth}),
        seed=int(cfg.get("seed", 0)),
        background=tuple(cfg.get("background", (0.0, 0.0, 0.0))),
        threads=int(cfg.get("threads", 1)),
    )


def _merged_config(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    for key in (
        "mesh",
        "frames",
        "cameras",
        "references",
        "output",
        "ranking_out",
        "log_out",
    ):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    for key in ("iterations", "seed", "threads", "frame_index"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _require(cfg: dict, key: str) -> str:
    if key not in cfg or cfg[key] is None:
        raise CliError(f"missing required input {key!r} (flag or config)")
    return cfg[key]


def _load_scene_inputs(cfg: dict):
    mesh, base = load_mesh(_require(cfg, "mesh"))
    frames = load_frames(_require(cfg, "frames"), mesh.vertex_count)
    cameras = load_cameras(_require(cfg, "cameras"))
    idx = int(cfg.get("frame_index", 0))
    if not 0 <= idx < len(frames):
        raise CliError(f"frame index {idx} out of range (have {len(frames)})")
    return mesh, base, frames, cameras, frames[idx]


def _load_references(path, cameras):
    ref_dir = Path(path)
    if not ref_dir.exists():
        raise CliError(f"references path {path} does not exist")
    files = sorted(ref_dir.glob("*.ppm")) if ref_dir.is_dir() else [ref_dir]
    if len(files) != len(cameras):
        raise CliError(
            f"found {len(files)} reference images for {len(cameras)} cameras"
        )
    return [read_ppm(f) for f in files]


# ----------------------------------------------------------------------
# subcommands


def cmd_demo(args) -> int:
    scene = demo.make_scene(
        seed=args.seed,
        size=args.size,
        num_cameras=args.num_cameras,
        texture=args.texture,
        frame_count=args.frames,
    )
    paths = demo.write_scene(args.out, scene, seed=args.seed)
    print(f"seed: {args.seed}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_build(args) -> int:
    cfg = _merged_config(args)
    mesh, _, _, cameras, frame = _load_scene_inputs(cfg)
    references = _load_references(_require(cfg, "references"), cameras)
    fit_cfg = fit_config_from_dict(cfg)
    out_path = _require(cfg, "output")

    forest = Forest(mesh, max_level=fit_cfg.growth.max_level)
    sup = SupervisionSet(cameras=cameras, references=references, frame=frame)
    log = fit(forest, sup, fit_cfg)
    scores = face_scores(forest, cameras, frame)
    for node in forest.nodes:
        node.importance = float(scores[node.node_id])
    order = build_order(forest, scores)
    with open(out_path, "wb") as fh:
        nbytes = codec.encode(forest, order, fh)
    if cfg.get("ranking_out"):
        write_ranking_csv(order, cfg["ranking_out"], seed=fit_cfg.seed)
    if cfg.get("log_out"):
        log.to_csv(cfg["log_out"])
    print(f"seed: {fit_cfg.seed}")
    print(f"asset: {out_path} ({nbytes} bytes)")
    print(f"nodes: {len(forest)} records: {len(order)}")
    return 0


def cmd_stats(args) -> int:
    data = Path(args.asset).read_bytes()
    header = codec.parse_header(data)
    expected = codec.asset_size(header.template_face_count, header.record_count)
    if expected != len(data):
        raise CliError(
            f"size model violated: {len(data)} bytes on disk, "
            f"12 + 56*{header.template_face_count} + 188*{header.record_count} "
            f"= {expected}"
        )
    hist: dict[int, int] = {0: header.template_face_count}
    start = codec.base_size(header.template_face_count)
    for k in range(header.record_count):
        off = start + k * codec.RECORD_SIZE
        level = data[off + 4]
        hist[level + 1] = hist.get(level + 1, 0) + 3
    print(f"file_size_bytes: {len(data)}")
    print(f"template_faces: {header.template_face_count}")
    print(f"records: {header.record_count}")
    print(f"nodes: {header.template_face_count + 3 * header.record_count}")
    for level in sorted(hist):
        print(f"level_{level}_nodes: {hist[level]}")
    return 0


def cmd_render(args) -> int:
    cfg = _merged_config(args)
    mesh, _, _, cameras, frame = _load_scene_inputs(cfg)
    if not 0 <= args.camera_index < len(cameras):
        raise CliError(f"camera index {args.camera_index} out of range")
    asset = Path(args.asset).read_bytes()
    header = codec.parse_header(asset)
    byte_count = session.prefix_byte_count(
        len(asset), header.template_face_count, args.prefix
    )
    state = codec.decode_prefix(asset[:byte_count], mesh)
    out = render_forest(
        state.forest, cameras[args.camera_index], frame, tuple(args.background)
    )
    write_ppm(args.out, out.image)
    if args.stats_out:
        from .renderer import write_render_stats_csv

        write_render_stats_csv(out, args.stats_out)
    print(f"wrote {args.out}")
    return 0


def cmd_rank(args) -> int:
    cfg = _merged_config(args)
    mesh, _, _, cameras, frame = _load_scene_inputs(cfg)
    asset = Path(args.asset).read_bytes()
    state = codec.decode_prefix(asset, mesh)
    scores = face_scores(state.forest, cameras, frame)
    order = build_order(state.forest, scores)
    if args.out:
        write_ranking_csv(order, args.out, seed=args.seed)
        print(f"wrote {args.out}")
    else:
        for idx, (pid, level, imp) in enumerate(order.records()):
            print(f"{idx},{pid},{level},{imp:.12g}")
    return 0


def cmd_encode(args) -> int:
    cfg = _merged_config(args)
    asset = Path(args.asset).read_bytes()
    if args.order == "importance":
        mesh, _, _, cameras, frame = _load_scene_inputs(cfg)
        state = codec.decode_prefix(asset, mesh)
        scores = face_scores(state.forest, cameras, frame)
        order = build_order(state.forest, scores)
    else:  # random within each level, level-major preserved
        mesh, _ = load_mesh(_require(cfg, "mesh"))
        state = codec.decode_prefix(asset, mesh)
        order = build_order(state.forest, np.zeros(len(state.forest)))
        order = shuffle_within_levels(order, args.seed)
    with open(args.out, "wb") as fh:
        nbytes = codec.encode(state.forest, order, fh)
    print(f"seed: {args.seed}")
    print(f"wrote {args.out} ({nbytes} bytes)")
    return 0


def shuffle_within_levels(order: StreamOrder, seed: int) -> StreamOrder:
    """Random permutation of records inside each level (level-major kept)."""
    rng = random.Random(seed)
    by_level: dict[int, list[tuple[int, float]]] = {}
    for pid, level, imp in order.records():
        by_level.setdefault(level, []).append((pid, imp))
    parent_ids, levels, importances = [], [], []
    for level in sorted(by_level):
        group = by_level[level][:]
        rng.shuffle(group)
        for pid, imp in group:
            parent_ids.append(pid)
            levels.append(level)
            importances.append(imp)
    return StreamOrder(parent_ids=parent_ids, levels=levels, importances=importances)


def _parse_mask(text: str | None) -> RegionMask | None:
    if not text:
        return None
    return RegionMask(face_ids=frozenset(int(t) for t in text.split(",") if t.strip()))


def cmd_stream_sim(args) -> int:
    cfg = _merged_config(args)
    mesh, _, _, cameras, frame = _load_scene_inputs(cfg)
    asset = Path(args.asset).read_bytes()
    if args.segments:
        segments = []
        for part in args.segments.split(","):
            dur, byts = part.split(":")
            segments.append((float(dur), int(byts)))
        profile = BandwidthProfile.from_segments(segments)
    elif args.bandwidth is not None:
        tick_s = args.tick_ms / 1e3
        profile = BandwidthProfile.constant(
            int(round(args.bandwidth * tick_s)), tick_s
        )
    else:
        raise CliError("need --bandwidth or --segments")
    metrics = session.run_session(
        asset,
        profile,
        cameras,
        frame,
        mesh,
        mask=_parse_mask(args.mask),
        background=tuple(args.background),
        dump_dir=args.dump_images,
    )
    if args.metrics_out:
        metrics.to_csv(args.metrics_out)
        print(f"wrote {args.metrics_out} ({len(metrics.rows)} checkpoints)")
    else:
        print("bytes,records,nodes,l1,psnr,ms")
        for row in metrics.rows:
            print(
                f"{row['bytes']},{row['records']},{row['nodes']},"
                f"{row['l1']:.12g},{row['psnr']:.6g},{row['ms']:.3f}"
            )
    return 0


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstream",
        description="Progressive mesh-anchored Gaussian splat assets: "
        "build, rank, stream, and render.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="generate the synthetic demo scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--num-cameras", type=int, default=8)
    p.add_argument("--texture", choices=sorted(demo.TEXTURES), default="checker")
    p.add_argument("--frames", type=int, default=3)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser(
        "build",
        help="fit, rank, and encode an asset",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "config keys (JSON) and defaults:\n"
            "  iterations=400  optimizer=gd|adam  seed=0  threads=1\n"
            "  learning_rates: beta=1e-2 delta_mu=5e-3 delta_scale=2e-2\n"
            "                  delta_rot=1e-3 color=2.5e-3 opacity=5e-2\n"
            "  lambda_pos=0.01  lambda_scale=1.0  tau_pos=1.0  tau_scale=0.6\n"
            "  level_weights=null (uniform)  supervised_levels=all|finest\n"
            "  growth: step_k=50 epsilon=2e-4 max_level=4 cap_schedule=500\n"
            "          initial_cap=1 normalize_by_views=true\n"
            "  background=[0,0,0]  frame_index=0\n"
            "plus paths: mesh frames cameras references output ranking_out\n"
            "log_out.  Every flag overrides its config key."
        ),
    )
    p.add_argument("--config", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--cameras", default=None)
    p.add_argument("--references", "--refs", dest="references", default=None)
    p.add_argument("--out", dest="output", default=None)
    p.add_argument("--ranking-out", dest="ranking_out", default=None)
    p.add_argument("--log-out", dest="log_out", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--frame-index", type=int, default=None)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("stats", help="print asset structure and verify size")
    p.add_argument("--asset", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("render", help="render a byte-prefix of an asset")
    p.add_argument("--asset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--cameras", default=None)
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--frame-index", type=int, default=None)
    p.add_argument("--prefix", type=float, default=1.0)
    p.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--out", required=True)
    p.add_argument("--stats-out", default=None, help="per-splat contribution CSV")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("rank", help="recompute importance ranking of an asset")
    p.add_argument("--asset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--cameras", default=None)
    p.add_argument("--frame-index", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("encode", help="re-encode an asset in a new stream order")
    p.add_argument("--asset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", choices=["importance", "random"], default="importance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--cameras", default=None)
    p.add_argument("--frame-index", type=int, default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("stream-sim", help="simulate bandwidth-budgeted streaming")
    p.add_argument("--asset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--cameras", default=None)
    p.add_argument("--frame-index", type=int, default=None)
    p.add_argument("--bandwidth", type=float, default=None, help="bytes per second")
    p.add_argument("--tick-ms", type=float, default=1000.0)
    p.add_argument("--segments", default=None, help="comma list of dur_s:bytes")
    p.add_argument("--mask", default=None, help="comma list of template face ids")
    p.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--metrics-out", default=None)
    p.add_argument("--dump-images", default=None)
    p.set_defaults(func=cmd_stream_sim)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SplatError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
