"""Command-line pipeline: synth | train | embed | match | eval | ablate.

Every run logs the seed in play, a hash of the resolved configuration,
and a hash of each input file, so two runs with identical logs produce
identical outputs.  Report-producing commands (train, eval, ablate)
render a companion PNG figure next to the delimited output.

Exit codes: 0 success, 2 missing input or invalid configuration, 1
internal failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import (
    DEFAULT_TOPOLOGY,
    Topology,
    center_on_root,
    load_dataset,
    load_topology,
    segment_video,
    write_dataset,
)
from .encoder import load_encoder, save_encoder
from .evaluation import (
    ProtocolConfig,
    evaluate,
    format_report_text,
    run_ablation,
    write_report_csv,
)
from .matching import (
    MatchOptions,
    embed_segments,
    match_video,
    read_embeddings,
    write_embeddings,
)
from .report import save_ablation_figure, save_cmc_figure, save_loss_figure
from .synth import benchmark_split, generate_dataset
from .train import TrainConfig, train, write_loss_history

log = logging.getLogger("skelid")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(2, f"missing input file: {path}")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _log_provenance(command: str, settings: dict, inputs: list[Path], seed=None):
    canon = json.dumps(settings, sort_keys=True, default=str).encode()
    log.info("command=%s version=%s", command, __version__)
    log.info("seed=%s", "n/a" if seed is None else seed)
    log.info("config sha256=%s", hashlib.sha256(canon).hexdigest())
    for p in inputs:
        log.info("input %s sha256=%s", p, _sha256(p))


def _topology(args) -> Topology:
    if getattr(args, "topology", None):
        return load_topology(_require_file(args.topology))
    return DEFAULT_TOPOLOGY


def _load_segments(path: Path, topo: Topology, args):
    videos = load_dataset(path, topo=topo)
    if not args.no_center:
        videos = [center_on_root(v, topo) for v in videos]
    segs = []
    for v in videos:
        segs.extend(segment_video(v, k=args.window, stride=args.stride))
    return segs


def _match_options(args) -> MatchOptions:
    return MatchOptions(
        rerank=not args.no_rerank,
        vote=args.vote,
        k1=args.k1,
        k2=args.k2,
        lam=args.lam,
        borda_k=args.borda_k,
    )


def _figure_path(args, csv_path: str) -> Path | None:
    if args.no_figure:
        return None
    if args.figure:
        return Path(args.figure)
    return Path(csv_path).with_suffix(".png")


def cmd_synth(args) -> int:
    try:
        _log_provenance("synth", vars(args), [], seed=args.seed)
        videos = generate_dataset(
            seed=args.seed,
            num_identities=args.identities,
            clothes_per_identity=args.clothes,
            videos_per_clothes=args.videos,
            min_frames=args.min_frames,
            max_frames=args.max_frames,
            noise_level=args.noise,
            num_cameras=args.cameras,
        )
    except ValueError as exc:
        raise CommandError(2, f"invalid generator configuration: {exc}")
    write_dataset(videos, args.out)
    log.info("wrote %d videos to %s", len(videos), args.out)
    if args.split_dir:
        split_dir = Path(args.split_dir)
        split_dir.mkdir(parents=True, exist_ok=True)
        train_v, query_v, gallery_v = benchmark_split(videos, args.videos)
        for name, block in (("train", train_v), ("query", query_v), ("gallery", gallery_v)):
            out = split_dir / f"{name}.jsonl"
            write_dataset(block, out)
            log.info("wrote %d %s videos to %s", len(block), name, out)
    return 0


def _build_train_config(args) -> TrainConfig:
    obj: dict = {}
    if args.config:
        cfg_path = _require_file(args.config)
        try:
            obj = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise CommandError(2, f"config {args.config}: not valid JSON: {exc}")
        if not isinstance(obj, dict):
            raise CommandError(2, f"config {args.config}: top level must be an object")
    for key in ("epochs", "margin", "p_identities", "q_segments", "seed"):
        value = getattr(args, key)
        if value is not None:
            obj[key] = value
    if args.channels is not None:
        try:
            obj["channels"] = [int(c) for c in args.channels.split(",")]
        except ValueError:
            raise CommandError(2, f"bad --channels value: {args.channels!r}")
    try:
        return TrainConfig.from_dict(obj)
    except (ValueError, TypeError) as exc:
        raise CommandError(2, f"invalid training configuration: {exc}")


def cmd_train(args) -> int:
    data = _require_file(args.data)
    cfg = _build_train_config(args)
    settings = dict(vars(args), resolved_config=cfg.to_dict())
    _log_provenance("train", settings, [data], seed=cfg.seed)
    topo = _topology(args)
    segs = _load_segments(data, topo, args)
    log.info("training on %d segments from %s", len(segs), data)
    try:
        enc, history = train(segs, topo, cfg, log=log.info)
    except ValueError as exc:
        raise CommandError(2, f"training setup rejected: {exc}")
    meta = {
        "train_config": cfg.to_dict(),
        "window": args.window,
        "stride": args.stride,
        "centered": not args.no_center,
    }
    save_encoder(enc, args.out, extra_meta=meta)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_history(history, loss_csv)
    log.info("checkpoint %s, loss history %s", args.out, loss_csv)
    fig = None if args.no_figure else (
        Path(args.figure) if args.figure else Path(loss_csv).with_suffix(".png")
    )
    if fig is not None:
        save_loss_figure(history, fig)
        log.info("loss figure %s", fig)
    return 0


def cmd_embed(args) -> int:
    data = _require_file(args.data)
    ckpt = _require_file(args.checkpoint)
    _log_provenance("embed", vars(args), [data, ckpt])
    try:
        enc, _ = load_encoder(ckpt)
    except ValueError as exc:
        raise CommandError(2, f"bad checkpoint {args.checkpoint}: {exc}")
    topo = enc.topology
    segs = _load_segments(data, topo, args)
    es = embed_segments(segs, enc)
    write_embeddings(es, args.out)
    log.info("wrote %d embeddings to %s", len(es), args.out)
    return 0


def _read_embedding_file(path: str):
    p = _require_file(path)
    try:
        return read_embeddings(p)
    except ValueError as exc:
        raise CommandError(2, f"bad embedding file {path}: {exc}")


def cmd_match(args) -> int:
    q_set = _read_embedding_file(args.query)
    g_set = _read_embedding_file(args.gallery)
    try:
        opts = _match_options(args)
    except ValueError as exc:
        raise CommandError(2, f"invalid match options: {exc}")
    _log_provenance("match", vars(args), [Path(args.query), Path(args.gallery)])
    groups = q_set.by_video()
    if args.video is not None:
        if args.video not in groups:
            raise CommandError(2, f"query video {args.video!r} not in {args.query}")
        groups = {args.video: groups[args.video]}
    person_of = {e.segment_id: e.person_id for e in g_set.entries}
    import csv as _csv

    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["video_id", "position", "gallery_segment_id", "gallery_person_id"])
        for vid in sorted(groups):
            result = match_video(groups[vid], g_set, opts)
            log.info("video %s -> %s", vid, result.order[0])
            for pos, sid in enumerate(result.sample_order, start=1):
                writer.writerow([vid, pos, sid, person_of[sid]])
    log.info("wrote rankings for %d videos to %s", len(groups), args.out)
    return 0


def _protocols(args) -> list[ProtocolConfig]:
    modes = {"cc": ["CC"], "standard": ["Standard"], "both": ["CC", "Standard"]}
    return [
        ProtocolConfig(mode=m, camera_filter=args.camera_filter)
        for m in modes[args.protocol]
    ]


def cmd_eval(args) -> int:
    q_set = _read_embedding_file(args.query)
    g_set = _read_embedding_file(args.gallery)
    try:
        opts = _match_options(args)
        protocols = _protocols(args)
    except ValueError as exc:
        raise CommandError(2, f"invalid evaluation options: {exc}")
    _log_provenance("eval", vars(args), [Path(args.query), Path(args.gallery)])
    reports = [evaluate(q_set, g_set, opts, proto) for proto in protocols]
    write_report_csv(reports, args.out_csv)
    text = format_report_text(reports)
    out_text = args.out_text or str(Path(args.out_csv).with_suffix(".txt"))
    Path(out_text).write_text(text + "\n")
    print(text)
    fig = _figure_path(args, args.out_csv)
    if fig is not None:
        save_cmc_figure(reports, fig)
        log.info("CMC figure %s", fig)
    log.info("report %s, table %s", args.out_csv, out_text)
    return 0


def cmd_ablate(args) -> int:
    q_set = _read_embedding_file(args.query)
    g_set = _read_embedding_file(args.gallery)
    try:
        base = _match_options(args)
        protocols = _protocols(args)
    except ValueError as exc:
        raise CommandError(2, f"invalid ablation options: {exc}")
    _log_provenance("ablate", vars(args), [Path(args.query), Path(args.gallery)])
    reports = []
    for proto in protocols:
        reports.extend(run_ablation(q_set, g_set, proto, base))
    write_report_csv(reports, args.out_csv)
    text = format_report_text(reports)
    out_text = args.out_text or str(Path(args.out_csv).with_suffix(".txt"))
    Path(out_text).write_text(text + "\n")
    print(text)
    fig = _figure_path(args, args.out_csv)
    if fig is not None:
        save_ablation_figure(reports, fig)
        log.info("ablation figure %s", fig)
    log.info("ablation grid %s, table %s", args.out_csv, out_text)
    return 0


def _add_segmentation_flags(p: argparse.ArgumentParser):
    p.add_argument("--window", type=int, default=50, help="segment length in frames")
    p.add_argument("--stride", type=int, default=25, help="segment stride in frames")
    p.add_argument("--no-center", action="store_true",
                   help="skip centering joints on the root")


def _add_match_flags(p: argparse.ArgumentParser):
    p.add_argument("--no-rerank", action="store_true", help="disable k-reciprocal re-ranking")
    p.add_argument("--vote", choices=["dowdall", "borda", "none"], default="dowdall")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lam", type=float, default=0.3)
    p.add_argument("--borda-k", type=int, default=None)


def _add_report_flags(p: argparse.ArgumentParser):
    p.add_argument("--out-csv", required=True, help="report CSV path")
    p.add_argument("--out-text", default=None,
                   help="aligned text table path (default: CSV path with .txt)")
    p.add_argument("--figure", default=None,
                   help="figure path (default: CSV path with .png)")
    p.add_argument("--no-figure", action="store_true", help="skip the figure")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelid",
        description="Skeleton-based clothes-changing person re-identification pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"skelid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic gait dataset")
    p.add_argument("--out", required=True, help="dataset JSON Lines path")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--clothes", type=int, default=2)
    p.add_argument("--videos", type=int, default=4, help="videos per (identity, clothes)")
    p.add_argument("--min-frames", type=int, default=60)
    p.add_argument("--max-frames", type=int, default=160)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--split-dir", default=None,
                   help="also write train/query/gallery splits into this directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the two-stream encoder")
    p.add_argument("--data", required=True, help="training dataset JSON Lines")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="JSON training config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--p-identities", type=int, default=None)
    p.add_argument("--q-segments", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--channels", default=None, help="comma-separated, e.g. 4,16,32")
    p.add_argument("--topology", default=None, help="topology JSON (default: built-in)")
    p.add_argument("--loss-csv", default=None,
                   help="loss history CSV (default: checkpoint path with .loss.csv)")
    p.add_argument("--figure", default=None,
                   help="loss figure path (default: loss CSV with .png)")
    p.add_argument("--no-figure", action="store_true")
    _add_segmentation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="encode a dataset with a trained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="embeddings JSON Lines path")
    _add_segmentation_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("match", help="rank gallery segments for query videos")
    p.add_argument("--query", required=True, help="query embeddings file")
    p.add_argument("--gallery", required=True, help="gallery embeddings file")
    p.add_argument("--out", required=True, help="ranking CSV path")
    p.add_argument("--video", default=None, help="restrict to one query video id")
    _add_match_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="CMC and mAP under a protocol")
    p.add_argument("--query", required=True, help="query embeddings file")
    p.add_argument("--gallery", required=True, help="gallery embeddings file")
    p.add_argument("--protocol", choices=["cc", "standard", "both"], default="cc")
    p.add_argument("--camera-filter", action="store_true",
                   help="discard same-person same-camera gallery samples")
    _add_match_flags(p)
    _add_report_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="re-ranking x re-voting configuration grid")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--protocol", choices=["cc", "standard", "both"], default="cc")
    p.add_argument("--camera-filter", action="store_true")
    _add_match_flags(p)
    _add_report_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO, stream=sys.stderr,
            format="%(levelname)s %(name)s: %(message)s",
        )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CommandError as exc:
        log.error("%s", exc)
        return exc.code
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
