"""``kvq`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numerical abort.
"""

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import kvqt
from . import tensor as T
from .config import RunConfig, with_seed
from .data import (
    SynthConfig,
    replicate_image,
    synth_dataset,
    synth_lpvq,
    write_dataset,
    write_lpvq_dataset,
)
from .errors import KVQError
from .evaluate import evaluate_path, write_report
from .export import export_map
from .fwa import write_routing_csv
from .lpc import patchwise_texture, slice_patches
from .train import NumericalAbort, config_from_checkpoint, load_model, prepare_video, save_model, train, write_json

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

CHECKPOINT_NAME = "model.kvqt"


class UsageError(KVQError):
    """Missing or inconsistent command-line arguments."""


def _overrides(pairs: Optional[List[str]]) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _run_config(args) -> RunConfig:
    """Config from ``--config`` or the checkpoint manifest, then ``--set`` and ``--seed``."""
    overrides = _overrides(args.set)
    if args.config:
        cfg = RunConfig.load(args.config, overrides)
    elif getattr(args, "checkpoint", None):
        cfg = config_from_checkpoint(args.checkpoint)
        if overrides:
            cfg = cfg.with_overrides(**overrides)
    else:
        cfg = RunConfig.from_mapping(overrides)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _out_dir(args, cfg: Optional[RunConfig] = None) -> str:
    out = args.out or (cfg.out_dir if cfg else "")
    if not out:
        raise UsageError("an output directory is required (--out DIR)")
    os.makedirs(out, exist_ok=True)
    return out


def _tag(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.data:
        cfg = cfg.with_overrides(**{"data.train": args.data})
    cfg.validate_paths()
    out = _out_dir(args, cfg)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    result = train(cfg, log_path=os.path.join(out, "train_log.jsonl"))
    checkpoint = os.path.join(out, CHECKPOINT_NAME)
    save_model(result.model, checkpoint, cfg)
    metrics = dict(result.final_metrics, parameters=result.model.num_parameters())
    write_json(os.path.join(out, "metrics.json"), metrics)
    print(json.dumps(metrics, sort_keys=True))
    print(f"checkpoint written to {checkpoint}")
    return EXIT_OK


def _require_checkpoint(args) -> None:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")


def cmd_eval(args) -> int:
    _require_checkpoint(args)
    if not args.data or not os.path.isdir(args.data):
        raise UsageError("--data must name a dataset directory")
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    with T.default_dtype(cfg.np_dtype):
        model = load_model(args.checkpoint, cfg)
        metrics, samples = evaluate_path(model, args.data, cfg.batch_size)
    write_report(out, os.path.basename(os.path.normpath(args.data)), metrics, samples, _tag(cfg))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def load_input(path: str) -> np.ndarray:
    """A ``[T, H, W, 3]`` clip or ``[H, W, 3]`` image from a KVQT file or a clip directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "video.kvqt")
    if not os.path.exists(path):
        raise UsageError(f"input not found: {path}")
    array = kvqt.load(path).astype(np.float64)
    if array.ndim == 3 and array.shape[-1] == 3:
        return replicate_image(array, 16)
    if array.ndim == 4 and array.shape[-1] == 3:
        return array
    raise UsageError(f"input must be [H, W, 3] or [T, H, W, 3], got {array.shape}")


def cmd_maps(args) -> int:
    _require_checkpoint(args)
    if not args.data:
        raise UsageError("--data must name an input clip or image")
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    video = load_input(args.data)
    with T.default_dtype(cfg.np_dtype):
        model = load_model(args.checkpoint, cfg)
        batch = prepare_video(video, cfg.backbone.input_size)[None].astype(cfg.np_dtype)
        with T.no_grad():
            result = model(batch)
            patch = patchwise_texture(model, slice_patches(batch, cfg.backbone.output_stride))
    saliency, texture, patch_tex = result.saliency.data[0], result.texture.data[0], patch.data[0]
    export_map(out, "saliency", saliency)
    export_map(out, "texture", texture)
    export_map(out, "patch_texture", patch_tex)
    export_map(out, "texture_gap", np.abs(texture - patch_tex))
    write_routing_csv(os.path.join(out, "routing.csv"), result.bundles)
    summary = dict(quality=float(result.quality.data[0]), grid=list(texture.shape), **_tag(cfg))
    write_json(os.path.join(out, "maps.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_check(args) -> int:
    from .check import format_results, run_all

    results = run_all(seeds=range(args.seeds))
    for line in format_results(results):
        print(line)
    return EXIT_OK if all(not s.failed for s in results) else EXIT_VERIFY


def cmd_synth(args) -> int:
    """Write a synthetic clip directory, or a region-annotated image set with ``--images``."""
    if not args.out:
        raise UsageError("--out is required")
    seed = 0 if args.seed is None else args.seed
    if args.images:
        images, records, _ = synth_lpvq(args.images, seed)
        write_lpvq_dataset(args.out, images, records)
        print(f"wrote {len(images)} annotated images to {args.out}")
        return EXIT_OK
    cfg = _run_config(args)
    t, h, w = cfg.backbone.input_size
    synth = SynthConfig(frames=t, height=h, width=w, cell=cfg.backbone.output_stride, spread=cfg.spread)
    write_dataset(args.out, synth_dataset(args.clips, seed, synth))
    print(f"wrote {args.clips} clips to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "maps": cmd_maps, "check": cmd_check, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvq", description="Saliency-weighted video quality model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--data", metavar="PATH", help="dataset directory or input file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (.kvqt)")

    common(sub.add_parser("train", help="train a model"))
    common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"), checkpoint=True)
    common(sub.add_parser("maps", help="export saliency and texture maps for one input"), checkpoint=True)
    check = sub.add_parser("check", help="run gradient, attention and metric verification suites")
    check.add_argument("--seeds", type=int, default=100, metavar="N", help="gradient-check seeds")
    synth = sub.add_parser("synth", help="write a synthetic dataset")
    common(synth)
    synth.add_argument("--clips", type=int, default=16, metavar="N")
    synth.add_argument("--images", type=int, default=0, metavar="N", help="write N region-annotated images instead")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KVQError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
