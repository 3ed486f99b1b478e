"""``laanet`` command line: train, eval, infer, ablate-channels, synth-check, export-synth."""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np
import torch
import yaml

from . import checks
from .channels import ChannelSpec
from .data import (LAYOUTS, DatasetSpec, _crop_array, crop_geometry, export_synthetic_triplet, iter_triplets,
                   load_rgb, load_split, save_depth_png, write_intrinsics)
from .losses import ATTENUATION_KINDS
from .metrics import DEPTH_CAPS, EvaluationError, format_table
from .synth import make_triplet
from .train import (ConfigError, Corpus, SyntheticCorpus, TrainConfig, check_config, evaluate, load_checkpoint,
                    predict_depth, train, write_manifest)

log = logging.getLogger("laanet")

ABLATION_SPECS = ("R", "G", "B", "BR", "GR", "BG", "RGB")
EVAL_SEED_OFFSET = 1_000_000


def read_config_file(path):
    """Flat ``key: value`` file mirroring TrainConfig field names."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"{path}: values must be scalars (offending keys: {', '.join(map(str, nested))})")
    return data


def build_config(args) -> TrainConfig:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "channel_spec": getattr(args, "channels", None),
        "max_depth_m": getattr(args, "max_depth", None),
        "attenuation_kind": getattr(args, "attenuation", None),
        "seed": getattr(args, "seed", None),
        "steps": getattr(args, "steps", None),
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_la", False):
        raw["use_la"] = False
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    check_config(cfg)
    return cfg


def default_out(cmd):
    return os.path.join("runs", f"{cmd}_{time.strftime('%Y%m%d_%H%M%S')}")


def load_corpus(args, cfg: TrainConfig, split="train"):
    """In-memory corpus: generated synthetic scenes, or a split file on disk."""
    if args.data is None:
        if args.layout != "synthetic":
            raise ConfigError(f"--data is required for layout {args.layout!r}")
        n = cfg.n_train_scenes if split == "train" else cfg.n_eval_scenes
        seed = cfg.data_seed + (0 if split == "train" else EVAL_SEED_OFFSET)
        return SyntheticCorpus(n, seed, cfg.image_size, cfg.scatter_noise)
    spec = DatasetSpec(args.data, args.layout, split_file=args.split)
    descs = load_split(spec)
    log.info("loading %d triplets from %s", len(descs), args.data)
    return Corpus.from_triplets(iter_triplets(descs, workers=args.workers))


def cmd_train(args):
    cfg = build_config(args)
    out = args.out or default_out("train")
    corpus = load_corpus(args, cfg, "train")
    res = train(cfg, corpus, out_dir=out, resume=args.resume, progress=args.log_every)
    last = res.history[-1] if res.history else {}
    print(f"trained to step {res.step}; final L_p {last.get('L_p', float('nan')):.4f} "
          f"L_2 {last.get('L_2', float('nan')):.4f}; checkpoint {res.checkpoint}")
    return 0


def _eval_corpus(args, cfg):
    corpus = load_corpus(args, cfg, "eval")
    if corpus.depth_gt is None:
        raise EvaluationError("evaluation needs ground-truth depth for every frame; none found in the dataset")
    return corpus


def cmd_eval(args):
    model, cfg, ckpt = load_checkpoint(args.checkpoint)
    if args.channels is not None and ChannelSpec.parse(args.channels) != ChannelSpec.parse(cfg.channel_spec):
        raise ConfigError(f"--channels {args.channels} does not match the checkpoint's channel spec "
                          f"{cfg.channel_spec}")
    corpus = _eval_corpus(args, cfg)
    caps = args.cap or [cfg.cap_m]
    reports = evaluate(model, cfg, corpus.targets, corpus.depth_gt, caps, median_scaling=not args.no_median_scaling)
    rows = [(f"cap {c:g}m", reports[c]) for c in caps]
    print(format_table(rows, label_header="Cap"))
    out = args.out or default_out("eval")
    write_manifest(out, cfg, {"command": "eval", "checkpoint": args.checkpoint, "caps": caps,
                              "median_scaling": not args.no_median_scaling})
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump([reports[c].to_dict() for c in caps], f, indent=2)
    return 0


def cmd_infer(args):
    model, cfg, _ = load_checkpoint(args.checkpoint)
    crop = tuple(args.crop) if args.crop else (LAYOUTS[args.layout].crop if args.layout != "synthetic"
                                                else (cfg.image_size, cfg.image_size))
    out = args.out or default_out("infer")
    os.makedirs(out, exist_ok=True)
    write_manifest(out, cfg, {"command": "infer", "checkpoint": args.checkpoint, "inputs": args.images,
                              "crop": list(crop)})
    for path in args.images:
        img = load_rgb(path)
        size = (img.shape[2], img.shape[1])
        img = _crop_array(img, size, crop, 2)  # PIL bilinear
        depth = predict_depth(model, cfg, torch.from_numpy(np.ascontiguousarray(img))[None])[0, 0].numpy()
        name = os.path.splitext(os.path.basename(path))[0] + "_depth.png"
        save_depth_png(os.path.join(out, name), depth)
        print(f"{path} -> {os.path.join(out, name)}  (scale {crop_geometry(size, crop)[0]:.3f})")
    return 0


def parse_spec_list(text):
    specs = [s.strip().upper() for s in text.split(",") if s.strip()]
    canon = [str(ChannelSpec.parse(s)) for s in specs]
    dupes = sorted({s for s in canon if canon.count(s) > 1})
    if dupes:
        raise ConfigError(f"duplicate channel specs: {', '.join(dupes)}")
    return canon


def cmd_ablate_channels(args):
    base = build_config(args)
    specs = parse_spec_list(args.specs)
    out = args.out or default_out("ablate")
    corpus = load_corpus(args, base, "train")
    ev = _eval_corpus(args, base)
    rows = []
    for spec in specs:
        cfg = replace(base, channel_spec=spec, use_la=not args.baseline_only and base.use_la)
        res = train(cfg, corpus, out_dir=os.path.join(out, spec), progress=args.log_every)
        rep = evaluate(res.model, cfg, ev.targets, ev.depth_gt)[cfg.cap_m]
        rows.append((spec, rep))
        print(f"{spec}: Abs Rel {rep.abs_rel:.4f}", flush=True)
    table = format_table(rows, label_header="Channels", columns=("Abs Rel", "Sq Rel", "RMSE", "RMSE log"))
    print(table)
    write_manifest(out, base, {"command": "ablate-channels", "specs": specs})
    with open(os.path.join(out, "ablation.tsv"), "w") as f:
        f.write(table + "\n")
    return 0


def cmd_synth_check(args):
    results = checks.run_checks(args.only or None)
    for r in results:
        print(r.line())
    out = args.out or default_out("synth_check")
    write_manifest(out, TrainConfig(), {"command": "synth-check",
                                        "results": [asdict(r) for r in results]})
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print("all checks passed")
    return 0


def cmd_export_synth(args):
    os.makedirs(args.out, exist_ok=True)
    names = []
    for i in range(args.n):
        trip = make_triplet(args.seed + i, (args.size, args.size), scatter_noise=args.scatter_noise)
        name = f"scene_{i:05d}"
        export_synthetic_triplet(trip, os.path.join(args.out, name))
        names.append(name)
    write_intrinsics(os.path.join(args.out, "intrinsics.txt"), trip.intrinsics)
    with open(os.path.join(args.out, "split.txt"), "w") as f:
        f.writelines(f"{n} 0\n" for n in names)
    write_manifest(args.out, TrainConfig(seed=args.seed, scatter_noise=args.scatter_noise, image_size=args.size),
                   {"command": "export-synth", "n": args.n})
    print(f"wrote {args.n} scenes and split.txt to {args.out}")
    return 0


def _add_common(p, train_flags=True):
    p.add_argument("--config", help="flat key: value file with TrainConfig fields")
    p.add_argument("--layout", choices=sorted(LAYOUTS), default="synthetic")
    p.add_argument("--data", help="dataset root (omit for generated synthetic scenes)")
    p.add_argument("--split", help="split file listing '<sequence> <frame index>'")
    p.add_argument("--workers", type=int, default=4, help="image decoding threads")
    p.add_argument("--out", help="output directory (default runs/<command>_<time>)")
    if train_flags:
        p.add_argument("--channels", help="channel spec, e.g. R, BG, RGB")
        p.add_argument("--max-depth", type=float, help="maximum depth in metres (sets beta)")
        p.add_argument("--attenuation", choices=ATTENUATION_KINDS)
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--log-every", type=int, default=100)


def make_parser():
    parser = argparse.ArgumentParser(prog="laanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-la", action="store_true", help="baseline without the Light Attenuation module")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground-truth depth")
    _add_common(p, train_flags=False)
    p.add_argument("checkpoint")
    p.add_argument("--channels", help="expected channel spec; must match the checkpoint")
    p.add_argument("--cap", type=float, action="append",
                   help=f"depth cap in metres, repeatable (e.g. {' '.join(f'--cap {c:g}' for c in DEPTH_CAPS)})")
    p.add_argument("--no-median-scaling", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict depth maps (16-bit PNG, metres*256)")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--layout", choices=sorted(LAYOUTS), default="synthetic")
    p.add_argument("--crop", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate-channels", help="train and evaluate one model per channel spec")
    _add_common(p)
    p.add_argument("--specs", default=",".join(ABLATION_SPECS))
    p.add_argument("--baseline-only", action="store_true", default=True,
                   help="train without the LA module (default, as in the channel ablation)")
    p.add_argument("--with-la", dest="baseline_only", action="store_false")
    p.set_defaults(func=cmd_ablate_channels)

    p = sub.add_parser("synth-check", help="physics inversion, gradient and warp self-checks")
    p.add_argument("--only", nargs="*", choices=sorted(checks.CHECKS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_check)

    p = sub.add_parser("export-synth", help="write synthetic scenes in the synthetic dataset layout")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scatter-noise", type=float, default=0.05)
    p.set_defaults(func=cmd_export_synth)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EvaluationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
