"""Command line entry point: ``scaleguide {gen,gtdist,train,run,eval}``.

Every command writes into ``--out`` (a directory) and finishes by writing
``run.json``, a manifest echoing the full configuration.  Passing that
manifest back through ``--config`` re-runs the command.

Exit codes: 0 success, 2 usage, 3 I/O failure, 4 external proposer failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import IoFailure, NonZeroExit, ProtocolViolation
from .scale_math import ScaleConfig, ground_truth_distribution

log = logging.getLogger("scaleguide")

EXIT_USAGE, EXIT_IO, EXIT_PROTOCOL = 2, 3, 4
MODE_NAMES = {"guided-gt": "guided_gt", "guided-pred": "guided_predictor", "exhaustive": "exhaustive"}


class UsageError(Exception):
    pass


def _floats(text):
    try:
        vals = [float(eval_fraction(v)) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not vals:
        raise argparse.ArgumentTypeError("expected a comma separated list of numbers")
    return vals


def eval_fraction(token: str) -> float:
    """Parse ``0.5`` or ``1/2.5`` style numbers."""
    token = token.strip()
    if "/" in token:
        num, den = token.split("/", 1)
        return float(num) / float(den)
    return float(token)


def _write_json(path, obj, indent=None):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=indent)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc
    return path


def _write_text(path, text):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc
    return path


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoFailure(f"could not read {path}: {exc}") from exc


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {path}: {exc}") from exc
    return path


def _select(scenes, split):
    if split == "all":
        return scenes
    return [s for s in scenes if s.meta.get("split") == split]


def _load_scenes(args):
    from .scenegen import load_dataset

    scenes = _select(load_dataset(args.dataset), args.split)
    if not scenes:
        raise UsageError(f"no images in split {args.split!r} of {args.dataset}")
    return scenes


def cmd_gen(args):
    from .scenegen import default_grid, generate_dataset

    grid = default_grid(args.proximity, args.mu_grid, args.nu_grid)
    out = _outdir(args.out)
    manifest = generate_dataset(grid, args.images_per_config, out, seed=args.seed, jobs=args.jobs)
    print(f"{manifest['n_images']} images, {manifest['n_annotations']} annotations "
          f"from {len(grid)} configurations -> {out}")
    return [os.path.join(out, "dataset.json"), os.path.join(out, "manifest.json")]


def cmd_gtdist(args):
    cfg = ScaleConfig()
    out = _outdir(args.out)
    result = {}
    for s in _load_scenes(args):
        if not s.annotations:
            log.warning("image %s has no annotations; skipped", s.image_id)
            continue
        result[s.image_id] = ground_truth_distribution([a.size for a in s.annotations], cfg).to_dict()
    path = _write_json(os.path.join(out, "gtdist.json"), result)
    print(f"{len(result)} distributions -> {path}")
    return [path]


def cmd_train(args):
    from .plotting import plot_loss
    from .predictor import TrainConfig, train

    cfg = ScaleConfig()
    scenes = [s for s in _load_scenes(args) if s.annotations]
    dataset = [(s, ground_truth_distribution([a.size for a in s.annotations], cfg)) for s in scenes]
    tcfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       rng_seed=args.seed, sampling_mode=args.sampling.replace("-", "_"))
    result = train(dataset, tcfg, scale_config=cfg)
    out = _outdir(args.out)
    params_path = _write_json(os.path.join(out, "params.json"), result.params.to_dict())
    loss_path = _write_text(os.path.join(out, "loss.csv"), result.loss_csv())
    figs = plot_loss(result.losses, os.path.join(out, "loss"))
    print(f"trained on {len(dataset)} images; loss {result.losses[0]:.4f} -> "
          f"{result.losses[-1]:.4f}; params -> {params_path}")
    return [params_path, loss_path, *figs]


def cmd_run(args):
    from .predictor import PredictorParams
    from .proposer import OracleConfig, choose_scales, oracle_propose, run_external

    mode = MODE_NAMES[args.mode]
    cfg = ScaleConfig()
    params = None
    if mode == "guided_predictor":
        if not args.params:
            raise UsageError("--mode guided-pred needs --params")
        params = PredictorParams.from_dict(_read_json(args.params))
    oracle = OracleConfig(tau=args.tau, localization_noise=args.noise,
                          false_positive_rate=args.fp_rate, miss_rate=args.miss_rate,
                          rng_seed=args.seed)
    images = {}
    for s in _load_scenes(args):
        scales = choose_scales(s, mode, args.h, args.lam, cfg, params)
        if args.external_proposer:
            props = run_external(args.external_proposer, s, scales)
        else:
            rng = np.random.default_rng([args.seed, int(s.image_id)])
            props = oracle_propose(s, scales, oracle, cfg, rng)
        images[s.image_id] = {"scales": list(scales.scales),
                              "proposals": [p.to_dict() for p in props]}
    out = _outdir(args.out)
    doc = {"method": args.name or args.mode, "mode": mode, "h": args.h, "lambda": args.lam,
           "tau": args.tau, "seed": args.seed, "images": images}
    path = _write_json(os.path.join(out, "proposals.json"), doc)
    print(f"{len(images)} images, mode {args.mode} -> {path}")
    return [path]


def _parse_proposal_arg(text):
    if "=" in text:
        name, path = text.split("=", 1)
        return name, path
    return None, text


def cmd_eval(args):
    from .evaluation import emit_curves, evaluate, scale_sparsity_histogram
    from .plotting import plot_sparsity
    from .proposer import parse_proposals

    scenes = _load_scenes(args)
    methods, config = {}, {}
    for item in args.proposals:
        name, path = _parse_proposal_arg(item)
        doc = _read_json(path)
        name = name or doc.get("method") or os.path.splitext(os.path.basename(path))[0]
        per_image = doc.get("images", {})
        pairs = []
        for s in scenes:
            entry = per_image.get(s.image_id, {"proposals": []})
            pairs.append((s.annotations, parse_proposals(entry["proposals"])))
        methods[name] = pairs
        config[name] = {k: doc.get(k) for k in ("mode", "h", "lambda", "tau", "seed")}
    report = evaluate(methods, config=config)
    out = _outdir(args.out)
    written = emit_curves(report, out, formats=tuple(args.formats))
    written.append(_write_json(os.path.join(out, "report.json"), report.to_dict(), indent=1))

    rows = ["image_id,n_nonzero_bins," + ",".join(f"bin{i}" for i in range(10))]
    nonzero = []
    for s in scenes:
        n, counts = scale_sparsity_histogram(s.annotations, s.viewport)
        nonzero.append(n)
        rows.append(f"{s.image_id},{n}," + ",".join(str(c) for c in counts))
    written.append(_write_text(os.path.join(out, "sparsity.csv"), "\n".join(rows) + "\n"))
    written += plot_sparsity(nonzero, os.path.join(out, "sparsity"), tuple(args.formats))

    for name, summ in report.summary().items():
        print(f"{name:>16}  AR@10={summ['AR@10']:.4f}  AR@100={summ['AR@100']:.4f}  "
              f"AR@1000={summ['AR@1000']:.4f}  (n_gt={summ['n_gt']})")
    problems = report.check_monotone()
    for p in problems:
        log.error("monotonicity violated: %s", p)
    return written


COMMANDS = {"gen": cmd_gen, "gtdist": cmd_gtdist, "train": cmd_train, "run": cmd_run,
            "eval": cmd_eval}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    common.add_argument("--config", help="JSON file of flag values (or a run.json manifest)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (gen only)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", required=True, help="dataset directory or dataset.json")
    data.add_argument("--split", choices=("all", "train", "val"), default="all")

    parser = argparse.ArgumentParser(prog="scaleguide", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic shelf dataset")
    p.add_argument("--mu-grid", type=_floats, default=[0.9, 0.8, 0.7, 0.6, 0.5])
    p.add_argument("--nu-grid", type=_floats, default=[1, 1 / 1.5, 1 / 2, 1 / 2.5, 1 / 3])
    p.add_argument("--proximity", type=float, default=0.5)
    p.add_argument("--images-per-config", type=int, default=200)

    sub.add_parser("gtdist", parents=[common, data], help="ground-truth scale distributions")

    p = sub.add_parser("train", parents=[common, data], help="train the scale predictor")
    p.add_argument("--sampling", choices=("per-image", "per-annotation"), default="per-annotation")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("run", parents=[common, data], help="generate proposals")
    p.add_argument("--mode", choices=tuple(MODE_NAMES), default="guided-gt")
    p.add_argument("--h", type=int, default=6)
    p.add_argument("--lambda", dest="lam", type=float, default=0.9)
    p.add_argument("--params", help="predictor params.json (guided-pred)")
    p.add_argument("--external-proposer", help="executable: scene.json scales.json out.json")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--fp-rate", type=float, default=0.5)
    p.add_argument("--miss-rate", type=float, default=0.1)
    p.add_argument("--name", help="method label used in reports")

    p = sub.add_parser("eval", parents=[common, data], help="evaluate proposal files")
    p.add_argument("--proposals", nargs="+", required=True, help="[NAME=]proposals.json ...")
    p.add_argument("--formats", type=lambda s: s.split(","), default=["svg"],
                   help="figure formats, e.g. svg,png")
    return parser


def _config_defaults(argv):
    """Values from ``--config`` (flags on the command line still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    doc = _read_json(known.config)
    if "config" in doc and "command" in doc:
        doc = doc["config"]
    return {k.replace("-", "_"): v for k, v in doc.items()
            if k not in ("command", "config")}


def parse_args(argv):
    parser = build_parser()
    defaults = _config_defaults(argv)
    if defaults:
        cmd = next((a for a in argv if a in COMMANDS), None)
        if cmd is not None:
            subparser = parser._subparsers._group_actions[0].choices[cmd]
            subparser.set_defaults(**defaults)
            # config-supplied values satisfy required flags
            for action in subparser._actions:
                if action.dest in defaults:
                    action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](args)
        config = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
        manifest = {
            "command": args.command,
            "config": config,
            "master_seed": args.seed,
            "tool_version": __version__,
            "inputs": [v for k, v in config.items() if k in ("dataset", "params")] + list(
                config.get("proposals") or []),
            "outputs": sorted(os.path.relpath(p, args.out) for p in outputs),
            "duration_s": round(time.perf_counter() - start, 3),
        }
        _write_json(os.path.join(args.out, "run.json"), manifest, indent=1)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IoFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ProtocolViolation, NonZeroExit) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    return 0


if __name__ == "__main__":
    sys.exit(main())
