"""Command-line entry point: ``driu {train,infer,eval,synth,gradcheck}``.

Exit codes: 0 success, 1 verification or quality failure, 2 usage/input error.
"""
import argparse
import concurrent.futures
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, gradcheck, net, trainer
from .dataio import (format_split, load_dataset, read_probmap, read_rgb, read_weight_file,
                     synth_geometry, write_mask, write_probmap, write_rgb, write_weight_file)
from .dataio.datasets import LAYOUTS
from .dataio.atomic import atomic_write
from .errors import DRIUError, TrainingDiverged

log = logging.getLogger("driu")

MEANS_KEY = "preprocess.channel_means"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_schema_flags(parser, sections, skip=()):
    group = parser.add_argument_group("configuration keys (override --config)")
    for key in cfgmod.SCHEMA.values():
        if key.section in sections and key.name not in skip:
            group.add_argument(key.flag, dest=f"cfg_{key.name}", metavar="VALUE",
                               default=None, help=key.help)


def _run_values(args, sections):
    values = cfgmod.load_config(args.config) if getattr(args, "config", None) else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    values = cfgmod.merge(values, cfgmod.validate({k: v for k, v in overrides.items() if v is not None},
                                                  "command line"))
    stray = [k for k in values if cfgmod.SCHEMA[k].section not in sections]
    if stray:
        raise UsageError(f"key(s) not used by this command: {', '.join(stray)}")
    return values


def save_model(path, params, means):
    tensors = dict(params)
    tensors[MEANS_KEY] = np.asarray(means, dtype=np.float32)
    write_weight_file(path, tensors)


def load_model(path, net_config):
    tensors = read_weight_file(path)
    means = tensors.pop(MEANS_KEY, np.zeros(3, dtype=np.float32))
    return net.NetworkParams.from_tensors(net_config, tensors), tuple(float(m) for m in means)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    values = _run_values(args, ("net", "train"))
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    net_cfg = cfgmod.net_config(values)
    train_cfg = cfgmod.train_config(values)
    split = load_dataset(args.data, args.layout, task=args.task)
    params = net.build_network(net_cfg, train_cfg.seed)
    result = trainer.train(params, split.train, train_cfg, task=args.task)
    save_model(args.out, result.params, result.means)
    if args.log:
        trainer.write_loss_log(args.log, result.log)
    final = result.log[-1][2] if result.log else float("nan")
    print(f"final loss {final:.6g} after {len(result.log)} iterations")
    return EXIT_OK


def infer_maps(params, image, tasks, means):
    probs, _ = net.forward(params, trainer.preprocess(image, means), tasks)
    return probs


def _out_path(out, task, both):
    if not both:
        return Path(out)
    if "{task}" in out:
        return Path(out.format(task=task))
    p = Path(out)
    return p.with_name(f"{p.stem}_{task}{p.suffix}")


def cmd_infer(args):
    values = _run_values(args, ("net",))
    params, means = load_model(args.weights, cfgmod.net_config(values))
    image = read_rgb(args.image)
    tasks = net.TASKS if args.task == "both" else (args.task,)
    probs = infer_maps(params, image, tasks, means)
    for task in tasks:
        path = _out_path(args.out, task, args.task == "both")
        write_probmap(path, probs[task])
        print(f"{task}: wrote {path}")
    return EXIT_OK


def _map_images(fn, items):
    threads = int(os.environ.get("DRIU_THREADS", "0") or 0)
    if threads <= 0:
        return [fn(i) for i in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_eval(args):
    values = _run_values(args, ("eval",))
    flags = cfgmod.eval_flags(values)
    use_fov = {"on": True, "off": False}[args.fov] if args.fov else flags["use_fov"]
    split = load_dataset(args.data, args.layout, task=args.task)
    samples = split.test
    pred_dir = Path(args.pred_dir)
    missing = [s.id for s in samples if not (pred_dir / f"{s.id}.pgm").is_file()]
    if missing:
        raise UsageError(f"missing probability maps for: {', '.join(missing)}")

    probs = _map_images(lambda s: read_probmap(pred_dir / f"{s.id}.pgm"), samples)
    golds = [s.gold for s in samples]
    fovs = [s.fov for s in samples]
    thresholds = evaluation.DEFAULT_THRESHOLDS
    per_image = _map_images(
        lambda i: evaluation.image_counts(probs[i], golds[i], thresholds, fovs[i], use_fov),
        range(len(samples)))
    tp, fp, fn = (np.sum([c[k] for c in per_image], axis=0) for k in range(3))
    if flags["average"] == "image" and per_image:
        prs = [evaluation.precision_recall_f(*c)[:2] for c in per_image]
        curve = evaluation.PRCurve(thresholds, tp, fp, fn,
                                   np.mean([p for p, _ in prs], axis=0),
                                   np.mean([r for _, r in prs], axis=0))
    else:
        curve = evaluation.PRCurve(thresholds, tp, fp, fn)
    t_ods, f_ods = evaluation.ods(curve)

    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_pr_csv(f"{prefix}_pr.csv", curve)

    humans = None
    if any(s.second is not None for s in samples):
        humans = evaluation.human_points([s.second for s in samples], golds, fovs,
                                         ids=[s.id for s in samples], use_fov=use_fov)
        evaluation.write_human_csv(f"{prefix}_human.csv", humans)

    stats = None
    preds = [evaluation.binarize(p, t_ods) for p in probs]
    try:
        stats = evaluation.boundary_stats(preds, golds, [s.id for s in samples])
        evaluation.write_boundary_csv(f"{prefix}_boundary.csv", stats)
    except DRIUError as exc:
        log.warning("boundary error not computed: %s", exc)

    text = evaluation.summary_text(curve, stats, humans)
    with atomic_write(f"{prefix}_summary.txt", "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args):
    if args.size < 32:
        raise UsageError("--size must be >= 32")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    root = Path(args.out)
    subdirs = ("images", "fov", "gt_vessel", "gt_disc", "gt2_vessel", "gt2_disc")
    for sub in subdirs:
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for k in range(args.count):
        g = synth_geometry(args.seed + k, args.size)
        ids.append(g.id)
        write_rgb(root / "images" / f"{g.id}.ppm", g.image)
        write_mask(root / "fov" / f"{g.id}.pgm", g.fov)
        write_mask(root / "gt_vessel" / f"{g.id}.pgm", g.vessel)
        write_mask(root / "gt_disc" / f"{g.id}.pgm", g.disc)
        write_mask(root / "gt2_vessel" / f"{g.id}.pgm", g.vessel2)
        write_mask(root / "gt2_disc" / f"{g.id}.pgm", g.disc2)
    n_test = args.count // 2 if args.test_count is None else args.test_count
    if not 0 <= n_test <= args.count:
        raise UsageError("--test-count must lie in [0, count]")
    n_train = args.count - n_test
    (root / "split.txt").write_text(format_split(ids[:n_train], ids[n_train:]))
    print(f"wrote {args.count} samples ({n_train} train / {n_test} test) to {root}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_suite(seed=args.seed, width_scale=args.width_scale,
                                  corrupt=args.corrupt)
    failed = None
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<16} max_rel_err {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  "
              f"cases {r.cases:>3}  {status}  worst {r.worst}")
        if not r.passed and failed is None:
            failed = r
    if failed is not None:
        print(f"gradient check failed: {failed.name} ({failed.worst})", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="driu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    tasks = list(net.TASKS)

    p = sub.add_parser("train", help="train one task head on a dataset")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--layout", default="generic", choices=sorted(LAYOUTS))
    p.add_argument("--task", default="vessel", choices=tasks)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--log", help="loss-log CSV to write")
    _add_schema_flags(p, ("net", "train"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write probability maps for one image")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="RGB PPM image")
    p.add_argument("--task", default="vessel", choices=tasks + ["both"])
    p.add_argument("--out", required=True,
                   help="16-bit PGM output; with --task both, '{task}' in the name is "
                        "replaced (or _vessel/_disc is appended)")
    _add_schema_flags(p, ("net",))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="precision-recall, ODS and boundary error on a test split")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--pred-dir", required=True, help="directory of <id>.pgm probability maps")
    p.add_argument("--data", required=True)
    p.add_argument("--layout", default="generic", choices=sorted(LAYOUTS))
    p.add_argument("--task", default="vessel", choices=tasks)
    p.add_argument("--fov", choices=["on", "off"], default=None,
                   help="restrict to the FOV mask when present (default on)")
    p.add_argument("--out-prefix", required=True)
    _add_schema_flags(p, ("eval",), skip=("fov",))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic fundus dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--test-count", type=int, default=None, help="default: count // 2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-scale", type=int, default=8)
    p.add_argument("--corrupt", default=None, choices=gradcheck.CHECK_NAMES,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"driu {args.command}: {exc}; diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, DRIUError, OSError) as exc:
        print(f"driu {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
