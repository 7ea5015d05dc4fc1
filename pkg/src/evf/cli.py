"""
`evf` command line.

Each subcommand resolves its settings (package defaults, `--config`, `--seed`, `--set`),
writes them as `resolved_config.txt` in its output directory, then runs one stage of the
pipeline: gen-data, train, eval, embed, plan or report.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .metrics import (
    EvalReport,
    MetricError,
    best_of_k_eval,
    embedding_projection_table,
    embedding_separation,
    paired_comparison,
)
from .model import ModelConfig, VisualForesight
from .planner import (
    METHODS,
    PlanConfig,
    format_control_table,
    make_task,
    report_control,
    run_episodes,
    write_episodes,
)
from .pushworld import generate_corpus, load_split
from .training import CHECKPOINT_NAME, TrainConfig, sample_support_set, train_loop
from .utils import (
    atomic_write,
    build_id,
    parse_assignment,
    resolve_settings,
    section,
    write_kv_file,
)

logger = logging.getLogger("evf.cli")
logger.addHandler(logging.NullHandler())

RESOLVED_CONFIG = "resolved_config.txt"
MODEL_METHODS = ("evf", "no-context")
PLAN_SPLITS = {"seen": ["train"], "unseen": ["test"], "both": ["train", "test"]}


def _path(value):
    return None if value is None else Path(value).expanduser()


def data_dir(settings):
    return Path(settings["data_dir"]).expanduser()


def runs_dir(settings):
    return _path(settings["paths.runs"]) or data_dir(settings) / "runs"


def manifest_path(settings):
    return _path(settings["paths.manifest"]) or data_dir(settings) / "manifest.txt"


def checkpoint_path(settings, method):
    """checkpoint of `method`, `paths.*checkpoint` or the default train output"""
    if method not in MODEL_METHODS:
        raise ValueError("method %r has no checkpoint" % method)
    key = "paths.checkpoint" if method == "evf" else "paths.baseline_checkpoint"
    return _path(settings[key]) or runs_dir(settings) / ("train-%s" % method) / CHECKPOINT_NAME


def _require(path):
    if not Path(path).exists():
        raise FileNotFoundError("%s not found" % path)
    return Path(path)


def _prepare_out(out, names, force):
    """create `out`; refuse to overwrite any of `names` without force"""
    out = Path(out)
    if not force:
        for name in names:
            if (out / name).exists():
                raise FileExistsError("%s already exists (use --force)" % (out / name))
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved_config(out, settings, command):
    write_kv_file(Path(out) / RESOLVED_CONFIG, settings,
                  header=["build: %s" % build_id(), "command: %s" % command])


def _write_text(path, text):
    with atomic_write(path, "w") as f:
        f.write(text.rstrip("\n") + "\n")


def _write_csv(path, frame):
    with atomic_write(path, "w") as f:
        frame.to_csv(f, index=False)


def _load_model(settings, method):
    checkpoint = _require(checkpoint_path(settings, method))
    model = VisualForesight.load(checkpoint, optimizer=False)
    if model.config.use_context != (method == "evf"):
        logger.warning("%s: checkpoint use_context=%s for method %s", checkpoint,
                       model.config.use_context, method)
    return model


def gen_data(args, settings):
    out = _path(args.out) or data_dir(settings)
    data = section(settings, "data")
    manifest = generate_corpus(out, settings["seed"], data["K_train"], data["K_test"], data["N"],
                               data["T"], T_eval=data["T_eval"], force=args.force)
    write_resolved_config(out, settings, "gen-data")
    return [manifest]


def train(args, settings):
    method = args.method or ("no-context" if settings["train.baseline_mode"] else "evf")
    if method not in MODEL_METHODS:
        raise ValueError("train method must be one of %s, got %r" % (MODEL_METHODS, method))
    settings = dict(settings, **{"train.baseline_mode": method == "no-context"})
    manifest = _require(manifest_path(settings))
    out = _path(args.out) or checkpoint_path(settings, method).parent
    names = [] if args.resume else [CHECKPOINT_NAME]
    out = _prepare_out(out, names, args.force)
    write_resolved_config(out, settings, "train")
    cfg = TrainConfig.from_settings(settings)
    model_config = ModelConfig.from_settings(section(settings, "model"))
    result = train_loop(cfg, manifest, out, model_config=model_config, resume=args.resume)
    return [result.checkpoint, result.log_path]


def _support_rotation(datasets):
    """support source of each dataset: the next object's dataset"""
    if len(datasets) < 2:
        raise MetricError("mismatched support needs >= 2 objects, got %d" % len(datasets))
    return datasets[1:] + datasets[:1]


def evaluate(args, settings):
    method = args.method or "evf"
    opts = section(settings, "eval")
    model = _load_model(settings, method)
    datasets = load_split(_require(manifest_path(settings)), opts["split"])
    name = "eval-%s%s" % (method, "-mismatched" if opts["mismatched"] else "")
    names = ["eval_curves.csv", "eval_trajectories.csv", "eval_summary.txt"]
    out = _prepare_out(_path(args.out) or runs_dir(settings) / name, names, args.force)
    write_resolved_config(out, settings, "eval")
    report = best_of_k_eval(
        model, datasets, K=opts["K"], horizon=opts["horizon"], seed=settings["seed"],
        support_size=opts["support_size"],
        support_datasets=_support_rotation(datasets) if opts["mismatched"] else None,
        dump_dir=out / "frames" if opts["dump_frames"] else None,
        dump_trajectories=opts["dump_frames"])
    report.to_csv(out / names[0])
    report.to_csv(out / names[1], per_trajectory=True)
    _write_text(out / names[2], "method: %s\n%s" % (method, report.summary()))
    return [out / n for n in names]


def embed(args, settings):
    opts = section(settings, "embed")
    model = _load_model(settings, "evf")
    datasets = load_split(_require(manifest_path(settings)), opts["split"])
    names = ["embed_stats.txt", "embeddings.csv", "pca.csv", "objects.csv"]
    out = _prepare_out(_path(args.out) or runs_dir(settings) / "embed", names, args.force)
    write_resolved_config(out, settings, "embed")
    stats = embedding_separation(model, datasets, draws=opts["draws"],
                                 support_size=opts["support_size"], seed=settings["seed"])
    objects = pd.DataFrame([
        dict(object_id=d.object_id, shape_id=d.spec.shape_id, mass=d.spec.mass,
             friction=d.spec.friction) for d in datasets])
    _write_text(out / names[0], stats.summary())
    _write_csv(out / names[1], stats.embeddings)
    _write_csv(out / names[2], embedding_projection_table(stats))
    _write_csv(out / names[3], objects)
    return [out / n for n in names]


def plan(args, settings):
    opts = section(settings, "plan")
    method = args.method or opts["method"]
    if method not in METHODS:
        raise ValueError("plan method must be one of %s, got %r" % (METHODS, method))
    if opts["split"] not in PLAN_SPLITS:
        raise ValueError("plan.split must be one of %s, got %r" % (
            tuple(PLAN_SPLITS), opts["split"]))
    cfg = PlanConfig.from_settings(settings)
    model = _load_model(settings, method) if method in MODEL_METHODS else None
    manifest = _require(manifest_path(settings))
    names = ["episodes.csv", "control_summary.csv", "control_summary.txt"]
    name = "plan-%s-%s" % (method, opts["task"])
    out = _prepare_out(_path(args.out) or runs_dir(settings) / name, names, args.force)
    write_resolved_config(out, settings, "plan")

    seed = settings["seed"]
    records = []
    for s, split in enumerate(PLAN_SPLITS[opts["split"]]):
        datasets = load_split(manifest, split)
        if not datasets:
            raise FileNotFoundError("no %s datasets in %s" % (split, manifest))
        tasks, supports = [], []
        for e in range(opts["episodes"]):
            dataset = datasets[e % len(datasets)]
            tasks.append(make_task(dataset.spec, dataset.object_id, opts["task"],
                                   opts["episode_length"], seed=[seed, s, e], split=split))
            rng = np.random.default_rng([seed, s, e, 1])
            supports.append(sample_support_set(dataset, opts["support_size"], rng))
        dump_dir = out / "frames" / split if opts["dump_frames"] else None
        records += run_episodes(tasks, cfg, [seed, s], method, model=model, supports=supports,
                                dump_dir=dump_dir)

    summary = report_control(records)
    write_episodes(out / names[0], records)
    _write_csv(out / names[1], summary)
    _write_text(out / names[2], format_control_table(summary))
    return [out / n for n in names]


def _run_dirs(args, settings):
    if args.runs:
        return [_require(p) for p in args.runs]
    root = _require(runs_dir(settings))
    return sorted(p for p in root.iterdir() if p.is_dir())


def report(args, settings):
    """merge plan episodes and compare eval runs found in run directories"""
    episodes, evals = [], {}
    for run in _run_dirs(args, settings):
        if (run / "episodes.csv").exists():
            episodes.append(pd.read_csv(run / "episodes.csv", float_precision="round_trip"))
        if (run / "eval_trajectories.csv").exists():
            evals[run.name] = EvalReport.read_csv(run / "eval_trajectories.csv")
    if not episodes and not evals:
        raise FileNotFoundError("no episodes.csv or eval_trajectories.csv in %s" % (
            ", ".join(str(r) for r in _run_dirs(args, settings))))
    names = ["report.txt", "report_control.csv", "report_eval.csv", "report_paired.csv"]
    out = _prepare_out(_path(args.out) or runs_dir(settings) / "report", names, args.force)
    write_resolved_config(out, settings, "report")

    sections = []
    if episodes:
        summary = report_control(pd.concat(episodes, ignore_index=True))
        _write_csv(out / names[1], summary)
        sections += ["control", format_control_table(summary), ""]
    if evals:
        means = pd.DataFrame([
            dict(run=name, trajectories=r.n_trajectories, horizon=r.horizon,
                 psnr=r.mean("psnr"), ssim=r.mean("ssim")) for name, r in evals.items()])
        _write_csv(out / names[2], means)
        sections += ["prediction", means.to_string(index=False), ""]
        reference = next(iter(evals))
        rows = []
        for name, other in list(evals.items())[1:]:
            for metric in ("ssim", "psnr"):
                result = paired_comparison(evals[reference], other, metric)
                rows.append(dict(run_a=reference, run_b=name, metric=metric, **result))
        paired = pd.DataFrame(rows, columns=["run_a", "run_b", "metric", "n", "mean_a", "mean_b",
                                             "diff", "t", "p"])
        _write_csv(out / names[3], paired)
        if rows:
            sections += ["paired comparison", paired.to_string(index=False), ""]
    _write_text(out / names[0], "\n".join(sections))
    return [out / n for n in names if (out / n).exists()]


COMMANDS = {
    "gen-data": gen_data,
    "train": train,
    "eval": evaluate,
    "embed": embed,
    "plan": plan,
    "report": report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="evf", description=__doc__.strip().splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="override the seed setting")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable, last wins)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the object corpus")
    p = sub.add_parser("train", parents=[common], help="meta-train a video model")
    p.add_argument("--method", choices=MODEL_METHODS)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p = sub.add_parser("eval", parents=[common], help="best-of-K prediction scores")
    p.add_argument("--method", choices=MODEL_METHODS)
    sub.add_parser("embed", parents=[common], help="context embedding separation")
    p = sub.add_parser("plan", parents=[common], help="control benchmark episodes")
    p.add_argument("--method", choices=METHODS)
    p = sub.add_parser("report", parents=[common], help="merge run directories")
    p.add_argument("runs", nargs="*", help="run directories (default: every run)")
    return parser


def settings_from_args(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for assignment in args.set:
        key, value = parse_assignment(assignment)
        overrides[key] = value
    return resolve_settings(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    logging.captureWarnings(True)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.getLogger("evf").setLevel(level)
    try:
        settings = settings_from_args(args)
        written = COMMANDS[args.command](args, settings)
    except Exception as e:
        logger.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        logger.debug("traceback", exc_info=True)
        return 1
    for path in written:
        logger.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
