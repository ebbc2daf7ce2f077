"""Command-line entry point ``spdnet-psi``.

Every subcommand reads an optional JSON config (``--config``, must carry a
``version`` field), applies flag overrides, writes its outputs plus a
``run.json`` with the fully resolved config into ``--out`` and returns

* 0 on success,
* 2 on usage or configuration errors,
* 1 on runtime failures.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .embedding import MdopConfig, mdop_epochs
from .errors import DatasetFormatError, InvalidInputError, SpdNetError
from .features import extract_features
from .explain import gradcam_pp, paired_ttest, write_csv_matrix, write_pgm
from .network import SpdNet, load_checkpoint, save_checkpoint
from .signals import GeneratorSpec, generate, load_dataset, save_dataset
from .training import (
    PipelineConfig,
    _as_seed,
    bench,
    curves_csv,
    estimate_embedding,
    evaluate_within_session,
    feature_spec,
    strip_timing,
    train,
)

CONFIG_VERSION = 1


class UsageError(InvalidInputError):
    pass


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise UsageError(f"config version must be {CONFIG_VERSION}, got {cfg.get('version')!r}")
    return cfg


def resolve_dataset(args, cfg):
    """Load ``--dataset`` / ``config.dataset`` or generate ``config.generator``."""
    path = args.dataset or cfg.get("dataset")
    if path is not None:
        if not (Path(path) / "meta.json").exists():
            raise UsageError(f"no dataset at {path}")
        return load_dataset(path), {"dataset": str(path)}
    if "generator" in cfg:
        spec = GeneratorSpec.from_dict(cfg["generator"])
        return generate(spec), {"generator": spec.to_dict()}
    raise UsageError("provide --dataset or a 'generator' section in the config")


def resolve_pipeline(args, cfg):
    d = dict(cfg.get("pipeline", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    return PipelineConfig.from_dict(d).validate()


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run(out, command, resolved, seed):
    _dump({"version": CONFIG_VERSION, "command": command, "package": __version__, "seed": seed, **resolved},
          out / "run.json")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg):
    d = dict(cfg.get("generator", {}))
    for key in ("kind", "n_trials", "n_times"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.seed is not None:
        d["seed"] = args.seed
    spec = GeneratorSpec.from_dict(d)
    spec.validate()
    out = _out_dir(args)
    save_dataset(generate(spec), out)
    write_run(out, "gen", {"generator": spec.to_dict()}, spec.seed)


def cmd_embed_params(args, cfg):
    D, source = resolve_dataset(args, cfg)
    mdop = MdopConfig(**cfg.get("mdop", {}))
    mdop.resolve(D.n_times)
    emb = mdop_epochs(D, mdop, jobs=args.jobs)
    out = _out_dir(args)
    result = {"tau": emb.tau, "psi": emb.psi, "n_epochs": D.n_trials}
    _dump(result, out / "embedding.json")
    write_run(out, "embed-params", {**source, "mdop": mdop.to_dict()}, args.seed)
    print(f"tau={emb.tau} psi={emb.psi}")


def fit_model(cfg, D):
    """Train one model on every trial of ``D``; returns ``(model, history)``."""
    Xp = cfg.preprocess.apply(D.X, D.fs_hz)
    emb, _ = estimate_embedding(cfg, Xp, _as_seed(cfg.seed, 0))
    spec = feature_spec(cfg, emb)
    if emb is not None:
        emb.check_estimable(D.n_channels, D.n_times)
    S = extract_features(Xp, spec, D.fs_hz)
    model = SpdNet.create(
        D.n_channels,
        n_classes=int(D.labels.max()) + 1,
        features=spec,
        reduce=cfg.pipeline == "spdnet_psi",
        epsilon=cfg.epsilon,
        seed=_as_seed(cfg.seed, 5),
        preprocess=cfg.preprocess,
        fs_hz=D.fs_hz,
    )
    history = train(model, S, D.labels, replace(cfg.train, seed=_as_seed(cfg.seed, 6)))
    return model, history


def cmd_train(args, cfg):
    D, source = resolve_dataset(args, cfg)
    pcfg = resolve_pipeline(args, cfg)
    model, history = fit_model(pcfg, D)
    out = _out_dir(args)
    save_checkpoint(model, out / "checkpoint")
    (out / "curves.csv").write_text(curves_csv({"curves": history}), encoding="utf-8")
    summary = {k: history[k] for k in ("best_epoch", "steps", "best_val_loss", "max_orth_residual")}
    _dump(summary, out / "train.json")
    write_run(out, "train", {**source, "pipeline": pcfg.to_dict()}, pcfg.seed)


def cmd_evaluate(args, cfg):
    D, source = resolve_dataset(args, cfg)
    pcfg = resolve_pipeline(args, cfg)
    report = evaluate_within_session(D, pcfg, jobs=args.jobs)
    out = _out_dir(args)
    _dump(report, out / "report.json")
    _dump(strip_timing(report), out / "report_notiming.json")
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for fold in report["folds"]:
        name = f"session{fold['session']}_fold{fold['fold']}.csv"
        (curves / name).write_text(curves_csv(fold), encoding="utf-8")
    write_run(out, "evaluate", {**source, "pipeline": pcfg.to_dict()}, pcfg.seed)
    s = report["summary"]
    print(f"mean_auc={s['mean_auc']:.4f} std_auc={s['std_auc']:.4f} folds={s['n_folds']}")


def cmd_explain(args, cfg):
    ckpt = args.checkpoint or cfg.get("checkpoint")
    if ckpt is None or not (Path(ckpt) / "manifest.json").exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    D, source = resolve_dataset(args, cfg)
    ex = {"layer": "reeig", "n_trials": 20, "mode": "paired", "alpha": 0.05, **cfg.get("explain", {})}
    out = _out_dir(args)
    classes = np.unique(D.labels)
    n = min(int(ex["n_trials"]), *(int(np.sum(D.labels == c)) for c in classes))
    if n < 2:
        raise UsageError("need at least two trials per class")
    maps = {}
    for c in classes:
        idx = np.flatnonzero(D.labels == c)[:n]
        cams = gradcam_pp(model, D.X[idx], int(c), layer=ex["layer"])
        maps[int(c)] = cams
        mean = cams.mean(axis=0)
        write_pgm(out / f"relevance_class{c}.pgm", mean)
        write_csv_matrix(out / f"relevance_class{c}.csv", mean)
    if len(classes) == 2:
        a, b = (maps[int(c)] for c in classes)
        res = paired_ttest(a, b, mode=ex["mode"], alpha=ex["alpha"])
        write_csv_matrix(out / "ttest_t.csv", res.t)
        write_csv_matrix(out / "ttest_p.csv", res.p)
        write_csv_matrix(out / "ttest_mask.csv", res.mask)
        write_pgm(out / "ttest_mask.pgm", res.mask.astype(np.float64))
    write_run(out, "explain", {**source, "checkpoint": str(ckpt), "explain": ex}, args.seed)


def cmd_bench(args, cfg):
    D, source = resolve_dataset(args, cfg)
    pcfg = resolve_pipeline(args, cfg)
    timings, _ = bench(D, pcfg, jobs=args.jobs)
    out = _out_dir(args)
    _dump(timings, out / "timings.json")
    write_run(out, "bench", {**source, "pipeline": pcfg.to_dict()}, pcfg.seed)


COMMANDS = {
    "gen": cmd_gen,
    "embed-params": cmd_embed_params,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="spdnet-psi", description="SPDNet with delay-embedded covariances")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file with a 'version' field")
        p.add_argument("--seed", type=int, help="root seed, overrides the config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        if name == "gen":
            p.add_argument("--kind")
            p.add_argument("--n-trials", dest="n_trials", type=int)
            p.add_argument("--n-times", dest="n_times", type=int)
        else:
            p.add_argument("--dataset", help="dataset directory (meta.json + data.bin)")
        if name == "explain":
            p.add_argument("--checkpoint", help="checkpoint directory from 'train'")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = read_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (InvalidInputError, DatasetFormatError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpdNetError, ArithmeticError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
