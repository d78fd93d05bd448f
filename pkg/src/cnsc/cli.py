"""Command-line driver.

Subcommands: ``generate``, ``train``, ``sweep-k``, ``evaluate`` and
``importance``. Exit codes: 0 success, 2 user or configuration error,
3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from cnsc.data import Cohort, CohortFormatError, dump_json, read_cohort_csv, write_cohort_csv
from cnsc.errors import DegenerateDataError, DomainError, NumericError, ShapeError
from cnsc.metrics import elbow_select, evaluate, permutation_importance
from cnsc.model import CnscModel, config_hash
from cnsc.synth import GeneratorConfig, GroundTruth, config_dict, generate
from cnsc.trainer import TrainConfig, fit, make_folds, random_grid_search, sweep_k

log = logging.getLogger("cnsc")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _stem(command: str, seed: int, cfg: dict) -> str:
    return f"{command}-{seed}-{config_hash(cfg)[:8]}"


def _write_manifest(out: Path, stem: str, args: argparse.Namespace, config: dict, inputs: list[Path],
                    outputs: list[Path], started: float, **extra) -> Path:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": args.config,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        **extra,
    }
    return dump_json(manifest, out / f"{stem}.manifest.json")


def _read_cohort(path: str) -> Cohort:
    return read_cohort_csv(path)


def _train_config(args, extra: dict | None = None) -> TrainConfig:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        cfg["k"] = args.k
    if getattr(args, "unadjusted", False):
        cfg["adjusted"] = False
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    cfg.update(extra or {})
    try:
        return TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def cmd_generate(args) -> int:
    started = time.time()
    cfg = _load_config(args.config)
    for name in ("seed", "n", "k", "scenario"):
        value = getattr(args, name)
        if value is not None:
            cfg[name] = value
    try:
        gen = GeneratorConfig(**cfg)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    cohort, truth = generate(gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem("generate", gen.seed, config_dict(gen))
    csv_path = write_cohort_csv(cohort, out / f"{stem}.csv", emit_labels=args.emit_labels)
    truth_path = truth.save(out / f"{stem}.truth.json")
    _write_manifest(out, stem, args, config_dict(gen), [], [csv_path, truth_path], started)
    log.info("censoring rate %.3f, treated fraction %.3f", 1 - cohort.d.mean(), cohort.a.mean())
    print(csv_path)
    return EXIT_OK


def _split(cohort: Cohort, seed: int, fold: int):
    return make_folds(len(cohort), 5, seed)[fold]


def cmd_train(args) -> int:
    started = time.time()
    cohort = _read_cohort(args.cohort)
    config = _train_config(args)
    split = _split(cohort, config.seed, args.fold)
    if args.tune:
        res = random_grid_search(cohort, split, config, n_iter=args.n_iter, seed=config.seed)
        model, report = res.model, res.report
    else:
        model, report = fit(cohort, split, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem("train", config.seed, config.to_dict())
    ckpt = model.save(out / f"{stem}.json")
    # timing lives in the manifest so the report stays byte-reproducible
    report_dict = report.to_dict()
    wall_clock = report_dict.pop("wall_clock")
    rep = dump_json(report_dict, out / f"{stem}.report.json")
    _write_manifest(out, stem, args, config.to_dict(), [Path(args.cohort)], [ckpt, rep], started,
                    wall_clock=wall_clock)
    print(ckpt)
    return EXIT_OK


def _parse_range(text: str) -> list[int]:
    try:
        lo, hi = (int(v) for v in text.split("-"))
    except ValueError:
        raise UsageError(f"K range must look like 1-6, got {text!r}") from None
    if not 1 <= lo < hi:
        raise UsageError("K range must be increasing and start at 1 or above")
    return list(range(lo, hi + 1))


def cmd_sweep_k(args) -> int:
    started = time.time()
    cohort = _read_cohort(args.cohort)
    ks = _parse_range(args.k_range)
    config = _train_config(args)
    result = sweep_k(cohort, ks, config, n_folds=5, folds=list(range(args.folds)), tune=args.tune, n_iter=args.n_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem("sweep-k", config.seed, {**config.to_dict(), "k_range": ks, "folds": args.folds, "tune": args.tune})
    lines = ["K,mean_nll,std_nll," + ",".join(f"fold_{i}" for i in range(len(result.fold_nll[0])))]
    for k, m, s, f in zip(result.ks, result.mean_nll, result.std_nll, result.fold_nll):
        lines.append(",".join([str(k), f"{m:.17g}", f"{s:.17g}", *(f"{v:.17g}" for v in f)]))
    curve = out / f"{stem}.csv"
    curve.write_text("\n".join(lines) + "\n")
    _write_manifest(out, stem, args, config.to_dict(), [Path(args.cohort)], [curve], started)
    print(curve)
    print(f"K*={elbow_select(result.as_dict())}")
    return EXIT_OK


def _load_model_for(cohort: Cohort, path: str) -> CnscModel:
    model = CnscModel.load(path)
    if model.n_covariates != cohort.n_covariates:
        raise ShapeError(f"checkpoint expects {model.n_covariates} covariates, cohort has {cohort.n_covariates}")
    return model


def _eval_subset(cohort: Cohort, args) -> Cohort:
    if args.fold is None:
        return cohort
    return cohort.subset(_split(cohort, args.split_seed, args.fold).test)


def cmd_evaluate(args) -> int:
    started = time.time()
    cohort = _read_cohort(args.cohort)
    model = _load_model_for(cohort, args.checkpoint)
    truth = GroundTruth.load(args.truth) if args.truth else None
    if truth is not None and cohort.z is None and len(truth.z) == len(cohort):
        cohort.z = truth.z
    sub = _eval_subset(cohort, args)
    report = evaluate(model, sub, truth, n_perm=args.n_perm, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem("evaluate", args.seed or 0, {"checkpoint": _sha256(Path(args.checkpoint)), "fold": args.fold})
    metrics = dump_json(report.to_dict(), out / f"{stem}.json")
    curves = out / f"{stem}.curves.csv"
    curves.write_text(report.curves_csv())
    inputs = [Path(args.checkpoint), Path(args.cohort)] + ([Path(args.truth)] if args.truth else [])
    _write_manifest(out, stem, args, {}, inputs, [metrics, curves], started)
    print(metrics)
    return EXIT_OK


def cmd_importance(args) -> int:
    started = time.time()
    cohort = _read_cohort(args.cohort)
    model = _load_model_for(cohort, args.checkpoint)
    sub = _eval_subset(cohort, args)
    seed = args.seed or 0
    deltas = [permutation_importance(model, sub, j, args.n_perm, seed) for j in range(sub.n_covariates)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem("importance", seed, {"checkpoint": _sha256(Path(args.checkpoint)), "n_perm": args.n_perm})
    table = out / f"{stem}.csv"
    order = np.argsort(deltas)[::-1]
    table.write_text("covariate,delta_nll,rank\n" + "".join(
        f"x{j},{deltas[j]:.17g},{r + 1}\n" for r, j in enumerate(order)))
    _write_manifest(out, stem, args, {"n_perm": args.n_perm}, [Path(args.checkpoint), Path(args.cohort)],
                    [table], started)
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnsc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress log on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="draw a synthetic cohort")
    common(p)
    p.add_argument("--scenario", choices=("randomised", "observational"))
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--emit-labels", action="store_true", help="add the true subgroup column z")
    p.set_defaults(func=cmd_generate)

    def training(p):
        p.add_argument("cohort")
        common(p)
        p.add_argument("--k", type=int)
        p.add_argument("--unadjusted", action="store_true", help="unit weights instead of IPW")
        p.add_argument("--epochs", type=int)
        p.add_argument("--tune", action="store_true", help="random grid search on the selection split")
        p.add_argument("--n-iter", type=int, default=10)

    p = sub.add_parser("train", help="two-stage training on one split")
    training(p)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-k", help="cross-validated NLL against K and elbow selection")
    training(p)
    p.add_argument("--k-range", default="1-6")
    p.add_argument("--folds", type=int, default=5, help="number of outer folds to run (of 5)")
    p.set_defaults(func=cmd_sweep_k)

    for name, func, helptext in (("evaluate", cmd_evaluate, "metrics for a checkpoint"),
                                 ("importance", cmd_importance, "permutation importance per covariate")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("cohort")
        common(p)
        if name == "evaluate":
            p.add_argument("--truth", help="ground-truth JSON from generate")
        p.add_argument("--n-perm", type=int, default=10)
        p.add_argument("--fold", type=int, help="evaluate only this outer fold's test set")
        p.add_argument("--split-seed", type=int, default=0, help="seed of the fold split")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, CohortFormatError, ShapeError, DomainError, DegenerateDataError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
