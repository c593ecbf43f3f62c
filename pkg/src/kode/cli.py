"""Command-line entry point: ``kode <subcommand> [options]``.

Exit status is 0 on success, 2 for bad flags, 3 for an invalid config and 1
for any other failure. Failures print a single ``kode: error: <kind>: <detail>``
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .plant import Pattern

log = logging.getLogger("kode")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class CliError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _patterns(text: str) -> list[Pattern]:
    try:
        return [Pattern.parse(p.strip()) for p in text.split(",") if p.strip()]
    except (KeyError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags override it)")
    common.add_argument("--out", default=".", help="output directory; relative paths resolve against it")
    common.add_argument("--seed", type=int, help="overrides the config seed (fallback: $KODE_SEED)")
    common.add_argument("--threads", type=_positive, default=os.cpu_count() or 1,
                        help="worker threads for simulation (default: logical cores)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="kode", description="Deep Koopman vehicle dynamics pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate excitation runs to CSV")
    s.add_argument("--patterns", type=_patterns, default=list(Pattern), help="comma list, e.g. c1,c3,c5")
    s.add_argument("--runs", type=_positive, default=10)
    s.add_argument("--steps", type=_positive, help="steps per run (default: from excitation duration)")

    s = sub.add_parser("dataset", parents=[common], help="simulate, window and split a training set")
    s.add_argument("--windows", type=_positive, help="training windows")
    s.add_argument("--name", default="dataset", help="dataset directory under --out")

    s = sub.add_parser("train", parents=[common], help="pretrain encoder and operator bank")
    s.add_argument("--data", default="dataset")
    s.add_argument("--epochs", type=_positive)
    s.add_argument("--batch", type=_positive)
    s.add_argument("--n-ops", type=int, choices=[1, 5])
    s.add_argument("--name", default="model")

    s = sub.add_parser("eval", parents=[common], help="evaluate checkpoints and baselines")
    s.add_argument("--data", default="dataset", help="dataset directory, or 'fresh' for a new held-out set")
    s.add_argument("--checkpoint", action="append", default=[], help="KODE1 checkpoint (repeatable)")
    s.add_argument("--baseline", action="append", default=[], help="baseline JSON (repeatable)")
    s.add_argument("--split", choices=["train", "val", "test"])
    s.add_argument("--horizon", type=_positive)
    s.add_argument("--model", choices=["deep-koopman", "edmd-kernel", "linear-ls"],
                   help="only evaluate models of this kind")

    s = sub.add_parser("adapt", parents=[common], help="re-fit the operator bank on new-plant data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="new-plant dataset directory (default: simulate per the transfer config)")
    s.add_argument("--no-freeze", action="store_true", help="also train the encoder")
    s.add_argument("--epochs", type=_positive)
    s.add_argument("--name", default="adapted")

    s = sub.add_parser("baseline", parents=[common], help="fit a least-squares baseline")
    s.add_argument("kind", choices=["edmd", "linear"])
    s.add_argument("--kernel", choices=["thinplate", "gaussian", "invquad", "invmultquad"])
    s.add_argument("--data", default="dataset")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full pipeline")
    s.add_argument("--coords", type=_positive, default=200)
    s.add_argument("--windows", type=_positive, default=4)
    s.add_argument("--horizon", type=_positive, default=10)
    return p


# ---------------------------------------------------------------------------
# helpers


def resolve_seed(flag: int | None, default: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("KODE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"KODE_SEED must be an integer, got {env!r}") from None
    return default


def _path(out: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else out / q


def _write_run_json(out: Path, args: argparse.Namespace, cfg: RunConfig, argv: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    opts = {k: (v if not isinstance(v, list) or not v or not isinstance(v[0], Pattern) else [p.label for p in v])
            for k, v in vars(args).items()}
    record = {"command": args.command, "argv": argv, "options": opts, "config": cfg.to_dict()}
    (out / "run.json").write_text(json.dumps(record, indent=2, default=str), encoding="utf-8")


def _load_dataset(path: Path):
    from .dataset import Dataset, DatasetError
    try:
        return Dataset.load(path)
    except DatasetError as exc:
        raise CliError("dataset", str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg: RunConfig, out: Path) -> dict:
    from dataclasses import replace
    from .dataset import Dataset, NormalizationSpec, simulate_runs

    exc = cfg.excitation
    if args.steps:
        exc = replace(exc, duration=args.steps * cfg.dataset.dt)
    pats = [args.patterns[i % len(args.patterns)] for i in range(args.runs)]
    trajs = simulate_runs(pats, cfg.plant, exc, cfg.dataset.dt, cfg.dataset.seed, threads=args.threads)
    names = [f"run_{k:04d}_{tr.pattern.label}" for k, tr in enumerate(trajs)]
    h_e = min(cfg.dataset.h_e, max(1, len(trajs[0].states) - 1 - cfg.dataset.h_p))
    ds = Dataset(cfg.dataset.dt, cfg.dataset.h_p, h_e, cfg.plant, exc, NormalizationSpec.from_excitation(exc),
                 cfg.dataset.seed, trajs, names, {"train": [], "test": list(range(len(trajs)))}, {})
    ds.save(out)
    return {"runs": len(trajs), "dir": str(out)}


def cmd_dataset(args, cfg: RunConfig, out: Path) -> dict:
    from .dataset import build_dataset

    ds = build_dataset(cfg.dataset, cfg.plant, cfg.excitation, threads=args.threads)
    path = ds.save(out / args.name)
    return {"dir": str(path), "pattern_counts": ds.pattern_counts().tolist(),
            "trajectories": {k: len(v) for k, v in ds.splits.items()}}


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    from .trainer import train

    ds = _load_dataset(_path(out, args.data))
    enc_cfg = cfg.encoder if cfg.encoder.h_p == ds.h_p else type(cfg.encoder)(**{**cfg.encoder.to_dict(),
                                                                                   "h_p": ds.h_p})
    res = train(ds, cfg.train, enc_cfg, out / args.name)
    (out / args.name / "history.json").write_text(json.dumps(res.history, indent=2), encoding="utf-8")
    return {"dir": str(out / args.name), "best_val_MDE": min(h["val_MDE"] for h in res.history)}


def _eval_dataset(args, cfg: RunConfig, out: Path):
    from .dataset import build_eval_dataset

    if args.data == "fresh":
        e = cfg.eval
        return build_eval_dataset(e.runs_per_pattern, e.seed, cfg.plant, cfg.excitation, cfg.dataset.dt,
                                  cfg.dataset.h_p, max(e.horizon, cfg.dataset.h_e), threads=args.threads)
    return _load_dataset(_path(out, args.data))


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    from .evaluation import REPORT_HEADER, emit_report, evaluate_model, read_report
    from .koopman import LiftedLinearModel
    from .trainer import CheckpointError, load_checkpoint

    models = []
    for c in args.checkpoint:
        try:
            ck = load_checkpoint(_path(out, c))
        except CheckpointError as exc:
            raise CliError("checkpoint", str(exc)) from None
        ck.extra.setdefault("name", "deep-koopman")
        models.append(ck)
    for b in args.baseline:
        p = _path(out, b)
        try:
            models.append(LiftedLinearModel.from_dict(json.loads(p.read_text(encoding="utf-8"))))
        except (OSError, KeyError, ValueError) as exc:
            raise CliError("baseline", f"{p}: {exc}") from None
    if not args.checkpoint and not args.baseline:
        for p in sorted(out.glob("baseline_*.json")):
            models.append(LiftedLinearModel.from_dict(json.loads(p.read_text(encoding="utf-8"))))
    if args.model:
        models = [m for m in models if getattr(m, "kind", "deep-koopman") == args.model]
    if not models:
        raise CliError("eval", "no models to evaluate")
    ds = _eval_dataset(args, cfg, out)
    split = args.split or ("test" if "test" in ds.splits and ds.splits["test"] else cfg.eval.split)
    if split not in ds.splits or not ds.splits[split]:
        split = "val"
    horizon = args.horizon or cfg.eval.horizon
    reports = [evaluate_model(m, ds, split, horizon) for m in models]
    # Keep rows of other models already in report.csv so successive evals accumulate.
    old = out / "report.csv"
    kept = []
    if old.is_file():
        names = {r.model for r in reports}
        kept = [row for row in read_report(old) if row["model"] not in names]
    emit_report(reports, out)
    if kept:
        import csv
        with open(old, "a", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            for row in kept:
                w.writerow([row[k] for k in REPORT_HEADER])
    return {r.model: {"MDE": r.aggregate.MDE, "MAE": r.aggregate.MAE, "windows": r.aggregate.windows,
                      "failures": r.aggregate.failures} for r in reports}


def cmd_adapt(args, cfg: RunConfig, out: Path) -> dict:
    from dataclasses import replace
    from .dataset import DatasetConfig, build_dataset
    from .trainer import CheckpointError, adapt_s2r, load_checkpoint

    try:
        ck = load_checkpoint(_path(out, args.checkpoint))
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    if args.data:
        ds = _load_dataset(_path(out, args.data))
    else:
        t = cfg.transfer
        plant_b = cfg.plant.perturbed(t.mass_scale, t.stiffness_scale)
        dcfg = replace(cfg.dataset, n_train_windows=t.n_train_windows, seed=t.seed, h_p=ck.encoder.h_p)
        ds = build_dataset(dcfg, plant_b, cfg.excitation, threads=args.threads)
        ds.save(out / f"{args.name}_data")
    tcfg = replace(cfg.train, lr0=cfg.transfer.lr0, epochs=args.epochs or cfg.transfer.epochs)
    try:
        res = adapt_s2r(ck, ds, tcfg, out / args.name, freeze_encoder=not args.no_freeze)
    except ValueError as exc:
        raise CliError("adapt", str(exc)) from None
    return {"dir": str(out / args.name), "best_val_MDE": min(h["val_MDE"] for h in res.history)}


def cmd_baseline(args, cfg: RunConfig, out: Path) -> dict:
    from .koopman import fit_baseline

    if args.kind == "edmd" and not args.kernel:
        raise CliError("usage", "baseline edmd requires --kernel")
    ds = _load_dataset(_path(out, args.data))
    s, u, s_next = ds.one_step_pairs()
    kernel = args.kernel if args.kind == "edmd" else None
    model = fit_baseline(s, u, s_next, kernel, cfg.eval.n_centers, np.random.default_rng([cfg.dataset.seed, 5]))
    path = out / f"baseline_{model.name}.json"
    path.write_text(json.dumps(model.to_dict()), encoding="utf-8")
    return {"model": model.name, "file": str(path)}


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> dict:
    from .gradcheck import pipeline_gradcheck

    err = pipeline_gradcheck(cfg, n_windows=args.windows, horizon=args.horizon, n_coords=args.coords,
                             seed=cfg.train.seed)
    print(f"max_rel_err {err:.3e}")
    if not err < 1e-4:
        raise CliError("gradcheck", f"max relative error {err:.3e} exceeds 1e-4")
    return {"max_rel_err": err}


COMMANDS = {
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "adapt": cmd_adapt,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def _apply_flags(args, cfg: RunConfig) -> RunConfig:
    seed = resolve_seed(args.seed, cfg.dataset.seed)
    overrides = {"dataset": {"seed": seed}, "train": {"seed": resolve_seed(args.seed, cfg.train.seed)}}
    if args.command == "dataset" and args.windows:
        overrides["dataset"]["n_train_windows"] = args.windows
    if args.command == "train":
        overrides["train"].update({"epochs": args.epochs, "batch": args.batch, "n_ops": args.n_ops})
    if args.command == "eval":
        overrides["eval"] = {"horizon": args.horizon, "split": args.split}
    return cfg.with_overrides(**overrides)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = _apply_flags(args, load_config(args.config))
        out.mkdir(parents=True, exist_ok=True)
        _write_run_json(out, args, cfg, argv)
        result = COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"kode: error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"kode: error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.kind == "usage" else EXIT_FAIL
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"kode: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"status": "ok", "command": args.command, "result": result}, default=float))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
