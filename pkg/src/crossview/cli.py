"""Command-line frontend: dataset generation, training, evaluation, gradient
checking, and the gamma sweep, all driven by one dotted-key config.

Every command archives its fully resolved configuration as
``config.archive`` in the output directory; re-running with that archive as
``--config`` reproduces the outputs bit-identically. Input dataset
directories are never written to.

Exit codes: 0 success, 1 validation error (bad flags, config, or input
files), 2 runtime failure (training aborts, failed gradient checks).
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from . import data as data_mod
from . import evaluation, gradcheck, nets, trainer
from .config import RunConfig
from .errors import (
    ConfigError,
    ContractError,
    CrossviewError,
    DimensionError,
    DomainError,
    FormatError,
    ParseError,
)

VALIDATION_ERRORS = (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    ParseError,
    FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _resolve_config(args, extra_config_path=None) -> RunConfig:
    path = getattr(args, "config", None) or extra_config_path
    return RunConfig.from_sources(
        config_path=path,
        seed=getattr(args, "seed", None),
        overrides=getattr(args, "set", None) or (),
    )


def _load_split(cfg: RunConfig, data_dir):
    ds = data_mod.load_dataset(data_dir)
    if ds.feature_dim != cfg["data.feature_dim"]:
        raise DimensionError(
            f"dataset feature_dim {ds.feature_dim} does not match configured "
            f"data.feature_dim {cfg['data.feature_dim']}"
        )
    return data_mod.split(ds, cfg.split_spec())


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    cfg.validate()
    out = Path(args.out)
    ds = data_mod.gen_synthetic(**cfg.generator_kwargs())
    data_mod.save_dataset(ds, out)
    cfg.save_archive(out / "config.archive")
    print(f"wrote {len(ds)} samples ({ds.num_identities} identities) to {out}")
    return 0


def _write_run_outputs(out: Path, cfg: RunConfig, model, history, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(model, out / "checkpoint", train_config_hash=cfg.config_hash())
    history.to_csv(out / "history.csv")
    cfg.save_archive(out / "config.archive")
    report.save(out / "report.json", out / "cmc.csv")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.symmetric:
        cfg.set("train.symmetric_nets", True)
    if args.adaptive_weights:
        cfg.set("train.use_adaptive_weights", True)
    cfg.validate()
    train_ds, valid_ds, _test_ds = _load_split(cfg, args.data)
    model, history = trainer.fit(train_ds, valid_ds, cfg.train_config())
    report = evaluation.evaluate(model, valid_ds, gallery_seed=cfg.gallery_seed)
    _write_run_outputs(Path(args.out), cfg, model, history, report)
    print(
        f"trained {len(history.records)} epochs/rounds; validation rank-1 "
        f"{report.rank_values[1]:.3f}, mAP {report.map_score:.3f}, "
        f"view-disc accuracy {report.dd_confusion_accuracy:.3f}"
    )
    return 0


def cmd_eval(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    sibling_archive = ckpt_dir.parent / "config.archive"
    cfg = _resolve_config(args, extra_config_path=sibling_archive if sibling_archive.exists() else None)
    cfg.validate()
    model = nets.load_checkpoint(ckpt_dir)
    ds = data_mod.load_dataset(args.data)
    if model.feature_dim != ds.feature_dim:
        raise DimensionError(
            f"checkpoint expects feature_dim {model.feature_dim}, dataset has {ds.feature_dim}"
        )
    if args.split == "full":
        chosen = ds
    else:
        parts = dict(zip(("train", "valid", "test"), data_mod.split(ds, cfg.split_spec())))
        chosen = parts[args.split]
    report = evaluation.evaluate(model, chosen, gallery_seed=cfg.gallery_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json", out / "cmc.csv")
    cfg.save_archive(out / "config.archive")
    print(
        f"split={args.split} probes={report.num_probes} rank-1 {report.rank_values[1]:.3f} "
        f"mAP {report.map_score:.3f} view-disc accuracy {report.dd_confusion_accuracy:.3f}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all_checks(seed=args.seed or 0, trials=args.trials)
    width = max(len(r.name) for r in results)
    print(f"{'target'.ljust(width)}  {'max rel err':>12}  {'tolerance':>10}  status")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  {r.max_error:12.3e}  {r.tolerance:10.1e}  {status}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} targets passed")
    return 2 if failed else 0


def cmd_sweep_gamma(args) -> int:
    cfg = _resolve_config(args)
    if args.gammas:
        cfg.set_raw("sweep.gammas", args.gammas)
    cfg.validate()
    gammas = cfg["sweep.gammas"]
    if any(g < 0 for g in gammas):
        raise ConfigError(f"sweep gammas must be >= 0, got {gammas}")
    train_ds, valid_ds, test_ds = _load_split(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["gamma,rank1,map"]
    for gamma in gammas:
        run_cfg = RunConfig(dict(cfg.values))
        run_cfg.set("loss.gamma", float(gamma))
        model, _history = trainer.fit(train_ds, valid_ds, run_cfg.train_config())
        report = evaluation.evaluate(model, test_ds, gallery_seed=run_cfg.gallery_seed)
        rows.append(f"{repr(float(gamma))},{repr(report.rank_values[1])},{repr(report.map_score)}")
        print(f"gamma={gamma}: test rank-1 {report.rank_values[1]:.3f} mAP {report.map_score:.3f}")
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    cfg.save_archive(out / "config.archive")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="crossview", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=str, default=None, help="dotted-key config file")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if out_required:
            p.add_argument("--out", type=str, required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic cross-view dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the full staged training pipeline")
    common(p)
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--symmetric", action="store_true", help="twin-architecture mapping ablation")
    p.add_argument(
        "--adaptive-weights", action="store_true", help="hardness-weighted similarity loss"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=("train", "valid", "test", "full"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=gradcheck.DEFAULT_TRIALS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-gamma", help="train once per gamma and tabulate test rank-1")
    common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--gammas", type=str, default=None, help="comma-separated values")
    p.set_defaults(func=cmd_sweep_gamma)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CrossviewError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
