"""Command line entry points.

Subcommands: train, attack, defend-eval, report, gradcheck. Every config key
is available as a ``--key value`` override on top of an optional ``--config``
file. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, AttackKind, CWParams, DeepFoolParams, JSMAParams
from .colorspace import ColorSpace
from .config import DOCUMENTED_KEYS, RunConfig, apply_overrides, config_echo, parse_config_file
from .data import DataError, Dataset, load_builtin_digits, load_cifar10, load_mnist
from .defense import load_pipeline, save_pipeline, train_pipeline
from .harness import EvalSettings, ThreatModel, emit_report, parse_report, run_eval
from .model import DenseNetConfig, TrainSettings, build, load_model, save_model, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="colorshield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train an undefended model, a surrogate, or the defended pipeline"),
        ("attack", "craft one attack against a trained model and report results"),
        ("defend-eval", "full protocol: undefended vs defended reports"),
        ("report", "render a saved CSV report as markdown"),
        ("gradcheck", "finite-difference verification of the gradient engine"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key = value config file")
        for key in DOCUMENTED_KEYS:
            p.add_argument(f"--{key}", dest=f"opt_{key}", default=None, metavar="VALUE")
        if name == "report":
            p.add_argument("--input", required=True, help="CSV report to render")
            p.add_argument("--output", default=None, help="markdown output path")
    return parser


def _load_config(args) -> RunConfig:
    cfg = parse_config_file(args.config) if args.config else RunConfig()
    overrides = {
        key: getattr(args, f"opt_{key}")
        for key in DOCUMENTED_KEYS
        if getattr(args, f"opt_{key}", None) is not None
    }
    return apply_overrides(cfg, overrides)


def _model_config(cfg: RunConfig) -> DenseNetConfig:
    return DenseNetConfig(
        input_size=cfg.input_size,
        blocks=cfg.blocks,
        layers_per_block=cfg.layers_per_block,
        growth_rate=cfg.growth_rate,
        initial_channels=cfg.initial_channels,
        num_classes=cfg.num_classes,
    )


def _load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    root = cfg.data_dir or None
    if cfg.dataset == "builtin":
        return load_builtin_digits(size=cfg.input_size, seed=cfg.seed)
    if cfg.dataset == "mnist":
        return load_mnist(root, "train"), load_mnist(root, "test")
    if cfg.dataset == "cifar10":
        return load_cifar10(root, "train"), load_cifar10(root, "test")
    raise _UsageError(f"unknown dataset {cfg.dataset!r}")


def _train_settings(cfg: RunConfig, epochs: int, seed: int) -> TrainSettings:
    return TrainSettings(
        epochs=epochs,
        lr=cfg.lr,
        batch=cfg.batch,
        momentum=cfg.momentum,
        lr_decay=cfg.lr_decay,
        seed=seed,
    )


def attack_configs_from(cfg: RunConfig) -> list[AttackConfig]:
    """One AttackConfig per comma-separated name in cfg.attack."""
    configs = []
    for name in cfg.attack.split(","):
        name = name.strip()
        kind = AttackKind(name)
        configs.append(
            AttackConfig(
                kind=kind,
                epsilon=cfg.epsilon,
                alpha=cfg.alpha,
                iterations=cfg.iterations,
                target=None if cfg.target < 0 else cfg.target,
                cw=CWParams(
                    c_init=cfg.cw_c_init,
                    c_search_steps=cfg.cw_search_steps,
                    kappa=cfg.cw_kappa,
                    steps=cfg.cw_steps,
                    lr=cfg.cw_lr,
                ),
                jsma=JSMAParams(theta=cfg.jsma_theta, gamma=cfg.jsma_gamma),
                deepfool=DeepFoolParams(
                    overshoot=cfg.deepfool_overshoot, max_iter=cfg.deepfool_max_iter
                ),
                seed=cfg.seed,
                paper_sign=cfg.paper_sign,
            )
        )
    return configs


def _write_train_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for entry in log:
            writer.writerow(
                [entry.epoch, repr(entry.train_loss), repr(entry.train_acc),
                 "" if entry.val_acc is None else repr(entry.val_acc)]
            )


def _subset_for_training(ds: Dataset, cfg: RunConfig) -> Dataset:
    if cfg.train_size and cfg.train_size < len(ds):
        from .data import stratified_subset

        return stratified_subset(ds, cfg.train_size, seed=cfg.seed)
    return ds


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _load_datasets(cfg)
    train_ds = _subset_for_training(train_ds, cfg)
    mcfg = _model_config(cfg)

    if cfg.train_mode in ("undefended", "surrogate"):
        seed = cfg.surrogate_seed if cfg.train_mode == "surrogate" else cfg.seed
        model = build(mcfg, ColorSpace.RGB, seed=seed)
        log = train(
            model,
            train_ds.images,
            train_ds.labels,
            _train_settings(cfg, cfg.train_epochs, seed),
            val_images=test_ds.images,
            val_labels=test_ds.labels,
        )
        ckpt = out / f"model_{cfg.train_mode}.ckpt"
        save_model(ckpt, model)
        _write_train_log(out / f"training_log_{cfg.train_mode}.csv", log)
        print(f"saved {ckpt} (final val_acc={log[-1].val_acc:.4f})")
        return EXIT_OK

    if cfg.train_mode == "pipeline":
        from .denoise import DenoiseParams

        pipeline, logs = train_pipeline(
            mcfg,
            train_ds.images,
            train_ds.labels,
            seeds={s: cfg.seed + 100 + i for i, s in enumerate(
                (ColorSpace.RGB, ColorSpace.LAB, ColorSpace.HSV, ColorSpace.YUV))},
            denoiser=DenoiseParams(levels=cfg.denoise_levels),
            crop_fraction=cfg.crop_fraction,
            phase1=_train_settings(cfg, cfg.train_epochs, cfg.seed),
            phase2=_train_settings(cfg, cfg.phase2_epochs, cfg.seed),
        )
        pdir = out / "pipeline"
        save_pipeline(pdir, pipeline)
        for space, log in logs.items():
            entries = [e for e in log if hasattr(e, "epoch")]
            _write_train_log(out / f"training_log_member_{space.value}.csv", entries)
        print(f"saved pipeline to {pdir}")
        return EXIT_OK

    raise _UsageError(f"unknown train_mode {cfg.train_mode!r}")


def _eval_settings(cfg: RunConfig) -> EvalSettings:
    return EvalSettings(
        runs=cfg.runs,
        subset_size=cfg.eval_subset,
        base_seed=cfg.seed,
        record_wall_time=cfg.record_wall_time,
    )


def cmd_attack(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    ckpt = out / "model_undefended.ckpt"
    if not ckpt.exists():
        raise DataError(f"attack: missing checkpoint {ckpt}; run `colorshield train` first")
    model = load_model(ckpt)
    _, test_ds = _load_datasets(cfg)
    report = run_eval(
        model,
        test_ds,
        ThreatModel(tag="white_box"),
        attack_configs_from(cfg),
        _eval_settings(cfg),
        header_extra={"checkpoint": str(ckpt), **{f"cfg_{k}": v for k, v in config_echo(cfg).items()}},
    )
    path = out / "attack_report.csv"
    emit_report(report, path, "csv")
    for row in report.rows:
        print(
            f"{row.attack}: clean={row.clean_acc:.4f} robust={row.robust_acc:.4f} "
            f"success={row.success_rate:.4f} l2={row.mean_l2:.4f}"
        )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_defend_eval(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    model_ckpt = out / "model_undefended.ckpt"
    pipe_dir = out / "pipeline"
    if not model_ckpt.exists() or not (pipe_dir / "manifest.txt").exists():
        raise DataError(
            "defend-eval: need model_undefended.ckpt and pipeline/ under out_dir; run `colorshield train` twice"
        )
    model = load_model(model_ckpt)
    pipeline = load_pipeline(pipe_dir)
    _, test_ds = _load_datasets(cfg)
    configs = attack_configs_from(cfg)
    settings = _eval_settings(cfg)
    echo = {f"cfg_{k}": v for k, v in config_echo(cfg).items()}

    surrogate = None
    if cfg.threat == "black_box":
        surrogate_ckpt = out / "model_surrogate.ckpt"
        if not surrogate_ckpt.exists():
            raise DataError("defend-eval: black_box threat needs model_surrogate.ckpt")
        surrogate = load_model(surrogate_ckpt)

    undefended = run_eval(
        model,
        test_ds,
        ThreatModel(tag="white_box"),
        configs,
        settings,
        header_extra={"checkpoint": str(model_ckpt), **echo},
    )
    defended = run_eval(
        pipeline,
        test_ds,
        ThreatModel(tag=cfg.threat, surrogate=surrogate),
        configs,
        settings,
        header_extra={"checkpoint": str(pipe_dir), **echo},
    )
    u_path = out / "report_undefended.csv"
    d_path = out / "report_defended.csv"
    emit_report(undefended, u_path, "csv")
    emit_report(defended, d_path, "csv")
    if cfg.report_format == "markdown":
        emit_report(undefended, out / "report_undefended.md", "markdown")
        emit_report(defended, out / "report_defended.md", "markdown")
    for label, rep in (("undefended", undefended), ("defended", defended)):
        for row in rep.rows:
            print(
                f"{label:10s} {row.threat:9s} {row.attack:9s} eps={row.epsilon:g} "
                f"clean={row.clean_acc:.4f} robust={row.robust_acc:.4f}"
            )
    print(f"wrote {u_path} and {d_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = parse_report(args.input)
    output = args.output or str(Path(args.input).with_suffix(".md"))
    emit_report(report, output, "markdown")
    print(f"wrote {output}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .verification import op_gradient_sweep, model_gradient_check

    rng = np.random.default_rng(cfg.seed)
    failures = 0
    for name, err, tol in op_gradient_sweep(rng, trials_per_op=10):
        status = "ok" if err <= tol else "FAIL"
        if err > tol:
            failures += 1
        print(f"{name:22s} max_rel_err={err:.3e} tol={tol:.0e} {status}")
    err = model_gradient_check(rng)
    tol = 1e-2
    status = "ok" if err <= tol else "FAIL"
    if err > tol:
        failures += 1
    print(f"{'model-end-to-end':22s} max_rel_err={err:.3e} tol={tol:.0e} {status}")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "report":
            return cmd_report(args)
        cfg = _load_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "defend-eval":
            return cmd_defend_eval(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        raise _UsageError(f"unknown command {args.command!r}")
    except ad.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (_UsageError, ValueError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
