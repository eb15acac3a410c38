"""Command-line entry point.

Subcommands: gen (synthetic data), train, eval, compare (the ten-variant
ablation), gradcheck, dump (modulation vectors), score (cluster separation).
Every command is deterministic under fixed flags and seed, and echoes its
effective configuration into the output directory as run_config.json.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .conditioning import DialectVocabulary
from .data import (
    DatasetFormatError,
    build_manifest,
    default_spec,
    generate_bundle,
    load_dataset,
    save_dataset,
)
from .diagnostics import GRAD_TOLERANCE, variant_grad_check
from .evaluation import (
    POLICIES,
    SuiteConfig,
    VARIANT_ORDER,
    cluster_score,
    compare_suite,
    dump_film,
    frame_error_rate,
    load_film_dump,
    save_film_dump,
)
from .model import (
    ConfigError,
    ModelFormatError,
    build_model,
    load_model,
    save_model,
    variant_config,
)
from .training import TrainConfig, TrainingDiverged, fine_tune, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

OUT_ENV_VAR = "DIALECTAM_OUT"

DEFAULT_CONFIG = {
    "model": {
        "num_layers": 2,
        "hidden": 16,
        "lookahead_tau": 2,
        "repr_units": 32,
        "combiner_units": 32,
        "unknown_prob": 0.1,
    },
    "train": {
        "batch_size": 32,
        "lr": 3e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "max_epochs": 20,
        "seed": 1,
        "lr_floor_div": 64.0,
        "fine_tune_epochs": 4,
        "fine_tune_lr_scale": 0.1,
    },
    "data": {
        "feature_dim": 8,
        "num_classes": 6,
        "spec_seed": 7,
        "native": "native",
        "native_train": 400,
        "accent_train": 100,
        "num_test": 40,
    },
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _merge_config(base, override, path=""):
    merged = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config key {where!r}", EXIT_CONFIG)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key {where!r} must be a section", EXIT_CONFIG)
            merged[key] = _merge_config(base[key], value, where)
        else:
            merged[key] = value
    return merged


def _coerce(text, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def load_run_config(config_path=None, overrides=()):
    """Defaults, then the optional JSON file, then --set overrides."""
    merged = DEFAULT_CONFIG
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config file: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"bad config file: {exc}", EXIT_CONFIG) from exc
        if not isinstance(file_cfg, dict):
            raise CliError("config file must hold a JSON object", EXIT_CONFIG)
        merged = _merge_config(merged, file_cfg)
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects section.key=value, got {item!r}", EXIT_CONFIG)
        dotted, text = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in merged or parts[1] not in merged[parts[0]]:
            raise CliError(f"unknown config key {dotted!r}", EXIT_CONFIG)
        section, key = parts
        try:
            value = _coerce(text, merged[section][key])
        except ValueError as exc:
            raise CliError(f"bad value for {dotted!r}: {exc}", EXIT_CONFIG) from exc
        merged = dict(merged)
        merged[section] = dict(merged[section])
        merged[section][key] = value
    return merged


def _train_config(cfg, seed=None):
    section = cfg["train"]
    tc = TrainConfig(
        batch_size=section["batch_size"], lr=section["lr"], beta1=section["beta1"],
        beta2=section["beta2"], adam_eps=section["adam_eps"],
        max_epochs=section["max_epochs"], seed=section["seed"],
        lr_floor_div=section["lr_floor_div"],
    )
    if seed is not None:
        tc = replace(tc, seed=seed)
    return tc


def _suite_config(cfg):
    return SuiteConfig(
        num_layers=cfg["model"]["num_layers"], hidden=cfg["model"]["hidden"],
        lookahead_tau=cfg["model"]["lookahead_tau"],
        repr_units=cfg["model"]["repr_units"], combiner_units=cfg["model"]["combiner_units"],
        unknown_prob=cfg["model"]["unknown_prob"], native=cfg["data"]["native"],
        train=_train_config(cfg), fine_tune_epochs=cfg["train"]["fine_tune_epochs"],
        fine_tune_lr_scale=cfg["train"]["fine_tune_lr_scale"],
    )


def _resolve_out(args):
    out = args.out or os.environ.get(OUT_ENV_VAR)
    if not out:
        raise CliError(f"--out is required (or set {OUT_ENV_VAR})", EXIT_CONFIG)
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory: {exc}", EXIT_IO) from exc
    return path


def _echo_config(cfg, out_dir):
    try:
        with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
            json.dump(cfg, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise CliError(f"cannot write run_config.json: {exc}", EXIT_IO) from exc


def _load_dataset(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_IO) from exc
    except DatasetFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc


def _load_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc}", EXIT_IO) from exc
    except ModelFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc


def cmd_gen(args):
    cfg = load_run_config(args.config, args.set or ())
    out_dir = _resolve_out(args)
    data_cfg = cfg["data"]
    spec = default_spec(
        feature_dim=data_cfg["feature_dim"], num_classes=data_cfg["num_classes"],
        seed=data_cfg["spec_seed"], native_train=data_cfg["native_train"],
        accent_train=data_cfg["accent_train"], num_test=data_cfg["num_test"],
    )
    bundle = generate_bundle(spec, args.seed)
    manifest = {}
    try:
        for split, dataset in bundle.items():
            save_dataset(dataset, out_dir / f"{split}.txt")
            manifest[split] = build_manifest(dataset).to_dict()
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise CliError(f"cannot write datasets: {exc}", EXIT_IO) from exc
    _echo_config(cfg, out_dir)
    dialects = sorted({d for split in manifest.values() for d in split["per_dialect"]})
    print(f"wrote {', '.join(sorted(bundle))} for {len(dialects)} dialects to {out_dir}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args.config, args.set or ())
    out_dir = _resolve_out(args)
    train_set = _load_dataset(args.data)
    dev_set = _load_dataset(args.dev)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    tcfg = _train_config(cfg, seed=seed)

    try:
        if args.variant == "M2":
            if not args.base_model or not args.dialect:
                raise CliError("variant M2 is fine-tuning: it needs --base-model and --dialect",
                               EXIT_CONFIG)
            base = _load_model(args.base_model)
            subset = train_set.filter_dialect(args.dialect)
            if len(subset) == 0:
                raise CliError(f"no training utterances for dialect {args.dialect!r}", EXIT_CONFIG)
            ft_cfg = replace(tcfg, max_epochs=cfg["train"]["fine_tune_epochs"])
            model, log = fine_tune(base, subset, dev_set.filter_dialect(args.dialect),
                                   ft_cfg, lr_scale=cfg["train"]["fine_tune_lr_scale"])
        else:
            vocab = DialectVocabulary.of(train_set.dialects(),
                                         include_unknown=(args.variant == "M10"))
            model_cfg = variant_config(
                args.variant, vocab, input_dim=train_set.feature_dim,
                num_classes=train_set.num_classes, hidden=cfg["model"]["hidden"],
                num_layers=cfg["model"]["num_layers"],
                unknown_prob=cfg["model"]["unknown_prob"],
                lookahead_tau=cfg["model"]["lookahead_tau"],
                repr_units=cfg["model"]["repr_units"],
                combiner_units=cfg["model"]["combiner_units"])
            model = build_model(model_cfg, seed=seed)
            model, log = train(model, train_set, dev_set, tcfg)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from exc

    try:
        save_model(model, out_dir / "model.bin")
        with open(out_dir / "train_log.json", "w", encoding="utf-8") as fh:
            json.dump(log, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from exc
    _echo_config(cfg, out_dir)
    final = log[-1]["dev_fer"] if log else float("nan")
    print(f"{args.variant}: trained {len(log)} epochs, final dev frame error {final:.4f}")
    return EXIT_OK


def cmd_eval(args):
    model = _load_model(args.model)
    dataset = _load_dataset(args.data)
    try:
        table = frame_error_rate(model, dataset, policy=args.policy, fallback=args.fallback)
    except (ValueError, KeyError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    for dialect in table.dialects():
        print(f"{dialect}: {table.fer(dialect):.4f}")
    print(f"overall: {table.overall():.4f}")
    if args.json:
        payload = {d: table.fer(d) for d in table.dialects()}
        payload["overall"] = table.overall()
        try:
            with open(args.json, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise CliError(f"cannot write {args.json}: {exc}", EXIT_IO) from exc
    return EXIT_OK


def cmd_compare(args):
    cfg = load_run_config(args.config, args.set or ())
    out_dir = _resolve_out(args)
    bundle_dir = Path(args.bundle)
    bundle = {split: _load_dataset(bundle_dir / f"{split}.txt")
              for split in ("train", "dev", "test")}
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError as exc:
        raise CliError(f"bad --seeds: {exc}", EXIT_CONFIG) from exc
    if not seeds:
        raise CliError("--seeds must name at least one seed", EXIT_CONFIG)
    try:
        report, _ = compare_suite(bundle, _suite_config(cfg), seeds, jobs=args.jobs)
    except (ValueError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    text = report.to_text()
    try:
        with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from exc
    _echo_config(cfg, out_dir)
    print(text, end="")
    failed = [row.variant for row in report.rows if row.failed]
    if failed:
        print(f"diverged rows: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args):
    variants = VARIANT_ORDER if args.variant == "all" else [args.variant]
    worst = 0.0
    for variant in variants:
        err = variant_grad_check(variant, seed=args.seed)
        worst = max(worst, err)
        print(f"{variant}: max relative gradient error {err:.3e}")
    if worst >= args.tolerance:
        print(f"FAIL: worst error {worst:.3e} >= tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_dump(args):
    model = _load_model(args.model)
    dataset = _load_dataset(args.data)
    try:
        dump = dump_film(model, dataset, policy=args.policy, fallback=args.fallback)
    except (ValueError, KeyError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    try:
        save_film_dump(dump, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(f"dumped {len(dump.ids)} records x {dump.num_layers} layers to {args.out}")
    return EXIT_OK


def cmd_score(args):
    try:
        dump = load_film_dump(args.dump)
    except OSError as exc:
        raise CliError(f"cannot read {args.dump}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    try:
        score = cluster_score(dump, args.layer)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    print(f"layer {args.layer}: silhouette {score:.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dialectam",
        description="Multi-dialect acoustic model family: data, training, ablation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run config; unknown keys are rejected")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config field (repeatable)")
        if out:
            p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR})")

    p = sub.add_parser("gen", help="generate the synthetic dialect bundle")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one family member")
    common(p)
    p.add_argument("--variant", required=True, choices=VARIANT_ORDER)
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--dev", required=True, help="dev dataset file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--base-model", help="trained M1 model file (M2 only)")
    p.add_argument("--dialect", help="dialect to fine-tune on (M2 only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frame error rate of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--policy", default="true", choices=POLICIES)
    p.add_argument("--fallback", help="dialect fed for out-of-vocabulary utterances")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and compare all ten variants")
    common(p)
    p.add_argument("--bundle", required=True, help="directory with train/dev/test.txt")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    p.add_argument("--variant", default="all", choices=["all"] + VARIANT_ORDER)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump", help="dump generated modulation vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output JSONL file")
    p.add_argument("--policy", default="true", choices=POLICIES)
    p.add_argument("--fallback")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("score", help="silhouette of a dump at one layer")
    p.add_argument("--dump", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    raise SystemExit(main())
