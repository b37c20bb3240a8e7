"""Command-line entry point: ``hemis {generate,train,eval,segment}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import baselines, data, evaluation, model, training
from .tensor import FormatError, make_rng, save_htf

log = logging.getLogger("hemis")


class UsageError(Exception):
    pass


# --- run configuration ----------------------------------------------------

ARCH_DEFAULTS = {"f1": 48, "f2": 48, "f3": 16, "kernel_size": 5, "n_classes": 4}
MLP_DEFAULTS = {"mlp_samples": 20000, "mlp_steps": 2000, "mlp_learning_rate": 0.01, "mlp_neighborhood": 1}


def default_run_config() -> dict:
    cfg = {f.name: f.default for f in fields(training.TrainConfig)}
    cfg.update(ARCH_DEFAULTS)
    cfg.update(MLP_DEFAULTS)
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_file=None, overrides=()) -> tuple[dict, dict]:
    """Built-in defaults < config file < ``--set key=value``; returns (config, sources)."""
    cfg = default_run_config()
    sources = {k: "default" for k in cfg}
    layers_ = []
    if config_file:
        try:
            with open(config_file, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_file} is not valid JSON: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError(f"config file {config_file} must hold a JSON object")
        layers_.append(("file", from_file))
    cli = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cli[key.strip()] = _parse_value(value)
    layers_.append(("cli", cli))
    for source, values in layers_:
        unknown = sorted(set(values) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys from {source}: {', '.join(unknown)}")
        for k, v in values.items():
            default = cfg[k]
            if isinstance(default, bool) and not isinstance(v, bool):
                raise UsageError(f"config key {k} expects true/false, got {v!r}")
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise UsageError(f"config key {k} expects a number, got {v!r}")
                if isinstance(default, int) and not isinstance(default, bool) and float(v) != int(v):
                    raise UsageError(f"config key {k} expects an integer, got {v!r}")
                v = type(default)(v)
            cfg[k], sources[k] = v, source
    return cfg, sources


def split_config(cfg: dict):
    train_keys = {f.name for f in fields(training.TrainConfig)}
    tc = training.TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys})
    return tc, {k: cfg[k] for k in ARCH_DEFAULTS}, {k: cfg[k] for k in MLP_DEFAULTS}


# --- helpers ----------------------------------------------------------------

def _set_threads(n):
    if n is None:
        env = os.environ.get("HEMIS_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError as exc:
                raise UsageError(f"HEMIS_THREADS must be an integer, got {env!r}") from exc
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _parse_size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size expects HxW, e.g. 64x64, got {text!r}") from exc
    return h, w


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


# --- subcommands ------------------------------------------------------------

def cmd_generate(args) -> int:
    h, w = _parse_size(args.size)
    if args.cases < 10:
        raise UsageError("--cases must be at least 10")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} is not empty")
    manifest = data.build_dataset(out, args.cases, args.seed, h, w, args.difficulty, args.normalization)
    counts = " / ".join(f"{s} {len(manifest.splits[s])}" for s in data.SPLITS)
    print(f"wrote {args.cases} cases ({h}x{w}, seed {args.seed}) to {out}: {counts}")
    return 0


def cmd_train(args) -> int:
    cfg, sources = resolve_config(args.config, args.set)
    for k in sorted(cfg):
        log.info("config %s = %r (%s)", k, cfg[k], sources[k])
    tc, arch, mlp_cfg = split_config(cfg)
    manifest = data.read_manifest(args.data)
    splits = data.load_splits(args.data)
    hc = model.HemisConfig(n_modalities=len(manifest.modality_names), modality_names=manifest.modality_names,
                           **arch)
    params = model.init_params(hc, make_rng(np.random.SeedSequence([tc.seed, 1])))
    if args.baseline:
        result = baselines.train_baseline_network(params, splits["train"], splits["valid"], tc)
    else:
        result = training.train(params, splits["train"], splits["valid"], tc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save_model(result.params, out)
    history = Path(args.history) if args.history else out.parent / "history.tsv"
    history.write_text(result.history_tsv(), encoding="utf-8")
    resolved = Path(args.resolved_config) if args.resolved_config else out.parent / "config.json"
    resolved.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"best epoch {result.best_epoch}, validation loss {result.best_valid_loss:.4f} "
          f"(initial {result.initial_valid_loss:.4f}); model written to {out}")
    if args.impute_mlps:
        bundle = baselines.train_imputation_mlps(
            splits["train"], n_samples=mlp_cfg["mlp_samples"], steps=mlp_cfg["mlp_steps"],
            learning_rate=mlp_cfg["mlp_learning_rate"], neighborhood=mlp_cfg["mlp_neighborhood"], seed=tc.seed)
        baselines.save_bundle(bundle, args.impute_mlps)
        print(f"{len(bundle)} imputation models written to {args.impute_mlps}")
    return 0


def cmd_eval(args) -> int:
    if args.baseline and not args.mlps:
        raise UsageError("--baseline needs --mlps for the imputation column")
    _require_file(args.hemis, "HeMIS model")
    hemis = model.load_model(args.hemis)
    baseline = bundle = None
    if args.baseline:
        _require_file(args.baseline, "baseline model")
        _require_file(args.mlps, "imputation bundle")
        baseline = model.load_model(args.baseline)
        bundle = baselines.load_bundle(args.mlps)
    test = list(data.load_dataset(args.data, "test"))
    report = evaluation.sweep_subsets(hemis, baseline, bundle, test)
    evaluation.emit_report(report, args.report, "tsv")
    if args.markdown:
        evaluation.emit_report(report, args.markdown, "markdown")
    for cat in report.categories:
        wins = ", ".join(f"{m} {n}" for m, n in report.wins(cat).items())
        print(f"{cat}: wins {wins} over {len(report.masks)} subsets")
    return 0


def cmd_segment(args) -> int:
    _require_file(args.model, "model")
    params = model.load_model(args.model)
    names = params.config.modality_names
    requested = [s.strip() for s in args.modalities.split(",") if s.strip()]
    if not requested:
        raise UsageError("--modalities must name at least one modality")
    try:
        mask = model.ModalityMask.from_names(requested, names)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not Path(args.case).is_dir():
        raise FileNotFoundError(f"case directory not found: {args.case}")
    case = data.load_case(args.case, names)
    seg = model.segment(case.images, mask, params)
    background = args.background or requested[0]
    if background not in names:
        raise UsageError(f"unknown background modality {background!r}")
    palette = evaluation.LESION_PALETTE if params.config.n_classes == 2 else evaluation.PALETTE
    evaluation.render_overlay(case.images[names.index(background)], seg, case.labels, args.out, palette)
    if args.labels:
        save_htf(seg.astype(np.float32), args.labels)
    print(f"segmented {case.case_id} with {','.join(requested)}; overlay written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hemis", description="Hetero-modal segmentation of synthetic phantoms.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: HEMIS_THREADS or the core count)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--size", default="64x64", help="image size as HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.add_argument("--normalization", choices=("case", "dataset"), default="case")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train HeMIS or the no-dropping baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=True, help="output model file (.hmz)")
    p.add_argument("--baseline", action="store_true", help="train without modality dropping")
    p.add_argument("--impute-mlps", metavar="PATH", help="also train the imputation MLPs into this bundle")
    p.add_argument("--history", help="history TSV path (default: history.tsv next to the model)")
    p.add_argument("--resolved-config", help="resolved config path (default: config.json next to the model)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sweep every modality subset on the test split")
    p.add_argument("--hemis", required=True)
    p.add_argument("--baseline")
    p.add_argument("--mlps")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="TSV output")
    p.add_argument("--markdown", help="optional markdown table output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment one case from a chosen set of modalities")
    p.add_argument("--model", required=True)
    p.add_argument("--case", required=True, help="case directory holding mod_*.htf")
    p.add_argument("--modalities", required=True, help="comma-separated names, e.g. F,T1c")
    p.add_argument("--out", required=True, help="overlay image (.ppm)")
    p.add_argument("--labels", help="optional raw label map (.htf)")
    p.add_argument("--background", help="modality shown under the overlay (default: first requested)")
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _set_threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hemis: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, FloatingPointError, ValueError, KeyError, RuntimeError) as exc:
        print(f"hemis: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
