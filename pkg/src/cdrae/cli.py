"""Command-line entry point: synth, ingest, train, evaluate, ablate, gradcheck."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, fields

from . import checkpoint, evaluation
from .config import CacdrConfig, ConfigError, LfacdrConfig, config_from_dict
from .data import (
    AXES, DataError, SyntheticSpec, apply_cold_start, generate_synthetic, ingest_pair, make_split,
    read_pair, write_pair,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .numerics import NumericalError

log = logging.getLogger("cdrae")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

RUN_DEFAULTS = {
    "seed": 42,
    "jobs": 1,
    "format": "table",
    "method": "cacdr",
    "repeats": 10,
    "ratio": 0.8,
    "use_init": True,
    "use_coupled": True,
}
STAGE_KEYS = ("epochs", "lr", "l2")
MODEL_KEYS = ("hidden", "latent_dim", "mapper_hidden", "batch_size", "lam") + tuple(
    f"{stage}.{k}" for stage in ("init", "coupled") for k in STAGE_KEYS
)
SYNTH_KEYS = tuple(f"synth.{f.name}" for f in fields(SyntheticSpec))
SOURCE_KEYS = ("data", "synth")
KNOWN_KEYS = set(RUN_DEFAULTS) | set(MODEL_KEYS) | set(SYNTH_KEYS) | set(SOURCE_KEYS)

PRECEDENCE = (
    "Settings resolve as: command-line flags (including --set) override the --config "
    "file, which overrides the published defaults. The config file is flat key=value "
    "text; '#' starts a comment. Model keys: " + ", ".join(MODEL_KEYS) +
    ". Synthetic data keys: " + ", ".join(SYNTH_KEYS) + "."
)


# --------------------------------------------------------------------------- config resolution


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    return text


def read_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = parse_value(value)
    return out


def _check_keys(d: dict, origin: str):
    unknown = sorted(set(d) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown setting(s) in {origin}: {', '.join(unknown)}")


def resolve(args) -> dict:
    """Merge defaults, config file and command-line values into one flat dict."""
    resolved = dict(RUN_DEFAULTS)
    if args.config:
        from_file = read_config_file(args.config)
        _check_keys(from_file, args.config)
        resolved.update(from_file)
    cli = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cli[key.strip()] = parse_value(value)
    for key in ("seed", "jobs", "format", "method", "repeats", "ratio", "data", "synth"):
        value = getattr(args, key, None)
        if value is not None:
            cli[key] = value
    if getattr(args, "no_init", False):
        cli["use_init"] = False
    if getattr(args, "no_coupled", False):
        cli["use_coupled"] = False
    _check_keys(cli, "command line")
    resolved.update(cli)
    if resolved["format"] not in ("json", "table"):
        raise ConfigError("format must be json or table")
    if int(resolved["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    if int(resolved["repeats"]) < 1:
        raise ConfigError("repeats must be >= 1")
    if not (resolved["use_init"] or resolved["use_coupled"]):
        raise ConfigError("at least one training stage must be enabled")
    if not 0.0 < float(resolved["ratio"]) < 1.0:
        raise ConfigError("ratio must lie in (0, 1)")
    return resolved


def model_config(resolved: dict):
    method = resolved["method"]
    if method == "baseline":
        return None
    cls = {"cacdr": CacdrConfig, "lfacdr": LfacdrConfig}.get(method)
    if cls is None:
        raise ConfigError(f"unknown method {method!r}")
    base = asdict(cls())
    for key in MODEL_KEYS:
        if key not in resolved:
            continue
        value = resolved[key]
        if "." in key:
            stage, name = key.split(".")
            base[stage][name] = value
        elif key == "lam" and cls is not LfacdrConfig:
            raise ConfigError("lam applies to lfacdr only")
        elif key in ("hidden", "mapper_hidden"):
            base[key] = tuple(value) if isinstance(value, list) else (value,)
        else:
            base[key] = value
    base["seed"] = int(resolved["seed"])
    try:
        return config_from_dict(cls, base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def synthetic_spec(resolved: dict) -> SyntheticSpec:
    spec = asdict(evaluation.reference_spec())
    for key in SYNTH_KEYS:
        if key in resolved:
            spec[key.split(".", 1)[1]] = resolved[key]
    try:
        return SyntheticSpec(**spec)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def load_data(resolved: dict):
    """The domain pair named by exactly one of ``data`` (a pair directory) or ``synth``."""
    has_data, has_synth = "data" in resolved, "synth" in resolved
    if has_data == has_synth:
        raise ConfigError("give exactly one of --data DIR or --synth default")
    if has_synth:
        if resolved["synth"] != "default":
            raise ConfigError("--synth accepts only 'default' (adjust it with synth.* settings)")
        pair, _ = generate_synthetic(synthetic_spec(resolved))
        return pair
    pair, _ = read_pair(resolved["data"])
    return pair


# --------------------------------------------------------------------------- output


def emit(text: str, path=None):
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)


def render(obj, fmt: str) -> str:
    return evaluation.dump_json(obj.to_dict()) if fmt == "json" else obj.table()


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    resolved = resolve(args)
    overrides = {f"synth.{k}": v for k, v in vars(args).items()
                 if k in {f.name for f in fields(SyntheticSpec)} and v is not None}
    resolved.update(overrides)
    resolved["synth.seed"] = resolved.get("synth.seed", resolved["seed"])
    if args.seed is not None:
        resolved["synth.seed"] = args.seed
    spec = synthetic_spec(resolved)
    pair, truth = generate_synthetic(spec)
    write_pair(args.out, pair, truth)
    log.info("wrote %s (source nnz %d, target nnz %d)", args.out, pair.source.nnz, pair.target.nnz)
    return EXIT_OK


def cmd_ingest(args) -> int:
    resolve(args)
    pair = ingest_pair(args.source, args.target, args.scenario, args.alignment, args.r_max,
                       args.delimiter, args.min_interactions)
    write_pair(args.out, pair)
    log.info("wrote %s: %d shared %s, source %s, target %s", args.out, pair.n_shared,
             pair.shared_axis, pair.source.shape, pair.target.shape)
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = resolve(args)
    config = model_config(resolved)
    pair = load_data(resolved)
    method = resolved["method"]
    report = evaluation.run_experiment(
        method, pair, config, repeats=int(resolved["repeats"]), seed=int(resolved["seed"]),
        ratio=float(resolved["ratio"]), use_init=bool(resolved["use_init"]),
        use_coupled=bool(resolved["use_coupled"]), jobs=int(resolved["jobs"]),
        keep_models=True, echo={"run": resolved},
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(evaluation.dump_json(report.to_dict()))
    if method != "baseline":
        split = {"ratio": float(resolved["ratio"]), "seed": int(resolved["seed"]), "repeat": 0}
        checkpoint.save(os.path.join(args.out, "checkpoint.json"), method, report.models[0],
                        {"run": resolved, "model": config.to_dict()}, split)
    emit(render(report, resolved["format"]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    method, model, raw = checkpoint.load(args.checkpoint)
    resolved = resolve(args)
    recorded = raw.get("config", {}).get("run", {})
    if "data" not in resolved and "synth" not in resolved:
        for key in SOURCE_KEYS + SYNTH_KEYS:
            if key in recorded:
                resolved[key] = recorded[key]
    pair = load_data(resolved)
    if pair.shared_axis != model.shared_axis:
        raise ConfigError("checkpoint and data disagree on the shared axis")
    split = raw.get("split", {})
    plan = make_split(pair.n_shared, float(split.get("ratio", resolved["ratio"])),
                      int(split.get("seed", resolved["seed"])), int(split.get("repeat", 0)))
    train_pair, test_view = apply_cold_start(pair, plan)
    rmse, mae = evaluation.score_model(method, model, train_pair, test_view, plan)
    report = evaluation.EvalReport(method, [rmse], [mae],
                                   config={"run": resolved, "split": split, "checkpoint": str(args.checkpoint)},
                                   variant="checkpoint")
    emit(render(report, resolved["format"]), args.output)
    return EXIT_OK


def cmd_ablate(args) -> int:
    resolved = resolve(args)
    if resolved["method"] == "baseline":
        raise ConfigError("ablations apply to cacdr and lfacdr only")
    config = model_config(resolved)
    pair = load_data(resolved)
    grid = evaluation.AblationGrid(args.grid, tuple(args.dims))
    result = evaluation.run_ablation(
        grid, resolved["method"], pair, config, repeats=int(resolved["repeats"]),
        seed=int(resolved["seed"]), ratio=float(resolved["ratio"]), jobs=int(resolved["jobs"]),
        echo={"run": resolved},
    )
    emit(render(result, resolved["format"]), args.output)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    resolved = resolve(args)
    result = run_gradcheck(int(resolved["seed"]), args.nets, args.inject_fault)
    if resolved["format"] == "json":
        text = evaluation.dump_json({
            "nets": result.n_nets, "max_error_random": result.max_random,
            "max_error_stacked": result.max_stacked, "max_error": result.max_error,
            "tolerance": TOLERANCE, "passed": result.passed,
        })
    else:
        text = (f"random nets ({result.n_nets}): max relative error {result.max_random:.3e}\n"
                f"stacked encoder/mapper/decoder: max relative error {result.max_stacked:.3e}\n"
                f"{'PASS' if result.passed else 'FAIL'} (tolerance {TOLERANCE:.0e})\n")
    emit(text)
    return EXIT_OK if result.passed else EXIT_FAIL


# --------------------------------------------------------------------------- parser


def _dims(text: str):
    try:
        dims = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError("latent dims must be positive integers")
    return dims


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (default 42)")
    common.add_argument("--jobs", type=_positive, help="parallel repeats (default 1)")
    common.add_argument("--format", choices=("json", "table"), help="report format (default table)")
    common.add_argument("--quiet", action="store_true", help="suppress progress logging")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", metavar="DIR", help="pair directory written by synth or ingest")
    data.add_argument("--synth", metavar="default", help="use the pinned synthetic pair")
    data.add_argument("--method", choices=evaluation.METHODS)
    data.add_argument("--repeats", type=_positive)
    data.add_argument("--ratio", type=float, help="training fraction of shared entities")

    parser = argparse.ArgumentParser(prog="cdrae", description="Coupled-autoencoder cross-domain recommendation.",
                                     epilog=PRECEDENCE)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic domain pair", epilog=PRECEDENCE)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--source-sparsity", dest="source_sparsity", type=float)
    p.add_argument("--target-sparsity", dest="target_sparsity", type=float)
    p.add_argument("--cross-map", dest="cross_map", choices=("identity", "linear", "mlp"))
    p.add_argument("--shared-axis", dest="shared_axis", choices=AXES)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="build a domain pair from two rating logs",
                       epilog=PRECEDENCE)
    p.add_argument("--source", required=True, metavar="PATH")
    p.add_argument("--target", required=True, metavar="PATH")
    p.add_argument("--scenario", choices=AXES, default="items", help="which entities the domains share")
    p.add_argument("--alignment", metavar="PATH", help="source_id,target_id pairs")
    p.add_argument("--r-max", dest="r_max", type=float, default=5.0)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--min-interactions", dest="min_interactions", type=int, default=5)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common, data], help="train and evaluate over repeated splits",
                       epilog=PRECEDENCE)
    p.add_argument("--out", default="cdrae_run", metavar="DIR", help="writes report.json and checkpoint.json")
    p.add_argument("--no-init", action="store_true", help="skip the initialization stage")
    p.add_argument("--no-coupled", action="store_true", help="skip the coupled stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, data], help="score a checkpoint on its held-out split",
                       epilog=PRECEDENCE)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--output", metavar="PATH")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common, data], help="with/without ablations and latent sweep",
                       epilog=PRECEDENCE)
    p.add_argument("--grid", choices=("coupled", "init", "latent"), required=True)
    p.add_argument("--dims", type=_dims, default=list(evaluation.DEFAULT_DIMS), help="e.g. 8,32,64,128,256")
    p.add_argument("--output", metavar="PATH")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--nets", type=_positive, default=100)
    p.add_argument("--inject-fault", action="store_true", help="corrupt one analytic gradient")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cdrae: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"cdrae: numerical failure in stage {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError, checkpoint.CheckpointError) as exc:
        print(f"cdrae: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
