"""Command-line entry point wiring synthesis, training, and evaluation.

Option precedence is flags > config file (key=value lines) > environment
(`CF_DATA_DIR` for the data root) > built-in defaults. Every command that
produces artifacts drops exactly one `manifest.json` into its output
directory with the fully resolved configuration; `replay` re-executes a
command from such a manifest and reproduces the primary artifacts byte for
byte (wall time lives only in the manifest).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .baselines import METHODS as BASELINE_METHODS
from .evalreport import ALL_METHODS, CF_METHODS, EvalReport, StudyConfig, emit, run_matrix
from .model import (
    CheckpointError,
    CloudFormerConfig,
    save_checkpoint,
    schema_fingerprint,
)
from .preprocess import CANONICAL_SEEDS, make_split
from .synthgen import ConfigError, InterferenceConfig, gen_dataset
from .traceio import MetricSchema, TraceError, read_dataset, validate_dataset_dir, write_dataset
from .train import TrainConfig, TrainDivergenceError, train_loop

VARIANT_CHOICES = ("full", "temporal_only", "system_only")
PRESET_CHOICES = ("tiny", "desk", "full")


class UsageError(Exception):
    """Bad flag/config-file value detected after parsing; maps to exit 2."""


# option casting ---------------------------------------------------------------

def _cast_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"expected an integer, got {raw!r}") from None


def _cast_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"expected a number, got {raw!r}") from None


def _cast_str(raw: str) -> str:
    return raw


def _cast_seeds(raw: str) -> tuple[int, ...]:
    """Inclusive ranges `a..b` and comma-separated combinations thereof."""
    seeds: list[int] = []
    for part in str(raw).split(","):
        part = part.strip()
        if ".." in part:
            lo_s, _, hi_s = part.partition("..")
            lo, hi = _cast_int(lo_s), _cast_int(hi_s)
            if lo > hi:
                raise UsageError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part:
            seeds.append(_cast_int(part))
    if not seeds:
        raise UsageError(f"no seeds in {raw!r}")
    out = []
    for s in seeds:
        if s not in out:
            out.append(s)
    return tuple(out)


def _cast_methods(raw) -> tuple[str, ...]:
    if isinstance(raw, (list, tuple)):
        names = [str(m) for m in raw]
    else:
        names = [m.strip() for m in str(raw).split(",") if m.strip()]
    if not names:
        raise UsageError("no methods given")
    for m in names:
        if m not in ALL_METHODS:
            raise UsageError(f"unknown method {m!r}; known: {', '.join(ALL_METHODS)}")
    return tuple(names)


def _choice(value: str, allowed: tuple[str, ...], what: str) -> str:
    if value not in allowed:
        raise UsageError(f"{what} must be one of {', '.join(allowed)}, got {value!r}")
    return value


# option tables ----------------------------------------------------------------
# key -> (cast, default, help); None default means "derived later".

_DATA_OPT = {"data_dir": (_cast_str, None, "dataset root [default: $CF_DATA_DIR or ./data]")}

SYNTH_OPTS = {
    **_DATA_OPT,
    "out": (_cast_str, None, "output directory [default: the data dir]"),
    "apps": (_cast_int, 11, "number of applications [default: 11]"),
    "runs_per_app": (_cast_int, 64, "labeled runs per application [default: 64]"),
    "static_frac": (_cast_float, 0.55, "fraction of static-only applications [default: 0.55]"),
    "t_min": (_cast_int, 16, "shortest run duration in seconds [default: 16]"),
    "t_max": (_cast_int, 64, "longest run duration in seconds [default: 64]"),
    "schema": (_cast_str, "desk", "metric schema, desk or full [default: desk]"),
    "n_base": (_cast_int, 12, "base metrics in the desk schema [default: 12]"),
    "seed": (_cast_int, 0, "generator seed [default: 0]"),
    "alpha": (_cast_float, 0.8, "contention coefficient [default: 0.8]"),
    "beta": (_cast_float, 0.6, "contention-load cross coefficient [default: 0.6]"),
    "gamma": (_cast_float, 0.9, "quadratic contention coefficient [default: 0.9]"),
    "noise_sigma": (_cast_float, 0.05, "metric noise level [default: 0.05]"),
}

VALIDATE_OPTS = dict(_DATA_OPT)

_MODEL_OPTS = {
    "preset": (_cast_str, "desk", "model size preset: tiny, desk or full [default: desk]"),
    "dropout": (_cast_float, None, "dropout override [default: preset value]"),
}

_FIT_OPTS = {
    "epochs": (_cast_int, 120, "training epochs [default: 120]"),
    "batch_size": (_cast_int, 32, "minibatch size [default: 32]"),
    "peak_lr": (_cast_float, 8e-3, "peak learning rate [default: 0.008]"),
    "patience": (_cast_int, 120, "early-stopping patience in epochs [default: 120]"),
    "val_fraction": (_cast_float, 0.15, "per-app validation holdout fraction [default: 0.15]"),
}

TRAIN_OPTS = {
    **_DATA_OPT,
    "out": (_cast_str, None, "output directory [default: <data-dir>/artifacts/train]"),
    "variant": (_cast_str, "full", "model variant: full, temporal_only or system_only "
                                   "[default: full]"),
    **_MODEL_OPTS,
    **_FIT_OPTS,
    "seed": (_cast_int, 0, "weight init / shuffle seed [default: 0]"),
    "split_seed": (_cast_int, 0, "application split seed [default: 0]"),
}

_STUDY_OPTS = {
    **_DATA_OPT,
    "seeds": (_cast_seeds, CANONICAL_SEEDS, "split seeds, e.g. 0..5 or 0,2,4 [default: 0..5]"),
    **_MODEL_OPTS,
    **_FIT_OPTS,
    "budget": (_cast_int, 8, "hyperparameter search candidates [default: 8]"),
    "k_folds": (_cast_int, 3, "cross-validation folds for the search [default: 3]"),
    "lstm_hidden": (_cast_int, 32, "LSTM hidden width [default: 32]"),
    "lstm_epochs": (_cast_int, 40, "LSTM training epochs [default: 40]"),
    "jobs": (_cast_int, 1, "worker threads across seeds and methods [default: 1]"),
}

BASELINES_OPTS = {
    **_STUDY_OPTS,
    "out": (_cast_str, None, "output directory [default: <data-dir>/artifacts/baselines]"),
    "methods": (_cast_methods, BASELINE_METHODS,
                "comma-separated baseline list [default: lr,glr,dt,rf,lstm]"),
}

ABLATE_OPTS = {
    **_STUDY_OPTS,
    "out": (_cast_str, None, "output directory [default: <data-dir>/artifacts/ablate]"),
}

EVAL_OPTS = {
    **_STUDY_OPTS,
    "out": (_cast_str, None, "output directory [default: <data-dir>/artifacts/eval]"),
    "methods": (_cast_methods, ("lr", "glr", "dt", "rf", "lstm", "cf"),
                "comma-separated method list [default: lr,glr,dt,rf,lstm,cf]"),
}

REPORT_OPTS = {
    "source": (_cast_str, None, "existing report.json to re-render (required)"),
    "out": (_cast_str, None, "output directory [default: the source's directory]"),
}

REPLAY_OPTS = {
    "manifest": (_cast_str, None, "manifest.json of the run to reproduce (required)"),
    "out": (_cast_str, None, "output directory [default: the manifest's directory]"),
}


# resolution -------------------------------------------------------------------

def _read_config_file(path: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(("#", ";")) or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        value = value.strip().strip("'\"")
        cfg[key.strip().replace("-", "_")] = value
    return cfg


def _resolve(ns: argparse.Namespace, opts: dict) -> dict:
    """Apply flags > file > env > defaults and cast everything."""
    file_cfg = _read_config_file(ns.config) if getattr(ns, "config", None) else {}
    unknown = sorted(set(file_cfg) - set(opts))
    if unknown:
        raise UsageError(f"unknown config file keys: {', '.join(unknown)}")
    resolved = {}
    for key, (cast, default, _help) in opts.items():
        raw = getattr(ns, key)
        if raw is None:
            raw = file_cfg.get(key)
        if raw is None and key == "data_dir":
            raw = os.environ.get("CF_DATA_DIR")
        if raw is None:
            resolved[key] = default
        else:
            resolved[key] = cast(raw)
    if "data_dir" in resolved and resolved["data_dir"] is None:
        resolved["data_dir"] = "data"
    return resolved


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def _write_manifest(out_dir: Path, command: str, resolved: dict, *,
                    seeds, schema_hash: str, wall: float) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "resolved": {k: _jsonable(v) for k, v in sorted(resolved.items())},
        "seeds": [int(s) for s in seeds],
        "inputs": {"data_dir": resolved.get("data_dir")},
        "outputs": {"out": str(out_dir)},
        "schema_hash": schema_hash,
        "wall_time_s": round(wall, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_dir(res: dict, command: str) -> Path:
    if res.get("out"):
        return Path(res["out"])
    return Path(res["data_dir"]) / "artifacts" / command


def _model_config(res: dict, n_cols: int) -> CloudFormerConfig:
    preset = _choice(res["preset"], PRESET_CHOICES, "preset")
    if preset == "tiny":
        cfg = CloudFormerConfig.tiny(n_cols)
    elif preset == "desk":
        cfg = CloudFormerConfig.desk(n_cols)
    else:
        cfg = CloudFormerConfig(S=n_cols)
    if res["dropout"] is not None:
        from dataclasses import asdict
        cfg = CloudFormerConfig(**{**asdict(cfg), "dropout": float(res["dropout"])})
    return cfg


def _train_config(res: dict, seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=res["epochs"], batch_size=res["batch_size"],
                       seed=seed, peak_lr=res["peak_lr"],
                       patience=max(1, res["patience"]),
                       val_fraction=res["val_fraction"])


def _study_config(res: dict, methods: tuple[str, ...], n_cols: int) -> StudyConfig:
    return StudyConfig(
        methods=methods,
        seeds=res["seeds"],
        model=_model_config(res, n_cols),
        train=_train_config(res),
        lstm_hidden=res["lstm_hidden"],
        lstm_train=TrainConfig(epochs=res["lstm_epochs"], batch_size=res["batch_size"],
                               peak_lr=3e-3, patience=15),
        budget=res["budget"],
        k_folds=res["k_folds"],
        batch_size=res["batch_size"],
        jobs=res["jobs"],
    )


# commands ---------------------------------------------------------------------

def cmd_synth(res: dict) -> int:
    t0 = time.perf_counter()
    schema_kind = _choice(res["schema"], ("desk", "full"), "schema")
    schema = MetricSchema.default() if schema_kind == "full" else MetricSchema.desk(res["n_base"])
    interference = InterferenceConfig(alpha=res["alpha"], beta=res["beta"],
                                      gamma=res["gamma"], noise_sigma=res["noise_sigma"])
    dataset = gen_dataset(res["apps"], res["runs_per_app"], res["static_frac"],
                          (res["t_min"], res["t_max"]), res["seed"],
                          schema=schema, interference=interference)
    out = Path(res["out"]) if res.get("out") else Path(res["data_dir"])
    write_dataset(dataset, out)
    _write_manifest(out, "synth", res, seeds=[res["seed"]],
                    schema_hash=schema_fingerprint(schema),
                    wall=time.perf_counter() - t0)
    print(f"wrote {len(dataset.runs)} runs, {len(dataset.apps)} apps, "
          f"{schema.n_cols} metric columns to {out}")
    return 0


def cmd_validate(res: dict) -> int:
    violations = validate_dataset_dir(Path(res["data_dir"]))
    for v in violations:
        print(v)
    print(f"{len(violations)} violations")
    return 1 if violations else 0


def cmd_train(res: dict) -> int:
    t0 = time.perf_counter()
    variant = _choice(res["variant"], VARIANT_CHOICES, "variant")
    dataset = read_dataset(Path(res["data_dir"]))
    split = make_split(dataset, res["split_seed"])
    mcfg = _model_config(res, dataset.schema.n_cols)
    tcfg = _train_config(res, seed=res["seed"])
    if res["epochs"] == 0:
        print("warning: epochs=0, writing initialized weights without training",
              file=sys.stderr)
    params, stats, log = train_loop(variant, dataset, split, mcfg, tcfg)
    out = _out_dir(res, "train")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", params, stats, dataset.schema)
    split.to_json(out / "split.json")
    best_val = log.best_val_mae if log.epochs else None
    (out / "trainlog.json").write_text(json.dumps({
        "epochs": log.history(),
        "best_epoch": log.best_epoch,
        "best_val_mae": best_val,
        "stopped_early": log.stopped_early,
        "total_steps": log.total_steps,
    }, indent=2) + "\n")
    _write_manifest(out, "train", res, seeds=[res["seed"]],
                    schema_hash=schema_fingerprint(dataset.schema),
                    wall=time.perf_counter() - t0)
    if log.epochs:
        print(f"trained {variant} for {len(log.epochs)} epochs; "
              f"best val MAE {log.best_val_mae:.3f}pp at epoch {log.best_epoch}; "
              f"checkpoint at {out / 'checkpoint.npz'}")
    else:
        print(f"wrote initialized {variant} checkpoint to {out / 'checkpoint.npz'}")
    return 0


def _run_study(res: dict, methods: tuple[str, ...], command: str) -> int:
    t0 = time.perf_counter()
    dataset = read_dataset(Path(res["data_dir"]))
    study = _study_config(res, methods, dataset.schema.n_cols)
    report = run_matrix(dataset, study)
    out = _out_dir(res, command)
    emit(report, out)
    _write_manifest(out, command, res, seeds=res["seeds"],
                    schema_hash=schema_fingerprint(dataset.schema),
                    wall=time.perf_counter() - t0)
    for m in report.methods:
        a = report.aggregate[m]
        print(f"{m:12s} MAE {a['mae_mean']:6.2f} +- {a['mae_std']:5.2f}  "
              f"MSE {a['mse_mean']:8.2f} +- {a['mse_std']:7.2f}")
    print(f"report written to {out}")
    return 0


def cmd_baselines(res: dict) -> int:
    methods = _cast_methods(res["methods"])
    bad = [m for m in methods if m in CF_METHODS]
    if bad:
        raise UsageError(f"{', '.join(bad)} are model variants; use ablate or eval")
    return _run_study(res, methods, "baselines")


def cmd_ablate(res: dict) -> int:
    return _run_study(res, CF_METHODS, "ablate")


def cmd_eval(res: dict) -> int:
    return _run_study(res, _cast_methods(res["methods"]), "eval")


def cmd_report(res: dict) -> int:
    t0 = time.perf_counter()
    if not res.get("source"):
        raise UsageError("report requires --source pointing at a report.json")
    source = Path(res["source"])
    report = EvalReport.from_json(source)
    out = Path(res["out"]) if res.get("out") else source.parent
    emit(report, out)
    digest = hashlib.sha256(source.read_bytes()).hexdigest()
    _write_manifest(out, "report", res, seeds=report.seeds,
                    schema_hash=digest, wall=time.perf_counter() - t0)
    print(f"re-rendered {source} into {out}")
    return 0


def cmd_replay(res: dict) -> int:
    if not res.get("manifest"):
        raise UsageError("replay requires --manifest pointing at a manifest.json")
    path = Path(res["manifest"])
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load manifest: {exc}") from None
    command = payload.get("command")
    if command not in REPLAYABLE:
        raise UsageError(f"manifest command {command!r} is not replayable")
    resolved = {k: tuple(v) if isinstance(v, list) else v
                for k, v in payload.get("resolved", {}).items()}
    if res.get("out"):
        resolved["out"] = res["out"]
    elif "out" in resolved:
        resolved["out"] = payload["outputs"]["out"]
    return REPLAYABLE[command](resolved)


REPLAYABLE = {
    "synth": cmd_synth,
    "train": cmd_train,
    "baselines": cmd_baselines,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "report": cmd_report,
}


# parser -----------------------------------------------------------------------

def _formatter(prog):
    return argparse.HelpFormatter(prog, width=96)


def _add_options(sub: argparse.ArgumentParser, opts: dict) -> None:
    sub.add_argument("--config", metavar="FILE", default=None,
                     help="key=value config file; flags override it")
    for key, (_cast, _default, hlp) in opts.items():
        sub.add_argument("--" + key.replace("_", "-"), dest=key,
                         metavar=key.upper(), default=None, help=hlp)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudformer", formatter_class=_formatter,
        description="Synthesize labeled VM traces, train degradation models, "
                    "and emit evaluation reports.")
    parser.add_argument("--version", action="version", version=f"cloudformer {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    specs = [
        ("synth", SYNTH_OPTS, "generate a labeled synthetic dataset"),
        ("validate", VALIDATE_OPTS, "check a dataset directory against every invariant"),
        ("train", TRAIN_OPTS, "train one model variant and write a checkpoint"),
        ("baselines", BASELINES_OPTS, "fit reference methods across seeds"),
        ("ablate", ABLATE_OPTS, "compare full model against single-branch variants"),
        ("eval", EVAL_OPTS, "run the full method-by-seed study"),
        ("report", REPORT_OPTS, "re-render artifacts from an existing report.json"),
        ("replay", REPLAY_OPTS, "re-execute a command from its manifest"),
    ]
    for name, opts, help_text in specs:
        sub = subs.add_parser(name, help=help_text, description=help_text,
                              formatter_class=_formatter)
        _add_options(sub, opts)
    return parser


COMMANDS = {
    "synth": (SYNTH_OPTS, cmd_synth),
    "validate": (VALIDATE_OPTS, cmd_validate),
    "train": (TRAIN_OPTS, cmd_train),
    "baselines": (BASELINES_OPTS, cmd_baselines),
    "ablate": (ABLATE_OPTS, cmd_ablate),
    "eval": (EVAL_OPTS, cmd_eval),
    "report": (REPORT_OPTS, cmd_report),
    "replay": (REPLAY_OPTS, cmd_replay),
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_help()
        return 2
    opts, runner = COMMANDS[ns.command]
    try:
        resolved = _resolve(ns, opts)
        return runner(resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (TraceError, ConfigError, CheckpointError, TrainDivergenceError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
