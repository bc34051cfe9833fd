"""Command-line interface: ``crossreg gen|train|eval|ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import harness, training
from .encoders import load_params, save_params
from .metrics import MetricsReport, metrics_csv
from .model import Model, ModelConfig, OracleModel, init_params

log = logging.getLogger("crossreg")

CONFIG_KEYS = {
    "gen": {"out", "scenes", "seed", "points", "grid"},
    "train": {"data", "steps", "lr", "seed", "out", "no_gradnorm", "no_dpnp", "no_contrast", "single_stage"},
    "eval": {"data", "ckpt", "out", "threshold_deg", "threshold_m"},
    "ablate": {"data", "ckpt", "settings", "out", "seed"},
}


class CliError(Exception):
    """User-facing failure: message printed, exit status 2."""


def threads() -> int:
    raw = os.environ.get("CROSSREG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise CliError(f"CROSSREG_THREADS must be an integer, got {raw!r}") from exc


def read_config(path: str, command: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{path}: config file not found")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS[command]:
            raise CliError(f"{path}:{n}: unknown key {key!r} for '{command}'")
        out[key] = value
    return out


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must look like 32x32, got {text!r}") from exc
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("grid sides must be positive")
    return w, h


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise CliError(f"expected a boolean, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossreg", description="Image to point-cloud registration toolkit.")
    p.add_argument("--config", help="key=value file with defaults for the chosen command")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--out")
    g.add_argument("--scenes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--grid", type=_parse_grid)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--no-gradnorm", action="store_true", default=None)
    t.add_argument("--no-dpnp", action="store_true", default=None)
    t.add_argument("--no-contrast", action="store_true", default=None)
    t.add_argument("--single-stage", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data")
    e.add_argument("--ckpt")
    e.add_argument("--out")
    e.add_argument("--threshold-deg", type=float)
    e.add_argument("--threshold-m", type=float)

    a = sub.add_parser("ablate", help="benchmark a checkpoint across ablation settings")
    a.add_argument("--data")
    a.add_argument("--ckpt")
    a.add_argument("--settings")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    return p


DEFAULTS = {
    "gen": {"scenes": 10, "seed": 0, "points": 300, "grid": (32, 32)},
    "train": {"steps": 300, "lr": 0.01, "seed": 0, "no_gradnorm": False, "no_dpnp": False,
              "no_contrast": False, "single_stage": False},
    "eval": {"threshold_deg": 10.0, "threshold_m": 5.0},
    "ablate": {"seed": 0},
}
REQUIRED = {"gen": ["out"], "train": ["data", "out"], "eval": ["data", "ckpt", "out"],
            "ablate": ["data", "ckpt", "settings", "out"]}
CASTS = {"scenes": int, "seed": int, "points": int, "steps": int, "lr": float, "threshold_deg": float,
         "threshold_m": float, "no_gradnorm": _flag, "no_dpnp": _flag, "no_contrast": _flag,
         "single_stage": _flag}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags and check required options."""
    cmd = args.command
    opts = dict(DEFAULTS[cmd])
    if args.config:
        for key, value in read_config(args.config, cmd).items():
            try:
                opts[key] = _parse_grid(value) if key == "grid" else CASTS.get(key, str)(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"{args.config}: bad value for {key}: {exc}") from exc
    for key in CONFIG_KEYS[cmd]:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    missing = [k for k in REQUIRED[cmd] if opts.get(k) is None]
    if missing:
        raise CliError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return opts


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{path}: {what} not found")
    return p


def _require_dataset(path: str) -> Path:
    d = Path(path)
    if not (d / harness.MANIFEST).is_file():
        raise CliError(f"{d / harness.MANIFEST}: dataset manifest not found")
    return d


def _check_writable(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"{parent}: output directory does not exist")
    return p


def cmd_gen(o: dict) -> int:
    if o["scenes"] < 0:
        raise CliError("--scenes must be non-negative")
    scenes = [harness.generate_scene(o["seed"] + i, o["points"], o["grid"]) for i in range(o["scenes"])]
    meta = {"seed": o["seed"], "points": o["points"], "grid": list(o["grid"])}
    path = harness.write_dataset(o["out"], scenes, meta)
    print(f"wrote {len(scenes)} scenes and {path}")
    return 0


def _model_config(single_stage: bool = False) -> ModelConfig:
    return replace(ModelConfig(), single_stage=single_stage)


def cmd_train(o: dict) -> int:
    data = _require_dataset(o["data"])
    out = _check_writable(o["out"])
    if o["steps"] < 0 or o["lr"] < 0:
        raise CliError("--steps and --lr must be non-negative")
    scenes = harness.load_dataset(data)
    tcfg = training.TrainConfig(lr=o["lr"], steps=o["steps"], seed=o["seed"], use_gradnorm=not o["no_gradnorm"],
                                use_dpnp=not o["no_dpnp"], use_contrast=not o["no_contrast"],
                                single_stage=o["single_stage"])
    cfg = _model_config(o["single_stage"])
    res = training.train(scenes, tcfg, cfg, init_params(cfg, tcfg.seed), log_every=50)
    save_params(out, res.params)
    meta = {"single_stage": tcfg.single_stage, "steps": tcfg.steps, "seed": tcfg.seed}
    Path(str(out) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    stem = out.with_suffix("") if out.suffix else out
    Path(f"{stem}.curve.csv").write_text(training.curve_csv(res.history))
    Path(f"{stem}.curve.svg").write_text(training.curve_svg(res.history))
    print(f"wrote {out} and {stem}.curve.csv")
    return 0


ORACLE = "oracle"


def _load_model(ckpt: str):
    """Checkpoint file, or the keyword ``oracle`` for ground-truth features."""
    if ckpt == ORACLE:
        return OracleModel(_model_config())
    p = _require_file(ckpt, "checkpoint")
    single = False
    meta = Path(str(p) + ".json")
    if meta.is_file():
        single = bool(json.loads(meta.read_text()).get("single_stage", False))
    try:
        params = load_params(p)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return Model(_model_config(single), params)


def _map(fn, items):
    n = threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_eval(o: dict) -> int:
    data = _require_dataset(o["data"])
    model = _load_model(o["ckpt"])
    out = _check_writable(o["out"])
    scenes = harness.load_dataset(data)
    if not scenes:
        raise CliError(f"{data}: dataset has no scenes")
    results = _map(lambda s: model.evaluate(s, o["threshold_deg"], o["threshold_m"]), scenes)
    report = MetricsReport.from_scenes(results)
    out.write_text(metrics_csv(report))
    print(f"median RRE {report.median_rre():.3f} deg, recall {report.recall:.3f}, wrote {out}")
    return 0


def cmd_ablate(o: dict) -> int:
    data = _require_dataset(o["data"])
    model = _load_model(o["ckpt"])
    settings_path = _require_file(o["settings"], "settings file")
    out = _check_writable(o["out"])
    try:
        settings = harness.read_settings(settings_path)
    except ValueError as exc:
        raise CliError(f"{settings_path}: {exc}") from exc
    scenes = harness.load_dataset(data)
    rows = harness.run_benchmark(model.evaluate, scenes, settings, seed=o["seed"], threads=threads())
    out.write_text(harness.benchmark_csv(rows))
    print(f"wrote {out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except CliError as exc:
        print(f"crossreg: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, harness.SceneGenerationError) as exc:
        print(f"crossreg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
