"""Command-line entry point: ``tune``, ``evaluate``, ``rate``, ``bench`` and ``synth``.

Settings resolve in this order, later winning: built-in defaults, the
top level of a TOML ``--config`` file, the file's ``[<command>]`` table,
then flags given on the command line.

Exit codes are 0 on success, 1 for usage errors, 2 for data errors and 3
for numerical failures.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import re
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import baselines, evaluation, synth, tuning
from .data import DataError, MatchDataset, build_design, format_match_csv, read_match_csv
from .kernels import EXPERIMENTS, KernelError, KernelSpec, experiment_kernel, kernel_from_dict, unpack, uses_surface
from .laplace import ConvergenceError, fit_laplace

log = logging.getLogger("pairgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Settings that do not change results and so stay out of the config hash.
_UNHASHED = {"threads", "out_dir", "output", "config", "command", "verbose"}

DEFAULTS = {
    "common": {"out_dir": ".", "threads": 1, "seed": 0, "time_scale": 300.0, "jitter": None, "verbose": False},
    "tune": {
        "data": None,
        "experiment": "matern32",
        "kernel": None,
        "train_start": None,
        "train_end": None,
        "method": "random",
        "iters": 50,
    },
    "evaluate": {
        "data": None,
        "models": "gp,elo,glicko",
        "theta": [],
        "eval_start": None,
        "eval_end": None,
        "train_start": None,
        "mode": "moderated",
        "elo_k": None,
        "glicko_initial_sd": None,
        "glicko_period_sd": None,
        "period_days": 1,
        "baseline_iters": 50,
    },
    "rate": {"data": None, "theta": None, "as_of": None, "surface": None, "top_n": 8, "train_start": None},
    "bench": {
        "sizes": "500,1000,2000,4000",
        "repetitions": 3,
        "players_per_match": 0.1,
        "experiment": "matern32",
        "kernel": None,
    },
    "synth": {
        "players": 50,
        "matches": 2000,
        "experiment": "matern32",
        "kernel": None,
        "day_gap": 7,
        "per_day": None,
        "output": None,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except (TypeError, ValueError):
        raise UsageError(f"bad date {text!r}, expected YYYY-MM-DD") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pairgp", description="Gaussian-process paired-comparison ratings.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p):
        p.add_argument("--config", help="TOML file with settings; flags override it")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--threads", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--time-scale", dest="time_scale", type=float)
        p.add_argument("--jitter", type=float)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    def kernel_choice(p):
        p.add_argument("--experiment", choices=EXPERIMENTS)
        p.add_argument("--kernel", help="kernel JSON file; overrides --experiment")

    p = sub.add_parser("tune", help="maximise the approximate LML over kernel hyperparameters",
                       argument_default=argparse.SUPPRESS)
    common(p)
    kernel_choice(p)
    p.add_argument("--data")
    p.add_argument("--train-start", dest="train_start")
    p.add_argument("--train-end", dest="train_end")
    p.add_argument("--method", choices=("random", "bo"))
    p.add_argument("--iters", type=int)

    p = sub.add_parser("evaluate", help="walk-forward evaluation of GP and baseline models",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--data")
    p.add_argument("--models", help="comma-separated subset of gp,elo,glicko")
    p.add_argument("--theta", action="append", help="best-theta JSON from tune; repeat for several GP models")
    p.add_argument("--eval-start", dest="eval_start")
    p.add_argument("--eval-end", dest="eval_end")
    p.add_argument("--train-start", dest="train_start", help="ignore matches before this date")
    p.add_argument("--mode", choices=("moderated", "point"))
    p.add_argument("--elo-k", dest="elo_k", type=float)
    p.add_argument("--glicko-initial-sd", dest="glicko_initial_sd", type=float)
    p.add_argument("--glicko-period-sd", dest="glicko_period_sd", type=float)
    p.add_argument("--period-days", dest="period_days", type=int)
    p.add_argument("--baseline-iters", dest="baseline_iters", type=int)

    p = sub.add_parser("rate", help="Elo-scale rating table at a date", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--data")
    p.add_argument("--theta")
    p.add_argument("--as-of", dest="as_of")
    p.add_argument("--surface")
    p.add_argument("--top-n", dest="top_n", type=int)
    p.add_argument("--train-start", dest="train_start")

    p = sub.add_parser("bench", help="time fits on synthetic data of growing size", argument_default=argparse.SUPPRESS)
    common(p)
    kernel_choice(p)
    p.add_argument("--sizes", help="comma-separated ascending match counts")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--players-per-match", dest="players_per_match", type=float)

    p = sub.add_parser("synth", help="sample a synthetic match file from the GP prior",
                       argument_default=argparse.SUPPRESS)
    common(p)
    kernel_choice(p)
    p.add_argument("--players", type=int)
    p.add_argument("--matches", type=int)
    p.add_argument("--day-gap", dest="day_gap", type=int)
    p.add_argument("--per-day", dest="per_day", type=int)
    p.add_argument("--output", help="output CSV path (default <out-dir>/synthetic.csv)")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, TOML file and explicit flags into one dict."""
    command = args.command
    cfg = {**DEFAULTS["common"], **DEFAULTS[command]}
    flags = vars(args)
    if flags.get("config"):
        path = Path(flags["config"])
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        known = set().union(*DEFAULTS.values())
        top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        own = raw.get(command, {})
        unknown = (set(top) | set(own)) - known
        if unknown:
            raise UsageError(f"{path}: unknown settings {sorted(unknown)}")
        # shared top-level keys apply only where the command has them
        cfg.update({k: v for k, v in top.items() if k in cfg})
        stray = set(own) - set(cfg)
        if stray:
            raise UsageError(f"{path}: [{command}] does not take {sorted(stray)}")
        cfg.update(own)
    cfg.update({k: v for k, v in flags.items() if k in cfg})
    cfg["command"] = command
    return cfg


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in sorted(cfg.items()) if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _header(cfg: dict) -> str:
    return f"pairgp {cfg['command']} config={config_hash(cfg)}"


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "", [])]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_data(path) -> MatchDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    return read_match_csv(path)


def _kernel(cfg: dict) -> tuple[str, KernelSpec]:
    if cfg.get("kernel"):
        path = Path(cfg["kernel"])
        if not path.exists():
            raise DataError(f"kernel file not found: {path}")
        return path.stem, kernel_from_dict(json.loads(path.read_text(encoding="utf-8")))
    return cfg["experiment"], experiment_kernel(cfg["experiment"])


def _load_theta(path) -> tuple[str, KernelSpec]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"theta file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        return doc.get("name", path.stem), kernel_from_dict(doc["kernel"])
    except KeyError:
        raise DataError(f"{path}: no 'kernel' entry") from None


def _slug(name: str) -> str:
    """File-name-safe form of a model name: ``matern32*surface`` -> ``matern32_surface``."""
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / name
    target.write_text(text, encoding="utf-8")
    log.info("wrote %s", target)
    return target


def _json_with_header(cfg: dict, doc: dict) -> str:
    return json.dumps({"_comment": _header(cfg), **doc}, indent=2, sort_keys=False) + "\n"


def cmd_tune(cfg: dict) -> int:
    _need(cfg, "data")
    if cfg["iters"] < 1:
        raise UsageError("--iters must be at least 1")
    dataset = _load_data(cfg["data"])
    start = _date(cfg["train_start"]) if cfg["train_start"] else dataset.start_date
    end = _date(cfg["train_end"]) if cfg["train_end"] else dataset.end_date
    if start and end and start > end:
        raise UsageError("--train-start is after --train-end")
    window = dataset.between(start, end) if dataset.n_matches else dataset
    name, spec = _kernel(cfg)
    trace = tuning.tune_model(
        spec, window, cfg["method"], cfg["iters"], cfg["seed"], cfg["time_scale"], cfg["jitter"], cfg["threads"]
    )
    out = Path(cfg["out_dir"])
    _write(out, f"tune_{_slug(name)}_trace.csv", trace.to_csv(_header(cfg)))
    best = unpack(spec, trace.best_theta)
    doc = {
        "name": name,
        "kernel": best.to_dict(),
        "theta": dict(zip(trace.names, trace.best_theta.tolist())),
        "lml": trace.best_value,
        "method": trace.method,
        "iters": len(trace.values),
        "seed": cfg["seed"],
    }
    _write(out, f"tune_{_slug(name)}_best.json", _json_with_header(cfg, doc))
    print(f"best lml {trace.best_value:.6f} at " + ", ".join(f"{k}={v:.4g}" for k, v in doc["theta"].items()))
    return EXIT_OK


def _baseline_configs(cfg, dataset, eval_start, train_start) -> list[evaluation.ModelConfig]:
    models = [m.strip() for m in cfg["models"].split(",") if m.strip()]
    history = dataset.before(eval_start)
    if train_start is not None:
        history = MatchDataset.from_records(r for r in history.records if r.date >= train_start)
    out = []
    if "elo" in models:
        k = cfg["elo_k"]
        if k is None:
            if not history.n_matches:
                raise DataError("no matches before --eval-start to fit Elo k; pass --elo-k")
            k = baselines.fit_baseline(history, "elo", iters=cfg["baseline_iters"], seed=cfg["seed"])[0]["k_factor"]
        out.append(evaluation.ModelConfig("elo", "elo", elo_k=float(k), train_start=train_start))
    if "glicko" in models:
        s0, sp = cfg["glicko_initial_sd"], cfg["glicko_period_sd"]
        if s0 is None or sp is None:
            if not history.n_matches:
                raise DataError("no matches before --eval-start to fit Glicko; pass its parameters")
            best, _ = baselines.fit_baseline(
                history, "glicko", iters=cfg["baseline_iters"], seed=cfg["seed"], period_length_days=cfg["period_days"]
            )
            s0 = best["initial_sd"] if s0 is None else s0
            sp = best["period_sd"] if sp is None else sp
        params = baselines.GlickoParams(float(s0), float(sp), int(cfg["period_days"]))
        out.append(evaluation.ModelConfig("glicko", "glicko", glicko=params, train_start=train_start))
    return out


def cmd_evaluate(cfg: dict) -> int:
    _need(cfg, "data", "eval_start", "eval_end")
    models = {m.strip() for m in cfg["models"].split(",") if m.strip()}
    if not models or models - {"gp", "elo", "glicko"}:
        raise UsageError(f"--models must be a subset of gp,elo,glicko, got {cfg['models']!r}")
    thetas = cfg["theta"] if isinstance(cfg["theta"], list) else [cfg["theta"]]
    if "gp" in models and not thetas:
        raise UsageError("gp evaluation needs --theta (run tune first)")
    eval_start, eval_end = _date(cfg["eval_start"]), _date(cfg["eval_end"])
    if eval_start > eval_end:
        raise UsageError("--eval-start is after --eval-end")
    train_start = _date(cfg["train_start"]) if cfg["train_start"] else None
    dataset = _load_data(cfg["data"])
    if not dataset.between(eval_start, eval_end).n_matches:
        raise DataError(f"no matches between {eval_start} and {eval_end} in {cfg['data']}")

    configs = []
    if "gp" in models:
        for path in thetas:
            name, spec = _load_theta(path)
            configs.append(
                evaluation.ModelConfig(
                    f"gp_{name}", "gp", kernel=spec, time_scale=cfg["time_scale"], jitter=cfg["jitter"],
                    mode=cfg["mode"], train_start=train_start,
                )
            )
    configs += _baseline_configs(cfg, dataset, eval_start, train_start)

    out = Path(cfg["out_dir"])
    header = _header(cfg)
    reports = []
    for mc in configs:
        report = evaluation.walk_forward_evaluate(mc, dataset, eval_start, eval_end, cfg["threads"])
        if mc.kind == "elo":
            report.extra["k_factor"] = mc.elo_k
        elif mc.kind == "glicko":
            report.extra.update(initial_sd=mc.glicko.initial_sd, period_sd=mc.glicko.period_sd)
        elif mc.kind == "gp":
            report.extra["mode"] = mc.mode
        reports.append(report)
        summary = {k: v for k, v in report.summary().items() if k != "wall_time_ms"}
        _write(out, f"report_{_slug(mc.name)}.json", _json_with_header(cfg, summary))
        _write(out, f"predictions_{_slug(mc.name)}.csv", report.to_csv(header))
        print(f"{mc.name}: log_loss={report.log_loss:.4f} accuracy={report.accuracy:.4f} n={report.n_matches}")
    _write(out, "comparison.csv", evaluation.comparison_csv(reports, header))
    return EXIT_OK


def cmd_rate(cfg: dict) -> int:
    _need(cfg, "data", "theta", "as_of")
    if cfg["top_n"] is not None and cfg["top_n"] < 1:
        raise UsageError("--top-n must be at least 1")
    as_of = _date(cfg["as_of"])
    name, spec = _load_theta(cfg["theta"])
    if cfg["surface"] and not uses_surface(spec):
        raise UsageError(f"--surface given but kernel {name!r} has no surface inputs")
    if not cfg["surface"] and uses_surface(spec):
        raise UsageError(f"kernel {name!r} uses surfaces; pass --surface")
    dataset = _load_data(cfg["data"])
    train = dataset.before(as_of + dt.timedelta(days=1))
    if cfg["train_start"]:
        start = _date(cfg["train_start"])
        train = MatchDataset.from_records(r for r in train.records if r.date >= start)
    design = build_design(train, use_surface=uses_surface(spec), time_scale=cfg["time_scale"])
    fit, prior = fit_laplace(spec, design, cfg["jitter"])
    # before any data every player sits at the prior; list them all
    players = None if train.n_matches else sorted(dataset.players)
    table = evaluation.rating_table(fit, prior, design, spec, as_of, cfg["surface"], cfg["top_n"], players)
    suffix = f"_{cfg['surface']}" if cfg["surface"] else ""
    _write(Path(cfg["out_dir"]), f"ratings_{_slug(name)}{suffix}.csv", table.to_csv(_header(cfg)))
    for player, mean, sd in table.rows:
        print(f"{player:<24} {mean:7.1f} {sd:6.1f}")
    return EXIT_OK


def _sizes(text) -> list[int]:
    try:
        sizes = [int(s) for s in str(text).split(",") if s.strip()] if not isinstance(text, list) else list(text)
    except ValueError:
        raise UsageError(f"bad --sizes {text!r}") from None
    if not sizes or any(s < 1 for s in sizes) or sizes != sorted(sizes):
        raise UsageError(f"--sizes must be positive and ascending, got {text!r}")
    return sizes


def bench_datasets(sizes, spec, seed=0, players_per_match=0.1, time_scale=300.0) -> list[MatchDataset]:
    """Independent synthetic datasets, one per size, with the roster growing in proportion."""
    return [
        synth.generate(max(2, round(players_per_match * n)), n, spec, seed=seed + i, time_scale=time_scale)[0]
        for i, n in enumerate(sizes)
    ]


def cmd_bench(cfg: dict) -> int:
    sizes = _sizes(cfg["sizes"])
    if cfg["repetitions"] < 1:
        raise UsageError("--repetitions must be at least 1")
    _, spec = _kernel(cfg)
    datasets = bench_datasets(sizes, spec, cfg["seed"], cfg["players_per_match"], cfg["time_scale"])
    result = evaluation.speed_bench(datasets, cfg["repetitions"], spec, cfg["time_scale"])
    _write(Path(cfg["out_dir"]), "bench.csv", result.to_csv(_header(cfg)))
    for n, mean, sd in result.rows:
        print(f"n={n:<7d} {mean:9.4f} s  (sd {sd:.4f})")
    print("exponent: " + ("undefined" if result.exponent is None else f"{result.exponent:.3f}"))
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    if cfg["players"] < 2:
        raise UsageError("--players must be at least 2")
    if cfg["matches"] < 0:
        raise UsageError("--matches must be nonnegative")
    _, spec = _kernel(cfg)
    dataset, _ = synth.generate(
        cfg["players"], cfg["matches"], spec, seed=cfg["seed"], day_gap=cfg["day_gap"],
        matches_per_day=cfg["per_day"], time_scale=cfg["time_scale"],
    )
    target = Path(cfg["output"]) if cfg["output"] else Path(cfg["out_dir"]) / "synthetic.csv"
    _write(target.parent, target.name, format_match_csv(dataset, _header(cfg)))
    print(f"{dataset.n_matches} matches among {dataset.n_players} players -> {target}")
    return EXIT_OK


COMMANDS = {"tune": cmd_tune, "evaluate": cmd_evaluate, "rate": cmd_rate, "bench": cmd_bench, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except evaluation.EvaluationError as exc:
        code = _classify(exc.__cause__)
        print(f"pairgp: {exc}", file=sys.stderr)
        return code


def _classify(exc) -> int:
    if isinstance(exc, (UsageError, KernelError)):
        return EXIT_USAGE
    if isinstance(exc, (ArithmeticError, ConvergenceError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def _dispatch(args) -> int:
    try:
        cfg = resolve_config(args)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING, format="%(message)s")
        if cfg["threads"] < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"pairgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KernelError as exc:
        print(f"pairgp: bad kernel: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, ConvergenceError) as exc:
        print(f"pairgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"pairgp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
