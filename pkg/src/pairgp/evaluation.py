"""Metrics, walk-forward evaluation, rating tables and the speed benchmark."""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import baselines
from .data import MatchDataset, MatchRecord, build_design, walk_forward_split
from .kernels import KernelSpec, build_block_prior, uses_surface
from .laplace import fit_laplace, find_mode, predict_matches, predict_skills

P_CLIP = 1e-15
ELO_PER_LOGIT = 400.0 / math.log(10.0)


class EvaluationError(RuntimeError):
    """A fit or prediction failed on one evaluation day; ``__cause__`` holds the original error."""

    def __init__(self, model: str, date: dt.date, cause: Exception):
        super().__init__(f"{model}: evaluation failed on {date.isoformat()}: {cause}")
        self.model = model
        self.date = date


def _check(y, p):
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, p


def log_loss(y, p) -> float:
    y, p = _check(y, p)
    p = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    terms = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    # shifted compensated mean: exact when every term is equal
    shift = float(terms[0])
    return -(shift + math.fsum((terms - shift).tolist()) / y.size)


def accuracy(y, p) -> float:
    """Share correct; ``p == 0.5`` counts as predicting a loss."""
    y, p = _check(y, p)
    hits = y * (p > 0.5) + (1.0 - y) * (p <= 0.5)
    return float(hits.sum() / y.size)


def to_elo_scale(logit):
    return np.asarray(logit) * ELO_PER_LOGIT + 1500.0 if np.ndim(logit) else float(logit) * ELO_PER_LOGIT + 1500.0


def from_elo_scale(rating):
    return (np.asarray(rating) - 1500.0) / ELO_PER_LOGIT if np.ndim(rating) else (float(rating) - 1500.0) / ELO_PER_LOGIT


def to_elo_scale_dist(mean: float, sd: float) -> tuple[float, float]:
    return to_elo_scale(mean), sd * ELO_PER_LOGIT


@dataclass(frozen=True)
class ModelConfig:
    """What to evaluate.  ``kind`` is one of ``gp``, ``elo``, ``glicko``."""

    name: str
    kind: str
    kernel: KernelSpec | None = None
    time_scale: float = 300.0
    jitter: float | None = None
    mode: str = "moderated"
    elo_k: float = 32.0
    glicko: baselines.GlickoParams = field(default_factory=baselines.GlickoParams)
    train_start: dt.date | None = None


@dataclass(frozen=True)
class PredictionRecord:
    match_id: str
    date: dt.date
    winner: str
    loser: str
    p_win: float
    correct: bool
    p_moderated: float | None = None
    p_point: float | None = None


@dataclass
class EvalReport:
    model_name: str
    records: list[PredictionRecord]
    log_loss: float
    accuracy: float
    n_matches: int
    wall_time_ms: float
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "model": self.model_name,
            "log_loss": self.log_loss,
            "accuracy": self.accuracy,
            "n_matches": self.n_matches,
            "wall_time_ms": self.wall_time_ms,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, default=str)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        both = any(r.p_moderated is not None for r in self.records)
        cols = ["match_id", "date", "winner", "loser", "p_win", "correct"]
        w.writerow(cols + (["p_moderated", "p_point"] if both else []))
        for r in self.records:
            row = [r.match_id, r.date.isoformat(), r.winner, r.loser, repr(r.p_win), int(r.correct)]
            if both:
                row += [repr(r.p_moderated), repr(r.p_point)]
            w.writerow(row)
        return buf.getvalue()


def _report(name: str, records: list[PredictionRecord], wall_ms: float, extra=None) -> EvalReport:
    if records:
        p = [r.p_win for r in records]
        ll, acc = log_loss(np.ones(len(p)), p), accuracy(np.ones(len(p)), p)
    else:
        ll, acc = float("nan"), float("nan")
    return EvalReport(name, records, ll, acc, len(records), wall_ms, dict(extra or {}))


def _gp_day(config: ModelConfig, train: MatchDataset, day: list[MatchRecord]) -> list[PredictionRecord]:
    spec = config.kernel
    surface = uses_surface(spec)
    design = build_design(train, use_surface=surface, time_scale=config.time_scale)
    fit, prior = fit_laplace(spec, design, config.jitter)
    xs = [design.input_for(r.date, r.surface) if surface else design.input_for(r.date) for r in day]
    preds = predict_matches(fit, prior, design, spec, [(r.winner, r.loser) for r in day], xs, config.mode)
    return [
        PredictionRecord(r.match_id, r.date, r.winner, r.loser, m.p_win, m.p_win > 0.5, m.p_moderated, m.p_point)
        for r, m in zip(day, preds)
    ]


def _elo_day(config: ModelConfig, train: MatchDataset, day: list[MatchRecord]) -> list[PredictionRecord]:
    state = baselines.elo_run(train, config.elo_k).state
    out = []
    for r in day:
        p = baselines.elo_predict(state, r.winner, r.loser)
        out.append(PredictionRecord(r.match_id, r.date, r.winner, r.loser, p, p > 0.5))
    return out


def _glicko_day(config: ModelConfig, train: MatchDataset, day: list[MatchRecord]) -> list[PredictionRecord]:
    run = baselines.glicko_rate(train, config.glicko)
    origin = train.start_date or day[0].date
    out = []
    for r in day:
        period = (r.date - origin).days // config.glicko.period_length_days
        p = baselines.glicko_predict(run.state, r.winner, r.loser, period)
        out.append(PredictionRecord(r.match_id, r.date, r.winner, r.loser, p, p > 0.5))
    return out


_DAY_RUNNERS = {"gp": _gp_day, "elo": _elo_day, "glicko": _glicko_day}


def walk_forward_evaluate(
    config: ModelConfig, dataset: MatchDataset, eval_start: dt.date, eval_end: dt.date, threads: int = 1
) -> EvalReport:
    """Fit on everything before each evaluation day, predict that day, move on.

    Every record's probability is for the listed winner, so the outcome is
    always 1.
    """
    if config.kind not in _DAY_RUNNERS:
        raise ValueError(f"unknown model kind {config.kind!r}")
    if config.kind == "gp" and config.kernel is None:
        raise ValueError("gp model needs a kernel")
    if config.train_start is not None:
        dataset = MatchDataset.from_records(r for r in dataset.records if r.date >= config.train_start)
    runner = _DAY_RUNNERS[config.kind]
    splits = walk_forward_split(dataset, eval_start, eval_end)
    start = time.perf_counter()

    def run(split):
        train, day = split
        try:
            return runner(config, train, day)
        except Exception as exc:
            raise EvaluationError(config.name, day[0].date, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_day = list(pool.map(run, splits))
    else:
        per_day = [run(s) for s in splits]
    records = [r for day in per_day for r in day]
    return _report(config.name, records, 1000.0 * (time.perf_counter() - start), {"kind": config.kind})


def comparison_csv(reports: Sequence[EvalReport], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "log_loss", "accuracy", "n_matches"])
    for r in sorted(reports, key=lambda r: (r.log_loss, r.model_name)):
        w.writerow([r.model_name, f"{r.log_loss:.6f}", f"{r.accuracy:.6f}", r.n_matches])
    return buf.getvalue()


@dataclass
class RatingTable:
    as_of: dt.date
    surface: str | None
    rows: list[tuple[str, float, float]]

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["player", "mean", "sd"])
        for player, mean, sd in self.rows:
            w.writerow([player, f"{mean:.1f}", f"{sd:.1f}"])
        return buf.getvalue()


def rating_table(
    fit,
    prior,
    design,
    spec: KernelSpec,
    as_of: dt.date,
    surface: str | None = None,
    top_n: int | None = 8,
    players: Sequence[str] | None = None,
) -> RatingTable:
    """Elo-scale skill of each player at ``as_of``, best first.

    ``players`` defaults to everyone in the fit; names the fit has never seen
    get the prior (1500).
    """
    if surface is not None and not uses_surface(spec):
        raise ValueError("surface table requested from a model without surface covariates")
    if surface is None and uses_surface(spec):
        raise ValueError("surface model needs a surface for its rating table")
    names = list(players) if players is not None else sorted(design.players, key=design.players.get)
    x = design.input_for(as_of, surface)
    preds = predict_skills(fit, prior, design, spec, names, [x] * len(names))
    rows = []
    for name, pred in zip(names, preds):
        mean, sd = to_elo_scale_dist(pred.mean, pred.sd)
        rows.append((name, mean, sd))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return RatingTable(as_of, surface, rows[:top_n] if top_n else rows)


@dataclass
class BenchResult:
    rows: list[tuple[int, float, float]]
    exponent: float | None

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        if self.exponent is None:
            buf.write("# exponent=undefined\n")
        else:
            buf.write(f"# exponent={self.exponent:.4f}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "mean_seconds", "sd_seconds"])
        for n, mean, sd in self.rows:
            w.writerow([n, f"{mean:.6f}", f"{sd:.6f}"])
        return buf.getvalue()


def fit_seconds(spec: KernelSpec, dataset: MatchDataset, time_scale: float = 300.0, jitter=None) -> float:
    """Wall time of prior construction, mode finding and the LML (data prep excluded)."""
    design = build_design(dataset, use_surface=uses_surface(spec), time_scale=time_scale)
    start = time.perf_counter()
    prior = build_block_prior(spec, design, jitter)
    find_mode(prior, design)
    return time.perf_counter() - start


def power_law_exponent(sizes: Sequence[int], seconds: Sequence[float]) -> float | None:
    """Least-squares slope of log time on log size; None when sizes do not vary."""
    sizes = np.asarray(sizes, dtype=float)
    if len(np.unique(sizes)) < 2:
        return None
    slope, _ = np.polyfit(np.log(sizes), np.log(np.asarray(seconds, dtype=float)), 1)
    return float(slope)


def speed_bench(datasets: Sequence[MatchDataset], repetitions: int, spec: KernelSpec, time_scale: float = 300.0):
    rows = []
    for ds in datasets:
        times = [fit_seconds(spec, ds, time_scale) for _ in range(repetitions)]
        rows.append((ds.n_matches, float(np.mean(times)), float(np.std(times))))
    return BenchResult(rows, power_law_exponent([r[0] for r in rows], [r[1] for r in rows]))


def report_dict(report: EvalReport) -> dict:
    d = report.summary()
    d["records"] = [asdict(r) for r in report.records]
    return d
