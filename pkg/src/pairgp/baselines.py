"""Elo and Glicko reference raters."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import MatchDataset

INITIAL_RATING = 1500.0
# Glicko's q = ln(10) / 400 converts Elo points to natural-log odds.
Q = math.log(10.0) / 400.0

ELO_K_BOUNDS = (1.0, 100.0)
GLICKO_INITIAL_SD_BOUNDS = (50.0, 500.0)
GLICKO_PERIOD_SD_BOUNDS = (0.1, 30.0)


def elo_probability(rating_a: float, rating_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((rating_b - rating_a) / 400.0))


@dataclass(frozen=True)
class EloState:
    k_factor: float = 32.0
    ratings: dict[str, float] = field(default_factory=dict)

    def rating(self, player: str) -> float:
        return self.ratings.get(player, INITIAL_RATING)


def elo_predict(state: EloState, a: str, b: str) -> float:
    """Probability that ``a`` beats ``b``; unknown players rate 1500."""
    return elo_probability(state.rating(a), state.rating(b))


def elo_update(state: EloState, winner: str, loser: str) -> EloState:
    delta = state.k_factor * (1.0 - elo_predict(state, winner, loser))
    ratings = dict(state.ratings)
    ratings[winner] = state.rating(winner) + delta
    ratings[loser] = state.rating(loser) - delta
    return replace(state, ratings=ratings)


@dataclass
class RatingRun:
    """Pre-match probabilities of the listed winner, plus the rating path."""

    probabilities: np.ndarray
    trajectory: list[tuple] = field(default_factory=list)
    state: object = None

    def log_likelihood(self) -> float:
        p = np.clip(self.probabilities, 1e-15, 1.0)
        return float(np.sum(np.log(p)))

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", "player", "mean", "sd"])
        for date, player, mean, sd in self.trajectory:
            w.writerow([date.isoformat(), player, f"{mean:.6f}", "" if sd is None else f"{sd:.6f}"])
        return buf.getvalue()


def elo_run(dataset: MatchDataset, k_factor: float, record_trajectory: bool = False) -> RatingRun:
    """Sequential Elo in dataset order (date, then match_id)."""
    ratings: dict[str, float] = {}
    probs = np.empty(dataset.n_matches)
    traj = []
    for i, rec in enumerate(dataset.records):
        rw = ratings.get(rec.winner, INITIAL_RATING)
        rl = ratings.get(rec.loser, INITIAL_RATING)
        p = elo_probability(rw, rl)
        probs[i] = p
        delta = k_factor * (1.0 - p)
        ratings[rec.winner] = rw + delta
        ratings[rec.loser] = rl - delta
        if record_trajectory:
            traj.append((rec.date, rec.winner, rw + delta, None))
            traj.append((rec.date, rec.loser, rl - delta, None))
    return RatingRun(probs, traj, EloState(k_factor, ratings))


@dataclass(frozen=True)
class GlickoParams:
    initial_sd: float = 350.0
    period_sd: float = 10.0
    period_length_days: int = 1

    @property
    def period_variance(self) -> float:
        return self.period_sd**2


@dataclass
class GlickoState:
    params: GlickoParams
    # player -> (mean, sd, period in which sd was last set)
    ratings: dict[str, tuple[float, float, int]] = field(default_factory=dict)

    def current(self, player: str, period: int) -> tuple[float, float]:
        """Mean and sd at the start of ``period``, after idle-period inflation."""
        if player not in self.ratings:
            return INITIAL_RATING, self.params.initial_sd
        mean, sd, last = self.ratings[player]
        var = sd**2 + self.params.period_variance * max(period - last, 0)
        return mean, math.sqrt(min(var, self.params.initial_sd**2))


def _g(sd: float) -> float:
    return 1.0 / math.sqrt(1.0 + 3.0 * Q**2 * sd**2 / math.pi**2)


def glicko_expected(mean: float, opp_mean: float, opp_sd: float) -> float:
    return 1.0 / (1.0 + 10.0 ** (-_g(opp_sd) * (mean - opp_mean) / 400.0))


def glicko_predict(state: GlickoState, a: str, b: str, period: int) -> float:
    """Win probability of ``a`` with both players' uncertainty folded into g."""
    ma, sa = state.current(a, period)
    mb, sb = state.current(b, period)
    return glicko_expected(ma, mb, math.hypot(sa, sb))


def glicko_period_update(mean: float, sd: float, games: list[tuple[float, float, float]]) -> tuple[float, float]:
    """One rating-period update for a player.

    ``games`` holds ``(opponent_mean, opponent_sd, score)`` with score 1 for a
    win and 0 for a loss, all using ratings from the start of the period.
    """
    # d^2 = [q^2 sum g(RD_j)^2 E (1 - E)]^{-1}
    inv_d2 = 0.0
    surprise = 0.0
    for opp_mean, opp_sd, score in games:
        g = _g(opp_sd)
        e = glicko_expected(mean, opp_mean, opp_sd)
        inv_d2 += Q**2 * g**2 * e * (1.0 - e)
        surprise += g * (score - e)
    precision = 1.0 / sd**2 + inv_d2
    # r' = r + q / (1/RD^2 + 1/d^2) * sum g(RD_j)(s_j - E_j);  RD' = (1/RD^2 + 1/d^2)^{-1/2}
    return mean + Q / precision * surprise, math.sqrt(1.0 / precision)


def glicko_rate(dataset: MatchDataset, params: GlickoParams, record_trajectory: bool = False) -> RatingRun:
    """Run Glicko period by period over ``dataset``.

    Periods are ``(date - first date).days // period_length_days``.  Every
    match in a period is predicted from start-of-period ratings.
    """
    state = GlickoState(params)
    probs = np.empty(dataset.n_matches)
    traj = []
    if not dataset.n_matches:
        return RatingRun(probs, traj, state)
    origin = dataset.start_date
    periods = [(r.date - origin).days // params.period_length_days for r in dataset.records]
    i = 0
    n = dataset.n_matches
    while i < n:
        period = periods[i]
        j = i
        while j < n and periods[j] == period:
            j += 1
        games: dict[str, list[tuple[float, float, float]]] = {}
        start: dict[str, tuple[float, float]] = {}
        for k in range(i, j):
            rec = dataset.records[k]
            for p in (rec.winner, rec.loser):
                if p not in start:
                    start[p] = state.current(p, period)
            (mw, sw), (ml, sl) = start[rec.winner], start[rec.loser]
            probs[k] = glicko_expected(mw, ml, math.hypot(sw, sl))
            games.setdefault(rec.winner, []).append((ml, sl, 1.0))
            games.setdefault(rec.loser, []).append((mw, sw, 0.0))
        for p, played in games.items():
            mean, sd = glicko_period_update(*start[p], played)
            state.ratings[p] = (mean, sd, period)
            if record_trajectory:
                traj.append((dataset.records[j - 1].date, p, mean, sd))
        i = j
    return RatingRun(probs, traj, state)


def fit_baseline(
    dataset: MatchDataset,
    model: str,
    bounds: dict | None = None,
    iters: int = 50,
    seed: int = 0,
    period_length_days: int = 1,
):
    """Random-search the hyperparameters maximising training log likelihood.

    Returns ``(best_params, trace)``; ``best_params`` is a dict of the
    searched names.
    """
    from .tuning import SearchSpace, random_search

    if dataset.n_matches == 0:
        raise ValueError("cannot fit a baseline on an empty dataset")
    bounds = dict(bounds or {})
    if model == "elo":
        space = SearchSpace([("k_factor", *bounds.get("k_factor", ELO_K_BOUNDS))])

        def objective(theta):
            return elo_run(dataset, float(theta[0])).log_likelihood()

    elif model == "glicko":
        space = SearchSpace(
            [
                ("initial_sd", *bounds.get("initial_sd", GLICKO_INITIAL_SD_BOUNDS)),
                ("period_sd", *bounds.get("period_sd", GLICKO_PERIOD_SD_BOUNDS)),
            ]
        )

        def objective(theta):
            params = GlickoParams(float(theta[0]), float(theta[1]), period_length_days)
            return glicko_rate(dataset, params).log_likelihood()

    else:
        raise ValueError(f"unknown baseline {model!r}")
    trace = random_search(objective, space, iters, seed)
    return dict(zip(space.names, trace.best_theta.tolist())), trace
