"""Synthetic match data drawn from the GP prior.

Skills for each player are sampled jointly at that player's appearance
inputs from the kernel; each result is a Bernoulli draw of
``sigmoid(f_a - f_b)``.  Matches happen on evenly spaced match days and no
player appears twice on one day.
"""

from __future__ import annotations

import datetime as dt
import math

import numpy as np
from scipy.special import expit

from .data import SURFACES, MatchDataset, MatchRecord, build_design
from .kernels import KernelSpec, Matern32, default_jitter, uses_surface

# Match counts per surface on the 2018 ATP tour, used as sampling weights.
SURFACE_WEIGHTS = {"clay": 810, "grass": 324, "hard": 1072, "indoor_hard": 417}
DEFAULT_START = dt.date(2016, 1, 4)


def draw_results(skill_diff: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """True where the first player wins, with probability ``sigmoid(skill_diff)``."""
    skill_diff = np.asarray(skill_diff, dtype=float)
    return rng.uniform(size=skill_diff.shape) < expit(skill_diff)


def generate(
    players: int,
    matches: int,
    kernel: KernelSpec | None = None,
    seed: int = 0,
    day_gap: int = 7,
    matches_per_day: int | None = None,
    start: dt.date = DEFAULT_START,
    time_scale: float = 300.0,
) -> tuple[MatchDataset, dict[str, float]]:
    """Sample a dataset; returns it with the true latent skill of every (match_id, side).

    The returned dict maps ``"<match_id>/w"`` and ``"<match_id>/l"`` to the
    sampled skills of winner and loser.
    """
    if players < 2:
        raise ValueError("need at least two players")
    if matches < 0:
        raise ValueError("matches must be nonnegative")
    kernel = kernel or Matern32(alpha=1.0, rho=1.0)
    per_day = min(matches_per_day or 20, players // 2)
    rng = np.random.default_rng(seed)
    names = [f"P{i:03d}" for i in range(players)]
    surface_p = np.array([SURFACE_WEIGHTS[s] for s in SURFACES], float)
    surface_p /= surface_p.sum()
    with_surface = uses_surface(kernel)

    n_days = math.ceil(matches / per_day) if matches else 0
    width = len(str(max(matches - 1, 0)))
    pairs = []
    dates = []
    surfaces = []
    for day in range(n_days):
        count = min(per_day, matches - day * per_day)
        order = rng.permutation(players)[: 2 * count]
        date = start + dt.timedelta(days=day * day_gap)
        surface = SURFACES[rng.choice(len(SURFACES), p=surface_p)] if with_surface else None
        for m in range(count):
            pairs.append((int(order[2 * m]), int(order[2 * m + 1])))
            dates.append(date)
            surfaces.append(surface)

    # provisional records with a fixed orientation: first listed player as "winner"
    provisional = [
        MatchRecord(f"m{k:0{width}d}", dates[k], names[a], names[b], surfaces[k]) for k, (a, b) in enumerate(pairs)
    ]
    ds = MatchDataset.from_records(provisional)
    design = build_design(ds, use_surface=with_surface, time_scale=time_scale)
    f = np.zeros(2 * len(provisional))
    jitter = default_jitter(kernel)
    for idx in design.rows_of_player:
        x = design.rows[idx]
        k = kernel.matrix(x, x) + jitter * np.eye(len(idx))
        f[idx] = np.linalg.cholesky(k) @ rng.standard_normal(len(idx))
    first_wins = draw_results(f[design.winner_row] - f[design.loser_row], rng)

    records = []
    skills = {}
    for k, rec in enumerate(ds.records):
        fa, fb = f[2 * k], f[2 * k + 1]
        if first_wins[k]:
            records.append(rec)
            skills[f"{rec.match_id}/w"], skills[f"{rec.match_id}/l"] = fa, fb
        else:
            records.append(MatchRecord(rec.match_id, rec.date, rec.loser, rec.winner, rec.surface))
            skills[f"{rec.match_id}/w"], skills[f"{rec.match_id}/l"] = fb, fa
    return MatchDataset.from_records(records), skills
