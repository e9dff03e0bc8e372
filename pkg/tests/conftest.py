import datetime as dt

import numpy as np
import pytest

from pairgp.data import MatchDataset, MatchRecord, build_design
from pairgp.kernels import Matern12, Matern32, build_block_prior

D0 = dt.date(2016, 1, 4)


def make_dataset(rows):
    """Rows of ``(day_offset, winner, loser)`` or ``(day_offset, winner, loser, surface)``."""
    records = []
    for k, row in enumerate(rows):
        day, winner, loser = row[:3]
        surface = row[3] if len(row) > 3 else None
        records.append(MatchRecord(f"m{k:04d}", D0 + dt.timedelta(days=day), winner, loser, surface))
    return MatchDataset.from_records(records)


def random_rows(rng, n_matches, n_players, span_days=600):
    names = [f"p{i}" for i in range(n_players)]
    rows = []
    for _ in range(n_matches):
        a, b = rng.choice(n_players, size=2, replace=False)
        rows.append((int(rng.integers(span_days)), names[a], names[b]))
    return rows


def random_instance(rng, n_matches, n_players, spec=None):
    spec = spec or Matern32(alpha=float(rng.uniform(0.3, 1.5)), rho=float(rng.uniform(0.5, 5.0)))
    ds = make_dataset(random_rows(rng, n_matches, n_players))
    design = build_design(ds)
    return ds, design, build_block_prior(spec, design), spec


def dense_objective(f, kinv, design):
    d = f[design.winner_row] - f[design.loser_row]
    return 0.5 * f @ kinv @ f + np.sum(np.logaddexp(0.0, -d))


def dense_lik_terms(f, design):
    """Gradient of log p(y|f) and W = -Hessian, built entry by entry."""
    n2 = len(f)
    grad = np.zeros(n2)
    w = np.zeros((n2, n2))
    for i, j in zip(design.winner_row, design.loser_row):
        s = 1.0 / (1.0 + np.exp(-(f[i] - f[j])))
        grad[i] += 1 - s
        grad[j] -= 1 - s
        h = s * (1 - s)
        w[i, i] += h
        w[j, j] += h
        w[i, j] -= h
        w[j, i] -= h
    return grad, w


def dense_mode(k, design, iters=100):
    """Newton in the ``f = (K^-1 + W)^-1 (W f + grad)`` form with dense matrices."""
    kinv = np.linalg.inv(k)
    f = np.zeros(k.shape[0])
    for _ in range(iters):
        grad, w = dense_lik_terms(f, design)
        f_new = np.linalg.solve(kinv + w, w @ f + grad)
        done = np.max(np.abs(f_new - f)) < 1e-13
        f = f_new
        if done:
            break
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def toy_one_match():
    ds = make_dataset([(0, "A", "B")])
    design = build_design(ds)
    return ds, design


@pytest.fixture
def matern12():
    return Matern12(alpha=1.0, rho=1.0)


def dense_predictive(k, w, f_hat, k_stars, k_ss):
    """Joint predictive mean and covariance via ``(K + W^-1)^-1 = S (I + S K S)^-1 S``, ``S = W^(1/2)``.

    ``k_stars`` is (2n, m) prior covariance between training rows and the m
    test points, ``k_ss`` their (m, m) prior covariance.
    """
    evals, evecs = np.linalg.eigh(w)
    s = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    b = np.eye(len(k)) + s @ k @ s
    mean = k_stars.T @ np.linalg.solve(k, f_hat)
    cov = k_ss - k_stars.T @ s @ np.linalg.solve(b, s @ k_stars)
    return mean, cov


def toy_posterior_inputs(design, prior, spec, players, x_star):
    """Prior covariance blocks between every training row and each player's test input."""
    n2 = 2 * design.n_matches
    k_stars = np.zeros((n2, len(players)))
    for c, name in enumerate(players):
        rows = design.rows_of_player[design.players[name]]
        k_stars[rows, c] = spec.matrix(design.rows[rows], x_star[None, :])[:, 0]
    k_ss = np.diag([spec.matrix(x_star[None, :], x_star[None, :])[0, 0]] * len(players))
    return k_stars, k_ss


# ----------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        detail = dict(item.user_properties).get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
