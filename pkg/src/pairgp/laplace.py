"""Laplace approximation for the GP Bradley-Terry model.

Skills ``f`` have one entry per player appearance (2n for n matches).  The
negative log posterior is ``0.5 f'K^{-1}f - sum_k log sigmoid(f_w(k) - f_l(k))``
up to constants.  Its Hessian ``H = K^{-1} + W`` is sparse: ``K^{-1}`` is
block diagonal by player and the likelihood part ``W`` touches exactly four
entries per match.

The approximate log marginal likelihood drops the ``n log 2*pi`` term
(n = number of matches), i.e. the returned value equals the Laplace estimate
of ``log p(y | theta)`` minus ``n log 2*pi``.  No other constant is dropped.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from . import sparse
from .data import DesignMatrix
from .kernels import BlockPrior, KernelSpec, SingularPriorError, build_block_prior, default_jitter

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
MAX_HALVINGS = 20


class ConvergenceError(RuntimeError):
    def __init__(self, gradient_norm: float, iterations: int):
        super().__init__(f"Newton did not converge in {iterations} iterations (|grad|_inf={gradient_norm:.3g})")
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SingularModelError(ArithmeticError):
    pass


class UnknownPlayerError(KeyError):
    pass


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def log_likelihood(f: np.ndarray, design: DesignMatrix) -> float:
    d = f[design.winner_row] - f[design.loser_row]
    return float(np.sum(log_sigmoid(d)))


def likelihood_derivatives(f: np.ndarray, design: DesignMatrix):
    """Gradient of the log likelihood and the triples of its negated Hessian.

    The triples list the entries (w, w), (l, l), (w, l), (l, w) of every
    match, 4n in total.  Rows are per appearance, so no two matches share an
    entry.
    """
    w, l = design.winner_row, design.loser_row
    d = f[w] - f[l]
    g1 = expit(-d)  # g'(d) = 1 - sigmoid(d)
    g2 = expit(d) * g1  # -g''(d)
    grad = np.zeros_like(f)
    np.add.at(grad, w, g1)
    np.add.at(grad, l, -g1)
    rows = np.concatenate([w, l, w, l])
    cols = np.concatenate([w, l, l, w])
    vals = np.concatenate([g2, g2, -g2, -g2])
    return grad, (rows, cols, vals)


def neg_log_posterior(f: np.ndarray, prior: BlockPrior, design: DesignMatrix) -> float:
    """``0.5 f'K^{-1}f - log p(y|f)`` (constants in f dropped)."""
    return 0.5 * prior.quad_form(f) - log_likelihood(f, design)


class _HessianAssembler:
    """Reuses the fixed sparsity pattern of H across Newton iterations."""

    def __init__(self, prior: BlockPrior, design: DesignMatrix):
        n2 = prior.order
        w, l = design.winner_row, design.loser_row
        lik_pattern = sparse.assemble(
            n2, np.concatenate([w, l, np.maximum(w, l)]), np.concatenate([w, l, np.minimum(w, l)]), np.ones(3 * len(w))
        ).lower
        kinv_lower = sparse.from_full(prior.K_inv).lower
        ones = kinv_lower.copy()
        ones.data[:] = 1.0
        union = (ones + lik_pattern).tocsc()
        union.sort_indices()
        union.data[:] = 0.0
        self.lower = union
        col_of = np.repeat(np.arange(n2), np.diff(union.indptr))
        keys = col_of.astype(np.int64) * n2 + union.indices
        kin = kinv_lower.tocoo()
        self.base = np.zeros(union.nnz)
        self.base[np.searchsorted(keys, kin.col.astype(np.int64) * n2 + kin.row)] = kin.data
        hi = np.maximum(w, l)
        lo = np.minimum(w, l)
        self.pos_w = np.searchsorted(keys, w.astype(np.int64) * n2 + w)
        self.pos_l = np.searchsorted(keys, l.astype(np.int64) * n2 + l)
        self.pos_off = np.searchsorted(keys, lo.astype(np.int64) * n2 + hi)
        self.analysis: sparse.Analysis | None = None

    def hessian(self, f: np.ndarray, design: DesignMatrix) -> sparse.SparseSym:
        d = f[design.winner_row] - f[design.loser_row]
        s = expit(d)
        g2 = s * (1.0 - s)
        data = self.base.copy()
        data[self.pos_w] += g2
        data[self.pos_l] += g2
        data[self.pos_off] -= g2
        m = self.lower.copy()
        m.data = data
        return sparse.SparseSym(m)

    def factor(self, h: sparse.SparseSym) -> sparse.CholFactor:
        if self.analysis is None:
            self.analysis = sparse.analyze(h)
        return sparse.cholesky(h, self.analysis)


def negative_hessian_dense(f: np.ndarray, prior: BlockPrior, design: DesignMatrix) -> np.ndarray:
    """Dense H, for checks on small problems."""
    _, (r, c, v) = likelihood_derivatives(f, design)
    h = prior.K_inv.toarray()
    np.add.at(h, (r, c), v)
    return h


@dataclass(frozen=True, eq=False)
class LaplaceFit:
    mode: np.ndarray
    hessian: sparse.SparseSym
    chol: sparse.CholFactor
    lml: float
    iterations: int
    converged: bool
    gradient_norm: float
    objective_trace: tuple[float, ...] = ()
    wall_time_ms: float = 0.0
    n_matches: int = 0
    n_players: int = 0
    # K^{-1} f_hat, reused by predictions
    alpha: np.ndarray = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "n_matches": self.n_matches,
            "n_players": self.n_players,
            "iterations": self.iterations,
            "lml": self.lml,
            "gradient_norm": self.gradient_norm,
            "wall_time_ms": self.wall_time_ms,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary())


def find_mode(
    prior: BlockPrior, design: DesignMatrix, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> LaplaceFit:
    """Newton iterations from f = 0 with step halving on objective increase."""
    start = time.perf_counter()
    n2 = 2 * design.n_matches
    if prior.order != n2:
        raise ValueError(f"prior has order {prior.order}, design has {n2} rows")
    assembler = _HessianAssembler(prior, design)
    f = np.zeros(n2)
    obj = neg_log_posterior(f, prior, design)
    trace = [obj]
    iterations = 0
    while True:
        lik_grad, _ = likelihood_derivatives(f, design)
        j = prior.kinv_dot(f) - lik_grad
        gnorm = float(np.max(np.abs(j))) if n2 else 0.0
        if gnorm < tol:
            break
        if iterations >= max_iter:
            raise ConvergenceError(gnorm, iterations)
        h = assembler.hessian(f, design)
        step = sparse.solve(assembler.factor(h), j)
        t = 1.0
        guard = 1e-12 * (1.0 + abs(obj))
        for _ in range(MAX_HALVINGS + 1):
            candidate = f - t * step
            new_obj = neg_log_posterior(candidate, prior, design)
            if new_obj <= obj + guard:
                break
            t *= 0.5
        else:
            raise ConvergenceError(gnorm, iterations)
        if t < 1.0:
            log.debug("newton step %d halved to t=%g", iterations, t)
        f, obj = candidate, new_obj
        trace.append(new_obj)
        iterations += 1
    h = assembler.hessian(f, design)
    chol = assembler.factor(h)
    alpha = prior.kinv_dot(f)
    lml = _lml(f, alpha, prior, design, chol)
    return LaplaceFit(
        mode=f,
        hessian=h,
        chol=chol,
        lml=lml,
        iterations=iterations,
        converged=True,
        gradient_norm=gnorm,
        objective_trace=tuple(trace),
        wall_time_ms=1000.0 * (time.perf_counter() - start),
        n_matches=design.n_matches,
        n_players=design.n_players,
        alpha=alpha,
    )


def _lml(f, alpha, prior: BlockPrior, design: DesignMatrix, chol: sparse.CholFactor) -> float:
    n = design.n_matches
    log_prior = -0.5 * prior.quad_form(f) - 0.5 * prior.log_det_K - n * math.log(2 * math.pi)
    return log_prior + log_likelihood(f, design) - 0.5 * sparse.log_det(chol)


def approx_lml(fit: LaplaceFit, prior: BlockPrior, design: DesignMatrix, include_constant: bool = False) -> float:
    """Approximate log marginal likelihood at the mode.

    With ``include_constant`` the dropped ``n log 2*pi`` is added back, giving
    the Laplace estimate of ``log p(y | theta)`` itself.
    """
    if not fit.converged:
        raise ConvergenceError(fit.gradient_norm, fit.iterations)
    value = _lml(fit.mode, prior.kinv_dot(fit.mode), prior, design, fit.chol)
    if include_constant:
        value += design.n_matches * math.log(2 * math.pi)
    return value


def fit_laplace(
    spec: KernelSpec,
    design: DesignMatrix,
    jitter: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[LaplaceFit, BlockPrior]:
    """Build the prior and find the mode, retrying once with 10x jitter."""
    jitter = default_jitter(spec) if jitter is None else jitter
    for attempt, jit in enumerate((jitter, 10.0 * jitter)):
        try:
            prior = build_block_prior(spec, design, jit)
            return find_mode(prior, design, tol, max_iter), prior
        except (sparse.NotPositiveDefiniteError, SingularPriorError) as exc:
            if attempt:
                raise SingularModelError(f"model is numerically singular even with jitter {jit:g}: {exc}") from exc
            log.warning("factorization failed (%s); retrying with jitter %g", exc, 10.0 * jitter)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class SkillPrediction:
    mean: float
    variance: float

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class MatchPrediction:
    mean_diff: float
    var_diff: float
    mode: str = "moderated"

    @property
    def p_point(self) -> float:
        return float(expit(self.mean_diff))

    @property
    def p_moderated(self) -> float:
        return float(expit(self.mean_diff / math.sqrt(1.0 + math.pi * self.var_diff / 8.0)))

    @property
    def p_win(self) -> float:
        return self.p_point if self.mode == "point" else self.p_moderated


def _player_index(design: DesignMatrix, player) -> int | None:
    if isinstance(player, (int, np.integer)):
        return int(player) if 0 <= player < design.n_players else None
    return design.players.get(player)


def _projections(fit: LaplaceFit, prior: BlockPrior, design: DesignMatrix, spec: KernelSpec, players, x_stars):
    """For each (player, x_star): prior variance, mean and the vector K^{-1}k_* (sparse by player)."""
    out = []
    for player, x in zip(players, x_stars):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        kss = float(spec.matrix(x, x)[0, 0])
        p = _player_index(design, player)
        if p is None or design.n_matches == 0:
            out.append((kss, 0.0, None, None, 0.0))
            continue
        rows = prior.rows_of_player[p]
        k_star = spec.matrix(design.rows[rows], x)[:, 0]
        v = scipy.linalg.cho_solve((prior.chols[p], True), k_star)
        mean = float(v @ fit.mode[rows])
        out.append((kss, mean, rows, v, float(k_star @ v)))
    return out


def predict_skills(fit, prior, design, spec, players, x_stars) -> list[SkillPrediction]:
    proj = _projections(fit, prior, design, spec, players, x_stars)
    rhs_cols = [i for i, p in enumerate(proj) if p[2] is not None]
    solved = _solve_columns(fit, proj, rhs_cols, design)
    preds = []
    for i, (kss, mean, rows, v, quad) in enumerate(proj):
        var = kss
        if rows is not None:
            var = kss - quad + float(v @ solved[i][rows])
        preds.append(SkillPrediction(mean, max(var, 0.0)))
    return preds


def _solve_columns(fit, proj, cols, design):
    if not cols:
        return {}
    rhs = np.zeros((2 * design.n_matches, len(cols)))
    for c, i in enumerate(cols):
        rhs[proj[i][2], c] = proj[i][3]
    sol = sparse.solve(fit.chol, rhs)
    return {i: sol[:, c] for c, i in enumerate(cols)}


def predict_skill(fit, prior, design, player, x_star, spec) -> SkillPrediction:
    """Posterior predictive skill of ``player`` at input ``x_star``."""
    if _player_index(design, player) is None:
        raise UnknownPlayerError(player)
    return predict_skills(fit, prior, design, spec, [player], [x_star])[0]


def predict_matches(fit, prior, design, spec, pairs, x_stars, mode: str = "moderated") -> list[MatchPrediction]:
    """Batch version of :func:`predict_match`; one solve for all players involved."""
    players = [p for pair in pairs for p in pair]
    xs = [x for x in x_stars for _ in range(2)]
    proj = _projections(fit, prior, design, spec, players, xs)
    rhs_cols = [i for i, p in enumerate(proj) if p[2] is not None]
    solved = _solve_columns(fit, proj, rhs_cols, design)
    out = []
    for k in range(len(pairs)):
        a, b = proj[2 * k], proj[2 * k + 1]
        var = []
        for i, (kss, _, rows, v, quad) in ((2 * k, a), (2 * k + 1, b)):
            var.append(kss if rows is None else kss - quad + float(v @ solved[i][rows]))
        cov = 0.0
        if a[2] is not None and b[2] is not None:
            cov = float(b[3] @ solved[2 * k][b[2]])
        var_i, var_j = max(var[0], 0.0), max(var[1], 0.0)
        out.append(MatchPrediction(a[1] - b[1], max(var_i + var_j - 2.0 * cov, 0.0), mode))
    return out


def predict_match(fit, prior, design, spec, player_i, player_j, x_star, mode: str = "moderated") -> MatchPrediction:
    """Probability that ``player_i`` beats ``player_j`` at ``x_star``."""
    return predict_matches(fit, prior, design, spec, [(player_i, player_j)], [x_star], mode)[0]
