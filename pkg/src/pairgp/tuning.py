"""Gradient-free maximisation over box bounds: random search and Bayesian optimisation."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[tuple[str, float, float], ...]

    def __init__(self, params: Sequence[tuple[str, float, float]]):
        params = tuple((str(n), float(lo), float(hi)) for n, lo, hi in params)
        names = [p[0] for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        for name, lo, hi in params:
            if not lo < hi:
                raise ValueError(f"{name}: lower bound {lo} must be below upper bound {hi}")
        object.__setattr__(self, "params", params)

    @classmethod
    def from_hypervector(cls, hv) -> "SearchSpace":
        return cls(list(zip(hv.names, hv.lower.tolist(), hv.upper.tolist())))

    @property
    def names(self) -> list[str]:
        return [p[0] for p in self.params]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p[1] for p in self.params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p[2] for p in self.params])

    @property
    def dim(self) -> int:
        return len(self.params)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lower + np.clip(u, 0.0, 1.0) * (self.upper - self.lower)

    def contains(self, theta: np.ndarray) -> bool:
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


@dataclass
class SearchTrace:
    names: list[str]
    thetas: np.ndarray
    values: np.ndarray
    seed: int
    method: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.values))

    @property
    def best_theta(self) -> np.ndarray:
        return self.thetas[self.best_index]

    @property
    def best_value(self) -> float:
        return float(self.values.max())

    def running_best(self) -> np.ndarray:
        return np.maximum.accumulate(self.values)

    def prefix(self, budget: int) -> "SearchTrace":
        return SearchTrace(self.names, self.thetas[:budget], self.values[:budget], self.seed, self.method)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", *self.names, "value"])
        for i, (theta, value) in enumerate(zip(self.thetas, self.values)):
            w.writerow([i, *(repr(float(t)) for t in theta), repr(float(value))])
        return buf.getvalue()


def _safe_eval(objective: Objective, theta: np.ndarray) -> float:
    try:
        value = float(objective(theta))
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.info("objective failed at %s: %s", theta, exc)
        return -math.inf
    return value if math.isfinite(value) else -math.inf


def random_search(objective: Objective, space: SearchSpace, iters: int, seed: int, threads: int = 1) -> SearchTrace:
    """Evaluate ``iters`` iid uniform points; results keep sample order."""
    if iters < 1:
        raise ValueError("iters must be at least 1")
    rng = np.random.default_rng(seed)
    thetas = space.from_unit(rng.uniform(size=(iters, space.dim)))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(lambda t: _safe_eval(objective, t), thetas))
    else:
        values = [_safe_eval(objective, t) for t in thetas]
    return SearchTrace(space.names, thetas, np.array(values), seed, "random")


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = 0.01) -> np.ndarray:
    """EI for maximisation."""
    sigma = np.maximum(sigma, 1e-12)
    z = (mu - best - xi) / sigma
    return (mu - best - xi) * norm.cdf(z) + sigma * norm.pdf(z)


def _surrogate(dim: int, seed: int) -> GaussianProcessRegressor:
    kernel = ConstantKernel(1.0, (1e-3, 1e3)) * Matern(
        length_scale=np.full(dim, 0.3), length_scale_bounds=(1e-2, 1e2), nu=2.5
    ) + WhiteKernel(1e-6, (1e-10, 1e-1))
    return GaussianProcessRegressor(kernel, normalize_y=True, n_restarts_optimizer=3, random_state=seed)


def _propose(u: np.ndarray, y: np.ndarray, rng: np.random.Generator, n_candidates: int = 512, n_starts: int = 5):
    """Next point in the unit box by maximising EI, or None if the surrogate is unusable."""
    finite = np.isfinite(y)
    if finite.sum() < 2:
        return None
    y_fit = np.where(finite, y, y[finite].min())
    if np.ptp(y_fit) == 0.0:
        return None
    gp = _surrogate(u.shape[1], int(rng.integers(2**31 - 1)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.simplefilter("ignore", UserWarning)
        gp.fit(u, y_fit)
    best = float(y_fit.max())
    scale = float(np.std(y_fit)) or 1.0
    xi = 0.01 * scale

    def neg_ei(x):
        mu, sd = gp.predict(np.atleast_2d(x), return_std=True)
        return -float(expected_improvement(mu, sd, best, xi)[0])

    cand = rng.uniform(size=(n_candidates, u.shape[1]))
    mu, sd = gp.predict(cand, return_std=True)
    ei = expected_improvement(mu, sd, best, xi)
    starts = cand[np.argsort(-ei, kind="stable")[:n_starts]]
    best_x, best_ei = None, 0.0
    for x0 in starts:
        res = minimize(neg_ei, x0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * u.shape[1])
        value = -float(res.fun)
        if np.all(np.isfinite(res.x)) and value > best_ei:
            best_x, best_ei = np.clip(res.x, 0.0, 1.0), value
    if best_x is None or best_ei <= 1e-12 * scale:
        return None
    if np.min(np.max(np.abs(u - best_x), axis=1)) < 1e-6:
        return None
    return best_x


def bayes_opt(objective: Objective, space: SearchSpace, iters: int, seed: int, init_points: int = 5) -> SearchTrace:
    """Sequential BO: GP surrogate (Matern 5/2) on unit-scaled inputs with EI acquisition.

    Rounds where the surrogate cannot be fit or EI vanishes sample a uniform
    point instead.
    """
    if init_points < 2 or iters < init_points:
        raise ValueError(f"need iters >= init_points >= 2, got iters={iters}, init_points={init_points}")
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(init_points, space.dim))
    values = [_safe_eval(objective, space.from_unit(x)) for x in u]
    fallbacks = 0
    while len(values) < iters:
        try:
            x = _propose(u, np.array(values), rng)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.info("surrogate failed: %s", exc)
            x = None
        if x is None:
            fallbacks += 1
            x = rng.uniform(size=space.dim)
        u = np.vstack([u, x])
        values.append(_safe_eval(objective, space.from_unit(x)))
    thetas = np.array([space.from_unit(x) for x in u])
    return SearchTrace(space.names, thetas, np.array(values), seed, "bo", {"fallbacks": fallbacks})


def run_search(method: str, objective: Objective, space: SearchSpace, iters: int, seed: int, threads: int = 1):
    if method == "random":
        return random_search(objective, space, iters, seed, threads)
    if method == "bo":
        return bayes_opt(objective, space, iters, seed, init_points=min(5, iters))
    raise ValueError(f"unknown search method {method!r}")


def lml_objective(spec, design, jitter: float | None = None):
    """Map a hyperparameter vector to the approximate LML of ``spec`` on ``design``."""
    from .kernels import unpack
    from .laplace import fit_laplace

    def objective(theta):
        fit, _ = fit_laplace(unpack(spec, theta), design, jitter)
        return fit.lml

    return objective


def tune_model(
    experiment,
    dataset,
    method: str = "random",
    iters: int = 50,
    seed: int = 0,
    time_scale: float = 300.0,
    jitter: float | None = None,
    threads: int = 1,
) -> SearchTrace:
    """Maximise the approximate LML of a kernel experiment on ``dataset``.

    ``experiment`` is an experiment name or a kernel template carrying bounds.
    """
    from .data import build_design
    from .kernels import KernelSpec, experiment_kernel, pack, uses_surface

    if dataset.n_matches == 0:
        raise ValueError("cannot tune on an empty dataset")
    spec = experiment if isinstance(experiment, KernelSpec) else experiment_kernel(experiment)
    design = build_design(dataset, use_surface=uses_surface(spec), time_scale=time_scale)
    space = SearchSpace.from_hypervector(pack(spec))
    trace = run_search(method, lml_objective(spec, design, jitter), space, iters, seed, threads)
    trace.extra["kernel"] = spec
    return trace
