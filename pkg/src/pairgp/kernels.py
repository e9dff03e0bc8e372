"""Kernel algebra and the block-diagonal GP prior over player skills.

Kernels are immutable expression trees.  Leaves consume a half-open range of
input columns; ``Sum`` and ``Product`` nodes combine children.  Free
hyperparameters are flattened depth-first, leaf by leaf, in the order each
leaf lists them (``alpha`` before ``rho`` for the time kernels).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

DEFAULT_BOUNDS = (1e-3, 1e3)
JITTER_FACTOR = 1e-6

Bounds = tuple[float, float]


class KernelError(ValueError):
    pass


class SingularPriorError(ArithmeticError):
    """A player's covariance block is not positive definite even after jitter."""

    def __init__(self, player, jitter: float):
        super().__init__(f"prior block for player {player!r} is not positive definite (jitter={jitter:g})")
        self.player = player
        self.jitter = jitter


@dataclass(frozen=True)
class HyperVector:
    names: tuple[str, ...]
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def bounds(self) -> list[Bounds]:
        return list(zip(self.lower.tolist(), self.upper.tolist()))


class KernelSpec:
    """Base class for kernel expression nodes."""

    def __add__(self, other: "KernelSpec") -> "Sum":
        return Sum((self, other))

    def __mul__(self, other: "KernelSpec") -> "Product":
        return Product((self, other))

    def matrix(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diag(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.matrix(row[None], row[None])[0, 0] for row in x])

    def leaves(self) -> Iterator["Leaf"]:
        raise NotImplementedError

    def variance_scale(self) -> float:
        """Prior variance implied by the amplitudes alone, used to size the jitter."""
        raise NotImplementedError

    def max_column(self) -> int:
        return max(leaf.columns[1] for leaf in self.leaves())

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _pairwise_sq(x1: np.ndarray, x2: np.ndarray, scales: np.ndarray) -> np.ndarray:
    a = x1 / scales
    b = x2 / scales
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


@dataclass(frozen=True)
class Leaf(KernelSpec):
    columns: tuple[int, int] = field(default=(0, 1), kw_only=True)

    param_names = ()

    def leaves(self):
        yield self

    def _cols(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.columns
        if x.shape[1] < hi:
            raise KernelError(f"input has {x.shape[1]} columns, kernel reads columns {lo}:{hi}")
        return x[:, lo:hi]

    def param_values(self) -> list[float]:
        return [getattr(self, name) for name in self.param_names]

    def param_bounds(self) -> list[Bounds]:
        bounds = getattr(self, "bounds")
        return list(bounds) if bounds else [DEFAULT_BOUNDS] * len(self.param_values())

    def with_values(self, values: Sequence[float]) -> "Leaf":
        return replace(self, **dict(zip(self.param_names, values)))


@dataclass(frozen=True)
class _Stationary(Leaf):
    alpha: float = 1.0
    rho: float = 1.0
    bounds: tuple[Bounds, ...] = ()

    param_names = ("alpha", "rho")
    kind = ""

    def __post_init__(self):
        if not (self.alpha > 0 and self.rho > 0):
            raise KernelError(f"{self.kind}: alpha and rho must be positive")

    def profile(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrix(self, x1, x2):
        sq = _pairwise_sq(self._cols(x1), self._cols(x2), np.full(self.columns[1] - self.columns[0], self.rho))
        return self.alpha**2 * self.profile(np.sqrt(np.maximum(sq, 0.0)))

    def diag(self, x):
        return np.full(len(x), self.alpha**2)

    def variance_scale(self):
        return self.alpha**2

    def to_dict(self):
        out = {"type": self.kind, "alpha": self.alpha, "rho": self.rho, "columns": list(self.columns)}
        if self.bounds:
            out["bounds"] = [list(b) for b in self.bounds]
        return out


@dataclass(frozen=True)
class RBF(_Stationary):
    kind = "rbf"

    def profile(self, r):
        return np.exp(-0.5 * r**2)


@dataclass(frozen=True)
class Matern12(_Stationary):
    kind = "matern12"

    def profile(self, r):
        return np.exp(-r)


@dataclass(frozen=True)
class Matern32(_Stationary):
    kind = "matern32"

    def profile(self, r):
        s = np.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)


@dataclass(frozen=True)
class Brownian(Leaf):
    """``alpha**2 * min(t, t')`` on a single nonnegative time column."""

    alpha: float = 1.0
    bounds: tuple[Bounds, ...] = ()

    param_names = ("alpha",)
    kind = "brownian"

    def __post_init__(self):
        if self.alpha <= 0:
            raise KernelError("brownian: alpha must be positive")
        if self.columns[1] - self.columns[0] != 1:
            raise KernelError("brownian kernel reads exactly one column")

    def matrix(self, x1, x2):
        t1 = self._cols(x1)[:, 0]
        t2 = self._cols(x2)[:, 0]
        if (t1 < 0).any() or (t2 < 0).any():
            raise KernelError("brownian kernel needs nonnegative times")
        return self.alpha**2 * np.minimum(t1[:, None], t2[None, :])

    def diag(self, x):
        return self.alpha**2 * self._cols(x)[:, 0]

    def variance_scale(self):
        return self.alpha**2

    def to_dict(self):
        out = {"type": self.kind, "alpha": self.alpha, "columns": list(self.columns)}
        if self.bounds:
            out["bounds"] = [list(b) for b in self.bounds]
        return out


@dataclass(frozen=True)
class ArdRbf(Leaf):
    """Unit-variance RBF with one lengthscale per column."""

    rhos: tuple[float, ...] = ()
    bounds: tuple[Bounds, ...] = ()

    kind = "ard_rbf"

    def __post_init__(self):
        width = self.columns[1] - self.columns[0]
        if len(self.rhos) != width:
            raise KernelError(f"ard_rbf: {len(self.rhos)} lengthscales for {width} columns")
        if any(r <= 0 for r in self.rhos):
            raise KernelError("ard_rbf: lengthscales must be positive")

    @property
    def param_names(self):
        return tuple(f"rho_{i}" for i in range(len(self.rhos)))

    def param_values(self):
        return list(self.rhos)

    def with_values(self, values):
        return replace(self, rhos=tuple(float(v) for v in values))

    def matrix(self, x1, x2):
        return np.exp(-0.5 * _pairwise_sq(self._cols(x1), self._cols(x2), np.asarray(self.rhos)))

    def diag(self, x):
        return np.ones(len(x))

    def variance_scale(self):
        return 1.0

    def to_dict(self):
        out = {"type": self.kind, "rhos": list(self.rhos), "columns": list(self.columns)}
        if self.bounds:
            out["bounds"] = [list(b) for b in self.bounds]
        return out


@dataclass(frozen=True)
class _Combination(KernelSpec):
    children: tuple[KernelSpec, ...]

    kind = ""

    def __post_init__(self):
        if not self.children:
            raise KernelError(f"{self.kind} needs at least one child")

    def leaves(self):
        for child in self.children:
            yield from child.leaves()

    def to_dict(self):
        return {"type": self.kind, "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class Sum(_Combination):
    kind = "sum"

    def matrix(self, x1, x2):
        return sum(c.matrix(x1, x2) for c in self.children)

    def diag(self, x):
        return sum(c.diag(x) for c in self.children)

    def variance_scale(self):
        return sum(c.variance_scale() for c in self.children)


@dataclass(frozen=True)
class Product(_Combination):
    kind = "product"

    def matrix(self, x1, x2):
        out = self.children[0].matrix(x1, x2)
        for c in self.children[1:]:
            out = out * c.matrix(x1, x2)
        return out

    def diag(self, x):
        out = self.children[0].diag(x)
        for c in self.children[1:]:
            out = out * c.diag(x)
        return out

    def variance_scale(self):
        return float(np.prod([c.variance_scale() for c in self.children]))


_LEAF_TYPES = {cls.kind: cls for cls in (RBF, Matern12, Matern32, Brownian, ArdRbf)}


def kernel_from_dict(node: dict) -> KernelSpec:
    kind = node.get("type")
    if kind in ("sum", "product"):
        children = tuple(kernel_from_dict(c) for c in node.get("children", ()))
        return (Sum if kind == "sum" else Product)(children)
    if kind not in _LEAF_TYPES:
        raise KernelError(f"unknown kernel type {kind!r}")
    kwargs = {"columns": tuple(node.get("columns", (0, 1)))}
    if "bounds" in node:
        kwargs["bounds"] = tuple(tuple(float(v) for v in b) for b in node["bounds"])
    if kind == "ard_rbf":
        kwargs["rhos"] = tuple(float(r) for r in node["rhos"])
    else:
        kwargs["alpha"] = float(node.get("alpha", 1.0))
        if kind != "brownian":
            kwargs["rho"] = float(node.get("rho", 1.0))
    return _LEAF_TYPES[kind](**kwargs)


def kernel_from_json(text: str) -> KernelSpec:
    return kernel_from_dict(json.loads(text))


def eval_kernel(spec: KernelSpec, x, x2) -> float:
    a = np.atleast_2d(np.asarray(x, dtype=float))
    b = np.atleast_2d(np.asarray(x2, dtype=float))
    return float(spec.matrix(a, b)[0, 0])


def pack(spec: KernelSpec) -> HyperVector:
    names, values, lower, upper = [], [], [], []
    for i, leaf in enumerate(spec.leaves()):
        for name, value, (lo, hi) in zip(leaf.param_names, leaf.param_values(), leaf.param_bounds()):
            names.append(f"{i}.{leaf.kind}.{name}")
            values.append(value)
            lower.append(lo)
            upper.append(hi)
    return HyperVector(tuple(names), np.array(values, float), np.array(lower, float), np.array(upper, float))


def unpack(spec: KernelSpec, theta) -> KernelSpec:
    """Return a copy of ``spec`` with its free parameters replaced by ``theta``."""
    theta = np.asarray(getattr(theta, "values", theta), dtype=float)
    ref = pack(spec)
    if theta.shape != ref.values.shape:
        raise KernelError(f"expected {len(ref)} hyperparameters, got {theta.size}")
    bad = (theta < ref.lower) | (theta > ref.upper) | ~np.isfinite(theta)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise KernelError(f"{ref.names[i]}={theta[i]:g} outside bounds ({ref.lower[i]:g}, {ref.upper[i]:g})")
    values = iter(theta.tolist())

    def rebuild(node: KernelSpec) -> KernelSpec:
        if isinstance(node, _Combination):
            return type(node)(tuple(rebuild(c) for c in node.children))
        leaf: Leaf = node  # type: ignore[assignment]
        return leaf.with_values([next(values) for _ in leaf.param_values()])

    return rebuild(spec)


@dataclass(frozen=True, eq=False)
class BlockPrior:
    """Block-diagonal prior covariance over the 2n skill entries.

    ``blocks[i]`` is the jittered covariance of player ``i``'s rows
    (``rows_of_player[i]``), ``chols[i]`` its lower Cholesky factor.
    """

    blocks: tuple[np.ndarray, ...]
    chols: tuple[np.ndarray, ...]
    inv_blocks: tuple[np.ndarray, ...]
    rows_of_player: tuple[np.ndarray, ...]
    order: int
    log_det_K: float
    jitter: float
    spec: KernelSpec
    K: sp.csc_matrix
    K_inv: sp.csc_matrix

    def kinv_dot(self, v: np.ndarray) -> np.ndarray:
        """``K^{-1} v`` by per-block triangular solves.

        Multiplying by the explicit inverse loses several digits when a
        block is close to singular; the solves keep Newton's gradient
        accurate enough for tight tolerances.
        """
        out = np.zeros_like(v, dtype=float)
        for chol, idx in zip(self.chols, self.rows_of_player):
            if len(idx):
                out[idx] = scipy.linalg.cho_solve((chol, True), v[idx])
        return out

    def quad_form(self, v: np.ndarray) -> float:
        """``v' K^{-1} v`` as a sum of squared whitened blocks."""
        total = 0.0
        for chol, idx in zip(self.chols, self.rows_of_player):
            if len(idx):
                z = scipy.linalg.solve_triangular(chol, v[idx], lower=True)
                total += float(z @ z)
        return total

    def k_dot(self, v: np.ndarray) -> np.ndarray:
        return self.K @ v


def default_jitter(spec: KernelSpec) -> float:
    return JITTER_FACTOR * spec.variance_scale()


def _block_diag_sparse(order: int, mats: Sequence[np.ndarray], rows: Sequence[np.ndarray]) -> sp.csc_matrix:
    if order == 0:
        return sp.csc_matrix((0, 0))
    r = np.concatenate([np.repeat(idx, len(idx)) for idx in rows])
    c = np.concatenate([np.tile(idx, len(idx)) for idx in rows])
    v = np.concatenate([m.ravel() for m in mats])
    return sp.csc_matrix((v, (r, c)), shape=(order, order))


def build_block_prior(spec: KernelSpec, design, jitter: float | None = None) -> BlockPrior:
    """Per-player covariance blocks, their inverses and the total log-determinant."""
    if jitter is None:
        jitter = default_jitter(spec)
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    if design.n_matches and spec.max_column() > design.width:
        raise KernelError(f"kernel reads column {spec.max_column() - 1} but design has {design.width} columns")
    names = {idx: name for name, idx in design.players.items()}
    blocks, chols, invs = [], [], []
    log_det = 0.0
    for p, idx in enumerate(design.rows_of_player):
        x = design.rows[idx]
        k = spec.matrix(x, x)
        k = 0.5 * (k + k.T)
        k[np.diag_indices_from(k)] += jitter
        try:
            chol = scipy.linalg.cholesky(k, lower=True)
        except np.linalg.LinAlgError:
            raise SingularPriorError(names.get(p, p), jitter) from None
        inv = scipy.linalg.cho_solve((chol, True), np.eye(len(idx)))
        blocks.append(k)
        chols.append(chol)
        invs.append(0.5 * (inv + inv.T))
        log_det += 2.0 * float(np.sum(np.log(np.diag(chol))))
    order = 2 * design.n_matches
    rows = design.rows_of_player
    return BlockPrior(
        blocks=tuple(blocks),
        chols=tuple(chols),
        inv_blocks=tuple(invs),
        rows_of_player=rows,
        order=order,
        log_det_K=log_det,
        jitter=float(jitter),
        spec=spec,
        K=_block_diag_sparse(order, blocks, rows),
        K_inv=_block_diag_sparse(order, invs, rows),
    )


def surface_correlation_matrix(rho_clay: float, rho_grass: float, rho_hard: float, rho_indoor: float) -> np.ndarray:
    """Correlations between surfaces implied by ARD-RBF lengthscales on one-hot inputs."""
    kernel = ArdRbf(rhos=(rho_clay, rho_grass, rho_hard, rho_indoor), columns=(0, 4))
    return kernel.matrix(np.eye(4), np.eye(4))


# Search bounds for the three kernel experiments.
SD_BOUNDS: Bounds = (0.01, 2.0)
LENGTHSCALE_BOUNDS: Bounds = (0.1, 10.0)
SURFACE_LENGTHSCALE_BOUNDS: Bounds = (0.1, 10.0)

EXPERIMENTS = ("matern32", "matern32+matern12", "matern32*surface")


def experiment_kernel(name: str) -> KernelSpec:
    """Kernel template (with search bounds) for a named experiment."""
    time_bounds = (SD_BOUNDS, LENGTHSCALE_BOUNDS)
    if name == "matern32":
        return Matern32(alpha=1.0, rho=1.0, bounds=time_bounds)
    if name == "matern32+matern12":
        return Sum((Matern32(alpha=1.0, rho=1.0, bounds=time_bounds), Matern12(alpha=1.0, rho=1.0, bounds=time_bounds)))
    if name == "matern32*surface":
        surface = ArdRbf(rhos=(1.0,) * 4, columns=(1, 5), bounds=(SURFACE_LENGTHSCALE_BOUNDS,) * 4)
        return Product((Matern32(alpha=1.0, rho=1.0, bounds=time_bounds), surface))
    raise KernelError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")


def uses_surface(spec: KernelSpec) -> bool:
    return spec.max_column() > 1
