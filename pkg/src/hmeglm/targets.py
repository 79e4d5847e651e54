"""Smooth regression targets ``pi(h(x), y)`` and their piecewise-Taylor HME approximants."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .expfam import DomainError, ExpFamily
from .gating import Partition, indicator_gates
from .hme import HMEModel


@dataclass(frozen=True)
class SmoothFunction:
    """A function on ``[0, 1]^s`` with analytic first and second derivatives.

    ``value(X) -> (n,)``, ``grad(X) -> (n, s)``, ``hess(X) -> (n, s, s)``.
    """

    name: str
    value: Callable
    grad: Callable
    hess: Callable | None


# ----------------------------------------------------------------------
# catalog
# ----------------------------------------------------------------------
# Catalog members are small classes rather than closures so that targets
# pickle cleanly into worker processes.
class _Affine:
    def __init__(self, a, b):
        self.a, self.b = float(a), np.asarray(b, dtype=float)

    def value(self, X):
        return self.a + X @ self.b

    def grad(self, X):
        return np.broadcast_to(self.b, X.shape).copy()

    def hess(self, X):
        return np.zeros((X.shape[0], X.shape[1], X.shape[1]))


def affine(a: float = 0.0, b=None, s: int = 1) -> SmoothFunction:
    f = _Affine(a, np.zeros(s) if b is None else b)
    return SmoothFunction("affine", f.value, f.grad, f.hess)


class _Constant:
    def __init__(self, c):
        self.c = float(c)

    def value(self, X):
        return np.full(X.shape[0], self.c)

    def grad(self, X):
        return np.zeros(X.shape)

    def hess(self, X):
        return np.zeros(X.shape + (X.shape[1],))


def constant(c: float) -> SmoothFunction:
    f = _Constant(c)
    return SmoothFunction("constant", f.value, f.grad, f.hess)


class _Sine:
    def __init__(self, freq):
        self.w = 2.0 * np.pi * freq

    def value(self, X):
        return np.sin(self.w * X.sum(axis=1))

    def grad(self, X):
        return np.repeat((self.w * np.cos(self.w * X.sum(axis=1)))[:, None], X.shape[1], axis=1)

    def hess(self, X):
        v = -self.w**2 * np.sin(self.w * X.sum(axis=1))
        return v[:, None, None] * np.ones((1, X.shape[1], X.shape[1]))


def sine(freq: float = 1.0) -> SmoothFunction:
    """``sin(2 pi f (x_1 + ... + x_s))``."""
    f = _Sine(freq)
    return SmoothFunction("sine", f.value, f.grad, f.hess)


class _Bump:
    def __init__(self, center, width):
        self.center, self.width = center, width

    def value(self, X):
        d = X - self.center
        return np.exp(-(d * d).sum(axis=1) / (2 * self.width**2))

    def grad(self, X):
        return -self.value(X)[:, None] * (X - self.center) / self.width**2

    def hess(self, X):
        d = X - self.center
        v = self.value(X)[:, None, None]
        return v * (np.einsum("ni,nj->nij", d, d) / self.width**4 - np.eye(X.shape[1])[None] / self.width**2)


def gaussian_bump(center=0.5, width: float = 0.25) -> SmoothFunction:
    """``exp(-|x - c|^2 / (2 w^2))``."""
    f = _Bump(center, width)
    return SmoothFunction("bump", f.value, f.grad, f.hess)


class _ProductSine:
    def value(self, X):
        return np.prod(np.sin(np.pi * X), axis=1)

    def grad(self, X):
        S, C = np.sin(np.pi * X), np.cos(np.pi * X)
        out = np.empty_like(X)
        for k in range(X.shape[1]):
            out[:, k] = np.pi * C[:, k] * np.prod(np.delete(S, k, axis=1), axis=1)
        return out

    def hess(self, X):
        S, C = np.sin(np.pi * X), np.cos(np.pi * X)
        n, s = X.shape
        out = np.empty((n, s, s))
        for i in range(s):
            for j in range(s):
                if i == j:
                    out[:, i, i] = -np.pi**2 * np.prod(S, axis=1)
                else:
                    rest = np.prod(np.delete(S, [i, j], axis=1), axis=1)
                    out[:, i, j] = np.pi**2 * C[:, i] * C[:, j] * rest
        return out


def product_sine() -> SmoothFunction:
    """``prod_k sin(pi x_k)``."""
    f = _ProductSine()
    return SmoothFunction("product-sine", f.value, f.grad, f.hess)


def _catalog_affine(s: int) -> SmoothFunction:
    return affine(0.2, np.full(s, 0.3 / s), s)


CATALOG = {
    "affine": _catalog_affine,
    "sine": lambda s: sine(),
    "bump": lambda s: gaussian_bump(),
    "product-sine": lambda s: product_sine(),
}


def catalog_function(name: str, s: int) -> SmoothFunction:
    key = name.lower().replace("_", "-")
    aliases = {"sine1d": "sine", "sine2d": "sine", "gaussian-bump": "bump", "productsine": "product-sine"}
    key = aliases.get(key, key)
    if key not in CATALOG:
        raise KeyError(f"unknown target {name!r}; choose from {sorted(CATALOG)}")
    return CATALOG[key](s)


# ----------------------------------------------------------------------
# Sobolev normalization
# ----------------------------------------------------------------------
def sobolev_norm(fn: SmoothFunction, s: int, grid_cap: int = 201) -> float:
    """``sum_{|k| <= 2} ||D^k h||_inf`` estimated on a uniform grid.

    The sum runs over multi-indices ``k``, so each mixed partial
    ``d^2 h / dx_i dx_j`` (``i < j``) counts once.
    """
    if fn.hess is None:
        raise DomainError(f"target {fn.name!r} has no second derivatives")
    per_axis = grid_cap if s <= 2 else 51
    axes = [np.linspace(0.0, 1.0, per_axis)] * s
    X = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    total = np.abs(fn.value(X)).max()
    total += np.abs(fn.grad(X)).max(axis=0).sum()
    H = np.abs(fn.hess(X)).max(axis=0)
    total += H[np.triu_indices(s)].sum()
    return float(total)


@dataclass(frozen=True)
class TargetFunction:
    """A member ``phi(x, y) = pi(h(x), y)`` of the target family.

    ``h = scale * fn``; the input distribution kappa is uniform on
    ``[0, 1]^s``.
    """

    fn: SmoothFunction
    family: ExpFamily
    s: int
    scale: float = 1.0
    norm: float = field(default=float("nan"))

    @property
    def name(self) -> str:
        return self.fn.name

    def h(self, X) -> np.ndarray:
        return self.scale * self.fn.value(_pts(X, self.s))

    def grad(self, X) -> np.ndarray:
        return self.scale * self.fn.grad(_pts(X, self.s))

    def hess(self, X) -> np.ndarray:
        return self.scale * self.fn.hess(_pts(X, self.s))

    def mean(self, X) -> np.ndarray:
        return self.family.mean_link(self.h(X))

    def log_density(self, X, y) -> np.ndarray:
        return self.family.log_density(self.h(X), np.asarray(y, dtype=float).ravel())

    def log_density_grid(self, X, yvals) -> np.ndarray:
        return self.family.log_density(self.h(X)[:, None], np.asarray(yvals, dtype=float)[None, :])

    def h_range(self, X) -> tuple[float, float]:
        h = self.h(X)
        return float(h.min()), float(h.max())


def _pts(X, s) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != s:
        raise DomainError(f"expected points of dimension {s}, got {X.shape}")
    return X


def make_target(h_spec, family: ExpFamily, s: int, scale: float = 1.0) -> TargetFunction:
    """Build a target with ``h`` normalized to the unit Sobolev ball.

    ``h_spec`` is a catalog name or a :class:`SmoothFunction`. After the user
    ``scale`` is applied, ``h`` is shrunk (never enlarged) so that the
    derivative-sum norm is at most 1; the achieved norm is recorded.
    """
    fn = catalog_function(h_spec, s) if isinstance(h_spec, str) else h_spec
    if fn.hess is None:
        raise DomainError(f"target {fn.name!r} must supply second derivatives")
    raw = abs(scale) * sobolev_norm(fn, s)
    factor = scale / raw if raw > 1.0 else scale
    return TargetFunction(fn, family, s, factor, sobolev_norm(fn, s) * abs(factor))


def sample_dataset(target: TargetFunction, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` i.i.d. pairs with ``x ~ Uniform[0,1]^s`` and ``y ~ pi(h(x), .)``."""
    if n < 1:
        raise DomainError(f"sample size must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    X = rng.random((n, target.s))
    y = target.family.sample(target.h(X), rng)
    return X, y


def write_dataset_csv(path, X, y) -> None:
    X = np.atleast_2d(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{k + 1}" for k in range(X.shape[1])] + ["y"])
        for row, yi in zip(X, np.ravel(y)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(yi))])


def read_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "y":
        raise ValueError(f"{path}: expected header x_1..x_s,y")
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return data[:, :-1], data[:, -1]


def taylor_hme(target: TargetFunction, partition: Partition, tau: float) -> HMEModel:
    """Piecewise first-order Taylor approximant on a partition.

    Gates come from :func:`indicator_gates`; the expert on cell ``Q_J`` has
    linear predictor ``h(c_J) + grad h(c_J) . (x - c_J)`` with ``c_J`` the
    cell center.
    """
    if partition.s != target.s:
        raise DomainError(f"partition dimension {partition.s} != target dimension {target.s}")
    structure, gates = indicator_gates(partition, tau)
    c = partition.centers()
    g = target.grad(c)
    alpha = target.h(c) - (g * c).sum(axis=1)
    return HMEModel(structure, gates, alpha, g, target.family)


def nested_partitions(counts, s: int) -> list[Partition]:
    """Uniform partitions with ``counts`` cells per axis."""
    return [Partition.uniform([c] * s) for c in counts]


def probe_grid(s: int, per_axis: int = 33) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, per_axis)] * s
    return np.array(list(itertools.product(*axes)))
