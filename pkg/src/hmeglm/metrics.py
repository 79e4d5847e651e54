"""Quadrature-based discrepancies between HME densities and targets.

All integrals are over ``[0, 1]^s x A`` against ``kappa x lambda`` with
kappa uniform. The x-integral uses a tensor Gauss-Legendre rule; the
y-integral uses a per-family rule (exact sums for finite supports, tail-cut
sums for Poisson, composite Gauss-Legendre for continuous families).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson as poisson_dist

from .expfam import ExpFamily
from .gating import Partition, cell_aligned_rule

logger = logging.getLogger(__name__)

DEFAULT_X_POINTS = {1: 512, 2: 64, 3: 16}
# models may extend the response range by this much (in h) beyond the target
H_MARGIN = 3.0
MAX_Y_POINTS = 200_000
LOG_FLOOR = np.log(1e-300)


@dataclass(frozen=True)
class Rule:
    points: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class Quadrature:
    x_rule: Rule
    y_rule: Rule


def _leggauss_01(n: int):
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


def gauss_legendre_x_rule(s: int, n_per_axis: int | None = None) -> Rule:
    """Tensor Gauss-Legendre rule on ``[0, 1]^s`` (weights sum to 1)."""
    n = n_per_axis or DEFAULT_X_POINTS.get(s, 8)
    t, w = _leggauss_01(n)
    grids = np.meshgrid(*([t] * s), indexing="ij")
    wgrids = np.meshgrid(*([w] * s), indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return Rule(X, W)


def partition_x_rule(partition: Partition, panels_per_axis: int | None = None, order: int = 8) -> Rule:
    """Composite Gauss-Legendre rule with panel edges on the partition breakpoints."""
    if panels_per_axis is None:
        panels_per_axis = {1: 64, 2: 16}.get(partition.s, 4)
    X, W = cell_aligned_rule(partition, panels_per_axis, order)
    return Rule(X, W)


def _composite(edges: np.ndarray, order: int) -> Rule:
    t, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    pts = (0.5 * (b - a) * t + 0.5 * (a + b)).ravel()
    wts = (0.5 * (b - a) * w).ravel()
    return Rule(pts, wts)


def _geometric_edges(lo_scale: float, hi: float, ratio: float = 1.5) -> np.ndarray:
    lo_scale = min(lo_scale, hi)
    k = int(np.ceil(np.log(hi / lo_scale) / np.log(ratio))) + 1
    inner = lo_scale * ratio ** np.arange(k)
    inner = inner[inner < hi]
    return np.concatenate([[0.0], inner, [hi]])


def y_rule(family: ExpFamily, h_lo: float, h_hi: float, tail: float = 1e-13) -> Rule:
    """Response rule covering ``pi(h, .)`` for every ``h`` in ``[h_lo, h_hi]``."""
    h_lo, h_hi = family._clamp(np.array([h_lo, h_hi]))
    tag = family.tag
    if tag == "bernoulli":
        return Rule(np.array([0.0, 1.0]), np.ones(2))
    if tag == "truncated_poisson":
        return Rule(np.arange(family.K + 1, dtype=float), np.ones(family.K + 1))
    if tag == "poisson":
        mu = float(np.exp(h_hi))
        k = int(poisson_dist.isf(tail, mu)) + 2
        k = max(k, int(mu + 40 * np.sqrt(mu) + 40))
        if k > MAX_Y_POINTS:
            raise ValueError(f"Poisson response rule for h up to {h_hi:g} needs {k} points (limit {MAX_Y_POINTS})")
        return Rule(np.arange(k + 1, dtype=float), np.ones(k + 1))
    if tag == "gaussian":
        sig = family.sigma
        lo, hi = h_lo - 12.0 * sig, h_hi + 12.0 * sig
        n_panels = int(np.ceil((hi - lo) / (0.5 * sig)))
        return _composite(np.linspace(lo, hi, n_panels + 1), 16)
    mu_lo, mu_hi = float(np.exp(h_lo)), float(np.exp(h_hi))
    if tag == "exponential":
        return _composite(_geometric_edges(1e-4 * mu_lo, 45.0 * mu_hi), 16)
    T = family.T
    return _composite(_geometric_edges(min(1e-4 * mu_lo, 1e-4 * T), T), 16)


def make_quadrature(family: ExpFamily, s: int, h_range=(-5.0, 5.0), x_rule: Rule | None = None) -> Quadrature:
    return Quadrature(x_rule or gauss_legendre_x_rule(s), y_rule(family, *h_range))


def _h_range(objs, X) -> tuple[float, float]:
    lo, hi = np.inf, -np.inf
    for o in objs:
        if hasattr(o, "linear_predictors"):
            H = o.linear_predictors(X)
        elif hasattr(o, "h"):
            H = o.h(X)
        else:
            continue
        lo, hi = min(lo, float(np.min(H))), max(hi, float(np.max(H)))
    if not np.isfinite(lo):
        lo, hi = -5.0, 5.0
    return lo, hi


def default_quadrature(target, *models, x_rule: Rule | None = None) -> Quadrature:
    """Quadrature whose y-rule covers the target and, near it, the models.

    Every discrepancy here is weighted by the target density, so responses
    far outside the target's range contribute nothing; model predictors are
    only followed up to ``H_MARGIN`` beyond the target's range.
    """
    xr = x_rule or gauss_legendre_x_rule(target.s)
    t_lo, t_hi = _h_range((target,), xr.points)
    m_lo, m_hi = _h_range(models, xr.points) if models else (t_lo, t_hi)
    lo = max(min(t_lo, m_lo), t_lo - H_MARGIN)
    hi = min(max(t_hi, m_hi), t_hi + H_MARGIN)
    return Quadrature(xr, y_rule(target.family, lo, hi))


def _log_grid(obj, X, yvals) -> np.ndarray:
    return obj.log_density_grid(X, yvals)


def _density_grid(obj, X, yvals) -> np.ndarray:
    if hasattr(obj, "density_grid"):
        return obj.density_grid(X, yvals)
    return np.exp(obj.log_density_grid(X, yvals))


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def _chunk_size(q: Quadrature, budget: int = 4_000_000) -> int:
    return max(1, budget // max(1, q.y_rule.points.size * 8))


def _abs_diff(lf, lt) -> np.ndarray:
    """``|e^lf - e^lt|`` without cancellation or overflow."""
    d = lf - lt
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(d > 0, np.exp(lf) * -np.expm1(-np.abs(d)), np.exp(lt) * -np.expm1(-np.abs(d)))


def _kl_terms(lf, lt) -> np.ndarray:
    """``phi (r - 1 - log r)`` with ``r = f / phi``; nonnegative termwise."""
    d = lf - lt
    with np.errstate(over="ignore", invalid="ignore"):
        small = np.exp(lt) * (np.expm1(np.minimum(d, 1.0)) - d)
        large = np.exp(lf) - np.exp(lt) * (1.0 + d)
    return np.where(d > 1.0, large, small)


def lp_distance(f, target, p: int = 2, q: Quadrature | None = None, sigma=None) -> float:
    """``{ int |f - phi|^p dsigma }^{1/p}`` with ``sigma = kappa x sigma-density``.

    The weighting density defaults to the target itself.
    """
    sigma = target if sigma is None else sigma
    q = q or default_quadrature(target, f)
    total = 0.0
    X, W = q.x_rule.points, q.x_rule.weights
    yv, yw = q.y_rule.points, q.y_rule.weights
    exact_logs = hasattr(f, "log_density_grid") and not hasattr(f, "density_grid") and hasattr(target, "log_density_grid")
    for sl in _chunks(W.size, _chunk_size(q)):
        if exact_logs:
            diff = _abs_diff(_log_grid(f, X[sl], yv), _log_grid(target, X[sl], yv))
        else:
            diff = np.abs(_density_grid(f, X[sl], yv) - _density_grid(target, X[sl], yv))
        wgt = _density_grid(sigma, X[sl], yv)
        total += float(W[sl] @ ((diff**p * wgt) @ yw))
    return total ** (1.0 / p)


def weighted_l2(f, target, q: Quadrature | None = None) -> float:
    """``int (f - phi)^2 phi dkappa dlambda`` (no square root)."""
    return lp_distance(f, target, 2, q) ** 2


def kl_divergence(f, target, q: Quadrature | None = None) -> float:
    """``KL(f, phi) = int phi log(phi / f)`` with ``phi`` the target.

    Evaluated as ``int phi (r - 1 - log r)`` with ``r = f / phi``; each term
    is nonnegative, and the added ``int (f - phi)`` is zero for normalized
    densities. Model log densities are floored at ``log(1e-300)``.
    """
    q = q or default_quadrature(target, f)
    X, W = q.x_rule.points, q.x_rule.weights
    yv, yw = q.y_rule.points, q.y_rule.weights
    total = 0.0
    floored = 0
    for sl in _chunks(W.size, _chunk_size(q)):
        lf, lt = _log_grid(f, X[sl], yv), _log_grid(target, X[sl], yv)
        low = ~(lf > LOG_FLOOR)
        if low.any():
            floored += int(np.count_nonzero(low))
            lf = np.where(low, LOG_FLOOR, lf)
        total += float(W[sl] @ (_kl_terms(lf, lt) @ yw))
    if floored:
        warnings.warn(f"KL divergence: {floored} model density value(s) floored at 1e-300", RuntimeWarning)
    return total


def mse_mean(fitted, target, q: Quadrature | Rule | None = None) -> float:
    """``int (mu_fitted(x) - mu(x))^2 dkappa(x)``."""
    if q is None:
        rule = gauss_legendre_x_rule(target.s)
    else:
        rule = q.x_rule if isinstance(q, Quadrature) else q
    gap = fitted.mean(rule.points) - target.mean(rule.points)
    return float(rule.weights @ (gap * gap))


@dataclass(frozen=True)
class Replication:
    mse: float
    converged: bool
    failed: bool
    iterations: int


def replicate_fits(structure, config, target, n: int, R: int, seed: int, q=None, jobs: int = 1) -> list[Replication]:
    """Fit ``R`` independent datasets of size ``n`` and score each fit.

    Dataset and fit seeds are spawned from ``seed`` so results do not
    depend on ``jobs``.
    """
    if R < 1:
        raise ValueError("need at least one replication")
    seeds = np.random.SeedSequence(seed).spawn(R)
    args = [(structure, config, target, n, ss, q) for ss in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_one_replication, args))
    return [_one_replication(a) for a in args]


def _one_replication(args) -> Replication:
    from dataclasses import replace

    from .fit import mle
    from .targets import sample_dataset

    structure, config, target, n, ss, q = args
    data_seed, fit_seed = ss.spawn(2)
    X, y = sample_dataset(target, n, data_seed)
    cfg = replace(config, seed=int(fit_seed.generate_state(1)[0]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            res = mle(structure, target.family, X, y, cfg)
        except FloatingPointError:
            return Replication(float("nan"), False, True, 0)
    return Replication(mse_mean(res.model, target, q), res.converged, False, len(res.loglik_trace) - 1)


def mse_replications(structure, config, target, n: int, R: int, seed: int, q=None, jobs: int = 1) -> np.ndarray:
    """Mean-response MSE of ``R`` independent fits (NaN where a fit failed)."""
    return np.array([r.mse for r in replicate_fits(structure, config, target, n, R, seed, q, jobs)])


def mse_expectation(structure, config, target, n: int, R: int = 20, seed: int = 0, q=None, jobs: int = 1) -> float:
    """Monte Carlo estimate of the expected mean-response MSE over ``R`` fits."""
    return float(np.nanmean(mse_replications(structure, config, target, n, R, seed, q, jobs)))


def integrate_y(family: ExpFamily, h, q: Rule, power: int = 0) -> np.ndarray:
    """``int y^power pi(h, y) dlambda(y)`` on a response rule, for each ``h``."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    dens = np.exp(family.log_density(h[:, None], q.points[None, :]))
    return (dens * q.points[None, :] ** power) @ q.weights
