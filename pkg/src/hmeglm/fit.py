"""Maximum-likelihood fitting of HME models by EM.

The E-step computes posterior expert responsibilities; the M-step refits
each expert by responsibility-weighted GLM (Fisher scoring) and each gate
node by weighted multinomial logistic regression. Every inner update is an
ascent step with step-halving, so the log-likelihood never decreases.
All parameters are kept inside the box ``[-box_bound, box_bound]``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import log_softmax, logsumexp

from .expfam import DomainError, ExpFamily
from .gating import GateParams, Partition, Structure, indicator_gates, node_log_probs
from .hme import HMEModel, embed_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    box_bound: float = 50.0
    max_em_iters: int = 500
    loglik_tol: float = 1e-8
    restarts: int = 1
    init_scheme: Literal["random", "partition"] = "random"
    seed: int = 0
    mstep: Literal["irls", "gradient"] = "irls"
    inner_iters: int = 25
    inner_tol: float = 1e-10
    init_scale: float = 0.5
    warm_tau: float = 20.0

    def __post_init__(self):
        if not self.box_bound > 0:
            raise ValueError("box_bound must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if not (self.loglik_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.init_scheme not in ("random", "partition"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        if self.mstep not in ("irls", "gradient"):
            raise ValueError(f"unknown M-step {self.mstep!r}")


@dataclass
class EMStats:
    clamp_events: int = 0
    degenerate_nodes: list = field(default_factory=list)


@dataclass
class FitResult:
    model: HMEModel
    loglik_trace: list[float]
    restart_logliks: list[float]
    converged: bool
    clamp_events: int = 0
    degenerate_events: int = 0
    best_restart: int = 0
    restart_traces: list[list[float]] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loglik"])
            for i, v in enumerate(self.loglik_trace):
                w.writerow([i, repr(float(v))])


def _design(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _check_data(model_or_s, X, y, family: ExpFamily):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise DomainError("data must be nonempty")
    if X.shape[0] != y.size:
        raise DomainError(f"{X.shape[0]} predictor rows but {y.size} responses")
    s = model_or_s if isinstance(model_or_s, int) else model_or_s.s
    if X.shape[1] != s:
        raise DomainError(f"model has input dimension {s}, data has {X.shape[1]}")
    if not np.all(family.in_support(y)):
        raise DomainError(f"responses outside the support of {family}")
    return X, y


# ----------------------------------------------------------------------
# E-step
# ----------------------------------------------------------------------
def responsibilities(model: HMEModel, X, y) -> tuple[np.ndarray, np.ndarray]:
    """Posterior expert responsibilities ``r_iJ`` and per-point log density."""
    lj = model.log_gates(X) + model.expert_log_densities(X, y)
    ll = logsumexp(lj, axis=1)
    return np.exp(lj - ll[:, None]), ll


def branch_responsibilities(structure: Structure, r: np.ndarray, q: int) -> np.ndarray:
    """Sum of ``r`` over subtrees below layer ``q``; shape ``(n, a_1..a_{q+1})``."""
    full = r.reshape((r.shape[0],) + structure.layer_sizes)
    axes = tuple(range(q + 2, structure.depth + 1))
    return full.sum(axis=axes) if axes else full


# ----------------------------------------------------------------------
# M-step pieces
# ----------------------------------------------------------------------
def _solve(info: np.ndarray, grad: np.ndarray) -> np.ndarray:
    d = info.shape[-1]
    scale = np.maximum(np.abs(np.diagonal(info, axis1=-2, axis2=-1)).max(axis=-1), 1.0)
    ridge = (1e-10 * scale)[..., None, None] * np.eye(d)
    return np.linalg.solve(info + ridge, grad[..., None])[..., 0]


def fit_experts(
    family: ExpFamily,
    Z: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    theta: np.ndarray,
    box: float,
    iters: int = 25,
    tol: float = 1e-10,
    method: str = "irls",
    stats: EMStats | None = None,
) -> np.ndarray:
    """Weighted one-parameter GLM fits, one per column of ``weights``.

    Maximizes ``sum_i w_iJ log pi(Z_i . theta_J, y_i)`` for each ``J`` by
    damped Fisher scoring (or gradient ascent) with step-halving; candidates
    are projected onto the box and only accepted if the objective does not
    decrease.
    """
    theta = np.array(theta, dtype=float)
    active = weights.sum(axis=0) > 1e-300

    def objective(th):
        H = Z @ th.T
        return (weights * family._log_density_unchecked(H, y[:, None])).sum(axis=0)

    q_old = objective(theta)
    for _ in range(iters):
        H = Z @ theta.T
        sc = weights * family.score(H, y[:, None])
        grad = sc.T @ Z
        if method == "irls":
            fi = weights * family.fisher_info(H)
            info = np.einsum("nm,nd,ne->mde", fi, Z, Z)
            step = _solve(info, grad)
        else:
            norm = np.maximum(weights.sum(axis=0), 1.0)[:, None]
            step = grad / norm
        t = np.ones(theta.shape[0])
        step_size = np.abs(step).max(axis=1)
        pending = active & (step_size > tol)
        moved = np.zeros(theta.shape[0])
        for _half in range(40):
            if not pending.any():
                break
            cand = theta + t[:, None] * step
            clipped = np.clip(cand, -box, box)
            q_new = objective(np.where(pending[:, None], clipped, theta))
            ok = pending & np.isfinite(q_new) & (q_new >= q_old)
            if ok.any():
                if stats is not None:
                    stats.clamp_events += int(np.count_nonzero(cand[ok] != clipped[ok]))
                moved[ok] = np.abs(clipped[ok] - theta[ok]).max(axis=1)
                theta[ok] = clipped[ok]
                q_old[ok] = q_new[ok]
            pending &= ~ok
            t[pending] *= 0.5
            pending &= t * step_size > tol
        if moved.max(initial=0.0) < tol:
            break
    return theta


def fit_gate_node(
    Z: np.ndarray,
    counts: np.ndarray,
    W: np.ndarray,
    box: float,
    iters: int = 25,
    tol: float = 1e-10,
    method: str = "irls",
    stats: EMStats | None = None,
) -> np.ndarray:
    """Weighted multinomial logistic regression for one gate node.

    ``counts`` is ``(n, a)`` soft targets, ``W`` is ``(a, d)`` with row 0 the
    reference child (held at zero). Returns updated ``W``.
    """
    a, d = W.shape
    W = np.array(W, dtype=float)
    if a == 1:
        return W
    N = counts.sum(axis=1)

    def objective(Wf):
        return float((counts * log_softmax(Z @ Wf.T, axis=1)).sum())

    q_old = objective(W)
    for _ in range(iters):
        P = np.exp(log_softmax(Z @ W.T, axis=1))
        G = counts - N[:, None] * P
        grad = (G[:, 1:].T @ Z).ravel()
        if method == "irls":
            Pf = P[:, 1:]
            k = a - 1
            cov = N[:, None, None] * (np.einsum("nc,ce->nce", Pf, np.eye(k)) - Pf[:, :, None] * Pf[:, None, :])
            info = np.einsum("nce,nd,nf->cdef", cov, Z, Z).reshape(k * d, k * d)
            step = _solve(info, grad)
        else:
            step = grad / max(N.sum(), 1.0)
        step = step.reshape(a - 1, d)
        step_size = np.abs(step).max()
        if step_size <= tol:
            break
        t = 1.0
        accepted = False
        for _half in range(40):
            cand = W.copy()
            cand[1:] = W[1:] + t * step
            clipped = np.clip(cand, -box, box)
            q_new = objective(clipped)
            if np.isfinite(q_new) and q_new >= q_old:
                if stats is not None:
                    stats.clamp_events += int(np.count_nonzero(cand != clipped))
                moved = np.abs(clipped - W).max()
                W, q_old, accepted = clipped, q_new, True
                break
            t *= 0.5
            if t * step_size <= tol:
                break
        if not accepted or moved < tol:
            break
    return W


def em_step(model: HMEModel, X, y, config: FitConfig = FitConfig(), stats: EMStats | None = None) -> HMEModel:
    """One generalized-EM iteration."""
    X, y = _check_data(model, X, y, model.family)
    st = model.structure
    model = model.replace(gates=model.gates.gauged())
    r, _ = responsibilities(model, X, y)
    Z = _design(X)
    n = X.shape[0]
    tiny = 1e-12 * n

    # experts
    theta = np.hstack([model.alpha[:, None], model.beta])
    dead = r.sum(axis=0) <= tiny
    if stats is not None:
        stats.degenerate_nodes += [("expert", int(j)) for j in np.flatnonzero(dead)]
    theta = fit_experts(
        model.family, Z, y, np.where(dead[None, :], 0.0, r), theta,
        config.box_bound, config.inner_iters, config.inner_tol, config.mstep, stats,
    )

    # gates
    phi = [np.array(p) for p in model.gates.phi]
    gamma = [np.array(g) for g in model.gates.gamma]
    for q in range(st.depth):
        R = branch_responsibilities(st, r, q)
        for prefix in st.node_prefixes(q):
            counts = R[(slice(None),) + prefix]
            if counts.sum() <= tiny:
                if stats is not None:
                    stats.degenerate_nodes.append(("gate", prefix))
                logger.warning("degenerate gate node %s left unchanged", prefix)
                continue
            W = np.hstack([phi[q][prefix][:, None], gamma[q][prefix]])
            W = fit_gate_node(Z, counts, W, config.box_bound, config.inner_iters, config.inner_tol, config.mstep, stats)
            phi[q][prefix] = W[:, 0]
            gamma[q][prefix] = W[:, 1:]

    return model.replace(gates=GateParams(tuple(phi), tuple(gamma)), alpha=theta[:, 0], beta=theta[:, 1:])


# ----------------------------------------------------------------------
# gradient
# ----------------------------------------------------------------------
def loglik_gradient(model: HMEModel, X, y) -> np.ndarray:
    """Gradient of the average log-likelihood in :meth:`HMEModel.to_vector` order.

    Gate parameters are differentiated un-gauged (every child, including the
    reference child).
    """
    X, y = _check_data(model, X, y, model.family)
    n = X.shape[0]
    st = model.structure
    r, _ = responsibilities(model, X, y)
    layers = node_log_probs(st, model.gates, X)
    parts = []
    for q in range(st.depth):
        R = branch_responsibilities(st, r, q)
        G = R - R.sum(axis=-1, keepdims=True) * np.exp(layers[q])
        parts.append(G.mean(axis=0).ravel())
        parts.append((np.einsum("n...,ns->...s", G, X) / n).ravel())
    H = model.linear_predictors(X)
    sc = r * model.family.score(H, y[:, None])
    parts.append(sc.mean(axis=0))
    parts.append((sc.T @ X / n).ravel())
    return np.concatenate(parts)


# ----------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------
def random_init(structure: Structure, family: ExpFamily, s: int, rng: np.random.Generator, config: FitConfig) -> HMEModel:
    c = min(config.init_scale, config.box_bound)
    gates = GateParams.random(structure, s, rng, c)
    alpha = rng.uniform(-c, c, structure.cardinality)
    beta = rng.uniform(-c, c, (structure.cardinality, s))
    return HMEModel(structure, gates, alpha, beta, family)


def partition_warm_start(structure: Structure, family: ExpFamily, X, y, config: FitConfig) -> HMEModel:
    """Indicator gates at moderate sharpness plus per-cell weighted GLM fits."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s = X.shape[1]
    if structure.depth > s:
        raise DomainError(f"partition warm start needs at most {s} layers, structure has {structure.depth}")
    counts = structure.layer_sizes + (1,) * (s - structure.depth)
    st_full, gates = indicator_gates(Partition.uniform(counts), config.warm_tau)
    gates = GateParams(gates.phi[: structure.depth], gates.gamma[: structure.depth])
    tmp = HMEModel(structure, gates, np.zeros(structure.cardinality), np.zeros((structure.cardinality, s)), family)
    w = np.exp(tmp.log_gates(X))
    theta = fit_experts(family, _design(X), np.asarray(y, dtype=float).ravel(), w,
                        np.zeros((structure.cardinality, s + 1)), config.box_bound, config.inner_iters, config.inner_tol)
    gates = GateParams(tuple(np.clip(p, -config.box_bound, config.box_bound) for p in gates.phi),
                       tuple(np.clip(g, -config.box_bound, config.box_bound) for g in gates.gamma))
    return tmp.replace(gates=gates, alpha=theta[:, 0], beta=theta[:, 1:])


def _clip_model(model: HMEModel, box: float) -> HMEModel:
    g = model.gates.gauged()
    return model.replace(
        gates=GateParams(tuple(np.clip(p, -box, box) for p in g.phi), tuple(np.clip(v, -box, box) for v in g.gamma)),
        alpha=np.clip(model.alpha, -box, box),
        beta=np.clip(model.beta, -box, box),
    )


def run_em(model: HMEModel, X, y, config: FitConfig, stats: EMStats | None = None) -> tuple[HMEModel, list[float], bool]:
    """Iterate :func:`em_step` until the log-likelihood change is below tolerance."""
    trace = [model.log_likelihood(X, y)]
    converged = False
    for _ in range(config.max_em_iters):
        model = em_step(model, X, y, config, stats)
        ll = model.log_likelihood(X, y)
        if not np.isfinite(ll):
            raise FloatingPointError("non-finite log-likelihood")
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < config.loglik_tol:
            converged = True
            break
    return model, trace, converged


def mle(
    structure: Structure,
    family: ExpFamily,
    X,
    y,
    config: FitConfig = FitConfig(),
    init_model: HMEModel | None = None,
) -> FitResult:
    """Best-of-restarts maximum-likelihood fit within the parameter box.

    Restart 0 starts from ``init_model`` if given, else from the configured
    init scheme; the other restarts use random initialization. Ties in the
    final log-likelihood go to the lowest restart index.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s = X.shape[1]
    X, y = _check_data(s, X, y, family)
    if not np.all(np.isfinite(y)):
        raise DomainError("responses must be finite")
    rng = np.random.default_rng(config.seed)
    best = None
    logliks, traces = [], []
    clamps = 0
    degenerate = 0
    for k in range(config.restarts):
        if k == 0 and init_model is not None:
            start = init_model
        elif k == 0 and config.init_scheme == "partition":
            start = partition_warm_start(structure, family, X, y, config)
        else:
            start = random_init(structure, family, s, rng, config)
        start = _clip_model(start, config.box_bound)
        stats = EMStats()
        try:
            model, trace, conv = run_em(start, X, y, config, stats)
        except FloatingPointError:
            warnings.warn(f"restart {k} aborted: non-finite log-likelihood", RuntimeWarning)
            logliks.append(float("-inf"))
            traces.append([])
            continue
        clamps += stats.clamp_events
        if stats.degenerate_nodes:
            degenerate += len(stats.degenerate_nodes)
            warnings.warn(f"restart {k}: {len(stats.degenerate_nodes)} degenerate node event(s)", RuntimeWarning)
        logliks.append(trace[-1])
        traces.append(trace)
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, conv, k)
    if best is None:
        raise FloatingPointError("all restarts produced a non-finite log-likelihood")
    model, trace, conv, k = best
    return FitResult(model, trace, logliks, conv, clamps, degenerate, k, traces)


# ----------------------------------------------------------------------
# structure selection
# ----------------------------------------------------------------------
@dataclass
class SelectionResult:
    fits: dict[Structure, FitResult]
    rejected: list[tuple[Structure, str]]
    best: Structure | None
    mse: dict[Structure, float] = field(default_factory=dict)
    best_by_mse: Structure | None = None


def _embeds(small: Structure, big: Structure) -> bool:
    a = () if small.layer_sizes == (1,) else small.layer_sizes
    b = big.layer_sizes
    return len(a) <= len(b) and all(y % x == 0 for x, y in zip(a, b))


def select_structure(
    candidates,
    family: ExpFamily,
    X,
    y,
    config: FitConfig = FitConfig(),
    m_bound: int | None = None,
    target=None,
    warm_start: bool = True,
    quadrature=None,
) -> SelectionResult:
    """Fit each admissible candidate structure and pick the best.

    Candidates with more layers than the input dimension, or more experts
    than ``m_bound``, are rejected. With ``warm_start`` each candidate's
    first restart starts from the best smaller fitted candidate embedded
    into it, so the fitted log-likelihood is monotone along nested chains.
    If ``target`` is given the mean-response MSE of each fit is also reported.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s = X.shape[1]
    cands = [c if isinstance(c, Structure) else Structure(tuple(c)) for c in candidates]
    if m_bound is None:
        m_bound = max(c.cardinality for c in cands)
    rejected, ok = [], []
    for c in cands:
        if not c.in_S(s):
            rejected.append((c, f"{c.depth} layers exceeds input dimension {s}"))
        elif not c.in_J_m(m_bound):
            rejected.append((c, f"{c.cardinality} experts exceeds bound {m_bound}"))
        else:
            ok.append(c)
    fits: dict[Structure, FitResult] = {}
    for c in sorted(ok, key=lambda c: (c.cardinality, c.depth)):
        init = None
        if warm_start:
            nested = [f for f in fits if _embeds(f, c)]
            if nested:
                donor = max(nested, key=lambda f: (f.cardinality, fits[f].loglik))
                init = embed_model(fits[donor].model, c)
        fits[c] = mle(c, family, X, y, config, init_model=init)
    ordered = {c: fits[c] for c in ok}
    best = None
    for c in ok:
        if best is None or ordered[c].loglik > ordered[best].loglik:
            best = c
    result = SelectionResult(ordered, rejected, best)
    if target is not None:
        from .metrics import mse_mean

        result.mse = {c: mse_mean(f.model, target, quadrature) for c, f in ordered.items()}
        result.best_by_mse = min(result.mse, key=result.mse.get) if result.mse else None
    return result
