"""One-parameter exponential-family regression densities.

Each family is parameterized by the linear predictor ``h``; the conditional
mean is ``psi(h)`` (the inverse link) and the second moment is ``nu(h)``.
All public functions are vectorized over ``h`` and ``y`` with numpy
broadcasting.

Supported families and their inverse links:

=======================  =================  ==========================
tag                      support            psi(h)
=======================  =================  ==========================
gaussian(sigma)          real line          h
poisson                  0, 1, 2, ...       exp(h)
truncated_poisson(K)     0, 1, ..., K       exp(h)-tilted, renormalized
bernoulli                {0, 1}             1 / (1 + exp(-h))
exponential              (0, inf)           exp(h)
truncated_exponential(T) (0, T)             rate exp(-h), renormalized
=======================  =================  ==========================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit, gammaln, log_expit, logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

FAMILY_TAGS = (
    "gaussian",
    "poisson",
    "truncated_poisson",
    "bernoulli",
    "exponential",
    "truncated_exponential",
)

# families whose densities exponentiate h and therefore clamp it
_CLAMPED = {"poisson", "exponential", "truncated_exponential"}


class DomainError(ValueError):
    """Input outside the support or domain of an operation."""


@dataclass(frozen=True)
class ExpFamily:
    """A one-parameter exponential family ``pi(h, y)``.

    Parameters
    ----------
    tag : str
        One of :data:`FAMILY_TAGS`.
    sigma : float
        Known standard deviation (gaussian only).
    K : int
        Upper cutoff of the support (truncated_poisson only).
    T : float
        Upper cutoff of the support (truncated_exponential only).
    safe_range : tuple of float
        Range to which ``h`` is clamped before exponentiation.
    """

    tag: str
    sigma: float = 1.0
    K: int = 0
    T: float = 0.0
    safe_range: tuple[float, float] = (-30.0, 30.0)

    def __post_init__(self):
        if self.tag not in FAMILY_TAGS:
            raise ValueError(f"unknown family {self.tag!r}; expected one of {FAMILY_TAGS}")
        if self.tag == "gaussian" and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.tag == "truncated_poisson" and (int(self.K) != self.K or self.K < 1):
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if self.tag == "truncated_exponential" and not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        lo, hi = self.safe_range
        if not lo < hi:
            raise ValueError(f"invalid safe_range {self.safe_range}")

    # ------------------------------------------------------------------
    # descriptors
    # ------------------------------------------------------------------
    @property
    def discrete(self) -> bool:
        return self.tag in ("poisson", "truncated_poisson", "bernoulli")

    @property
    def base_measure(self) -> str:
        return "counting" if self.discrete else "lebesgue"

    @property
    def support(self) -> tuple[float, float]:
        """Closed hull of the support as ``(low, high)``."""
        return {
            "gaussian": (-np.inf, np.inf),
            "poisson": (0.0, np.inf),
            "truncated_poisson": (0.0, float(self.K)),
            "bernoulli": (0.0, 1.0),
            "exponential": (0.0, np.inf),
            "truncated_exponential": (0.0, float(self.T)),
        }[self.tag]

    @property
    def bounded_support(self) -> bool:
        lo, hi = self.support
        return np.isfinite(lo) and np.isfinite(hi)

    def in_support(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        lo, hi = self.support
        ok = np.isfinite(y) & (y >= lo) & (y <= hi)
        if self.discrete:
            ok &= y == np.floor(y)
        if self.tag in ("exponential", "truncated_exponential"):
            ok &= y > 0
        return ok

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"family": self.tag}
        if self.tag == "gaussian":
            d["sigma"] = float(self.sigma)
        elif self.tag == "truncated_poisson":
            d["K"] = int(self.K)
        elif self.tag == "truncated_exponential":
            d["T"] = float(self.T)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExpFamily":
        if not isinstance(d, dict) or "family" not in d:
            raise ValueError(f"family record must be a mapping with a 'family' key, got {d!r}")
        tag = d["family"]
        kwargs: dict[str, Any] = {}
        if tag == "gaussian":
            kwargs["sigma"] = float(d.get("sigma", 1.0))
        elif tag == "truncated_poisson":
            if "K" not in d:
                raise ValueError("truncated_poisson requires 'K'")
            kwargs["K"] = int(d["K"])
        elif tag == "truncated_exponential":
            if "T" not in d:
                raise ValueError("truncated_exponential requires 'T'")
            kwargs["T"] = float(d["T"])
        return cls(tag, **kwargs)

    def __str__(self):
        extra = {k: v for k, v in self.to_dict().items() if k != "family"}
        if not extra:
            return self.tag
        return self.tag + "(" + ", ".join(f"{k}={v}" for k, v in extra.items()) + ")"

    # ------------------------------------------------------------------
    # internals
    # ------------------------------------------------------------------
    def _clamp(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if self.tag not in _CLAMPED:
            return h
        lo, hi = self.safe_range
        n_out = np.count_nonzero((h < lo) | (h > hi))
        if n_out:
            logger.debug("clamped %d linear predictor value(s) to %s", n_out, self.safe_range)
            h = np.clip(h, lo, hi)
        return h

    def _tp_log_normalizer(self, h) -> np.ndarray:
        # log sum_{j<=K} exp(j h) / j!
        j = np.arange(self.K + 1, dtype=float)
        h = np.asarray(h, dtype=float)
        terms = h[..., None] * j - gammaln(j + 1.0)
        return logsumexp(terms, axis=-1)

    def _tp_moments(self, h) -> tuple[np.ndarray, np.ndarray]:
        j = np.arange(self.K + 1, dtype=float)
        h = np.asarray(h, dtype=float)
        terms = h[..., None] * j - gammaln(j + 1.0)
        w = np.exp(terms - logsumexp(terms, axis=-1, keepdims=True))
        return (w * j).sum(-1), (w * j * j).sum(-1)

    def _te_moments(self, h) -> tuple[np.ndarray, np.ndarray]:
        # moments of rate lam = exp(-h) exponential truncated to (0, T),
        # written through u = lam * T on the unit interval
        h = self._clamp(h)
        T = self.T
        u = np.exp(-h) * T
        m1 = np.empty_like(u)
        m2 = np.empty_like(u)
        small = u < 1.0
        if np.any(small):
            us = u[small]
            n = np.arange(30, dtype=float)
            coef = (-us[..., None]) ** n / np.exp(gammaln(n + 1.0))
            s0 = (coef / (n + 1.0)).sum(-1)
            s1 = (coef / (n + 2.0)).sum(-1)
            s2 = (coef / (n + 3.0)).sum(-1)
            m1[small] = s1 / s0
            m2[small] = s2 / s0
        big = ~small
        if np.any(big):
            ub = u[big]
            em = np.exp(-ub) / -np.expm1(-ub)
            m1[big] = 1.0 / ub - em
            m2[big] = 2.0 / ub**2 - em * (1.0 + 2.0 / ub)
        return T * m1, T * T * m2

    # ------------------------------------------------------------------
    # densities and links
    # ------------------------------------------------------------------
    def log_density(self, h, y) -> np.ndarray:
        """Log density ``log pi(h, y)`` with respect to the base measure."""
        h = np.asarray(h, dtype=float)
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(h)):
            raise DomainError("linear predictor must be finite")
        if not np.all(self.in_support(y)):
            bad = np.asarray(y)[~self.in_support(y)]
            raise DomainError(f"y outside the support of {self}: {bad.ravel()[:5]}")
        return self._log_density_unchecked(h, y)

    def _log_density_unchecked(self, h, y) -> np.ndarray:
        tag = self.tag
        if tag == "gaussian":
            s = self.sigma
            return -0.5 * LOG_2PI - np.log(s) - 0.5 * ((y - h) / s) ** 2
        if tag == "bernoulli":
            return log_expit(np.where(y > 0.5, h, -h))
        if tag == "truncated_poisson":
            return y * h - gammaln(y + 1.0) - self._tp_log_normalizer(h)
        h = self._clamp(h)
        if tag == "poisson":
            return y * h - np.exp(h) - gammaln(y + 1.0)
        lam = np.exp(-h)
        if tag == "exponential":
            return -h - lam * y
        # truncated_exponential
        return -h - lam * y - np.log(-np.expm1(-lam * self.T))

    def density(self, h, y) -> np.ndarray:
        return np.exp(self.log_density(h, y))

    def mean_link(self, h) -> np.ndarray:
        """Inverse link ``psi(h) = E[y | h]``."""
        h = _finite(h)
        tag = self.tag
        if tag == "gaussian":
            return h.copy()
        if tag == "bernoulli":
            return expit(h)
        if tag == "truncated_poisson":
            return self._tp_moments(h)[0]
        if tag == "truncated_exponential":
            return self._te_moments(h)[0]
        return np.exp(self._clamp(h))

    def second_moment_link(self, h) -> np.ndarray:
        """Second-moment link ``nu(h) = E[y^2 | h]``."""
        h = _finite(h)
        tag = self.tag
        if tag == "gaussian":
            return self.sigma**2 + h * h
        if tag == "bernoulli":
            return expit(h)
        if tag == "truncated_poisson":
            return self._tp_moments(h)[1]
        if tag == "truncated_exponential":
            return self._te_moments(h)[1]
        mu = np.exp(self._clamp(h))
        if tag == "poisson":
            return mu + mu * mu
        return 2.0 * mu * mu

    def variance(self, h) -> np.ndarray:
        h = _finite(h)
        tag = self.tag
        if tag == "gaussian":
            return np.full_like(h, self.sigma**2)
        if tag == "bernoulli":
            p = expit(h)
            return p * (1.0 - p)
        if tag in ("truncated_poisson", "truncated_exponential"):
            m1, m2 = self._tp_moments(h) if tag == "truncated_poisson" else self._te_moments(h)
            return np.maximum(m2 - m1 * m1, 0.0)
        mu = np.exp(self._clamp(h))
        return mu if tag == "poisson" else mu * mu

    def natural_slope(self, h) -> np.ndarray:
        """Derivative of the natural parameter with respect to ``h``."""
        h = np.asarray(h, dtype=float)
        if self.tag == "gaussian":
            return np.full_like(h, 1.0 / self.sigma**2)
        if self.tag in ("exponential", "truncated_exponential"):
            return np.exp(-self._clamp(h))
        return np.ones_like(h)

    def score(self, h, y) -> np.ndarray:
        """``d/dh log pi(h, y)``."""
        return self.natural_slope(h) * (np.asarray(y, dtype=float) - self.mean_link(h))

    def fisher_info(self, h) -> np.ndarray:
        """Expected information ``E[-d^2/dh^2 log pi]`` (always nonnegative)."""
        return self.natural_slope(h) ** 2 * self.variance(h)

    # ------------------------------------------------------------------
    # sampling
    # ------------------------------------------------------------------
    def sample(self, h, rng: np.random.Generator) -> np.ndarray:
        """Draw ``y ~ pi(h, .)`` for each entry of ``h``."""
        h = _finite(h)
        tag = self.tag
        if tag == "gaussian":
            return rng.normal(h, self.sigma)
        if tag == "bernoulli":
            return (rng.random(h.shape) < expit(h)).astype(float)
        if tag == "truncated_poisson":
            j = np.arange(self.K + 1, dtype=float)
            logw = h[..., None] * j - gammaln(j + 1.0)
            cdf = np.cumsum(np.exp(logw - logsumexp(logw, axis=-1, keepdims=True)), axis=-1)
            u = rng.random(h.shape)
            return np.minimum((cdf < u[..., None]).sum(-1), self.K).astype(float)
        hc = self._clamp(h)
        if tag == "poisson":
            return rng.poisson(np.exp(hc)).astype(float)
        mu = np.exp(hc)
        if tag == "exponential":
            return rng.exponential(mu)
        lam = 1.0 / mu
        u = rng.random(h.shape)
        y = -np.log1p(u * np.expm1(-lam * self.T)) / lam
        return np.clip(y, np.finfo(float).tiny, self.T)


def _finite(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(h)):
        raise DomainError("linear predictor must be finite")
    return h


def gaussian(sigma: float = 1.0) -> ExpFamily:
    return ExpFamily("gaussian", sigma=sigma)


def poisson() -> ExpFamily:
    return ExpFamily("poisson")


def truncated_poisson(K: int) -> ExpFamily:
    return ExpFamily("truncated_poisson", K=K)


def bernoulli() -> ExpFamily:
    return ExpFamily("bernoulli")


def exponential() -> ExpFamily:
    return ExpFamily("exponential")


def truncated_exponential(T: float) -> ExpFamily:
    return ExpFamily("truncated_exponential", T=T)


def parse_family(text: str) -> ExpFamily:
    """Parse a CLI family string such as ``poisson`` or ``truncated_poisson:30``."""
    name, _, arg = text.partition(":")
    name = name.strip().replace("-", "_").lower()
    aliases = {"normal": "gaussian", "logistic": "bernoulli", "binary": "bernoulli"}
    name = aliases.get(name, name)
    if name == "gaussian":
        return gaussian(float(arg) if arg else 1.0)
    if name == "truncated_poisson":
        return truncated_poisson(int(arg) if arg else 30)
    if name == "truncated_exponential":
        return truncated_exponential(float(arg) if arg else 10.0)
    return ExpFamily(name)


@dataclass
class BoundednessReport:
    """Numeric diagnostics for the boundedness conditions on ``pi``."""

    family: str
    sup_density: float
    sup_abs_dh_density: float
    inf_density: float
    probe_min_density: float
    bounded_support: bool

    @property
    def lower_bound_positive(self) -> bool:
        return self.inf_density > 0.0


def boundedness_diagnostics(
    fam: ExpFamily,
    h_grid=None,
    y_probe=None,
    fd_step: float = 1e-6,
) -> BoundednessReport:
    """Report sup of ``|pi|`` and ``|d_h pi|`` and inf of ``pi`` on a probe set.

    ``d_h pi`` is estimated by central finite differences. For families with
    unbounded support the infimum over the full support is 0 and is reported
    as such; the minimum over the probe set is reported separately.
    """
    if h_grid is None:
        h_grid = np.linspace(-5.0, 5.0, 201)
    if y_probe is None:
        y_probe = default_probe(fam)
    h = np.asarray(h_grid, dtype=float)[:, None]
    y = np.asarray(y_probe, dtype=float)[None, :]
    dens = fam.density(h, y)
    d_dens = (fam.density(h + fd_step, y) - fam.density(h - fd_step, y)) / (2 * fd_step)
    probe_min = float(dens.min())
    return BoundednessReport(
        family=str(fam),
        sup_density=float(dens.max()),
        sup_abs_dh_density=float(np.abs(d_dens).max()),
        inf_density=probe_min if fam.bounded_support else 0.0,
        probe_min_density=probe_min,
        bounded_support=fam.bounded_support,
    )


def default_probe(fam: ExpFamily) -> np.ndarray:
    tag = fam.tag
    if tag == "bernoulli":
        return np.array([0.0, 1.0])
    if tag == "truncated_poisson":
        return np.arange(fam.K + 1, dtype=float)
    if tag == "poisson":
        return np.arange(0.0, 200.0)
    if tag == "gaussian":
        return np.linspace(-20.0, 20.0, 401)
    if tag == "exponential":
        return np.geomspace(1e-3, 2e3, 200)
    return np.linspace(fam.T / 400, fam.T, 400)
