"""Rectangular HME structures, logistic gating, and axis-aligned partitions.

Gate parameters are stored layer by layer. For a structure with layer sizes
``(a_1, ..., a_l)`` and input dimension ``s``, layer ``q`` (0-based) holds

* ``phi[q]`` with shape ``(a_1, ..., a_q, a_{q+1})`` -- one intercept per
  node prefix and child, and
* ``gamma[q]`` with shape ``(a_1, ..., a_q, a_{q+1}, s)`` -- one slope vector
  per node prefix and child.

Expert labels are enumerated in C order of the multi-index, matching
``itertools.product(*map(range, layer_sizes))``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .expfam import DomainError


class StructureError(ValueError):
    """Parameters inconsistent with a structure."""


@dataclass(frozen=True)
class Structure:
    """Rectangular structure ``A_1 x ... x A_l`` given by its layer sizes."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(a) for a in self.layer_sizes)
        if len(sizes) < 1 or any(a < 1 for a in sizes):
            raise StructureError(f"layer sizes must be positive integers, got {self.layer_sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    @property
    def cardinality(self) -> int:
        return int(np.prod(self.layer_sizes))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.layer_sizes

    def labels(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(a) for a in self.layer_sizes)))

    def label_index(self, label) -> int:
        return int(np.ravel_multi_index(tuple(label), self.layer_sizes))

    def node_prefixes(self, q: int) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(a) for a in self.layer_sizes[:q])))

    def in_J_m(self, m: int) -> bool:
        return self.cardinality <= m

    def in_S(self, s: int) -> bool:
        return self.depth <= s

    def __str__(self):
        return "x".join(str(a) for a in self.layer_sizes)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GateParams:
    """Logistic gating parameters, one ``(phi, gamma)`` pair per node-child."""

    phi: tuple[np.ndarray, ...]
    gamma: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(_frozen(p) for p in self.phi))
        object.__setattr__(self, "gamma", tuple(_frozen(g) for g in self.gamma))

    @property
    def s(self) -> int:
        return int(self.gamma[0].shape[-1])

    def check(self, structure: Structure, s: int | None = None) -> None:
        """Raise :class:`StructureError` unless complete for ``structure``."""
        if len(self.phi) != structure.depth or len(self.gamma) != structure.depth:
            raise StructureError(
                f"expected {structure.depth} gate layers, got {len(self.phi)} phi / {len(self.gamma)} gamma"
            )
        dim = self.s if s is None else s
        for q in range(structure.depth):
            shp = structure.layer_sizes[: q + 1]
            if self.phi[q].shape != shp:
                raise StructureError(f"layer {q}: phi shape {self.phi[q].shape} != {shp}")
            if self.gamma[q].shape != shp + (dim,):
                raise StructureError(f"layer {q}: gamma shape {self.gamma[q].shape} != {shp + (dim,)}")

    def gauged(self) -> "GateParams":
        """Equivalent parameters with child 0 of every node set to zero."""
        phi = tuple(p - p[..., :1] for p in self.phi)
        gamma = tuple(g - g[..., :1, :] for g in self.gamma)
        return GateParams(phi, gamma)

    def is_gauged(self, atol: float = 0.0) -> bool:
        return all(np.all(np.abs(p[..., 0]) <= atol) for p in self.phi) and all(
            np.all(np.abs(g[..., 0, :]) <= atol) for g in self.gamma
        )

    @classmethod
    def zeros(cls, structure: Structure, s: int) -> "GateParams":
        phi = [np.zeros(structure.layer_sizes[: q + 1]) for q in range(structure.depth)]
        gamma = [np.zeros(structure.layer_sizes[: q + 1] + (s,)) for q in range(structure.depth)]
        return cls(tuple(phi), tuple(gamma))

    @classmethod
    def random(cls, structure: Structure, s: int, rng: np.random.Generator, scale: float = 1.0) -> "GateParams":
        phi = [rng.uniform(-scale, scale, structure.layer_sizes[: q + 1]) for q in range(structure.depth)]
        gamma = [rng.uniform(-scale, scale, structure.layer_sizes[: q + 1] + (s,)) for q in range(structure.depth)]
        return cls(tuple(phi), tuple(gamma)).gauged()


def _check_x(X, s: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[-1] != s:
        raise DomainError(f"expected points of dimension {s}, got shape {X.shape}")
    if np.any(X < 0.0) or np.any(X > 1.0) or not np.all(np.isfinite(X)):
        raise DomainError("points must lie in [0, 1]^s")
    return X


def node_log_probs(structure: Structure, params: GateParams, X) -> list[np.ndarray]:
    """Per-layer conditional log-probabilities.

    Returns a list whose entry ``q`` has shape ``(n, a_1, ..., a_{q+1})``:
    ``log g_{j_{q+1} | j_1..j_q}(x)``.
    """
    params.check(structure)
    X = _check_x(X, params.s)
    out = []
    for q in range(structure.depth):
        scores = params.phi[q][None] + np.einsum("...s,ns->n...", params.gamma[q], X)
        out.append(log_softmax(scores, axis=-1))
    return out


def log_gate_vector(structure: Structure, params: GateParams, X) -> np.ndarray:
    """Log gate weights, shape ``(n, m)`` with labels in C order."""
    layers = node_log_probs(structure, params, X)
    n = layers[0].shape[0]
    total = np.zeros((n,) + structure.layer_sizes)
    for q, lp in enumerate(layers):
        total = total + lp.reshape(lp.shape + (1,) * (structure.depth - q - 1))
    return total.reshape(n, structure.cardinality)


def gate_vector(structure: Structure, params: GateParams, X) -> np.ndarray:
    """Gate weights ``g_J(x)``: nonnegative, summing to one over ``J``.

    ``X`` may be a single point of length ``s`` or an ``(n, s)`` array; the
    result has shape ``(m,)`` or ``(n, m)`` accordingly.
    """
    single = np.ndim(X) == 1
    g = np.exp(log_gate_vector(structure, params, X))
    return g[0] if single else g


# ----------------------------------------------------------------------
# partitions
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Partition:
    """Axis-aligned grid partition of ``[0, 1]^s``.

    ``breakpoints[k]`` are the interior cut points on axis ``k``; cell
    ``(j_1, ..., j_s)`` is the product of the ``j_k``-th intervals.
    """

    breakpoints: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        bps = tuple(tuple(float(t) for t in b) for b in self.breakpoints)
        if len(bps) < 1:
            raise DomainError("partition needs at least one axis")
        for b in bps:
            arr = np.asarray(b)
            if arr.size and (np.any(arr <= 0.0) or np.any(arr >= 1.0) or np.any(np.diff(arr) <= 0)):
                raise DomainError(f"breakpoints must be strictly increasing in (0, 1), got {b}")
        object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def uniform(cls, counts) -> "Partition":
        counts = [int(c) for c in np.atleast_1d(counts)]
        if any(c < 1 for c in counts):
            raise DomainError(f"cell counts must be positive, got {counts}")
        return cls(tuple(tuple(np.arange(1, c) / c) for c in counts))

    @property
    def s(self) -> int:
        return len(self.breakpoints)

    @property
    def axis_counts(self) -> tuple[int, ...]:
        return tuple(len(b) + 1 for b in self.breakpoints)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.axis_counts))

    def edges(self, k: int) -> np.ndarray:
        return np.concatenate([[0.0], self.breakpoints[k], [1.0]])

    def cell_multi_index(self, X) -> np.ndarray:
        """Cell multi-index of each point, shape ``(n, s)``.

        Points on a breakpoint go to the right-hand cell (the last cell is
        closed at 1).
        """
        X = _check_x(X, self.s)
        idx = np.empty(X.shape, dtype=int)
        for k in range(self.s):
            idx[:, k] = np.searchsorted(np.asarray(self.breakpoints[k]), X[:, k], side="right")
        return idx

    def cell_index(self, X) -> np.ndarray:
        return np.ravel_multi_index(self.cell_multi_index(X).T, self.axis_counts)

    def indicators(self, X) -> np.ndarray:
        """``chi_{Q_J}(x)`` as an ``(n, n_cells)`` 0/1 array."""
        X = _check_x(X, self.s)
        out = np.zeros((X.shape[0], self.n_cells))
        out[np.arange(X.shape[0]), self.cell_index(X)] = 1.0
        return out

    def cell_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of every cell, each ``(n_cells, s)``."""
        lows = [self.edges(k)[:-1] for k in range(self.s)]
        highs = [self.edges(k)[1:] for k in range(self.s)]
        lo = np.array(list(itertools.product(*lows)))
        hi = np.array(list(itertools.product(*highs)))
        return lo, hi

    def centers(self) -> np.ndarray:
        lo, hi = self.cell_bounds()
        return 0.5 * (lo + hi)

    def max_diameter(self) -> float:
        lo, hi = self.cell_bounds()
        return float(np.sqrt(((hi - lo) ** 2).sum(axis=1)).max())

    def fine_constant(self) -> float:
        """Achieved ``c_0`` with ``diam <= c_0 / p^{1/s}``."""
        return self.max_diameter() * self.n_cells ** (1.0 / self.s)

    def refines(self, other: "Partition") -> bool:
        return self.s == other.s and all(
            set(o).issubset(set(b)) for b, o in zip(self.breakpoints, other.breakpoints)
        )


def indicator_gates(partition: Partition, tau: float) -> tuple[Structure, GateParams]:
    """Sharpened logistic gates approximating the cell indicators.

    Layer ``k`` gates on coordinate ``k`` alone. With breakpoints
    ``t_1 < ... < t_{a-1}`` child ``j`` (0-based) gets score
    ``tau * (j * x_k - sum_{i<j} t_i)``, so adjacent children differ by
    ``tau * (x_k - t_j)`` and the largest score belongs to the interval
    containing ``x_k``.
    """
    if not tau >= 0.0 or not np.isfinite(tau):
        raise DomainError(f"sharpness must be a finite nonnegative number, got {tau}")
    s = partition.s
    structure = Structure(partition.axis_counts)
    phi, gamma = [], []
    for k, bps in enumerate(partition.breakpoints):
        a = len(bps) + 1
        prefix = structure.layer_sizes[:k]
        cums = np.concatenate([[0.0], np.cumsum(bps)])
        layer_phi = -tau * cums
        layer_gamma = np.zeros((a, s))
        layer_gamma[:, k] = tau * np.arange(a)
        phi.append(np.broadcast_to(layer_phi, prefix + (a,)).copy())
        gamma.append(np.broadcast_to(layer_gamma, prefix + (a, s)).copy())
    return structure, GateParams(tuple(phi), tuple(gamma))


def indicator_gates_limit(partition: Partition, X) -> np.ndarray:
    """The ``tau -> inf`` limit of :func:`indicator_gates` (cell indicators)."""
    return partition.indicators(X)


# ----------------------------------------------------------------------
# gate-indicator error
# ----------------------------------------------------------------------
def cell_aligned_rule(partition: Partition, panels_per_axis: int = 512, order: int = 8):
    """Composite Gauss-Legendre rule on ``[0, 1]^s`` with panels aligned to cells.

    Each cell interval on each axis is split into equal panels so that the
    total panel count per axis is at least ``panels_per_axis``. Returns
    ``(points, weights)`` with weights summing to 1.
    """
    nodes, wts = np.polynomial.legendre.leggauss(order)
    axes_pts, axes_w = [], []
    for k in range(partition.s):
        edges = partition.edges(k)
        n_sub = max(1, int(np.ceil(panels_per_axis / (len(edges) - 1))))
        pts, w = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            sub = np.linspace(a, b, n_sub + 1)
            lo, hi = sub[:-1, None], sub[1:, None]
            pts.append((0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)).ravel())
            w.append((0.5 * (hi - lo) * wts).ravel())
        axes_pts.append(np.concatenate(pts))
        axes_w.append(np.concatenate(w))
    return _tensor(axes_pts, axes_w)


def _tensor(axes_pts, axes_w):
    grids = np.meshgrid(*axes_pts, indexing="ij")
    wgrids = np.meshgrid(*axes_w, indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return X, W


def gate_indicator_error(
    structure: Structure,
    params: GateParams,
    partition: Partition,
    p: int = 2,
    rule=None,
    chunk: int = 200_000,
) -> float:
    """``sup_J || g_J - chi_{Q_J} ||_{p, kappa}`` estimated on a quadrature rule.

    ``rule`` is ``(points, weights)`` for kappa; the default is
    :func:`cell_aligned_rule` (uniform kappa). Expert ``J`` is paired with
    the cell of the same multi-index.
    """
    if structure.cardinality != partition.n_cells:
        raise StructureError(
            f"structure has {structure.cardinality} experts but partition has {partition.n_cells} cells"
        )
    if p < 1:
        raise DomainError(f"p must be a positive integer, got {p}")
    if rule is None:
        panels = 512 if partition.s == 1 else 96
        rule = cell_aligned_rule(partition, panels_per_axis=panels, order=8 if partition.s == 1 else 6)
    X, W = rule
    acc = np.zeros(structure.cardinality)
    for i in range(0, len(W), chunk):
        g = gate_vector(structure, params, X[i : i + chunk])
        chi = partition.indicators(X[i : i + chunk])
        acc += (W[i : i + chunk, None] * np.abs(g - chi) ** p).sum(axis=0)
    return float(acc.max() ** (1.0 / p))


# ----------------------------------------------------------------------
# sub-geometric sequences
# ----------------------------------------------------------------------
@dataclass
class SubgeometricReport:
    ok: bool
    min_ratio: float
    max_ratio: float
    ratios: list[float] = field(default_factory=list)
    bound: float = np.inf


def check_subgeometric(cardinalities, bound: float = np.inf) -> SubgeometricReport:
    """Check ``1 < p_{v+1} / p_v < bound`` for consecutive entries."""
    p = [int(c) for c in cardinalities]
    if len(p) < 2:
        raise DomainError("need at least two cardinalities")
    if any(c < 1 for c in p):
        raise DomainError(f"cardinalities must be positive integers, got {p}")
    ratios = [b / a for a, b in zip(p[:-1], p[1:])]
    ok = all(1.0 < r < bound for r in ratios)
    return SubgeometricReport(ok, min(ratios), max(ratios), ratios, bound)
