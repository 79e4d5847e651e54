"""Hierarchical mixtures-of-experts over exponential-family experts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .expfam import DomainError, ExpFamily
from .gating import GateParams, Structure, StructureError, _check_x, _frozen, log_gate_vector, node_log_probs

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Malformed or unsupported model file."""


@dataclass(frozen=True)
class HMEModel:
    """An HME density ``f(x, y) = sum_J g_J(x) pi(alpha_J + beta_J . x, y)``.

    ``alpha`` has shape ``(m,)`` and ``beta`` shape ``(m, s)`` with experts in
    C order of their labels.
    """

    structure: Structure
    gates: GateParams
    alpha: np.ndarray
    beta: np.ndarray
    family: ExpFamily

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(np.ravel(self.alpha)))
        object.__setattr__(self, "beta", _frozen(np.atleast_2d(self.beta)))
        m = self.structure.cardinality
        if self.alpha.shape != (m,):
            raise StructureError(f"alpha must have shape ({m},), got {self.alpha.shape}")
        if self.beta.shape[0] != m:
            raise StructureError(f"beta must have {m} rows, got {self.beta.shape}")
        self.gates.check(self.structure, self.s)

    @property
    def s(self) -> int:
        return int(self.beta.shape[1])

    @property
    def m(self) -> int:
        return self.structure.cardinality

    def replace(self, **kw) -> "HMEModel":
        fields = dict(structure=self.structure, gates=self.gates, alpha=self.alpha, beta=self.beta, family=self.family)
        fields.update(kw)
        return HMEModel(**fields)

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------
    def linear_predictors(self, X) -> np.ndarray:
        X = _check_x(X, self.s)
        return self.alpha[None, :] + X @ self.beta.T

    def log_gates(self, X) -> np.ndarray:
        return log_gate_vector(self.structure, self.gates, X)

    def expert_log_densities(self, X, y) -> np.ndarray:
        """``log pi(h_J(x_i), y_i)``, shape ``(n, m)``."""
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        return self.family.log_density(self.linear_predictors(X), y)

    def log_density(self, X, y) -> np.ndarray:
        """Log mixture density at paired points ``(x_i, y_i)``."""
        return logsumexp(self.log_gates(X) + self.expert_log_densities(X, y), axis=1)

    def density(self, X, y) -> np.ndarray:
        single = np.ndim(X) == 1
        out = np.exp(self.log_density(X, np.atleast_1d(y)))
        return out[0] if single else out

    def log_density_grid(self, X, yvals) -> np.ndarray:
        """Log density on the product of points ``X`` and responses ``yvals``.

        Returns shape ``(n, K)``.
        """
        yvals = np.asarray(yvals, dtype=float)
        lg = self.log_gates(X)  # (n, m)
        H = self.linear_predictors(X)  # (n, m)
        lp = self.family.log_density(H[:, :, None], yvals[None, None, :])
        return logsumexp(lg[:, :, None] + lp, axis=1)

    def mean(self, X) -> np.ndarray:
        """Mean response ``sum_J g_J(x) psi(h_J(x))``."""
        single = np.ndim(X) == 1
        g = np.exp(self.log_gates(X))
        out = (g * self.family.mean_link(self.linear_predictors(X))).sum(axis=1)
        return out[0] if single else out

    def expert_means(self, X) -> np.ndarray:
        return self.family.mean_link(self.linear_predictors(X))

    def log_likelihood(self, X, y) -> float:
        """Average log-likelihood ``n^{-1} sum_i log f(x_i, y_i)``."""
        y = np.asarray(y, dtype=float).ravel()
        if y.size == 0:
            raise DomainError("log-likelihood needs at least one observation")
        return float(np.mean(self.log_density(X, y)))

    # ------------------------------------------------------------------
    # parameter vectors
    # ------------------------------------------------------------------
    def to_vector(self) -> np.ndarray:
        """All parameters (gates un-gauged, then alpha, then beta) as one vector."""
        parts = []
        for p, g in zip(self.gates.phi, self.gates.gamma):
            parts += [p.ravel(), g.ravel()]
        parts += [self.alpha.ravel(), self.beta.ravel()]
        return np.concatenate(parts)

    def from_vector(self, v) -> "HMEModel":
        v = np.asarray(v, dtype=float)
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = v[pos : pos + size].reshape(shape)
            pos += size
            return out

        phi, gamma = [], []
        for p, g in zip(self.gates.phi, self.gates.gamma):
            phi.append(take(p.shape))
            gamma.append(take(g.shape))
        alpha = take(self.alpha.shape)
        beta = take(self.beta.shape)
        if pos != v.size:
            raise ValueError(f"vector has {v.size} entries, model needs {pos}")
        return self.replace(gates=GateParams(tuple(phi), tuple(gamma)), alpha=alpha, beta=beta)

    def permuted(self, layer: int, perm) -> "HMEModel":
        """Relabel the children of every node at ``layer`` by ``perm``.

        Child ``c`` of the new model is child ``perm[c]`` of the old one, with
        the subtrees below moved along. The represented density is unchanged.
        """
        perm = np.asarray(perm, dtype=int)
        sizes = self.structure.layer_sizes
        if sorted(perm.tolist()) != list(range(sizes[layer])):
            raise ValueError(f"not a permutation of range({sizes[layer]}): {perm}")
        phi, gamma = [], []
        for q in range(self.structure.depth):
            phi.append(np.take(self.gates.phi[q], perm, axis=layer) if q >= layer else self.gates.phi[q])
            gamma.append(np.take(self.gates.gamma[q], perm, axis=layer) if q >= layer else self.gates.gamma[q])
        a = np.take(self.alpha.reshape(sizes), perm, axis=layer).ravel()
        b = np.take(self.beta.reshape(sizes + (self.s,)), perm, axis=layer).reshape(self.m, self.s)
        return self.replace(gates=GateParams(tuple(phi), tuple(gamma)), alpha=a, beta=b)


def single_expert(alpha: float, beta, family: ExpFamily) -> HMEModel:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    st = Structure((1,))
    return HMEModel(st, GateParams.zeros(st, beta.size), np.array([alpha]), beta[None, :], family)


def random_model(
    structure: Structure,
    family: ExpFamily,
    s: int,
    rng: np.random.Generator,
    gate_scale: float = 2.0,
    expert_scale: float = 1.0,
) -> HMEModel:
    gates = GateParams.random(structure, s, rng, gate_scale)
    alpha = rng.uniform(-expert_scale, expert_scale, structure.cardinality)
    beta = rng.uniform(-expert_scale, expert_scale, (structure.cardinality, s))
    return HMEModel(structure, gates, alpha, beta, family)


def density_recursive(model: HMEModel, x, y) -> float:
    """Density at a single point by descending the gate tree.

    At a node with prefix ``P`` the value is ``sum_c g_{c|P}(x) value(P + c)``
    and at a leaf it is the expert density. Independent of the flat-sum
    evaluation in :meth:`HMEModel.density`.
    """
    x = np.asarray(x, dtype=float).ravel()
    st = model.structure
    layers = node_log_probs(st, model.gates, x[None, :])
    fam = model.family

    def node(prefix: tuple[int, ...]) -> float:
        q = len(prefix)
        if q == st.depth:
            j = st.label_index(prefix)
            h = model.alpha[j] + float(np.dot(model.beta[j], x))
            return math.exp(float(fam.log_density(h, y)))
        cond = np.exp(layers[q][(0,) + prefix])
        return sum(float(cond[c]) * node(prefix + (c,)) for c in range(st.layer_sizes[q]))

    return node(())


def mean_recursive(model: HMEModel, x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    st = model.structure
    layers = node_log_probs(st, model.gates, x[None, :])

    def node(prefix):
        q = len(prefix)
        if q == st.depth:
            j = st.label_index(prefix)
            return float(model.family.mean_link(model.alpha[j] + float(np.dot(model.beta[j], x))))
        cond = np.exp(layers[q][(0,) + prefix])
        return sum(float(cond[c]) * node(prefix + (c,)) for c in range(st.layer_sizes[q]))

    return node(())


def embed_model(model: HMEModel, structure: Structure) -> HMEModel:
    """Represent ``model`` exactly within a larger nested ``structure``.

    Allowed when each existing layer size divides the new size at that layer
    (extra trailing layers may be appended, and a single-expert model embeds
    anywhere). Each old child is split into equally weighted copies and each
    old expert is copied to every new label that maps onto it.
    """
    old = model.structure.layer_sizes
    if old == (1,):
        old = ()
    new = structure.layer_sizes
    if len(old) > len(new) or any(b % a for a, b in zip(old, new)):
        raise StructureError(f"cannot embed structure {model.structure} into {structure}")
    s = model.s
    factors = [b // a for a, b in zip(old, new)]
    labels = np.array(structure.labels(), dtype=int).reshape(structure.cardinality, -1)
    old_idx = np.zeros(structure.cardinality, dtype=int)
    if old:
        mapped = labels[:, : len(old)] // np.array(factors)
        old_idx = np.ravel_multi_index(mapped.T, old)
    phi, gamma = [], []
    for q in range(len(new)):
        if q < len(old):
            grids = np.meshgrid(*[np.arange(n) // f for n, f in zip(new[: q + 1], factors[: q + 1])], indexing="ij")
            idx = tuple(grids)
            p = model.gates.phi[q][idx]
            g = model.gates.gamma[q][idx]
            phi.append(p - p[..., :1])
            gamma.append(g - g[..., :1, :])
        else:
            phi.append(np.zeros(new[: q + 1]))
            gamma.append(np.zeros(new[: q + 1] + (s,)))
    return HMEModel(
        structure,
        GateParams(tuple(phi), tuple(gamma)),
        model.alpha[old_idx],
        model.beta[old_idx],
        model.family,
    )


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------
def model_to_dict(model: HMEModel) -> dict:
    st = model.structure
    gates = []
    for q in range(st.depth):
        for prefix in st.node_prefixes(q):
            children = [
                {"phi": float(model.gates.phi[q][prefix + (c,)]), "gamma": [float(v) for v in model.gates.gamma[q][prefix + (c,)]]}
                for c in range(st.layer_sizes[q])
            ]
            gates.append({"prefix": list(prefix), "children": children})
    experts = [
        {"label": list(label), "alpha": float(model.alpha[i]), "beta": [float(v) for v in model.beta[i]]}
        for i, label in enumerate(st.labels())
    ]
    return {
        "version": FORMAT_VERSION,
        "s": model.s,
        "family": model.family.to_dict(),
        "layer_sizes": list(st.layer_sizes),
        "gates": gates,
        "experts": experts,
    }


def _require(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    return d[key]


def model_from_dict(d: dict) -> HMEModel:
    if not isinstance(d, dict):
        raise ModelFormatError("<root>: expected a JSON object")
    version = _require(d, "version", "<root>")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"<root>.version: unsupported model format version {version!r} (expected {FORMAT_VERSION})")
    s = int(_require(d, "s", "<root>"))
    try:
        family = ExpFamily.from_dict(_require(d, "family", "<root>"))
    except ValueError as exc:
        raise ModelFormatError(f"<root>.family: {exc}") from exc
    try:
        st = Structure(tuple(_require(d, "layer_sizes", "<root>")))
    except (StructureError, TypeError) as exc:
        raise ModelFormatError(f"<root>.layer_sizes: {exc}") from exc

    blocks = {}
    for i, g in enumerate(_require(d, "gates", "<root>")):
        prefix = tuple(int(v) for v in _require(g, "prefix", f"gates[{i}]"))
        blocks[prefix] = (i, _require(g, "children", f"gates[{i}]"))
    phi, gamma = [], []
    for q in range(st.depth):
        p = np.zeros(st.layer_sizes[: q + 1])
        gm = np.zeros(st.layer_sizes[: q + 1] + (s,))
        for prefix in st.node_prefixes(q):
            if prefix not in blocks:
                raise ModelFormatError(f"gates: missing gate block for prefix {list(prefix)}")
            i, children = blocks[prefix]
            if len(children) != st.layer_sizes[q]:
                raise ModelFormatError(f"gates[{i}] (prefix {list(prefix)}): expected {st.layer_sizes[q]} children, got {len(children)}")
            for c, child in enumerate(children):
                where = f"gates[{i}].children[{c}]"
                p[prefix + (c,)] = float(_require(child, "phi", where))
                gv = _require(child, "gamma", where)
                if len(gv) != s:
                    raise ModelFormatError(f"{where}.gamma: expected length {s}, got {len(gv)}")
                gm[prefix + (c,)] = np.asarray(gv, dtype=float)
        phi.append(p)
        gamma.append(gm)

    by_label = {}
    for i, e in enumerate(_require(d, "experts", "<root>")):
        by_label[tuple(int(v) for v in _require(e, "label", f"experts[{i}]"))] = (i, e)
    alpha = np.zeros(st.cardinality)
    beta = np.zeros((st.cardinality, s))
    for j, label in enumerate(st.labels()):
        if label not in by_label:
            raise ModelFormatError(f"experts: missing expert block for label {list(label)}")
        i, e = by_label[label]
        where = f"experts[{i}] (label {list(label)})"
        alpha[j] = float(_require(e, "alpha", where))
        bv = _require(e, "beta", where)
        if len(bv) != s:
            raise ModelFormatError(f"{where}.beta: expected length {s}, got {len(bv)}")
        beta[j] = np.asarray(bv, dtype=float)
    return HMEModel(st, GateParams(tuple(phi), tuple(gamma)), alpha, beta, family)


def save_model(model: HMEModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> HMEModel:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(d)
