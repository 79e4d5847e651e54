import math

import numpy as np
import pytest

from hmeglm.expfam import DomainError, bernoulli, gaussian, poisson
from hmeglm.gating import Partition
from hmeglm.metrics import default_quadrature, lp_distance, mse_mean
from hmeglm.targets import (
    CATALOG,
    affine,
    catalog_function,
    constant,
    make_target,
    probe_grid,
    read_dataset_csv,
    sample_dataset,
    sobolev_norm,
    taylor_hme,
    write_dataset_csv,
)


def test_sine_scale_closed_form():
    t = make_target("sine", poisson(), 1)
    assert t.scale == pytest.approx(1.0 / (1.0 + 2 * math.pi + 4 * math.pi**2), rel=1e-6)
    assert t.norm == pytest.approx(1.0, abs=1e-3)


def test_constant_target_not_enlarged():
    t = make_target(constant(0.5), poisson(), 2)
    assert t.scale == 1.0 and t.norm == pytest.approx(0.5)
    np.testing.assert_allclose(t.h(np.random.default_rng(0).random((5, 2))), 0.5)


def test_affine_norm():
    fn = affine(0.2, [0.3, -0.1], 2)
    # sup |h| is attained at x = (1, 0); the gradient terms add 0.3 + 0.1
    assert sobolev_norm(fn, 2) == pytest.approx(0.5 + 0.3 + 0.1)


@pytest.mark.parametrize("name", sorted(CATALOG))
@pytest.mark.parametrize("s", [1, 2])
def test_catalog_normalized_and_mean_identity(name, s):
    for fam in (poisson(), bernoulli(), gaussian()):
        t = make_target(name, fam, s)
        assert t.norm <= 1.0 + 1e-3
        X = probe_grid(s, 17)
        np.testing.assert_allclose(t.mean(X), fam.mean_link(t.h(X)), atol=1e-12)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_derivatives_match_finite_differences(name):
    fn = catalog_function(name, 2)
    X = np.random.default_rng(3).uniform(0.1, 0.9, (10, 2))
    eps = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        np.testing.assert_allclose(fn.grad(X)[:, k], (fn.value(X + e) - fn.value(X - e)) / (2 * eps), atol=1e-6)
        np.testing.assert_allclose(fn.hess(X)[:, k, :], (fn.grad(X + e) - fn.grad(X - e)) / (2 * eps), atol=1e-5)


def test_unknown_target():
    with pytest.raises(KeyError):
        catalog_function("nope", 1)


def test_sample_dataset():
    t = make_target(constant(0.0), bernoulli(), 1)
    with pytest.raises(DomainError):
        sample_dataset(t, 0, 1)
    a = sample_dataset(t, 50, 7)
    b = sample_dataset(t, 50, 7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    _, y = sample_dataset(t, 100_000, 1)
    assert abs(y.mean() - 0.5) < 0.01


def test_dataset_csv_round_trip(tmp_path):
    t = make_target("sine", poisson(), 2)
    X, y = sample_dataset(t, 20, 0)
    path = tmp_path / "data.csv"
    write_dataset_csv(path, X, y)
    assert path.read_text().splitlines()[0] == "x_1,x_2,y"
    X2, y2 = read_dataset_csv(path)
    np.testing.assert_array_equal(X2, X)
    np.testing.assert_array_equal(y2, y)


def test_taylor_expert_at_center_equals_h():
    t = make_target("bump", poisson(), 2)
    part = Partition.uniform([3, 4])
    m = taylor_hme(t, part, 50.0)
    c = part.centers()
    np.testing.assert_allclose(m.alpha + (m.beta * c).sum(axis=1), t.h(c), atol=1e-15)


def test_single_cell_taylor_is_center_line():
    t = make_target("sine", poisson(), 1)
    m = taylor_hme(t, Partition.uniform([1]), 10.0)
    assert m.m == 1
    g = float(t.grad(np.array([[0.5]]))[0, 0])
    assert m.beta[0, 0] == pytest.approx(g)
    assert m.alpha[0] == pytest.approx(float(t.h(np.array([[0.5]]))[0]) - 0.5 * g)


def test_affine_taylor_exact():
    t = make_target("affine", poisson(), 1)
    m = taylor_hme(t, Partition.uniform([4]), 1e4)
    assert lp_distance(m, t, 2, default_quadrature(t, m)) < 1e-12
    errs = [mse_mean(taylor_hme(t, Partition.uniform([4]), tau), t) for tau in (4.0, 16.0, 64.0, 256.0)]
    # experts coincide for affine h, so the gates do not matter at all
    assert max(errs) < 1e-28


def test_taylor_sine_rate():
    t = make_target("sine", poisson(), 1)
    ms = [4, 8, 16, 32]
    errs = []
    for m in ms:
        model = taylor_hme(t, Partition.uniform([m]), 20.0 * m**2)
        errs.append(lp_distance(model, t, 2, default_quadrature(t, model)))
    slope = np.polyfit(np.log(ms), np.log(errs), 1)[0]
    assert slope <= -1.6
    assert all(b < a for a, b in zip(errs[:-1], errs[1:]))
