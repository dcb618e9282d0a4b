import math

import numpy as np
import pytest

from safeswitch import sysid
from safeswitch.errors import ValidationError
from safeswitch.plant import ModeBounds


def conf_scalar(V=4.0, r=1.0, theta=0.0, n_samples=0, gram=0.0):
    return sysid.ConfidenceSet(np.array([[theta]]), np.array([[V]]), r, 1.0, 0.1, n_samples, 1.0, gram)


def noiseless(theta, count, rng, lam_data=None):
    d = sysid.Dataset(1, 0) if lam_data is None else lam_data
    z = rng.standard_normal((count, 1))
    d.extend(z, z * theta)
    return d


# -------------------------------------------------------------------- estimate


def test_rls_no_data_returns_prior():
    prior = np.array([[0.3], [-1.2]])
    assert np.allclose(sysid.rls_estimate(sysid.Dataset(1, 1), 2.0, prior), prior)


def test_rls_single_sample():
    d = sysid.Dataset(1, 0)
    d.add([1.0], [2.0])
    assert sysid.rls_estimate(d, 1.0)[0, 0] == pytest.approx(1.0)


def test_rls_noiseless_recovery():
    d = noiseless(0.7, 50, np.random.default_rng(0))
    assert abs(sysid.rls_estimate(d, 1e-6)[0, 0] - 0.7) <= 1e-4


def test_rls_gradient_vanishes():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((40, 3))
    X = Z @ rng.standard_normal((3, 2)) + 0.1 * rng.standard_normal((40, 2))
    d = sysid.Dataset(2, 1)
    d.extend(Z, X)
    prior, lam = rng.standard_normal((3, 2)), 0.5
    th = sysid.rls_estimate(d, lam, prior)
    grad = -2 * Z.T @ (X - Z @ th) + 2 * lam * (th - prior)
    assert np.linalg.norm(grad) <= 1e-8

    def objective(T):
        return np.sum((X - Z @ T) ** 2) + lam * np.sum((T - prior) ** 2)
    h = 1e-6
    E = np.zeros_like(th)
    E[1, 0] = h
    assert abs(objective(th + E) - objective(th - E)) / (2 * h) <= 1e-5


def test_rls_rejects_nonpositive_lambda():
    with pytest.raises(ValidationError):
        sysid.rls_estimate(sysid.Dataset(1, 0), 0.0)


def test_dataset_gram_and_monotone_V():
    rng = np.random.default_rng(2)
    d = sysid.Dataset(2, 1)
    prev = np.zeros((3, 3))
    for _ in range(5):
        d.extend(rng.standard_normal((7, 3)), rng.standard_normal((7, 2)))
        assert np.allclose(d.gram, d.Z.T @ d.Z)
        assert np.linalg.eigvalsh(d.gram - prev).min() >= -1e-12
        prev = d.gram.copy()
    assert d.count == 35 == len(d.Z)


def test_dataset_shape_checks():
    with pytest.raises(ValidationError):
        sysid.Dataset(2, 1).add([1.0, 2.0], [1.0, 1.0])


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    a, b = sysid.Dataset(2, 1, mode=0), sysid.Dataset(2, 1, mode=1)
    a.extend(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), range(4))
    b.extend(rng.standard_normal((3, 3)), rng.standard_normal((3, 2)), range(10, 13))
    path = tmp_path / "data.csv"
    sysid.write_datasets_csv(path, [a, b])
    back = sysid.read_datasets_csv(path, 2, 1)
    for orig in (a, b):
        got = back[orig.mode]
        assert np.array_equal(got.Z, orig.Z) and np.array_equal(got.X, orig.X)
        assert np.array_equal(got.times, orig.times)
    assert path.read_text().splitlines()[0] == "t,mode,z0,z1,z2,x_next0,x_next1"


# -------------------------------------------------------------------- radius


def test_radius_noise_free():
    assert sysid.confidence_radius(np.eye(2), 1.0, 0.1, 1.0, 0.0, 1) == pytest.approx(1.0)


def test_radius_without_data():
    sigma, delta, eps, lam = 0.8, 0.05, 0.3, 2.0
    r = sysid.confidence_radius(lam * np.eye(2), lam, delta, eps, sigma, 1)
    assert r == pytest.approx((sigma * math.sqrt(2 * math.log(1 / delta)) + math.sqrt(lam) * eps) ** 2)


def test_radius_monotone():
    V = np.diag([2.0, 3.0])
    r1 = sysid.confidence_radius(V, 1.0, 0.1, 0.5, 1.0, 1)
    assert sysid.confidence_radius(np.diag([4.0, 3.0]), 1.0, 0.1, 0.5, 1.0, 1) > r1
    assert sysid.confidence_radius(V, 1.0, 0.05, 0.5, 1.0, 1) > r1
    with pytest.raises(ValidationError):
        sysid.confidence_radius(V, 1.0, 1.0, 0.5, 1.0, 1)


def test_warmup_radius_examples():
    assert sysid.warmup_radius(3 * np.eye(2), 3.0, 0.1, 2.0, 0.0, 1) == pytest.approx(6.0)
    sigma, delta, lam, vt, n = 0.5, 0.1, 2.0, 1.5, 2
    expected = (sigma * math.sqrt(2 * n * math.log(n / delta)) + math.sqrt(lam * vt)) ** 2
    assert sysid.warmup_radius(lam * np.eye(3), lam, delta, vt, sigma, n) == pytest.approx(expected)
    assert sysid.warmup_radius(np.eye(3), 1.0, 0.1, 3.0, 1.0, 2) > sysid.warmup_radius(np.eye(3), 1.0, 0.1, 2.0, 1.0, 2)


# -------------------------------------------------------------------- membership and inflation


def test_contains_examples():
    c = conf_scalar()
    assert sysid.contains(c, np.array([[0.0]]))
    assert sysid.contains(c, np.array([[0.5]]))
    assert not sysid.contains(c, np.array([[0.6]]))


def test_mu_examples():
    assert sysid.mu_inflation(conf_scalar(r=0.0), 1.0) == 0.0
    assert sysid.mu_inflation(conf_scalar(V=4.0, r=1.0, n_samples=3, gram=1.0), 1.0) == pytest.approx(5.0)
    mus = [sysid.mu_inflation(conf_scalar(r=r, n_samples=3, gram=1.0), 1.0) for r in np.linspace(0, 4, 30)]
    assert all(a <= b for a, b in zip(mus, mus[1:]))


def test_lambda_select_examples():
    b = ModeBounds(1.0, 1.0, 2.0, 2.0)
    assert sysid.lambda_select(b, 1.0) == pytest.approx(0.25)
    assert sysid.lambda_floor(1.0, b, 1.0) == pytest.approx(8.0)
    prev = conf_scalar(r=0.1)
    lam = sysid.lambda_select(b, 1.0, prev)
    assert lam >= sysid.lambda_floor(sysid.mu_inflation(prev, 2.0), b, 1.0)
    assert sysid.lambda_select(b, 1.0, conf_scalar(r=0.0), lam_prev=50.0) == 50.0


def test_prior_error_bound_covers_ellipsoid():
    c = conf_scalar(V=4.0, r=1.0)
    assert sysid.prior_error_bound(c) == pytest.approx(0.5)


def test_build_confidence_set_zero_radius():
    d = noiseless(0.7, 10, np.random.default_rng(0))
    c = sysid.build_confidence_set(d, 1.0, None, 1.0, 0.1, 1.0, zero_radius=True)
    assert c.r == 0 and c.n_samples == 10
    assert np.allclose(c.V, 1.0 + d.gram)


def test_shrinkage_with_noiseless_data():
    rng = np.random.default_rng(5)
    d = sysid.Dataset(1, 0)
    errs, dists = [], []
    for _ in range(6):
        noiseless(0.7, 200, rng, d)
        c = sysid.build_confidence_set(d, 1.0, None, 1.0, 0.1, 1.0)
        errs.append(abs(c.theta_hat[0, 0] - 0.7))
        dists.append(sysid.ellipsoid_distance(c, np.array([[0.7]])))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert max(dists) <= 0.7**2 + 1e-9


# -------------------------------------------------------------------- registry


def test_registry_one_entry_per_mode():
    reg = sysid.Registry()
    reg.update(0, conf_scalar(), timestamp=3)
    reg.update(0, conf_scalar(r=0.5), timestamp=7)
    reg.update(1, conf_scalar(), timestamp=1)
    snap = reg.snapshot()
    assert set(snap) == {0, 1} and snap[0].timestamp == 7 and snap[0].r == 0.5
    assert 1 in reg and 2 not in reg


def test_registry_rejects_time_travel():
    reg = sysid.Registry()
    reg.update(0, conf_scalar(), timestamp=5)
    with pytest.raises(ValidationError):
        reg.update(0, conf_scalar(), timestamp=4)
