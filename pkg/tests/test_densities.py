import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from perturbmc import densities as de
from perturbmc.errors import DomainError

finite = st.floats(-5, 5, allow_nan=False)


def quad_target():
    return de.LogTarget(1, lambda x: -0.5 * float(x[0] ** 2), name="quad")


def test_log_ratio_identity():
    assert de.log_ratio(de.gaussian(), np.zeros(1), np.zeros(1)) == 0.0


def test_log_ratio_formula():
    assert de.log_ratio(quad_target(), np.array([0.0]), np.array([1.0])) == -0.5


def test_log_ratio_uniform_box():
    t = de.uniform_box([0.0, 0.0], [1.0, 2.0])
    assert de.log_ratio(t, np.array([0.2, 0.3]), np.array([0.9, 1.9])) == 0.0


def test_log_ratio_outside_support():
    t = de.uniform_box([0.0], [1.0])
    with pytest.raises(DomainError):
        de.log_ratio(t, np.array([0.5]), np.array([1.5]))


@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2))
def test_log_ratio_antisymmetric(x, y):
    t = de.gaussian([0.3, -1.0], [1.0, 2.0])
    x, y = np.array(x), np.array(y)
    assert de.log_ratio(t, x, y) == -de.log_ratio(t, y, x)


def test_logp_outside_box_is_neg_inf():
    t = de.truncated_gaussian([-1.0], [1.0])
    assert t.logp(np.array([1.5])) == -math.inf
    assert math.isfinite(t.logp(np.array([1.0])))


def test_gaussian_gradient_matches_fd(rng):
    t = de.gaussian(rng.normal(size=3), rng.uniform(0.5, 2.0, 3))
    for _ in range(100):
        x = rng.normal(size=3) * 2
        fd = de.fd_gradient(t.log_density, x, step=1e-6)
        g = t.grad(x)
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-6)


def test_fd_fallback_used_without_gradient():
    t = quad_target()
    assert not t.has_gradient
    assert t.grad(np.array([0.7]))[0] == pytest.approx(-0.7, rel=1e-8)


def test_make_perturbed_zero_bump_is_base(rng):
    base = de.gaussian(0.0, 1.0, dim=2)
    pair = de.make_perturbed(base, lambda x: 0.0, 0.1)
    for x in rng.normal(size=(50, 2)):
        assert pair.perturbed.logp(x) == base.logp(x)


def test_make_perturbed_sine_bound(rng):
    base = de.gaussian(0.0, 1.0, dim=2)
    pair = de.make_perturbed(base, lambda x: math.sin(x[0]), 0.05)
    pts = rng.normal(size=(10_000, 2)) * 3
    dev = max(abs(pair.perturbed.logp(p) - base.logp(p)) for p in pts)
    assert dev <= 0.05


def test_constant_bump_leaves_ratios(rng):
    base = de.gaussian(0.0, 1.0, dim=1)
    pair = de.make_perturbed(base, lambda x: 1.0, 0.2)
    for x, y in rng.normal(size=(50, 2, 1)):
        assert de.log_ratio(pair.perturbed, x, y) == pytest.approx(de.log_ratio(base, x, y), abs=1e-14)


def test_make_perturbed_rejects_negative_eps():
    with pytest.raises(ValueError):
        de.make_perturbed(de.gaussian(), lambda x: 0.0, -0.1)


def test_gradient_composition():
    base = de.gaussian()
    pair = de.make_perturbed(base, lambda x: math.sin(x[0]), 0.3,
                             bump_gradient=lambda x: np.array([math.cos(x[0])]), bump_gradient_bound=1.0)
    x = np.array([0.4])
    assert pair.perturbed.grad(x)[0] == pytest.approx(-0.4 + 0.3 * math.cos(0.4))
    assert pair.eps_grad == pytest.approx(0.3)
    assert pair.eps_log == 0.3


@given(st.floats(0, 2), st.lists(finite, min_size=1, max_size=20))
def test_perturbation_involution(eps, xs):
    base = de.gaussian()

    def bump(x):
        return math.tanh(x[0])

    there = de.make_perturbed(base, bump, eps).perturbed
    back = de.make_perturbed(there, de.negate(bump), eps).perturbed
    for v in xs:
        x = np.array([v])
        assert back.logp(x) == base.logp(x)


def test_verify_ratio_bound_cases(rng):
    base = de.gaussian()
    pts = list(np.linspace(-5, 5, 1000)[:, None])
    r0 = de.verify_ratio_bound(de.make_perturbed(base, lambda x: math.sin(x[0]), 0.0), pts)
    assert r0.max_deviation == 0.0 and r0.passed
    ok = de.verify_ratio_bound(de.make_perturbed(base, lambda x: math.sin(x[0]), 0.1), pts)
    assert ok.passed and ok.max_deviation <= 0.1
    # declared 0.1 but actually 0.5 * bump
    strong = de.make_perturbed(base, lambda x: math.sin(x[0]), 0.5)
    lying = de.PerturbedPair(base, strong.perturbed, eps_log=0.1)
    bad = de.verify_ratio_bound(lying, pts)
    assert not bad.passed and bad.max_deviation == pytest.approx(0.5, abs=1e-3)


def test_verify_ratio_bound_absorbs_constant():
    base = de.gaussian()
    pair = de.make_perturbed(base, lambda x: 1.0, 0.3)
    rep = de.verify_ratio_bound(de.PerturbedPair(base, pair.perturbed, 0.0), [np.array([v]) for v in (-1.0, 0.0, 2.0)])
    assert rep.offset == pytest.approx(0.3) and rep.passed


def test_verify_ratio_bound_domain():
    t = de.uniform_box([0.0], [1.0])
    pair = de.make_perturbed(t, lambda x: 0.0, 0.1)
    with pytest.raises(DomainError):
        de.verify_ratio_bound(pair, [np.array([2.0])])


def test_box_validation():
    with pytest.raises(ValueError):
        de.Box([1.0], [0.0])


@given(st.lists(st.one_of(st.floats(-3, 3), st.just(float("nan"))), min_size=3, max_size=3))
def test_box_contains_matches_numpy(vals):
    box = de.Box([-1.0, -2.0, 0.0], [1.0, 2.0, 0.5])
    x = np.array(vals)
    assert box.contains(x) == bool(np.all(x >= box.lower) and np.all(x <= box.upper))
