from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from msthin.core import EventPath, NumericalError, QuadratureConfig
from msthin.delay import DELAY_FREE, DelayModel
from msthin.hazards import mu23_star
from msthin.likelihood import (approx_loglik, benchmark_event_model, classical_loglik, exact_loglik,
                               gamma_correction, gamma_numerators, imputed_loglik, poisson_error_bound,
                               survival_in_state, weighted_hazard)
from msthin.simulate import ScenarioConfig, simulate_dataset

from helpers import adjudicated, confirmed, constant_model, record

THETA = (math.log(0.15), 0.1, 0.4, math.log(0.1), 0.03, -0.3, -0.3)


def mu12(t, x):
    return math.exp(THETA[0] + THETA[1] * (t + x) + THETA[2] * math.sin(0.5 * math.pi * x))


def mu13(t, x):
    return math.exp(THETA[3] + THETA[4] * t * t + THETA[5] * math.cos(0.5 * math.pi * x))


def random_paths(n, seed=0):
    """Random benchmark sojourns (path, x, t) in state 1 or in state 2 after a jump."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = rng.uniform(-4, 4)
        if rng.uniform() < 0.5:
            t = rng.uniform(0.01, 5.0)
            out.append((EventPath(1), x, t))
        else:
            s = rng.uniform(0.01, 4.5)
            t = rng.uniform(s + 1e-3, 5.0)
            out.append((EventPath(1, ((s, 2),)), x, t))
    return out


def test_survival_constant_hazard():
    m = constant_model({(1, 2): 0.4, (1, 3): 0.3})
    assert survival_in_state(m, EventPath(1), [0.0], 2.5) == pytest.approx(math.exp(-0.7 * 2.5), rel=1e-12)
    assert survival_in_state(m, EventPath(1), [0.0], 0.0) == 1.0
    # a jump at t only takes effect after t
    assert survival_in_state(m, EventPath(1, ((1.0, 2),)), [0.0], 1.0) == pytest.approx(math.exp(-0.7))


def test_survival_state_one_closed_form_vs_quadrature():
    m = benchmark_event_model()
    integral, _ = integrate.quad(lambda s: mu12(s, 1.0) + mu13(s, 1.0), 0.0, 2.0, epsabs=1e-14, epsrel=1e-14)
    assert survival_in_state(m, EventPath(1), [1.0], 2.0) == pytest.approx(math.exp(-integral), abs=1e-6)


def test_weighted_hazard_examples():
    m = benchmark_event_model()
    p = EventPath(1)
    # delay-free transition
    assert weighted_hazard(m, p, [0.5], 3.0, 2, 5.0) == pytest.approx(mu12(3.0, 0.5), rel=1e-12)
    # no time left to be reported
    assert weighted_hazard(m, p, [0.5], 5.0, 3, 5.0) == 0.0
    # 1 -> 3 at t=3, x=0: mu* times [1 - exp(-(2 * 2)^0.5)]^exp(0)
    expected = mu13(3.0, 0.0) * (1.0 - math.exp(-math.sqrt(2.0 * 2.0)))
    assert weighted_hazard(m, p, [0.0], 3.0, 3, 5.0) == pytest.approx(expected, rel=1e-12)
    assert weighted_hazard(m, p, [0.0], 3.0, 3, 5.0) <= mu13(3.0, 0.0)


def test_gamma_is_one_without_delays():
    m = benchmark_event_model().with_delays({(1, 3): DELAY_FREE, (2, 3): DELAY_FREE})
    for path, x, t in random_paths(20):
        assert gamma_correction(m, path, [x], t, 5.0) == pytest.approx(1.0, abs=1e-10)


def test_gamma_check_bounds_on_random_paths():
    m = benchmark_event_model()
    for path, x, t in random_paths(1000, seed=1):
        g = gamma_correction(m, path, [x], t, 5.0, check=True)
        assert 0.0 < g <= 1.0 + 1e-12
        assert g >= survival_in_state(m, path, [x], t) - 1e-12


def test_poisson_error_bound_on_random_paths():
    m = benchmark_event_model()
    for path, x, t in random_paths(1000, seed=2):
        j = path.state_at(t)[0]
        g = gamma_correction(m, path, [x], t, 5.0, check=True)
        bound = poisson_error_bound(m, path, [x], t)
        for tr in m.exits(j):
            nu = weighted_hazard(m, path, [x], t, tr[1], 5.0)
            assert abs(g * nu - nu) <= bound + 1e-12


def test_poisson_error_bound_special_cases():
    m = benchmark_event_model()
    p = EventPath(1, ((1.0, 2),))
    assert poisson_error_bound(m, EventPath(1), [1.0], 0.0) == 0.0
    free = m.with_delays({(1, 3): DELAY_FREE, (2, 3): DELAY_FREE})
    nu = weighted_hazard(free, p, [1.0], 2.0, 3, 5.0)
    assert abs(gamma_correction(free, p, [1.0], 2.0, 5.0) * nu - nu) <= 1e-12 < poisson_error_bound(free, p, [1.0], 2.0)


def test_gamma_numerator_identity():
    m = benchmark_event_model()
    for path, x, t in random_paths(200, seed=3):
        direct, surv = gamma_numerators(m, path, [x], t, quad=QuadratureConfig(64))
        assert direct == pytest.approx(surv, abs=5e-6)
        fine, surv_fine = gamma_numerators(m, path, [x], t, quad=QuadratureConfig(256))
        assert fine == pytest.approx(surv_fine, abs=5e-8)


def test_gamma_with_prior_delayed_jump_matches_fine_grid():
    # a model whose entry jump into state 2 is itself delayed, with duration-dependent exits from 2
    m = benchmark_event_model().with_delays({(1, 2): DelayModel(1.5, 0.8, (0.1,))})
    x, s, t, eta = 1.3, 1.2, 3.1, 5.0
    path = EventPath(1, ((s, 2),))
    got = gamma_correction(m, path, [x], t, eta)

    u = np.linspace(s, t, 100_001)
    mu = mu23_star(u, u - s, x, THETA[6], (0.8, -1.2))
    cum = integrate.cumulative_trapezoid(mu, u, initial=0.0)
    surv = np.exp(-cum)
    nu = mu * m.delay_models[(2, 3)].cdf(eta - u, [x])
    pi0 = float(m.delay_models[(1, 2)].cdf(eta - s, [x]))
    oracle = surv[-1] / (pi0 - integrate.trapezoid(surv * nu, u))
    assert got == pytest.approx(oracle, abs=1e-5)


def test_gamma_denominator_failure():
    # a barely reported entry into 2 followed by a fast delay-free exit leaves pi0 - (1 - P*) < 0
    m = constant_model({(1, 2): 1.0, (2, 3): 50.0}, {(1, 2): DelayModel(0.01, 1.0, (0.0,))})
    with pytest.raises(NumericalError):
        gamma_correction(m, EventPath(1, ((1.0, 2),)), [0.0], 4.0, 5.0)


# -- log-likelihoods ------------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_view():
    _, views = simulate_dataset(ScenarioConfig(n=200, seed=3), 0, ("oracle",))
    return views["oracle"]


def test_exact_equals_classical_on_delay_free_data(oracle_view):
    m = benchmark_event_model().with_delays({(1, 3): DELAY_FREE, (2, 3): DELAY_FREE})
    for rec in oracle_view.records:
        c = classical_loglik(rec, m, eta=5.0)
        assert exact_loglik(rec, m, eta=5.0) == pytest.approx(c, abs=1e-10)
        assert approx_loglik(rec, m, eta=5.0) == pytest.approx(c, abs=1e-10)


def test_classical_loglik_by_hand():
    m = constant_model({(1, 2): 0.4, (1, 3): 0.3, (2, 3): 0.2})
    r = record([confirmed(1.5, 2), confirmed(3.0, 3)], V=0.5, C=4.0)
    expected = math.log(0.4) - 0.7 * 1.0 + math.log(0.2) - 0.2 * 1.5
    assert classical_loglik(r, m) == pytest.approx(expected, rel=1e-12)
    assert exact_loglik(r, m, eta=5.0) == pytest.approx(expected, rel=1e-12)


def test_exact_exposure_without_jumps_matches_fine_grid():
    c, eta = 0.6, 5.0
    dm = DelayModel(1.0, 1.5, (0.0,))
    m = constant_model({(1, 2): c}, {(1, 2): dm})
    V, C = 0.3, 4.2
    got = exact_loglik(record(V=V, C=C), m, eta=eta)
    u = np.linspace(V, C, 100_001)
    surv = np.exp(-c * (u - V))
    nu = c * dm.cdf(eta - u, [0.0])
    den = 1.0 - integrate.cumulative_trapezoid(surv * nu, u, initial=0.0)
    mu = surv * nu / den
    assert got == pytest.approx(-integrate.trapezoid(mu, u), abs=1e-5)


def test_branches_are_the_records_with_and_without_the_last_jump():
    m = benchmark_event_model()
    pend = record([confirmed(1.0, 2), adjudicated(2.5, 3, 0.4)], x=1.5, V=0.2, C=4.0)
    kept = record([confirmed(1.0, 2), confirmed(2.5, 3, 0.4)], x=1.5, V=0.2, C=4.0)
    dropped = record([confirmed(1.0, 2)], x=1.5, V=0.2, C=4.0)
    for fn in (exact_loglik, approx_loglik):
        assert fn(pend, m, True, eta=5.0) == pytest.approx(fn(kept, m, eta=5.0), rel=1e-12)
        assert fn(pend, m, False, eta=5.0) == pytest.approx(fn(dropped, m, eta=5.0), rel=1e-12)


def test_include_last_only_changes_terms_after_the_last_jump():
    m = benchmark_event_model()
    a = record([confirmed(1.0, 2), adjudicated(2.5, 3, 0.4)], x=1.5, V=0.2, C=4.0)
    b = record([confirmed(1.0, 2), adjudicated(2.5, 3, 0.4)], x=1.5, V=0.6, C=4.0)
    # the two records differ only before the first jump, so the branch difference is the same
    da = exact_loglik(a, m, True, eta=5.0) - exact_loglik(a, m, False, eta=5.0)
    db = exact_loglik(b, m, True, eta=5.0) - exact_loglik(b, m, False, eta=5.0)
    assert da == pytest.approx(db, rel=1e-12)


def test_imputed_loglik_is_linear():
    m = benchmark_event_model()
    r = record([confirmed(1.0, 2), adjudicated(2.5, 3, 0.4)], x=-1.0, C=4.0)
    for exact in (True, False):
        fn = exact_loglik if exact else approx_loglik
        l1, l0 = fn(r, m, True, eta=5.0), fn(r, m, False, eta=5.0)
        assert imputed_loglik(r, m, 1.0, exact, eta=5.0) == pytest.approx(l1)
        assert imputed_loglik(r, m, 0.0, exact, eta=5.0) == pytest.approx(l0)
        assert imputed_loglik(r, m, 0.3, exact, eta=5.0) == pytest.approx(0.3 * l1 + 0.7 * l0)


def test_fast_reporting_approaches_classical():
    r = record([confirmed(1.0, 2), confirmed(2.5, 3, 0.01)], x=1.0, C=4.5)
    base = benchmark_event_model()
    classical = classical_loglik(r, base)
    gaps = []
    for lam in (1.0, 10.0, 100.0, 1000.0):
        m = base.with_delays({(1, 3): DelayModel(lam, 1.0, (0.0,)), (2, 3): DelayModel(lam, 1.0, (0.0,))})
        gaps.append(abs(exact_loglik(r, m, eta=5.0) - classical))
    assert np.all(np.diff(gaps) <= 0) and gaps[0] > 0 and gaps[-1] < 1e-3


def test_approximation_error_is_small_for_short_sojourns(oracle_view):
    m = benchmark_event_model()
    _, views = simulate_dataset(ScenarioConfig(n=200, seed=3), 0, ("observed",))
    for rec in views["observed"].records[:50]:
        l_exact = exact_loglik(rec, m, eta=5.0)
        l_app = approx_loglik(rec, m, eta=5.0)
        assert abs(l_exact - l_app) < 0.5
