import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import nb_tail_cap, quantile_scan, rel_err, zinb_pmf_mp, zinb_pmf_scan
from stmgnn.distributions import (
    CLAMP_EPS,
    GaussianParams,
    HeadKind,
    NbParams,
    TruncNormalParams,
    ZinbParams,
    head_family,
    nb_nll,
    truncnorm_cdf,
    truncnorm_mean,
    truncnorm_quantile,
    zinb_mean,
    zinb_nll,
    zinb_nll_grad,
    zinb_pmf,
    zinb_quantile,
    zinb_sample,
)
from stmgnn.errors import NumericalError


def param_grid():
    pis = [0.01, 0.2, 0.5, 0.8, 0.99]
    ps = [0.05, 0.5, 0.95]
    rs = [0.1, 1.0, 5.0, 20.0]
    return [(pi, p, r) for pi in pis for p in ps for r in rs]


# -- pmf ---------------------------------------------------------------------


def test_pmf_zero_branch():
    assert zinb_pmf(0, ZinbParams(0.5, 0.5, 1.0)) == pytest.approx(0.75, abs=1e-15)


def test_pmf_reduces_to_geometric_without_inflation():
    # pi must stay in the open interval; at 1e-15 the excess is invisible
    assert zinb_pmf(2, ZinbParams(1e-15, 0.5, 1.0)) == pytest.approx(0.125, rel=1e-12)


def test_pmf_matches_high_precision_oracle():
    # frozen from zinb_pmf_mp(3, 0.2, 0.3, 2.5) at 40 digits
    expected = 0.0581123137929905523736938834809746600445
    assert float(zinb_pmf_mp(3, 0.2, 0.3, 2.5)) == pytest.approx(expected, rel=1e-15)
    assert zinb_pmf(3, ZinbParams(0.2, 0.3, 2.5)) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("y", [-1, 1.5, np.nan])
def test_pmf_rejects_bad_counts(y):
    with pytest.raises(ValueError):
        zinb_pmf(y, ZinbParams(0.5, 0.5, 1.0))


@pytest.mark.parametrize("params", [(0.0, 0.5, 1.0), (0.5, 1.0, 1.0), (0.5, 0.5, 0.0), (1.2, 0.5, 1.0)])
def test_pmf_rejects_bad_params(params):
    with pytest.raises(ValueError):
        zinb_pmf(1, ZinbParams(*params))


@pytest.mark.parametrize("pi,p,r", param_grid())
def test_pmf_normalizes(pi, p, r):
    cap = nb_tail_cap(p, r)
    total = zinb_pmf(np.arange(cap + 1), ZinbParams(pi, p, r)).sum()
    assert 1 - 1e-6 <= total <= 1 + 1e-12


def test_pmf_matches_recurrence_oracle_on_grid():
    for pi, p, r in param_grid():
        ys = np.arange(60)
        got = zinb_pmf(ys, ZinbParams(pi, p, r))
        want = zinb_pmf_scan(pi, p, r, 59)
        assert np.allclose(got, want, rtol=1e-9, atol=1e-300)


def test_large_counts_stay_finite():
    # direct binomial coefficients overflow well before this
    value = zinb_nll([5000], ZinbParams(0.1, 0.99, 60.0))
    assert math.isfinite(value)


def test_lower_clamp_matches_nb_everywhere():
    # the exact gap at y=0 is eps * (1 - NB(0)), which can round to eps itself,
    # so the strict bound is checked in high precision and the float
    # implementation is checked against that exact gap
    import mpmath

    ys = np.arange(101)
    for _, p, r in param_grid():
        zinb = zinb_pmf(ys, ZinbParams(CLAMP_EPS, p, r))
        nb = stats.nbinom.pmf(ys, r, 1 - p)
        with mpmath.workdps(40):
            nb0 = (1 - mpmath.mpf(p)) ** r
            exact_gap = mpmath.mpf(CLAMP_EPS) * (1 - nb0)
            assert exact_gap < mpmath.mpf("1e-6")
        gaps = np.abs(zinb - nb)
        assert abs(gaps[0] - float(exact_gap)) < 1e-15
        assert np.max(gaps[1:]) < 1e-6


# -- nll ---------------------------------------------------------------------


def test_nll_zero_example():
    assert zinb_nll([0], ZinbParams(0.5, 0.5, 1.0)) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert zinb_nll([0], ZinbParams(0.5, 0.5, 1.0)) == pytest.approx(0.287682, abs=1e-6)


def test_nll_certain_zero_approaches_zero():
    assert zinb_nll([0], ZinbParams(1 - CLAMP_EPS, 0.5, 1.0)) < 2e-6


def test_nll_positive_matches_pmf_log():
    params = ZinbParams(0.1, 0.6, 1.7)
    want = -math.log(zinb_pmf(4, params))
    assert zinb_nll([4], params) == pytest.approx(want, abs=1e-12)
    assert float(-mp_log(zinb_pmf_mp(4, 0.1, 0.6, 1.7))) == pytest.approx(2.504635732817152814956, abs=1e-14)


def mp_log(x):
    import mpmath

    return mpmath.log(x)


def test_nll_reports_non_finite_with_index():
    # log space keeps every valid parameter finite, so drive the guard directly
    from stmgnn.distributions import _check_nll

    with pytest.raises(NumericalError, match=r"index \(2,\)"):
        _check_nll(np.array([0.1, 0.2, np.inf]))


# -- gradients ---------------------------------------------------------------


def test_grad_zero_branch_by_hand():
    d_pi, _, _ = zinb_nll_grad(0, ZinbParams(0.5, 0.5, 1.0))
    assert float(d_pi) == pytest.approx(-0.5 / 0.75, abs=1e-12)


def test_grad_r_vanishes_as_p_goes_to_zero():
    _, _, d_r = zinb_nll_grad(0, ZinbParams(0.3, 1e-9, 2.0))
    assert abs(float(d_r)) < 1e-8


def _random_points(kind, rng, n):
    if kind is HeadKind.ZINB:
        return ZinbParams(rng.uniform(0.05, 0.95, n), rng.uniform(0.05, 0.95, n), rng.uniform(0.2, 10, n))
    if kind is HeadKind.NB:
        return NbParams(rng.uniform(0.05, 0.95, n), rng.uniform(0.2, 10, n))
    if kind is HeadKind.GAUSSIAN:
        return GaussianParams(rng.normal(1, 2, n), rng.uniform(0.3, 3, n))
    return TruncNormalParams(rng.normal(1, 2, n), rng.uniform(0.3, 3, n))


def elementwise_diff(f, x, h=1e-6):
    """Central differences of an elementwise map, one shift for all entries."""
    x = np.asarray(x, float)
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.mark.parametrize("kind", list(HeadKind))
def test_constrained_gradients_match_finite_differences(kind, rng):
    head = head_family(kind)
    params = _random_points(kind, rng, 100)
    y = rng.poisson(2.0, 100)
    y[:30] = 0
    analytic = head.nll_grad(y, params)
    for k in range(head.n_params):
        def f(v, k=k):
            ps = list(params)
            ps[k] = v
            return head.nll(y, head.params_type(*ps), reduction="none")

        numeric = elementwise_diff(f, params[k])
        assert rel_err(analytic[k], numeric) < 1e-4, head.param_names[k]


@pytest.mark.parametrize("kind", list(HeadKind))
def test_raw_gradients_match_finite_differences(kind, rng):
    head = head_family(kind)
    raw = rng.normal(0, 1.5, (100, head.n_params))
    y = rng.poisson(2.0, 100)
    y[:30] = 0
    analytic = head.nll_grad_raw(y, raw)
    for k in range(head.n_params):
        def f(v, k=k):
            shifted = raw.copy()
            shifted[:, k] = v
            return head.nll(y, head.activate(shifted), reduction="none")

        numeric = elementwise_diff(f, raw[:, k])
        assert rel_err(analytic[..., k], numeric) < 1e-4, head.param_names[k]


def test_raw_gradient_is_zero_where_clamped():
    head = head_family("zinb")
    raw = np.array([[40.0, 0.0, 0.0]])
    assert head.nll_grad_raw([0], raw)[0, 0] == 0.0


# -- mean / quantile / sample --------------------------------------------------


def test_mean_examples():
    assert zinb_mean(ZinbParams(0.5, 0.5, 2.0)) == pytest.approx(1.0)
    assert zinb_mean(ZinbParams(1 - CLAMP_EPS, 0.5, 2.0)) < 1e-5


def test_mean_matches_moment_summation():
    y = np.arange(400)
    want = float(np.sum(y * zinb_pmf_scan(0.3, 0.4, 3.0, 399)))
    assert zinb_mean(ZinbParams(0.3, 0.4, 3.0)) == pytest.approx(want, rel=1e-10)


def test_quantile_examples():
    assert zinb_quantile(ZinbParams(0.6, 0.5, 1.0), 0.5) == 0
    assert zinb_quantile(ZinbParams(0.6, 0.5, 1.0), 0.9) == 1
    # brute-force cumulative scan gives 10
    assert quantile_scan(zinb_pmf_scan(0.1, 0.7, 2.0, 200), 0.9) == 10
    assert zinb_quantile(ZinbParams(0.1, 0.7, 2.0), 0.9) == 10


@settings(max_examples=200, deadline=None)
@given(
    pi=st.floats(0.01, 0.99),
    p=st.floats(0.05, 0.95),
    r=st.floats(0.1, 20),
    tau=st.sampled_from([0.1, 0.5, 0.9]),
)
def test_quantile_inversion_property(pi, p, r, tau):
    q = zinb_quantile(ZinbParams(pi, p, r), tau)
    pmf = zinb_pmf_scan(pi, p, r, q)
    cdf_q = pmf.sum()
    cdf_prev = pmf[:-1].sum()
    assert cdf_prev < tau + 1e-9
    assert cdf_q >= tau - 1e-9
    assert q == quantile_scan(zinb_pmf_scan(pi, p, r, nb_tail_cap(p, r, 1e-4)), tau)


def test_sampler_degenerate_and_mean():
    rng = np.random.default_rng(0)
    draws = zinb_sample(ZinbParams(1 - CLAMP_EPS, 0.5, 1.0), rng, size=100_000)
    assert np.mean(draws == 0) > 0.999
    draws = zinb_sample(ZinbParams(1e-12, 0.5, 1.0), rng, size=100_000)
    se = math.sqrt(2.0 / 100_000)  # variance r p / (1-p)^2 = 2
    assert abs(draws.mean() - 1.0) < 3 * se


def test_sampler_is_deterministic():
    params = ZinbParams(0.3, 0.4, 2.0)
    a = zinb_sample(params, np.random.default_rng(7), size=1000)
    b = zinb_sample(params, np.random.default_rng(7), size=1000)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_sampler_chi_square(seed):
    pi, p, r = 0.35, 0.6, 2.5
    draws = zinb_sample(ZinbParams(pi, p, r), np.random.default_rng(seed), size=100_000)
    pmf = zinb_pmf_scan(pi, p, r, 400)
    top = int(np.searchsorted(np.cumsum(pmf), 0.999))
    expected = np.append(pmf[: top + 1], 1 - pmf[: top + 1].sum()) * draws.size
    observed = np.append(np.bincount(np.minimum(draws, top + 1), minlength=top + 2)[: top + 1],
                         np.sum(draws > top))
    _, pvalue = stats.chisquare(observed, expected)
    assert pvalue > 0.001


# -- other heads -------------------------------------------------------------


def test_head_parameter_counts():
    assert head_family("zinb").n_params == 3
    for kind in ("nb", "gaussian", "trunc_normal"):
        assert head_family(kind).n_params == 2
    with pytest.raises(ValueError):
        head_family("poisson")


def test_nb_equals_zinb_at_lower_clamp():
    y = np.arange(30)
    nb = nb_nll(y, NbParams(0.4, 2.0), reduction="none")
    zinb = zinb_nll(y, ZinbParams(CLAMP_EPS, 0.4, 2.0), reduction="none")
    # positive counts differ by -log(1 - eps), the zero cell by less
    assert np.allclose(zinb[1:] - nb[1:], -np.log1p(-CLAMP_EPS), atol=1e-12)
    assert abs(zinb[0] - nb[0]) < 2 * CLAMP_EPS


def test_gaussian_median_is_mu():
    head = head_family("gaussian")
    assert head.quantile(GaussianParams(1.7, 0.3), 0.5) == pytest.approx(1.7)


def test_truncnorm_mean_at_zero_location():
    assert truncnorm_mean(TruncNormalParams(0.0, 1.0)) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-12)
    assert truncnorm_mean(TruncNormalParams(0.0, 1.0)) == pytest.approx(0.7979, abs=1e-4)


def test_truncnorm_quantile_matches_closed_form(rng):
    from scipy.special import ndtr, ndtri

    mu = rng.normal(0, 2, 50)
    sigma = rng.uniform(0.2, 3, 50)
    for tau in (0.1, 0.5, 0.9):
        q = truncnorm_quantile(TruncNormalParams(mu, sigma), tau)
        lower = ndtr(-mu / sigma)
        closed = mu + sigma * ndtri(lower + tau * (1 - lower))
        assert np.allclose(truncnorm_cdf(q, (mu, sigma)), tau, atol=1e-9)
        assert np.allclose(q, closed, atol=1e-6)


def test_truncnorm_density_integrates_to_one():
    from scipy.integrate import quad

    for mu, sigma in [(0.0, 1.0), (-2.0, 0.5), (3.0, 2.0)]:
        head = head_family("trunc_normal")

        def density(x):
            return math.exp(-head.nll([x], TruncNormalParams(mu, sigma)))

        total, _ = quad(density, 0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("kind", list(HeadKind))
def test_pmf_tables_are_distributions(kind, rng):
    head = head_family(kind)
    params = _random_points(kind, rng, 20)
    table = head.pmf_table(params, 400)
    assert np.all(table >= 0)
    assert np.all(table.sum(axis=-1) <= 1 + 1e-12)
    assert np.all(table.sum(axis=-1) > 0.99)
