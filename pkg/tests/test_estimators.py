import functools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import special, stats

from attnloop.eventlog import EventLog
from attnloop.estimators import (
    ContributionHistogram,
    DegenerateVarianceError,
    FixedWidth,
    InsufficientDataError,
    Pow2,
    betainc_regularized,
    binned_mean,
    compare_geometric_vs_powerlaw,
    continuum_hazard,
    contribution_histogram,
    final_mask,
    fit_geometric,
    fit_powerlaw,
    hazard,
    histogram_from_counts,
    iso_weeks,
    paired_t_test_less,
    popularity_threshold,
    reverse_index_ratio,
    weekly_final_ratio,
)
from attnloop.ingest import MONTH_SECONDS
from attnloop.model import sample_noise_array, NoiseKernel
from attnloop.sim import NO_CAPTURE, simulate_counts, simulate_population

from conftest import DAY, START, WEEK, make_params

P_STOP = 1 - math.exp(-1)


def tiny_log(records, capture):
    users, items, ts, xs = zip(*records)
    return EventLog(users, items, ts, xs, capture)


# -- histogram -----------------------------------------------------------------


def test_histogram_single_stopped_user():
    log = tiny_log([(1, 1, 0, 1.0), (1, 2, 10, 1.0), (1, 3, 20, 1.0)], capture=1000)
    h = contribution_histogram(log, 100)
    assert h.counts == {3: 1} and h.excluded == 0


def test_histogram_active_user_excluded():
    log = tiny_log([(1, 1, 0, 1.0), (1, 2, 950, 1.0)], capture=1000)
    h = contribution_histogram(log, 100)
    assert h.counts == {} and h.excluded == 1 and h.empty


def _simulate_excluded_fraction(n_users, p_stop, gap_mean, capture, cutoff, rng):
    # independent numpy re-implementation: geometric lifetimes, rounded exponential gaps
    arrival = np.floor(rng.random(n_users) * capture).astype(np.int64)
    life = rng.geometric(p_stop, n_users)
    excluded = 0
    for a, n in zip(arrival, life):
        gaps = np.maximum(1, np.floor(-gap_mean * np.log(rng.random(n - 1)) + 0.5)).astype(np.int64)
        t = a + np.concatenate(([0], np.cumsum(gaps)))
        last = t[t <= capture][-1]
        excluded += last > capture - cutoff
    return excluded / n_users


def test_excluded_fraction_matches_direct_simulation():
    p = make_params("Iid", a=1.0, theta=0.3, gap_mean_seconds=5 * DAY)
    capture = 365 * DAY
    cutoff = 3 * MONTH_SECONDS
    n = 40_000
    log = simulate_population(p, n, 17, 0, capture)
    h = contribution_histogram(log, cutoff)
    ours = h.excluded / n
    oracle = _simulate_excluded_fraction(n, 1 - math.exp(-0.3), 5 * DAY, capture, cutoff, np.random.default_rng(5))
    se = math.sqrt(2 * oracle * (1 - oracle) / n)
    assert abs(ours - oracle) < 4 * se


# -- hazard --------------------------------------------------------------------


def test_hazard_example():
    assert hazard({1: 50, 2: 25, 3: 25}).values == {1: 0.5, 2: 0.5, 3: 1.0}


@given(st.dictionaries(st.integers(1, 60), st.integers(1, 10**6), min_size=1, max_size=30))
def test_hazard_bounds_and_survival_identity(counts):
    hist = ContributionHistogram(counts, sum(counts.values()))
    hz = hazard(hist)
    assert hz.values[max(counts)] == 1.0
    assert all(0 < v <= 1 for v in hz.values.values())
    for n in range(1, max(counts) + 2):
        assert math.isclose(hz.survival(n), hist.ccdf(n), rel_tol=1e-12, abs_tol=1e-15)


def test_hazard_geometric_is_flat_within_standard_errors():
    counts, _ = simulate_counts(make_params("Iid"), 10**6, 7, method="stepwise")
    hz = hazard(histogram_from_counts(counts))
    for n in range(1, 11):
        se = math.sqrt(P_STOP * (1 - P_STOP) / hz.at_risk[n])
        assert abs(hz.values[n] - P_STOP) < 5 * se


def test_hazard_geometric_via_event_log():
    p = make_params("Iid")
    log = simulate_population(p, 200_000, 8, 0, NO_CAPTURE - 1, arrival_window=0)
    hz = hazard(contribution_histogram(log, DAY))
    for n in range(1, 8):
        assert abs(hz.values[n] - P_STOP) < 5 * math.sqrt(P_STOP * (1 - P_STOP) / hz.at_risk[n])


def _large_reinforced_histogram(n_chunks=10, chunk=10**7):
    total = np.zeros(10**5 + 2, dtype=np.int64)
    for i in range(n_chunks):
        counts, stopped = simulate_counts(make_params(), chunk, 2008, method="exact", first_user=i * chunk)
        total += np.bincount(counts[stopped], minlength=total.size)
    ns = np.flatnonzero(total)
    return ContributionHistogram(dict(zip(ns.tolist(), total[ns].tolist())), int(total.sum()))


@pytest.mark.slow
def test_reinforced_hazard_times_n_tends_to_one():
    # 10^8 users: enough stop events at n = 100 for a +-10% band to be resolvable
    hz = hazard(_large_reinforced_histogram())
    for n in range(10, 101):
        assert 0.9 <= n * hz.values[n] <= 1.1


def test_continuum_hazard_limit():
    assert continuum_hazard(10.0, 2.0, 1e12) == pytest.approx(0.1, rel=1e-9)
    assert continuum_hazard(10.0, 3.0, 1e12) == pytest.approx(0.2, rel=1e-9)


# -- fits ----------------------------------------------------------------------


def test_fit_geometric_examples():
    assert fit_geometric({1: 123}) == 1.0
    assert fit_geometric({1: 2, 2: 1}) == 0.75


def test_fit_geometric_on_iid_simulation():
    counts, _ = simulate_counts(make_params("Iid"), 10**6, 11, method="stepwise")
    assert abs(fit_geometric(histogram_from_counts(counts)) - P_STOP) < 0.002


def test_fit_powerlaw_closed_form():
    fit = fit_powerlaw([2, 2, 2], 2, min_tail=3)
    assert fit.alpha_hat == pytest.approx(1 + 3 / (3 * math.log(2 / 1.5)), abs=1e-12)
    assert fit.n_tail == 3
    assert fit.log_likelihood == pytest.approx(-3 * fit.alpha_hat * math.log(2) - 3 * math.log(special.zeta(fit.alpha_hat, 2)))


def test_fit_powerlaw_needs_ten_tail_points():
    with pytest.raises(InsufficientDataError):
        fit_powerlaw([12] * 9 + [1] * 100, 10)


@functools.lru_cache(maxsize=None)
def _zeta_ccdf(alpha, x_min, table):
    n = np.arange(x_min, x_min + table, dtype=float)
    return special.zeta(alpha, n) / special.zeta(alpha, x_min)


def discrete_powerlaw_sample(alpha, x_min, size, rng, table=10**6):
    """Exact zeta-tail draws by inverting P(N >= n) = zeta(alpha, n) / zeta(alpha, x_min)."""
    ccdf = _zeta_ccdf(alpha, x_min, table)
    u = rng.random(size)
    # N = largest n with ccdf(n) >= u
    idx = np.searchsorted(-ccdf, -u, side="right") - 1
    out = (x_min + idx).astype(float)
    beyond = idx >= table - 1
    out[beyond] = np.floor((x_min + table - 1) * (u[beyond] / ccdf[-1]) ** (-1 / (alpha - 1)))
    return out.astype(np.int64)


def test_discrete_sampler_oracle_is_sane():
    x = discrete_powerlaw_sample(2.5, 10, 200_000, np.random.default_rng(1))
    assert x.min() == 10
    p10 = 10**-2.5 / special.zeta(2.5, 10)
    assert abs(np.mean(x == 10) - p10) < 4 * math.sqrt(p10 * (1 - p10) / x.size)


def test_fit_powerlaw_recovers_exponent():
    x = discrete_powerlaw_sample(2.5, 10, 10**6, np.random.default_rng(2))
    assert abs(fit_powerlaw(x, 10).alpha_hat - 2.5) < 0.05


def test_fit_powerlaw_interval_coverage():
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(100):
        fit = fit_powerlaw(discrete_powerlaw_sample(2.5, 10, 10_000, rng), 10)
        hits += abs(fit.alpha_hat - 2.5) < 1.96 * fit.stderr
    assert hits >= 90


def test_fit_powerlaw_on_reinforced_simulation():
    counts, stopped = simulate_counts(make_params(), 10**6, 12)
    assert abs(fit_powerlaw(counts[stopped], 10).alpha_hat - 2.0) < 0.15


def test_compare_signs():
    geo, _ = simulate_counts(make_params("Iid", theta=0.1), 200_000, 13)
    assert compare_geometric_vs_powerlaw(histogram_from_counts(geo), 10).ratio < 0
    pl, s = simulate_counts(make_params(), 200_000, 14)
    assert compare_geometric_vs_powerlaw(histogram_from_counts(pl[s]), 10).ratio > 0
    with pytest.raises(InsufficientDataError):
        compare_geometric_vs_powerlaw({1: 40, 12: 1}, 10)


# -- popularity ----------------------------------------------------------------


def test_popularity_threshold_examples():
    assert popularity_threshold(range(1, 11), 0.9) == 9
    thr = popularity_threshold([4.0] * 50, 0.9)
    assert thr == 4.0 and sum(x > thr for x in [4.0] * 50) == 0
    y = sample_noise_array(NoiseKernel("Exponential"), 10**6, 77)
    assert abs(popularity_threshold(y, 0.9) - math.log(10)) < 0.01


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200), st.floats(0.01, 0.99))
def test_popularity_threshold_is_nearest_rank(values, q):
    thr = popularity_threshold(values, q)
    k = sum(v <= thr for v in values)
    assert k >= q * len(values) - 1e-9
    assert thr in values


def _user_records(user, xs, t0, step=DAY):
    return [(user, user * 1000 + i, t0 + i * step, x) for i, x in enumerate(xs)]


def test_reverse_index_all_popular():
    recs = []
    for u in range(20):
        recs += _user_records(u, [5.0] * (5 + u % 3), 0)
    log = tiny_log(recs, capture=400 * DAY)
    series = reverse_index_ratio(log, 5, 1.0, 90 * DAY)
    assert series.labels == [-5, -4, -3, -2, -1]
    assert series.values == [1.0] * 5 and series.counts == [20] * 5


def test_reverse_index_skips_short_and_active_users():
    recs = _user_records(1, [5, 5, 5, 5, 0], 0) + _user_records(2, [5, 5], 0) + _user_records(3, [0] * 6, 390 * DAY)
    log = tiny_log(recs, capture=400 * DAY)
    s = reverse_index_ratio(log, 5, 1.0, 90 * DAY)
    assert s.counts == [1] * 5 and s.values == [1, 1, 1, 1, 0]
    assert len(reverse_index_ratio(log, 7, 1.0, 90 * DAY)) == 0


def test_reverse_index_large_fixture():
    # 30,157 qualifying users; 1,300 popular 5th-last and 603 popular last stories
    n = 30_157
    recs = []
    for u in range(n):
        xs = [0.0] * 5
        if u < 1300:
            xs[0] = 10.0
        if u < 603:
            xs[4] = 10.0
        recs += _user_records(u, xs, 0)
    log = tiny_log(recs, capture=200 * DAY)
    s = reverse_index_ratio(log, 5, 1.0, 90 * DAY)
    assert s.counts[0] == n
    assert s.values[0] > 0.04
    assert s.values[-1] == pytest.approx(0.02, abs=0.0005)


@pytest.fixture(scope="module")
def dated_logs():
    capture = START + 52 * WEEK + 3 * MONTH_SECONDS - 1
    out = {}
    for name in ("Reinforced", "Iid"):
        out[name] = simulate_population(make_params(name), 100_000, 2008, START, capture)
    return out


def test_reverse_index_reinforced_nonincreasing(dated_logs):
    log = dated_logs["Reinforced"]
    s = reverse_index_ratio(log, 5, popularity_threshold(log.x, 0.9), 3 * MONTH_SECONDS)
    v, se = np.array(s.values), s.stderr()
    assert np.all(np.diff(v) <= 2 * np.hypot(se[1:], se[:-1]))
    assert v[-1] < v[:-1].min()


def test_reverse_index_iid_flat_before_final(dated_logs):
    # under the threshold rule the last submission always failed, so only -K..-2 can be flat
    log = dated_logs["Iid"]
    thr = popularity_threshold(log.x, 0.9)
    s = reverse_index_ratio(log, 5, thr, 3 * MONTH_SECONDS)
    v, c = np.array(s.values[:-1]), np.array(s.counts[:-1])
    pooled = v @ c / c.sum()
    se = np.sqrt(pooled * (1 - pooled) / c)
    assert np.all(np.abs(v - pooled) < 3 * se)
    assert s.values[-1] == 0.0


# -- weekly ratios -------------------------------------------------------------


def test_iso_weeks_match_datetime():
    import datetime

    ts = np.random.default_rng(0).integers(0, 2**31, 5000)
    years, weeks = iso_weeks(ts)
    for t, y, w in zip(ts.tolist(), years.tolist(), weeks.tolist()):
        iso = datetime.datetime.fromtimestamp(t, datetime.timezone.utc).isocalendar()
        assert (iso[0], iso[1]) == (y, w)


def test_weekly_final_nonpopular_finals():
    recs = []
    for u in range(30):
        t0 = START + (u % 3) * WEEK
        recs += _user_records(u, [5.0, 5.0, 0.5], t0, step=DAY)
    log = tiny_log(recs, capture=START + 40 * WEEK)
    r, r_f = weekly_final_ratio(log, 1.0, 90 * DAY)
    assert len(r) == len(r_f) >= 2
    assert r_f.values == [0.0] * len(r_f)
    assert all(v > 0 for v in r.values)


def test_weekly_final_needs_two_weeks():
    log = tiny_log(_user_records(1, [1.0, 2.0], START), capture=START + 30 * WEEK)
    with pytest.raises(InsufficientDataError):
        weekly_final_ratio(log, 1.5, 90 * DAY)


def test_weekly_final_reinforced_majority(dated_logs):
    log = dated_logs["Reinforced"]
    r, r_f = weekly_final_ratio(log, popularity_threshold(log.x, 0.9), 3 * MONTH_SECONDS)
    assert len(r) == 52
    assert np.mean(np.array(r_f.values) < np.array(r.values)) > 0.5


def test_weekly_final_iid_finals_never_popular(dated_logs):
    log = dated_logs["Iid"]
    thr = popularity_threshold(log.x, 0.9)
    assert thr > 1.0  # above theta, so a failed (final) submission cannot be popular
    r, r_f = weekly_final_ratio(log, thr, 3 * MONTH_SECONDS)
    assert r_f.values == [0.0] * len(r_f)
    diff = np.array(r_f.values) - np.array(r.values)
    assert np.all(diff < 0)
    oracle = np.mean(log.x > thr)
    assert abs(-diff.mean() - oracle) < 0.01


def test_final_mask_respects_lag():
    log = tiny_log(_user_records(1, [1, 1], 0) + _user_records(2, [1], 95 * DAY), capture=100 * DAY)
    assert final_mask(log, 10 * DAY).tolist() == [False, True, False]


# -- paired t-test -------------------------------------------------------------


def test_t_test_degenerate():
    with pytest.raises(DegenerateVarianceError) as err:
        paired_t_test_less([1, 2, 3], [2, 3, 4])
    assert err.value.mean_difference == -1


def test_t_test_symmetric_differences():
    res = paired_t_test_less([1, 5, 3, 7], [2, 4, 4, 6])
    assert res.t_stat == 0.0 and res.p_value == 0.5


def test_t_test_reference_values():
    t, p = paired_t_test_less([1, 2, 3, 4], [2, 3, 4, 6])
    ref = stats.ttest_rel([1, 2, 3, 4], [2, 3, 4, 6], alternative="less")
    assert t == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, abs=1e-12)
    assert t == -5.0
    # mpmath: P(T_3 <= -5) = I_{3/(3+25)}(3/2, 1/2) / 2
    assert p == pytest.approx(float(mpmath.betainc(1.5, 0.5, 0, mpmath.mpf(3) / 28, regularized=True) / 2), abs=1e-14)


@settings(max_examples=200)
@given(
    st.floats(0.01, 500),
    st.floats(0.01, 500),
    st.floats(0, 1),
)
def test_betainc_against_mpmath(a, b, x):
    ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert betainc_regularized(a, b, x) == pytest.approx(ref, abs=1e-10)


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=60))
def test_t_test_antisymmetry(pairs):
    x, y = map(np.array, zip(*pairs))
    d = x - y
    assume(np.ptp(d) > 1e-6 * max(1.0, np.abs(d).max()))
    p_xy = paired_t_test_less(x, y).p_value
    p_yx = paired_t_test_less(y, x).p_value
    assert abs(p_xy + p_yx - 1) < 1e-10
    ref = stats.ttest_rel(x, y, alternative="less").pvalue
    assert p_xy == pytest.approx(ref, abs=1e-8)


# -- binned means --------------------------------------------------------------


def test_binning_examples():
    fw = FixedWidth(20)
    assert [r.label for r in binned_mean([(20, 1.0), (21, 1.0)], fw)] == [1, 2]
    assert [r.label for r in binned_mean([(4, 1.0), (3, 1.0)], Pow2())] == [2, 3]
    for scheme in (fw, Pow2()):
        (row,) = binned_mean([(5, 7.0)], scheme)
        assert row[:3] == (row.label, 7.0, 1)


def test_binning_rejects_nonpositive_keys():
    out = binned_mean([(0, 1.0), (-3, 2.0), (1, 5.0)], Pow2())
    assert out.rejected == 2 and [tuple(r[:3]) for r in out] == [(1, 5.0, 1)]


@given(st.lists(st.tuples(st.integers(-5, 10**6), st.floats(-1e3, 1e3)), min_size=1, max_size=300),
       st.sampled_from([FixedWidth(1), FixedWidth(20), FixedWidth(7.5), Pow2()]))
def test_binning_partition(pairs, scheme):
    out = binned_mean(pairs, scheme)
    in_range = [p for p in pairs if p[0] > 0]
    assert sum(r.count for r in out) == len(in_range)
    assert out.rejected == len(pairs) - len(in_range)
    for key, _ in in_range:
        owners = [r.label for r in out if scheme.edges(r.label)[0] < key <= scheme.edges(r.label)[1]] \
            if isinstance(scheme, FixedWidth) else \
            [r.label for r in out if scheme.edges(r.label)[0] <= key < scheme.edges(r.label)[1]]
        assert len(owners) == 1
    for b in range(1, 6):
        assert scheme.edges(b)[1] == scheme.edges(b + 1)[0]
