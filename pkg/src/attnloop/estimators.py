"""Statistics on contribution logs.

Histograms of per-user contribution counts, the discrete stop hazard,
geometric and discrete power-law maximum likelihood fits, popularity ratios
by reverse submission index and by ISO week, a one-sided paired t-test, and
fixed-width / power-of-two binned means.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .ingest import filter_stopped_users

__all__ = [
    "InsufficientDataError",
    "DegenerateVarianceError",
    "ContributionHistogram",
    "HazardCurve",
    "PowerLawFit",
    "ModelComparison",
    "RatioSeries",
    "TTestResult",
    "FixedWidth",
    "Pow2",
    "BinRow",
    "BinnedMeans",
    "contribution_histogram",
    "histogram_from_counts",
    "hazard",
    "continuum_hazard",
    "fit_geometric",
    "fit_powerlaw",
    "compare_geometric_vs_powerlaw",
    "popularity_threshold",
    "reverse_index_ratio",
    "weekly_final_ratio",
    "final_mask",
    "iso_weeks",
    "paired_t_test_less",
    "student_t_cdf",
    "betainc_regularized",
    "binned_mean",
    "binned_mean_arrays",
    "linear_fit",
]


class InsufficientDataError(ValueError):
    pass


class DegenerateVarianceError(InsufficientDataError):
    """All paired differences are identical; ``mean_difference`` keeps the sign."""

    def __init__(self, mean_difference):
        super().__init__(f"paired differences have zero variance (mean difference {mean_difference:+g})")
        self.mean_difference = mean_difference


# -- histograms and hazard -----------------------------------------------------


@dataclass
class ContributionHistogram:
    """``counts[n]`` users made exactly ``n`` contributions."""

    counts: dict
    total_users: int
    excluded: int = 0

    @property
    def empty(self):
        return self.total_users == 0

    def support(self):
        return sorted(self.counts)

    def arrays(self):
        ns = np.array(self.support(), dtype=np.int64)
        return ns, np.array([self.counts[n] for n in ns.tolist()], dtype=np.int64)

    def expand(self):
        ns, cs = self.arrays()
        return np.repeat(ns, cs)

    def ccdf(self, n):
        """Fraction of users with at least ``n`` contributions."""
        return sum(c for m, c in self.counts.items() if m >= n) / self.total_users


def histogram_from_counts(counts, excluded=0):
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 1:
        raise ValueError("contribution counts must be >= 1")
    ns, cs = np.unique(counts, return_counts=True)
    return ContributionHistogram(dict(zip(ns.tolist(), cs.tolist())), int(counts.size), int(excluded))


def _coerce_hist(hist):
    if isinstance(hist, ContributionHistogram):
        return hist
    if isinstance(hist, dict):
        counts = {int(n): int(c) for n, c in hist.items() if c}
        return ContributionHistogram(counts, sum(counts.values()))
    return histogram_from_counts(hist)


def contribution_histogram(log, inactivity_cutoff_seconds):
    """Contribution counts of users inactive for at least the cutoff.

    Users whose last record is later than ``capture_time - cutoff`` are
    treated as still active and only counted in ``excluded``.
    """
    if not len(log):
        raise ValueError("event log is empty")
    log = log.sorted()
    stopped = filter_stopped_users(log, inactivity_cutoff_seconds)
    starts, ends = log.user_bounds()
    sizes = ends - starts
    users = log.user[starts]
    keep = np.fromiter((u in stopped for u in users.tolist()), dtype=bool, count=len(users))
    return histogram_from_counts(sizes[keep], excluded=int((~keep).sum()))


@dataclass
class HazardCurve:
    """Stop probability ``h(n) = N(n) / sum_{m >= n} N(m)`` and the risk set."""

    values: dict
    at_risk: dict = field(default_factory=dict)

    def survival(self, n):
        """``prod_{m < n} (1 - h(m))``: fraction still active at step ``n``."""
        g = 1.0
        for m in sorted(self.values):
            if m >= n:
                break
            g *= 1.0 - self.values[m]
        return g


def hazard(hist):
    hist = _coerce_hist(hist)
    if hist.empty:
        raise InsufficientDataError("empty histogram")
    values, at_risk = {}, {}
    remaining = 0
    for n in sorted(hist.counts, reverse=True):
        remaining += hist.counts[n]
        at_risk[n] = remaining
        values[n] = hist.counts[n] / remaining
    order = sorted(values)
    return HazardCurve({n: values[n] for n in order}, {n: at_risk[n] for n in order})


def continuum_hazard(n, k, n_max):
    """Stop probability for ``N(n) ~ n**-k`` with sums replaced by integrals.

    ``(k - 1) / (n * (1 - (n / n_max)**(k - 1)))``, which tends to
    ``(k - 1) / n`` well below ``n_max``. Kept for comparison with the
    exact :func:`hazard`; not an estimator.
    """
    n = np.asarray(n, dtype=float)
    return (k - 1.0) / (n * (1.0 - (n / n_max) ** (k - 1.0)))


# -- parametric fits -----------------------------------------------------------


def fit_geometric(hist):
    """MLE of the per-step stop probability for lifetimes on ``n >= 1``.

    Note: with ``P(n) = p (1 - p)**(n - 1)`` normalized, ``p`` is the chance
    of stopping after a submission, i.e. ``P(x <= theta)``.
    """
    hist = _coerce_hist(hist)
    if hist.total_users < 1:
        raise InsufficientDataError("empty histogram")
    return hist.total_users / sum(n * c for n, c in hist.counts.items())


@dataclass
class PowerLawFit:
    alpha_hat: float
    x_min: int
    n_tail: int
    log_likelihood: float

    @property
    def stderr(self):
        return (self.alpha_hat - 1.0) / math.sqrt(self.n_tail)


def _tail(hist, x_min, min_tail):
    if x_min < 1 or int(x_min) != x_min:
        raise ValueError(f"x_min must be a positive integer, got {x_min}")
    ns, cs = hist.arrays()
    keep = ns >= x_min
    ns, cs = ns[keep], cs[keep]
    n_tail = int(cs.sum())
    if n_tail < min_tail:
        raise InsufficientDataError(f"{n_tail} observation(s) with n >= {x_min}; need {min_tail}")
    return ns, cs, n_tail


def _zeta_loglik(alpha, ns, cs, x_min, n_tail):
    return float(-alpha * np.dot(cs, np.log(ns)) - n_tail * math.log(special.zeta(alpha, x_min)))


def fit_powerlaw(hist, x_min, min_tail=10):
    """Discrete power-law tail fit (continuity-corrected MLE approximation).

    ``alpha = 1 + n_tail / sum(log(n_i / (x_min - 1/2)))`` over ``n_i >= x_min``.
    The log-likelihood is evaluated under the exact Hurwitz-zeta normalized
    model at that ``alpha``.
    """
    hist = _coerce_hist(hist)
    ns, cs, n_tail = _tail(hist, int(x_min), min_tail)
    s = float(np.dot(cs, np.log(ns / (x_min - 0.5))))
    if s <= 0:
        raise InsufficientDataError("degenerate tail")
    alpha = 1.0 + n_tail / s
    return PowerLawFit(alpha, int(x_min), n_tail, _zeta_loglik(alpha, ns, cs, x_min, n_tail))


@dataclass
class ModelComparison:
    """Per-observation log-likelihood ratio, power law minus geometric.

    Positive favors the power law. ``z`` is the Vuong statistic and
    ``p_value`` its two-sided significance.
    """

    ratio: float
    z: float
    p_value: float
    n_tail: int
    powerlaw: PowerLawFit
    geometric_p: float

    def __float__(self):
        return self.ratio

    def verdict(self, level=0.05):
        if self.p_value >= level:
            return f"inconclusive: neither model is significantly better (p = {self.p_value:.3g})"
        better = "power law" if self.ratio > 0 else "geometric"
        return f"{better} favored (per-observation log-likelihood ratio {self.ratio:+.4g}, p = {self.p_value:.3g})"


def compare_geometric_vs_powerlaw(hist, x_min, min_tail=10):
    """Compare a discrete power law with a geometric law on ``n >= x_min``."""
    hist = _coerce_hist(hist)
    ns, cs, n_tail = _tail(hist, int(x_min), min_tail)
    fit = fit_powerlaw(hist, x_min, min_tail)
    shifted = ns - x_min
    p = n_tail / float(np.dot(cs, shifted + 1))
    log1mp = math.log1p(-p) if p < 1 else 0.0
    geo = math.log(p) + shifted * log1mp
    pl = -fit.alpha_hat * np.log(ns) - math.log(special.zeta(fit.alpha_hat, x_min))
    d = pl - geo
    total = float(np.dot(cs, d))
    mean = total / n_tail
    var = float(np.dot(cs, (d - mean) ** 2)) / n_tail
    if var > 0:
        z = total / math.sqrt(n_tail * var)
        pval = float(special.erfc(abs(z) / math.sqrt(2.0)))
    else:
        z = math.copysign(math.inf, mean) if mean else 0.0
        pval = 0.0 if mean else 1.0
    return ModelComparison(mean, z, pval, n_tail, fit, p)


# -- popularity ----------------------------------------------------------------


def popularity_threshold(attentions, q):
    """Nearest-rank quantile: the ``ceil(q * M)``-th smallest value.

    An item is popular when its attention is strictly above this value.
    """
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    values = np.sort(np.asarray(attentions, dtype=float))
    if not values.size:
        raise ValueError("no attention values")
    rank = math.ceil(round(q * values.size, 9))
    return float(values[max(rank, 1) - 1])


@dataclass
class RatioSeries:
    labels: list
    values: list
    counts: list

    def __len__(self):
        return len(self.values)

    def stderr(self):
        v = np.asarray(self.values, dtype=float)
        c = np.asarray(self.counts, dtype=float)
        return np.sqrt(v * (1.0 - v) / c)


def reverse_index_ratio(log, K, threshold, inactivity_cutoff):
    """Popular fraction of each of the last ``K`` submissions of stopped users.

    Only users with at least ``K`` submissions who have been inactive for
    ``inactivity_cutoff`` seconds count. Labels run ``-K .. -1``; ``-1`` is
    the final submission.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not len(log):
        return RatioSeries([], [], [])
    log = log.sorted()
    stopped = filter_stopped_users(log, inactivity_cutoff)
    starts, ends = log.user_bounds()
    users = log.user[starts].tolist()
    qualify = (ends - starts >= K) & np.fromiter((u in stopped for u in users), dtype=bool, count=len(users))
    last = ends[qualify]
    if not last.size:
        return RatioSeries([], [], [])
    labels, values, counts = [], [], []
    for j in range(K, 0, -1):
        popular = log.x[last - j] > threshold
        labels.append(-j)
        values.append(float(popular.mean()))
        counts.append(int(popular.size))
    return RatioSeries(labels, values, counts)


_EPOCH_WEEKDAY = 3  # 1970-01-01 was a Thursday (Monday = 0)


def iso_weeks(t):
    """ISO-8601 ``(year, week)`` of UTC epoch seconds, as two int arrays."""
    days = np.floor_divide(np.asarray(t, dtype=np.int64), 86_400)
    weekday = (days + _EPOCH_WEEKDAY) % 7
    thursday = days - weekday + 3
    year_start = thursday.astype("datetime64[D]").astype("datetime64[Y]")
    year = year_start.astype(np.int64) + 1970
    week = (thursday - year_start.astype("datetime64[D]").astype(np.int64)) // 7 + 1
    return year, week


def final_mask(log, finality_lag_seconds):
    """Records that are their user's last and at least the lag before capture."""
    log = log.sorted()
    mask = np.zeros(len(log), dtype=bool)
    if not len(log):
        return mask
    _, ends = log.user_bounds()
    mask[ends - 1] = True
    return mask & (log.t <= log.capture_time - finality_lag_seconds)


def weekly_final_ratio(log, threshold, finality_lag_seconds, final=None):
    """Weekly popular ratios of all submissions and of final submissions.

    Returns ``(r, r_f)`` aligned on ISO weeks; weeks without any final
    submission are dropped from both. ``final`` overrides the finality
    flags (one boolean per record of the sorted log).
    """
    log = log.sorted()
    if final is None:
        final = final_mask(log, finality_lag_seconds)
    final = np.asarray(final, dtype=bool)
    if final.shape != (len(log),):
        raise ValueError("final mask must have one flag per record")
    year, week = iso_weeks(log.t)
    key = year * 100 + week
    weeks, inverse = np.unique(key, return_inverse=True)
    if weeks.size < 2:
        raise InsufficientDataError("log spans fewer than 2 ISO weeks")
    popular = log.x > threshold
    n_all = np.bincount(inverse, minlength=weeks.size)
    p_all = np.bincount(inverse, weights=popular, minlength=weeks.size)
    n_fin = np.bincount(inverse, weights=final, minlength=weeks.size)
    p_fin = np.bincount(inverse, weights=final & popular, minlength=weeks.size)
    use = n_fin > 0
    if use.sum() < 2:
        raise InsufficientDataError("fewer than 2 weeks with final submissions")
    labels = [f"{k // 100:04d}-W{k % 100:02d}" for k in weeks[use].tolist()]
    r = RatioSeries(labels, (p_all[use] / n_all[use]).tolist(), n_all[use].astype(int).tolist())
    r_f = RatioSeries(list(labels), (p_fin[use] / n_fin[use]).tolist(), n_fin[use].astype(int).tolist())
    return r, r_f


# -- paired t-test -------------------------------------------------------------


def _betacf(a, b, x, eps=1e-16, max_iter=10_000):
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t, df):
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc_regularized(0.5 * df, 0.5, df / (df + t * t))
    return tail if t < 0 else 1.0 - tail


@dataclass
class TTestResult:
    t_stat: float
    p_value: float
    df: int
    mean_difference: float

    def __iter__(self):
        return iter((self.t_stat, self.p_value))


def paired_t_test_less(x, y):
    """One-sided paired t-test of ``mean(x - y) < 0``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d series of equal length")
    m = x.size
    if m < 2:
        raise InsufficientDataError("need at least 2 pairs")
    d = x - y
    mean = math.fsum(d) / m
    sd = math.sqrt(math.fsum((d - mean) ** 2) / (m - 1))
    if sd == 0.0 or not np.any(d != d[0]):
        raise DegenerateVarianceError(mean)
    t = mean / (sd / math.sqrt(m))
    return TTestResult(t, student_t_cdf(t, m - 1), m - 1, mean)


# -- binned means --------------------------------------------------------------


@dataclass(frozen=True)
class FixedWidth:
    """Bin ``b`` holds keys in ``(w (b - 1), w b]``."""

    width: float

    def __post_init__(self):
        if not self.width >= 1:
            raise ValueError(f"bin width must be >= 1, got {self.width}")

    def bins(self, keys):
        return np.ceil(keys / self.width).astype(np.int64)

    def edges(self, b):
        return self.width * (b - 1), self.width * b


@dataclass(frozen=True)
class Pow2:
    """Bin ``b`` holds keys in ``[2**(b - 1), 2**b)``."""

    def bins(self, keys):
        return np.frexp(keys)[1].astype(np.int64)

    def edges(self, b):
        return 2.0 ** (b - 1), 2.0**b


class BinRow(tuple):
    __slots__ = ()

    def __new__(cls, label, mean, count, key_mean):
        return super().__new__(cls, (label, mean, count, key_mean))

    label = property(lambda self: self[0])
    mean = property(lambda self: self[1])
    count = property(lambda self: self[2])
    key_mean = property(lambda self: self[3])


@dataclass
class BinnedMeans:
    rows: list
    rejected: int = 0

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def columns(self):
        labels = np.array([r.label for r in self.rows])
        return (
            labels,
            np.array([r.key_mean for r in self.rows]),
            np.array([r.mean for r in self.rows]),
            np.array([r.count for r in self.rows]),
        )


def binned_mean_arrays(keys, values, scheme):
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    if keys.shape != values.shape:
        raise ValueError("keys and values differ in length")
    ok = keys > 0
    rejected = int((~ok).sum())
    keys, values = keys[ok], values[ok]
    if not keys.size:
        return BinnedMeans([], rejected)
    b = scheme.bins(keys)
    lo = int(b.min())
    idx = b - lo
    counts = np.bincount(idx)
    sums = np.bincount(idx, weights=values)
    key_sums = np.bincount(idx, weights=keys)
    rows = [
        BinRow(int(i + lo), float(sums[i] / counts[i]), int(counts[i]), float(key_sums[i] / counts[i]))
        for i in np.flatnonzero(counts)
    ]
    return BinnedMeans(rows, rejected)


def binned_mean(pairs, scheme):
    """Mean value per key bin; empty bins are omitted.

    Each row is ``(bin_label, mean, count, key_mean)``. Pairs with
    nonpositive keys are dropped and tallied in ``rejected``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to bin")
    keys, values = zip(*pairs)
    return binned_mean_arrays(keys, values, scheme)


def linear_fit(x, y, weights=None):
    """Weighted least-squares line; returns ``(slope, intercept, r_squared)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.size < 2:
        raise InsufficientDataError("need at least 2 points for a line")
    sw = w.sum()
    mx, my = np.dot(w, x) / sw, np.dot(w, y) / sw
    sxx = np.dot(w, (x - mx) ** 2)
    sxy = np.dot(w, (x - mx) * (y - my))
    syy = np.dot(w, (y - my) ** 2)
    slope = sxy / sxx
    intercept = my - slope * mx
    r2 = 1.0 - np.dot(w, (y - intercept - slope * x) ** 2) / syy if syy > 0 else 1.0
    return float(slope), float(intercept), float(r2)
