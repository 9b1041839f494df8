"""Population simulator.

Every random quantity is drawn from the Philox lane addressed by
``(master_seed, user, step, stream)``, so a contributor's trajectory does not
depend on which other users are simulated, in what order, or on how many
worker threads share the population.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .eventlog import EventLog, FanSnapshot
from .model import AttentionSample, Variant, attention_kernel, noise_from_uniforms
from .rng import (
    STREAM_ARRIVAL,
    STREAM_AUX,
    STREAM_LIFETIME,
    STREAM_NOISE,
    split_seed,
    uniform_pair,
)

__all__ = [
    "ContributorHistory",
    "simulate_contributor",
    "simulate_population",
    "simulate_counts",
    "fan_conversions",
    "fan_snapshot",
    "worker_count",
]

SHARD_SIZE = 1 << 15
NO_CAPTURE = np.iinfo(np.int64).max


@dataclass
class ContributorHistory:
    user_id: object
    samples: list
    stopped: bool
    timestamps: list

    def __len__(self):
        return len(self.samples)


def worker_count(threads=None):
    """Resolve the worker count: explicit value, ``ATTN_LOOP_THREADS``, CPU count."""
    if threads is None:
        env = os.environ.get("ATTN_LOOP_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


# -- numba kernels -------------------------------------------------------------


@njit(nogil=True, cache=True)
def binomial_inverse(u, m, p):
    """Smallest ``k`` with ``P(Binomial(m, p) <= k) >= u``."""
    if m <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return m
    q = 1.0 - p
    ratio = p / q
    mode = int((m + 1) * p)
    if mode > m:
        mode = m
    log_pk = (
        math.lgamma(m + 1.0)
        - math.lgamma(mode + 1.0)
        - math.lgamma(m - mode + 1.0)
        + mode * math.log(p)
        + (m - mode) * math.log1p(-p)
    )
    p_mode = math.exp(log_pk)
    # lower cdf at the mode, summing down until terms vanish
    cdf = p_mode
    pk = p_mode
    k = mode
    while k > 0:
        pk = pk * k / ((m - k + 1) * ratio)
        k -= 1
        cdf += pk
        if pk < cdf * 1e-17:
            break
    if u <= cdf:
        pk = p_mode
        k = mode
        c = cdf
        while k > 0:
            c -= pk
            if u > c:
                return k
            pk = pk * k / ((m - k + 1) * ratio)
            k -= 1
        return 0
    pk = p_mode
    k = mode
    c = cdf
    while k < m:
        pk = pk * (m - k) / (k + 1) * ratio
        k += 1
        c += pk
        if u <= c or pk < 1e-300:
            return k
    return m


@njit(nogil=True, cache=True)
def _walk(icfg, cfg, user, k0, k1, t0, capture, track_time, out_t, out_x, out_f, pos, emit):
    """Run one contributor; returns ``(records_kept, stopped, censored)``."""
    variant = icfg[0]
    family = icfg[1]
    n_cap = icfg[2]
    a = cfg[0]
    theta = cfg[1]
    c0 = cfg[2]
    c1 = cfg[3]
    c2 = cfg[4]
    mu = cfg[5]
    sigma = cfg[6]
    gap_mean = cfg[7]
    fans = 0
    t = t0
    n = 0
    while True:
        n += 1
        if t > capture:
            return n - 1, False, True
        u1, u2 = uniform_pair(n, STREAM_NOISE, user, k0, k1)
        y = noise_from_uniforms(family, mu, sigma, u1, u2)
        x = attention_kernel(variant, a, c0, c1, n, fans, y)
        if emit:
            out_t[pos + n - 1] = t
            out_x[pos + n - 1] = x
            out_f[pos + n - 1] = fans
        if x <= theta:
            return n, True, False
        if n >= n_cap:
            return n, False, False
        if track_time or variant == 2:
            ug, uf = uniform_pair(n, STREAM_AUX, user, k0, k1)
            if variant == 2:
                fans += binomial_inverse(uf, int(math.floor(c0 * y + 0.5)), c2)
            if track_time:
                gap = int(-gap_mean * math.log(ug) + 0.5)
                t += gap if gap > 1 else 1


@njit(nogil=True, cache=True)
def _arrival(user, k0, k1, start, window):
    if window <= 0:
        return start
    u, _ = uniform_pair(0, STREAM_ARRIVAL, user, k0, k1)
    return start + int(math.floor(u * window))


@njit(nogil=True, cache=True)
def _count_shard(icfg, cfg, first, n, k0, k1, start, window, capture, track_time, kept, stopped):
    dummy_i = np.empty(0, dtype=np.int64)
    dummy_f = np.empty(0, dtype=np.float64)
    for i in range(n):
        user = first + i
        t0 = _arrival(user, k0, k1, start, window)
        k, s, _ = _walk(icfg, cfg, user, k0, k1, t0, capture, track_time, dummy_i, dummy_f, dummy_i, 0, False)
        kept[i] = k
        stopped[i] = s


@njit(nogil=True, cache=True)
def _fill_shard(icfg, cfg, first, n, k0, k1, start, window, capture, offsets, out_t, out_x, out_f):
    for i in range(n):
        user = first + i
        t0 = _arrival(user, k0, k1, start, window)
        _walk(icfg, cfg, user, k0, k1, t0, capture, True, out_t, out_x, out_f, offsets[i], True)


@njit(nogil=True, cache=True)
def _lifetime_draws(first, n, k0, k1, out):
    for i in range(n):
        u, _ = uniform_pair(0, STREAM_LIFETIME, first + i, k0, k1)
        out[i] = -math.log(u)


def _pack(params):
    icfg = np.array([int(params.variant), int(params.noise.family), params.n_cap], dtype=np.int64)
    cfg = np.array(
        [
            params.a,
            params.theta,
            params.c0,
            params.c1,
            params.c2,
            params.noise.mu,
            params.noise.sigma,
            params.gap_mean_seconds,
        ],
        dtype=np.float64,
    )
    return icfg, cfg


def _user_key(user_seed):
    if isinstance(user_seed, tuple):
        master, user = user_seed
    else:
        master, user = user_seed, 0
    if int(user) < 0:
        raise ValueError("user index must be nonnegative")
    return split_seed(master), int(user)


# -- public API ----------------------------------------------------------------


def fan_conversions(base_views, params, rng):
    """New fans won from one submission's base (non-fan) audience.

    Conversions are ``Binomial(round(base_views), c2)``; ``base_views`` is the
    ``c0 * y`` part of the attention. Only the base audience converts: if
    fans recruited fans, the fan count would grow geometrically instead of
    linearly in the number of submissions.
    """
    if params.variant != Variant.FANLOOP:
        raise TypeError("fan_conversions applies to the FanLoop variant only")
    if base_views < 0:
        raise ValueError("base_views must be nonnegative")
    if hasattr(rng, "pair"):
        u = rng.pair()[1]
    else:
        u = 1.0 - rng.random()
    return int(binomial_inverse(u, int(math.floor(base_views + 0.5)), params.c2))


def simulate_contributor(params, user_seed, start_time=0):
    """Simulate one contributor until they stop or hit ``n_cap``.

    ``user_seed`` is either an integer master seed (user index 0) or a
    ``(master_seed, user_index)`` pair; the latter reproduces that user's
    trajectory inside :func:`simulate_population` when ``arrival_window``
    is 0.
    """
    (k0, k1), user = _user_key(user_seed)
    icfg, cfg = _pack(params)
    kept = np.zeros(1, dtype=np.int64)
    stopped = np.zeros(1, dtype=np.bool_)
    _count_shard(icfg, cfg, user, 1, k0, k1, int(start_time), 0, NO_CAPTURE, True, kept, stopped)
    m = int(kept[0])
    out_t = np.empty(m, dtype=np.int64)
    out_x = np.empty(m, dtype=np.float64)
    out_f = np.empty(m, dtype=np.int64)
    offsets = np.zeros(1, dtype=np.int64)
    _fill_shard(icfg, cfg, user, 1, k0, k1, int(start_time), 0, NO_CAPTURE, offsets, out_t, out_x, out_f)
    samples = [AttentionSample(i + 1, int(f), float(x)) for i, (f, x) in enumerate(zip(out_f, out_x))]
    return ContributorHistory(user, samples, bool(stopped[0]), out_t.tolist())


def _shards(n_users):
    return [(lo, min(SHARD_SIZE, n_users - lo)) for lo in range(0, n_users, SHARD_SIZE)]


def simulate_population(
    params, n_users, master_seed, start_time, capture_time, arrival_window=None, threads=None
):
    """Simulate ``n_users`` contributors and return their pooled :class:`EventLog`.

    User ``i`` joins at ``start_time + U * arrival_window`` (default window:
    the whole span up to ``capture_time``) and records after ``capture_time``
    are dropped, so late joiners are censored mid-life. ``fans`` holds each
    record's fan count at submission time.
    """
    start_time = int(start_time)
    capture_time = int(capture_time)
    if capture_time <= start_time:
        raise ValueError("capture_time must be after start_time")
    if n_users < 0:
        raise ValueError("n_users must be nonnegative")
    if arrival_window is None:
        arrival_window = capture_time - start_time
    arrival_window = int(arrival_window)
    if arrival_window < 0:
        raise ValueError("arrival_window must be nonnegative")
    meta = {
        "n_users": int(n_users),
        "master_seed": int(master_seed),
        "n_cap": params.n_cap,
        "start_time": start_time,
    }
    if n_users == 0:
        return EventLog.empty(capture_time, capped_users=0, **meta)

    k0, k1 = split_seed(master_seed)
    icfg, cfg = _pack(params)
    shards = _shards(int(n_users))

    def count(shard):
        lo, n = shard
        kept = np.empty(n, dtype=np.int64)
        stopped = np.empty(n, dtype=np.bool_)
        _count_shard(icfg, cfg, lo, n, k0, k1, start_time, arrival_window, capture_time, True, kept, stopped)
        return kept, stopped

    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        counted = list(pool.map(count, shards))
        kept = np.concatenate([c[0] for c in counted])
        capped = int(np.sum(kept == params.n_cap))
        total = int(kept.sum())
        out_t = np.empty(total, dtype=np.int64)
        out_x = np.empty(total, dtype=np.float64)
        out_f = np.empty(total, dtype=np.int64)
        offsets = np.concatenate(([0], np.cumsum(kept)[:-1])).astype(np.int64)

        def fill(shard):
            lo, n = shard
            _fill_shard(
                icfg, cfg, lo, n, k0, k1, start_time, arrival_window, capture_time,
                offsets[lo:lo + n], out_t, out_x, out_f,
            )

        list(pool.map(fill, shards))

    users = np.repeat(np.arange(n_users, dtype=np.int64), kept)
    index = np.arange(total, dtype=np.int64) - np.repeat(offsets, kept)
    items = users * params.n_cap + index
    meta["capped_users"] = capped
    return EventLog(users, items, out_t, out_x, capture_time, out_f, meta)


def simulate_counts(params, n_users, master_seed, method="auto", threads=None, first_user=0):
    """Contribution counts only, without timestamps or attention values.

    ``method="stepwise"`` runs the same per-step process as the population
    simulator. ``method="exact"`` (Iid and Reinforced only) draws each
    lifetime in one shot by inverting the cumulative stop hazard
    ``sum_m -log P(x_m > theta)``; it has the same distribution and costs
    ``O(n_cap)`` setup plus one draw per user, which matters when the
    lifetime tail is heavy. ``"auto"`` picks ``exact`` when available.

    Users are numbered from ``first_user``, so a large population can be
    produced in consecutive chunks. Returns ``(counts, stopped)``;
    ``stopped`` is False for users cut off by ``n_cap``.
    """
    if method == "auto":
        method = "stepwise" if params.variant == Variant.FANLOOP else "exact"
    n_users = int(n_users)
    first_user = int(first_user)
    k0, k1 = split_seed(master_seed)
    shards = _shards(n_users)
    if method == "exact":
        if params.variant == Variant.FANLOOP:
            raise ValueError("exact lifetimes need a closed-form hazard; FanLoop has none")
        steps = np.arange(1, params.n_cap + 1, dtype=np.float64)
        if params.variant == Variant.REINFORCED:
            thresholds = params.theta / (params.a * steps)
        else:
            thresholds = np.full(params.n_cap, params.theta / params.a)
        cumulative = np.cumsum(-params.noise.log_survival(thresholds))
        draws = np.empty(n_users, dtype=np.float64)
        for lo, n in shards:
            _lifetime_draws(first_user + lo, n, k0, k1, draws[lo:lo + n])
        idx = np.searchsorted(cumulative, draws, side="left")
        stopped = idx < params.n_cap
        counts = np.where(stopped, idx + 1, params.n_cap).astype(np.int64)
        return counts, stopped
    if method != "stepwise":
        raise ValueError(f"unknown method {method!r}")
    icfg, cfg = _pack(params)
    counts = np.empty(n_users, dtype=np.int64)
    stopped = np.empty(n_users, dtype=np.bool_)

    def run(shard):
        lo, n = shard
        _count_shard(
            icfg, cfg, first_user + lo, n, k0, k1, 0, 0, NO_CAPTURE, False, counts[lo:lo + n], stopped[lo:lo + n]
        )

    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        list(pool.map(run, shards))
    return counts, stopped


def fan_snapshot(log, snapshot_time):
    """Fan counts at ``snapshot_time`` read off a simulated log.

    A user's count is the ``fans`` value of their first record at or after
    the snapshot (fan counts only change at submissions). Users with no such
    record are left out, which a join treats as zero fans.
    """
    if log.fans is None:
        raise ValueError("log carries no fan counts")
    snapshot_time = int(snapshot_time)
    starts, ends = log.user_bounds()
    entries = {}
    for s, e in zip(starts.tolist(), ends.tolist()):
        j = s + int(np.searchsorted(log.t[s:e], snapshot_time, side="left"))
        if j < e:
            u = log.user[s]
            entries[u.item() if hasattr(u, "item") else u] = int(log.fans[j])
    return FanSnapshot(entries, snapshot_time)
